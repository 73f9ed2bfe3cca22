import numpy as np
import pytest

from xdrec.data import Dataset
from xdrec.model import Variant, fusion_width
from xdrec.numerics import PARAM_ORDER, ModelParams

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict = {}


def make_params(m=4, n_t=5, n_s=3, d=3, L=7, variant=Variant.FULL, scale=0.3, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    shapes = {
        "P": (m, d), "Q": (n_t, d), "H": (n_s, d), "A": (L, 2 * d), "C": (L, d),
        "W": (2 * d, d), "b": (d,), "W_o": (d, d), "W_z": (d, d), "W_c": (d, d),
        "h": (fusion_width(variant, d),),
    }
    return ModelParams(**{k: rng.normal(0, scale, size=shapes[k]).astype(dtype) for k in PARAM_ORDER})


@pytest.fixture
def tiny_dataset():
    """Three users, six target items, four source items, hand-written docs."""
    train = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 3), (1, 4), (2, 0), (2, 5)]
    val = [(0, 3), (1, 0)]
    test = [(0, 4), (1, 5)]
    source = [[0, 1], [2], []]
    doc_store = {(0, 0): np.array([0, 1, 2]), (1, 3): np.array([3, 4])}
    item_docs = {0: np.array([0, 1, 2, 5]), 1: np.array([5, 6]), 3: np.array([3, 4])}
    return Dataset(3, 6, 4, train, val, test, source, doc_store, item_docs, max_doc_len=10, L=7)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")

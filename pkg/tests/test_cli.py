import numpy as np
import pytest

from xdrec.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, blob_hash, main, read_config
from xdrec.data import save_dataset
from xdrec.model import Variant
from xdrec.numerics import PARAM_ORDER, ModelParams, save_checkpoint

SYNTH = "m=40\nn_target=60\nn_source=30\nvocab_size=300\ninteractions=6\nsource_per_user=5\nseed=3\n"


def run_dirs(root):
    return sorted(p for p in root.iterdir() if p.is_dir())


@pytest.fixture(scope="module")
def synth_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "s.cfg").write_text(SYNTH)
    assert main(["--runs", str(root / "runs"), "synth", "--config", str(root / "s.cfg"),
                 "--out", str(root / "ds")]) == EXIT_OK
    (root / "h.cfg").write_text("d=8\nepochs=2\nlr=0.01\n")
    return root


def oracle_params():
    """CF-only weights under which a user's test item is the only candidate
    with a positive hidden unit."""
    z = lambda *s: np.zeros(s)
    p = ModelParams(P=z(3, 2), Q=z(6, 2), H=z(4, 2), A=z(7, 4), C=z(7, 2), W=z(4, 2), b=np.full(2, -1.5),
                    W_o=z(2, 2), W_z=np.eye(2), W_c=z(2, 2), h=np.ones(2))
    p.P[0, 0] = p.P[1, 1] = 1.0
    p.Q[4, 0] = p.Q[5, 1] = 1.0
    p.W[0, 0] = p.W[2, 0] = p.W[1, 1] = p.W[3, 1] = 1.0
    return ModelParams(**{k: getattr(p, k).astype(np.float32) for k in PARAM_ORDER})


class TestConfig:
    def test_read_config(self, tmp_path):
        f = tmp_path / "c.cfg"
        f.write_text("# comment\nd = 16\nlr=0.01  # inline\nname=abc\n")
        assert read_config(f) == {"d": 16, "lr": 0.01, "name": "abc"}

    def test_blob_hash_matches_git(self):
        # `printf 'hello\n' | git hash-object --stdin`
        assert blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


class TestPipeline:
    def test_train_eval_inspect(self, synth_data, capsys):
        runs = synth_data / "runs_a"
        args = ["--runs", str(runs)]
        assert main(args + ["train", "--data", str(synth_data / "ds"), "--config", str(synth_data / "h.cfg"),
                            "--variant", "FULL", "--seed", "1"]) == EXIT_OK
        (run,) = run_dirs(runs)
        assert {p.name for p in run.iterdir()} == {"checkpoint.bin", "trainlog.csv", "timing.csv", "manifest.txt"}
        manifest = (run / "manifest.txt").read_text()
        assert "command=train" in manifest and "config.d=8" in manifest and "input_hash=" in manifest
        assert run.name.endswith("-s1")

        capsys.readouterr()
        assert main(args + ["eval", "--checkpoint", str(run / "checkpoint.bin"), "--data",
                            str(synth_data / "ds"), "--workers", "2"]) == EXIT_OK
        out = capsys.readouterr().out
        assert out.startswith("K,hr,ndcg,mrr\n5,") and out.count("\n") == 4
        (ev,) = [d for d in run_dirs(runs) if d != run]
        assert (ev / "per_user.tsv").read_text().startswith("user_id\tp_u\tn_train\n")

        assert main(args + ["inspect", "--checkpoint", str(run / "checkpoint.bin"), "--data",
                            str(synth_data / "ds"), "--user", "0", "--item", "1"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "word\tp" in out and "source_item\talpha" in out

    def test_train_twice_gives_identical_log(self, synth_data):
        runs = synth_data / "runs_b"
        for _ in range(2):
            assert main(["--runs", str(runs), "train", "--data", str(synth_data / "ds"), "--config",
                         str(synth_data / "h.cfg")]) == EXIT_OK
        a, b = run_dirs(runs)
        assert (a / "trainlog.csv").read_bytes() == (b / "trainlog.csv").read_bytes()
        assert (a / "checkpoint.bin").read_bytes() == (b / "checkpoint.bin").read_bytes()

    def test_eval_oracle_fixture(self, tmp_path, tiny_dataset, capsys):
        save_dataset(tiny_dataset, tmp_path / "ds")
        save_checkpoint(tmp_path / "oracle.bin", oracle_params(), Variant.CF_ONLY)
        assert main(["--runs", str(tmp_path / "runs"), "eval", "--checkpoint", str(tmp_path / "oracle.bin"),
                     "--data", str(tmp_path / "ds")]) == EXIT_OK
        assert "\n10,1.0,1.0,1.0\n" in capsys.readouterr().out

    def test_prepare_from_raw_files(self, synth_data, capsys):
        raw = synth_data / "ds" / "raw"
        assert main(["--runs", str(synth_data / "runs_c"), "prepare", "--target", str(raw / "target.tsv"),
                     "--source", str(raw / "source.tsv"), "--docs", str(raw / "docs.tsv"),
                     "--stopwords", str(raw / "stopwords.txt"), "--vocab-size", "200",
                     "--out", str(synth_data / "prepared")]) == EXIT_OK
        assert "users=40\ttarget_items=" in capsys.readouterr().out
        assert len((synth_data / "prepared" / "vocab.tsv").read_text().splitlines()) == 200

    def test_ablate(self, synth_data, capsys):
        assert main(["--runs", str(synth_data / "runs_d"), "ablate", "--data", str(synth_data / "ds"),
                     "--config", str(synth_data / "h.cfg"), "--set", "epochs=1", "--seeds", "0,1",
                     "--cutoffs", "10"]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "variant,hr@10,ndcg@10,mrr@10"
        assert [r.split(",")[0] for r in lines[1:]] == [v.name for v in Variant]

    def test_gradcheck(self, tmp_path, capsys):
        assert main(["--runs", str(tmp_path), "gradcheck", "--fixtures", "1"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "FAIL" not in out and out.count("PASS") == 11 + 8 + 9 + 6
        assert "NO_M,A,,0,n/a" in out


class TestExitCodes:
    def test_usage_errors(self, synth_data, tmp_path):
        runs = ["--runs", str(tmp_path)]
        assert main(runs + ["train", "--data", str(synth_data / "ds"), "--set", "colour=3"]) == EXIT_USAGE
        assert main(runs + ["train", "--data", str(synth_data / "ds"), "--variant", "XL"]) == EXIT_USAGE
        assert main(runs + ["synth", "--set", "w_x=0.9", "--set", "w_t=0.9"]) == EXIT_USAGE
        with pytest.raises(SystemExit) as e:
            main(["frobnicate"])
        assert e.value.code == EXIT_USAGE

    def test_data_errors(self, synth_data, tmp_path):
        runs = ["--runs", str(tmp_path)]
        assert main(runs + ["train", "--data", str(tmp_path / "missing")]) == EXIT_DATA
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"garbage")
        assert main(runs + ["eval", "--checkpoint", str(bad), "--data", str(synth_data / "ds")]) == EXIT_DATA
        small = tmp_path / "small.bin"
        save_checkpoint(small, oracle_params(), Variant.CF_ONLY)
        assert main(runs + ["eval", "--checkpoint", str(small), "--data", str(synth_data / "ds")]) == EXIT_DATA

    def test_numeric_failure(self, tmp_path):
        assert main(["--runs", str(tmp_path), "gradcheck", "--fixtures", "1", "--tol", "0"]) == EXIT_NUMERIC

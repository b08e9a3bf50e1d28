import json

import numpy as np
import pytest

from lacl import checks, cli
from lacl.checks import CheckResult
from lacl.config import RunConfig, load_config
from lacl.data import read_embeddings
from lacl.errors import InvalidConfigError
from lacl.trainer import FINGERPRINTS

TINY = """\
[run]
seed = 3

[data]
slides_per_class = 4
patches_per_slide = 10

[model]
hidden_dim = 16
backbone_dim = 8

[train]
epochs = 2
batch_size = 16
queue_capacity = 48
"""


@pytest.fixture
def tiny(tmp_path):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY)
    return cfg


@pytest.fixture
def dataset(tmp_path, tiny):
    assert cli.main(["gen", "--config", str(tiny), "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data"


def run(*args):
    return cli.main([str(a) for a in args])


class TestConfig:
    def test_defaults(self, tmp_path):
        path = tmp_path / "empty.ini"
        path.write_text("")
        assert load_config(path) == RunConfig().resolved()

    def test_values_parsed(self, tiny):
        cfg = load_config(tiny)
        assert cfg.seed == 3 and cfg.data.seed == 3 and cfg.train.seed == 3
        assert cfg.train.dims.hidden_dim == 16 and cfg.train.dims.input_dim == cfg.data.dim
        assert cfg.train.batch_size == 16 and cfg.data.patches_per_slide == 10

    def test_ini_round_trip(self, tmp_path, tiny):
        cfg = load_config(tiny).with_overrides(mode="moco-baseline")
        path = tmp_path / "again.ini"
        path.write_text(cfg.to_ini())
        assert load_config(path) == cfg

    def test_optional_fields(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[train]\nwarmup_steps = 5\nqrs_temperature = none\ninclude_positive = false\n"
                        "aug_sigma = 0.2\n")
        cfg = load_config(path)
        assert cfg.train.warmup_steps == 5 and cfg.train.qrs_temperature is None
        assert cfg.train.include_positive is False and cfg.train.augmentation.gaussian_sigma == 0.2

    @pytest.mark.parametrize("text", ["[train]\nbogus = 1\n", "[extra]\n", "[train]\nepochs = many\n",
                                      "[train]\nepochs = 2.5\n", "[train]\nmode = simclr\n",
                                      "[data]\nnoise = -1\n", "no section\n", "[model]\ninput_dim = 4\n",
                                      "[train]\ninclude_positive = maybe\n"])
    def test_rejects(self, tmp_path, text):
        path = tmp_path / "bad.ini"
        path.write_text(text)
        with pytest.raises(InvalidConfigError):
            load_config(path)


class TestGen:
    def test_counts(self, dataset):
        ids, patches = read_embeddings(dataset / "patches.lemb")
        assert patches.shape == (3 * 4 * 10, 32)
        manifest = json.loads((dataset / "manifest.json").read_text())
        assert manifest["command"] == "gen" and manifest["seed"] == 3
        assert set(manifest["artifacts"]) == {"patches.lemb", "patches.csv", "slides.csv", "dataset.json"}

    def test_byte_identical_rerun(self, tmp_path, tiny, dataset):
        assert run("gen", "--config", tiny, "--out", tmp_path / "again") == 0
        for name in ("patches.lemb", "patches.csv", "slides.csv", "dataset.json"):
            assert (dataset / name).read_bytes() == (tmp_path / "again" / name).read_bytes()

    def test_seed_override(self, tmp_path, tiny, dataset):
        assert run("gen", "--config", tiny, "--seed", 4, "--out", tmp_path / "s4") == 0
        assert (dataset / "patches.lemb").read_bytes() != (tmp_path / "s4" / "patches.lemb").read_bytes()

    def test_malformed_config_leaves_nothing(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[train]\nepochs = -\n")
        assert run("gen", "--config", bad, "--out", tmp_path / "out") == 2
        assert not (tmp_path / "out").exists()

    def test_missing_config_is_io(self, tmp_path):
        assert run("gen", "--config", tmp_path / "nope.ini", "--out", tmp_path / "out") == 3


class TestTrainExtractEval:
    def test_pipeline(self, tmp_path, tiny, dataset, capsys):
        run_dir, emb_dir, rep_dir = tmp_path / "run", tmp_path / "emb", tmp_path / "rep"
        assert run("train", "--config", tiny, "--data", dataset, "--out", run_dir, "--mode", "moco-baseline") == 0
        log = [json.loads(ln) for ln in (run_dir / "metrics.jsonl").read_text().splitlines()]
        assert {r["fingerprint"] for r in log} == {FINGERPRINTS["moco-baseline"]}
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["config"]["train"]["mode"] == "moco-baseline"

        assert run("extract", "--checkpoint", run_dir / "final.ckpt", "--data", dataset, "--out", emb_dir) == 0
        ids, feats = read_embeddings(emb_dir / "embeddings.lemb")
        assert feats.shape == (120, 8)

        assert run("eval", "--features", emb_dir / "embeddings.lemb", "--data", dataset, "--out", rep_dir) == 0
        records = [json.loads(ln) for ln in (rep_dir / "report.jsonl").read_text().splitlines()]
        assert {r["probe"] for r in records} == {"lesion_linear", "lesion_knn", "bag_mean", "bag_attention"}
        for r in records:
            assert {"accuracy", "macro_auc", "macro_f1"} <= set(r)
        assert "macro-F1" in capsys.readouterr().out

        assert run("eval", "--checkpoint", run_dir / "final.ckpt", "--data", dataset, "--out", tmp_path / "rep2") == 0
        assert (tmp_path / "rep2" / "report.jsonl").read_bytes() == (rep_dir / "report.jsonl").read_bytes()

    def test_resume(self, tmp_path, tiny, dataset):
        assert run("train", "--config", tiny, "--data", dataset, "--out", tmp_path / "full") == 0
        assert run("train", "--config", tiny, "--data", dataset, "--out", tmp_path / "part", "--max-steps", 3) == 0
        partial = tmp_path / "part" / "partial_000003.ckpt"
        assert partial.exists()
        assert run("train", "--config", tiny, "--data", dataset, "--out", tmp_path / "part", "--resume", partial) == 0
        assert (tmp_path / "part" / "final.ckpt").read_bytes() == (tmp_path / "full" / "final.ckpt").read_bytes()

    def test_missing_data(self, tmp_path, tiny):
        assert run("train", "--config", tiny, "--data", tmp_path / "nowhere", "--out", tmp_path / "r") == 3

    def test_dimension_mismatch(self, tmp_path, tiny, dataset):
        other = tmp_path / "wide.ini"
        other.write_text(TINY.replace("patches_per_slide = 10", "patches_per_slide = 10\ndim = 12"))
        assert run("gen", "--config", other, "--out", tmp_path / "wide") == 0
        assert run("train", "--config", other, "--data", tmp_path / "wide", "--out", tmp_path / "r") == 0
        assert run("extract", "--checkpoint", tmp_path / "r" / "final.ckpt", "--data", dataset,
                   "--out", tmp_path / "x") == 2
        assert run("eval", "--checkpoint", tmp_path / "r" / "final.ckpt", "--data", dataset,
                   "--out", tmp_path / "e") == 2

    def test_corrupt_checkpoint(self, tmp_path, dataset):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOPE" + bytes(40))
        assert run("extract", "--checkpoint", bad, "--data", dataset, "--out", tmp_path / "x") == 2

    def test_divergence_exit_code(self, tmp_path, tiny, dataset):
        cfg = tmp_path / "hot.ini"
        cfg.write_text(TINY + "lr = 1e300\n")
        with np.errstate(all="ignore"):
            assert run("train", "--config", cfg, "--data", dataset, "--out", tmp_path / "r") == 4

    def test_empty_queue_without_warmup(self, tmp_path, tiny, dataset):
        cfg = tmp_path / "cold.ini"
        cfg.write_text(TINY + "queue_init = empty\nwarmup_steps = 0\n")
        assert run("train", "--config", cfg, "--data", dataset, "--out", tmp_path / "r") == 4

    def test_threads_flag(self, tmp_path, tiny, dataset):
        assert run("train", "--config", tiny, "--data", dataset, "--out", tmp_path / "r", "--threads", 1) == 0
        assert run("train", "--config", tiny, "--data", dataset, "--out", tmp_path / "q", "--threads", 0) == 2


class TestCompare:
    def test_table(self, tmp_path, tiny, dataset, capsys):
        out = tmp_path / "cmp"
        assert run("compare", "--config", tiny, "--data", dataset, "--out", out) == 0
        lines = (out / "comparison.txt").read_text().splitlines()
        assert lines[0].split() == ["mode", "ACC", "macro-AUC", "macro-F1"]
        assert [ln.split()[0] for ln in lines[1:]] == ["lacl", "lacl-no-qrs", "moco-baseline"]
        assert all(len(ln.split()) == 4 for ln in lines[1:])
        records = [json.loads(ln) for ln in (out / "comparison.jsonl").read_text().splitlines()]
        assert len({r["dataset_fingerprint"] for r in records}) == 1
        assert len({r["split_fingerprint"] for r in records}) == 1
        assert capsys.readouterr().out.splitlines() == lines

    def test_failing_arm(self, tmp_path, tiny, dataset):
        cfg = tmp_path / "cold.ini"
        cfg.write_text(TINY + "queue_init = empty\nwarmup_steps = 0\n")
        out = tmp_path / "cmp"
        assert run("compare", "--config", cfg, "--data", dataset, "--out", out) == 4
        manifest = json.loads((out / "manifest.json").read_text())
        assert set(manifest["inputs"]["arm_status"]) == {"lacl", "lacl-no-qrs", "moco-baseline"}
        assert manifest["inputs"]["arm_status"]["lacl"].startswith("failed")
        assert "failed" in (out / "comparison.txt").read_text()


class TestCheck:
    def test_qrs_and_queue(self, capsys):
        assert run("check", "--qrs", "--queue") == 0
        out = capsys.readouterr().out
        assert "qrs: PASS 100/100" in out and "queue: PASS 10000/10000" in out

    def test_failure_serialized(self, tmp_path, monkeypatch):
        def broken(seed=0):
            return CheckResult("qrs", passed=0, total=1, failures=[{"batch": 0, "keys": [[1.0, 0.0]]}])

        monkeypatch.setitem(checks.SUITES, "qrs", broken)
        monkeypatch.setattr(cli, "SUITES", checks.SUITES)
        dump = tmp_path / "fail.json"
        assert run("check", "--qrs", "--out", dump) == 5
        assert json.loads(dump.read_text()) == {"qrs": [{"batch": 0, "keys": [[1.0, 0.0]]}]}


class TestEnvironment:
    def test_bad_log_level(self, monkeypatch, tmp_path, tiny):
        monkeypatch.setenv("LACL_LOG_LEVEL", "loud")
        assert run("gen", "--config", tiny, "--out", tmp_path / "d") == 2

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["train", "--mode", "simclr", "--out", "x"])
        assert exc.value.code == 2

import csv
import json
import statistics

import numpy as np
import pytest

from embadv import harness
from embadv.harness import (ConfigError, ExperimentConfig, compare, config_hash, experiment_from_settings,
                            main, parse_config_text, resolve_settings, strip_wall_clock)
from embadv.model import load_checkpoint

SMALL = ["--num-examples", "120", "--max-epochs", "2", "--key-tokens", "8"]


def read_tree(root):
    """Relative path -> parsed content with wall-clock fields removed."""
    out = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = str(path.relative_to(root))
        if path.suffix == ".json":
            out[rel] = strip_wall_clock(json.loads(path.read_text()))
        elif path.suffix == ".csv":
            rows = list(csv.DictReader(path.open()))
            out[rel] = [{k: v for k, v in r.items() if k not in harness.WALL_CLOCK_FIELDS} for r in rows]
        else:
            out[rel] = path.read_bytes()
    return out


class TestSettings:
    def test_defaults_are_reference_experiment(self):
        cfg = experiment_from_settings(resolve_settings())
        assert cfg == ExperimentConfig()
        assert cfg.data.label_noise_rate == 0.05 and cfg.data.vocab_size == 64
        assert cfg.seeds == (0, 1, 2, 3, 4)
        assert cfg.attack.steps == 5 and cfg.attack.eta == pytest.approx(0.0125)

    def test_key_value_file(self):
        raw = parse_config_text("# comment\nlearning_rate = 0.1\nobjectives = adv, alice  # two\n\n")
        assert raw == {"learning_rate": "0.1", "objectives": "adv, alice"}

    def test_precedence(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"learning_rate": 0.1, "seeds": [3, 4], "batch_size": 8}))
        s = resolve_settings(path, {"learning_rate": "0.2"})
        assert s["learning_rate"] == 0.2
        assert s["batch_size"] == 8
        assert s["seeds"] == (3, 4)

    def test_seed_count_starts_at_seed(self):
        cfg = experiment_from_settings(resolve_settings(None, {"seeds": "3", "seed": "10"}))
        assert cfg.seeds == (10, 11, 12)
        cfg = experiment_from_settings(resolve_settings(None, {"seeds": "0,7"}))
        assert cfg.seeds == (0, 7)

    @pytest.mark.parametrize("text", ["{not json", "[1, 2]", "learning_rate 0.1", "colour = red",
                                      "batch_size = many"])
    def test_malformed(self, tmp_path, text):
        path = tmp_path / "c.cfg"
        path.write_text(text)
        with pytest.raises(ConfigError):
            resolve_settings(path)

    def test_experiment_validation(self):
        with pytest.raises(ValueError):
            ExperimentConfig(objectives=())
        with pytest.raises(ValueError):
            ExperimentConfig(seeds=())
        with pytest.raises(ValueError):
            ExperimentConfig(objectives=("standard", "free"))

    def test_config_hash(self):
        cfg = ExperimentConfig()
        a = config_hash(cfg.cell_config("alice", 0))
        assert a == config_hash(ExperimentConfig().cell_config("alice", 0))
        assert len({a, config_hash(cfg.cell_config("alice", 1)),
                    config_hash(cfg.cell_config("adv", 0))}) == 3


class TestCli:
    @pytest.mark.parametrize("argv", [
        [], ["fly"], ["train", "--bogus", "1"], ["train", "--learning-rate", "fast"],
        ["compare", "--objectives", "standard,free"], ["train", "--config", "/nonexistent/c.json"],
        ["evaluate", "--data", "x.jsonl"],
    ])
    def test_usage_errors(self, argv, capsys):
        assert main(argv) == 2
        assert "usage" in capsys.readouterr().err

    def test_bad_dataset_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("{}\n")
        assert main(["train", "--data", str(bad), "--out", str(tmp_path / "o")]) == 1
        assert "bad.jsonl:1" in capsys.readouterr().err

    def test_generate_train_evaluate(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert main(["generate", "--seed", "3", "--num-examples", "60", "--task", "pairwise",
                     "--out", str(data)]) == 0
        assert {p.name for p in data.iterdir()} == {"dataset.jsonl", "train.jsonl", "dev.jsonl", "test.jsonl"}
        header = json.loads((data / "dataset.jsonl").read_text().splitlines()[0])
        assert header["spec"]["seed"] == 3 and header["records"] == 60
        capsys.readouterr()

        out = tmp_path / "run"
        assert main(["train", "--data", str(data / "dataset.jsonl"), "--objective", "smart",
                     "--max-epochs", "2", "--seed", "1", "--out", str(out)]) == 0
        record = json.loads(capsys.readouterr().out)
        assert record["status"] == "ok" and record["objective"] == "smart" and record["seed"] == 1
        assert record["report"]["em"] is not None
        assert len((out / "runs" / "smart-1.jsonl").read_text().splitlines()) == 2
        assert json.loads((out / "runs" / "smart-1.report.json").read_text()) == record
        ckpt = out / "checkpoints" / "smart-1.npz"
        load_checkpoint(ckpt)

        # scoring the same test split again reproduces the training-time report
        assert main(["compare", "--data", str(data / "dataset.jsonl"), "--objectives", "smart",
                     "--seeds", "1", "--seed", "1", "--max-epochs", "2", "--out", str(tmp_path / "c")]) == 0
        capsys.readouterr()
        ev = tmp_path / "ev"
        assert main(["evaluate", "--checkpoint", str(ckpt), "--data",
                     str(tmp_path / "c" / "data" / "test.jsonl"), "--out", str(ev)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report == record["report"]
        assert json.loads((ev / "report.json").read_text()) == report

    def test_alice_alpha_zero_matches_adv(self, tmp_path, capsys):
        common = SMALL + ["--seed", "4", "--dropout", "0.1"]
        assert main(["train", "--objective", "alice", "--alpha", "0", "--out", str(tmp_path / "a")] + common) == 0
        assert main(["train", "--objective", "adv", "--out", str(tmp_path / "b")] + common) == 0
        a = (tmp_path / "a" / "runs" / "alice-4.jsonl").read_bytes()
        b = (tmp_path / "b" / "runs" / "adv-4.jsonl").read_bytes()
        assert a == b and a

    def test_config_file_and_flag_override(self, tmp_path, capsys):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text("objective = alice\nmax_epochs = 1\nnum_examples = 60\nseed = 2\n")
        assert main(["train", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "o")]) == 0
        record = json.loads(capsys.readouterr().out)
        assert (record["objective"], record["seed"]) == ("alice", 5)

    def test_gradcheck(self, tmp_path, capsys):
        assert main(["gradcheck", "--trials", "3", "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        assert "objective:alice" in out and "FAIL" not in out
        results = json.loads((tmp_path / "gradcheck.json").read_text())
        assert all(r["passed"] and r["trials"] == 3 for r in results)

    def test_gradcheck_reports_failure(self, monkeypatch, capsys):
        from embadv import gradcheck
        from embadv import autodiff as ad

        def bad(rng):
            def f(t):
                return ad.make_op("bad", t.data ** 2, (t,), lambda g: (g * t.data,)).sum()
            return f, rng.normal(size=3)
        monkeypatch.setitem(gradcheck.ALL_CASES, "bad_square", bad)
        assert main(["gradcheck", "--trials", "2"]) == 1
        assert "FAIL bad_square" in capsys.readouterr().out


class TestCompare:
    def small_cfg(self, **kw):
        s = resolve_settings(None, {"num_examples": "120", "max_epochs": "2", "key_tokens": "8", **kw})
        return experiment_from_settings(s)

    def test_single_cell_summary_is_the_run(self, tmp_path):
        records, summary = compare(self.small_cfg(objectives="adv", seeds="1"), tmp_path)
        (row,) = summary["objectives"]
        (rec,) = records
        assert row["n"] == 1
        assert row["clean_mean"] == rec.report["accuracy"]
        assert row["robust_mean"] == rec.report["robust_accuracy"]
        assert row["clean_std"] is None and row["wall_clock_ratio"] is None

    def test_matrix_shape_and_shared_splits(self, tmp_path, monkeypatch):
        seen = []
        original = harness.train

        def spy(params, dataset, cfg, dev=None, log_fh=None):
            seen.append(dataset)
            return original(params, dataset, cfg, dev, log_fh)
        monkeypatch.setattr(harness, "train", spy)
        records, summary = compare(self.small_cfg(seeds="2"), tmp_path)
        assert [(r.objective, r.seed) for r in records] == \
            [(o, s) for o in ("standard", "adv", "smart", "alice") for s in (0, 1)]
        assert len(list((tmp_path / "runs").glob("*.report.json"))) == 8
        assert all(d == seen[0] for d in seen)
        assert len({r.config_hash for r in records}) == 8

    def test_summary_recomputable_from_records(self, tmp_path):
        compare(self.small_cfg(seeds="3", objectives="standard,alice"), tmp_path)
        summary = json.loads((tmp_path / "summary.json").read_text())
        rows = list(csv.DictReader((tmp_path / "summary.csv").open()))
        for row, csv_row in zip(summary["objectives"], rows):
            recs = [json.loads(p.read_text()) for p in
                    sorted((tmp_path / "runs").glob(f"{row['objective']}-*.report.json"))]
            clean = [r["report"]["accuracy"] for r in recs]
            robust = [r["report"]["robust_accuracy"] for r in recs]
            assert row["clean_mean"] == pytest.approx(np.mean(clean), abs=1e-15)
            assert row["clean_std"] == pytest.approx(np.std(clean, ddof=1), abs=1e-15)
            assert row["robust_std"] == pytest.approx(statistics.stdev(robust), abs=1e-15)
            assert float(csv_row["robust_mean"]) == row["robust_mean"]
        assert summary["objectives"][0]["wall_clock_ratio"] == 1.0

    def test_rerun_is_identical_modulo_wall_clock(self, tmp_path):
        cfg = self.small_cfg(seeds="2", objectives="standard,alice")
        compare(cfg, tmp_path / "a")
        compare(cfg, tmp_path / "b")
        a, b = read_tree(tmp_path / "a"), read_tree(tmp_path / "b")
        assert a.keys() == b.keys() and a == b

    def test_parallel_matches_sequential(self, tmp_path):
        cfg = self.small_cfg(seeds="2", objectives="smart,alice")
        compare(cfg, tmp_path / "seq")
        compare(experiment_from_settings(resolve_settings(None, {
            "num_examples": "120", "max_epochs": "2", "key_tokens": "8", "seeds": "2",
            "objectives": "smart,alice", "workers": "2"})), tmp_path / "par")
        assert read_tree(tmp_path / "seq") == read_tree(tmp_path / "par")

    def test_failed_cell_recorded_others_proceed(self, tmp_path, monkeypatch, capsys):
        original = harness.train

        def flaky(params, dataset, cfg, dev=None, log_fh=None):
            if cfg.objective == "smart" and cfg.seed == 1:
                raise FloatingPointError("synthetic failure")
            return original(params, dataset, cfg, dev, log_fh)
        monkeypatch.setattr(harness, "train", flaky)
        code = main(["compare", "--seeds", "2", "--objectives", "standard,smart",
                     "--out", str(tmp_path)] + SMALL)
        assert code == 1
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["failed"] == [{"objective": "smart", "seed": 1,
                                      "error": "FloatingPointError: synthetic failure"}]
        assert [r["n"] for r in summary["objectives"]] == [2, 1]
        failed = json.loads((tmp_path / "runs" / "smart-1.report.json").read_text())
        assert failed["status"] == "failed" and failed["report"] is None
        assert "FAILED smart-1" in capsys.readouterr().err

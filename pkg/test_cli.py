import csv
import json
from pathlib import Path

import numpy as np
import pytest

import analyze_connectivity
import dyns
import tensor_autodiff as ta
import training_eval as te

CONFIGS = Path(__file__).parent / "configs"

TINY_TOML = """\
d_lat = 8
conv_channels = 4
attention_heads = 2
d_h = 8
d_k = 16
token_count = 4
lora_rank = 2
lora_alpha = 4.0
lora_dropout = 0.0
surrogate_blocks = 1
surrogate_heads = 2
vocab_size = 16
context_cap = 32
prompt_ids = [1, 5, 9, 3]
learning_rate = 0.01
epochs = 2
batch_size = 4
n_rois = 4
length = 16
subjects_per_class = 6
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("dyns")
    config = root / "tiny.toml"
    config.write_text(TINY_TOML)
    data = root / "data"
    assert dyns.run(["generate-data", "--config", str(config), "--seed", "1", "--out", str(data), "--quiet"]) == 0
    run_dir = root / "run" / "a"
    assert dyns.run(["train", "--config", str(config), "--seed", "1", "--data", str(data),
                     "--run-dir", str(run_dir), "--threads", "1", "--quiet"]) == 0
    return {"root": root, "config": config, "data": data, "run": run_dir}


class TestUsageErrors:
    def test_zero_epochs(self):
        assert dyns.run(["train", "--epochs", "0"]) == 1

    def test_unknown_subcommand(self):
        assert dyns.run(["fly"]) == 1

    def test_unknown_override_key(self):
        assert dyns.run(["gradcheck", "--set", "d_latent=3"]) == 1

    def test_unknown_key_in_config_file(self, tmp_path):
        config = tmp_path / "bad.toml"
        config.write_text("d_lat = 8\nwidth = 3\n")
        assert dyns.run(["gradcheck", "--config", str(config)]) == 1

    def test_wrong_value_type(self):
        assert dyns.run(["gradcheck", "--set", "epochs=\"ten\""]) == 1

    def test_missing_dataset_is_a_data_error(self, tmp_path):
        assert dyns.run(["train", "--data", str(tmp_path / "nowhere"), "--run-dir", str(tmp_path / "r")]) == 2


class TestResolveConfig:
    def test_seed_env_fallback(self, monkeypatch):
        monkeypatch.setenv(dyns.SEED_ENV, "5")
        parser = dyns.build_parser()
        assert dyns.resolve_config(parser.parse_args(["gradcheck"])).seed == 5
        assert dyns.resolve_config(parser.parse_args(["gradcheck", "--seed", "2"])).seed == 2

    def test_flags_beat_file(self, tmp_path):
        config = tmp_path / "c.toml"
        config.write_text("epochs = 4\nlearning_rate = 0.5\n")
        args = dyns.build_parser().parse_args(["train", "--config", str(config), "--epochs", "7"])
        cfg = dyns.resolve_config(args)
        assert (cfg.epochs, cfg.learning_rate) == (7, 0.5)

    def test_resolved_config_reloads(self, tmp_path):
        cfg = dyns.resolve_config(dyns.build_parser().parse_args(["train", "--set", "d_k=32", "--lr", "0.003"]))
        dyns.write_resolved(cfg, tmp_path)
        again = dyns.load_run_config(tmp_path)
        assert again == cfg
        assert json.loads((tmp_path / dyns.RESOLVED_NAME).read_text())["version"] == dyns.VERSION

    def test_threads_reach_training_and_scan(self):
        cfg = dyns.resolve_config(dyns.build_parser().parse_args(["train", "--threads", "3"]))
        assert cfg.train_config().workers == 3 and cfg.model_config().scan_workers == 3

    def test_desk_config_is_valid(self):
        args = dyns.build_parser().parse_args(["train", "--config", str(CONFIGS / "desk.toml")])
        cfg = dyns.resolve_config(args)
        assert cfg.d_lat == 16 and cfg.lora_rank == 4

    def test_full_config_is_valid(self):
        cfg = dyns.resolve_config(dyns.build_parser().parse_args(["train", "--config", str(CONFIGS / "full.toml")]))
        assert (cfg.d_lat, cfg.lora_rank, cfg.lora_alpha, cfg.learning_rate) == (128, 16, 32.0, 1e-4)


class TestGenerateData:
    def test_byte_identical_directories(self, workspace, tmp_path):
        again = tmp_path / "again"
        assert dyns.run(["generate-data", "--config", str(workspace["config"]), "--seed", "1",
                         "--out", str(again), "--quiet"]) == 0
        first = {p.name: p.read_bytes() for p in workspace["data"].iterdir()}
        second = {p.name: p.read_bytes() for p in again.iterdir()}
        assert first == second
        assert "manifest.json" in first and dyns.RESOLVED_NAME in first


class TestTrain:
    def test_run_directory_layout(self, workspace):
        run_dir = workspace["run"]
        for name in ("config.resolved", "logs.jsonl", "metrics.json", "checkpoints/model.dyns",
                     "checkpoints/surrogate.dyns", "checkpoints/epoch_1.dyns", "checkpoints/epoch_2.dyns"):
            assert (run_dir / name).exists(), name
        metrics = json.loads((run_dir / "metrics.json").read_text())
        assert metrics["seed"] == 1 and metrics["variant"] == "full"
        assert 0.0 < metrics["trainable_fraction"] < 1.0
        assert set(metrics["test"]) >= {"accuracy", "precision", "recall", "f1"}

    def test_epoch_checkpoints_reload(self, workspace):
        run_dir = workspace["run"]
        cfg = dyns.load_run_config(run_dir)
        best = ta.load_checkpoint(run_dir / "checkpoints" / "model.dyns")
        best_epoch = json.loads((run_dir / "metrics.json").read_text())["best_epoch"]
        model = dyns.load_trained_model(run_dir, cfg, n_rois=4)
        for epoch in (1, 2):
            arrays = ta.load_checkpoint(run_dir / "checkpoints" / f"epoch_{epoch}.dyns")
            te.load_model_parameters(model, arrays)
            for name, p in model.parameters().items():
                assert np.array_equal(p.data, arrays[name]), name
                if epoch == best_epoch:
                    assert np.array_equal(p.data, best[name]), name

    def test_fixed_seed_reproduces_metrics(self, workspace):
        second = workspace["root"] / "run" / "b"
        assert dyns.run(["train", "--config", str(workspace["config"]), "--seed", "1", "--data",
                         str(workspace["data"]), "--run-dir", str(second), "--threads", "1", "--quiet"]) == 0
        assert (second / "metrics.json").read_bytes() == (workspace["run"] / "metrics.json").read_bytes()

    def test_json_output(self, workspace, capsys):
        out = workspace["root"] / "run" / "json"
        assert dyns.run(["train", "--config", str(workspace["config"]), "--data", str(workspace["data"]),
                         "--run-dir", str(out), "--epochs", "1", "--json"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["run_dir"] == str(out)


class TestEvaluate:
    def test_predictions_and_metrics(self, workspace):
        run_dir = workspace["run"]
        before = sorted(p.relative_to(run_dir) for p in run_dir.rglob("*"))
        assert dyns.run(["evaluate", "--run", str(run_dir), "--data", str(workspace["data"]), "--quiet"]) == 0
        assert sorted(p.relative_to(run_dir) for p in run_dir.rglob("*")) == before
        out = run_dir.parent / f"{run_dir.name}-evaluation"
        with open(out / "predictions.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 2
        assert {r["predicted"] for r in rows} <= {"ASD", "TC"}
        payload = json.loads((out / "metrics.json").read_text())
        assert "accuracy" in payload["metrics"]

    def test_explicit_output_directory(self, workspace, tmp_path):
        out = tmp_path / "scores"
        assert dyns.run(["evaluate", "--run", str(workspace["run"]), "--data", str(workspace["data"]),
                         "--out", str(out), "--quiet"]) == 0
        assert (out / "predictions.csv").exists() and (out / "metrics.json").exists()

    def test_not_a_run_directory(self, workspace, tmp_path):
        assert dyns.run(["evaluate", "--run", str(tmp_path), "--config", str(workspace["config"]),
                         "--data", str(workspace["data"])]) == 2


class TestOtherCommands:
    def test_gradcheck_seed_seven(self, capsys):
        assert dyns.run(["gradcheck", "--seed", "7", "--json"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["failed"] == [] and all(err < 1e-4 for err in payload["errors"].values())

    def test_gradcheck_needs_double_precision(self):
        assert dyns.run(["gradcheck", "--precision", "32"]) == 1

    def test_scan_bench(self, tmp_path):
        out = tmp_path / "bench.csv"
        assert dyns.run(["scan-bench", "--lengths", "16,32", "--repeats", "2", "--out", str(out), "--quiet"]) == 0
        with open(out, newline="") as f:
            rows = list(csv.DictReader(f))
        assert [(r["T"], r["backend"]) for r in rows] == [
            ("16", "sequential"), ("16", "parallel"), ("32", "sequential"), ("32", "parallel")]

    def test_ablate(self, workspace):
        run_dir = workspace["root"] / "ablation"
        assert dyns.run(["ablate", "--config", str(workspace["config"]), "--data", str(workspace["data"]),
                         "--variants", "full,static_graph", "--seeds", "0", "--epochs", "1",
                         "--run-dir", str(run_dir), "--quiet"]) == 0
        with open(run_dir / "ablation.csv", newline="") as f:
            assert [r["variant"] for r in csv.DictReader(f)] == ["full", "static_graph"]

    def test_report(self, workspace, tmp_path):
        out = tmp_path / "report.csv"
        assert dyns.run(["report", str(workspace["run"]), "--out", str(out), "--quiet"]) == 0
        with open(out, newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 4
        assert rows[0]["run"] == "a" and rows[0]["variant"] == "full" and rows[0]["seed"] == "1"

    def test_report_without_logs(self, tmp_path):
        assert dyns.run(["report", str(tmp_path), "--out", str(tmp_path / "r.csv")]) == 2


def test_analyze_connectivity(workspace, tmp_path):
    written = analyze_connectivity.analyze_connectivity(workspace["run"], workspace["data"], top=3, out=tmp_path)
    assert set(written) == {"connectivity_ASD", "connectivity_TC", "edges", "saliency"}
    with open(written["edges"], newline="") as f:
        assert len(list(csv.DictReader(f))) == 3
    with open(written["saliency"], newline="") as f:
        assert len(list(csv.DictReader(f))) == 4

"""
Tests for losses, Adam, metrics, variants and the training loop.

Acceptance-scale runs (multi-seed training on the planted dataset) are
marked slow: pytest -m slow
"""

import csv
import math
import time
from dataclasses import replace

import numpy as np
import pytest

import data_pipeline as dp
import latent_graph as lg
import tensor_autodiff as ta
import token_align as tk
import training_eval as te
from data_pipeline import Label, RoiTimeSeries
from errors import ConfigError, EvaluationError, NonFiniteError
from tensor_autodiff import Tape, Tensor


@pytest.fixture
def small_subjects():
    spec = dp.default_synth_spec(n_rois=4, length=16, subjects_per_class=6, seed=0)
    return [dp.normalize_zscore(s) for s in dp.synth_generate(spec)]


@pytest.fixture
def quick_train():
    return te.TrainConfig(learning_rate=1e-2, epochs=2, batch_size=4, validation_fraction=0.2, seed=0)


def planted_split(seed, **overrides):
    spec = dp.default_synth_spec(seed=seed, **overrides)
    subjects = [dp.normalize_zscore(s) for s in dp.synth_generate(spec)]
    return dp.split_dataset(subjects, 0.8, seed)


class TestMetrics:
    def test_f1_of_reported_precision_and_recall(self):
        assert te.f1_from_precision_recall(0.8022, 0.6102) == pytest.approx(0.6931, abs=5e-4)

    def test_hand_confusion_matrix(self):
        m = te.Metrics(tp=8, fp=2, fn=2, tn=8)
        assert (m.accuracy, m.precision, m.recall, m.f1) == pytest.approx((0.8, 0.8, 0.8, 0.8))

    def test_all_tc_predictor(self):
        truth = [Label.ASD] * 5 + [Label.TC] * 5
        m = te.Metrics.from_predictions(truth, [Label.TC] * 10)
        assert (m.accuracy, m.precision, m.recall, m.f1) == (0.5, 0.0, 0.0, 0.0)

    def test_identities_hold_for_random_matrices(self, rng):
        for _ in range(200):
            tp, fp, fn, tn = (int(v) for v in rng.integers(0, 6, 4))
            m = te.Metrics(tp, fp, fn, tn)
            if m.total:
                assert m.accuracy == pytest.approx((tp + tn) / m.total)
            if m.precision + m.recall:
                assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall))
            else:
                assert m.f1 == 0.0
            assert 0.0 <= m.f1 <= 1.0

    def test_from_predictions_counts(self):
        truth = [Label.ASD, Label.ASD, Label.TC, Label.TC, Label.TC]
        predicted = [Label.ASD, Label.TC, Label.ASD, Label.TC, Label.TC]
        m = te.Metrics.from_predictions(truth, predicted, loss=0.3)
        assert (m.tp, m.fn, m.fp, m.tn) == (1, 1, 1, 2)
        assert m.to_dict()["loss"] == 0.3


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert te.cross_entropy(Tensor([0.0, 0.0]), [0]).item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_confident_correct(self):
        loss = te.cross_entropy(Tensor([10.0, -10.0]), [0]).item()
        assert loss == pytest.approx(2.0611536e-9, rel=1e-6)

    def test_batch_mean(self):
        logits = Tensor([[0.0, 0.0], [10.0, -10.0]])
        expected = (math.log(2.0) + math.log1p(math.exp(-20.0))) / 2
        assert te.cross_entropy(logits, [1, 0]).item() == pytest.approx(expected, rel=1e-12)


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        cfg = te.TrainConfig(learning_rate=1e-3)
        w = ta.parameter(np.zeros(5))
        g = np.array([0.3, -2.0, 1e-2, 5.0, -1e-2])
        te.adam_step({"w": w}, {"w": g}, te.AdamState(), cfg)
        np.testing.assert_allclose(np.abs(w.data), 1e-3, rtol=1e-5)
        np.testing.assert_array_equal(np.sign(w.data), -np.sign(g))

    def test_zero_gradient_leaves_params(self, rng):
        w = ta.parameter(rng.standard_normal(4))
        before = w.data.copy()
        state = te.AdamState()
        for _ in range(3):
            te.adam_step({"w": w}, {"w": np.zeros(4)}, state, te.TrainConfig())
        np.testing.assert_array_equal(w.data, before)
        assert state.step == 3

    def test_non_finite_gradient_aborts(self):
        w = ta.parameter(np.zeros(2))
        state = te.AdamState()
        with pytest.raises(NonFiniteError):
            te.adam_step({"w": w}, {"w": np.array([np.nan, 1.0])}, state, te.TrainConfig())
        assert state.step == 0
        np.testing.assert_array_equal(w.data, [0.0, 0.0])

    def test_accumulation_matches_union_batch(self, rng):
        x = rng.standard_normal((8, 3))
        labels = rng.integers(0, 2, 8)
        start = rng.standard_normal((2, 3))

        def grads(w, rows):
            with Tape():
                loss = te.cross_entropy(ta.linear(Tensor(x[rows]), w), labels[rows])
                return ta.backward(loss, {"w": w})

        w_micro = ta.parameter(start.copy())
        accumulator = te.GradientAccumulator(4)
        for rows in np.split(np.arange(8), 4):
            accumulator.add(grads(w_micro, rows))
        assert accumulator.ready
        averaged = accumulator.average()
        assert accumulator.count == 0

        w_union = ta.parameter(start.copy())
        union = grads(w_union, np.arange(8))
        np.testing.assert_allclose(averaged["w"], union["w"], atol=1e-12)

        cfg = te.TrainConfig(learning_rate=1e-2)
        te.adam_step({"w": w_micro}, averaged, te.AdamState(), cfg)
        te.adam_step({"w": w_union}, union, te.AdamState(), cfg)
        np.testing.assert_allclose(w_micro.data, w_union.data, atol=1e-12)


class TestConfig:
    @pytest.mark.parametrize("text, field, value", [
        ("full", "graph", "dynamic"),
        ("static_graph", "graph", "static"),
        ("static_graph:pearson", "graph", "pearson"),
        ("frozen_llm", "adapters", False),
        ("no_llm", "llm", False),
        ("backbone:gru", "backbone", "gru"),
        ("backbone:s4", "backbone", "s4"),
        ("align:random", "align", "random"),
        ("align:none", "align", "none"),
    ])
    def test_parse_variant(self, text, field, value):
        variant = te.parse_variant(text)
        assert variant.name == text
        assert getattr(variant, field) == value

    @pytest.mark.parametrize("text", ["", "bogus", "backbone:lstm", "align:", "static_graph:spearman"])
    def test_unknown_variant(self, text):
        with pytest.raises(ConfigError):
            te.parse_variant(text)

    def test_zero_epochs_rejected(self):
        with pytest.raises(ConfigError):
            te.TrainConfig(epochs=0).validate()

    def test_bad_backend_rejected(self):
        with pytest.raises(ConfigError):
            te.ModelConfig(backend="gpu").validate()


class TestModel:
    @pytest.mark.parametrize("backbone", te.BACKBONES)
    def test_backbones_share_one_interface(self, tiny_model_config, rng, backbone):
        module = te.BACKBONE_TYPES[backbone](rng, 4, tiny_model_config)
        out = module(Tensor(rng.standard_normal((2, 12, 4))))
        assert out.shape == (2, 12, tiny_model_config.d_h)
        assert all(name.startswith("temporal.") for name in module.parameters())

    @pytest.mark.parametrize("variant", list(te.BASE_VARIANTS) + ["align:meanpool", "align:random", "align:none",
                                                                  "backbone:tcn", "backbone:transformer"])
    def test_forward_shapes(self, tiny_model_config, rng, variant):
        model = te.init_model(tiny_model_config, te.parse_variant(variant), n_rois=4, seed=0)
        assert te.forward(model, Tensor(rng.standard_normal((3, 10, 4)))).shape == (3, 2)
        assert te.forward(model, Tensor(rng.standard_normal((10, 4)))).shape == (2,)

    def test_trainable_sets(self, tiny_model_config):
        def names(variant):
            model = te.init_model(tiny_model_config, te.parse_variant(variant), n_rois=4, seed=0)
            return set(model.trainable_parameters())

        full = names("full")
        assert "lora.block0.query.B" in full and "encoder.w_query" in full and "head.weight" in full
        assert "surrogate.embedding" not in full
        frozen = names("frozen_llm")
        assert not any(n.startswith("lora.") for n in frozen) and "head.weight" in frozen
        assert "brain.proj_weight" in frozen
        assert not any(n.startswith("encoder.") for n in names("static_graph:pearson"))
        no_llm = names("no_llm")
        assert "direct.weight" in no_llm and "head.weight" not in no_llm
        assert names("align:none") == {"lora.block0.query.A", "lora.block0.query.B", "lora.block0.value.A",
                                       "lora.block0.value.B", "head.weight", "head.bias"}

    def test_frozen_llm_matches_full_at_initialization(self, tiny_model_config, rng):
        x = Tensor(rng.standard_normal((2, 10, 4)))
        full = te.init_model(tiny_model_config, te.parse_variant("full"), n_rois=4, seed=3)
        frozen = te.init_model(tiny_model_config, te.parse_variant("frozen_llm"), n_rois=4, seed=3)
        assert np.array_equal(te.forward(full, x).data, te.forward(frozen, x).data)

    def test_static_graph_uses_time_mean_adjacency(self, tiny_model_config, rng):
        model = te.init_model(tiny_model_config, te.parse_variant("static_graph"), n_rois=4, seed=0)
        x = Tensor(rng.standard_normal((10, 4)))
        seq = lg.encode_sequence(x, model.encoder, tiny_model_config.filter_mode)
        expected = lg.filter_static(lg.static_adjacency(seq), x, tiny_model_config.filter_mode)
        np.testing.assert_allclose(te.filtered_signal(model, x).data, expected.data, atol=1e-12)

    def test_checkpoint_round_trip(self, tiny_model_config, rng, tmp_path):
        x = Tensor(rng.standard_normal((10, 4)))
        trained = te.init_model(tiny_model_config, te.parse_variant("full"), n_rois=4, seed=1)
        trained.surrogate.head_bias.data = np.array([0.3, -0.2])
        ta.save_checkpoint(tmp_path / "model.dyns", trained.parameters())
        fresh = te.init_model(tiny_model_config, te.parse_variant("full"), n_rois=4, seed=2)
        te.load_model_parameters(fresh, ta.load_checkpoint(tmp_path / "model.dyns"))
        assert np.array_equal(te.forward(fresh, x).data, te.forward(trained, x).data)

    def test_checkpoint_missing_parameter(self, tiny_model_config):
        model = te.init_model(tiny_model_config, te.parse_variant("full"), n_rois=4, seed=1)
        arrays = {name: p.data for name, p in model.parameters().items()}
        del arrays["head.bias"]
        with pytest.raises(ConfigError):
            te.load_model_parameters(model, arrays)


class TestTraining:
    def test_log_and_best_epoch(self, tiny_model_config, small_subjects, quick_train):
        model = te.init_model(tiny_model_config, te.parse_variant("full"), n_rois=4, seed=0)
        before = {name: p.data.copy() for name, p in model.trainable_parameters().items()}
        checksum = tk.frozen_checksum(model.surrogate.base)
        result = te.train(model, small_subjects, quick_train)

        assert [(r["epoch"], r["split"]) for r in result.log] == [(1, "train"), (1, "val"), (2, "train"), (2, "val")]
        assert set(result.log[0]) == {"epoch", "split", "loss", "accuracy", "precision", "recall", "f1"}
        assert result.best_epoch in (1, 2) and result.validation_size == 2
        best_val = max(r["accuracy"] for r in result.log if r["split"] == "val")
        assert result.best_accuracy == best_val
        assert tk.frozen_checksum(model.surrogate.base) == checksum
        assert any(not np.array_equal(p.data, before[name]) for name, p in model.trainable_parameters().items())

    def test_frozen_llm_keeps_adapters(self, tiny_model_config, small_subjects, quick_train):
        model = te.init_model(tiny_model_config, te.parse_variant("frozen_llm"), n_rois=4, seed=0)
        adapters = {name: p.data.copy() for name, p in model.surrogate.adapter_parameters().items()}
        te.train(model, small_subjects, replace(quick_train, variant="frozen_llm"))
        for name, p in model.surrogate.adapter_parameters().items():
            assert np.array_equal(p.data, adapters[name])

    def test_deterministic(self, tiny_model_config, small_subjects, quick_train):
        logs = []
        for _ in range(2):
            model = te.init_model(tiny_model_config, te.parse_variant("full"), n_rois=4, seed=0)
            logs.append(te.train(model, small_subjects, quick_train).log)
        assert logs[0] == logs[1]

    def test_accumulation_steps_run(self, tiny_model_config, small_subjects, quick_train):
        model = te.init_model(tiny_model_config, te.parse_variant("backbone:gru"), n_rois=4, seed=0)
        cfg = replace(quick_train, epochs=1, accumulation_steps=2, validation_fraction=0.0)
        result = te.train(model, small_subjects, cfg)
        assert result.validation_size == 0 and result.best_epoch == 1

    def test_writes_checkpoint_per_epoch(self, tiny_model_config, small_subjects, quick_train, tmp_path):
        model = te.init_model(tiny_model_config, te.parse_variant("full"), n_rois=4, seed=0)
        result = te.train(model, small_subjects, quick_train, checkpoint_dir=tmp_path / "ckpt")
        assert sorted(p.name for p in (tmp_path / "ckpt").iterdir()) == ["epoch_1.dyns", "epoch_2.dyns"]
        best = ta.load_checkpoint(tmp_path / "ckpt" / f"epoch_{result.best_epoch}.dyns")
        fresh = te.init_model(tiny_model_config, te.parse_variant("full"), n_rois=4, seed=0)
        te.load_model_parameters(fresh, best)
        for name, p in model.parameters().items():
            assert np.array_equal(fresh.parameters()[name].data, p.data), name

    def test_scan_workers_reach_the_parallel_scan(self, tiny_model_config, small_subjects):
        serial_cfg = replace(tiny_model_config, backend="parallel", scan_workers=1)
        pooled_cfg = replace(tiny_model_config, backend="parallel", scan_workers=3)
        pooled = te.init_model(pooled_cfg, te.parse_variant("full"), n_rois=4, seed=0)
        assert pooled.temporal.workers == 3
        serial = te.init_model(serial_cfg, te.parse_variant("full"), n_rois=4, seed=0)
        x = Tensor(np.stack([s.values.data for s in small_subjects[:3]]))
        assert np.array_equal(te.forward(serial, x).data, te.forward(pooled, x).data)

    def test_bad_scan_workers_rejected(self):
        with pytest.raises(ConfigError):
            te.ModelConfig(scan_workers=0).validate()

    def test_evaluate_is_thread_count_invariant(self, tiny_model_config, small_subjects):
        model = te.init_model(tiny_model_config, te.parse_variant("full"), n_rois=4, seed=0)
        serial = te.evaluate(model, small_subjects, batch_size=3, workers=1)
        pooled = te.evaluate(model, small_subjects, batch_size=3, workers=3)
        assert serial.to_dict() == pooled.to_dict()
        assert serial.total == len(small_subjects)

    def test_evaluate_rejects_empty_and_unlabelled(self, tiny_model_config, small_subjects):
        model = te.init_model(tiny_model_config, te.parse_variant("full"), n_rois=4, seed=0)
        with pytest.raises(EvaluationError):
            te.evaluate(model, [])
        unlabelled = RoiTimeSeries("u", small_subjects[0].values)
        with pytest.raises(EvaluationError):
            te.evaluate(model, [unlabelled])

    def test_predict_keeps_input_order(self, tiny_model_config, small_subjects):
        model = te.init_model(tiny_model_config, te.parse_variant("full"), n_rois=4, seed=0)
        targets = small_subjects[::-1] + [RoiTimeSeries("unlabelled", small_subjects[0].values)]
        predictions = te.predict(model, targets, batch_size=5)
        assert [p.subject_id for p in predictions] == [s.subject_id for s in targets]
        assert predictions[-1].label is None
        assert all(p.verdict.startswith("Classification leaning toward ") for p in predictions)
        assert all(0.5 <= p.confidence <= 1.0 for p in predictions)


class TestAblation:
    def test_rows_and_csv(self, tiny_model_config, small_subjects, tmp_path):
        cfg = te.TrainConfig(learning_rate=1e-2, epochs=1, batch_size=4, validation_fraction=0.0)
        rows = te.run_ablation(["full", "frozen_llm"], small_subjects, cfg, seeds=[0, 1],
                               model_cfg=tiny_model_config)
        assert [r["variant"] for r in rows] == ["full", "frozen_llm"]
        for row in rows:
            assert row["seeds"] == 2
            assert 0.0 <= row["accuracy_mean"] <= 1.0 and row["accuracy_std"] >= 0.0

        path = tmp_path / "ablation.csv"
        te.write_ablation_csv(rows, path)
        with open(path, newline="") as f:
            read = list(csv.DictReader(f))
        assert read[0]["variant"] == "full"
        assert list(read[0]) == ["variant", "seeds", "accuracy_mean", "accuracy_std", "precision_mean",
                                 "precision_std", "recall_mean", "recall_std", "f1_mean", "f1_std"]

    def test_unknown_variant_fails_before_training(self, small_subjects):
        with pytest.raises(ConfigError):
            te.run_ablation(["full", "nope"], small_subjects, te.TrainConfig(), seeds=[0])

    def test_log_jsonl_round_trip(self, tmp_path):
        records = [{"epoch": 1, "split": "train", "loss": 0.5, "accuracy": 0.75}]
        te.write_log_jsonl(records, tmp_path / "logs.jsonl")
        assert te.read_log_jsonl(tmp_path / "logs.jsonl") == records


class TestGradientSuite:
    def test_seed_seven(self):
        errors = te.gradient_suite(7)
        assert {"matmul", "grouped_conv1d", "linear_recurrence", "ssm_forward", "surrogate_forward",
                "end_to_end_loss"} <= set(errors)
        failing = {name: err for name, err in errors.items() if err >= 1e-4}
        assert not failing

    def test_needs_double_precision(self):
        ta.set_default_dtype(32)
        with pytest.raises(ConfigError):
            te.gradient_suite(0)

    @pytest.mark.slow
    def test_twenty_seeds(self):
        start = time.perf_counter()
        for seed in range(20):
            errors = te.gradient_suite(seed)
            assert max(errors.values()) < 1e-4, (seed, errors)
        assert time.perf_counter() - start < 120.0


@pytest.mark.slow
class TestAcceptance:
    def test_planted_dataset_is_learned(self, desk_model_config, desk_train_config):
        start = time.perf_counter()
        accuracies = []
        for seed in range(5):
            split = planted_split(seed)
            cfg = replace(desk_train_config, seed=seed)
            accuracies.append(te.run_variant("full", split.train, split.test, cfg, desk_model_config).metrics.accuracy)
        assert sum(a >= 0.90 for a in accuracies) >= 4, accuracies
        assert time.perf_counter() - start < 600.0

    def test_null_signal_is_chance(self, desk_model_config, desk_train_config):
        accuracies = []
        for seed in range(3):
            split = planted_split(seed, null_signal=True, subjects_per_class=100)
            cfg = replace(desk_train_config, seed=seed, epochs=3)
            accuracies.append(te.run_variant("full", split.train, split.test, cfg, desk_model_config).metrics.accuracy)
        assert 0.40 <= float(np.mean(accuracies)) <= 0.60, accuracies

    def test_ablation_direction(self, desk_model_config, desk_train_config):
        subjects = [dp.normalize_zscore(s) for s in dp.synth_generate(dp.default_synth_spec(seed=0))]
        rows = {r["variant"]: r for r in te.run_ablation(te.ABLATION_VARIANTS, subjects, desk_train_config,
                                                          seeds=range(5), model_cfg=desk_model_config)}
        full = rows["full"]["accuracy_mean"]
        assert full - rows["static_graph"]["accuracy_mean"] >= 0.0
        assert full - rows["frozen_llm"]["accuracy_mean"] >= 0.0

    def test_random_tokens_give_no_benefit(self, desk_model_config, desk_train_config):
        scores = {"align:random": [], "align:none": [], "align:tokens": []}
        for seed in range(5):
            split = planted_split(seed)
            cfg = replace(desk_train_config, seed=seed)
            for variant in scores:
                scores[variant].append(te.run_variant(variant, split.train, split.test, cfg,
                                                      desk_model_config).metrics.accuracy)
        baseline = np.mean(scores["align:none"])
        assert abs(np.mean(scores["align:random"]) - baseline) <= 0.05
        assert np.mean(scores["align:tokens"]) > baseline

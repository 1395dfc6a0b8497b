"""Training-loop contracts: determinism, schedule boundaries, divergence,
metrics format."""

import csv

import numpy as np
import pytest

from hcn import data
from hcn.errors import TrainingDiverged
from hcn.model import HcnModel, ModelConfig
from hcn.optim import TrainState
from hcn.training import (
    METRICS_COLUMNS,
    TrainSchedule,
    evaluate,
    make_batch,
    metrics_to_csv,
    predict_sequence,
    prepare_sample,
    train_loop,
)


def tiny_dataset(classes=2, per_class=12, frames=32, joints=8, persons=1, seed=5):
    return data.synth_generate(
        classes=classes,
        samples_per_class=per_class,
        frames=frames,
        joints=joints,
        persons=persons,
        noise_sigma=0.02,
        seed=seed,
    )


def tiny_model_config(**overrides):
    defaults = dict(
        joint_count=8,
        num_classes=2,
        frame_len=16,
        max_persons=1,
        include_conv4=False,
        channels={"conv1": 8, "conv2": 8, "conv3": 8, "conv5": 16, "conv6": 16, "fc7": 16},
        pools={"conv3": (2, 2), "conv5": (2, 2), "conv6": (2, 1)},
        dropout_ratio=0.0,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


class TestPrepareSample:
    def test_eval_shapes_and_motion(self):
        ds = tiny_dataset()
        cfg = tiny_model_config()
        raw, motion, count = prepare_sample(ds[0], cfg, "eval")
        assert raw.shape == (1, 16, 8, 3)
        assert motion.shape == raw.shape
        assert count == 1
        np.testing.assert_array_equal(motion[0, -1], np.zeros((8, 3)))

    def test_padding_for_concat_fusion(self):
        ds = tiny_dataset(persons=1)
        cfg = tiny_model_config(max_persons=2, fusion_mode="late_concat")
        raw, motion, count = prepare_sample(ds[0], cfg, "eval")
        assert raw.shape[0] == 2 and count == 2
        np.testing.assert_array_equal(raw[1], np.zeros_like(raw[1]))

    def test_make_batch_ragged_counts(self):
        cfg = tiny_model_config(max_persons=2)
        one = data.SkeletonSequence([np.random.default_rng(0).normal(size=(20, 8, 3))], label=0)
        two = data.SkeletonSequence(
            [np.random.default_rng(i).normal(size=(20, 8, 3)) for i in range(2)], label=1
        )
        raw, motion, counts, labels = make_batch([one, two], cfg, "eval")
        assert raw.shape[:2] == (2, 2)
        np.testing.assert_array_equal(counts, [1, 2])
        np.testing.assert_array_equal(labels, [0, 1])
        np.testing.assert_array_equal(raw[0, 1], np.zeros_like(raw[0, 1]))


class TestTrainLoop:
    def test_small_overfit_smoke(self):
        ds = tiny_dataset(per_class=8)
        cfg = tiny_model_config()
        model = HcnModel(cfg, np.random.default_rng(0))
        result = train_loop(
            model, ds, [], TrainState(seed=0), TrainSchedule(batch_size=16, total_steps=120, eval_every=60)
        )
        final_train = [r for r in result.history if r["split"] == "train"][-1]
        assert final_train["accuracy"] == 1.0

    def test_identical_seeds_identical_histories(self):
        ds = tiny_dataset()
        train, val = data.split_dataset(ds, 0.25, seed=1)
        histories = []
        for _ in range(2):
            cfg = tiny_model_config()
            model = HcnModel(cfg, np.random.default_rng(7))
            result = train_loop(
                model, train, val, TrainState(seed=7),
                TrainSchedule(batch_size=8, total_steps=40, eval_every=20),
            )
            histories.append(result.history)
        assert histories[0] == histories[1]

    def test_eval_beyond_total_steps_gives_single_final_eval(self):
        ds = tiny_dataset(per_class=6)
        cfg = tiny_model_config()
        model = HcnModel(cfg, np.random.default_rng(0))
        result = train_loop(
            model, ds, [], TrainState(seed=0), TrainSchedule(batch_size=8, total_steps=10, eval_every=50)
        )
        steps = [r["step"] for r in result.history]
        assert steps == [10]

    def test_divergence_aborts_and_keeps_last_good(self):
        ds = tiny_dataset(per_class=6)
        cfg = tiny_model_config()
        model = HcnModel(cfg, np.random.default_rng(0))
        # a step this size pushes activations past float64 range within a
        # couple of layers, which is the first observable sign of divergence
        state = TrainState(base_lr=1e150, seed=0)
        with pytest.raises(TrainingDiverged) as err:
            train_loop(model, ds, [], state, TrainSchedule(batch_size=8, total_steps=50, eval_every=10))
        assert err.value.result.best_params  # last good snapshot retained

    def test_bad_labels_rejected(self):
        ds = tiny_dataset(per_class=4)
        ds[0].label = 99
        cfg = tiny_model_config()
        model = HcnModel(cfg, np.random.default_rng(0))
        with pytest.raises(ValueError, match="labels"):
            train_loop(model, ds, [], TrainState(seed=0), TrainSchedule(8, 10, 0))


class TestEvaluatePredict:
    def test_predict_probabilities_sum_to_one(self):
        ds = tiny_dataset(per_class=2)
        cfg = tiny_model_config()
        model = HcnModel(cfg, np.random.default_rng(1))
        probs = predict_sequence(model, ds[0])
        assert probs.shape == (2,)
        assert abs(probs.sum() - 1.0) < 1e-6

    def test_evaluate_matches_manual_loop(self):
        ds = tiny_dataset(per_class=4)
        cfg = tiny_model_config()
        model = HcnModel(cfg, np.random.default_rng(2))
        loss, acc = evaluate(model, ds, batch_size=4)
        preds = [int(np.argmax(predict_sequence(model, s))) for s in ds]
        manual_acc = float(np.mean([p == s.label for p, s in zip(preds, ds)]))
        assert abs(acc - manual_acc) < 1e-12


class TestMetricsCsv:
    def test_schema_and_parse_roundtrip(self, tmp_path):
        rows = [
            {"step": 10, "split": "train", "loss": 1.25, "accuracy": 0.5, "map": None,
             "learning_rate": 0.001},
            {"step": 10, "split": "val", "loss": None, "accuracy": None, "map": 0.75,
             "learning_rate": 0.001},
        ]
        path = tmp_path / "metrics.csv"
        metrics_to_csv(rows, path)
        with open(path) as fh:
            parsed = list(csv.DictReader(fh))
        assert tuple(parsed[0].keys()) == METRICS_COLUMNS
        assert parsed[0]["loss"] == "1.25"
        assert parsed[0]["map"] == ""
        assert parsed[1]["map"] == "0.75"
        assert float(parsed[1]["learning_rate"]) == 0.001

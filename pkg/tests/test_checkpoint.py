"""Checkpoint container: bit-exact round trips and corruption handling."""

import numpy as np
import pytest

from hcn.checkpoint import (
    Checkpoint,
    load_checkpoint,
    moment_tensors,
    save_checkpoint,
    split_moments,
    train_state_from_dict,
    train_state_to_dict,
)
from hcn.errors import CheckpointError
from hcn.optim import TrainState


def sample_checkpoint():
    rng = np.random.default_rng(0)
    tensors = {
        "layer.weight": rng.normal(size=(4, 3, 3, 3)),
        "layer.bias": rng.normal(size=4),
        "scalar": np.array(3.5),
        "single32": rng.normal(size=(2, 2)).astype(np.float32),
    }
    return Checkpoint(
        config={"task": "recognize", "model": {"joint_count": 4}},
        train_state={"step": 17, "base_lr": 1e-3},
        best={"metric": "accuracy", "value": 0.9375, "step": 12},
        tensors=tensors,
    )


class TestRoundTrip:
    def test_tensors_bit_exact(self, tmp_path):
        ck = sample_checkpoint()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, ck)
        back = load_checkpoint(path)
        assert back.version == ck.version
        assert back.config == ck.config
        assert back.best == ck.best
        assert set(back.tensors) == set(ck.tensors)
        for name, arr in ck.tensors.items():
            assert back.tensors[name].dtype == arr.dtype
            np.testing.assert_array_equal(back.tensors[name], arr)
            assert back.tensors[name].tobytes() == arr.tobytes()

    def test_train_state_with_moments(self, tmp_path):
        state = TrainState(base_lr=2e-3, seed=9, step=42, weight_decay={"fc7.weight": 1e-3})
        state.m["w"] = np.arange(4.0)
        state.v["w"] = np.arange(4.0) ** 2
        tensors = {"w": np.ones(4)}
        tensors.update(moment_tensors(state))
        path = tmp_path / "state.ckpt"
        save_checkpoint(
            path, Checkpoint(config={}, train_state=train_state_to_dict(state), tensors=tensors)
        )
        back = load_checkpoint(path)
        params, moments = split_moments(back.tensors)
        restored = train_state_from_dict(back.train_state, moments)
        assert restored.step == 42 and restored.seed == 9
        assert restored.weight_decay == {"fc7.weight": 1e-3}
        np.testing.assert_array_equal(restored.m["w"], state.m["w"])
        np.testing.assert_array_equal(restored.v["w"], state.v["w"])
        assert list(params) == ["w"]


class TestCorruption:
    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOT-A-CHECKPOINT")
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_unknown_version(self, tmp_path):
        path = tmp_path / "v99.ckpt"
        save_checkpoint(path, Checkpoint(config={}, version=1))
        blob = bytearray(path.read_bytes())
        blob[9:13] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version 99"):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "cut.ckpt"
        save_checkpoint(path, sample_checkpoint())
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 7])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_garbage(self, tmp_path):
        path = tmp_path / "extra.ckpt"
        save_checkpoint(path, sample_checkpoint())
        with open(path, "ab") as fh:
            fh.write(b"junk")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(path)

"""The two-stream hierarchical co-occurrence network.

Layout through the network (per person, per stream), with tensors as
``[batch, channels, frames, width]``:

* stage 1: conv1 (1x1, ReLU) then conv2 (n x 1) act per joint — the width
  axis holds joints and both kernels have extent 1 along it;
* an axis swap moves the joint axis into channels, so every later
  convolution aggregates information from all joints at once;
* stage 2: conv3, conv4, each optionally max-pooled; the raw and motion
  streams are concatenated along channels after conv4 (after conv3 when
  conv4 is disabled), then conv5 and conv6 (both ReLU) finish the trunk.

The ``local`` variant prepends the same axis swap before conv1, which swaps
the joint and coordinate roles: joints are mixed only by a single linear map
at the input and stage 2 aggregates locally, mirroring earlier
image-style treatments of skeleton data.  The two variants are otherwise the
identical graph.

Multi-person samples are fused either by stacking persons along the joint
axis at the input (early) or by merging per-person conv6 feature maps
(late max / mean / channel concat); the per-person passes share parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .tensor import GradTape, ParameterStore, Tensor

FUSION_MODES = ("early", "late_mean", "late_concat", "late_max")
VARIANTS = ("global", "local")
CONV_LAYERS = ("conv1", "conv2", "conv3", "conv4", "conv5", "conv6")
POOLABLE = ("conv3", "conv4", "conv5", "conv6")

DEFAULT_CHANNELS = {
    "conv1": 64,
    "conv2": 32,
    "conv3": 32,
    "conv4": 64,
    "conv5": 128,
    "conv6": 256,
    "fc7": 256,
}

DEFAULT_POOLS = {
    "conv3": (2, 2),
    "conv4": (2, 2),
    "conv5": (2, 2),
    "conv6": (2, 2),
}

_ALLOWED_POOLS = ((2, 2), (2, 1))


@dataclass
class ModelConfig:
    """Architecture hyperparameters; every value the graph depends on."""

    joint_count: int
    num_classes: int
    coord_dim: int = 3
    frame_len: int = 32
    channels: dict = field(default_factory=lambda: dict(DEFAULT_CHANNELS))
    temporal_kernel: int = 3
    dropout_ratio: float = 0.5
    max_persons: int = 1
    fusion_mode: str = "late_max"
    variant: str = "global"
    include_conv4: bool = True
    pools: dict = field(default_factory=lambda: dict(DEFAULT_POOLS))

    def validate(self) -> None:
        if self.joint_count < 1 or self.coord_dim < 1:
            raise ConfigError("joint_count and coord_dim must be >= 1")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.frame_len < 1:
            raise ConfigError(f"frame_len must be >= 1, got {self.frame_len}")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ConfigError(f"temporal_kernel must be odd, got {self.temporal_kernel}")
        if not 0.0 <= self.dropout_ratio < 1.0:
            raise ConfigError(f"dropout_ratio must be in [0, 1), got {self.dropout_ratio}")
        if self.max_persons < 1:
            raise ConfigError(f"max_persons must be >= 1, got {self.max_persons}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        needed = [l for l in CONV_LAYERS if l != "conv4" or self.include_conv4] + ["fc7"]
        for layer in needed:
            if self.channels.get(layer, 0) < 1:
                raise ConfigError(f"channels[{layer!r}] must be >= 1")
        unknown = set(self.channels) - set(CONV_LAYERS) - {"fc7"}
        if unknown:
            raise ConfigError(f"unknown channel keys: {sorted(unknown)}")
        for layer, window in self.pools.items():
            if layer not in POOLABLE:
                raise ConfigError(f"pooling not supported after {layer!r}")
            if window is not None and tuple(window) not in _ALLOWED_POOLS:
                raise ConfigError(f"pool window must be (2,2) or (2,1), got {window}")
        if not self.include_conv4 and self.pools.get("conv4") is not None and "conv4" in self.pools:
            raise ConfigError("conv4 pooling configured but conv4 is disabled")
        h, w = self.trunk_output_extents()
        if h < 1 or w < 1:
            raise ConfigError(
                f"pooling collapses the trunk to {h}x{w}; reduce pools or widen the net"
            )

    # -- geometry -----------------------------------------------------------

    def joint_axis_extent(self) -> int:
        """Extent of the joint axis as seen by one network pass."""
        if self.fusion_mode == "early":
            return self.max_persons * self.joint_count
        return self.joint_count

    def stage1_in_channels(self) -> int:
        return self.coord_dim if self.variant == "global" else self.joint_axis_extent()

    def stage1_width(self) -> int:
        return self.joint_axis_extent() if self.variant == "global" else self.coord_dim

    def conv3_in_channels(self) -> int:
        # the axis swap ahead of conv3 moves the stage-1 width into channels
        return self.stage1_width()

    def conv_kernel(self, layer: str) -> tuple[int, int]:
        if layer == "conv1":
            return (1, 1)
        if layer == "conv2":
            return (self.temporal_kernel, 1)
        return (self.temporal_kernel, 3)

    def pool_window(self, layer: str):
        window = self.pools.get(layer)
        return tuple(window) if window is not None else None

    def active_conv_layers(self) -> list[str]:
        return [l for l in CONV_LAYERS if l != "conv4" or self.include_conv4]

    def stream_layers(self) -> list[str]:
        return [l for l in ("conv1", "conv2", "conv3", "conv4") if l != "conv4" or self.include_conv4]

    def fused_channels(self) -> int:
        last = "conv4" if self.include_conv4 else "conv3"
        return 2 * self.channels[last]

    def trunk_output_extents(self) -> tuple[int, int]:
        """(frames, width) of the conv6 output for a frame_len input."""
        h, w = self.frame_len, self.channels["conv2"]
        for layer in POOLABLE:
            if layer == "conv4" and not self.include_conv4:
                continue
            window = self.pool_window(layer)
            if window is not None:
                h, w = h // window[0], w // window[1]
        return h, w

    def conv5_temporal_stride(self) -> int:
        """Input frames per conv5 output step (pooling up to and including conv5)."""
        stride = 1
        for layer in ("conv3", "conv4", "conv5"):
            if layer == "conv4" and not self.include_conv4:
                continue
            window = self.pool_window(layer)
            if window is not None:
                stride *= window[0]
        return stride

    def conv5_width(self) -> int:
        w = self.channels["conv2"]
        for layer in ("conv3", "conv4", "conv5"):
            if layer == "conv4" and not self.include_conv4:
                continue
            window = self.pool_window(layer)
            if window is not None:
                w //= window[1]
        return max(w, 1) if w >= 1 else w

    def flatten_size(self) -> int:
        h, w = self.trunk_output_extents()
        c6 = self.channels["conv6"]
        if self.fusion_mode == "late_concat":
            c6 *= self.max_persons
        return c6 * h * w

    def conv_spec(self, layer: str) -> ops.ConvSpec:
        kh, kw = self.conv_kernel(layer)
        if layer == "conv1":
            cin = self.stage1_in_channels()
        elif layer == "conv2":
            cin = self.channels["conv1"]
        elif layer == "conv3":
            cin = self.conv3_in_channels()
        elif layer == "conv4":
            cin = self.channels["conv3"]
        elif layer == "conv5":
            cin = self.fused_channels()
        elif layer == "conv6":
            cin = self.channels["conv5"]
        else:
            raise ConfigError(f"unknown conv layer {layer!r}")
        return ops.ConvSpec(kh, kw, cin, self.channels[layer])

    def parameter_count(self) -> int:
        """Closed-form size of the parameter registry."""
        per_stream = sum(self.conv_spec(l).param_count for l in self.stream_layers())
        shared = sum(self.conv_spec(l).param_count for l in ("conv5", "conv6"))
        fc7 = self.channels["fc7"] * self.flatten_size() + self.channels["fc7"]
        fc8 = self.num_classes * self.channels["fc7"] + self.num_classes
        return 2 * per_stream + shared + fc7 + fc8

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "joint_count": self.joint_count,
            "num_classes": self.num_classes,
            "coord_dim": self.coord_dim,
            "frame_len": self.frame_len,
            "channels": dict(self.channels),
            "temporal_kernel": self.temporal_kernel,
            "dropout_ratio": self.dropout_ratio,
            "max_persons": self.max_persons,
            "fusion_mode": self.fusion_mode,
            "variant": self.variant,
            "include_conv4": self.include_conv4,
            "pools": {k: (list(v) if v is not None else None) for k, v in self.pools.items()},
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {
            "joint_count", "num_classes", "coord_dim", "frame_len", "channels",
            "temporal_kernel", "dropout_ratio", "max_persons", "fusion_mode",
            "variant", "include_conv4", "pools",
        }
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        missing = {"joint_count", "num_classes"} - set(raw)
        if missing:
            raise ConfigError(f"model config missing required keys: {sorted(missing)}")
        kwargs = dict(raw)
        if "pools" in kwargs:
            kwargs["pools"] = {
                k: (tuple(v) if v is not None else None) for k, v in kwargs["pools"].items()
            }
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def ntu_config(num_classes: int = 60, **overrides) -> ModelConfig:
    """Full-size preset: 25 joints, 32 frames, two persons, ~0.8M parameters."""
    cfg = ModelConfig(joint_count=25, num_classes=num_classes, frame_len=32, max_persons=2)
    return replace(cfg, **overrides) if overrides else cfg


def sbu_config(num_classes: int = 8, **overrides) -> ModelConfig:
    """Reduced preset for small data: narrower layers, conv4 removed, 16 frames."""
    cfg = ModelConfig(
        joint_count=15,
        num_classes=num_classes,
        frame_len=16,
        max_persons=2,
        include_conv4=False,
        channels={"conv1": 32, "conv2": 16, "conv3": 16, "conv5": 32, "conv6": 64, "fc7": 64},
        pools={"conv3": (2, 2), "conv5": (2, 2), "conv6": (2, 2)},
    )
    return replace(cfg, **overrides) if overrides else cfg


def tiny_config(
    joint_count: int = 12,
    num_classes: int = 4,
    frame_len: int = 16,
    max_persons: int = 1,
    **overrides,
) -> ModelConfig:
    """Desk-scale preset used by the synthetic benchmarks and most tests."""
    cfg = ModelConfig(
        joint_count=joint_count,
        num_classes=num_classes,
        frame_len=frame_len,
        max_persons=max_persons,
        include_conv4=False,
        channels={"conv1": 16, "conv2": 8, "conv3": 16, "conv5": 32, "conv6": 32, "fc7": 32},
        pools={"conv3": (2, 2), "conv5": (2, 2), "conv6": (2, 1)},
    )
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class FeatureMaps:
    """Intermediate activations captured during one forward pass.

    Each entry is a list over persons (a single element under early fusion)
    of ``[B, C, H, W]`` arrays.  ``conv4`` holds the pre-fusion activations of
    both streams (falling back to conv3 when conv4 is disabled).
    """

    conv4_raw: list
    conv4_motion: list
    conv5: list
    conv6: list

    def shapes(self) -> dict:
        return {
            name: [tuple(a.shape) for a in getattr(self, name)]
            for name in ("conv4_raw", "conv4_motion", "conv5", "conv6")
        }


class HcnModel:
    """Parameterized network instance; immutable during forward passes."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.params = ParameterStore()
        self._build(rng)

    # -- construction -------------------------------------------------------

    def _he_uniform(self, rng, shape, fan_in):
        limit = math.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, size=shape)

    def _register_conv(self, rng, name: str, spec: ops.ConvSpec):
        fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
        self.params.register(f"{name}.weight", self._he_uniform(rng, spec.weight_shape, fan_in))
        self.params.register(f"{name}.bias", np.zeros(spec.bias_shape))

    def _register_dense(self, rng, name: str, fan_in: int, fan_out: int):
        self.params.register(f"{name}.weight", self._he_uniform(rng, (fan_out, fan_in), fan_in))
        self.params.register(f"{name}.bias", np.zeros(fan_out))

    def _build(self, rng):
        cfg = self.config
        for stream in ("raw", "motion"):
            for layer in cfg.stream_layers():
                self._register_conv(rng, f"{stream}.{layer}", cfg.conv_spec(layer))
        for layer in ("conv5", "conv6"):
            self._register_conv(rng, layer, cfg.conv_spec(layer))
        self._register_dense(rng, "fc7", cfg.flatten_size(), cfg.channels["fc7"])
        self._register_dense(rng, "fc8", cfg.channels["fc7"], cfg.num_classes)

    # -- forward ------------------------------------------------------------

    def _conv(self, name: str, x: Tensor, tape) -> Tensor:
        return ops.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], tape)

    def _pool(self, layer: str, x: Tensor, tape) -> Tensor:
        window = self.config.pool_window(layer)
        return ops.maxpool2d(x, window, tape) if window is not None else x

    def _dropout(self, x: Tensor, mode, rng, tape) -> Tensor:
        return ops.dropout(x, self.config.dropout_ratio, mode, rng, tape)

    def stage1(self, stream: str, x: Tensor, tape: GradTape | None = None) -> Tensor:
        """Point-level encoding: conv1 and conv2, whose kernels have extent 1
        along the width axis, so each width position is processed independently."""
        if self.config.variant == "local":
            x = ops.permute(x, (0, 3, 2, 1), tape)
        x = ops.relu(self._conv(f"{stream}.conv1", x, tape), tape)
        return self._conv(f"{stream}.conv2", x, tape)

    def stage2_conv3(self, stage1_out: Tensor, stream: str, tape: GradTape | None = None) -> Tensor:
        """The first aggregation layer after the axis swap (no pooling)."""
        x = ops.permute(stage1_out, (0, 3, 2, 1), tape)
        return self._conv(f"{stream}.conv3", x, tape)

    def _stream(self, stream: str, x: Tensor, tape) -> Tensor:
        """Stage 1 + stage 2 up to the stream-fusion point."""
        cfg = self.config
        x = self.stage1(stream, x, tape)
        x = ops.permute(x, (0, 3, 2, 1), tape)  # stage-1 width (joints) -> channels
        x = self._pool("conv3", self._conv(f"{stream}.conv3", x, tape), tape)
        if cfg.include_conv4:
            x = self._pool("conv4", self._conv(f"{stream}.conv4", x, tape), tape)
        return x

    def _trunk(self, raw_bchw: Tensor, motion_bchw: Tensor, mode, rng, tape, record=None):
        """Both streams through conv6 for one person pass (or early-fused input)."""
        f_raw = self._stream("raw", raw_bchw, tape)
        f_motion = self._stream("motion", motion_bchw, tape)
        if record is not None:
            record["conv4_raw"].append(f_raw.data.copy())
            record["conv4_motion"].append(f_motion.data.copy())
        x = ops.concat_channels(f_raw, f_motion, tape)
        x = self._dropout(x, mode, rng, tape)
        x = self._dropout(
            self._pool("conv5", ops.relu(self._conv("conv5", x, tape), tape), tape), mode, rng, tape
        )
        if record is not None:
            record["conv5"].append(x.data.copy())
        x = self._dropout(
            self._pool("conv6", ops.relu(self._conv("conv6", x, tape), tape), tape), mode, rng, tape
        )
        if record is not None:
            record["conv6"].append(x.data.copy())
        return x

    def _head(self, features: Tensor, mode, rng, tape) -> Tensor:
        x = ops.flatten(features, tape)
        x = ops.relu(ops.dense(x, self.params["fc7.weight"], self.params["fc7.bias"], tape), tape)
        x = self._dropout(x, mode, rng, tape)
        return ops.dense(x, self.params["fc8.weight"], self.params["fc8.bias"], tape)

    @staticmethod
    def _to_bchw(x: np.ndarray) -> Tensor:
        # [B, T, N, D] -> [B, D, T, N]
        return Tensor(np.ascontiguousarray(np.transpose(x, (0, 3, 1, 2))))

    def _validate_batch(self, raw, motion):
        cfg = self.config
        if raw.ndim != 5 or motion.ndim != 5:
            raise ShapeError(
                f"batch arrays must be [B, persons, T, joints, coords], got {raw.shape} / {motion.shape}"
            )
        if raw.shape != motion.shape:
            raise ShapeError(f"raw and motion shapes differ: {raw.shape} vs {motion.shape}")
        b, p, t, n, d = raw.shape
        if t != cfg.frame_len:
            raise ShapeError(f"frame axis is {t}, model expects {cfg.frame_len}")
        if n != cfg.joint_count:
            raise ShapeError(f"joint axis is {n}, model expects {cfg.joint_count}")
        if d != cfg.coord_dim:
            raise ShapeError(f"coord axis is {d}, model expects {cfg.coord_dim}")
        if cfg.fusion_mode in ("early", "late_concat") and p != cfg.max_persons:
            raise ShapeError(
                f"{cfg.fusion_mode} fusion requires exactly {cfg.max_persons} (padded) persons, got {p}"
            )

    def forward(
        self,
        raw: np.ndarray,
        motion: np.ndarray,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
        tape: GradTape | None = None,
        person_counts: np.ndarray | None = None,
        return_features: bool = False,
    ):
        """Run a batch; returns logits ``[B, num_classes]`` (plus FeatureMaps).

        ``raw`` and ``motion`` are ``[B, P, T, N, D]``.  ``person_counts``
        marks how many leading persons of each sample are real; absent means
        all of them.  Dropout fires only in train mode and consumes ``rng``.
        """
        raw = np.asarray(raw, dtype=np.float64)
        motion = np.asarray(motion, dtype=np.float64)
        self._validate_batch(raw, motion)
        cfg = self.config
        b, p = raw.shape[:2]
        if person_counts is None:
            person_counts = np.full(b, p, dtype=np.int64)
        else:
            person_counts = np.asarray(person_counts, dtype=np.int64)
            if person_counts.shape != (b,) or person_counts.min() < 1 or person_counts.max() > p:
                raise ShapeError(f"person_counts must be [B] ints in [1, {p}]")
        record = (
            {"conv4_raw": [], "conv4_motion": [], "conv5": [], "conv6": []}
            if return_features
            else None
        )

        if cfg.fusion_mode == "early":
            # [B, P, T, N, D] -> [B, T, P*N, D]: persons stacked along joints
            stacked = raw.transpose(0, 2, 1, 3, 4).reshape(b, cfg.frame_len, p * cfg.joint_count, cfg.coord_dim)
            stacked_m = motion.transpose(0, 2, 1, 3, 4).reshape(b, cfg.frame_len, p * cfg.joint_count, cfg.coord_dim)
            fused = self._trunk(self._to_bchw(stacked), self._to_bchw(stacked_m), mode, rng, tape, record)
        else:
            per_person = [
                self._trunk(self._to_bchw(raw[:, i]), self._to_bchw(motion[:, i]), mode, rng, tape, record)
                for i in range(p)
            ]
            fused = self.fuse_persons(per_person, person_counts, tape)

        logits = self._head(fused, mode, rng, tape)
        if return_features:
            return logits, FeatureMaps(**record)
        return logits

    def fuse_persons(
        self,
        person_features: list[Tensor],
        person_counts: np.ndarray | None = None,
        tape: GradTape | None = None,
    ) -> Tensor:
        """Merge per-person conv6 features according to the fusion mode."""
        mode = self.config.fusion_mode
        if not person_features:
            raise ShapeError("fuse_persons needs at least one person")
        b = person_features[0].shape[0]
        p = len(person_features)
        if person_counts is None:
            person_counts = np.full(b, p, dtype=np.int64)
        if mode == "late_concat":
            if p != self.config.max_persons:
                raise ShapeError(
                    f"late_concat requires exactly {self.config.max_persons} persons, got {p}"
                )
            out = person_features[0]
            for f in person_features[1:]:
                out = ops.concat_channels(out, f, tape)
            return out
        if mode == "late_max":
            out = person_features[0]
            for i, f in enumerate(person_features[1:], start=1):
                out = ops.masked_maximum(out, f, person_counts > i, tape)
            return out
        if mode == "late_mean":
            return ops.masked_mean_stack(person_features, person_counts, tape)
        raise ShapeError(f"fuse_persons does not apply to fusion mode {mode!r}")

    def backbone_conv5(
        self,
        raw: np.ndarray,
        motion: np.ndarray,
        tape: GradTape | None = None,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Conv5 feature map for arbitrary-length input, fused over persons by
        element-wise max.  Used by the temporal detection head."""
        raw = np.asarray(raw, dtype=np.float64)
        motion = np.asarray(motion, dtype=np.float64)
        if raw.ndim != 5 or raw.shape != motion.shape:
            raise ShapeError(f"expected matching [B, P, T, N, D] arrays, got {raw.shape} / {motion.shape}")
        cfg = self.config
        if raw.shape[3] != cfg.joint_count or raw.shape[4] != cfg.coord_dim:
            raise ShapeError(
                f"joints/coords {raw.shape[3:]} do not match model ({cfg.joint_count}, {cfg.coord_dim})"
            )
        b, p = raw.shape[:2]
        fused = None
        for i in range(p):
            f_raw = self._stream("raw", self._to_bchw(raw[:, i]), tape)
            f_motion = self._stream("motion", self._to_bchw(motion[:, i]), tape)
            x = ops.concat_channels(f_raw, f_motion, tape)
            x = self._dropout(x, mode, rng, tape)
            x = self._dropout(
                self._pool("conv5", ops.relu(self._conv("conv5", x, tape), tape), tape),
                mode,
                rng,
                tape,
            )
            fused = x if fused is None else ops.maximum(fused, x, tape)
        return fused

    def predict_proba_batch(self, raw, motion, person_counts=None) -> np.ndarray:
        """Eval-mode class probabilities for a prepared batch."""
        from .losses import softmax

        logits = self.forward(raw, motion, mode="eval", person_counts=person_counts)
        return softmax(logits.data)

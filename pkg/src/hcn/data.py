"""Skeleton sequence containers, preprocessing, JSONL persistence, and
synthetic datasets for desk-scale verification.

A sequence holds one coordinate array of shape ``[frames, joints, coords]``
per tracked person.  Trimmed recognition samples carry an integer label;
untrimmed detection samples carry ``(start, end, class)`` groundtruth
segments instead.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .ops import resize_temporal_bilinear
from .tensor import Tensor


@dataclass
class SkeletonSequence:
    """Per-person joint coordinates with label or segment metadata.

    All persons must share the same ``[T, N, D]`` shape.  Missing persons are
    represented by absence; zero padding is an explicit op (:func:`pad_persons`).
    """

    persons: list[np.ndarray]
    label: int | None = None
    segments: list[tuple[int, int, int]] | None = None
    sample_id: str = ""

    def __post_init__(self):
        if not self.persons:
            raise DataError(f"sequence {self.sample_id!r} has no persons")
        arrays = []
        first = None
        for i, p in enumerate(self.persons):
            arr = np.asarray(p, dtype=np.float64)
            if arr.ndim != 3:
                raise DataError(
                    f"sequence {self.sample_id!r}: person {i} must be [frames, joints, coords], "
                    f"got shape {arr.shape}"
                )
            if first is None:
                first = arr.shape
            elif arr.shape != first:
                raise DataError(
                    f"sequence {self.sample_id!r}: person {i} shape {arr.shape} differs from {first}"
                )
            arrays.append(arr)
        self.persons = arrays
        if self.segments is not None:
            t = first[0]
            checked = []
            for seg in self.segments:
                if len(seg) != 3:
                    raise DataError(f"sequence {self.sample_id!r}: segment {seg!r} must be (start, end, class)")
                s, e, c = int(seg[0]), int(seg[1]), int(seg[2])
                if not (0 <= s < e <= t):
                    raise DataError(
                        f"sequence {self.sample_id!r}: segment ({s}, {e}) outside frames [0, {t}]"
                    )
                checked.append((s, e, c))
            self.segments = checked

    @property
    def frame_count(self) -> int:
        return self.persons[0].shape[0]

    @property
    def joint_count(self) -> int:
        return self.persons[0].shape[1]

    @property
    def coord_dim(self) -> int:
        return self.persons[0].shape[2]

    @property
    def person_count(self) -> int:
        return len(self.persons)

    def with_persons(self, persons: list[np.ndarray]) -> "SkeletonSequence":
        return SkeletonSequence(persons, label=self.label, segments=self.segments, sample_id=self.sample_id)


@dataclass
class DetectionSequence:
    """An untrimmed sequence paired with its groundtruth action segments."""

    sequence: SkeletonSequence
    segments: list[tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        t = self.sequence.frame_count
        for s, e, c in self.segments:
            if not (0 <= s < e <= t):
                raise DataError(f"segment ({s}, {e}) outside frames [0, {t}]")

    @classmethod
    def from_sequence(cls, seq: SkeletonSequence) -> "DetectionSequence":
        if seq.segments is None:
            raise DataError(f"sequence {seq.sample_id!r} carries no segments")
        return cls(sequence=seq, segments=list(seq.segments))


def compute_motion(seq: SkeletonSequence) -> SkeletonSequence:
    """Temporal difference stream: motion[t] = skeleton[t+1] - skeleton[t].

    The final frame, which has no successor, is defined as zero so the motion
    stream keeps the input's shape.
    """
    return seq.with_persons([motion_array(p) for p in seq.persons])


def motion_array(coords: np.ndarray) -> np.ndarray:
    out = np.zeros_like(coords)
    if coords.shape[0] > 1:
        out[:-1] = coords[1:] - coords[:-1]
    return out


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def crop_train(seq: SkeletonSequence, rng: np.random.Generator) -> SkeletonSequence:
    """Random sub-sequence crop with ratio drawn uniformly from [0.5, 1]."""
    t = seq.frame_count
    ratio = rng.uniform(0.5, 1.0)
    length = max(1, _round_half_up(ratio * t))
    length = min(length, t)
    start = int(rng.integers(0, t - length + 1))
    return seq.with_persons([p[start : start + length] for p in seq.persons])


def crop_eval(seq: SkeletonSequence, ratio: float = 0.9) -> SkeletonSequence:
    """Deterministic center crop (default ratio 0.9)."""
    t = seq.frame_count
    length = max(1, min(t, _round_half_up(ratio * t)))
    start = (t - length) // 2
    return seq.with_persons([p[start : start + length] for p in seq.persons])


def resize_sequence(seq: SkeletonSequence, target_len: int) -> SkeletonSequence:
    """Normalize every person to ``target_len`` frames by linear interpolation."""
    return seq.with_persons(
        [resize_temporal_bilinear(Tensor(p), target_len).data for p in seq.persons]
    )


def pad_persons(seq: SkeletonSequence, max_persons: int) -> list[np.ndarray]:
    """Return exactly ``max_persons`` arrays, real persons first, zeros after."""
    if seq.person_count > max_persons:
        raise DataError(
            f"sequence {seq.sample_id!r} has {seq.person_count} persons, limit is {max_persons}"
        )
    padded = [p.copy() for p in seq.persons]
    blank = np.zeros_like(seq.persons[0])
    while len(padded) < max_persons:
        padded.append(blank.copy())
    return padded


# ---------------------------------------------------------------------------
# JSONL persistence
# ---------------------------------------------------------------------------

def save_jsonl(dataset: list[SkeletonSequence], path) -> None:
    """One sample per line; numbers keep full decimal precision."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for seq in dataset:
            record = {
                "id": seq.sample_id,
                "label": seq.label,
                "segments": [list(s) for s in seq.segments] if seq.segments is not None else None,
                "persons": [p.tolist() for p in seq.persons],
            }
            fh.write(json.dumps(record) + "\n")


def load_jsonl(path) -> list[SkeletonSequence]:
    dataset = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            try:
                dataset.append(_sequence_from_record(record, lineno))
            except DataError:
                raise
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}: line {lineno}: malformed record ({exc})") from exc
    return dataset


def _sequence_from_record(record: dict, lineno: int) -> SkeletonSequence:
    for key in ("id", "persons"):
        if key not in record:
            raise DataError(f"line {lineno}: missing field {key!r}")
    persons_raw = record["persons"]
    if not isinstance(persons_raw, list) or not persons_raw:
        raise DataError(f"line {lineno}: 'persons' must be a non-empty list")
    persons = []
    shape = None
    for i, p in enumerate(persons_raw):
        arr = np.asarray(p, dtype=np.float64)
        if arr.ndim != 3:
            raise DataError(f"line {lineno}: person {i} is not a [frames][joints][coords] array")
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise DataError(
                f"line {lineno}: person {i} shape {arr.shape} differs from person 0 shape {shape}"
            )
        persons.append(arr)
    label = record.get("label")
    segments = record.get("segments")
    if label is not None:
        label = int(label)
    if segments is not None:
        segments = [tuple(int(v) for v in seg) for seg in segments]
    try:
        return SkeletonSequence(
            persons, label=label, segments=segments, sample_id=str(record["id"])
        )
    except DataError as exc:
        raise DataError(f"line {lineno}: {exc}") from exc


def split_dataset(
    dataset: list[SkeletonSequence], val_fraction: float, seed: int
) -> tuple[list[SkeletonSequence], list[SkeletonSequence]]:
    """Deterministic stratified split; val_fraction 0 yields an empty val set."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    by_label: dict = {}
    for idx, seq in enumerate(dataset):
        by_label.setdefault(seq.label, []).append(idx)
    train_idx, val_idx = [], []
    for label in sorted(by_label, key=lambda x: (x is None, x)):
        idxs = np.array(by_label[label])
        rng.shuffle(idxs)
        n_val = int(round(val_fraction * len(idxs)))
        val_idx.extend(idxs[:n_val])
        train_idx.extend(idxs[n_val:])
    return [dataset[i] for i in sorted(train_idx)], [dataset[i] for i in sorted(val_idx)]


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def _unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _smoothed_walk(rng, frames: int, joints: int, step_sigma: float, window: int) -> np.ndarray:
    """Low-pass filtered random walk; calm idle motion for detection backgrounds."""
    steps = rng.normal(0.0, step_sigma, size=(frames, joints, 3))
    walk = np.cumsum(steps, axis=0)
    if window > 1:
        kernel = np.ones(window) / window
        pad = np.pad(walk, ((window // 2, window - 1 - window // 2), (0, 0), (0, 0)), mode="edge")
        walk = np.apply_along_axis(lambda m: np.convolve(m, kernel, mode="valid"), 0, pad)
    return walk


_WAVE_PERIOD = (12.0, 20.0)  # frames per cycle, shared by signal and background


def _narrowband_motion(rng, frames: int, joints: int) -> np.ndarray:
    """Independent oscillatory noise per joint: white noise through a damped
    resonator tuned to the same period band as the class signal.

    Every joint wiggles with a similar spectrum, so a single joint's waveform
    carries no class information; only the phase lock between the designated
    pair does.
    """
    from scipy.signal import lfilter

    out = np.empty((frames, joints, 3))
    for j in range(joints):
        omega = 2.0 * np.pi / rng.uniform(*_WAVE_PERIOD)
        r = rng.uniform(0.90, 0.97)
        a = [1.0, -2.0 * r * np.cos(omega), r * r]
        x = lfilter([1.0], a, rng.normal(size=(frames, 3)), axis=0)
        out[:, j, :] = x / (x.std(axis=0, keepdims=True) + 1e-9)
    return out


def class_joint_pair(class_id: int, joints: int) -> tuple[int, int]:
    """The distant joint pair whose correlated motion defines a class."""
    a = class_id % joints
    b = (joints - 1 - class_id) % joints
    return a, b


def _synth_person(
    rng: np.random.Generator,
    class_id: int,
    frames: int,
    joints: int,
    noise_sigma: float,
) -> np.ndarray:
    a, b = class_joint_pair(class_id, joints)
    coords = np.repeat(rng.uniform(-1.0, 1.0, size=(1, joints, 3)), frames, axis=0)
    background = _narrowband_motion(rng, frames, joints) * rng.uniform(0.6, 1.0)
    background[:, a, :] = 0.0
    background[:, b, :] = 0.0
    coords += background
    phase = rng.uniform(0.0, 2.0 * np.pi)
    period = rng.uniform(*_WAVE_PERIOD)
    amplitude = rng.uniform(0.7, 1.3)
    wave = amplitude * np.sin(2.0 * np.pi * np.arange(frames) / period + phase)
    for j in (a, b):
        coords[:, j, :] += wave[:, None] * _unit_vector(rng)[None, :]
    if noise_sigma > 0:
        coords += rng.normal(0.0, noise_sigma, size=coords.shape)
    return coords


def synth_generate(
    classes: int,
    samples_per_class: int,
    frames: int,
    joints: int,
    persons: int = 1,
    noise_sigma: float = 0.05,
    seed: int = 0,
) -> list[SkeletonSequence]:
    """Labelled dataset whose class evidence is a long-range joint correlation.

    Class ``c`` makes joints ``c`` and ``joints-1-c`` oscillate in phase with
    each other while every other joint carries class-independent oscillatory
    noise from the same frequency band, so telling classes apart requires
    relating far-apart joint indices rather than inspecting any joint alone.
    Deterministic for a fixed seed.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if joints < 2 * classes:
        raise ValueError(
            f"{joints} joints cannot host {classes} disjoint long-range pairs; need >= {2 * classes}"
        )
    if frames < 2 or samples_per_class < 1 or persons < 1:
        raise ValueError("frames must be >= 2 and counts positive")
    rng = np.random.default_rng(seed)
    dataset = []
    for c in range(classes):
        for s in range(samples_per_class):
            arrays = [
                _synth_person(rng, c, frames, joints, noise_sigma) for _ in range(persons)
            ]
            dataset.append(
                SkeletonSequence(arrays, label=c, sample_id=f"synth-c{c}-s{s}")
            )
    return dataset


def synth_generate_detection(
    classes: int,
    num_sequences: int,
    length: int,
    joints: int,
    seed: int = 0,
    noise_sigma: float = 0.02,
    min_action: int = 40,
    max_action: int = 120,
    min_gap: int = 25,
    amplitude: float = 1.2,
) -> list[SkeletonSequence]:
    """Untrimmed sequences: idle background with class-specific action spans
    spliced in, plus (start, end, class) groundtruth."""
    if joints < 2 * classes:
        raise ValueError(f"{joints} joints cannot host {classes} disjoint pairs")
    if length < min_action + 2 * min_gap:
        raise ValueError("sequence length too short for even one action span")
    rng = np.random.default_rng(seed)
    dataset = []
    for s in range(num_sequences):
        coords = np.repeat(rng.uniform(-1.0, 1.0, size=(1, joints, 3)), length, axis=0)
        coords += _smoothed_walk(rng, length, joints, 0.05, 9)
        segments = []
        cursor = int(rng.integers(0, min_gap + 1))
        while cursor + min_action <= length:
            span = int(rng.integers(min_action, max_action + 1))
            end = min(cursor + span, length)
            if end - cursor < min_action:
                break
            c = int(rng.integers(0, classes))
            a, b = class_joint_pair(c, joints)
            t = np.arange(end - cursor)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            period = rng.uniform(12.0, 20.0)
            wave = amplitude * np.sin(2.0 * np.pi * t / period + phase)
            for j in (a, b):
                coords[cursor:end, j, :] += wave[:, None] * _unit_vector(rng)[None, :]
            segments.append((cursor, end, c))
            cursor = end + min_gap + int(rng.integers(0, min_gap + 1))
        if noise_sigma > 0:
            coords += rng.normal(0.0, noise_sigma, size=coords.shape)
        dataset.append(
            SkeletonSequence([coords], segments=segments, sample_id=f"detsynth-{s}")
        )
    return dataset

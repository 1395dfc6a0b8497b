"""Recognition training: preprocessing pipeline, batch assembly, the step
loop, evaluation, and the metrics record format.

Preprocessing order per sample: crop (random in train mode, center in eval),
resize to the model's frame length, person padding where the fusion mode
needs a fixed count, then the motion stream from the resized frames.
Everything is driven by explicit seeded generators, so a fixed seed gives a
bit-identical run, metrics included.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import SkeletonSequence, compute_motion, crop_eval, crop_train, pad_persons, resize_sequence
from .errors import NonFiniteError, TrainingDiverged
from .losses import softmax, softmax_cross_entropy
from .model import HcnModel
from .optim import TrainState, adam_step
from .tensor import GradTape

METRICS_COLUMNS = ("step", "split", "loss", "accuracy", "map", "learning_rate")


@dataclass
class TrainSchedule:
    batch_size: int = 32
    total_steps: int = 1000
    eval_every: int = 200


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_step: int = 0
    best_metric: float = 0.0
    best_params: dict = field(default_factory=dict)
    final_params: dict = field(default_factory=dict)


def prepare_sample(
    seq: SkeletonSequence,
    config,
    mode: str,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Crop, resize, pad, and differentiate one sequence.

    Returns (raw [P, T, N, D], motion [P, T, N, D], real person count).
    """
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode preprocessing needs an rng")
        cropped = crop_train(seq, rng)
    else:
        cropped = crop_eval(seq)
    resized = resize_sequence(cropped, config.frame_len)
    count = resized.person_count
    if config.fusion_mode in ("early", "late_concat"):
        persons = pad_persons(resized, config.max_persons)
        resized = resized.with_persons(persons)
        count = config.max_persons
    motion = compute_motion(resized)
    return np.stack(resized.persons), np.stack(motion.persons), count


def make_batch(samples, config, mode: str, rng=None):
    """Assemble [B, P, T, N, D] arrays; ragged person counts are zero-padded
    and reported so late max/mean fusion can ignore the padding."""
    raws, motions, counts, labels = [], [], [], []
    for seq in samples:
        raw, motion, count = prepare_sample(seq, config, mode, rng)
        raws.append(raw)
        motions.append(motion)
        counts.append(count)
        labels.append(seq.label)
    max_p = max(r.shape[0] for r in raws)
    shape = (len(raws), max_p) + raws[0].shape[1:]
    raw_b = np.zeros(shape)
    motion_b = np.zeros(shape)
    for i, (r, m) in enumerate(zip(raws, motions)):
        raw_b[i, : r.shape[0]] = r
        motion_b[i, : m.shape[0]] = m
    return raw_b, motion_b, np.array(counts, dtype=np.int64), np.array(labels)


def evaluate(model: HcnModel, dataset, batch_size: int = 64) -> tuple[float, float]:
    """Eval-mode mean loss and accuracy over a dataset."""
    if not dataset:
        raise ValueError("cannot evaluate an empty dataset")
    total_loss, correct = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start : start + batch_size]
        raw, motion, counts, labels = make_batch(chunk, model.config, "eval")
        logits = model.forward(raw, motion, mode="eval", person_counts=counts)
        loss, _ = softmax_cross_entropy(logits.data, labels)
        total_loss += loss * len(chunk)
        correct += int((logits.data.argmax(axis=1) == labels).sum())
    return total_loss / len(dataset), correct / len(dataset)


def predict_sequence(model: HcnModel, seq: SkeletonSequence) -> np.ndarray:
    """Class probabilities for one sequence under the eval pipeline."""
    raw, motion, count = prepare_sample(seq, model.config, "eval")
    probs = softmax(
        model.forward(
            raw[None], motion[None], mode="eval", person_counts=np.array([count])
        ).data
    )
    return probs[0]


def _batch_indices(n: int, batch_size: int, total_steps: int, rng: np.random.Generator):
    """Epoch-shuffled batch index stream; deterministic given the rng."""
    produced = 0
    while produced < total_steps:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]
            produced += 1
            if produced >= total_steps:
                return


def train_loop(
    model: HcnModel,
    train_set,
    val_set,
    state: TrainState,
    schedule: TrainSchedule,
) -> TrainResult:
    """Run the optimization; returns metric history and the best snapshot.

    The best model is selected by validation accuracy (train accuracy when no
    validation split exists).  Non-finite losses or activations abort with
    :class:`TrainingDiverged`, which carries the partial result so the caller
    can keep the last good checkpoint.
    """
    if not train_set:
        raise ValueError("training set is empty")
    labels = [s.label for s in train_set + list(val_set)]
    if any(l is None or not 0 <= l < model.config.num_classes for l in labels):
        raise ValueError(f"labels must lie in [0, {model.config.num_classes})")

    seed_seq = np.random.SeedSequence(state.seed)
    data_rng, dropout_rng = (np.random.default_rng(s) for s in seed_seq.spawn(2))
    result = TrainResult()
    result.best_params = model.params.state_arrays()

    def run_eval(step):
        rows = []
        for split, dataset in (("train", train_set), ("val", val_set)):
            if not dataset:
                continue
            loss, acc = evaluate(model, dataset, schedule.batch_size)
            rows.append(
                {
                    "step": step,
                    "split": split,
                    "loss": loss,
                    "accuracy": acc,
                    "map": None,
                    "learning_rate": state.learning_rate(step),
                }
            )
        result.history.extend(rows)
        metric = rows[-1]["accuracy"]  # val when present, train otherwise
        if metric > result.best_metric or not result.best_params:
            result.best_metric = metric
            result.best_step = step
            result.best_params = model.params.state_arrays()
        return rows

    batches = _batch_indices(
        len(train_set), schedule.batch_size, schedule.total_steps, data_rng
    )
    step = 0
    try:
        for idx in batches:
            chunk = [train_set[i] for i in idx]
            raw, motion, counts, labels = make_batch(chunk, model.config, "train", data_rng)
            tape = GradTape()
            logits = model.forward(
                raw, motion, mode="train", rng=dropout_rng, tape=tape, person_counts=counts
            )
            loss, grad = softmax_cross_entropy(logits.data, labels)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became non-finite at step {step}")
            model.params.zero_grad()
            tape.backward((logits, grad))
            adam_step(state, model.params)
            step += 1
            if schedule.eval_every and step % schedule.eval_every == 0 and step < schedule.total_steps:
                run_eval(step)
    except (NonFiniteError, FloatingPointError) as exc:
        diverged = TrainingDiverged(f"training diverged at step {step}: {exc}")
        diverged.result = result
        raise diverged from exc
    except TrainingDiverged as exc:
        exc.result = result
        raise

    run_eval(step)
    result.final_params = model.params.state_arrays()
    return result


def format_metric(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_to_csv(history, path) -> None:
    """Fixed-schema CSV; float cells use full repr so reruns are byte-identical."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        for row in history:
            fh.write(",".join(format_metric(row.get(col)) for col in METRICS_COLUMNS) + "\n")

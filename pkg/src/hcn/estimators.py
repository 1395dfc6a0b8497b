"""Scikit-learn style estimators wrapping the network, so the recognizer and
the detector compose with pipelines, model selection, and `clone`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import split_dataset
from .detection import DetectionConfig, DetectionHead, detect, evaluate_map, train_detector
from .errors import DataError
from .model import HcnModel, ModelConfig, tiny_config
from .optim import TrainState
from .training import TrainSchedule, predict_sequence, train_loop
from .validation import as_sequences, check_consistent_geometry, check_labels


class HcnClassifier(ClassifierMixin, BaseEstimator):
    """Skeleton action classifier with a fit/predict surface.

    ``X`` may be a list of :class:`~hcn.data.SkeletonSequence` or an ndarray
    ``[n, T, N, D]`` / ``[n, persons, T, N, D]``; geometry is inferred at fit
    time.  ``channels=None`` uses the compact desk-scale trunk.
    """

    def __init__(
        self,
        frame_len: int = 16,
        channels: dict | None = None,
        temporal_kernel: int = 3,
        dropout_ratio: float = 0.0,
        variant: str = "global",
        fusion_mode: str = "late_max",
        max_persons: int = 1,
        include_conv4: bool = False,
        pools: dict | None = None,
        learning_rate: float = 1e-3,
        lr_decay: float = 0.99,
        lr_decay_every: int = 1000,
        weight_decay: float = 1e-3,
        batch_size: int = 32,
        total_steps: int = 800,
        eval_every: int = 0,
        val_fraction: float = 0.0,
        seed: int = 0,
    ):
        self.frame_len = frame_len
        self.channels = channels
        self.temporal_kernel = temporal_kernel
        self.dropout_ratio = dropout_ratio
        self.variant = variant
        self.fusion_mode = fusion_mode
        self.max_persons = max_persons
        self.include_conv4 = include_conv4
        self.pools = pools
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.total_steps = total_steps
        self.eval_every = eval_every
        self.val_fraction = val_fraction
        self.seed = seed

    def _build_config(self, joints: int, coords: int, n_classes: int) -> ModelConfig:
        base = tiny_config(
            joint_count=joints,
            num_classes=n_classes,
            frame_len=self.frame_len,
            max_persons=self.max_persons,
        )
        cfg = ModelConfig(
            joint_count=joints,
            num_classes=n_classes,
            coord_dim=coords,
            frame_len=self.frame_len,
            channels=dict(self.channels) if self.channels is not None else dict(base.channels),
            temporal_kernel=self.temporal_kernel,
            dropout_ratio=self.dropout_ratio,
            max_persons=self.max_persons,
            fusion_mode=self.fusion_mode,
            variant=self.variant,
            include_conv4=self.include_conv4,
            pools=dict(self.pools) if self.pools is not None else dict(base.pools),
        )
        cfg.validate()
        return cfg

    def fit(self, X, y):
        sequences = as_sequences(X)
        joints, coords = check_consistent_geometry(sequences)
        y = check_labels(y, len(sequences))
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise DataError("need at least two classes to fit")
        samples = [seq.with_persons(seq.persons) for seq in sequences]
        for seq, label in zip(samples, encoded):
            seq.label = int(label)

        config = self._build_config(joints, coords, len(self.classes_))
        self.config_ = config
        model = HcnModel(config, np.random.default_rng(self.seed))
        state = TrainState(
            base_lr=self.learning_rate,
            decay_rate=self.lr_decay,
            decay_every=self.lr_decay_every,
            seed=self.seed,
            weight_decay={"fc7.weight": self.weight_decay} if self.weight_decay else {},
        )
        train_set, val_set = split_dataset(samples, self.val_fraction, self.seed)
        schedule = TrainSchedule(
            batch_size=self.batch_size,
            total_steps=self.total_steps,
            eval_every=self.eval_every,
        )
        result = train_loop(model, train_set, val_set, state, schedule)
        model.params.load_arrays(result.best_params)
        self.model_ = model
        self.history_ = result.history
        self.best_score_ = result.best_metric
        self.n_features_in_ = joints * coords
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        sequences = as_sequences(X)
        probs = [predict_sequence(self.model_, seq) for seq in sequences]
        return np.stack(probs)

    def predict(self, X) -> np.ndarray:
        winners = self.predict_proba(X).argmax(axis=1)
        return self.classes_[winners]


class HcnDetector(BaseEstimator):
    """Temporal action detector: fit on untrimmed sequences with groundtruth
    segments, predict scored class windows, score with mAP at IoU 0.5."""

    def __init__(
        self,
        channels: dict | None = None,
        frame_len: int = 16,
        temporal_kernel: int = 3,
        scales: tuple = (50, 100, 200, 400),
        crop_len: int = 8,
        hidden_channels: int = 64,
        score_threshold: float = 0.05,
        learning_rate: float = 1e-3,
        lr_decay: float = 0.99,
        lr_decay_every: int = 1000,
        total_steps: int = 400,
        eval_every: int = 0,
        seed: int = 0,
    ):
        self.channels = channels
        self.frame_len = frame_len
        self.temporal_kernel = temporal_kernel
        self.scales = scales
        self.crop_len = crop_len
        self.hidden_channels = hidden_channels
        self.score_threshold = score_threshold
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.total_steps = total_steps
        self.eval_every = eval_every
        self.seed = seed

    @staticmethod
    def _segments_for(sequences, y):
        if y is None:
            segs = [seq.segments for seq in sequences]
            if any(s is None for s in segs):
                raise DataError("sequences carry no segments and no y was given")
            return segs
        if len(y) != len(sequences):
            raise DataError(f"y has {len(y)} entries for {len(sequences)} sequences")
        return [list(map(tuple, s)) for s in y]

    def fit(self, X, y=None):
        sequences = as_sequences(X)
        joints, coords = check_consistent_geometry(sequences)
        segments = self._segments_for(sequences, y)
        labelled = [
            seq.with_persons(seq.persons) for seq in sequences
        ]
        for seq, segs in zip(labelled, segments):
            seq.segments = [tuple(int(v) for v in s) for s in segs]
        classes = sorted({c for segs in segments for _, _, c in segs})
        if not classes:
            raise DataError("no groundtruth segments in the training data")
        n_classes = max(classes) + 1

        base = tiny_config(joint_count=joints, num_classes=max(2, n_classes), frame_len=self.frame_len)
        model_config = ModelConfig(
            joint_count=joints,
            num_classes=max(2, n_classes),
            coord_dim=coords,
            frame_len=self.frame_len,
            channels=dict(self.channels) if self.channels is not None else dict(base.channels),
            temporal_kernel=self.temporal_kernel,
            dropout_ratio=0.0,
            include_conv4=base.include_conv4,
            pools=dict(base.pools),
        )
        model_config.validate()
        det_config = DetectionConfig(
            scales=tuple(self.scales),
            crop_len=self.crop_len,
            hidden_channels=self.hidden_channels,
            score_threshold=self.score_threshold,
        )
        seed_rng = np.random.SeedSequence(self.seed).spawn(2)
        self.model_ = HcnModel(model_config, np.random.default_rng(seed_rng[0]))
        self.head_ = DetectionHead(
            model_config, det_config, n_classes, np.random.default_rng(seed_rng[1])
        )
        state = TrainState(
            base_lr=self.learning_rate,
            decay_rate=self.lr_decay,
            decay_every=self.lr_decay_every,
            seed=self.seed,
        )
        self.history_ = train_detector(
            self.model_, self.head_, labelled, state, self.total_steps, self.eval_every
        )
        self.n_classes_ = n_classes
        return self

    def predict(self, X) -> list:
        check_is_fitted(self, "model_")
        sequences = as_sequences(X)
        return [detect(self.model_, self.head_, seq) for seq in sequences]

    def score(self, X, y=None) -> float:
        """Mean average precision at IoU 0.5 against the given segments."""
        sequences = as_sequences(X)
        segments = self._segments_for(sequences, y)
        detections = {}
        truth = {}
        for i, (seq, segs) in enumerate(zip(sequences, segments)):
            key = seq.sample_id or str(i)
            detections[key] = detect(self.model_, self.head_, seq)
            truth[key] = segs
        _, mean_ap = evaluate_map(detections, truth)
        return mean_ap

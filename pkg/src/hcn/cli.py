"""Command-line interface: train, eval, predict, detect, ablate, synth.

Exit status: 0 on success, 1 on usage/config/data errors, 2 on runtime
failures (including training divergence, which still leaves the last good
checkpoint on disk).  Set ``HCN_LOG`` to adjust log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import data as data_mod
from . import detection as det_mod
from .checkpoint import (
    Checkpoint,
    load_checkpoint,
    moment_tensors,
    save_checkpoint,
    split_moments,
    train_state_from_dict,
    train_state_to_dict,
)
from .config import RunConfig, load_run_config
from .errors import CheckpointError, ConfigError, DataError, HcnError, TrainingDiverged
from .model import HcnModel
from .optim import TrainState
from .training import TrainSchedule, evaluate, metrics_to_csv, predict_sequence, train_loop

log = logging.getLogger("hcn")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors map to exit code 1, not argparse's 2
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hcn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        return p

    p = add("train", cmd_train, "train a recognizer or detector from a config file")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="override the output directory")

    p = add("eval", cmd_eval, "re-evaluate a checkpoint on its configured data split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None, help="override: JSONL dataset path")
    p.add_argument("--split", choices=("train", "val"), default="val")

    p = add("predict", cmd_predict, "class probabilities for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="JSONL dataset path")
    p.add_argument("--index", type=int, default=0, help="sample index within the file")
    p.add_argument("--top", type=int, default=5)

    p = add("detect", cmd_detect, "write detections for untrimmed sequences")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="JSONL dataset path")
    p.add_argument("--out", required=True, help="output JSONL path")

    p = add("ablate", cmd_ablate, "train the variant x fusion grid and tabulate accuracy")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)

    p = add("synth", cmd_synth, "generate a synthetic dataset as JSONL")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--joints", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--samples-per-class", type=int, default=50)
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--persons", type=int, default=1)
    p.add_argument("--detection", action="store_true", help="untrimmed sequences with segments")
    p.add_argument("--sequences", type=int, default=5, help="sequence count (detection mode)")
    p.add_argument("--length", type=int, default=360, help="sequence length (detection mode)")
    return parser


# ---------------------------------------------------------------------------
# data / model plumbing
# ---------------------------------------------------------------------------

def _load_recognition_data(cfg: RunConfig):
    if cfg.data.path is not None:
        dataset = data_mod.load_jsonl(cfg.data.path)
        if any(s.label is None for s in dataset):
            raise DataError("recognition data must carry integer labels")
    else:
        dataset = data_mod.synth_generate(**cfg.data.synth)
    return data_mod.split_dataset(dataset, cfg.data.val_fraction, cfg.data.split_seed)


def _load_detection_data(cfg: RunConfig):
    if cfg.data.path is not None:
        dataset = data_mod.load_jsonl(cfg.data.path)
    else:
        dataset = data_mod.synth_generate_detection(**cfg.data.synth_detection)
    bad = [s.sample_id for s in dataset if not s.segments]
    if bad:
        raise DataError(f"sequences without groundtruth segments: {bad[:5]}")
    return dataset


def _write_checkpoint(path, cfg: RunConfig, params: dict, state: TrainState, best: dict):
    tensors = dict(params)
    tensors.update(moment_tensors(state))
    save_checkpoint(
        path,
        Checkpoint(
            config=cfg.to_dict(),
            train_state=train_state_to_dict(state),
            best=best,
            tensors=tensors,
        ),
    )


def _restore(checkpoint_path):
    ck = load_checkpoint(checkpoint_path)
    cfg = RunConfig.from_dict(ck.config)
    params, moments = split_moments(ck.tensors)
    state = train_state_from_dict(ck.train_state, moments)
    model = HcnModel(cfg.model, np.random.default_rng(0))
    if cfg.task == "detect":
        det_params = {k[len("det."):]: v for k, v in params.items() if k.startswith("det.")}
        model_params = {k: v for k, v in params.items() if not k.startswith("det.")}
        model.params.load_arrays(model_params)
        num_classes = det_params["roi.cls.bias"].shape[0] - 1
        head = det_mod.DetectionHead(
            cfg.model, cfg.detection, num_classes, np.random.default_rng(0)
        )
        head.params.load_arrays(det_params)
        return ck, cfg, model, head, state
    model.params.load_arrays(params)
    return ck, cfg, model, None, state


def _new_train_state(cfg: RunConfig, decay_fc7: bool) -> TrainState:
    tr = cfg.training
    return TrainState(
        base_lr=tr.lr,
        decay_rate=tr.lr_decay,
        decay_every=tr.lr_decay_every,
        seed=tr.seed,
        weight_decay={"fc7.weight": tr.weight_decay} if decay_fc7 and tr.weight_decay else {},
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.training.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    os.makedirs(cfg.output_dir, exist_ok=True)
    started = time.time()

    if cfg.task == "recognize":
        train_set, val_set = _load_recognition_data(cfg)
        model = HcnModel(cfg.model, np.random.default_rng(cfg.training.seed))
        state = _new_train_state(cfg, decay_fc7=True)
        schedule = TrainSchedule(
            batch_size=cfg.training.batch_size,
            total_steps=cfg.training.total_steps,
            eval_every=cfg.training.eval_every,
        )
        try:
            result = train_loop(model, train_set, val_set, state, schedule)
        except TrainingDiverged as exc:
            partial = getattr(exc, "result", None)
            if partial is not None and partial.best_params:
                _write_checkpoint(
                    os.path.join(cfg.output_dir, "best.ckpt"), cfg, partial.best_params,
                    state, {"metric": "accuracy", "value": partial.best_metric,
                            "step": partial.best_step},
                )
                metrics_to_csv(partial.history, os.path.join(cfg.output_dir, "metrics.csv"))
            raise
        best = {"metric": "accuracy", "value": result.best_metric, "step": result.best_step}
        _write_checkpoint(os.path.join(cfg.output_dir, "best.ckpt"), cfg, result.best_params, state, best)
        _write_checkpoint(os.path.join(cfg.output_dir, "final.ckpt"), cfg, result.final_params, state, best)
        metrics_to_csv(result.history, os.path.join(cfg.output_dir, "metrics.csv"))
        summary = {
            "task": cfg.task,
            "best_acc": result.best_metric,
            "best_step": result.best_step,
            "steps": cfg.training.total_steps,
            "train_size": len(train_set),
            "val_size": len(val_set),
            "wall_time_sec": time.time() - started,
        }
    else:
        sequences = _load_detection_data(cfg)
        seeds = np.random.SeedSequence(cfg.training.seed).spawn(2)
        model = HcnModel(cfg.model, np.random.default_rng(seeds[0]))
        head = det_mod.DetectionHead(
            cfg.model,
            cfg.detection,
            _detection_class_count(sequences),
            np.random.default_rng(seeds[1]),
        )
        state = _new_train_state(cfg, decay_fc7=False)
        result = det_mod.train_detector(
            model, head, sequences, state,
            total_steps=cfg.training.total_steps, eval_every=cfg.training.eval_every,
        )
        best = {"metric": "map", "value": result.best_map, "step": result.best_step}
        _write_checkpoint(os.path.join(cfg.output_dir, "best.ckpt"), cfg, result.best_params, state, best)
        _write_checkpoint(os.path.join(cfg.output_dir, "final.ckpt"), cfg, result.final_params, state, best)
        metrics_to_csv(result.history, os.path.join(cfg.output_dir, "metrics.csv"))
        summary = {
            "task": cfg.task,
            "best_map": result.best_map,
            "best_step": result.best_step,
            "steps": cfg.training.total_steps,
            "sequences": len(sequences),
            "wall_time_sec": time.time() - started,
        }

    with open(os.path.join(cfg.output_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    log.info("training complete: %s", summary)
    print(json.dumps({k: v for k, v in summary.items() if k != "wall_time_sec"}))
    return 0


def _detection_class_count(sequences) -> int:
    return max(c for s in sequences for _, _, c in s.segments) + 1


def cmd_eval(args) -> int:
    ck, cfg, model, head, _ = _restore(args.checkpoint)
    if cfg.task == "recognize":
        if args.data is not None:
            dataset = data_mod.load_jsonl(args.data)
            train_set, val_set = data_mod.split_dataset(
                dataset, cfg.data.val_fraction, cfg.data.split_seed
            )
        else:
            train_set, val_set = _load_recognition_data(cfg)
        chosen = val_set if (args.split == "val" and val_set) else train_set
        split = "val" if (args.split == "val" and val_set) else "train"
        loss, acc = evaluate(model, chosen, cfg.training.batch_size)
        report = {"split": split, "samples": len(chosen), "loss": loss, "accuracy": acc}
    else:
        sequences = (
            data_mod.load_jsonl(args.data) if args.data is not None else _load_detection_data(cfg)
        )
        detections = {s.sample_id: det_mod.detect(model, head, s) for s in sequences}
        truth = {s.sample_id: s.segments or [] for s in sequences}
        per_class, mean_ap = det_mod.evaluate_map(detections, truth)
        report = {
            "split": "all",
            "sequences": len(sequences),
            "map": mean_ap,
            "per_class_ap": {str(k): v for k, v in per_class.items()},
        }
    print(json.dumps(report))
    return 0


def cmd_predict(args) -> int:
    _, cfg, model, head, _ = _restore(args.checkpoint)
    if cfg.task != "recognize":
        raise ConfigError("predict applies to recognition checkpoints; use 'detect'")
    dataset = data_mod.load_jsonl(args.data)
    if not 0 <= args.index < len(dataset):
        raise ConfigError(f"--index {args.index} out of range for {len(dataset)} samples")
    probs = predict_sequence(model, dataset[args.index])
    top = np.argsort(-probs)[: max(1, args.top)]
    report = {
        "id": dataset[args.index].sample_id,
        "top": [{"class": int(c), "probability": float(probs[c])} for c in top],
    }
    print(json.dumps(report))
    return 0


def cmd_detect(args) -> int:
    _, cfg, model, head, _ = _restore(args.checkpoint)
    if cfg.task != "detect":
        raise ConfigError("checkpoint was not trained for detection")
    sequences = data_mod.load_jsonl(args.data)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        for seq in sequences:
            for w in det_mod.detect(model, head, seq):
                fh.write(
                    json.dumps(
                        {
                            "sequence_id": seq.sample_id,
                            "start": w.start,
                            "end": w.end,
                            "class": int(w.class_id),
                            "score": float(w.score),
                        }
                    )
                    + "\n"
                )
    return 0


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    if args.out is not None:
        cfg.output_dir = args.out
    if cfg.task != "recognize":
        raise ConfigError("ablate runs on recognition configs")
    os.makedirs(cfg.output_dir, exist_ok=True)
    train_set, val_set = _load_recognition_data(cfg)
    if not val_set:
        raise ConfigError("ablate needs a validation split (set data.val_fraction > 0)")

    grid = cfg.ablate
    cells = {}
    for variant in grid.variants:
        for fusion in grid.fusion_modes:
            accs = []
            for seed in grid.seeds:
                model_cfg = replace(cfg.model, variant=variant, fusion_mode=fusion)
                model_cfg.validate()
                model = HcnModel(model_cfg, np.random.default_rng(seed))
                state = TrainState(
                    base_lr=cfg.training.lr,
                    decay_rate=cfg.training.lr_decay,
                    decay_every=cfg.training.lr_decay_every,
                    seed=seed,
                    weight_decay={"fc7.weight": cfg.training.weight_decay}
                    if cfg.training.weight_decay
                    else {},
                )
                schedule = TrainSchedule(
                    batch_size=cfg.training.batch_size,
                    total_steps=cfg.training.total_steps,
                    eval_every=0,
                )
                result = train_loop(model, train_set, val_set, state, schedule)
                accs.append(result.best_metric)
                log.info("ablate %s/%s seed=%d acc=%.4f", variant, fusion, seed, accs[-1])
            cells[(variant, fusion)] = accs

    table_path = os.path.join(cfg.output_dir, "ablation.csv")
    with open(table_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("variant,fusion_mode,n_seeds,mean_val_accuracy,std_val_accuracy\n")
        for (variant, fusion), accs in cells.items():
            fh.write(
                f"{variant},{fusion},{len(accs)},{repr(float(np.mean(accs)))},{repr(float(np.std(accs)))}\n"
            )
    delta_path = os.path.join(cfg.output_dir, "ablation_delta.csv")
    with open(delta_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("fusion_mode,global_minus_local_accuracy\n")
        for fusion in grid.fusion_modes:
            if ("global", fusion) in cells and ("local", fusion) in cells:
                delta = float(
                    np.mean(cells[("global", fusion)]) - np.mean(cells[("local", fusion)])
                )
                fh.write(f"{fusion},{repr(delta)}\n")
    print(json.dumps({"cells": len(cells), "table": table_path, "delta": delta_path}))
    return 0


def cmd_synth(args) -> int:
    if args.detection:
        dataset = data_mod.synth_generate_detection(
            classes=args.classes,
            num_sequences=args.sequences,
            length=args.length,
            joints=args.joints,
            seed=args.seed,
            noise_sigma=args.noise_sigma,
        )
    else:
        dataset = data_mod.synth_generate(
            classes=args.classes,
            samples_per_class=args.samples_per_class,
            frames=args.frames,
            joints=args.joints,
            persons=args.persons,
            noise_sigma=args.noise_sigma,
            seed=args.seed,
        )
    data_mod.save_jsonl(dataset, args.out)
    print(json.dumps({"samples": len(dataset), "path": args.out}))
    return 0


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("HCN_LOG", "WARNING").upper(), logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, DataError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    except HcnError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

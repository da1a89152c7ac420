"""Operator surface: one subcommand per pipeline stage, a strict
key=value config file, file artifacts between stages.

Stages: gen-synthetic -> train-skeleton -> build-stroi -> extract-weights
-> train-rgb [--mode fixed|soft|none] -> evaluate / ensemble, plus
grad-check for the differentiation suite.  Exit codes: 0 success,
1 usage error, 2 data error, 3 numeric error.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    SyntheticSpec,
    generate_synthetic_dataset,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
)
from .errors import (
    DataError,
    FileError,
    NumericError,
    SkelfuseError,
    UsageError,
)
from .gradcheck import report as gradcheck_report
from .graph import SkeletonTemplate, default_template
from .rgbnet import RgbNet, RgbNetConfig
from .rng import Rng
from .stgcn import StGcnConfig, StGcnNet
from .training import (
    MetricsLog,
    TrainConfig,
    ablation_rows,
    accuracy,
    build_stroi_grids,
    compute_joint_weights,
    dataset_channel_stats,
    ensemble_predict,
    format_ablation_report,
    part_weight_matrix,
    predict_rgb,
    predict_skeleton,
    prepare_skeleton_arrays,
    train_rgb_stage,
    train_skeleton_stage,
    train_soft_stage,
    weighted_inputs,
)

VERSION_STRING = f"skelfuse {__version__}"


@dataclass
class Config:
    """Every tunable of the pipeline; paper values are the defaults where
    the paper states them, desk values fill the rest."""

    template: str = ""                 # empty -> built-in 15-joint figure
    data_dir: str = "out/dataset"
    out_dir: str = "out"
    num_classes: int = 4
    samples_per_class: int = 100
    seq_len: int = 24
    frame_size: int = 96
    noise: float = 1.0
    two_subject: bool = False
    seed: int = 42
    K_roi: int = 5
    L: int = 5
    P: int = 96
    S: int = 225
    gamma: int = 9
    alpha: float = 0.001
    gcn_channels: tuple = (16, 16, 32, 32)
    gcn_strides: tuple = (1, 1, 2, 1)
    rgb_stem: int = 16
    rgb_stages: tuple = ((16, 2), (32, 2), (64, 2))
    rgb_stage_strides: tuple = (2, 2, 2)
    epochs: int = 65
    batch: int = 64
    lr0: float = 0.1
    decay_epochs: tuple = (45, 55)
    momentum: float = 0.9
    attention_mode: str = "fixed"
    loss: str = "squared"
    center_joints: bool = True
    flip_augment: bool = False
    frame_jitter: bool = False


DESK_OVERRIDES = {
    "P": 24, "S": 64, "epochs": 20, "batch": 16, "decay_epochs": (12, 16),
    "alpha": 1.0, "samples_per_class": 100,
}


def desk_cli_config(**extra) -> Config:
    cfg = Config(**DESK_OVERRIDES)
    for key, value in extra.items():
        setattr(cfg, key, value)
    return cfg


def _parse_bool(raw: str):
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_tuple(raw: str):
    raw = raw.strip()
    return tuple(int(v) for v in raw.split(",")) if raw else ()


def _parse_stages(raw: str):
    out = []
    for item in raw.strip().split(","):
        channels, blocks = item.split(":")
        out.append((int(channels), int(blocks)))
    return tuple(out)


_PARSERS = {
    str: lambda raw: raw.strip(),
    int: lambda raw: int(raw.strip()),
    float: lambda raw: float(raw.strip()),
    bool: _parse_bool,
}


def _parse_value(key: str, raw: str, default):
    if key == "rgb_stages":
        return _parse_stages(raw)
    if isinstance(default, tuple):
        return _parse_int_tuple(raw)
    return _PARSERS[type(default)](raw)


def load_config(path) -> Config:
    """Strict key=value parsing; unknown keys are rejected with their line."""
    path = Path(path)
    if not path.is_file():
        raise FileError(f"config file not found: {path}")
    defaults = Config()
    known = {f.name: getattr(defaults, f.name) for f in fields(Config)}
    values = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(),
                                 start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"expected key=value (line {lineno})")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in known:
            raise UsageError(f"unknown key '{key}' (line {lineno})")
        try:
            values[key] = _parse_value(key, value, known[key])
        except (ValueError, TypeError):
            raise UsageError(
                f"bad value for '{key}' (line {lineno}): {value.strip()!r}") from None
    return Config(**values)


def format_config(cfg: Config) -> str:
    lines = []
    for f in fields(Config):
        value = getattr(cfg, f.name)
        if f.name == "rgb_stages":
            text = ",".join(f"{c}:{b}" for c, b in value)
        elif isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = str(value)
        lines.append(f"{f.name}={text}")
    return "\n".join(lines)


def echo_config(cfg: Config, command: str) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    body = (f"# {VERSION_STRING}\n# command={command}\n# seed={cfg.seed}\n"
            + format_config(cfg) + "\n")
    (out / f"resolved-{command}.cfg").write_text(body, encoding="utf-8")


def _apply_overrides(cfg: Config, args) -> Config:
    env_seed = os.environ.get("SKELFUSE_SEED")
    if env_seed is not None:
        cfg.seed = int(env_seed)
    env_out = os.environ.get("SKELFUSE_OUT")
    if env_out is not None:
        cfg.out_dir = env_out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "mode", None):
        cfg.attention_mode = args.mode
    return cfg


def _load_template(cfg: Config) -> SkeletonTemplate:
    if cfg.template:
        return SkeletonTemplate.load(cfg.template)
    return default_template()


def _train_config(cfg: Config) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs, batch=cfg.batch, lr0=cfg.lr0,
                       decay_epochs=cfg.decay_epochs, momentum=cfg.momentum,
                       attention_mode=cfg.attention_mode, seed=cfg.seed,
                       loss=cfg.loss, center_joints=cfg.center_joints,
                       flip_augment=cfg.flip_augment,
                       frame_jitter=cfg.frame_jitter)


def _gcn_config(cfg: Config, vertices: int) -> StGcnConfig:
    return StGcnConfig(vertices=vertices, num_classes=cfg.num_classes,
                       channels=cfg.gcn_channels, strides=cfg.gcn_strides,
                       temporal_kernel=cfg.gamma, alpha=cfg.alpha)


def _rgb_config(cfg: Config) -> RgbNetConfig:
    return RgbNetConfig(input_side=cfg.S, num_classes=cfg.num_classes,
                        stem_channels=cfg.rgb_stem, stages=cfg.rgb_stages,
                        stage_strides=cfg.rgb_stage_strides)


def _paths(cfg: Config) -> dict:
    out = Path(cfg.out_dir)
    return {
        "skeleton": out / "skeleton.ckpt",
        "skeleton_soft": out / "skeleton_soft.ckpt",
        "stroi": out / "stroi.ckpt",
        "weights": out / "weights.ckpt",
        "rgb_fixed": out / "rgb_fixed.ckpt",
        "rgb_soft": out / "rgb_soft.ckpt",
        "rgb_none": out / "rgb_none.ckpt",
        "metrics": out / "metrics.txt",
        "report": out / "report.txt",
        "ensemble": out / "ensemble.ckpt",
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synthetic(cfg: Config, args) -> int:
    spec = SyntheticSpec(num_classes=cfg.num_classes,
                         samples_per_class=cfg.samples_per_class,
                         seq_len=cfg.seq_len, frame_size=cfg.frame_size,
                         noise=cfg.noise, seed=cfg.seed,
                         two_subject=cfg.two_subject)
    dataset = generate_synthetic_dataset(spec, _load_template(cfg))
    save_dataset(dataset, cfg.data_dir)
    echo_config(cfg, "gen-synthetic")
    print(f"wrote {len(dataset.samples)} samples to {cfg.data_dir}")
    return 0


def cmd_train_skeleton(cfg: Config, args) -> int:
    dataset = load_dataset(cfg.data_dir, with_frames=False)
    train_cfg = _train_config(cfg)
    arrays = prepare_skeleton_arrays(dataset, dataset.template, train_cfg,
                                     alpha=cfg.alpha)
    net = StGcnNet(_gcn_config(cfg, dataset.template.joint_count), Rng(cfg.seed))
    paths = _paths(cfg)
    paths["skeleton"].parent.mkdir(parents=True, exist_ok=True)
    metrics = MetricsLog(paths["metrics"])
    train_skeleton_stage(net, arrays, dataset.indices("train"),
                         dataset.indices("test"), train_cfg, metrics,
                         Rng(cfg.seed + 1))
    save_checkpoint(net.state_tensors(), paths["skeleton"])
    echo_config(cfg, "train-skeleton")
    print(f"skeleton checkpoint: {paths['skeleton']}")
    print(metrics.lines[-1])
    return 0


def cmd_build_stroi(cfg: Config, args) -> int:
    dataset = load_dataset(cfg.data_dir)
    grids = build_stroi_grids(dataset, cfg.K_roi, cfg.L, cfg.P,
                              frame_jitter=cfg.frame_jitter,
                              rng=Rng(cfg.seed + 2))
    paths = _paths(cfg)
    paths["stroi"].parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint({"grids": grids}, paths["stroi"])
    echo_config(cfg, "build-stroi")
    print(f"ST-ROI grids: {paths['stroi']} shape {grids.shape}")
    return 0


def cmd_extract_weights(cfg: Config, args) -> int:
    dataset = load_dataset(cfg.data_dir, with_frames=False)
    paths = _paths(cfg)
    net = StGcnNet(_gcn_config(cfg, dataset.template.joint_count), Rng(cfg.seed))
    net.load_state(load_checkpoint(paths["skeleton"]))
    arrays = prepare_skeleton_arrays(dataset, dataset.template,
                                     _train_config(cfg), alpha=cfg.alpha)
    weights = compute_joint_weights(net, arrays)
    save_checkpoint({"joint_weights": weights}, paths["weights"])
    echo_config(cfg, "extract-weights")
    print(f"joint weights: {paths['weights']} shape {weights.shape}")
    return 0


def _single_subject_guard(dataset) -> None:
    if any(len(s.sequences) != 1 for s in dataset.samples):
        raise DataError("this stage expects single-subject samples")


def cmd_train_rgb(cfg: Config, args) -> int:
    mode = cfg.attention_mode
    dataset = load_dataset(cfg.data_dir, with_frames=False)
    _single_subject_guard(dataset)
    paths = _paths(cfg)
    grids = load_checkpoint(paths["stroi"])["grids"]
    train_cfg = _train_config(cfg)
    train_ids = dataset.indices("train")
    test_ids = dataset.indices("test")
    labels = dataset.labels()
    stats = dataset_channel_stats(grids, train_ids, cfg.S)
    rgb = RgbNet(_rgb_config(cfg), Rng(cfg.seed + 3))
    metrics = MetricsLog(paths["metrics"])

    if mode == "soft":
        gcn = StGcnNet(_gcn_config(cfg, dataset.template.joint_count), Rng(cfg.seed))
        gcn.load_state(load_checkpoint(paths["skeleton"]))
        arrays = prepare_skeleton_arrays(dataset, dataset.template, train_cfg,
                                         alpha=cfg.alpha)
        train_soft_stage(gcn, rgb, arrays, grids, labels, train_ids, test_ids,
                         train_cfg, cfg.P, cfg.S, stats, metrics,
                         Rng(cfg.seed + 4), dataset.template)
        save_checkpoint(gcn.state_tensors(), paths["skeleton_soft"])
        save_checkpoint(rgb.state_tensors(), paths["rgb_soft"])
        print(f"rgb checkpoint: {paths['rgb_soft']} "
              f"(+ updated skeleton: {paths['skeleton_soft']})")
    else:
        if mode == "fixed":
            weights = load_checkpoint(paths["weights"])["joint_weights"]
            pw = part_weight_matrix(weights, dataset.template)
        else:
            pw = None
        inputs = weighted_inputs(grids, pw, cfg.P, cfg.S, stats)
        train_rgb_stage(rgb, inputs, labels, train_ids, test_ids, train_cfg,
                        metrics, Rng(cfg.seed + 4), stage=f"rgb_{mode}")
        save_checkpoint(rgb.state_tensors(), paths[f"rgb_{mode}"])
        print(f"rgb checkpoint: {paths[f'rgb_{mode}']}")
    echo_config(cfg, f"train-rgb-{mode}")
    print(metrics.lines[-1])
    return 0


def _gather_test_probabilities(cfg: Config):
    """Skeleton probs plus every available rgb variant on the test split."""
    dataset = load_dataset(cfg.data_dir, with_frames=False)
    _single_subject_guard(dataset)
    paths = _paths(cfg)
    if not paths["skeleton"].is_file():
        raise FileError(f"missing checkpoint: {paths['skeleton']}")
    train_cfg = _train_config(cfg)
    arrays = prepare_skeleton_arrays(dataset, dataset.template, train_cfg,
                                     alpha=cfg.alpha)
    train_ids = dataset.indices("train")
    test_ids = dataset.indices("test")
    labels = dataset.labels()

    gcn = StGcnNet(_gcn_config(cfg, dataset.template.joint_count), Rng(cfg.seed))
    gcn.load_state(load_checkpoint(paths["skeleton"]))
    skeleton_probs = predict_skeleton(gcn, arrays, test_ids)

    rgb_probs = {}
    if any(paths[f"rgb_{m}"].is_file() for m in ("none", "fixed", "soft")):
        grids = load_checkpoint(paths["stroi"])["grids"]
        stats = dataset_channel_stats(grids, train_ids, cfg.S)
        for mode in ("none", "fixed", "soft"):
            ckpt = paths[f"rgb_{mode}"]
            if not ckpt.is_file():
                continue
            rgb = RgbNet(_rgb_config(cfg), Rng(cfg.seed + 3))
            rgb.load_state(load_checkpoint(ckpt))
            if mode == "none":
                pw = None
            elif mode == "fixed":
                weights = load_checkpoint(paths["weights"])["joint_weights"]
                pw = part_weight_matrix(weights, dataset.template)
            else:
                soft_gcn = StGcnNet(_gcn_config(cfg, dataset.template.joint_count),
                                    Rng(cfg.seed))
                soft_gcn.load_state(load_checkpoint(paths["skeleton_soft"]))
                pw = part_weight_matrix(compute_joint_weights(soft_gcn, arrays),
                                        dataset.template)
            inputs = weighted_inputs(grids, pw, cfg.P, cfg.S, stats)
            rgb_probs[mode] = predict_rgb(rgb, inputs, test_ids)
    return skeleton_probs, rgb_probs, labels[test_ids]


def cmd_evaluate(cfg: Config, args) -> int:
    skeleton_probs, rgb_probs, labels = _gather_test_probabilities(cfg)
    rows = ablation_rows(skeleton_probs, rgb_probs, labels)
    text = format_ablation_report(rows)
    paths = _paths(cfg)
    paths["report"].write_text(text + "\n", encoding="utf-8")
    echo_config(cfg, "evaluate")
    print(text)
    return 0


def cmd_ensemble(cfg: Config, args) -> int:
    skeleton_probs, rgb_probs, labels = _gather_test_probabilities(cfg)
    rows = ablation_rows(skeleton_probs, rgb_probs, labels)
    text = format_ablation_report(rows)
    paths = _paths(cfg)
    paths["report"].write_text(text + "\n", encoding="utf-8")
    bundle = {"skeleton_scores": skeleton_probs,
              "labels": labels.astype(np.float32)}
    for mode, probs in rgb_probs.items():
        result = ensemble_predict(skeleton_probs, probs)
        bundle[f"scores_{mode}"] = result.scores
        bundle[f"predicted_{mode}"] = result.predicted.astype(np.float32)
    save_checkpoint(bundle, paths["ensemble"])
    echo_config(cfg, "ensemble")
    print(text)
    print(f"ensemble scores: {paths['ensemble']}")
    return 0


def cmd_grad_check(cfg: Config, args) -> int:
    ok = gradcheck_report(sys.stdout)
    return 0 if ok else 3


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train-skeleton": cmd_train_skeleton,
    "build-stroi": cmd_build_stroi,
    "extract-weights": cmd_extract_weights,
    "train-rgb": cmd_train_rgb,
    "evaluate": cmd_evaluate,
    "ensemble": cmd_ensemble,
    "grad-check": cmd_grad_check,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="skelfuse", description=__doc__, add_help=True)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="key=value config file")
    parser.add_argument("--mode", choices=("fixed", "soft", "none"), default=None,
                        help="attention mode for train-rgb")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory")
    return parser


def dispatch(argv) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config) if args.config else Config()
        cfg = _apply_overrides(cfg, args)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except SkelfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()

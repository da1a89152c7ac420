"""Joint objective, learning-rate schedule, the staged training pipeline
(fixed and soft attention), ensembling and the ablation report.

Stages mirror the training recipe: the skeleton branch trains alone
first; joint weights extracted from it reweight the ST-ROI grids; the
image branch trains on the weighted grids either with the skeleton
branch frozen in evaluation mode (fixed) or trainable with gradients
flowing through the weighting (soft); predictions ensemble by averaging
the two softmax vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tn
from .data import SyntheticDataset
from .errors import DataError, ShapeError, UsageError
from .graph import SkeletonTemplate, build_adjacency
from .rgbnet import RgbNet
from .rng import Rng
from .stgcn import StGcnNet, batch_joint_weights, sequence_input
from .stroi import (
    assemble_stroi,
    compute_channel_stats,
    jittered_sample_indices,
    map_vertex_weights_to_parts,
    preprocess_for_net,
    weight_grid_batch,
)
from .tensor import Tape, Tensor, backward, sgd_step

Float = np.float32

ATTENTION_MODES = ("fixed", "soft", "none")


@dataclass
class TrainConfig:
    epochs: int = 65
    batch: int = 64
    lr0: float = 0.1
    decay_epochs: tuple = (45, 55)
    momentum: float = 0.9
    attention_mode: str = "fixed"
    seed: int = 42
    loss: str = "squared"          # squared | cross_entropy
    center_joints: bool = True
    flip_augment: bool = False
    frame_jitter: bool = False

    def __post_init__(self):
        decays = tuple(self.decay_epochs)
        if any(a >= b for a, b in zip(decays, decays[1:])) \
                or any(d >= self.epochs or d < 1 for d in decays):
            raise UsageError(f"decay epochs {decays} must be strictly increasing "
                             f"and below epochs={self.epochs}")
        if self.attention_mode not in ATTENTION_MODES:
            raise UsageError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.loss not in ("squared", "cross_entropy"):
            raise UsageError(f"unknown loss '{self.loss}'")


def desk_config(**overrides) -> TrainConfig:
    """Reduced schedule with the same three-plateau shape as full scale."""
    base = TrainConfig(epochs=20, batch=16, decay_epochs=(12, 16))
    return replace(base, **overrides) if overrides else base


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Piecewise-constant rate, divided by 10 at each decay boundary.

    Decay epochs are 1-indexed ("the 45th epoch"); with 0-indexed epochs
    the first reduced-rate epoch is decay-1.
    """
    if not 0 <= epoch < cfg.epochs:
        raise UsageError(f"epoch {epoch} outside [0, {cfg.epochs})")
    divisions = sum(1 for d in cfg.decay_epochs if epoch >= d - 1)
    return cfg.lr0 / (10 ** divisions)


# ---------------------------------------------------------------------------
# losses


def one_hot(labels, num_classes: int) -> np.ndarray:
    return np.eye(num_classes, dtype=Float)[np.asarray(labels, dtype=np.int64)]


def _require_one_hot(y: np.ndarray) -> None:
    ok = np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)
    if not ok:
        raise UsageError("targets must be one-hot rows")


def _as_2d(t) -> Tensor:
    t = t if isinstance(t, Tensor) else Tensor(t)
    if t.data.ndim == 1:
        return tn.reshape(t, (1, t.data.shape[0]))
    return t


def squared_error_loss(probs: Tensor, y: np.ndarray) -> Tensor:
    """Batch mean of the squared distance between prediction and target."""
    probs = _as_2d(probs)
    y = np.atleast_2d(np.asarray(y, dtype=Float))
    _require_one_hot(y)
    if probs.shape != y.shape:
        raise ShapeError("squared_error_loss", probs.shape, y.shape)
    diff = tn.sub(probs, Tensor(y))
    return tn.reduce_mean(tn.reduce_sum(tn.square(diff), axes=(1,)), axes=(0,))


def cross_entropy_loss(probs: Tensor, y: np.ndarray) -> Tensor:
    probs = _as_2d(probs)
    y = np.atleast_2d(np.asarray(y, dtype=Float))
    _require_one_hot(y)
    picked = tn.reduce_sum(tn.mul(probs, Tensor(y)), axes=(1,))
    return tn.scale(tn.reduce_mean(tn.log(picked), axes=(0,)), -1.0)


def branch_loss(probs: Tensor, y: np.ndarray, kind: str = "squared") -> Tensor:
    if kind == "cross_entropy":
        return cross_entropy_loss(probs, y)
    return squared_error_loss(probs, y)


def multimodal_loss(y_hat_skeleton, y_hat_rgb, y, kind: str = "squared") -> Tensor:
    """Sum of both branches' per-batch losses against the same one-hot target."""
    return tn.add(branch_loss(y_hat_skeleton, y, kind), branch_loss(y_hat_rgb, y, kind))


# ---------------------------------------------------------------------------
# ensembling and evaluation


@dataclass
class EnsembleResult:
    scores: np.ndarray        # [N, C] combined probabilities
    predicted: np.ndarray     # [N] argmax class, ties to the lower index
    accuracy: float | None = None


def ensemble_predict(y_hat_skeleton, y_hat_rgb) -> EnsembleResult:
    """Mean of the two probability vectors; argmax; first index wins ties."""
    a = np.atleast_2d(np.asarray(y_hat_skeleton, dtype=Float))
    b = np.atleast_2d(np.asarray(y_hat_rgb, dtype=Float))
    if a.shape != b.shape:
        raise ShapeError("ensemble_predict", a.shape, b.shape)
    scores = (a + b) / Float(2)
    return EnsembleResult(scores=scores, predicted=np.argmax(scores, axis=1))


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


# ---------------------------------------------------------------------------
# metrics log


class MetricsLog:
    """Line-delimited per-epoch records, deterministic formatting."""

    def __init__(self, path=None):
        self.path = path
        self.lines: list[str] = []

    def log(self, epoch: int, stage: str, lr: float, loss: float,
            train_acc: float, val_acc: float) -> None:
        line = (f"epoch={epoch} stage={stage} lr={lr:.9g} loss={loss:.9g} "
                f"train_acc={train_acc:.9g} val_acc={val_acc:.9g}")
        self.lines.append(line)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")


# ---------------------------------------------------------------------------
# skeleton-branch arrays and training


@dataclass
class SkeletonArrays:
    """Dataset flattened to subject-level arrays for batched forwards."""

    inputs: np.ndarray         # [rows, C, T, V] one row per subject
    adjacency: np.ndarray      # [rows, K, V, V]
    subject_rows: list         # per sample, the row indices of its subjects
    labels: np.ndarray         # [samples]


def prepare_skeleton_arrays(dataset: SyntheticDataset, template: SkeletonTemplate,
                            cfg: TrainConfig, alpha: float = 0.001) -> SkeletonArrays:
    xs, adjs, slices = [], [], []
    row = 0
    for sample in dataset.samples:
        ids = []
        for seq in sample.sequences:
            xs.append(sequence_input(seq, cfg.center_joints))
            adjs.append(build_adjacency(template, seq, alpha).normalized)
            ids.append(row)
            row += 1
        slices.append(ids)
    return SkeletonArrays(inputs=np.stack(xs), adjacency=np.stack(adjs),
                          subject_rows=slices, labels=dataset.labels())


def _merge_subject_features(feats: Tensor, sample_ids, arrays: SkeletonArrays,
                            rows) -> Tensor:
    if all(len(arrays.subject_rows[i]) == 1 for i in sample_ids):
        return feats
    merge = np.zeros((len(sample_ids), len(rows)), dtype=Float)
    pos = 0
    for bi, i in enumerate(sample_ids):
        n = len(arrays.subject_rows[i])
        merge[bi, pos:pos + n] = Float(1.0 / n)
        pos += n
    n_rows, c, t, v = feats.shape
    flat = tn.reshape(feats, (n_rows, c * t * v))
    return tn.reshape(tn.matmul(Tensor(merge), flat), (len(sample_ids), c, t, v))


def gcn_forward_samples(net: StGcnNet, arrays: SkeletonArrays, sample_ids,
                        training: bool):
    """(logits, probs, per-subject feats, merged feats) for a sample batch."""
    rows = [r for i in sample_ids for r in arrays.subject_rows[i]]
    feats = net.backbone(Tensor(arrays.inputs[rows]),
                         Tensor(arrays.adjacency[rows]), training)
    merged = _merge_subject_features(feats, sample_ids, arrays, rows)
    logits, probs = net.head(merged)
    return logits, probs, feats, merged


def _epoch_batches(indices, batch: int, rng: Rng) -> list[list[int]]:
    order = [indices[int(p)] for p in rng.permutation(len(indices))]
    return [order[i:i + batch] for i in range(0, len(order), batch)]


def predict_skeleton(net: StGcnNet, arrays: SkeletonArrays, sample_ids,
                     batch: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(sample_ids), batch):
        chunk = sample_ids[i:i + batch]
        _, probs, _, _ = gcn_forward_samples(net, arrays, chunk, training=False)
        out.append(probs.data)
    return np.concatenate(out, axis=0)


def train_skeleton_stage(net: StGcnNet, arrays: SkeletonArrays, train_ids,
                         test_ids, cfg: TrainConfig, metrics: MetricsLog,
                         rng: Rng) -> None:
    """Stage 1: the skeleton branch alone against its half of the objective."""
    if not train_ids:
        raise DataError("empty training split")
    params = net.parameters()
    num_classes = net.config.num_classes
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        losses, hits, seen = [], 0, 0
        for batch_ids in _epoch_batches(train_ids, cfg.batch, rng):
            y = one_hot(arrays.labels[batch_ids], num_classes)
            with Tape() as tape:
                _, probs, _, _ = gcn_forward_samples(net, arrays, batch_ids,
                                                     training=True)
                loss = branch_loss(probs, y, cfg.loss)
                backward(loss, tape)
            sgd_step(params, lr, cfg.momentum)
            losses.append(float(loss.data))
            hits += int(np.sum(np.argmax(probs.data, 1) == arrays.labels[batch_ids]))
            seen += len(batch_ids)
        val_acc = accuracy(predict_skeleton(net, arrays, test_ids), arrays.labels[test_ids]) \
            if test_ids else 0.0
        metrics.log(epoch, "skeleton", lr, float(np.mean(losses)), hits / seen, val_acc)


def compute_joint_weights(net: StGcnNet, arrays: SkeletonArrays,
                          batch: int = 64) -> np.ndarray:
    """Eval-mode per-vertex importance for every subject row -> [rows, V]."""
    out = []
    n = arrays.inputs.shape[0]
    for i in range(0, n, batch):
        feats = net.backbone(Tensor(arrays.inputs[i:i + batch]),
                             Tensor(arrays.adjacency[i:i + batch]), training=False)
        out.append(batch_joint_weights(feats).data)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# ST-ROI pipeline arrays


def build_stroi_grids(dataset: SyntheticDataset, k_roi: int, l_samples: int,
                      patch: int, frame_jitter: bool = False,
                      rng: Rng | None = None) -> np.ndarray:
    """Unweighted [N, 3, K*P, L*P] grids for every sample.

    frame_jitter picks a random frame inside each time bin instead of its
    center (applied once, at assembly)."""
    grids = []
    for sample in dataset.samples:
        indices = None
        if frame_jitter:
            indices = jittered_sample_indices(sample.frames.shape[0], l_samples,
                                              rng or Rng(0))
        grid = assemble_stroi(sample.frames, sample.tracks, dataset.template,
                              k_roi=k_roi, l_samples=l_samples, patch=patch,
                              sample_indices=indices)
        grids.append(grid.image)
    return np.stack(grids)


def part_weight_matrix(joint_weights: np.ndarray,
                       template: SkeletonTemplate) -> np.ndarray:
    """[N, K] rescaled part weights from [N, V] joint weights."""
    return np.stack([map_vertex_weights_to_parts(w, template)
                     for w in joint_weights])


def weighted_inputs(grids: np.ndarray, part_weights, patch: int, side: int,
                    stats) -> np.ndarray:
    """Resized, standardized network inputs; weights=None skips weighting."""
    if part_weights is None:
        images = grids
    else:
        rows = np.repeat(np.asarray(part_weights, dtype=Float), patch, axis=1)
        images = grids * rows[:, None, :, None]
    return preprocess_for_net(images, side, stats=stats)


def dataset_channel_stats(grids: np.ndarray, train_ids, side: int):
    """Normalization constants from the unweighted resized training grids."""
    resized = preprocess_for_net(grids[train_ids], side, stats=None)
    return compute_channel_stats(resized)


# ---------------------------------------------------------------------------
# RGB-branch training


def predict_rgb(net: RgbNet, inputs: np.ndarray, sample_ids,
                batch: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(sample_ids), batch):
        chunk = sample_ids[i:i + batch]
        _, probs = net.forward(Tensor(inputs[chunk]), training=False)
        out.append(probs.data)
    return np.concatenate(out, axis=0)


def _maybe_flip(batch_imgs: np.ndarray, cfg: TrainConfig, rng: Rng) -> np.ndarray:
    if not cfg.flip_augment:
        return batch_imgs
    flips = rng.uniform(0, 1, batch_imgs.shape[0]) < 0.5
    if not flips.any():
        return batch_imgs
    out = batch_imgs.copy()
    out[flips] = out[flips][:, :, :, ::-1]
    return out


def train_rgb_stage(net: RgbNet, inputs: np.ndarray, labels: np.ndarray,
                    train_ids, test_ids, cfg: TrainConfig, metrics: MetricsLog,
                    rng: Rng, stage: str = "rgb") -> None:
    """Fixed/unweighted mode: inputs are precomputed constant images."""
    if not train_ids:
        raise DataError("empty training split")
    params = net.parameters()
    num_classes = net.config.num_classes
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        losses, hits, seen = [], 0, 0
        for batch_ids in _epoch_batches(train_ids, cfg.batch, rng):
            y = one_hot(labels[batch_ids], num_classes)
            imgs = _maybe_flip(inputs[batch_ids], cfg, rng)
            with Tape() as tape:
                _, probs = net.forward(Tensor(imgs), training=True)
                loss = branch_loss(probs, y, cfg.loss)
                backward(loss, tape)
            sgd_step(params, lr, cfg.momentum)
            losses.append(float(loss.data))
            hits += int(np.sum(np.argmax(probs.data, 1) == labels[batch_ids]))
            seen += len(batch_ids)
        val_acc = accuracy(predict_rgb(net, inputs, test_ids), labels[test_ids]) \
            if test_ids else 0.0
        metrics.log(epoch, stage, lr, float(np.mean(losses)), hits / seen, val_acc)


def soft_part_weights(feats: Tensor, template: SkeletonTemplate) -> Tensor:
    """Taped [N,K] part weights from [N,c,t,v] feature maps.

    The per-sample max used for rescaling is a detached constant;
    gradients flow through the selected joint weights themselves.
    """
    jw = batch_joint_weights(feats)                       # [N, V]
    part_idx = template.part_joints
    picked = tn.transpose(tn.take(tn.transpose(jw, (1, 0)), part_idx), (1, 0))
    top = picked.data.max(axis=1)
    inv = np.where(top > 0, 1.0 / np.maximum(top, 1e-30), 0.0).astype(Float)
    k = len(part_idx)
    scaled = tn.mul(picked, Tensor(np.repeat(inv[:, None], k, axis=1)))
    fallback = np.repeat((top <= 0).astype(Float)[:, None], k, axis=1)
    if fallback.any():
        scaled = tn.add(scaled, Tensor(fallback))
    return scaled


def soft_forward(gcn: StGcnNet, rgb: RgbNet, arrays: SkeletonArrays,
                 grids: np.ndarray, batch_ids, patch: int, side: int, stats,
                 template: SkeletonTemplate, training: bool = True):
    """Joint taped forward: skeleton branch, weight extraction, grid
    weighting, image branch.  Returns both branches' probabilities."""
    _, probs_j, feats, _ = gcn_forward_samples(gcn, arrays, batch_ids, training)
    pw = soft_part_weights(feats, template)
    weighted = weight_grid_batch(Tensor(grids[batch_ids]), pw, patch)
    x_rgb = preprocess_for_net(weighted, side, stats=stats)
    _, probs_r = rgb.forward(x_rgb, training)
    return probs_j, probs_r


def train_soft_stage(gcn: StGcnNet, rgb: RgbNet, arrays: SkeletonArrays,
                     grids: np.ndarray, labels: np.ndarray, train_ids, test_ids,
                     cfg: TrainConfig, patch: int, side: int, stats,
                     metrics: MetricsLog, rng: Rng,
                     template: SkeletonTemplate) -> None:
    """Soft attention: both branches trainable, full joint objective,
    gradients reach the graph branch through the grid weighting.

    Only single-subject samples batch through this path.
    """
    if not train_ids:
        raise DataError("empty training split")
    if any(len(arrays.subject_rows[i]) != 1 for i in train_ids):
        raise UsageError("soft attention training expects single-subject samples")
    params = gcn.parameters() + rgb.parameters()
    num_classes = rgb.config.num_classes
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        losses, hits, seen = [], 0, 0
        for batch_ids in _epoch_batches(train_ids, cfg.batch, rng):
            y = one_hot(labels[batch_ids], num_classes)
            with Tape() as tape:
                probs_j, probs_r = soft_forward(gcn, rgb, arrays, grids, batch_ids,
                                                patch, side, stats, template)
                loss = multimodal_loss(probs_j, probs_r, y, cfg.loss)
                backward(loss, tape)
            sgd_step(params, lr, cfg.momentum)
            losses.append(float(loss.data))
            combined = ensemble_predict(probs_j.data, probs_r.data)
            hits += int(np.sum(combined.predicted == labels[batch_ids]))
            seen += len(batch_ids)
        if test_ids:
            jw = compute_joint_weights(gcn, arrays)
            # single-subject: subject rows == sample ids
            pw = part_weight_matrix(jw, template)
            val_inputs = weighted_inputs(grids, pw, patch, side, stats)
            val_acc = accuracy(predict_rgb(rgb, val_inputs, test_ids), labels[test_ids])
        else:
            val_acc = 0.0
        metrics.log(epoch, "soft", lr, float(np.mean(losses)), hits / seen, val_acc)


# ---------------------------------------------------------------------------
# ablation report


ABLATION_ROWS = (
    (1, "gcn", "train", "-", "skeleton"),
    (2, "resnet", "-", "train", "rgb_none"),
    (3, "resnet+weights", "train", "train", "rgb_soft"),
    (4, "resnet+weights", "eval", "train", "rgb_fixed"),
    (5, "ensemble (1+2)", "eval", "eval", "ens_none"),
    (6, "ensemble (1+3)", "eval", "eval", "ens_soft"),
    (7, "ensemble (1+4)", "eval", "eval", "ens_fixed"),
)


def ablation_rows(skeleton_probs: np.ndarray, rgb_probs: dict,
                  labels: np.ndarray) -> list[dict]:
    """The seven-row grid; rgb_probs maps mode (none|fixed|soft) to [N,C]."""
    values = {"skeleton": accuracy(skeleton_probs, labels)}
    for mode in ("none", "fixed", "soft"):
        probs = rgb_probs.get(mode)
        if probs is not None:
            values[f"rgb_{mode}"] = accuracy(probs, labels)
            ens = ensemble_predict(skeleton_probs, probs)
            values[f"ens_{mode}"] = float(np.mean(ens.predicted == labels))
    rows = []
    for num, method, skel_flag, rgb_flag, key in ABLATION_ROWS:
        rows.append({"row": num, "method": method, "skeleton": skel_flag,
                     "rgb": rgb_flag, "accuracy": values.get(key)})
    return rows


def format_ablation_report(rows: list[dict]) -> str:
    lines = [f"{'#':>2}  {'method':<18}{'skeleton':<10}{'rgb':<8}{'accuracy':>8}"]
    for row in rows:
        acc = "-" if row["accuracy"] is None else f"{row['accuracy']:.4f}"
        lines.append(f"{row['row']:>2}  {row['method']:<18}{row['skeleton']:<10}"
                     f"{row['rgb']:<8}{acc:>8}")
    return "\n".join(lines)

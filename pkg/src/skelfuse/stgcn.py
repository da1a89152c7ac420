"""The skeleton branch: stacked graph-convolution + temporal-convolution
layers, a softmax classifier head, per-vertex importance extraction, and
a slow per-vertex reference forward used only as a test oracle.

Each layer contracts features with a per-subset 1x1 weight, mixes
vertices with the normalized adjacency modulated by a learnable
edge-importance mask, sums the subsets, then runs a 1xGamma temporal
convolution, batch norm and relu.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import DataError, NumericError, ShapeError, UsageError
from .graph import (
    DEFAULT_ALPHA,
    K_PARTITIONS,
    PartitionedAdjacency,
    SkeletonSequence,
    SkeletonTemplate,
    build_adjacency,
)
from .rng import Rng
from .tensor import BatchNorm, Parameter, Tensor

Float = np.float32


@dataclass
class StGcnConfig:
    """Layer plan for the skeleton branch."""

    vertices: int
    num_classes: int
    in_channels: int = 3
    channels: tuple = (16, 16, 32, 32)
    strides: tuple = (1, 1, 2, 1)
    temporal_kernel: int = 9
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if len(self.channels) != len(self.strides):
            raise UsageError("channels and strides must have equal length")
        if any(c <= 0 for c in self.channels):
            raise UsageError("channels must be positive")
        if any(a > b for a, b in zip(self.channels, self.channels[1:])):
            raise UsageError("channels must be non-decreasing")
        if self.temporal_kernel % 2 != 1:
            raise UsageError("temporal kernel must be odd for symmetric padding")


class StGcnLayer:
    """One spatial-graph + temporal-conv block."""

    def __init__(self, rng: Rng, in_channels: int, out_channels: int,
                 vertices: int, temporal_kernel: int, stride: int, name: str):
        if temporal_kernel % 2 != 1:
            raise UsageError("temporal kernel must be odd")
        self.name = name
        self.stride = int(stride)
        self.temporal_kernel = int(temporal_kernel)
        self.weights = [
            Parameter(tn.fan_in_uniform(rng, (in_channels, out_channels), fan_in=in_channels))
            for _ in range(K_PARTITIONS)
        ]
        self.masks = [
            Parameter(np.ones((vertices, vertices), dtype=Float))
            for _ in range(K_PARTITIONS)
        ]
        self.tkernel = Parameter(tn.fan_in_uniform(
            rng, (out_channels, out_channels, temporal_kernel, 1),
            fan_in=out_channels * temporal_kernel))
        self.bn = BatchNorm(out_channels)

    def parameters(self) -> list[Parameter]:
        return [*self.weights, *self.masks, self.tkernel, *self.bn.parameters()]

    def spatial(self, x: Tensor, norm_adj: Tensor) -> Tensor:
        """Per-subset contraction and vertex mixing, summed over subsets.

        x is [N,C,T,V]; norm_adj is a constant [K,V,V] (shared graph) or
        [N,K,V,V] (per-sample graphs).
        """
        n, c, t, v = x.shape
        per_sample = norm_adj.data.ndim == 4
        out = None
        for k in range(K_PARTITIONS):
            # 1x1 contraction: move channels last, multiply, move back
            h = tn.reshape(tn.transpose(x, (0, 2, 3, 1)), (n * t * v, c))
            h = tn.matmul(h, self.weights[k].value)
            co = h.shape[1]
            h = tn.transpose(tn.reshape(h, (n, t, v, co)), (0, 3, 1, 2))
            # vertex mixing by (normalized adjacency) ⊙ mask
            if per_sample:
                adj_k = tn.Tensor(norm_adj.data[:, k])           # [N,V,V] constant
                mask = tn.tile_leading(self.masks[k].value, n)   # [N,V,V]
                b = tn.mul(adj_k, mask)
                rows = tn.reshape(h, (n, co * t, v))
                mixed = tn.bmm(rows, tn.transpose(b, (0, 2, 1)))
                mixed = tn.reshape(mixed, (n, co, t, v))
            else:
                b = tn.mul(tn.Tensor(norm_adj.data[k]), self.masks[k].value)
                rows = tn.reshape(h, (n * co * t, v))
                mixed = tn.reshape(tn.matmul(rows, tn.transpose(b, (1, 0))),
                                   (n, co, t, v))
            out = mixed if out is None else tn.add(out, mixed)
        return out

    def forward(self, x: Tensor, norm_adj: Tensor, training: bool) -> Tensor:
        y = self.spatial(x, norm_adj)
        pad = (self.temporal_kernel - 1) // 2
        y = tn.conv2d(y, self.tkernel.value, stride=(self.stride, 1), padding=(pad, 0))
        if y.shape[2] < 1:
            raise DataError(f"{self.name}: temporal extent vanished after stride")
        y = self.bn(y, training)
        y = tn.relu(y)
        if not np.isfinite(y.data).all():
            raise NumericError(f"{self.name} produced non-finite values")
        return y


class StGcnNet:
    """Layer stack, global pooling and linear softmax head."""

    def __init__(self, config: StGcnConfig, rng: Rng):
        self.config = config
        self.layers = []
        cin = config.in_channels
        for i, (cout, stride) in enumerate(zip(config.channels, config.strides)):
            self.layers.append(StGcnLayer(
                rng, cin, cout, config.vertices, config.temporal_kernel,
                stride, name=f"gcn_layer{i}"))
            cin = cout
        self.head_w = Parameter(tn.fan_in_uniform(rng, (cin, config.num_classes), fan_in=cin))
        self.head_b = Parameter(np.zeros(config.num_classes, dtype=Float))

    def parameters(self) -> list[Parameter]:
        params = []
        for layer in self.layers:
            params.extend(layer.parameters())
        params.extend([self.head_w, self.head_b])
        return params

    def backbone(self, x: Tensor, norm_adj: Tensor, training: bool) -> Tensor:
        """Feature maps [N, c, t, v] after the final layer."""
        y = x
        for layer in self.layers:
            y = layer.forward(y, norm_adj, training)
        return y

    def head(self, features: Tensor) -> tuple[Tensor, Tensor]:
        pooled = tn.reduce_mean(features, axes=(2, 3))
        logits = tn.add_rowvec(tn.matmul(pooled, self.head_w.value), self.head_b.value)
        return logits, tn.softmax(logits)

    def forward(self, x: Tensor, norm_adj: Tensor, training: bool):
        feats = self.backbone(x, norm_adj, training)
        logits, probs = self.head(feats)
        return logits, probs, feats

    # -- checkpoint plumbing

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            p = f"layer{i}"
            for k in range(K_PARTITIONS):
                out[f"{p}.w{k}"] = layer.weights[k].data
                out[f"{p}.mask{k}"] = layer.masks[k].data
            out[f"{p}.tkernel"] = layer.tkernel.data
            out[f"{p}.bn.gamma"] = layer.bn.gamma.data
            out[f"{p}.bn.beta"] = layer.bn.beta.data
            out[f"{p}.bn.running_mean"] = layer.bn.running_mean
            out[f"{p}.bn.running_var"] = layer.bn.running_var
        out["head.w"] = self.head_w.data
        out["head.b"] = self.head_b.data
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        own = self.state_tensors()
        missing = set(own) - set(tensors)
        if missing:
            raise DataError(f"checkpoint is missing tensors: {sorted(missing)}")
        for name, dst in own.items():
            src = np.asarray(tensors[name], dtype=Float)
            if src.shape != dst.shape:
                raise ShapeError(f"load {name}", src.shape, dst.shape)
            dst[...] = src


def sequence_input(seq: SkeletonSequence, center_joints: bool = True) -> np.ndarray:
    """[C,T,V] network input from a [T,M,C] sequence.

    Optionally removes each joint's temporal mean so static joints carry
    (almost) no signal and activation magnitude tracks motion.
    """
    coords = seq.coords.astype(Float)
    if center_joints:
        coords = coords - coords.mean(axis=0, keepdims=True)
    return np.ascontiguousarray(coords.transpose(2, 0, 1))


def stack_adjacency(adjs) -> Tensor:
    """Constant [N,K,V,V] tensor from per-sample PartitionedAdjacency."""
    if isinstance(adjs, PartitionedAdjacency):
        adjs = [adjs]
    mats = []
    for adj in adjs:
        if adj.normalized is None:
            raise UsageError("adjacency must be normalized before use")
        mats.append(adj.normalized)
    return Tensor(np.stack(mats))


def gcn_layer_forward(features: Tensor, layer: StGcnLayer,
                      adjacency: PartitionedAdjacency,
                      training: bool = False) -> Tensor:
    """One layer over a batch that shares a single adjacency."""
    if adjacency.normalized is None:
        raise UsageError("adjacency must be normalized before use")
    if features.shape[3] != adjacency.joints:
        raise ShapeError("gcn_layer_forward", features.shape, adjacency.raw.shape)
    return layer.forward(features, Tensor(adjacency.normalized), training)


def stgcn_classify(net: StGcnNet, seqs, template: SkeletonTemplate,
                   center_joints: bool = True, training: bool = False):
    """Classify one sample (one or two subject sequences).

    Returns (logits[num_classes], probabilities[num_classes], per-subject
    feature maps [c,t,v]).  Two-subject samples average the subjects'
    final feature maps before the head.
    """
    if isinstance(seqs, SkeletonSequence):
        seqs = [seqs]
    if not seqs:
        raise DataError("empty sample")
    x = np.stack([sequence_input(s, center_joints) for s in seqs])
    adj = stack_adjacency([build_adjacency(template, s, net.config.alpha) for s in seqs])
    feats = net.backbone(Tensor(x), adj, training)
    pooled = tn.scale(feats, 1.0 / len(seqs))
    if len(seqs) > 1:
        n, c, t, v = pooled.shape
        ones = Tensor(np.ones((1, n), dtype=Float))
        merged = tn.matmul(ones, tn.reshape(pooled, (n, c * t * v)))
        pooled = tn.reshape(merged, (1, c, t, v))
    logits, probs = net.head(pooled)
    subject_maps = [Tensor(feats.data[i]) for i in range(len(seqs))]
    return Tensor(logits.data[0]), Tensor(probs.data[0]), subject_maps


def extract_joint_weights(features) -> Tensor:
    """Per-vertex mean absolute activation of a [c,t,v] feature map.

    Differentiable when handed a taped Tensor; also accepts a plain
    array.  Output is a length-v vector of non-negative importances.
    """
    if not isinstance(features, Tensor):
        features = Tensor(features)
    if features.data.ndim != 3:
        raise ShapeError("extract_joint_weights", features.shape)
    if not np.isfinite(features.data).all():
        raise NumericError("joint-weight extraction on non-finite features")
    return tn.reduce_mean(tn.absval(features), axes=(0, 1))


def batch_joint_weights(features: Tensor) -> Tensor:
    """extract_joint_weights over a [N,c,t,v] batch -> [N,v]."""
    return tn.reduce_mean(tn.absval(features), axes=(1, 2))


def gcn_reference_forward(features: np.ndarray, adjacency: PartitionedAdjacency,
                          weights) -> np.ndarray:
    """Slow per-vertex forward: for every root, sum neighbor features
    through the subset's weight, each divided by that subset's
    cardinality within the root's neighborhood.

    Explicit loops, not differentiable; exists as an independent oracle
    for the matrix-form layer.  Empty subsets contribute nothing.
    """
    c, t, v = features.shape
    weights = [np.asarray(w, dtype=Float) for w in weights]
    cout = weights[0].shape[1]
    out = np.zeros((cout, t, v), dtype=Float)
    raw = adjacency.raw
    for i in range(v):
        members = {k: [j for j in range(v) if raw[k, i, j] == 1.0]
                   for k in range(adjacency.subsets)}
        for k, js in members.items():
            if not js:
                continue
            z = Float(len(js))
            for j in js:
                for ti in range(t):
                    out[:, ti, i] += (features[:, ti, j] @ weights[k]) / z
    return out

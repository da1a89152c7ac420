"""Named finite-difference checks over every differentiable piece.

Each check compares taped gradients against central differences on a
small, fixed, seeded instance chosen to sit clear of relu kinks (a kink
within h of zero breaks the difference quotient, not the gradient).
"""
from __future__ import annotations

import sys

import numpy as np

from . import tensor as tn
from .graph import PartitionedAdjacency, normalize_adjacency
from .rgbnet import ResidualBlock
from .rng import Rng
from .stgcn import StGcnLayer
from .stroi import weight_grid_batch
from .tensor import Tensor, finite_diff_check

F = np.float32

THRESHOLD = 1e-3


def _chain3_adjacency():
    raw = np.zeros((3, 3, 3), dtype=F)
    raw[0] = np.eye(3, dtype=F)
    raw[1][0, 1] = raw[1][2, 1] = 1.0   # ends see the middle as centripetal
    raw[2][1, 0] = raw[2][1, 2] = 1.0
    return normalize_adjacency(PartitionedAdjacency(raw=raw), alpha=0.001)


def _gcn_layer_checks():
    adj = _chain3_adjacency()
    rng = Rng(8)
    layer = StGcnLayer(rng, 2, 3, vertices=3, temporal_kernel=3, stride=1,
                       name="probe")
    x0 = rng.uniform(-1, 1, (1, 2, 4, 3))
    adj_t = Tensor(adj.normalized)
    x_const = Tensor(x0)

    def wrt_input(t):
        return layer.forward(t, adj_t, training=True)

    def swap(param):
        def fn(t):
            saved = param.value
            param.value = t
            try:
                return layer.forward(x_const, adj_t, training=True)
            finally:
                param.value = saved
        return fn

    return [
        ("gcn_layer/input", wrt_input, Tensor(x0)),
        ("gcn_layer/weight", swap(layer.weights[0]), Tensor(layer.weights[0].data.copy())),
        ("gcn_layer/mask", swap(layer.masks[1]), Tensor(layer.masks[1].data.copy())),
        ("gcn_layer/temporal", swap(layer.tkernel), Tensor(layer.tkernel.data.copy())),
    ]


def build_checks():
    rng = Rng(2024)
    checks = []

    # primitive elementwise and shape operations
    x = Tensor(rng.uniform(0.3, 1.5, (3, 4)))
    checks.append(("add", lambda t: tn.add(t, Tensor(rng_fixed(1, (3, 4)))), x))
    checks.append(("sub", lambda t: tn.sub(t, Tensor(rng_fixed(2, (3, 4)))), x))
    checks.append(("mul", lambda t: tn.mul(t, Tensor(rng_fixed(3, (3, 4)))), x))
    checks.append(("scale", lambda t: tn.scale(t, -1.7), x))
    checks.append(("square", tn.square, x))
    checks.append(("sqrt", tn.sqrt, Tensor(rng_fixed(4, (3, 4), lo=0.5, hi=2.0))))
    checks.append(("log", tn.log, Tensor(rng_fixed(5, (3, 4), lo=0.5, hi=2.0))))
    checks.append(("abs", tn.absval, Tensor(rng_fixed(6, (3, 4), lo=0.2, hi=1.0))))
    checks.append(("relu", tn.relu, Tensor(rng_fixed(7, (3, 4), lo=0.1, hi=1.0))))
    checks.append(("reshape", lambda t: tn.reshape(t, (4, 3)), x))
    checks.append(("transpose", lambda t: tn.transpose(t, (1, 0)), x))
    checks.append(("tile_leading", lambda t: tn.tile_leading(t, 3), x))
    checks.append(("take", lambda t: tn.take(t, [0, 0, 2]), x))
    checks.append(("reduce_sum", lambda t: tn.reduce_sum(t, axes=(0,)), x))
    checks.append(("reduce_mean", lambda t: tn.reduce_mean(t, axes=(0, 1)), x))

    # contractions
    a = Tensor(rng_fixed(8, (4, 5)))
    b_const = Tensor(rng_fixed(9, (5, 3)))
    checks.append(("matmul/left", lambda t: tn.matmul(t, b_const), a))
    a_const = Tensor(rng_fixed(10, (4, 5)))
    checks.append(("matmul/right", lambda t: tn.matmul(a_const, t), Tensor(rng_fixed(11, (5, 3)))))
    bm = Tensor(rng_fixed(12, (2, 3, 4)))
    bm_const = Tensor(rng_fixed(13, (2, 4, 2)))
    checks.append(("bmm", lambda t: tn.bmm(t, bm_const), bm))
    xrow = Tensor(rng_fixed(14, (4, 3)))
    checks.append(("add_rowvec", lambda t: tn.add_rowvec(xrow, t), Tensor(rng_fixed(15, (3,)))))

    # convolution
    k_const = Tensor(rng_fixed(16, (2, 3, 3, 3), lo=-0.5, hi=0.5))
    xc = Tensor(rng_fixed(17, (1, 3, 5, 5)))
    checks.append(("conv2d/input", lambda t: tn.conv2d(t, k_const, (1, 1), (1, 1)), xc))
    xc_const = Tensor(rng_fixed(18, (1, 3, 5, 5)))
    checks.append(("conv2d/kernel",
                   lambda t: tn.conv2d(xc_const, t, (2, 2), (1, 1)),
                   Tensor(rng_fixed(19, (2, 3, 3, 3), lo=-0.5, hi=0.5))))

    # batch norm (training mode)
    bn = tn.BatchNorm(3)
    xb = Tensor(rng_fixed(20, (4, 3, 5)))
    checks.append(("batch_norm/input",
                   lambda t: tn.batch_norm(t, bn.gamma.value, bn.beta.value, bn, True),
                   Tensor(rng_fixed(21, (4, 3, 5)))))
    checks.append(("batch_norm/gamma",
                   lambda t: tn.batch_norm(xb, t, bn.beta.value, bn, True),
                   Tensor(np.full(3, 1.2, dtype=F))))
    checks.append(("batch_norm/beta",
                   lambda t: tn.batch_norm(xb, bn.gamma.value, t, bn, True),
                   Tensor(np.full(3, 0.3, dtype=F))))

    # softmax and the squared-error composition
    logits = Tensor(rng_fixed(22, (3, 4), lo=-2.0, hi=2.0))
    checks.append(("softmax", tn.softmax, logits))
    onehot = Tensor(np.eye(4, dtype=F)[[0, 2, 1]])

    def softmax_loss(t):
        diff = tn.sub(tn.softmax(t), onehot)
        return tn.reduce_mean(tn.reduce_sum(tn.square(diff), axes=(1,)), axes=(0,))

    checks.append(("softmax_squared_loss", softmax_loss, logits))

    # image-shaped linear maps
    left = Tensor(rng_fixed(23, (4, 6), lo=0.0, hi=0.5))
    right = Tensor(rng_fixed(24, (4, 5), lo=0.0, hi=0.5))
    checks.append(("separable_linear",
                   lambda t: tn.separable_linear(t, left, right),
                   Tensor(rng_fixed(25, (3, 6, 5)))))
    mu = np.array([0.2, 0.3, 0.4], dtype=F)
    sd = np.array([0.5, 0.6, 0.7], dtype=F)
    checks.append(("channel_standardize",
                   lambda t: tn.channel_standardize(t, mu, sd),
                   Tensor(rng_fixed(26, (3, 4, 4)))))

    # graph-convolution layer, incl. the edge-importance mask
    checks.extend(_gcn_layer_checks())

    # residual block
    block = ResidualBlock(Rng(3), 4, 4, stride=1)
    checks.append(("residual_block",
                   lambda t: block.forward(t, training=True),
                   Tensor(rng_fixed(27, (1, 4, 6, 6)))))

    # ST-ROI weighting in soft mode
    grid_const = Tensor(rng_fixed(28, (1, 3, 20, 20), lo=0.0, hi=1.0))
    checks.append(("apply_joint_weights/soft",
                   lambda t: weight_grid_batch(grid_const, t, 4),
                   Tensor(rng_fixed(29, (1, 5), lo=0.2, hi=1.0))))
    pw_const = Tensor(rng_fixed(30, (1, 5), lo=0.2, hi=1.0))
    checks.append(("apply_joint_weights/grid",
                   lambda t: weight_grid_batch(t, pw_const, 4),
                   Tensor(rng_fixed(31, (1, 3, 20, 20), lo=0.0, hi=1.0))))

    return checks


def rng_fixed(stream: int, shape, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    return Rng(0xABCD00 + stream).uniform(lo, hi, shape)


def run_suite(h: float = 1e-3):
    """Returns {name: max relative error} over every check."""
    return {name: finite_diff_check(fn, x, h=h) for name, fn, x in build_checks()}


def report(stream=None, h: float = 1e-3) -> bool:
    stream = stream or sys.stdout
    results = run_suite(h)
    ok = True
    for name, err in results.items():
        passed = err < THRESHOLD
        ok = ok and passed
        stream.write(f"{name:<28} {err:12.3e}  {'ok' if passed else 'FAIL'}\n")
    stream.write(f"gradient suite: {'all below' if ok else 'FAILURES above'} {THRESHOLD}\n")
    return ok

"""Dense float32 tensors with taped reverse-mode differentiation.

Everything downstream (the graph-convolution branch, the residual image
branch, the fusion trainer) runs on the operations here.  Values are
float32 throughout; doubles appear only inside the finite-difference
harness.  There is no broadcasting: binary operations demand identical
shapes, and `scale` is the only scalar form.  Operations executed while a
Tape is active append a backward closure to it; `backward` replays the
tape in exact reverse execution order.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import NumericError, ShapeError, UsageError
from .rng import Rng

Float = np.float32
EPS_BN = Float(1e-5)

# Flipped to float64 only while the finite-difference oracle evaluates the
# function under test; everything else runs float32.
_EVAL_DTYPE = Float


class Tensor:
    """N-dimensional float32 array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_EVAL_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return self.data.size

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """Trainable value with a persistent gradient and a momentum buffer."""

    __slots__ = ("value", "momentum")

    def __init__(self, data):
        self.value = Tensor(data, requires_grad=True)
        self.value.grad = np.zeros_like(self.value.data)
        self.momentum = np.zeros_like(self.value.data)

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray:
        return self.value.grad

    @property
    def shape(self) -> tuple:
        return tuple(self.value.data.shape)

    def zero_grad(self) -> None:
        self.value.grad[...] = 0.0


class _Node:
    __slots__ = ("out", "backward")

    def __init__(self, out: Tensor, backward):
        self.out = out
        self.backward = backward


class Tape:
    """Execution-ordered record of differentiable operations.

    Because an operation can only consume tensors that already exist,
    walking the record backwards is a valid reverse topological order.
    Clearing the tape drops every saved input reference.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def clear(self) -> None:
        self._nodes.clear()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()


_TAPE_STACK: list[Tape] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _emit(data: np.ndarray, backward, requires_grad: bool) -> Tensor:
    out = Tensor(data, requires_grad=requires_grad)
    if requires_grad:
        tape = _active_tape()
        if tape is not None:
            tape._nodes.append(_Node(out, backward))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients of every tensor reachable from `loss`.

    Gradients accumulate (+=) into `requires_grad` leaves; the tape is
    cleared afterwards.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not len(tape):
        raise UsageError("backward on an empty tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape._nodes):
        g = node.out.grad
        if g is None:
            continue
        node.backward(g)
        node.out.grad = None
    tape.clear()


# ---------------------------------------------------------------------------
# elementwise operations


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(op, a.shape, b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    rg = a.requires_grad or b.requires_grad

    def back(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _emit(a.data + b.data, back, rg)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    rg = a.requires_grad or b.requires_grad

    def back(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(-g)

    return _emit(a.data - b.data, back, rg)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    rg = a.requires_grad or b.requires_grad

    def back(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)

    return _emit(a.data * b.data, back, rg)


def scale(a: Tensor, c: float) -> Tensor:
    c = Float(c)

    def back(g):
        a.accumulate(g * c)

    return _emit(a.data * c, back, a.requires_grad)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def back(g):
        a.accumulate(g * mask)

    return _emit(np.maximum(a.data, 0), back, a.requires_grad)


def absval(a: Tensor) -> Tensor:
    # subgradient 0 at exactly 0, matching relu's convention
    def back(g):
        a.accumulate(g * np.sign(a.data))

    return _emit(np.abs(a.data), back, a.requires_grad)


def square(a: Tensor) -> Tensor:
    def back(g):
        a.accumulate(g * (Float(2) * a.data))

    return _emit(a.data * a.data, back, a.requires_grad)


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root; the gradient needs strictly positive inputs."""
    if np.any(a.data < 0):
        raise NumericError("sqrt of negative input")
    out_data = np.sqrt(a.data)

    def back(g):
        with np.errstate(divide="ignore"):
            a.accumulate(g * (Float(0.5) / out_data))

    return _emit(out_data, back, a.requires_grad)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive input")

    def back(g):
        a.accumulate(g / a.data)

    return _emit(np.log(a.data), back, a.requires_grad)


_ELEMENTWISE = {
    "relu": relu,
    "abs": absval,
    "sqrt": sqrt,
    "square": square,
    "add": add,
    "mul": mul,
    "scale": scale,
}


def elementwise_map(kind: str, *operands) -> Tensor:
    """Dispatch by name: relu|abs|sqrt|square|add|mul|scale."""
    if kind not in _ELEMENTWISE:
        raise UsageError(f"unknown elementwise kind '{kind}'")
    return _ELEMENTWISE[kind](*operands)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape

    def back(g):
        a.accumulate(g.reshape(old))

    return _emit(a.data.reshape(shape), back, a.requires_grad)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        a.accumulate(g.transpose(inv))

    return _emit(a.data.transpose(axes), back, a.requires_grad)


def tile_leading(a: Tensor, n: int) -> Tensor:
    """Stack n copies of `a` along a new leading axis."""

    def back(g):
        a.accumulate(g.sum(axis=0))

    return _emit(np.broadcast_to(a.data, (n,) + a.data.shape).copy(), back, a.requires_grad)


def take(a: Tensor, indices) -> Tensor:
    """Gather along the first axis; repeated indices scatter-add back."""
    idx = np.asarray(indices, dtype=np.int64)

    def back(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a.accumulate(buf)

    return _emit(a.data[idx], back, a.requires_grad)


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """x[N,C] + v[C] broadcast over rows (the linear-layer bias)."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.data.shape[1] != v.data.shape[0]:
        raise ShapeError("add_rowvec", x.shape, v.shape)
    rg = x.requires_grad or v.requires_grad

    def back(g):
        if x.requires_grad:
            x.accumulate(g)
        if v.requires_grad:
            v.accumulate(g.sum(axis=0))

    return _emit(x.data + v.data[None, :], back, rg)


# ---------------------------------------------------------------------------
# contractions and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    rg = a.requires_grad or b.requires_grad

    def back(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    with np.errstate(over="ignore"):
        return _emit(a.data @ b.data, back, rg)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: [N,m,k] @ [N,k,n] -> [N,m,n]."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[0] != b.data.shape[0] \
            or a.data.shape[2] != b.data.shape[1]:
        raise ShapeError("bmm", a.shape, b.shape)
    rg = a.requires_grad or b.requires_grad

    def back(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.swapaxes(1, 2))
        if b.requires_grad:
            b.accumulate(a.data.swapaxes(1, 2) @ g)

    return _emit(a.data @ b.data, back, rg)


def _check_axes(ndim: int, axes) -> tuple:
    axes = tuple(int(ax) for ax in axes)
    if len(set(axes)) != len(axes) or any(ax < 0 or ax >= ndim for ax in axes):
        raise UsageError(f"invalid reduction axes {axes} for rank {ndim}")
    return axes


def reduce_sum(a: Tensor, axes) -> Tensor:
    axes = _check_axes(a.data.ndim, axes)
    shape = a.data.shape

    def back(g):
        gexp = np.expand_dims(g, axes) if axes else g
        a.accumulate(np.broadcast_to(gexp, shape))

    return _emit(a.data.sum(axis=axes), back, a.requires_grad)


def reduce_mean(a: Tensor, axes) -> Tensor:
    axes = _check_axes(a.data.ndim, axes)
    shape = a.data.shape
    count = Float(np.prod([shape[ax] for ax in axes], dtype=np.float64))

    def back(g):
        gexp = np.expand_dims(g / count, axes) if axes else g / count
        a.accumulate(np.broadcast_to(gexp, shape))

    return _emit(a.data.sum(axis=axes) / count, back, a.requires_grad)


def reduce(kind: str, a: Tensor, axes) -> Tensor:
    """Dispatch by name: mean|sum."""
    if kind == "sum":
        return reduce_sum(a, axes)
    if kind == "mean":
        return reduce_mean(a, axes)
    raise UsageError(f"unknown reduce kind '{kind}'")


def softmax(a: Tensor) -> Tensor:
    """Row softmax of a [N,C] tensor, computed with max subtraction."""
    if a.data.ndim != 2:
        raise ShapeError("softmax", a.shape)
    if not np.isfinite(a.data).all():
        raise NumericError("softmax on non-finite input")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        a.accumulate(y * (g - (g * y).sum(axis=1, keepdims=True)))

    return _emit(y, back, a.requires_grad)


# ---------------------------------------------------------------------------
# convolution


def _conv_out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int,
            ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, ho, wo, kh, kw),
        strides=(s0, s1, s2 * sh, s3 * sw, s2, s3))
    return view.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, kernel: Tensor, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Cross-correlation of x[N,Cin,H,W] with kernel[Cout,Cin,kh,kw]."""
    if x.data.ndim != 4 or kernel.data.ndim != 4 \
            or x.data.shape[1] != kernel.data.shape[1]:
        raise ShapeError("conv2d", x.shape, kernel.shape)
    sh, sw = stride
    ph, pw = padding
    n, cin, h, w = x.data.shape
    cout, _, kh, kw = kernel.data.shape
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError("conv2d", x.shape, kernel.shape)
    ho = _conv_out_extent(h, kh, sh, ph)
    wo = _conv_out_extent(w, kw, sw, pw)

    def pad_input(arr):
        if ph == 0 and pw == 0:
            return arr
        return np.pad(arr, ((0, 0), (0, 0), (ph, ph), (pw, pw)))

    wmat = kernel.data.reshape(cout, -1)
    cols = _im2col(pad_input(x.data), kh, kw, sh, sw, ho, wo)
    with np.errstate(over="ignore"):
        out_data = np.ascontiguousarray(
            (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    if not np.isfinite(out_data).all():
        raise NumericError("conv2d produced non-finite values")
    rg = x.requires_grad or kernel.requires_grad
    saved_cols = cols if rg and _active_tape() is not None else None

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        if kernel.requires_grad:
            kernel.accumulate((gmat.T @ saved_cols).reshape(kernel.data.shape))
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gcols = gcols.transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros((n, cin, h + 2 * ph, w + 2 * pw), dtype=Float)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += gcols[:, :, i, j]
            x.accumulate(gxp[:, :, ph:ph + h, pw:pw + w])

    return _emit(out_data, back, rg)


# ---------------------------------------------------------------------------
# batch normalization


class BatchNorm:
    """Per-channel batch norm over [N,C,*spatial] with running statistics."""

    def __init__(self, channels: int, momentum: float = 0.9):
        self.gamma = Parameter(np.ones(channels, dtype=Float))
        self.beta = Parameter(np.zeros(channels, dtype=Float))
        self.running_mean = np.zeros(channels, dtype=Float)
        self.running_var = np.ones(channels, dtype=Float)
        self.momentum = Float(momentum)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.gamma.value, self.beta.value, self, training)

    def parameters(self):
        return [self.gamma, self.beta]


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNorm,
               training: bool) -> Tensor:
    if x.data.ndim < 2 or gamma.data.shape != (x.data.shape[1],):
        raise ShapeError("batch_norm", x.shape, gamma.shape)
    axes = (0,) + tuple(range(2, x.data.ndim))
    cshape = (1, x.data.shape[1]) + (1,) * (x.data.ndim - 2)
    m = int(np.prod([x.data.shape[ax] for ax in axes], dtype=np.int64))
    rg = x.requires_grad or gamma.requires_grad or beta.requires_grad

    if training:
        if m < 2:
            raise UsageError("batch_norm training mode needs at least 2 values per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.running_mean = (state.momentum * state.running_mean
                              + (1 - state.momentum) * mu).astype(Float)
        state.running_var = (state.momentum * state.running_var
                             + (1 - state.momentum) * var).astype(Float)
    else:
        mu = state.running_mean
        var = state.running_var

    invstd = Float(1) / np.sqrt(var + EPS_BN)
    xhat = (x.data - mu.reshape(cshape)) * invstd.reshape(cshape)
    out_data = xhat * gamma.data.reshape(cshape) + beta.data.reshape(cshape)

    def back(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gi = gamma.data.reshape(cshape) * invstd.reshape(cshape)
            if training:
                gsum = g.sum(axis=axes).reshape(cshape)
                gxhat = (g * xhat).sum(axis=axes).reshape(cshape)
                x.accumulate(gi * (g - gsum / Float(m) - xhat * (gxhat / Float(m))))
            else:
                x.accumulate(gi * g)

    return _emit(out_data, back, rg)


# ---------------------------------------------------------------------------
# image-shaped linear maps


def separable_linear(x: Tensor, left: Tensor, right: Tensor) -> Tensor:
    """out[...,i,j] = sum_{h,w} left[i,h] * x[...,h,w] * right[j,w].

    Applies fixed row/column interpolation matrices over the last two
    axes (bilinear resize is the only current user).
    """
    if x.data.ndim < 2 or left.data.shape[1] != x.data.shape[-2] \
            or right.data.shape[1] != x.data.shape[-1]:
        raise ShapeError("separable_linear", x.shape, left.shape, right.shape)
    out_data = np.matmul(left.data, np.matmul(x.data, right.data.T))

    def back(g):
        x.accumulate(np.matmul(left.data.T, np.matmul(g, right.data)))

    return _emit(out_data, back, x.requires_grad)


def channel_standardize(x: Tensor, mean: np.ndarray, std: np.ndarray) -> Tensor:
    """(x - mean_c) / std_c with constant per-channel statistics.

    x is [...,C,H,W]; mean/std are length-C constants.
    """
    c = x.data.shape[-3]
    if mean.shape != (c,) or std.shape != (c,):
        raise ShapeError("channel_standardize", x.shape, mean.shape)
    cshape = (c, 1, 1)
    inv = (Float(1) / std.astype(Float)).reshape(cshape)

    def back(g):
        x.accumulate(g * inv)

    return _emit((x.data - mean.astype(Float).reshape(cshape)) * inv, back, x.requires_grad)


# ---------------------------------------------------------------------------
# optimization and verification


def sgd_step(params: list[Parameter], lr: float, momentum: float = 0.9) -> None:
    """buffer <- momentum*buffer + grad; value <- value - lr*buffer; grads zeroed."""
    if lr <= 0:
        raise UsageError(f"learning rate must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise UsageError(f"momentum must be in [0, 1), got {momentum}")
    lr = Float(lr)
    momentum = Float(momentum)
    for p in params:
        p.momentum *= momentum
        p.momentum += p.grad
        p.value.data -= lr * p.momentum
        p.zero_grad()


def fan_in_uniform(rng: Rng, shape, fan_in: int) -> np.ndarray:
    """He-style uniform init with bound sqrt(6 / fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


class _DoubleEval:
    """Runs fn evaluations in float64; only the FD oracle may use this."""

    def __enter__(self):
        global _EVAL_DTYPE
        _EVAL_DTYPE = np.float64

    def __exit__(self, *exc):
        global _EVAL_DTYPE
        _EVAL_DTYPE = Float


def _eval_double(fn, data64: np.ndarray, proj: np.ndarray) -> float:
    with _DoubleEval():
        out = fn(Tensor(data64))
    return float(np.sum(np.asarray(out.data, dtype=np.float64) * proj))


def finite_diff_check(fn, x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between taped gradients and central differences.

    `fn` maps a Tensor to a Tensor of any shape; a fixed random projection
    reduces the output to the scalar being differentiated.  The analytic
    gradient is taken from the float32 tape; the difference quotient is
    the only place double precision appears.  Raises UsageError if two
    evaluations of `fn` disagree.
    """
    with _DoubleEval():
        base = np.asarray(fn(Tensor(x.data)).data)
        again = np.asarray(fn(Tensor(x.data)).data)
    if base.tobytes() != again.tobytes():
        raise UsageError("finite_diff_check requires a deterministic function")
    proj = Rng(0xC0FFEE).uniform(0.5, 1.5, base.shape).astype(np.float64)

    xg = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = fn(xg)
        loss = reduce_sum(mul(out, Tensor(proj)), axes=tuple(range(out.data.ndim)))
        backward(loss, tape)
    analytic = (np.zeros_like(x.data) if xg.grad is None else xg.grad).astype(np.float64)

    base64 = x.data.astype(np.float64)
    worst = 0.0
    flat = base64.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        fp = _eval_double(fn, base64, proj)
        flat[i] = saved - h
        fm = _eval_double(fn, base64, proj)
        flat[i] = saved
        cd = (fp - fm) / (2 * h)
        a = float(analytic.reshape(-1)[i])
        err = abs(a - cd) / max(abs(a), abs(cd), 1e-6)
        worst = max(worst, err)
    return worst

"""A small tape-based reverse-mode autodiff engine.

Only the layers the U-Net uses are provided.  Operations record themselves on
the active :class:`Graph` (``with Graph() as g: ...``); outside a graph they
just compute, which is how inference runs.

Everything is 64-bit.  Convolutions go through an im2col matrix product so the
heavy lifting happens in BLAS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphCycle, ShapeMismatch

DTYPE = np.float64


class Tensor:
    """Dense array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable  # grad_out -> tuple of input grads (None to skip)


@dataclass
class Graph:
    nodes: list = field(default_factory=list)

    def __enter__(self):
        _STACK.append(self)
        return self

    def __exit__(self, *exc):
        _STACK.pop()
        return False

    def record(self, op, inputs, output, backward):
        self.nodes.append(Node(op, tuple(inputs), output, backward))


_STACK: list = []


def _active() -> Optional[Graph]:
    return _STACK[-1] if _STACK else None


def _emit(op, inputs, out_data, backward) -> Tensor:
    out = Tensor(out_data)
    g = _active()
    if g is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        g.record(op, inputs, out, backward)
    return out


def backward(graph: Graph, loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf that requires it."""
    if loss.data.size != 1:
        raise ShapeMismatch(f"loss must be a scalar, got shape {loss.shape}")
    position = {}
    for k, node in enumerate(graph.nodes):
        if id(node.output) in position:
            raise GraphCycle(f"tensor produced twice (node {k}, op {node.op})")
        for t in node.inputs:
            if t is node.output:
                raise GraphCycle(f"node {k} ({node.op}) consumes its own output")
        position[id(node.output)] = k
    for k, node in enumerate(graph.nodes):
        for t in node.inputs:
            j = position.get(id(t))
            if j is not None and j >= k:
                raise GraphCycle(f"node {k} ({node.op}) reads a tensor recorded later")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        for t, g in zip(node.inputs, node.backward(g_out)):
            if g is None or not t.requires_grad:
                continue
            if id(t) in position:
                prev = grads.get(id(t))
                grads[id(t)] = g if prev is None else prev + g
            else:
                t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    return _emit("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def sum_all(a: Tensor) -> Tensor:
    return _emit("sum", (a,), np.array(a.data.sum()), lambda g: (np.full_like(a.data, g),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _emit("mean", (a,), np.array(a.data.mean()), lambda g: (np.full_like(a.data, g / n),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # numerically stable on both tails
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise ShapeMismatch(f"concat: {a.shape} vs {b.shape}")
    c = a.shape[1]
    return _emit("concat", (a, b), np.concatenate([a.data, b.data], axis=1),
                 lambda g: (g[:, :c], g[:, c:]))


# ---------------------------------------------------------------------------
# convolutions


def same_padding(k: int) -> tuple:
    """(left, right) padding that keeps the length; even kernels lean left."""
    if k % 2:
        return (k - 1) // 2, (k - 1) // 2
    return k // 2, k // 2 - 1


def _check_conv(x, w, b):
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeMismatch(f"conv1d expects 3-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv1d: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv1d: bias shape {b.shape}, expected ({w.shape[0]},)")


def conv1d(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Same-padded cross-correlation: ``B×Cin×L`` with ``Cout×Cin×k`` -> ``B×Cout×L``."""
    _check_conv(x, w, b)
    B, Cin, L = x.shape
    Cout, _, k = w.shape
    left, right = same_padding(k)
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right)))
    # cols[b, t, c*k + j] = xp[b, c, t + j]
    cols = sliding_window_view(xp, k, axis=2).transpose(0, 2, 1, 3).reshape(B * L, Cin * k)
    wm = w.data.reshape(Cout, Cin * k)
    out = (cols @ wm.T).reshape(B, L, Cout).transpose(0, 2, 1)
    if b is not None:
        out = out + b.data[None, :, None]

    def grad_fn(g):
        gm = g.transpose(0, 2, 1).reshape(B * L, Cout)
        gw = (gm.T @ cols).reshape(Cout, Cin, k) if w.requires_grad else None
        gb = g.sum(axis=(0, 2)) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            # full correlation of g with the flipped kernel, padded the other way round
            gp = np.pad(g, ((0, 0), (0, 0), (right, left)))
            gcols = sliding_window_view(gp, k, axis=2).transpose(0, 2, 1, 3).reshape(B * L, Cout * k)
            wf = w.data[:, :, ::-1].transpose(0, 2, 1).reshape(Cout * k, Cin)
            gx = (gcols @ wf).reshape(B, L, Cin).transpose(0, 2, 1)
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv1d", inputs, np.ascontiguousarray(out), grad_fn)


def transposed_conv1d(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Stride-2, kernel-2 transposed convolution: ``B×Cin×L`` with ``Cin×Cout×2`` -> ``B×Cout×2L``.

    ``out[:, o, 2t + j] = sum_i x[:, i, t] * w[i, o, j] + b[o]``.
    """
    if x.data.ndim != 3 or w.data.ndim != 3 or w.shape[2] != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"transposed_conv1d: input {x.shape}, weight {w.shape}")
    B, Cin, L = x.shape
    Cout = w.shape[1]
    if b is not None and b.shape != (Cout,):
        raise ShapeMismatch(f"transposed_conv1d: bias shape {b.shape}")
    xm = x.data.transpose(0, 2, 1).reshape(B * L, Cin)
    wm = w.data.reshape(Cin, Cout * 2)
    out = (xm @ wm).reshape(B, L, Cout, 2).transpose(0, 2, 1, 3).reshape(B, Cout, 2 * L)
    if b is not None:
        out = out + b.data[None, :, None]

    def grad_fn(g):
        gm = g.reshape(B, Cout, L, 2).transpose(0, 2, 1, 3).reshape(B * L, Cout * 2)
        gx = (gm @ wm.T).reshape(B, L, Cin).transpose(0, 2, 1) if x.requires_grad else None
        gw = (xm.T @ gm).reshape(Cin, Cout, 2) if w.requires_grad else None
        gb = g.sum(axis=(0, 2)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("transposed_conv1d", inputs, np.ascontiguousarray(out), grad_fn)


def maxpool1d(x: Tensor) -> Tensor:
    """Window 2, stride 2; ties go to the left element."""
    if x.data.ndim != 3 or x.shape[2] % 2:
        raise ShapeMismatch(f"maxpool1d needs B×C×L with even L, got {x.shape}")
    B, C, L = x.shape
    pairs = x.data.reshape(B, C, L // 2, 2)
    right = pairs[..., 1] > pairs[..., 0]
    out = np.where(right, pairs[..., 1], pairs[..., 0])

    def grad_fn(g):
        gx = np.zeros((B, C, L // 2, 2))
        gx[..., 0] = np.where(right, 0.0, g)
        gx[..., 1] = np.where(right, g, 0.0)
        return (gx.reshape(B, C, L),)

    return _emit("maxpool1d", (x,), out, grad_fn)


# ---------------------------------------------------------------------------
# batch normalisation


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    # biased statistics of the most recent training batch
    batch_mean: Optional[np.ndarray] = None
    batch_var: Optional[np.ndarray] = None

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Per-channel normalisation over batch and length.

    In training mode the batch statistics are used and the running estimates
    move by ``momentum`` (the running variance uses the unbiased estimate).
    """
    if x.data.ndim != 3 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeMismatch(f"batchnorm1d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    B, C, L = x.shape
    n = B * L
    if train:
        if n < 2:
            raise ShapeMismatch("batchnorm1d in training mode needs at least two values per channel")
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        m = state.momentum
        state.batch_mean, state.batch_var = mean, var
        state.running_mean = (1 - m) * state.running_mean + m * mean
        state.running_var = (1 - m) * state.running_var + m * var * n / (n - 1)
    else:
        mean, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean[None, :, None]) * inv[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def grad_fn(g):
        gg = (g * xhat).sum(axis=(0, 2))
        gb = g.sum(axis=(0, 2))
        gxhat = g * gamma.data[None, :, None]
        if train:
            gx = inv[None, :, None] / n * (
                n * gxhat - gxhat.sum(axis=(0, 2))[None, :, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2))[None, :, None]
            )
        else:
            gx = gxhat * inv[None, :, None]
        return gx, gg, gb

    return _emit("batchnorm1d", (x, gamma, beta), out, grad_fn)


def custom(op: str, inputs: Sequence[Tensor], out_data, grad_fn) -> Tensor:
    """Record an operation with a hand-written backward."""
    return _emit(op, tuple(inputs), np.asarray(out_data, dtype=DTYPE), grad_fn)


# ---------------------------------------------------------------------------
# AdaDelta


@dataclass
class AdaDeltaState:
    rho: float = 0.5
    eps: float = 1e-6
    lr: float = 0.5
    sq_grad: list = field(default_factory=list)
    sq_update: list = field(default_factory=list)

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")


def adadelta_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdaDeltaState):
    """One AdaDelta update in place; ``state.lr`` scales the step."""
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.sq_grad:
        state.sq_grad = [np.zeros_like(p.data) for p in params]
        state.sq_update = [np.zeros_like(p.data) for p in params]
    rho, eps = state.rho, state.eps
    for k, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient {g.shape} for parameter {p.shape}")
        eg = state.sq_grad[k]
        ed = state.sq_update[k]
        eg *= rho
        eg += (1 - rho) * g * g
        delta = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        ed *= rho
        ed += (1 - rho) * delta * delta
        p.data += state.lr * delta
    return params


# ---------------------------------------------------------------------------
# finite-difference checking


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], n_coords: int = 100, h: float = 1e-5,
              seed: int = 0) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the scalar loss from the current parameter values.  Up to
    ``n_coords`` coordinates are sampled uniformly across all parameters.
    """
    for p in params:
        p.grad = None
    with Graph() as g:
        loss = fn()
    backward(g, loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        i = int(flat - offsets[k])
        view = params[k].data.reshape(-1)
        keep = view[i]
        view[i] = keep + h
        up = fn().item()
        view[i] = keep - h
        down = fn().item()
        view[i] = keep
        numeric = (up - down) / (2 * h)
        a = analytic[k].reshape(-1)[i]
        err = abs(a - numeric) / (abs(a) + 1e-8)
        if not math.isfinite(err):
            return math.inf
        worst = max(worst, err)
    return worst

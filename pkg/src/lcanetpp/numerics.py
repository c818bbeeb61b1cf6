"""Dense tensor substrate: convolution, pooling, batch norm, affine, loss, SGD.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout. Every operation
keeps the dtype of its inputs, so the library runs in float32 while the tests
drive the same code in float64 for finite-difference checks.

Differentiation is explicit. Wrap arrays in :class:`Var`, create leaves with
:meth:`GradTape.watch`, compose the ``Var`` operations below, then call
:meth:`GradTape.gradient` once. Operations whose inputs do not depend on any
watched leaf are not recorded at all, which keeps constant sub-graphs (frozen
dictionaries, inputs that need no gradient) off the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError, TapeError

DTYPE = np.float32


# ---------------------------------------------------------------------------
# array-level kernels
# ---------------------------------------------------------------------------


def _check_4d(name: str, a: np.ndarray) -> None:
    if a.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (NCHW), got shape {a.shape}")


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Strided view B x C x H' x W' x kh x kw over the zero-padded input."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if kh > x.shape[2] or kw > x.shape[3]:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {x.shape[2]}x{x.shape[3]}")
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlate ``x`` (B x Cin x H x W) with ``kernel`` (Cout x Cin x kh x kw).

    Output spatial size is ``(H + 2*pad - kh) // stride + 1`` (same for W).
    """
    _check_4d("input", x)
    _check_4d("kernel", kernel)
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernel expects {kernel.shape[1]} "
            f"(input {x.shape}, kernel {kernel.shape})")
    win = _windows(x, kernel.shape[2], kernel.shape[3], stride, pad)
    out = np.tensordot(win, kernel, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_kernel_grad(x: np.ndarray, grad_out: np.ndarray, kernel_shape: Sequence[int],
                       stride: int = 1, pad: int = 0) -> np.ndarray:
    """Gradient of ``<conv2d(x, K), grad_out>`` with respect to ``K``."""
    win = _windows(x, kernel_shape[2], kernel_shape[3], stride, pad)
    if win.shape[2:4] != grad_out.shape[2:4]:
        raise ShapeError(f"grad_out {grad_out.shape} does not match conv output {win.shape[:4]}")
    return np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))


def conv2d_transpose(code: np.ndarray, kernel: np.ndarray, stride: int = 1, pad: int = 0,
                     out_hw: Optional[tuple[int, int]] = None) -> np.ndarray:
    """Adjoint of :func:`conv2d` with respect to its input.

    ``code`` is B x Cout x H' x W'; the result is B x Cin x H x W. Because the
    forward size uses a floor, several H map to the same H'; pass ``out_hw`` to
    pick one, otherwise the smallest consistent size is used.
    """
    _check_4d("code", code)
    _check_4d("kernel", kernel)
    cout, cin, kh, kw = kernel.shape
    if code.shape[1] != cout:
        raise ShapeError(f"code has {code.shape[1]} channels, kernel has {cout} outputs")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    hq, wq = code.shape[2:]
    default_hw = ((hq - 1) * stride + kh - 2 * pad, (wq - 1) * stride + kw - 2 * pad)
    if out_hw is None:
        out_hw = default_hw
    out_h, out_w = out_hw
    if out_h <= 0 or out_w <= 0 or conv_output_hw(out_h, out_w, kh, kw, stride, pad) != (hq, wq):
        raise ShapeError(
            f"output size {out_hw} inconsistent with code {code.shape[2:]} under "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}")

    if stride == 1 and tuple(out_hw) == default_hw and pad <= kh - 1 and pad <= kw - 1:
        flipped = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        if kh - 1 - pad == kw - 1 - pad:
            return conv2d(code, flipped, 1, kh - 1 - pad)
        padded = np.pad(code, ((0, 0), (0, 0), (kh - 1 - pad,) * 2, (kw - 1 - pad,) * 2))
        return conv2d(padded, flipped, 1, 0)

    cols = np.tensordot(code, kernel, axes=([1], [0]))  # B, H', W', Cin, kh, kw
    hp, wp = out_h + 2 * pad, out_w + 2 * pad
    buf = np.zeros((code.shape[0], cin, hp, wp), dtype=np.result_type(code, kernel))
    for i in range(kh):
        for j in range(kw):
            buf[:, :, i:i + stride * (hq - 1) + 1:stride, j:j + stride * (wq - 1) + 1:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(buf[:, :, pad:pad + out_h, pad:pad + out_w])


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 non-overlapping max pool.

    Odd spatial sizes are padded with -inf at the bottom/right. Returns the
    pooled array and, per output cell, the index (0..3, row-major) of the
    winning window element. Ties go to the first index in scan order.
    """
    _check_4d("input", x)
    b, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
    hh, ww = x.shape[2] // 2, x.shape[3] // 2
    blocks = x.reshape(b, c, hh, 2, ww, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, hh, ww, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2_backward(grad_out: np.ndarray, argmax: np.ndarray, in_shape: Sequence[int]) -> np.ndarray:
    b, c, h, w = in_shape
    hh, ww = grad_out.shape[2:]
    blocks = np.zeros((b, c, hh, ww, 4), dtype=grad_out.dtype)
    np.put_along_axis(blocks, argmax[..., None], grad_out[..., None], axis=-1)
    full = blocks.reshape(b, c, hh, ww, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * hh, 2 * ww)
    return np.ascontiguousarray(full[:, :, :h, :w])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over the batch and its gradient w.r.t. logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsumexp - z[rows, labels]))
    if not np.isfinite(loss):
        raise NumericError("cross-entropy loss is not finite")
    grad = softmax(logits)
    grad[rows, labels] -= 1
    return loss, grad / n


# ---------------------------------------------------------------------------
# reverse-mode tape
# ---------------------------------------------------------------------------


class Var:
    """An array participating in (possibly) recorded computation."""

    __slots__ = ("value", "tape", "node_id")

    def __init__(self, value, tape: Optional["GradTape"] = None, node_id: int = -1):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value)
        self.tape = tape
        self.node_id = node_id

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, s: float):
        return scale(self, s)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Var(shape={self.value.shape}, tracked={self.tracked})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


@dataclass
class _Record:
    out_id: int
    parents: tuple
    backward: Callable


class GradTape:
    """Ordered record of differentiable operations for one forward pass.

    A tape can be replayed exactly once; gradients accumulate additively where
    a value feeds several operations.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._next_id = 0
        self._consumed = False

    def __len__(self):
        return len(self._records)

    def watch(self, value) -> Var:
        """Register ``value`` as a leaf whose gradient can be requested."""
        self._check_open()
        v = Var(value, self, self._next_id)
        self._next_id += 1
        return v

    def _check_open(self):
        if self._consumed:
            raise TapeError("tape has already been consumed by gradient()")

    def _push(self, value: np.ndarray, parents: tuple, backward: Callable) -> Var:
        self._check_open()
        out = Var(value, self, self._next_id)
        self._next_id += 1
        self._records.append(_Record(out.node_id, parents, backward))
        return out

    def gradient(self, loss: Var, sources: Sequence[Var]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` with respect to each of ``sources``.

        Sources the loss does not depend on receive zero arrays.
        """
        self._check_open()
        if loss.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.value)}
        for rec in reversed(self._records):
            g = grads.pop(rec.out_id, None)
            if g is None:
                continue
            needs = tuple(p.tape is self for p in rec.parents)
            parent_grads = rec.backward(g, needs)
            for p, need, pg in zip(rec.parents, needs, parent_grads):
                if not need or pg is None:
                    continue
                prev = grads.get(p.node_id)
                grads[p.node_id] = pg if prev is None else prev + pg
        out = []
        for s in sources:
            g = grads.get(s.node_id) if s.tape is self else None
            out.append(np.zeros_like(s.value) if g is None else g)
        self._records.clear()
        return out


def _record(value: np.ndarray, parents: tuple, backward: Callable) -> Var:
    tape = next((p.tape for p in parents if p.tape is not None), None)
    if tape is None:
        return Var(value)
    return tape._push(value, parents, backward)


# ---------------------------------------------------------------------------
# differentiable operations on Var
# ---------------------------------------------------------------------------


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    return _record(a.value + b.value, (a, b), lambda g, needs: (g, g))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    return _record(a.value - b.value, (a, b), lambda g, needs: (g, -g))


def scale(a, s: float) -> Var:
    a = as_var(a)
    s = a.value.dtype.type(s)
    return _record(a.value * s, (a,), lambda g, needs: (g * s,))


def vdot(a, b) -> Var:
    """Full inner product of two equally shaped arrays, as a scalar Var."""
    a, b = as_var(a), as_var(b)
    if a.shape != b.shape:
        raise ShapeError(f"vdot: shapes {a.shape} and {b.shape} differ")
    out = np.asarray(np.vdot(a.value, b.value), dtype=np.result_type(a.value, b.value))
    return _record(out, (a, b), lambda g, needs: (g * b.value, g * a.value))


def reshape(a, shape) -> Var:
    a = as_var(a)
    orig = a.shape
    return _record(a.value.reshape(shape), (a,), lambda g, needs: (g.reshape(orig),))


def relu(a) -> Var:
    a = as_var(a)
    mask = a.value > 0
    return _record(np.where(mask, a.value, 0).astype(a.value.dtype), (a,),
                   lambda g, needs: (g * mask,))


def soft_threshold(m, lam: float, nonneg: bool = True) -> Var:
    """Shrink toward zero by ``lam``; subgradient 0 in the dead zone, 1 outside."""
    m = as_var(m)
    if lam < 0:
        raise ValueError(f"threshold must be >= 0, got {lam}")
    v = m.value
    lam = v.dtype.type(lam)
    if nonneg:
        mask = v > lam
        out = np.where(mask, v - lam, 0).astype(v.dtype)
    else:
        mask = np.abs(v) > lam
        out = np.where(mask, v - np.sign(v) * lam, 0).astype(v.dtype)
    return _record(out, (m,), lambda g, needs: (g * mask,))


def conv(x, kernel, stride: int = 1, pad: int = 0) -> Var:
    x, kernel = as_var(x), as_var(kernel)
    out = conv2d(x.value, kernel.value, stride, pad)

    def backward(g, needs):
        gx = conv2d_transpose(g, kernel.value, stride, pad, x.shape[2:]) if needs[0] else None
        gk = conv2d_kernel_grad(x.value, g, kernel.shape, stride, pad) if needs[1] else None
        return gx, gk

    return _record(out, (x, kernel), backward)


def conv_transpose(code, kernel, stride: int = 1, pad: int = 0,
                   out_hw: Optional[tuple[int, int]] = None) -> Var:
    code, kernel = as_var(code), as_var(kernel)
    out = conv2d_transpose(code.value, kernel.value, stride, pad, out_hw)

    def backward(g, needs):
        gc = conv2d(g, kernel.value, stride, pad) if needs[0] else None
        # <convT(c, K), g> = <c, conv(g, K)>, so dK = kernel_grad(g, c)
        gk = conv2d_kernel_grad(g, code.value, kernel.shape, stride, pad) if needs[1] else None
        return gc, gk

    return _record(out, (code, kernel), backward)


def pool(x) -> Var:
    x = as_var(x)
    out, arg = maxpool2(x.value)
    in_shape = x.shape
    return _record(out, (x,), lambda g, needs: (maxpool2_backward(g, arg, in_shape),))


def affine(x, weight, bias) -> Var:
    """``x @ weight.T + bias`` with x B x N, weight K x N, bias K."""
    x, weight, bias = as_var(x), as_var(weight), as_var(bias)
    if x.value.ndim != 2 or weight.value.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"affine: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"affine: bias {bias.shape} does not match weight {weight.shape}")
    out = x.value @ weight.value.T + bias.value

    def backward(g, needs):
        return (g @ weight.value if needs[0] else None,
                g.T @ x.value if needs[1] else None,
                g.sum(axis=0) if needs[2] else None)

    return _record(out, (x, weight, bias), backward)


def cross_entropy(logits, labels) -> Var:
    logits = as_var(logits)
    loss, grad = softmax_cross_entropy(logits.value, labels)
    return _record(np.asarray(loss, dtype=logits.value.dtype), (logits,),
                   lambda g, needs: (g * grad,))


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=DTYPE) -> "BatchNormState":
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype))


def batchnorm(x, gamma, beta, state: BatchNormState, train: bool) -> Var:
    """Per-channel batch normalization over (B, H, W).

    In train mode the batch statistics normalize the input and the running
    statistics of ``state`` are replaced by their exponential average (the
    running variance uses the unbiased batch estimate). Eval mode reads the
    running statistics only.
    """
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)
    _check_4d("input", x.value)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta must have shape ({c},)")
    v = x.value
    dt = v.dtype.type
    axes = (0, 2, 3)
    if train:
        if v.shape[0] < 2:
            raise ShapeError("batchnorm in train mode needs a batch of at least 2")
        mean = v.mean(axis=axes)
        var = v.var(axis=axes)
        count = v.shape[0] * v.shape[2] * v.shape[3]
        unbiased = var * (count / max(count - 1, 1))
        mom = dt(state.momentum)
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(v.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(v.dtype)
    else:
        mean = state.running_mean.astype(v.dtype)
        var = state.running_var.astype(v.dtype)
    inv_std = (1 / np.sqrt(var + dt(state.eps))).astype(v.dtype)
    xhat = (v - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.value[None, :, None, None] * xhat + beta.value[None, :, None, None]

    def backward(g, needs):
        dgamma = (g * xhat).sum(axis=axes) if needs[1] else None
        dbeta = g.sum(axis=axes) if needs[2] else None
        dx = None
        if needs[0]:
            gx = g * gamma.value[None, :, None, None]
            if train:
                gmean = gx.mean(axis=axes, keepdims=True)
                gxmean = (gx * xhat).mean(axis=axes, keepdims=True)
                dx = (gx - gmean - xhat * gxmean) * inv_std[None, :, None, None]
            else:
                dx = gx * inv_std[None, :, None, None]
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_momentum_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                      state: OptimizerState) -> dict[str, np.ndarray]:
    """Heavy-ball SGD: ``v <- momentum*v + grad``; ``p <- p - lr*v``.

    Returns a new parameter dict; the velocities in ``state`` are replaced.
    Parameters without an entry in ``grads`` pass through untouched.
    """
    new = dict(params)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        dt = p.dtype.type
        v = state.velocity.get(name)
        v = g.astype(p.dtype) if v is None else dt(state.momentum) * v + g.astype(p.dtype)
        state.velocity[name] = v
        new[name] = p - dt(state.learning_rate) * v
    return new

"""Dense float64 tensors with reverse-mode differentiation.

Only the operations the classification pipeline needs are provided:
convolution, batch normalization, ReLU, pooling, matrix products,
reductions, softmax, sigmoid and a fused sigmoid/BCE loss.

Every operation returns a new :class:`Tensor`. When at least one input has
``requires_grad`` set, the result remembers its parents and a closure that
maps the output gradient to input gradients. :meth:`Tensor.backward` walks
that recording in reverse topological order.

Calling ``backward`` more than once on the same recording is allowed and
idempotent: gradients are recomputed from scratch each time and written to
``.grad`` (overwriting, never accumulating).
"""

from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1

# Decisions taken at non-differentiable points (ReLU masks, max selections)
# are logged here while a track_kinks() block is active.
_kink_log: list[int] | None = None


@contextmanager
def track_kinks():
    """Collect a fingerprint of every branch decision made inside the block."""
    global _kink_log
    previous, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = previous


def note_kink(decision: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(hash(np.ascontiguousarray(decision).tobytes()))


class Tensor:
    """An n-dimensional float64 array plus autograd bookkeeping."""

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self, params: Iterable["Tensor"] | None = None) -> "GradientRecord":
        return backward(self, params)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class GradientRecord(dict):
    """Mapping ``Tensor -> gradient array`` produced by one backward pass.

    Keys compare by identity. Parameters that were requested but did not
    take part in the forward computation map to exact zeros.
    """

    def by_name(self) -> dict[str, np.ndarray]:
        return {t.name: g for t, g in self.items() if t.name is not None}


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> GradientRecord:
    """Reverse-mode gradients of a scalar ``loss``.

    If ``params`` is given, the record contains exactly those tensors;
    otherwise every ``requires_grad`` leaf reachable from ``loss``.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is detached: no parameter with requires_grad feeds it")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: list[Tensor] = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            leaves.append(node)
            grads[id(node)] = g if g is not None else np.zeros_like(node.data)
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    record = GradientRecord()
    wanted = list(params) if params is not None else leaves
    for t in wanted:
        g = grads.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g
        record[t] = g
    return record


# -- elementwise and shape ops ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), fn)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting; both operands >= 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), fn)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = math.prod(x.shape[a] for a in axes)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), fn)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)

    def fn(g):
        return (g.reshape(x.shape),)

    return _result(x.data.reshape(shape), (x,), fn)


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    inverse = None if axes is None else np.argsort(axes)

    def fn(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(x.data, axes), (x,), fn)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    note_kink(mask)

    def fn(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0), (x,), fn)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)

    def fn(g):
        return (g * y * (1.0 - y),)

    return _result(y, (x,), fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), fn)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy over every slot, evaluated in log-sum-exp form."""
    logits = as_tensor(logits)
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ValueError(f"logits {logits.shape} and targets {y.shape} differ in shape")
    z = logits.data
    if not np.all(np.isfinite(z)):
        raise ValueError("bce_with_logits received non-finite logits")
    per_slot = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def fn(g):
        return (g * (_sigmoid(z) - y) / n,)

    return _result(np.asarray(per_slot.mean()), (logits,), fn)


# -- convolution -----------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``N x Cin x H x W`` input with ``Cout x Cin x kh x kw``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} has {x.shape[1]} channels, "
            f"kernel {kernel.shape} expects {kernel.shape[1]}"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    n, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, Ho, Wo, Cin*kh*kw) patch matrix, reused by backward
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wmat = kernel.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gk = (gmat.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gk

    return _result(np.ascontiguousarray(out), (x, kernel), fn)


# -- batch normalization ---------------------------------------------------


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPSILON,
) -> Tensor:
    """Per-channel batch normalization over ``N x C x H x W``.

    In training mode the batch statistics normalize the input and the
    running buffers are updated in place (the running variance uses the
    unbiased estimate). In eval mode the running buffers are read only.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError(f"batchnorm epsilon must be positive, got {eps}")
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError(f"batchnorm shapes disagree: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * count / (count - 1) if count > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.copy()
        var = running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def fn(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            gx = (inv_std[None, :, None, None] / count) * (
                count * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), fn)


# -- pooling ---------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def pool2d(x: Tensor, mode: str, window=2, stride=None, padding: int = 0) -> Tensor:
    """Max, average or global-average pooling over the last two axes.

    ``max`` pads with -inf and resolves ties to the lowest row-major index
    within the window; ``avg`` pads with zeros and divides by the full
    window size. ``global_avg`` ignores ``window``/``stride`` and returns
    ``N x C x 1 x 1``.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"pool2d expects N x C x H x W, got {x.shape}")
    if mode == "global_avg":
        return mean(x, axis=(2, 3), keepdims=True)
    if mode not in ("max", "avg"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    n, c, h, w = x.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"pool window {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    fill = -np.inf if mode == "max" else 0.0
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill)
    ho = (h + 2 * padding - kh) // sh + 1
    wo = (w + 2 * padding - kw) // sw + 1
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    flat = windows.reshape(n, c, ho, wo, kh * kw)

    if mode == "max":
        arg = flat.argmax(axis=-1)
        note_kink(arg)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

        def fn(g):
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    hit = arg == i * kw + j
                    gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += g * hit
            return (gxp[:, :, padding : padding + h, padding : padding + w],)

        return _result(out, (x,), fn)

    area = kh * kw
    out = flat.sum(axis=-1) / area

    def fn(g):
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += g / area
        return (gxp[:, :, padding : padding + h, padding : padding + w],)

    return _result(out, (x,), fn)


# -- gradient checking -----------------------------------------------------


@dataclass
class GradCheckEntry:
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float
    max_rel_error: float
    passed: bool
    failure: str | None = None
    worst: GradCheckEntry | None = field(default=None)
    skipped_kinks: int = 0

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = (
            f"grad_check {status}: {len(self.entries)} entries, max rel error {self.max_rel_error:.3e} "
            f"(tol {self.tolerance:g}), {self.skipped_kinks} kink-straddling draws skipped"
        )
        if self.failure:
            text += f"; {self.failure}"
        return text


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients from dominating."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    n_samples: int = 50,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must rebuild the scalar loss from the current parameter
    values each time it is called. Parameter entries are drawn uniformly
    without replacement until ``n_samples`` have been checked. A draw whose
    +/- ``step`` perturbation flips any ReLU mask or max selection straddles
    a kink, where central differences are meaningless; it is counted in
    ``skipped_kinks`` and replaced by another draw.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise ValueError(f"parameter {p.name!r} is not finite")
    with track_kinks() as base_kinks:
        loss = loss_fn()
    record = backward(loss, params)

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    draws = np.random.default_rng(seed).permutation(total)

    entries: list[GradCheckEntry] = []
    failure = None
    skipped = 0
    for flat in draws:
        if len(entries) >= n_samples:
            break
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[k]
        index = np.unravel_index(int(flat - offsets[k]), p.shape)
        label = p.name or f"param[{k}]"
        original = p.data[index]
        try:
            p.data[index] = original + step
            with track_kinks() as plus_kinks:
                plus = loss_fn().item()
            p.data[index] = original - step
            with track_kinks() as minus_kinks:
                minus = loss_fn().item()
        finally:
            p.data[index] = original
        if not (math.isfinite(plus) and math.isfinite(minus)):
            failure = f"non-finite loss perturbing {label}{tuple(int(i) for i in index)}"
            break
        if plus_kinks != base_kinks or minus_kinks != base_kinks:
            skipped += 1
            continue
        numeric = (plus - minus) / (2 * step)
        analytic = float(record[p][index])
        entries.append(
            GradCheckEntry(label, tuple(int(i) for i in index), analytic, numeric, relative_error(analytic, numeric, floor))
        )

    worst = max(entries, key=lambda e: e.rel_error, default=None)
    max_err = worst.rel_error if worst else 0.0
    passed = failure is None and max_err <= tolerance
    return GradCheckReport(entries, tolerance, max_err, passed, failure, worst, skipped)

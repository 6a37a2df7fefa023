"""Minimal dense tensor engine with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
and touching at least one tensor with ``requires_grad`` are appended to the
tape.  :func:`backward` walks the tape once in reverse and returns gradients
for the named parameters.  Outside a tape nothing is recorded, which is the
cheap path used for evaluation.

All data is float64.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    # make ``ndarray <op> Tensor`` dispatch to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def Parameter(data, name: str) -> Tensor:
    """A named leaf tensor that requires gradients."""
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    kind: str


@dataclass
class Tape:
    """Append-only record of differentiable ops in execution order."""

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


class no_record:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        self._saved = getattr(_state, "stack", None)
        _state.stack = []
        return self

    def __exit__(self, *exc):
        _state.stack = self._saved


def _check_finite(arr: np.ndarray, kind: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {kind}")


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp, kind: str) -> Tensor:
    _check_finite(data, kind)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.name = None
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.nodes.append(_Node(out, inputs, vjp, kind))
    return out


class _SliceGrad:
    """Gradient that is zero except on ``index``; densified lazily in backward."""

    __slots__ = ("index", "value", "shape")

    def __init__(self, index, value, shape):
        self.index, self.value, self.shape = index, value, shape

    def dense(self) -> np.ndarray:
        full = np.zeros(self.shape, dtype=DTYPE)
        full[self.index] = self.value
        return full


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as err:
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from err


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
                 "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form never overflows
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (out > 0),), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _make(out, (a,), lambda g: (g / x,), "log")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ----------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy semantics; ``b`` may be 2-D and shared across a batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul: operands must be at least 2-D")

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return _make(ad @ bd, (a, b), vjp, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape: {src} -> {shape}") from err
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index) -> Tensor:
    """Basic (slice / integer) indexing."""
    a = as_tensor(a)
    src_shape = a.shape

    return _make(np.array(a.data[index], dtype=DTYPE), (a,),
                 lambda g: (_SliceGrad(index, g, src_shape),), "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {[t.shape for t in ts]}") from err
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as err:
        raise ShapeError(f"stack: {[t.shape for t in ts]}") from err
    n = len(ts)
    return _make(out, ts,
                 lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis)),
                 "stack")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis, keepdims) * (1.0 / count)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array ``ids``."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding id out of range [0, {table.shape[0]})")
    src = table.shape

    def vjp(g):
        full = np.zeros(src, dtype=DTYPE)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], (table,), vjp, "embedding")


# ----------------------------------------------------------------------------
# layers with hand-written vector-Jacobian products


def conv2d(x, kernel, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D cross-correlation, channels last.

    x: (B, H, W, Cin); kernel: (kh, kw, Cin, Cout).  Zero padding of
    ``padding`` cells on both sides of each spatial axis.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[3] != kernel.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} vs kernel {kernel.shape}")
    sh, sw = stride
    ph, pw = padding
    kh, kw, cin, cout = kernel.shape
    B, H, W, _ = x.shape
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {kernel.shape}")
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x.data
    cols = np.empty((B, Ho, Wo, kh, kw, cin), dtype=DTYPE)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, :, u, v, :] = xp[:, u:u + sh * (Ho - 1) + 1:sh, v:v + sw * (Wo - 1) + 1:sw, :]
    cols2 = cols.reshape(B * Ho * Wo, kh * kw * cin)
    w2 = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols2 @ w2).reshape(B, Ho, Wo, cout)

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(kernel.shape)
        gcols = (g2 @ w2.T).reshape(B, Ho, Wo, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                gxp[:, u:u + sh * (Ho - 1) + 1:sh, v:v + sw * (Wo - 1) + 1:sw, :] += gcols[:, :, :, u, v, :]
        gx = gxp[:, ph:ph + H, pw:pw + W, :] if (ph or pw) else gxp
        return gx, gw

    return _make(out, (x, kernel), vjp, "conv2d")


def _channel_sum(a: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # gemv is far faster than a strided axis-0 reduction
    return weights @ a.reshape(weights.shape[0], -1)


def batchnorm(x, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, mask=None, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Normalize over every axis but the last (channels).

    In training mode the batch statistics are taken over positions where
    ``mask`` (broadcastable to ``x.shape[:-1]``) is true, and the running
    buffers are updated in place with an exponential moving average.
    """
    x = as_tensor(x)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm: {C} channels vs gamma {gamma.shape}")
    xd = x.data
    gd = gamma.data
    ones = np.ones(xd.size // C)
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean) * inv

        def vjp_eval(g):
            return g * (gd * inv), _channel_sum(g * xhat, ones), _channel_sum(g, ones)

        return _make(xhat * gd + beta.data, (x, gamma, beta), vjp_eval, "batchnorm")

    if mask is None or np.all(mask):
        w, m = ones, 1.0
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=DTYPE), xd.shape[:-1])
        w = m.reshape(-1)
        m = m[..., None]
    n = w.sum()
    if n < 1:
        raise ShapeError("batchnorm: no unmasked positions")
    mu = _channel_sum(xd, w) / n
    centered = xd - mu
    var = _channel_sum(centered * centered, w) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * var

    def vjp_train(g):
        gxhat = g * gd
        # masked outputs still depend on the batch statistics, so sum over every position
        s1 = _channel_sum(gxhat, ones) / n
        s2 = _channel_sum(gxhat * xhat, ones) / n
        gx = inv * (gxhat - m * (s1 + xhat * s2))
        return gx, _channel_sum(g * xhat, ones), _channel_sum(g, ones)

    return _make(xhat * gd + beta.data, (x, gamma, beta), vjp_train, "batchnorm")


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: identity in eval mode, scaled by 1/(1-rate) in training."""
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def masked_softmax(logits, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with masked positions forced to exactly zero."""
    logits = as_tensor(logits)
    z = logits.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("masked_softmax: a row has every position masked")
        z = np.where(mask, z, -np.inf)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (logits,), vjp, "masked_softmax")


# ----------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[str, np.ndarray]:
    """Propagate d(loss) back through ``tape``.

    Returns ``{name: gradient}`` for ``params`` (default: every named leaf seen
    on the tape).  Parameters the loss does not reach get zero gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    # ids whose gradient buffer was allocated here and may be updated in place
    owned: set[int] = set()
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        owned.discard(id(node.out))
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            prev = grads.get(key)
            if prev is None:
                if isinstance(gi, _SliceGrad):
                    gi = gi.dense()
                    owned.add(key)
                grads[key] = gi
            else:
                if key not in owned:
                    # np.array (not .copy()) so 0-d numpy scalars become writable arrays
                    prev = np.array(prev, dtype=DTYPE)
                    owned.add(key)
                if isinstance(gi, _SliceGrad):
                    prev[gi.index] += gi.value
                else:
                    prev += gi
                grads[key] = prev
            if inp.name is not None:
                leaves[key] = inp
    if params is None:
        params = leaves.values()
    result = {}
    for p in params:
        g = grads.get(id(p))
        result[p.name] = np.zeros(p.shape, dtype=DTYPE) if g is None else np.asarray(g, dtype=DTYPE)
    return result


def gradients(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> tuple[float, dict[str, np.ndarray]]:
    """Run ``fn`` under a fresh tape and return (loss value, gradients)."""
    with Tape() as tape:
        loss = fn()
    return loss.item(), backward(tape, loss, params)


# ----------------------------------------------------------------------------
# finite-difference gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: dict[str, float]
    tolerance: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(fn: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[Tensor],
               step: float = 1e-5, tolerance: float = 1e-4, max_per_input: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn(inputs)`` with central differences.

    Error per element is ``|analytic - numeric| / max(1, |numeric|)``.  With
    ``max_per_input`` only that many randomly chosen elements of each input
    are perturbed.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    inputs = list(inputs)
    for i, t in enumerate(inputs):
        t.requires_grad = True
        if t.name is None:
            t.name = f"input{i}"
    with Tape() as tape:
        loss = fn(inputs)
    if loss.size != 1:
        raise ShapeError("grad_check: function must return a scalar")
    analytic = backward(tape, loss, inputs)
    with no_record():
        base = fn(inputs).item()
    if base != loss.item():
        raise RuntimeError("grad_check: function is not deterministic (disable or seed dropout)")

    rng = rng or np.random.default_rng(0)
    per_input: dict[str, float] = {}
    checked = 0
    with no_record():
        for t in inputs:
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_input is not None and flat.size > max_per_input:
                idx = rng.choice(flat.size, size=max_per_input, replace=False)
            worst = 0.0
            ga = analytic[t.name].reshape(-1)
            for j in idx:
                orig = flat[j]
                flat[j] = orig + step
                up = fn(inputs).item()
                flat[j] = orig - step
                down = fn(inputs).item()
                flat[j] = orig
                numeric = (up - down) / (2.0 * step)
                err = abs(ga[j] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
                checked += 1
            per_input[t.name] = worst
    return GradCheckReport(max(per_input.values(), default=0.0), per_input, tolerance, checked)

"""Minimal dense-tensor engine with reverse-mode differentiation.

Values are 64-bit numpy arrays. A Tape records operation nodes during the
forward pass in creation order (which is a topological order); backward walks
that list in reverse, accumulating vector-Jacobian products. Every composite
used by the classifier head is checkable against central finite differences
via grad_check.

Tensors are value-like; a Tape is single-threaded. Independent tapes may run
concurrently and reduce Parameter gradients by summation.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "NumericsError",
    "affine",
    "matmul",
    "matvec",
    "add",
    "mul",
    "concat",
    "gather",
    "scatter_sum",
    "broadcast_batch",
    "expand_dims",
    "leaky_rect",
    "masked_softmax",
    "dropout",
    "bce_elements",
    "bce_with_logits",
    "cross_entropy",
    "maximum",
    "mean",
    "tsum",
    "AdamW",
    "cosine_lr",
    "grad_check",
]


class NumericsError(ValueError):
    pass


class Tensor:
    """Immutable-by-convention float64 array plus backward bookkeeping."""

    __slots__ = ("data", "grad", "_vjps")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        # list of (parent Tensor, vjp callable) filled in by recording ops
        self._vjps: list[tuple["Tensor", Callable[[np.ndarray], np.ndarray]]] = []

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Parameter:
    """Named learnable leaf; gradient has the same shape and accumulates."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


_TAPES: list["Tape"] = []


class Tape:
    """Records op nodes in topological (creation) order for reverse traversal."""

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._watched: dict[int, tuple[Parameter, Tensor]] = {}

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self

    def watch(self, p: Parameter) -> Tensor:
        entry = self._watched.get(id(p))
        if entry is None:
            leaf = Tensor(p.data)
            self._nodes.append(leaf)
            self._watched[id(p)] = (p, leaf)
            return leaf
        return entry[1]

    def record(self, out: Tensor, vjps) -> Tensor:
        out._vjps = list(vjps)
        self._nodes.append(out)
        return out

    def backward(self, loss: Tensor) -> None:
        """Accumulate d loss / d p into every watched Parameter's .grad."""
        if loss.data.size != 1:
            raise NumericsError(f"loss must be scalar, got shape {loss.data.shape}")
        for node in self._nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node._vjps:
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += contrib
        for p, leaf in self._watched.values():
            if leaf.grad is not None:
                p.grad += leaf.grad


def _active() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        tape = _active()
        return tape.watch(x) if tape is not None else Tensor(x.data)
    return Tensor(x)


def _emit(data: np.ndarray, vjps) -> Tensor:
    out = Tensor(data)
    tape = _active()
    if tape is not None:
        tape.record(out, vjps)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _emit(
        a.data + b.data,
        [
            (a, lambda g, sa=a.data.shape: _unbroadcast(g, sa)),
            (b, lambda g, sb=b.data.shape: _unbroadcast(g, sb)),
        ],
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _emit(
        a.data * b.data,
        [
            (a, lambda g, bd=b.data, sa=a.data.shape: _unbroadcast(g * bd, sa)),
            (b, lambda g, ad=a.data, sb=b.data.shape: _unbroadcast(g * ad, sb)),
        ],
    )


def matmul(x, w) -> Tensor:
    """Batched (..., n, k) @ (k, m)."""
    x, w = _lift(x), _lift(w)
    if x.data.shape[-1] != w.data.shape[0]:
        raise NumericsError(
            f"matmul inner dims disagree: {x.data.shape} @ {w.data.shape}"
        )

    def vjp_x(g, wd=w.data):
        return g @ wd.T

    def vjp_w(g, xd=x.data):
        x2 = xd.reshape(-1, xd.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        return x2.T @ g2

    return _emit(x.data @ w.data, [(x, vjp_x), (w, vjp_w)])


def matvec(x, v) -> Tensor:
    """(..., n, d) @ (d,) -> (..., n)."""
    x, v = _lift(x), _lift(v)
    if x.data.shape[-1] != v.data.shape[0]:
        raise NumericsError(f"matvec dims disagree: {x.data.shape} . {v.data.shape}")

    def vjp_x(g, vd=v.data):
        return g[..., None] * vd

    def vjp_v(g, xd=x.data):
        return xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1)

    return _emit(x.data @ v.data, [(x, vjp_x), (v, vjp_v)])


def affine(x, w, b) -> Tensor:
    """y = x @ w + b, recorded on the active tape."""
    return add(matmul(x, w), b)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [_lift(p) for p in parts]
    datas = [p.data for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    vjps = []
    for i, p in enumerate(parts):
        def vjp(g, lo=offsets[i], hi=offsets[i + 1]):
            idx = [slice(None)] * g.ndim
            idx[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            return g[tuple(idx)]

        vjps.append((p, vjp))
    return _emit(out, vjps)


def gather(x, indices, axis: int = -2) -> Tensor:
    """Select rows (axis=-2) or entries (axis=-1) by integer index array."""
    x = _lift(x)
    idx = np.asarray(indices, dtype=np.intp)
    if axis not in (-1, -2):
        raise NumericsError("gather supports axis -1 and -2 only")
    taken = np.take(x.data, idx, axis=x.data.ndim + axis)

    def vjp(g, shape=x.data.shape, ax=x.data.ndim + axis):
        out = np.zeros(shape)
        moved = np.moveaxis(out, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax if axis == -2 else g.ndim - 1, 0))
        return out

    return _emit(taken, [(x, vjp)])


def scatter_sum(x, indices, num_segments: int) -> Tensor:
    """Sum rows of (..., E, d) into (..., num_segments, d) by destination index."""
    x = _lift(x)
    idx = np.asarray(indices, dtype=np.intp)
    if x.data.shape[-2] != idx.shape[0]:
        raise NumericsError("scatter_sum: index length must match row count")
    out_shape = x.data.shape[:-2] + (num_segments, x.data.shape[-1])
    out = np.zeros(out_shape)
    np.add.at(np.moveaxis(out, -2, 0), idx, np.moveaxis(x.data, -2, 0))

    def vjp(g):
        return np.take(g, idx, axis=g.ndim - 2)

    return _emit(out, [(x, vjp)])


def broadcast_batch(x, batch: int) -> Tensor:
    """Prepend a batch axis of size `batch`; backward sums over it."""
    x = _lift(x)
    out = np.broadcast_to(x.data, (batch,) + x.data.shape).copy()
    return _emit(out, [(x, lambda g: g.sum(axis=0))])


def expand_dims(x, axis: int) -> Tensor:
    x = _lift(x)
    return _emit(np.expand_dims(x.data, axis), [(x, lambda g: np.squeeze(g, axis=axis))])


def leaky_rect(x, slope: float = 0.2) -> Tensor:
    """Elementwise max(x, slope*x) for slope in (0, 1)."""
    if not (0.0 < slope < 1.0):
        raise NumericsError(f"slope must be in (0,1), got {slope}")
    x = _lift(x)
    factor = np.where(x.data >= 0.0, 1.0, slope)
    return _emit(x.data * factor, [(x, lambda g, f=factor: g * f)])


def masked_softmax(scores, mask) -> Tensor:
    """Softmax over the `mask` index set of the last axis; zero elsewhere.

    Stabilized by max subtraction. Entries outside the mask receive exactly 0
    and no gradient.
    """
    scores = _lift(scores)
    idx = np.asarray(mask, dtype=np.intp)
    if idx.size == 0:
        raise NumericsError("masked_softmax: mask must be non-empty")
    sel = np.take(scores.data, idx, axis=-1)
    m = sel.max(axis=-1, keepdims=True)
    e = np.exp(sel - m)
    p = e / e.sum(axis=-1, keepdims=True)
    out = np.zeros_like(scores.data)
    out[..., idx] = p

    def vjp(g, p=p, idx=idx, shape=scores.data.shape):
        gm = np.take(g, idx, axis=-1)
        inner = (gm * p).sum(axis=-1, keepdims=True)
        gs = p * (gm - inner)
        full = np.zeros(shape)
        full[..., idx] = gs
        return full

    return _emit(out, [(scores, vjp)])


def dropout(x, rate: float, seed: int, training: bool = True) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale survivors by 1/(1-rate)."""
    if not (0.0 <= rate < 1.0):
        raise NumericsError(f"dropout rate must be in [0,1), got {rate}")
    x = _lift(x)
    if not training or rate == 0.0:
        return _emit(x.data.copy(), [(x, lambda g: g)])
    rng = np.random.Generator(np.random.PCG64(seed))
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return _emit(x.data * mask, [(x, lambda g, m=mask: g * m)])


def bce_elements(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy with logits, stable log-sum-exp form."""
    logits = _lift(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.data.shape:
        raise NumericsError(
            f"bce shapes disagree: logits {logits.data.shape}, targets {t.shape}"
        )
    z = logits.data
    out = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def vjp(g, z=z, t=t):
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))  # stable sigmoid
        return g * (sig - t)

    return _emit(out, [(logits, vjp)])


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy over all elements."""
    return mean(bce_elements(logits, targets))


def cross_entropy(logits, class_index) -> Tensor:
    """-log softmax(logits)[class_index] along the last axis.

    `class_index` may be a scalar or an integer array matching the leading
    axes; the result has the leading shape.
    """
    logits = _lift(logits)
    z = logits.data
    idx = np.asarray(class_index, dtype=np.intp)
    k = z.shape[-1]
    if np.any(idx < 0) or np.any(idx >= k):
        raise NumericsError(f"class index out of range for {k} classes")
    if z.ndim > 1:
        idx = np.broadcast_to(idx, z.shape[:-1])
    m = z.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(z - m).sum(axis=-1))
    picked = z[idx] if z.ndim == 1 else np.take_along_axis(z, idx[..., None], -1)[..., 0]
    out = lse - picked

    def vjp(g, z=z, idx=idx):
        p = np.exp(z - z.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        onehot = np.zeros_like(z)
        if z.ndim > 1:
            np.put_along_axis(onehot, idx[..., None], 1.0, -1)
        else:
            onehot[idx] = 1.0
        return (p - onehot) * (g[..., None] if z.ndim > 1 else g)

    return _emit(out, [(logits, vjp)])


def maximum(a, b) -> Tensor:
    """Elementwise max; the gradient follows the larger input (ties go to a)."""
    a, b = _lift(a), _lift(b)
    take_a = a.data >= b.data
    return _emit(
        np.where(take_a, a.data, b.data),
        [
            (a, lambda g, m=take_a, s=a.data.shape: _unbroadcast(g * m, s)),
            (b, lambda g, m=~take_a, s=b.data.shape: _unbroadcast(g * m, s)),
        ],
    )


def tsum(x, axis=None) -> Tensor:
    x = _lift(x)
    out = x.data.sum(axis=axis)

    def vjp(g, shape=x.data.shape, axis=axis):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        gx = np.expand_dims(g, axis)
        return np.broadcast_to(gx, shape).copy()

    return _emit(out, [(x, vjp)])


def mean(x, axis=None) -> Tensor:
    x = _lift(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis), 1.0 / n)


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(
        self,
        params: Iterable[Parameter],
        learning_rate: float = 1e-4,
        weight_decay: float = 5e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: Optional[float] = None):
        lr = self.learning_rate if lr is None else lr
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self._t
        c2 = 1.0 - b2 ** self._t
        for p, m, v in zip(self.params, self._m, self._v):
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad**2
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data


def cosine_lr(base: float, epoch: int, total_epochs: int) -> float:
    """Cosine-annealed learning rate from `base` toward 0 across epochs."""
    if total_epochs <= 1:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * epoch / total_epochs))


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> dict[str, float]:
    """Compare analytic gradients of f() against central finite differences.

    f must be deterministic (seed any stochastic op). Returns per-parameter
    max relative error; relative error is floored at magnitude 1e-4 so that
    near-zero gradients are compared absolutely at step-scale precision.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    report: dict[str, float] = {}
    for p, a in zip(params, analytic):
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f().data)
            flat[i] = orig - step
            lo = float(f().data)
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-4)
        report[p.name] = float(np.max(np.abs(a - num) / denom)) if flat.size else 0.0
    report["__max__"] = max((v for k, v in report.items() if k != "__max__"), default=0.0)
    report["__tolerance__"] = tolerance
    return report

"""Dense float tensors with a reverse-mode gradient tape.

Forward math runs in float32 by default. Every op also works on float64
arrays, which is what the finite-difference test oracles use for their
shadow evaluations. The tape is implicit: an op's result closes over its
parent tensors and a VJP function; ``backward()`` walks that graph.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _np_erf

__all__ = [
    "Tensor",
    "no_grad",
    "DimensionError",
    "NumericError",
    "ContractError",
    "ConfigError",
    "matmul",
    "concat",
    "broadcast_to",
    "softmax",
    "cross_entropy",
    "linear",
    "layernorm",
    "gelu",
    "l2_normalize",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ContractError(RuntimeError):
    """An operation was called outside its documented contract."""


class ConfigError(ValueError):
    """A configuration value is outside its documented range."""


_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` by summing broadcast axes."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """N-d float array that can participate in reverse-mode differentiation.

    Invariants: ``grad``, when present, has the same shape as ``data``;
    after ``backward()`` every reachable tensor with ``requires_grad`` has
    a populated ``grad``; repeated backward calls accumulate additively.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple, vjp) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = data
        t.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = parents
            t._vjp = vjp
        else:
            t.requires_grad = False
            t._parents = ()
            t._vjp = None
        return t

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- basic properties -----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {tuple(self.data.shape)}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        self.requires_grad = bool(flag)
        return self

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = a.data + b.data
        return Tensor._from_op(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = a.data - b.data
        return Tensor._from_op(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = a.data * b.data
        return Tensor._from_op(
            out, (a, b),
            lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = a.data / b.data
        return Tensor._from_op(
            out, (a, b),
            lambda g: (
                _unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
            ),
        )

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __neg__(self):
        a = self
        return Tensor._from_op(-a.data, (a,), lambda g: (-g,))

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ContractError("only scalar exponents are supported")
        a, p = self, float(exponent)
        out = a.data ** p
        return Tensor._from_op(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))

    def __matmul__(self, other):
        return matmul(self, self._coerce(other))

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        orig = a.data.shape
        out = a.data.reshape(shape)
        return Tensor._from_op(out, (a,), lambda g: (g.reshape(orig),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        a = self
        inv = tuple(np.argsort(axes))
        return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))

    @property
    def T(self) -> "Tensor":
        if self.data.ndim != 2:
            raise DimensionError(f".T needs a matrix, got shape {tuple(self.data.shape)}")
        return self.transpose(1, 0)

    def __getitem__(self, key) -> "Tensor":
        a = self
        out = a.data[key]

        def vjp(g):
            full = np.zeros_like(a.data)
            full[key] = g
            return (full,)

        return Tensor._from_op(out, (a,), vjp)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            gx = np.asarray(g)
            if axis is not None and not keepdims:
                gx = np.expand_dims(gx, axis)
            return (np.broadcast_to(gx, a.data.shape),)

        return Tensor._from_op(out, (a,), vjp)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out = a.data.mean(axis=axis, keepdims=keepdims)
        n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])

        def vjp(g):
            gx = np.asarray(g)
            if axis is not None and not keepdims:
                gx = np.expand_dims(gx, axis)
            return (np.broadcast_to(gx, a.data.shape) / a.data.dtype.type(n),)

        return Tensor._from_op(out, (a,), vjp)

    # -- pointwise functions ----------------------------------------------------

    def exp(self) -> "Tensor":
        a = self
        out = np.exp(a.data)
        return Tensor._from_op(out, (a,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self
        return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sqrt(self) -> "Tensor":
        a = self
        out = np.sqrt(a.data)
        return Tensor._from_op(out, (a,), lambda g: (g / (2.0 * out),))

    def erf(self) -> "Tensor":
        a = self
        out = _np_erf(a.data).astype(a.data.dtype, copy=False)
        coef = a.data.dtype.type(2.0 / np.sqrt(np.pi))
        return Tensor._from_op(out, (a,), lambda g: (g * coef * np.exp(-a.data * a.data),))

    def astype(self, dtype) -> "Tensor":
        a = self
        orig = a.data.dtype
        out = a.data.astype(dtype)
        return Tensor._from_op(out, (a,), lambda g: (g.astype(orig),))

    # -- autodiff ----------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable tensor.

        ``self`` must be scalar. Calling twice without zeroing adds the
        gradients a second time.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {tuple(self.data.shape)}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg


# -- free-function ops ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {tuple(a.data.shape)} and {tuple(b.data.shape)}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {tuple(a.data.shape)} x {tuple(b.data.shape)}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return (ga, gb)

    return Tensor._from_op(out, (a, b), vjp)


def concat(tensors: list, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return Tensor._from_op(out, tuple(tensors), vjp)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    out = np.broadcast_to(a.data, shape).copy()
    return Tensor._from_op(out, (a,), lambda g: (_unbroadcast(g, a.data.shape),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``; rows sum to 1."""
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return Tensor._from_op(out, (x,), vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (B, C) against integer labels."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy needs (batch, classes) logits, got shape {tuple(logits.data.shape)}")
    labels = np.asarray(labels)
    bsz, n_classes = logits.data.shape
    if labels.shape != (bsz,):
        raise DimensionError(f"labels shape {tuple(labels.shape)} does not match batch {bsz}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"label out of range for {n_classes} classes: {labels.min()}..{labels.max()}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    rows = np.arange(bsz)
    out = np.asarray(-log_probs[rows, labels].mean(), dtype=logits.data.dtype)

    def vjp(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (g * grad / logits.data.dtype.type(bsz),)

    return Tensor._from_op(out, (logits,), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w (+ b)`` over the last axis."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise DimensionError(f"linear input width {x.data.shape[-1]} does not match weight shape {tuple(w.data.shape)}")
    out = matmul(x, w)
    if b is not None:
        out = out + b
    return out


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis, then affine scale and shift."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered / (var + eps).sqrt()
    return normed * gamma + beta


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    return x * ((x * (1.0 / np.sqrt(2.0))).erf() + 1.0) * 0.5


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale rows (slices along ``axis``) to unit L2 norm."""
    norm = ((x * x).sum(axis=axis, keepdims=True) + eps).sqrt()
    return x / norm

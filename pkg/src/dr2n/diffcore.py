"""Small reverse-mode autodiff engine on top of numpy.

Every operation records its parents and a backward closure on the output
tensor. ``backward`` topologically sorts the recorded graph and replays the
closures in reverse. All values are float64.

Only the operations the forecasting model needs are provided; broadcasting
is limited to the explicit cases documented per op (bias rows, batched
matmul against a shared 2-D weight).
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor", "ParamStore", "DimensionError", "DegenerateAttentionError",
    "as_tensor", "no_grad", "matmul", "concat", "softmax", "add", "sub", "mul",
    "scale", "add_bias", "sigmoid", "tanh", "relu", "identity", "sum", "mean",
    "smooth_l1", "reshape", "getitem", "pairwise_add", "detach",
    "softmax_cross_entropy", "sigmoid_cross_entropy", "truncated_normal",
    "numeric_grad", "rel_error",
]

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DegenerateAttentionError(ValueError):
    """A softmax row has no admissible entry."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (evaluation, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array plus the record needed to differentiate through it."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "name")
    # make ndarray <op> Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def backward(self) -> None:
        backward(self)

    # operator sugar keeps model code readable
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(values: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(values)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from a scalar ``loss``.

    Gradients accumulate across calls; call ``zero_grad`` (or
    ``ParamStore.zero_grad``) to reset.
    """
    if loss.values.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        if node._backward is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    for node in order:
        g = grads.get(id(node))
        if g is None:
            continue
        # grads are never mutated in place, so sharing arrays is safe
        node.grad = g if node.grad is None else node.grad + g


# ---------------------------------------------------------------- linear algebra

def _ordered_sum(x: np.ndarray) -> np.ndarray:
    """Sum over the last axis strictly left to right.

    BLAS and numpy's pairwise summation regroup terms depending on length, so
    appending an exact zero can move the last bit. A running sum cannot.
    """
    return np.add.accumulate(x, axis=-1)[..., -1]


def matmul(a, b, exact: str | None = None) -> Tensor:
    """Matrix product.

    Supported forms: ``(m, k) @ (k, n)``; ``(..., m, k) @ (k, n)`` with the
    right operand shared across leading dims; and batched
    ``(B, m, k) @ (B, k, n)``.

    ``exact="rows"`` makes each output element independent of how many rows
    or batch entries surround it. ``exact="terms"`` additionally accumulates
    the contraction strictly in index order, so inserting zero-weighted terms
    anywhere leaves the result bit-identical.
    """
    if exact not in (None, "rows", "terms"):
        raise ValueError(f"unknown exact mode {exact!r}")
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and (a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    if exact == "terms" and av.shape[-1] > 0:
        out = av[..., :, 0, None] * bv[..., 0, None, :]
        for j in range(1, av.shape[-1]):
            out += av[..., :, j, None] * bv[..., j, None, :]
    elif exact == "rows":
        # einsum's kernel groups terms by contraction length only
        out = np.einsum("...k,kn->...n" if bv.ndim == 2 else "...mk,...kn->...mn", av, bv)
    else:
        out = np.matmul(av, bv)

    def bw(g):
        if bv.ndim == 2:
            ga = g @ bv.T
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = np.matmul(g, np.swapaxes(bv, -1, -2))
            gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), bw)


def concat(a, b, axis: int = -1) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim:
        raise DimensionError(f"concat rank mismatch: {a.shape} vs {b.shape}")
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"concat axis {axis} out of range for rank {a.ndim}")
    ax = axis % a.ndim
    if a.shape[:ax] + a.shape[ax + 1:] != b.shape[:ax] + b.shape[ax + 1:]:
        raise DimensionError(f"concat dim mismatch on axis {axis}: {a.shape} vs {b.shape}")
    split = a.shape[ax]
    out = np.concatenate([a.values, b.values], axis=ax)

    def bw(g):
        ga, gb = np.split(g, [split], axis=ax)
        return ga, gb

    return _make(out, (a, b), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    out = a.values.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(old),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.values[index]

    def bw(g):
        full = np.zeros_like(a.values)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), bw)


def pairwise_add(p, q) -> Tensor:
    """``out[..., i, j, :] = p[..., i, :] + q[..., j, :]`` for (..., N, d) inputs."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape or p.ndim < 2:
        raise DimensionError(f"pairwise_add needs equal (..., N, d) shapes: {p.shape} vs {q.shape}")
    out = p.values[..., :, None, :] + q.values[..., None, :, :]
    return _make(out, (p, q), lambda g: (g.sum(axis=-2), g.sum(axis=-3)))


# ---------------------------------------------------------------- elementwise

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    av, bv = a.values, b.values
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.values * c, (a,), lambda g: (g * c,))


def add_bias(x, bias) -> Tensor:
    """Add a vector along the last axis of ``x``."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_bias shape mismatch: {x.shape} + {bias.shape}")
    lead = tuple(range(x.ndim - 1))
    return _make(x.values + bias.values, (x, bias), lambda g: (g, g.sum(axis=lead)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _stable_sigmoid(a.values)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.values)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.values > 0
    return _make(np.maximum(a.values, 0.0), (a,), lambda g: (g * on,))


def identity(a) -> Tensor:
    return as_tensor(a)


def detach(a) -> Tensor:
    """Same values, no gradient path."""
    return Tensor(as_tensor(a).values.copy())


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    out = a.values.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(out), (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.values.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def smooth_l1(pred, target) -> Tensor:
    """Elementwise Huber with unit threshold: 0.5 d^2 if |d| < 1 else |d| - 0.5."""
    pred, target = as_tensor(pred), as_tensor(target)
    _same_shape(pred, target, "smooth_l1")
    d = pred.values - target.values
    ad = np.abs(d)
    quad = ad < 1.0
    out = np.where(quad, 0.5 * d * d, ad - 0.5)
    slope = np.where(quad, d, np.sign(d))
    return _make(out, (pred, target), lambda g: (g * slope, -g * slope))


# ---------------------------------------------------------------- softmax family

def softmax(logits, mask=None, allow_empty: bool = False) -> Tensor:
    """Masked softmax over the last axis.

    Masked entries are exactly zero. A row with every entry masked raises
    :class:`DegenerateAttentionError` unless ``allow_empty`` is set, in which
    case the row is all zeros.
    """
    logits = as_tensor(logits)
    x = logits.values
    m = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != x.shape:
        raise DimensionError(f"softmax mask shape {m.shape} != logits shape {x.shape}")
    row_ok = m.any(axis=-1, keepdims=True)
    if not allow_empty and not row_ok.all():
        raise DegenerateAttentionError("softmax row has no unmasked entry")
    shifted = np.where(m, x, -np.inf)
    top = np.max(shifted, axis=-1, keepdims=True)
    top = np.where(row_ok, top, 0.0)
    e = np.where(m, np.exp(np.where(m, x - top, 0.0)), 0.0)
    denom = _ordered_sum(e)[..., None] if e.shape[-1] else e.sum(axis=-1, keepdims=True)
    p = e / np.where(denom > 0, denom, 1.0)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (logits,), bw)


def softmax_cross_entropy(logits, targets, weights) -> Tensor:
    """Weighted sum over rows of ``-log softmax(logits)[target]``.

    ``logits`` is (M, C); ``targets`` int (M,); ``weights`` (M,) constants.
    """
    logits = as_tensor(logits)
    x = logits.values
    t = np.asarray(targets, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    if x.ndim != 2 or t.shape != (x.shape[0],) or w.shape != t.shape:
        raise DimensionError(f"softmax_cross_entropy shapes: {x.shape}, {t.shape}, {w.shape}")
    if t.size and (t.min() < 0 or t.max() >= x.shape[1]):
        raise ValueError(f"label index out of range [0, {x.shape[1]})")
    top = x.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(x - top).sum(axis=1))
    rows = np.arange(x.shape[0])
    out = np.sum(w * (lse - x[rows, t]))

    def bw(g):
        p = np.exp(x - lse[:, None])
        p[rows, t] -= 1.0
        return (g * w[:, None] * p,)

    return _make(np.asarray(out), (logits,), bw)


def sigmoid_cross_entropy(logits, targets, weights) -> Tensor:
    """Weighted sum over rows of the per-row *sum* of sigmoid cross entropies.

    ``targets`` is a {0, 1} array shaped like ``logits``; ``weights`` is (M,).
    """
    logits = as_tensor(logits)
    x = logits.values
    y = np.asarray(targets, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if y.shape != x.shape or w.shape != (x.shape[0],):
        raise DimensionError(f"sigmoid_cross_entropy shapes: {x.shape}, {y.shape}, {w.shape}")
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out = np.sum(w[:, None] * per)
    s = _stable_sigmoid(x)
    return _make(np.asarray(out), (logits,), lambda g: (g * w[:, None] * (s - y),))


# ---------------------------------------------------------------- parameters

def truncated_normal(rng: np.random.Generator, shape, std: float = 0.1) -> np.ndarray:
    """Normal(0, std) redrawn until every entry lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class ParamStore:
    """Named trainable tensors.

    ``get`` on an existing name returns the very same Tensor object, which is
    how weights are shared across actors and timesteps.
    """

    def __init__(self, seed: int = 0, init_std: float = 0.1):
        self._params: dict[str, Tensor] = {}
        self._multipliers: dict[str, float] = {}
        self._rng = np.random.default_rng(seed)
        self.init_std = init_std

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def get(self, name: str, shape=None, init: str = "normal", grad_multiplier: float = 1.0) -> Tensor:
        """Fetch ``name``, creating it on first use.

        ``init`` is ``"normal"`` (truncated normal), ``"zeros"``, ``"eye"`` or
        an explicit array.
        """
        if name in self._params:
            p = self._params[name]
            if shape is not None and p.shape != tuple(shape):
                raise DimensionError(f"parameter {name!r} exists with shape {p.shape}, requested {tuple(shape)}")
            return p
        if shape is None:
            raise KeyError(name)
        if isinstance(init, str):
            if init == "normal":
                vals = truncated_normal(self._rng, shape, self.init_std)
            elif init == "zeros":
                vals = np.zeros(shape)
            elif init == "eye":
                vals = np.eye(*shape)
            else:
                raise ValueError(f"unknown init {init!r}")
        else:
            vals = np.array(init, dtype=np.float64).reshape(shape)
        p = Tensor(vals, requires_grad=True, name=name)
        self._params[name] = p
        self._multipliers[name] = float(grad_multiplier)
        return p

    def grad_multiplier(self, name: str) -> float:
        return self._multipliers[name]

    def set_grad_multiplier(self, name: str, value: float) -> None:
        if name not in self._params:
            raise KeyError(name)
        self._multipliers[name] = float(value)

    def scaled_grad(self, name: str) -> np.ndarray:
        """Gradient after the per-entry multiplier (zeros if none recorded)."""
        p = self._params[name]
        g = np.zeros_like(p.values) if p.grad is None else p.grad
        return self._multipliers[name] * g

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def num_values(self) -> int:
        return int(np.sum([p.values.size for p in self._params.values()]))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.values.copy() for k, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in state.items():
            v = np.asarray(v, dtype=np.float64)
            if k in self._params:
                if self._params[k].shape != v.shape:
                    raise DimensionError(f"{k}: checkpoint shape {v.shape} != {self._params[k].shape}")
                self._params[k].values = v.copy()
            else:
                self._params[k] = Tensor(v.copy(), requires_grad=True, name=k)
                self._multipliers[k] = 1.0


# ---------------------------------------------------------------- verification

def numeric_grad(f: Callable[[], Tensor], t: Tensor, eps: float = 1e-5,
                 indices: Iterable[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to ``t``.

    ``t.values`` is perturbed in place and restored. When ``indices`` is
    given only those coordinates are filled; the rest stay zero.
    """
    out = np.zeros_like(t.values)
    flat = t.values.reshape(-1)
    idx_iter = (np.ravel_multi_index(i, t.shape) for i in indices) if indices is not None else range(flat.size)
    with no_grad():
        for k in idx_iter:
            orig = flat[k]
            flat[k] = orig + eps
            fp = f().item()
            flat[k] = orig - eps
            fm = f().item()
            flat[k] = orig
            out.reshape(-1)[k] = (fp - fm) / (2 * eps)
    return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``||a - n|| / max(||a||, ||n||)``; both-near-zero counts as agreement."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom < floor:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)

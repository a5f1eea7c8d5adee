"""Dense numeric kernel with exact reverse-mode gradients.

Values are 64-bit numpy arrays: vectors are 1-d, matrices 2-d row-major,
scalars 0-d. Each operation returns a new :class:`Tensor` that records its
input tensors and a closure mapping the output gradient to input gradients,
so ``backward()`` can replay the composition in reverse and accumulate
gradients at every leaf. All operations are pure; ``adam_step`` returns new
state instead of mutating.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericError, ShapeError, UsageError


class Tensor:
    """Node of a recorded computation: float64 array plus backward hooks.

    Leaves are built directly from array data; interior nodes are created by
    the module-level operations. After ``backward()`` every tensor that the
    output depends on carries its gradient in ``.grad``; unrecorded tensors
    keep ``.grad = None``.
    """

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, _parents=(), _vjp=None):
        if type(value) is np.ndarray and value.dtype == np.float64:
            v = value
        else:
            v = np.asarray(value, dtype=np.float64)
        if _vjp is None and not np.all(np.isfinite(v)):
            raise NumericError("tensor initialised with non-finite values")
        self.value = v
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        if self.value.ndim != 0:
            raise ShapeError("item() requires a scalar tensor")
        return float(self.value)

    def __float__(self) -> float:
        return self.item()

    def __repr__(self):
        return f"Tensor({self.value!r})"

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
        if isinstance(other, Tensor):
            raise UsageError("division only supported by plain numbers")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def backward(self, seed=None) -> None:
        """Accumulate gradients of this output into every reachable tensor."""
        if seed is None:
            if self.value.ndim != 0:
                raise UsageError("a seed gradient is required for non-scalar outputs")
            seed = np.array(1.0)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != self.value.shape:
            raise ShapeError(f"seed shape {seed.shape} does not match output shape {self.value.shape}")
        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(_toposort(self)):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                parent.grad = g if parent.grad is None else parent.grad + g


def _toposort(root: Tensor) -> list[Tensor]:
    """Nodes ordered with parents before dependents (iterative DFS)."""
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def gradient(t: Tensor) -> np.ndarray:
    """Gradient stored on ``t``; raises if ``t`` was not part of the graph."""
    if t.grad is None:
        raise UsageError("no gradient recorded for this value; it was not part of the backward graph")
    return t.grad


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _want(t: Tensor, ndim: int, what: str) -> Tensor:
    if t.ndim != ndim:
        raise ShapeError(f"{what} must be {ndim}-d, got shape {t.shape}")
    return t


# ---------------------------------------------------------------------------
# elementwise / reduction primitives

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "add")
    return Tensor(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "sub")
    return Tensor(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "mul")
    av, bv = a.value, b.value
    return Tensor(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor(-a.value, (a,), lambda g: (-g,))


def tsum(a) -> Tensor:
    """Sum of all entries, as a scalar."""
    a = _as_tensor(a)
    return Tensor(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def hinge(a) -> Tensor:
    """Elementwise max(x, 0); subgradient 0 at the kink."""
    a = _as_tensor(a)
    mask = a.value > 0
    return Tensor(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    # same shape, or one side scalar; general broadcasting is out of scope
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


# ---------------------------------------------------------------------------
# vector / matrix operations

def linear_forward(x, W, b) -> Tensor:
    """W @ x + b for a 1-d input."""
    x, W, b = _as_tensor(x), _as_tensor(W), _as_tensor(b)
    _want(x, 1, "x"), _want(W, 2, "W"), _want(b, 1, "b")
    if W.shape[1] != x.shape[0]:
        raise ShapeError(f"W has {W.shape[1]} columns but x has dim {x.shape[0]}")
    if b.shape[0] != W.shape[0]:
        raise ShapeError(f"b has dim {b.shape[0]} but W has {W.shape[0]} rows")
    xv, Wv = x.value, W.value
    return Tensor(Wv @ xv + b.value, (x, W, b), lambda g: (Wv.T @ g, np.outer(g, xv), g))


def linear_rows(M, W, b) -> Tensor:
    """Apply ``W @ row + b`` to every row of M: returns M @ W.T + b."""
    M, W, b = _as_tensor(M), _as_tensor(W), _as_tensor(b)
    _want(M, 2, "M"), _want(W, 2, "W"), _want(b, 1, "b")
    if W.shape[1] != M.shape[1]:
        raise ShapeError(f"W has {W.shape[1]} columns but rows have dim {M.shape[1]}")
    if b.shape[0] != W.shape[0]:
        raise ShapeError(f"b has dim {b.shape[0]} but W has {W.shape[0]} rows")
    Mv, Wv = M.value, W.value
    return Tensor(Mv @ Wv.T + b.value, (M, W, b), lambda g: (g @ Wv, g.T @ Mv, g.sum(axis=0)))


def matvec(M, v) -> Tensor:
    M, v = _as_tensor(M), _as_tensor(v)
    _want(M, 2, "M"), _want(v, 1, "v")
    if M.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec: {M.shape} @ {v.shape}")
    Mv, vv = M.value, v.value
    return Tensor(Mv @ vv, (M, v), lambda g: (np.outer(g, vv), Mv.T @ g))


def dot(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _want(a, 1, "a"), _want(b, 1, "b")
    if a.shape != b.shape:
        raise ShapeError(f"dot: dims {a.shape[0]} and {b.shape[0]} differ")
    av, bv = a.value, b.value
    return Tensor(av @ bv, (a, b), lambda g: (g * bv, g * av))


def concat(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _want(a, 1, "a"), _want(b, 1, "b")
    n = a.shape[0]
    return Tensor(np.concatenate([a.value, b.value]), (a, b), lambda g: (g[:n], g[n:]))


def concat_rows_with(M, v) -> Tensor:
    """Append ``v`` to every row of M: row j becomes [M_j ; v]."""
    M, v = _as_tensor(M), _as_tensor(v)
    _want(M, 2, "M"), _want(v, 1, "v")
    rows, cols = M.shape
    out = np.concatenate([M.value, np.broadcast_to(v.value, (rows, v.shape[0]))], axis=1)
    return Tensor(out, (M, v), lambda g: (g[:, :cols], g[:, cols:].sum(axis=0)))


def softmax(z) -> Tensor:
    """Stable softmax of a 1-d vector (max-subtracted)."""
    z = _as_tensor(z)
    _want(z, 1, "z")
    if z.shape[0] == 0:
        raise ShapeError("softmax of an empty vector")
    e = np.exp(z.value - z.value.max())
    s = e / e.sum()
    return Tensor(s, (z,), lambda g: (s * (g - g @ s),))


def l2_normalize(v, eps: float = 1e-8) -> Tensor:
    """v / max(norm(v), eps); leaves near-zero vectors scaled by 1/eps."""
    v = _as_tensor(v)
    _want(v, 1, "v")
    n = float(np.linalg.norm(v.value))
    denom = max(n, eps)
    y = v.value / denom

    def vjp(g):
        if n > eps:
            return ((g - y * (y @ g)) / n,)
        return (g / eps,)

    return Tensor(y, (v,), vjp)


def l2_normalize_rows(M, eps: float = 1e-8) -> Tensor:
    """Row-wise l2 normalization of a matrix."""
    M = _as_tensor(M)
    _want(M, 2, "M")
    norms = np.linalg.norm(M.value, axis=1)
    denom = np.maximum(norms, eps)
    Y = M.value / denom[:, None]
    safe = norms > eps

    def vjp(g):
        dots = (g * Y).sum(axis=1)
        inner = (g - Y * dots[:, None]) / np.where(safe, norms, 1.0)[:, None]
        return (np.where(safe[:, None], inner, g / eps),)

    return Tensor(Y, (M,), vjp)


def sq_l2_distance(a, b) -> Tensor:
    """Sum of squared coordinate differences, as a scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    _want(a, 1, "a"), _want(b, 1, "b")
    if a.shape != b.shape:
        raise ShapeError(f"sq_l2_distance: dims {a.shape[0]} and {b.shape[0]} differ")
    d = a.value - b.value
    return Tensor((d * d).sum(), (a, b), lambda g: (2.0 * g * d, -2.0 * g * d))


def sq_dist_rows(M, v) -> Tensor:
    """Vector of squared distances between each row of M and v."""
    M, v = _as_tensor(M), _as_tensor(v)
    _want(M, 2, "M"), _want(v, 1, "v")
    if M.shape[1] != v.shape[0]:
        raise ShapeError(f"sq_dist_rows: rows have dim {M.shape[1]}, v has dim {v.shape[0]}")
    D = M.value - v.value
    return Tensor((D * D).sum(axis=1), (M, v), lambda g: (2.0 * D * g[:, None], -2.0 * (D * g[:, None]).sum(axis=0)))


# ---------------------------------------------------------------------------
# optimizer

@dataclass(frozen=True)
class AdamState:
    """Moment buffers and constants for Adam; immutable, replaced per step."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; returns new params and new state."""
    if not (0.0 < state.beta1 < 1.0 and 0.0 < state.beta2 < 1.0):
        raise UsageError("Adam betas must lie strictly between 0 and 1")
    if set(params) != set(grads):
        raise ShapeError(f"param/grad key mismatch: {sorted(set(params) ^ set(grads))}")
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.beta1 * state.m.get(name, 0.0) + (1.0 - state.beta1) * g
        v = state.beta2 * state.v.get(name, 0.0) + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        new_params[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, replace(state, step=t, m=new_m, v=new_v)


# ---------------------------------------------------------------------------
# finite-difference checking

def grad_check(fn, params: dict, h: float = 1e-4) -> float:
    """Max relative error between analytic gradients of ``fn`` and central differences.

    ``fn`` receives a dict of leaf Tensors (same keys as ``params``) and must
    return a scalar Tensor. Relative error per coordinate is
    ``|analytic - cd| / max(|analytic|, |cd|, 1e-8)``.
    """
    base = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(arrays: dict) -> tuple[float, dict]:
        leaves = {k: Tensor(a) for k, a in arrays.items()}
        out = fn(leaves)
        if not isinstance(out, Tensor) or out.value.ndim != 0:
            raise UsageError("grad_check requires a scalar Tensor result")
        val = float(out.value)
        if not np.isfinite(val):
            raise NumericError("grad_check: function value is not finite")
        return val, {"out": out, "leaves": leaves}

    _, ctx = evaluate(base)
    ctx["out"].backward()
    analytic = {
        k: (ctx["leaves"][k].grad if ctx["leaves"][k].grad is not None else np.zeros_like(base[k]))
        for k in base
    }

    worst = 0.0
    for name, arr in base.items():
        for idx in np.ndindex(arr.shape):
            bumped = dict(base)
            plus = arr.copy()
            plus[idx] += h
            bumped[name] = plus
            f_plus, _ = evaluate(bumped)
            minus = arr.copy()
            minus[idx] -= h
            bumped[name] = minus
            f_minus, _ = evaluate(bumped)
            cd = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[name][idx])
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
            worst = max(worst, err)
    return worst

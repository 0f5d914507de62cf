"""Numeric kernels with a reverse-mode gradient contract.

Every trainable loss in the engine is assembled from the ops in this module.
Each op accepts either plain float64 arrays (pure forward, used by oracles and
inference) or :class:`Var` nodes (records onto an implicit tape for reverse-mode
differentiation). The gradient contract is enforced by :func:`check_gradient`,
which compares recorded backward functions against central finite differences.

All math is 64-bit; callers are expected to pass float64 (inputs are coerced).
"""
from __future__ import annotations

import warnings
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np
import scipy.sparse as sp

Array = np.ndarray


class _KinkTracker:
    """Records how close piecewise-linear ops came to their kink; used by the
    FD suite to resample inputs that would straddle a non-smooth point."""

    def __init__(self):
        self.min_abs = np.inf

    def note(self, values: Array) -> None:
        values = np.asarray(values)
        if values.size:
            self.min_abs = min(self.min_abs, float(np.min(np.abs(values))))


_active_kink_tracker: _KinkTracker | None = None


@contextmanager
def track_kinks():
    global _active_kink_tracker
    tracker = _KinkTracker()
    prev = _active_kink_tracker
    _active_kink_tracker = tracker
    try:
        yield tracker
    finally:
        _active_kink_tracker = prev


def _as_array(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Var:
    """A node in the recorded operation graph.

    ``value`` is the forward result; ``parents`` and ``vjp`` describe how to
    push an upstream gradient back to the parents. Leaves have no parents and
    collect their gradient in ``grad`` after :func:`backward`.
    """

    __slots__ = ("value", "parents", "vjp", "grad")

    def __init__(self, value, parents: tuple = (), vjp: Callable | None = None):
        self.value = _as_array(value)
        self.parents = parents
        self.vjp = vjp
        self.grad: Array | None = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    # operator sugar; non-Var operands are treated as constants
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, seed: Array | None = None) -> None:
        backward(self, seed)


def is_var(x) -> bool:
    return isinstance(x, Var)


def value_of(x) -> Array:
    return x.value if isinstance(x, Var) else _as_array(x)


def _topo_order(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if isinstance(p, Var) and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var, seed: Array | None = None) -> None:
    """Reverse sweep from ``root``; overwrites ``grad`` on every reached node."""
    if seed is None:
        if root.value.size != 1:
            raise ValueError("backward on a non-scalar requires an explicit seed")
        seed = np.ones_like(root.value)
    order = _topo_order(root)
    grads: dict[int, Array] = {id(root): np.broadcast_to(_as_array(seed), root.value.shape).copy()}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        node.grad = g
        if g is None or node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            if not isinstance(parent, Var) or pg is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fwd, vjp_a, vjp_b):
    av, bv = value_of(a), value_of(b)
    out = fwd(av, bv)
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out
    parents = tuple(x for x in (a, b) if isinstance(x, Var))

    def vjp(g):
        grads = []
        if isinstance(a, Var):
            grads.append(_unbroadcast(vjp_a(g, av, bv), av.shape))
        if isinstance(b, Var):
            grads.append(_unbroadcast(vjp_b(g, av, bv), bv.shape))
        return tuple(grads)

    return Var(out, parents, vjp)


def _unary(x, fwd, vjp_fn):
    xv = value_of(x)
    out = fwd(xv)
    if not isinstance(x, Var):
        return out
    return Var(out, (x,), lambda g: (vjp_fn(g, xv, out),))


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary(
        a, b, lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def matmul(a, b):
    return _binary(
        a, b, lambda x, y: x @ y,
        lambda g, x, y: g @ y.T,
        lambda g, x, y: x.T @ g,
    )


def transpose(x):
    return _unary(x, lambda v: v.T, lambda g, v, o: g.T)


def reduce_sum(x, axis=None, keepdims: bool = False):
    xv = value_of(x)
    out = xv.sum(axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return out

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return Var(out, (x,), vjp)


def reduce_mean(x, axis=None, keepdims: bool = False):
    xv = value_of(x)
    n = xv.size if axis is None else xv.shape[axis]
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(x):
    return _unary(x, np.exp, lambda g, v, o: g * o)


def log(x):
    return _unary(x, np.log, lambda g, v, o: g / v)


def sqrt(x):
    return _unary(x, np.sqrt, lambda g, v, o: g / (2.0 * o))


def square(x):
    return _unary(x, np.square, lambda g, v, o: 2.0 * g * v)


def absolute(x):
    # subgradient at 0 fixed to 0 (np.sign(0) == 0), the L1 convention used by
    # the translation loss
    if _active_kink_tracker is not None:
        _active_kink_tracker.note(value_of(x))
    return _unary(x, np.abs, lambda g, v, o: g * np.sign(v))


def _sigmoid_values(v: Array) -> Array:
    flat = np.atleast_1d(v)
    out = np.empty_like(flat, dtype=np.float64)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ev = np.exp(flat[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out.reshape(v.shape)


def sigmoid(x):
    """Numerically stable logistic function, 1/(1+e^(-x))."""
    xv = value_of(x)
    out = _sigmoid_values(xv)
    if not isinstance(x, Var):
        return out
    return Var(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x):
    """log(1 + e^x), stable for large |x|; gradient is sigmoid(x)."""
    xv = value_of(x)
    out = np.maximum(xv, 0.0) + np.log1p(np.exp(-np.abs(xv)))
    if not isinstance(x, Var):
        return out
    return Var(out, (x,), lambda g: (g * _sigmoid_values(xv),))


def leaky_relu(x, slope: float = 0.2):
    """x for x >= 0, slope*x otherwise. Engine-wide negative slope is 0.2."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0,1), got {slope}")
    if _active_kink_tracker is not None:
        _active_kink_tracker.note(value_of(x))
    return _unary(
        x,
        lambda v: np.where(v >= 0, v, slope * v),
        lambda g, v, o: g * np.where(v >= 0, 1.0, slope),
    )


# ---------------------------------------------------------------------------
# indexing / structure


def gather_rows(x, idx):
    """out[k] = x[idx[k]]; backward scatter-adds into x."""
    idx = np.asarray(idx, dtype=np.int64)
    xv = value_of(x)
    out = xv[idx]
    if not isinstance(x, Var):
        return out

    def vjp(g):
        dx = np.zeros_like(xv)
        np.add.at(dx, idx, g)
        return (dx,)

    return Var(out, (x,), vjp)


def scatter_add_rows(base, rows, idx):
    """base with rows[k] added at position idx[k] (duplicate idx accumulate)."""
    idx = np.asarray(idx, dtype=np.int64)
    bv, rv = value_of(base), value_of(rows)
    out = bv.copy()
    np.add.at(out, idx, rv)
    if not (isinstance(base, Var) or isinstance(rows, Var)):
        return out
    parents = tuple(x for x in (base, rows) if isinstance(x, Var))

    def vjp(g):
        grads = []
        if isinstance(base, Var):
            grads.append(g)
        if isinstance(rows, Var):
            grads.append(g[idx])
        return tuple(grads)

    return Var(out, parents, vjp)


def segment_sum(x, indptr: Array):
    """Sum contiguous row segments: out[s] = sum(x[indptr[s]:indptr[s+1]]).

    Segments must be non-empty (strictly increasing indptr); empty segments are
    the caller's responsibility to mask out beforehand.
    """
    indptr = np.asarray(indptr, dtype=np.int64)
    if np.any(np.diff(indptr) <= 0):
        raise ValueError("segment_sum requires non-empty segments")
    xv = value_of(x)
    out = np.add.reduceat(xv, indptr[:-1], axis=0)
    if not isinstance(x, Var):
        return out
    seg_ids = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))

    def vjp(g):
        return (g[seg_ids],)

    return Var(out, (x,), vjp)


def concat_cols(parts: Iterable):
    parts = list(parts)
    values = [value_of(p) for p in parts]
    values = [v.reshape(v.shape[0], -1) if v.ndim > 1 else v.reshape(-1, 1) for v in values]
    out = np.concatenate(values, axis=1)
    if not any(isinstance(p, Var) for p in parts):
        return out
    widths = [v.shape[1] for v in values]
    offsets = np.cumsum([0] + widths)
    parents = tuple(p for p in parts if isinstance(p, Var))

    def vjp(g):
        grads = []
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(part, Var):
                grads.append(g[:, lo:hi].reshape(part.value.shape))
        return tuple(grads)

    return Var(out, parents, vjp)


def sparse_matmul(mat: sp.spmatrix, x):
    """y = mat @ x with a constant sparse matrix; backward is mat.T @ g."""
    xv = value_of(x)
    out = np.asarray(mat @ xv)
    if not isinstance(x, Var):
        return out
    mat_t = mat.T.tocsr()

    def vjp(g):
        return (np.asarray(mat_t @ g),)

    return Var(out, (x,), vjp)


def rows_l2_normalize(x):
    """Scale each row to unit L2 norm; all-zero rows stay zero (no gradient)."""
    xv = value_of(x)
    norms = np.sqrt((xv * xv).sum(axis=1, keepdims=True))
    safe = np.where(norms == 0.0, 1.0, norms)
    out = xv / safe
    if not isinstance(x, Var):
        return out

    def vjp(g):
        inv_n = 1.0 / safe
        gx = g * inv_n - xv * (g * xv).sum(axis=1, keepdims=True) * inv_n**3
        gx[norms[:, 0] == 0.0] = 0.0
        return (gx,)

    return Var(out, (x,), vjp)


# ---------------------------------------------------------------------------
# spec-level scalar kernels


def softmax_row(logits):
    """Shift-invariant softmax over a 1-D logit vector."""
    lv = value_of(logits)
    if lv.size == 0:
        raise ValueError("softmax_row requires a non-empty vector")
    shift = float(lv.max())  # constant shift: no gradient contribution
    e = exp(sub(logits, shift))
    return div(e, reduce_sum(e))


def cosine_sim(a, b):
    """a.b / (|a||b|); defined as 0 (with a warning) for a zero vector."""
    av, bv = value_of(a), value_of(b)
    na, nb = float(np.linalg.norm(av)), float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine_sim on a zero vector; returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    num = reduce_sum(mul(a, b))
    den = mul(sqrt(reduce_sum(square(a))), sqrt(reduce_sum(square(b))))
    return div(num, den)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class Kernel:
    """Forward/backward pair subject to the finite-difference contract."""

    name: str
    arity: int
    forward: Callable[..., Array]
    backward: Callable[..., tuple]  # (inputs, output, upstream) -> per-input grads


@dataclass
class GradReport:
    kernel: str
    max_rel_error: float
    trials: int
    passed: bool

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return f"[{status}] {self.kernel}: max_rel_error={self.max_rel_error:.3e} ({self.trials} trials)"


def _rel_err(a: Array, n: Array) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradient(kernel: Kernel, inputs: list[Array], eps: float = 1e-5, tol: float = 1e-4) -> GradReport:
    """Compare the kernel's backward to central finite differences.

    The full Jacobian is checked: for every output coordinate the backward is
    run with a basis upstream and compared against (f(x+eps)-f(x-eps))/(2 eps)
    per input coordinate. Relative error is |a-n| / max(1, |a|, |n|).
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    inputs = [_as_array(x) for x in inputs]
    out = _as_array(kernel.forward(*inputs))
    if not np.all(np.isfinite(out)):
        return GradReport(kernel.name, float("inf"), 1, False)

    max_err = 0.0
    out_flat = out.reshape(-1)
    for k in range(out_flat.size):
        upstream = np.zeros_like(out)
        upstream.reshape(-1)[k] = 1.0
        analytic = kernel.backward(inputs, out, upstream)
        for j, x in enumerate(inputs):
            numeric = np.zeros_like(x)
            flat = x.reshape(-1)
            for c in range(flat.size):
                orig = flat[c]
                flat[c] = orig + eps
                fp = _as_array(kernel.forward(*inputs)).reshape(-1)[k]
                flat[c] = orig - eps
                fm = _as_array(kernel.forward(*inputs)).reshape(-1)[k]
                flat[c] = orig
                numeric.reshape(-1)[c] = (fp - fm) / (2.0 * eps)
            if not np.all(np.isfinite(numeric)):
                return GradReport(kernel.name, float("inf"), 1, False)
            max_err = max(max_err, _rel_err(_as_array(analytic[j]), numeric))
    return GradReport(kernel.name, max_err, 1, max_err <= tol)


def kernel_from_builder(name: str, arity: int, builder: Callable) -> Kernel:
    """Wrap a polymorphic op builder as a Kernel (backward = recorded tape)."""

    def forward(*arrays):
        return value_of(builder(*[_as_array(a) for a in arrays]))

    def backward_fn(inputs, output, upstream):
        leaves = [Var(_as_array(a).copy()) for a in inputs]
        out = builder(*leaves)
        backward(out, _as_array(upstream))
        return tuple(
            leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
            for leaf in leaves
        )

    return Kernel(name, arity, forward, backward_fn)


def _std_samplers(rng: np.random.Generator) -> dict[str, Callable[[], list[Array]]]:
    return {
        "sigmoid": lambda: [rng.normal(size=6) * 2.0],
        "softplus": lambda: [rng.normal(size=6) * 2.0],
        "leaky_relu": lambda: [rng.normal(size=6) + 0.05],  # jitter away from the kink
        "softmax_row": lambda: [rng.normal(size=8)],
        "cosine_sim": lambda: [rng.normal(size=8) + 0.1, rng.normal(size=8) + 0.1],
        "exp": lambda: [rng.normal(size=6)],
        "log": lambda: [rng.uniform(0.2, 3.0, size=6)],
        "sqrt": lambda: [rng.uniform(0.2, 3.0, size=6)],
        "matmul": lambda: [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))],
        "l1_norm": lambda: [rng.normal(size=8) + 0.03],  # keep off the |.| kink
        "rows_l2_normalize": lambda: [rng.normal(size=(3, 5)) + 0.1],
    }


def standard_kernels() -> dict[str, Kernel]:
    """The registered kernel set covered by the gradient suite."""
    return {
        "sigmoid": kernel_from_builder("sigmoid", 1, sigmoid),
        "softplus": kernel_from_builder("softplus", 1, softplus),
        "leaky_relu": kernel_from_builder("leaky_relu", 1, lambda x: leaky_relu(x, 0.2)),
        "softmax_row": kernel_from_builder("softmax_row", 1, softmax_row),
        "cosine_sim": kernel_from_builder("cosine_sim", 2, cosine_sim),
        "exp": kernel_from_builder("exp", 1, exp),
        "log": kernel_from_builder("log", 1, log),
        "sqrt": kernel_from_builder("sqrt", 1, sqrt),
        "matmul": kernel_from_builder("matmul", 2, matmul),
        "l1_norm": kernel_from_builder("l1_norm", 1, lambda x: reduce_sum(absolute(x))),
        "rows_l2_normalize": kernel_from_builder("rows_l2_normalize", 1, rows_l2_normalize),
    }


def run_gradient_suite(seed: int = 0, trials: int = 20, eps: float = 1e-5, tol: float = 1e-4) -> list[GradReport]:
    """Run every registered kernel through ``trials`` random FD checks."""
    rng = np.random.default_rng(seed)
    samplers = _std_samplers(rng)
    reports = []
    for name, kernel in standard_kernels().items():
        worst = 0.0
        ok = True
        for _ in range(trials):
            rep = check_gradient(kernel, samplers[name](), eps=eps, tol=tol)
            worst = max(worst, rep.max_rel_error)
            ok = ok and rep.passed
        reports.append(GradReport(name, worst, trials, ok))
    return reports


def check_scalar_function(
    fn: Callable[[Mapping[str, object]], object],
    params: Mapping[str, Array],
    eps: float = 1e-5,
    tol: float = 1e-4,
    name: str = "scalar_fn",
) -> GradReport:
    """FD-check a scalar-valued function of named parameter arrays.

    ``fn`` must be polymorphic: given plain arrays it returns a float (the FD
    oracle path); given Vars it builds the recorded graph (the checked path).
    """
    params = {k: _as_array(v) for k, v in params.items()}
    leaves = {k: Var(v.copy()) for k, v in params.items()}
    out = fn(leaves)
    if not isinstance(out, Var):
        raise TypeError("fn must return a Var when given Var inputs")
    backward(out)
    analytic = {
        k: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
        for k, leaf in leaves.items()
    }

    def eval_plain() -> float:
        return float(value_of(fn(params)))

    max_err = 0.0
    for key, arr in params.items():
        flat = arr.reshape(-1)
        numeric = np.zeros_like(flat)
        for c in range(flat.size):
            orig = flat[c]
            flat[c] = orig + eps
            fp = eval_plain()
            flat[c] = orig - eps
            fm = eval_plain()
            flat[c] = orig
            numeric[c] = (fp - fm) / (2.0 * eps)
        max_err = max(max_err, _rel_err(analytic[key].reshape(-1), numeric))
    return GradReport(name, max_err, 1, max_err <= tol)

"""Dense float64 tensor math with tape-based reverse-mode differentiation.

Every primitive in this module dispatches on its inputs: plain ``numpy``
arrays are computed eagerly with no bookkeeping, while :class:`Var`
inputs are recorded on the :class:`DiffTrace` that owns them.  Model code
is therefore written once and serves both the fast evaluation path and the
differentiable training path.

>>> v, g = value_and_gradient(lambda p: sum_(p["w"] * p["w"]), ParameterSet({"w": [1.0, 2.0]}))
>>> v, g["w"].tolist()
(5.0, [2.0, 4.0])
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass, field
from typing import Any

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf while recording."""

    def __init__(self, primitive: str, op_index: int, detail: str = ""):
        self.primitive = primitive
        self.op_index = op_index
        msg = f"primitive '{primitive}' (op #{op_index}) produced a non-finite value"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class UnsupportedPrimitiveError(ValueError):
    pass


class DomainError(ValueError):
    pass


def as_tensor(values: Any) -> np.ndarray:
    """Copy ``values`` into a finite float64 array."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if not np.all(np.isfinite(arr)):
        raise DomainError("tensor contains NaN or Inf")
    return arr


class ParameterSet(Mapping):
    """Immutable name -> float64 array map, iterated in lexicographic order."""

    __slots__ = ("_tensors",)

    def __init__(self, tensors: Mapping[str, Any] | None = None):
        items = {}
        for name in sorted(tensors or {}):
            arr = as_tensor(tensors[name])
            arr.setflags(write=False)
            items[name] = arr
        self._tensors = items

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{list(v.shape)}" for k, v in self._tensors.items())
        return f"ParameterSet({shapes})"

    def updated(self, changes: Mapping[str, Any]) -> "ParameterSet":
        merged = dict(self._tensors)
        merged.update(changes)
        return ParameterSet(merged)

    def subset(self, prefix: str) -> "ParameterSet":
        return ParameterSet({k: v for k, v in self._tensors.items() if k.startswith(prefix)})

    def n_values(self) -> int:
        return int(sum(v.size for v in self._tensors.values()))

    def equals(self, other: "ParameterSet") -> bool:
        if list(self) != list(other):
            return False
        return all(
            self[k].shape == other[k].shape and np.array_equal(self[k], other[k]) for k in self
        )


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Var:
    """A value recorded on a :class:`DiffTrace`."""

    __slots__ = ("value", "trace", "index")
    __array_ufunc__ = None

    def __init__(self, value: np.ndarray, trace: "DiffTrace", index: int):
        self.value = value
        self.trace = trace
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Var":
        return transpose(self)

    def __repr__(self) -> str:
        return f"Var(#{self.index}, shape={self.value.shape})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)


@dataclass
class _Node:
    primitive: str | None  # None for leaves and constants
    inputs: tuple[int, ...] = ()
    attrs: dict = field(default_factory=dict)
    requires_grad: bool = False


class DiffTrace:
    """Records primitive applications for a single reverse sweep.

    A trace is confined to the thread that records on it.
    """

    def __init__(self, check_finite: bool = True):
        self.check_finite = check_finite
        self.nodes: list[_Node] = []
        self.values: list[np.ndarray] = []

    def _push(self, value: np.ndarray, node: _Node) -> Var:
        self.nodes.append(node)
        self.values.append(value)
        return Var(value, self, len(self.nodes) - 1)

    def leaf(self, value: Any, requires_grad: bool = True) -> Var:
        return self._push(np.asarray(value, dtype=np.float64), _Node(None, requires_grad=requires_grad))

    def constant(self, value: Any) -> Var:
        return self.leaf(value, requires_grad=False)

    def apply(self, primitive: str, inputs: tuple, attrs: dict | None = None) -> Var:
        try:
            fwd = _FORWARD[primitive]
        except KeyError:
            raise UnsupportedPrimitiveError(f"unsupported primitive '{primitive}'") from None
        attrs = attrs or {}
        vars_ = []
        for x in inputs:
            if isinstance(x, Var):
                if x.trace is not self:
                    raise ValueError("cannot mix values from different traces")
                vars_.append(x)
            else:
                vars_.append(self.constant(x))
        with np.errstate(all="ignore"):  # reported below instead
            value = fwd(*[v.value for v in vars_], **attrs)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(primitive, len(self.nodes))
        requires = any(self.nodes[v.index].requires_grad for v in vars_)
        return self._push(value, _Node(primitive, tuple(v.index for v in vars_), attrs, requires))

    @property
    def n_ops(self) -> int:
        return sum(1 for n in self.nodes if n.primitive is not None)

    def primitives(self) -> list[str]:
        return [n.primitive for n in self.nodes if n.primitive is not None]

    def backward(self, output: Var) -> list[np.ndarray | None]:
        """Adjoints of ``output`` w.r.t. every node; ``None`` where unreachable."""
        if output.trace is not self:
            raise ValueError("output belongs to another trace")
        if output.value.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {output.value.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[output.index] = np.ones_like(output.value)
        values = self.values
        for i in range(output.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.primitive is None or not node.requires_grad:
                continue
            ins = [values[j] for j in node.inputs]
            contribs = _VJP[node.primitive](g, values[i], *ins, **node.attrs)
            for j, c in zip(node.inputs, contribs):
                if c is None or not self.nodes[j].requires_grad:
                    continue
                if grads[j] is None:
                    grads[j] = c
                else:
                    grads[j] = grads[j] + c
        return grads

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded value from the leaves, in recording order."""
        out: list[np.ndarray] = []
        for node, value in zip(self.nodes, self.values):
            if node.primitive is None:
                out.append(value)
            else:
                out.append(_FORWARD[node.primitive](*[out[j] for j in node.inputs], **node.attrs))
        return out


# ---------------------------------------------------------------------------
# Primitive registry
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _slice_vjp(g, out, a, index):
    full = np.zeros_like(a)
    full[index] = g
    return (full,)


def _concat_vjp(g, out, *parts, axis):
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _sum_vjp(g, out, a, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def _solve_vjp(g, out, a, b):
    gb = np.linalg.solve(_swap(a), g)
    ga = -gb @ _swap(out)
    return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))


def _logdet(a):
    sign, ld = np.linalg.slogdet(a)
    if np.any(sign <= 0):
        raise DomainError("logdet of a matrix that is not positive definite")
    return np.asarray(ld, dtype=np.float64)


def _logdet_vjp(g, out, a):
    return (np.asarray(g)[..., None, None] * _swap(np.linalg.inv(a)),)


def _matmul_vjp(g, out, a, b):
    return (_unbroadcast(g @ _swap(b), a.shape), _unbroadcast(_swap(a) @ g, b.shape))


def _sigmoid(a):
    return 0.5 * np.tanh(0.5 * a) + 0.5


_FORWARD: dict[str, Callable[..., np.ndarray]] = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "neg": np.negative,
    "matmul": np.matmul,
    "tanh": np.tanh,
    "sigmoid": _sigmoid,
    "softplus": lambda a: np.logaddexp(0.0, a),
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "clamp_min": lambda a, floor: np.maximum(a, floor),
    "sum": lambda a, axis, keepdims: np.asarray(np.sum(a, axis=axis, keepdims=keepdims)),
    "slice": lambda a, index: a[index],
    "concat": lambda *parts, axis: np.concatenate(parts, axis=axis),
    "broadcast": lambda a, shape: np.broadcast_to(a, shape).copy(),
    "reshape": lambda a, shape: a.reshape(shape),
    "transpose": _swap,
    "solve": np.linalg.solve,
    "logdet": _logdet,
}

_VJP: dict[str, Callable[..., tuple]] = {
    "add": lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    "sub": lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    "mul": lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    "div": lambda g, out, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)),
    "neg": lambda g, out, a: (-g,),
    "matmul": _matmul_vjp,
    "tanh": lambda g, out, a: (g * (1.0 - out * out),),
    "sigmoid": lambda g, out, a: (g * out * (1.0 - out),),
    "softplus": lambda g, out, a: (g * _sigmoid(a),),
    "exp": lambda g, out, a: (g * out,),
    "log": lambda g, out, a: (g / a,),
    "sqrt": lambda g, out, a: (0.5 * g / out,),
    "clamp_min": lambda g, out, a, floor: (g * (a >= floor),),
    "sum": _sum_vjp,
    "slice": _slice_vjp,
    "concat": _concat_vjp,
    "broadcast": lambda g, out, a, shape: (_unbroadcast(g, a.shape),),
    "reshape": lambda g, out, a, shape: (g.reshape(a.shape),),
    "transpose": lambda g, out, a: (_swap(g),),
    "solve": _solve_vjp,
    "logdet": _logdet_vjp,
}

PRIMITIVES = tuple(sorted(_FORWARD))


def _trace_of(args) -> DiffTrace | None:
    for a in args:
        if isinstance(a, Var):
            return a.trace
    return None


def _op(primitive: str, *args, **attrs):
    trace = _trace_of(args)
    if trace is None:
        return _FORWARD[primitive](*[np.asarray(a, dtype=np.float64) for a in args], **attrs)
    return trace.apply(primitive, args, attrs)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def add(a, b):
    return _op("add", a, b)


def sub(a, b):
    return _op("sub", a, b)


def mul(a, b):
    return _op("mul", a, b)


def div(a, b):
    return _op("div", a, b)


def neg(a):
    return _op("neg", a)


def matmul(a, b):
    if value_of(a).ndim < 2 or value_of(b).ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    return _op("matmul", a, b)


def tanh(a):
    return _op("tanh", a)


def sigmoid(a):
    return _op("sigmoid", a)


def softplus(a):
    return _op("softplus", a)


def exp(a):
    return _op("exp", a)


def log(a):
    return _op("log", a)


def sqrt(a):
    return _op("sqrt", a)


def clamp_min(a, floor: float):
    return _op("clamp_min", a, floor=float(floor))


def sum_(a, axis: int | None = None, keepdims: bool = False):
    return _op("sum", a, axis=axis, keepdims=keepdims)


def slice_(a, index):
    return _op("slice", a, index=index)


def concat(parts, axis: int = -1):
    return _op("concat", *parts, axis=axis)


def broadcast(a, shape):
    return _op("broadcast", a, shape=tuple(shape))


def reshape(a, shape):
    return _op("reshape", a, shape=tuple(shape))


def transpose(a):
    return _op("transpose", a)


def solve(a, b):
    return _op("solve", a, b)


def logdet(a):
    return _op("logdet", a)


# ---------------------------------------------------------------------------
# Differentiation drivers
# ---------------------------------------------------------------------------


def value_and_gradient(
    f: Callable[[Mapping[str, Any]], Any], params: ParameterSet
) -> tuple[float, ParameterSet]:
    """Evaluate scalar ``f(params)`` and its gradient w.r.t. every tensor."""
    trace = DiffTrace()
    leaves = {name: trace.leaf(params[name]) for name in params}
    out = f(leaves)
    if not isinstance(out, Var):
        raise TypeError("f must return a value computed from its parameters")
    grads = trace.backward(out)
    gradient = {}
    for name, leaf in leaves.items():
        g = grads[leaf.index]
        gradient[name] = np.zeros_like(params[name]) if g is None else g
    return float(out.value.reshape(-1)[0]), ParameterSet(gradient)


def evaluate(f: Callable[[Mapping[str, Any]], Any], params: Mapping[str, Any]) -> float:
    """Scalar ``f(params)`` on the eager path (no tape)."""
    out = value_of(f({k: np.asarray(v) for k, v in params.items()}))
    if out.size != 1:
        raise ValueError(f"f must be scalar-valued, got shape {out.shape}")
    return float(out.reshape(-1)[0])


@dataclass
class FiniteDifferenceReport:
    epsilon: float
    tolerance: float
    max_rel_error: dict[str, float]
    flagged: list[tuple[str, tuple[int, ...], float]]

    @property
    def passed(self) -> bool:
        return not self.flagged

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def flagged_names(self) -> list[str]:
        return sorted({name for name, _, _ in self.flagged})

    def lines(self) -> list[str]:
        return [f"{name:40s} max_rel_err={err:.3e}" for name, err in self.max_rel_error.items()]


def finite_difference_check(
    f: Callable[[Mapping[str, Any]], Any],
    params: ParameterSet,
    epsilon: float = 1e-5,
    tolerance: float = 1e-6,
    gradient: ParameterSet | None = None,
) -> FiniteDifferenceReport:
    """Compare analytic gradients with central differences, coordinate by coordinate.

    Relative error is ``|analytic - numeric| / max(1, |numeric|)``.  Pass
    ``gradient`` to audit a gradient computed elsewhere.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if gradient is None:
        _, gradient = value_and_gradient(f, params)
    work = {k: np.array(v) for k, v in params.items()}
    max_err: dict[str, float] = {}
    flagged = []
    for name in params:
        arr = work[name]
        flat = arr.reshape(-1)
        analytic = np.asarray(gradient[name]).reshape(-1)
        worst = 0.0
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            fp = evaluate(f, work)
            flat[k] = orig - epsilon
            fm = evaluate(f, work)
            flat[k] = orig
            numeric = (fp - fm) / (2.0 * epsilon)
            err = abs(analytic[k] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
            if err > tolerance:
                flagged.append((name, tuple(int(i) for i in np.unravel_index(k, arr.shape)), err))
        max_err[name] = worst
    return FiniteDifferenceReport(epsilon, tolerance, max_err, flagged)


# ---------------------------------------------------------------------------
# Gaussian helpers
# ---------------------------------------------------------------------------


def _check_positive(var, what: str = "variance"):
    if np.any(value_of(var) <= 0):
        raise DomainError(f"{what} must be strictly positive")


def gaussian_diag_logpdf(x, mean, var):
    """Log density of a diagonal Gaussian, summed over the last axis."""
    _check_positive(var)
    if value_of(x).shape[-1] != value_of(mean).shape[-1] or value_of(var).shape[-1] != value_of(mean).shape[-1]:
        raise ValueError("x, mean and var must have equal trailing dimension")
    diff = sub(x, mean)
    terms = add(log(var), div(mul(diff, diff), var))
    n = value_of(mean).shape[-1]
    return sub(mul(-0.5, sum_(terms, axis=-1)), 0.5 * n * LOG_2PI)


def kl_diag_gaussian(mean1, var1, mean2, var2):
    """KL(N(mean1, var1) || N(mean2, var2)) for diagonal covariances, summed over the last axis."""
    _check_positive(var1)
    _check_positive(var2)
    diff = sub(mean1, mean2)
    ratio = div(add(var1, mul(diff, diff)), var2)
    terms = sub(add(sub(log(var2), log(var1)), ratio), 1.0)
    return mul(0.5, sum_(terms, axis=-1))


def reparam_sample(mean, var, noise):
    """``mean + sqrt(var) * noise`` with caller-supplied standard-normal ``noise``."""
    if np.any(value_of(var) < 0):
        raise DomainError("variance must be non-negative")
    return add(mean, mul(sqrt(var), noise))


def variance_from_logvar(logvar, floor: float):
    return clamp_min(exp(logvar), floor)


def cholesky_jitter(s: np.ndarray, jitter: float = 1e-9, retries: int = 3) -> np.ndarray:
    """Cholesky factor of ``s``, adding ``jitter * I`` (x10 per retry) on failure."""
    try:
        return np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(s.shape[-1])
    for _ in range(retries):
        try:
            return np.linalg.cholesky(s + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise np.linalg.LinAlgError("matrix is not positive definite even after jitter")

"""Reverse-mode gradient engine on numpy arrays.

A :class:`Tape` records primitive operations (add, mul, gather/scatter,
norms, nonlinearities, softmax, clamps) as they execute; :meth:`Tape.backward`
replays them in exact reverse order to accumulate adjoints.  Every primitive
has a declared backward rule, including the straight-through substitution
used for hard assignments, so the sweep never meets an undefined derivative.

Recording is opt-in: the same math helpers operate on plain ``ndarray``
inputs (returning plain arrays) when no tape is active, which gives the
simulator a fast path that shares code with the differentiable path.
All values are float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig, NumericalError

_TINY = 1e-30


# ---------------------------------------------------------------------------
# tensors and the tape


class Tensor:
    """A float64 array participating in recording.

    ``grad`` accumulates adjoints across backward sweeps (several block
    tapes may contribute to the same leaf), so callers reset it between
    optimization steps via fresh leaves.
    """

    __slots__ = ("data", "grad")

    # keep numpy from hijacking `ndarray (op) Tensor`
    __array_ufunc__ = None

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_of(self, key)


def value_of(x):
    """Underlying ndarray of a Tensor, or the input itself."""
    return x.data if isinstance(x, Tensor) else x


# opcode -> (forward(aux, *input_arrays), backward(aux, grad, out, *input_arrays))
_REGISTRY: dict[str, tuple] = {}


class Tape:
    """Ordered record of primitive operations with input/output slots."""

    def __init__(self):
        self.entries = []  # (opcode, out_tensor, inputs, aux)
        self._prev = None

    def __enter__(self):
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = self._prev
        return False

    def __len__(self):
        return len(self.entries)

    def backward(self):
        """Propagate adjoints through all entries in reverse order.

        Seeds must already be planted in ``.grad`` of output tensors
        (``grad`` does this for the common single-objective case).
        Non-Tensor inputs receive no adjoint.
        """
        for opcode, out, inputs, aux in reversed(self.entries):
            g = out.grad
            if g is None:
                continue
            bwd = _REGISTRY[opcode][1]
            grads = bwd(aux, g, out.data, *[value_of(x) for x in inputs])
            for x, gx in zip(inputs, grads):
                if gx is not None and isinstance(x, Tensor):
                    x.grad = gx if x.grad is None else x.grad + gx

    def grad(self, objective, wrt):
        """Adjoints of a recorded scalar objective for each tensor in ``wrt``.

        Tensors that did not participate get exact zeros.  Raises
        NumericalError if the objective is non-finite.
        """
        if not np.all(np.isfinite(objective.data)):
            raise NumericalError("objective is not finite; refusing backward")
        objective.grad = np.ones_like(objective.data)
        self.backward()
        if isinstance(wrt, dict):
            return {
                k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in wrt.items()
            }
        return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]

    def replay(self):
        """Re-execute every recorded forward; True iff outputs are bit-identical."""
        ok = True
        for opcode, out, inputs, aux in self.entries:
            fwd = _REGISTRY[opcode][0]
            redone = fwd(aux, *[value_of(x) for x in inputs])
            ok = ok and np.array_equal(redone, out.data)
            out.data = redone
        return ok


_ACTIVE: Tape | None = None


def recording() -> bool:
    return _ACTIVE is not None


def _apply(opcode, aux, *inputs):
    datas = [value_of(x) for x in inputs]
    fwd = _REGISTRY[opcode][0]
    out_data = fwd(aux, *datas)
    if _ACTIVE is not None and any(isinstance(x, Tensor) for x in inputs):
        out = Tensor.__new__(Tensor)
        out.data = out_data
        out.grad = None
        _ACTIVE.entries.append((opcode, out, inputs, aux))
        return out
    return out_data


def _unbroadcast(g, shape):
    """Sum a broadcasted adjoint back to the original operand shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives

def _asarr(x):
    return np.asarray(x, dtype=np.float64)


_REGISTRY["add"] = (
    lambda aux, a, b: _asarr(a) + _asarr(b),
    lambda aux, g, out, a, b: (
        _unbroadcast(g, np.shape(a)),
        _unbroadcast(g, np.shape(b)),
    ),
)

_REGISTRY["sub"] = (
    lambda aux, a, b: _asarr(a) - _asarr(b),
    lambda aux, g, out, a, b: (
        _unbroadcast(g, np.shape(a)),
        _unbroadcast(-g, np.shape(b)),
    ),
)

_REGISTRY["mul"] = (
    lambda aux, a, b: _asarr(a) * _asarr(b),
    lambda aux, g, out, a, b: (
        _unbroadcast(g * b, np.shape(a)),
        _unbroadcast(g * a, np.shape(b)),
    ),
)

_REGISTRY["div"] = (
    lambda aux, a, b: _asarr(a) / _asarr(b),
    lambda aux, g, out, a, b: (
        _unbroadcast(g / b, np.shape(a)),
        _unbroadcast(-g * a / (np.asarray(b) ** 2), np.shape(b)),
    ),
)

_REGISTRY["neg"] = (
    lambda aux, a: -_asarr(a),
    lambda aux, g, out, a: (-g,),
)

_REGISTRY["matmul"] = (
    lambda aux, a, b: _asarr(a) @ _asarr(b),
    lambda aux, g, out, a, b: (g @ np.asarray(b).T, np.asarray(a).T @ g),
)

try:
    # scipy's __matmul__ adds ~25us of dispatch per call, which dominates the
    # integrator inner loop at desk scale; call its CSR kernel directly
    from scipy.sparse import _sparsetools as _spt

    def _csr_dense(mat, x):
        x = np.ascontiguousarray(x, dtype=np.float64)
        m, n = mat.shape
        if x.ndim == 1:
            out = np.zeros(m)
            _spt.csr_matvec(m, n, mat.indptr, mat.indices, mat.data, x, out)
            return out
        out = np.zeros((m, x.shape[1]))
        _spt.csr_matvecs(m, n, x.shape[1], mat.indptr, mat.indices, mat.data, x.ravel(), out.ravel())
        return out

except ImportError:  # pragma: no cover

    def _csr_dense(mat, x):
        return mat @ np.asarray(x, dtype=np.float64)


# aux: (mat, mat_transpose) pair of constant sparse matrices, applied on the left
_REGISTRY["spmm"] = (
    lambda aux, x: _csr_dense(aux[0], x),
    lambda aux, g, out, x: (_csr_dense(aux[1], g),),
)

_REGISTRY["gather"] = (
    lambda aux, a: a[aux],
    lambda aux, g, out, a: (_scatter_sum(g, aux, np.shape(a)[0]),),
)


def _scatter_sum(values, idx, n):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        return np.bincount(idx, weights=values, minlength=n)
    if values.shape[1] <= 4:
        out = np.empty((n,) + values.shape[1:], dtype=np.float64)
        for c in range(values.shape[1]):
            out[:, c] = np.bincount(idx, weights=values[:, c], minlength=n)
        return out
    out = np.zeros((n,) + values.shape[1:], dtype=np.float64)
    np.add.at(out, idx, values)
    return out


# aux: (idx, n)
_REGISTRY["scatter_add"] = (
    lambda aux, v: _scatter_sum(v, aux[0], aux[1]),
    lambda aux, g, out, v: (g[aux[0]],),
)


def _row_set_fwd(aux, a, vals):
    out = np.array(a, dtype=np.float64, copy=True)
    out[aux] = vals
    return out


def _row_set_bwd(aux, g, out, a, vals):
    ga = np.array(g, copy=True)
    ga[aux] = 0.0
    return ga, np.asarray(g[aux], dtype=np.float64)


# aux: row index array; overwrites those rows with `vals`
_REGISTRY["row_set"] = (_row_set_fwd, _row_set_bwd)


def _norm_rows_fwd(aux, a):
    return np.sqrt(np.einsum("ij,ij->i", a, a))[:, None]


def _norm_rows_bwd(aux, g, out, a):
    return (g * a / np.maximum(out, _TINY),)


_REGISTRY["norm_rows"] = (_norm_rows_fwd, _norm_rows_bwd)

_REGISTRY["sum"] = (
    lambda aux, a: np.sum(a, axis=aux[0], keepdims=aux[1]),
    lambda aux, g, out, a: (_spread(g, np.shape(a), aux),),
)


def _spread(g, shape, aux):
    axis, keepdims = aux
    g = np.asarray(g, dtype=np.float64)
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


_REGISTRY["sqrt"] = (
    lambda aux, a: np.sqrt(a),
    lambda aux, g, out, a: (g * 0.5 / np.maximum(out, _TINY),),
)

_REGISTRY["exp"] = (
    lambda aux, a: np.exp(a),
    lambda aux, g, out, a: (g * out,),
)

_REGISTRY["log"] = (
    lambda aux, a: np.log(a),
    lambda aux, g, out, a: (g / a,),
)

_REGISTRY["tanh"] = (
    lambda aux, a: np.tanh(a),
    lambda aux, g, out, a: (g * (1.0 - out * out),),
)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_REGISTRY["sigmoid"] = (
    lambda aux, a: _sigmoid(np.asarray(a, dtype=np.float64)),
    lambda aux, g, out, a: (g * out * (1.0 - out),),
)


def _softplus(x):
    # stable: max(x,0) + log1p(exp(-|x|))
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


_REGISTRY["softplus"] = (
    lambda aux, a: _softplus(np.asarray(a, dtype=np.float64)),
    lambda aux, g, out, a: (g * _sigmoid(np.asarray(a, dtype=np.float64)),),
)

# clamp against a constant; subgradient passes through on the kept side
_REGISTRY["maximum_const"] = (
    lambda aux, a: np.maximum(a, aux),
    lambda aux, g, out, a: (np.where(a >= aux, g, 0.0),),
)

_REGISTRY["minimum_const"] = (
    lambda aux, a: np.minimum(a, aux),
    lambda aux, g, out, a: (np.where(a <= aux, g, 0.0),),
)

# aux: boolean mask choosing `a` where True
_REGISTRY["where"] = (
    lambda aux, a, b: np.where(aux, a, b),
    lambda aux, g, out, a, b: (
        _unbroadcast(np.where(aux, g, 0.0), np.shape(a)),
        _unbroadcast(np.where(aux, 0.0, g), np.shape(b)),
    ),
)


def _concat_bwd(aux, g, out, *parts):
    axis, sizes = aux
    offs = np.cumsum([0] + list(sizes))
    sl = [slice(None)] * g.ndim
    grads = []
    for k in range(len(sizes)):
        sl[axis] = slice(offs[k], offs[k + 1])
        grads.append(g[tuple(sl)])
    return tuple(grads)


_REGISTRY["concat"] = (
    lambda aux, *parts: np.concatenate([_asarr(p) for p in parts], axis=aux[0]),
    _concat_bwd,
)

_REGISTRY["reshape"] = (
    lambda aux, a: np.reshape(a, aux),
    lambda aux, g, out, a: (np.reshape(g, np.shape(a)),),
)

_REGISTRY["transpose"] = (
    lambda aux, a: np.ascontiguousarray(np.asarray(a, dtype=np.float64).T),
    lambda aux, g, out, a: (np.ascontiguousarray(g.T),),
)


def _slice_bwd(aux, g, out, a):
    ga = np.zeros_like(np.asarray(a, dtype=np.float64))
    ga[aux] = g
    return (ga,)


_REGISTRY["slice"] = (
    lambda aux, a: np.array(a[aux], dtype=np.float64, copy=True),
    _slice_bwd,
)


def _softmax_rows(x):
    z = x - np.max(x, axis=1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=1, keepdims=True)


_REGISTRY["softmax_rows"] = (
    lambda aux, a: _softmax_rows(np.asarray(a, dtype=np.float64)),
    lambda aux, g, out, a: (out * (g - np.sum(g * out, axis=1, keepdims=True)),),
)

# straight-through: forward emits the constant hard array (aux), backward
# hands the adjoint to the soft input unchanged
_REGISTRY["ste"] = (
    lambda aux, soft: np.array(aux, dtype=np.float64, copy=True),
    lambda aux, g, out, soft: (g,),
)


# ---------------------------------------------------------------------------
# public op helpers


def add(a, b):
    return _apply("add", None, a, b)


def sub(a, b):
    return _apply("sub", None, a, b)


def mul(a, b):
    return _apply("mul", None, a, b)


def div(a, b):
    return _apply("div", None, a, b)


def neg(a):
    return _apply("neg", None, a)


def matmul(a, b):
    return _apply("matmul", None, a, b)


def spmm(mat, x):
    """Constant sparse matrix times a (possibly recorded) dense operand."""
    pair = getattr(mat, "_spmm_pair", None)
    if pair is None:
        import scipy.sparse as _sp

        fwd_mat = mat if isinstance(mat, _sp.csr_matrix) else _sp.csr_matrix(mat)
        pair = (fwd_mat, _sp.csr_matrix(fwd_mat.T))
        try:
            mat._spmm_pair = pair  # cache on the caller's object
        except AttributeError:
            pass
    return _apply("spmm", pair, x)


def gather_rows(a, idx):
    return _apply("gather", idx, a)


def scatter_add_rows(values, idx, n):
    return _apply("scatter_add", (idx, n), values)


def row_set(a, idx, values):
    return _apply("row_set", idx, a, values)


def norm_rows(a):
    return _apply("norm_rows", None, a)


def asum(a, axis=None, keepdims=False):
    return _apply("sum", (axis, keepdims), a)


def sqrt(a):
    return _apply("sqrt", None, a)


def exp(a):
    return _apply("exp", None, a)


def log(a):
    return _apply("log", None, a)


def tanh(a):
    return _apply("tanh", None, a)


def sigmoid(a):
    return _apply("sigmoid", None, a)


def softplus(a):
    return _apply("softplus", None, a)


def maximum(a, const):
    return _apply("maximum_const", const, a)


def minimum(a, const):
    return _apply("minimum_const", const, a)


def where(cond, a, b):
    return _apply("where", np.asarray(cond, dtype=bool), a, b)


def concat(parts, axis=0):
    sizes = [np.shape(value_of(p))[axis] for p in parts]
    return _apply("concat", (axis, sizes), *parts)


def reshape(a, shape):
    return _apply("reshape", tuple(shape), a)


def transpose(a):
    return _apply("transpose", None, a)


def slice_of(a, key):
    return _apply("slice", key, a)


def softmax_rows(a):
    return _apply("softmax_rows", None, a)


def straight_through(hard, soft):
    """Forward the hard array, route gradients to the soft relaxation."""
    return _apply("ste", np.asarray(hard, dtype=np.float64), soft)


def smooth_floor(x, bound, width=1e-3):
    """Smooth clamp to ``>= bound``: bound + width*softplus((x-bound)/width).

    Identity (to machine precision) well above the bound, strictly above
    the bound everywhere, and with a nonzero gradient near it.
    """
    return add(mul(softplus(mul(sub(x, bound), 1.0 / width)), width), bound)


# ---------------------------------------------------------------------------
# parameters and the optimizer


@dataclass
class Param:
    value: np.ndarray
    trainable: bool = True


class ParamStore:
    """Named flat parameter arrays with shape metadata and trainable flags."""

    def __init__(self):
        self._params: dict[str, Param] = {}
        self._leaves: dict[str, Tensor] = {}

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self._params:
            raise InvalidConfig(f"duplicate parameter name {name!r}")
        self._params[name] = Param(np.asarray(value, dtype=np.float64), trainable)

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> Param:
        return self._params[name]

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def trainable_names(self):
        return [k for k, p in self._params.items() if p.trainable]

    def set_value(self, name, value):
        p = self._params[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != p.value.shape:
            raise InvalidConfig(f"shape mismatch for {name}: {value.shape} vs {p.value.shape}")
        p.value = value

    def leaves(self) -> dict[str, Tensor]:
        """Fresh leaf tensors for one recording session (grads start empty)."""
        self._leaves = {k: Tensor(p.value) for k, p in self._params.items()}
        return self._leaves

    @property
    def active_leaves(self) -> dict[str, Tensor]:
        return self._leaves

    def n_scalars(self) -> int:
        return sum(p.value.size for p in self._params.values())


def grad(tape: Tape, objective, store: ParamStore) -> dict[str, np.ndarray]:
    """Adjoint of a recorded scalar for every trainable parameter.

    Parameters that did not participate receive exact zeros.
    """
    leaves = store.active_leaves
    out = tape.grad(objective, leaves)
    return {k: out[k] for k in store.trainable_names()}


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint 2-norm is <= max_norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0.0:
        s = max_norm / total
        for g in grads.values():
            g *= s
    return total


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_update(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    moments: AdamState,
    step: int,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps_opt: float = 1e-8,
    only: set[str] | None = None,
) -> AdamState:
    """Standard bias-corrected Adam step over trainable parameters.

    ``only`` restricts the update to a subset of names (moments for the
    rest still decay, matching a zero gradient).
    """
    if step < 1:
        raise InvalidConfig("Adam step index must be >= 1")
    b1, b2 = betas
    for name in store.trainable_names():
        p = store[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.value.shape:
            raise InvalidConfig(f"gradient shape mismatch for {name}")
        if only is not None and name not in only:
            g = np.zeros_like(p.value)
        m = moments.m.get(name)
        v = moments.v.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        moments.m[name] = m
        moments.v[name] = v
        mhat = m / (1.0 - b1**step)
        vhat = v / (1.0 - b2**step)
        p.value = p.value - lr * mhat / (np.sqrt(vhat) + eps_opt)
    moments.step = step
    return moments


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class FiniteDiffSample:
    name: str
    index: int
    tape_grad: float
    fd_grad: float
    rel_error: float
    smooth: bool


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    samples: list[FiniteDiffSample]

    @property
    def non_smooth(self):
        return [s for s in self.samples if not s.smooth]


def finite_diff_check(
    objective_fn,
    store: ParamStore,
    eps: float = 1e-6,
    samples: int = 10,
    rng: np.random.Generator | None = None,
) -> FiniteDiffReport:
    """Compare tape gradients against central finite differences.

    ``objective_fn`` maps a dict of name -> array-like (leaf tensors when
    recording, raw arrays otherwise) to a scalar.  Samples are drawn by
    first choosing a trainable array uniformly, then a scalar inside it,
    so small mechanical-parameter arrays are not drowned out by network
    weights.  Samples on a clamp kink (one-sided slopes disagree) are
    flagged non-smooth and excluded from the reported maximum.
    """
    if eps <= 0:
        raise InvalidConfig("eps must be positive")
    if samples < 1:
        raise InvalidConfig("samples must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng

    with Tape() as tape:
        leaves = store.leaves()
        loss = objective_fn(leaves)
    grads = tape.grad(loss, leaves)

    raw = {k: p.value for k, p in store.items()}

    def _scalar(v):
        arr = np.asarray(value_of(v), dtype=np.float64)
        return float(arr.reshape(()))

    f0 = _scalar(objective_fn(raw))

    names = store.trainable_names()
    out: list[FiniteDiffSample] = []
    max_err = 0.0
    for _ in range(samples):
        name = names[int(rng.integers(len(names)))]
        flat_idx = int(rng.integers(store[name].value.size))
        base = store[name].value

        def f_at(delta):
            pert = dict(raw)
            arr = np.array(base, copy=True)
            arr.flat[flat_idx] += delta
            pert[name] = arr
            return _scalar(objective_fn(pert)), float(arr.flat[flat_idx])

        (fp, xp), (fm, xm) = f_at(eps), f_at(-eps)
        # divide by the realized step so representability of eps cannot bias
        fd = (fp - fm) / (xp - xm)
        half = 0.5 * (xp - xm)
        slope_p = (fp - f0) / half
        slope_m = (f0 - fm) / half
        scale = max(abs(slope_p), abs(slope_m))
        smooth = not (scale > 1e-10 and abs(slope_p - slope_m) > 0.25 * scale)
        g_tape = float(grads[name].flat[flat_idx])
        rel = abs(g_tape - fd) / max(abs(fd), 1e-12)
        out.append(FiniteDiffSample(name, flat_idx, g_tape, fd, rel, smooth))
        if smooth:
            max_err = max(max_err, rel)
    return FiniteDiffReport(max_err, out)

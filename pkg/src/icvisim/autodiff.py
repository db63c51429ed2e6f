"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tape records a topologically ordered list of nodes; each node stores its
value (a float64 ndarray, 0-d for scalars), the indices of its parents, and
a closure computing the vector-Jacobian product. backward() walks the node
list in reverse, accumulating adjoints in a fixed order, so repeated calls
give bitwise-identical gradients.

The primitive set is deliberately small and enumerated below. Anything the
physics needs is composed from these:

    add sub mul div neg                  arithmetic (numpy broadcasting)
    exp ln tanh sqrt power softplus      elementwise transcendental
    maximum minimum                      elementwise clamps (ties -> first arg)
    matmul                               2-d matrix product
    wsum                                 weighted sum over given axes
    reshape stack_rows crop2d            structural
    linear_map                           generic linear operator with a
                                         caller-supplied forward/adjoint pair
                                         (used for stencil gathers and shifts)

Every op accepts plain ndarrays/floats as well as Vars and only records when
at least one operand is a Var, so the same physics code runs taped during
training and untaped during data generation.

Gradient conventions at nondifferentiable points: sqrt at exactly 0 has
adjoint 0, and max/min send the gradient to their first argument on ties
(this makes clamping a porosity that sits exactly at eps0 an identity).
"""

from __future__ import annotations

import numpy as np

from .errors import EvaluationError, RecordedDomainError, TapeError


def _finite(v: np.ndarray) -> bool:
    # sum() propagates NaN and +-Inf, giving a single cheap scalar check
    return bool(np.isfinite(v.sum()))


class Var:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape, idx, value):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.value.shape})"


class Tape:
    """Records a computation; owns node values, parents and vjp closures."""

    def __init__(self, validate: bool = True):
        self._values = []
        self._parents = []
        self._vjps = []
        self._ops = []
        self.validate = validate
        self.n_backward = 0

    def __len__(self):
        return len(self._values)

    def leaf(self, value, name: str = "") -> Var:
        v = np.asarray(value, dtype=float)
        return self._record("leaf:" + name, v, (), None)

    def _record(self, op: str, value: np.ndarray, parents: tuple, vjp) -> Var:
        if self.validate and not _finite(value):
            raise EvaluationError(f"non-finite value produced by op '{op}' at node {len(self._values)}")
        idx = len(self._values)
        self._values.append(value)
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._ops.append(op)
        return Var(self, idx, value)

    def gradients(self, output: Var, wrt: list) -> list:
        """Adjoints of a scalar output with respect to the given Vars.

        Unreached leaves get zero gradients. Deterministic: the reverse
        sweep visits nodes in fixed (reverse-record) order.
        """
        if output.tape is not self:
            raise TapeError("output node belongs to a different tape")
        if output.value.size != 1:
            raise TapeError(f"backward needs a scalar output, got shape {output.value.shape}")
        for w in wrt:
            if w.tape is not self:
                raise TapeError("gradient target belongs to a different tape")
        adj = [None] * (output.idx + 1)
        adj[output.idx] = np.ones_like(output.value)
        for i in range(output.idx, -1, -1):
            g = adj[i]
            if g is None or self._vjps[i] is None:
                continue
            contribs = self._vjps[i](g)
            for p, c in zip(self._parents[i], contribs):
                if c is None:
                    continue
                adj[p] = c if adj[p] is None else adj[p] + c
        self.n_backward += 1
        out = []
        for w in wrt:
            g = adj[w.idx] if w.idx <= output.idx else None
            out.append(np.zeros_like(w.value) if g is None else np.broadcast_to(g, w.value.shape) + 0.0)
        return out


def _tape_of(x):
    return x.tape if isinstance(x, Var) else None


def _join(a, b):
    ta, tb = _tape_of(a), _tape_of(b)
    if ta is not None and tb is not None and ta is not tb:
        raise TapeError("operands recorded on different tapes")
    return ta if ta is not None else tb


def value_of(x):
    """Underlying ndarray of a Var, or the input coerced to float64."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=float)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce an adjoint back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op, a, b, fwd, vjp_a, vjp_b):
    tape = _join(a, b)
    av, bv = value_of(a), value_of(b)
    out = fwd(av, bv)
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a.idx)
        vjps.append(lambda g: _unbroadcast(vjp_a(g, av, bv), av.shape))
    if isinstance(b, Var):
        parents.append(b.idx)
        vjps.append(lambda g: _unbroadcast(vjp_b(g, av, bv), bv.shape))
    if len(parents) == 2:
        fa, fb = vjps
        return tape._record(op, out, tuple(parents), lambda g: (fa(g), fb(g)))
    f0 = vjps[0]
    return tape._record(op, out, tuple(parents), lambda g: (f0(g),))


def add(a, b):
    return _binary("add", a, b, np.add, lambda g, av, bv: g, lambda g, av, bv: g)


def sub(a, b):
    return _binary("sub", a, b, np.subtract, lambda g, av, bv: g, lambda g, av, bv: -g)


def mul(a, b):
    return _binary("mul", a, b, np.multiply,
                   lambda g, av, bv: g * bv, lambda g, av, bv: g * av)


def div(a, b):
    bv = value_of(b)
    if np.any(bv == 0.0):
        raise RecordedDomainError("division by zero at record time")
    return _binary("div", a, b, np.divide,
                   lambda g, av, bv: g / bv,
                   lambda g, av, bv: -g * av / (bv * bv))


def neg(a):
    if not isinstance(a, Var):
        return -value_of(a)
    return a.tape._record("neg", -a.value, (a.idx,), lambda g: (-g,))


def maximum(a, b):
    # ties route the gradient to the first argument
    return _binary("maximum", a, b, np.maximum,
                   lambda g, av, bv: g * (av >= bv),
                   lambda g, av, bv: g * (bv > av))


def minimum(a, b):
    return _binary("minimum", a, b, np.minimum,
                   lambda g, av, bv: g * (av <= bv),
                   lambda g, av, bv: g * (bv < av))


def exp(a):
    if not isinstance(a, Var):
        return np.exp(value_of(a))
    out = np.exp(a.value)
    return a.tape._record("exp", out, (a.idx,), lambda g: (g * out,))


def ln(a):
    av = value_of(a)
    if np.any(av <= 0.0):
        raise RecordedDomainError("log of a nonpositive value at record time")
    if not isinstance(a, Var):
        return np.log(av)
    out = np.log(av)
    return a.tape._record("ln", out, (a.idx,), lambda g: (g / av,))


def tanh(a):
    if not isinstance(a, Var):
        return np.tanh(value_of(a))
    out = np.tanh(a.value)
    return a.tape._record("tanh", out, (a.idx,), lambda g: (g * (1.0 - out * out),))


def sqrt(a):
    av = value_of(a)
    if np.any(av < 0.0):
        raise RecordedDomainError("sqrt of a negative value at record time")
    if not isinstance(a, Var):
        return np.sqrt(av)
    out = np.sqrt(av)

    def vjp(g):
        # subgradient convention: adjoint 0 where the argument is exactly 0
        safe = np.where(out == 0.0, 1.0, out)
        return (np.where(out == 0.0, 0.0, g * 0.5 / safe),)

    return a.tape._record("sqrt", out, (a.idx,), vjp)


def power(a, p: float):
    """a**p with constant exponent p."""
    av = value_of(a)
    p = float(p)
    if p != round(p):
        if np.any(av < 0.0):
            raise RecordedDomainError("fractional power of a negative value")
    if p < 0 and np.any(av == 0.0):
        raise RecordedDomainError("negative power of zero")
    if not isinstance(a, Var):
        return av ** p
    out = av ** p
    return a.tape._record("power", out, (a.idx,), lambda g: (g * p * av ** (p - 1.0),))


def softplus(a):
    """log(1 + exp(a)), computed stably."""
    av = value_of(a)
    out = np.logaddexp(0.0, av)
    if not isinstance(a, Var):
        return out

    def vjp(g):
        with np.errstate(over="ignore"):
            s = 1.0 / (1.0 + np.exp(-av))
        return (g * s,)

    return a.tape._record("softplus", out, (a.idx,), vjp)


def matmul(a, b):
    tape = _join(a, b)
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise TapeError(f"matmul expects 2-d operands, got {av.shape} @ {bv.shape}")
    out = av @ bv
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a.idx)
        vjps.append(lambda g: g @ bv.T)
    if isinstance(b, Var):
        parents.append(b.idx)
        vjps.append(lambda g: av.T @ g)
    if len(parents) == 2:
        fa, fb = vjps
        return tape._record("matmul", out, tuple(parents), lambda g: (fa(g), fb(g)))
    f0 = vjps[0]
    return tape._record("matmul", out, tuple(parents), lambda g: (f0(g),))


def wsum(a, weights=None, axes=None):
    """Weighted sum reducing the given axes (all axes when axes is None).

    weights is a constant array broadcastable to a; it never carries
    gradients of its own.
    """
    av = value_of(a)
    w = None if weights is None else np.asarray(weights, dtype=float)
    term = av if w is None else av * w
    if axes is None:
        out = np.asarray(term.sum())
        red_axes = tuple(range(av.ndim))
    else:
        red_axes = axes if isinstance(axes, tuple) else (axes,)
        out = term.sum(axis=red_axes)
    if not isinstance(a, Var):
        return out

    def vjp(g):
        ge = g
        for ax in sorted(red_axes):
            ge = np.expand_dims(ge, ax)
        ge = np.broadcast_to(ge, av.shape)
        return (ge if w is None else ge * w,)

    return a.tape._record("wsum", out, (a.idx,), vjp)


def reshape(a, shape):
    if not isinstance(a, Var):
        return value_of(a).reshape(shape)
    orig = a.value.shape
    return a.tape._record("reshape", a.value.reshape(shape), (a.idx,),
                          lambda g: (g.reshape(orig),))


def stack_rows(rows):
    """Stack equal-length 1-d rows into a (k, n) matrix."""
    tapes = {id(r.tape): r.tape for r in rows if isinstance(r, Var)}
    if len(tapes) > 1:
        raise TapeError("stack_rows mixes tapes")
    tape = next(iter(tapes.values()), None)
    vals = [value_of(r) for r in rows]
    n = vals[0].shape
    for v in vals:
        if v.ndim != 1 or v.shape != n:
            raise TapeError("stack_rows expects equal-length 1-d rows")
    out = np.stack(vals)
    if tape is None:
        return out
    parents = tuple(r.idx for r in rows if isinstance(r, Var))
    var_rows = [k for k, r in enumerate(rows) if isinstance(r, Var)]

    def vjp(g):
        return tuple(g[k] for k in var_rows)

    return tape._record("stack_rows", out, parents, vjp)


def crop2d(a, rsl: slice, zsl: slice):
    """Slice the trailing two axes; the adjoint zero-pads back."""
    av = value_of(a)
    out = av[..., rsl, zsl]
    if not isinstance(a, Var):
        return out.copy()

    def vjp(g):
        full = np.zeros_like(av)
        full[..., rsl, zsl] = g
        return (full,)

    return a.tape._record("crop2d", out.copy(), (a.idx,), vjp)


def linear_map(a, fwd, adj, op_name: str = "linear_map"):
    """Apply a linear operator given as a (forward, adjoint) pair of array
    functions. The caller asserts linearity and adjointness; both are
    unit-tested for every pair the package installs here (stencil gathers,
    shifts). The VJP is simply the adjoint applied to the incoming gradient.
    """
    av = value_of(a)
    out = fwd(av)
    if not isinstance(a, Var):
        return out
    return a.tape._record(op_name, out, (a.idx,), lambda g: (adj(g),))


def clamp(a, lo, hi):
    """minimum(maximum(a, lo), hi); gradient passes through strictly-interior
    values and through values sitting exactly on a bound."""
    return minimum(maximum(a, lo), hi)


def scalar(x) -> float:
    v = value_of(x)
    if v.size != 1:
        raise TapeError(f"expected a scalar, got shape {v.shape}")
    return float(v)


def l2_norm(a, weights=None):
    """Euclidean norm as a taped scalar: sqrt(sum(w * a^2))."""
    return sqrt(wsum(mul(a, a), weights=weights))


def grad_check(f, x0: np.ndarray, h: float = 1e-5) -> float:
    """Max relative disagreement between reverse-mode and central-difference
    gradients of a scalar function f over the flat point x0.

    f must accept either a Var (taped evaluation) or an ndarray (plain
    evaluation) and return a scalar. The central-difference step is scaled
    per coordinate as h * max(1, |x_i|). Returns
    max_i |g_ad_i - g_fd_i| / (|g_fd_i| + 1e-12).
    """
    x0 = np.asarray(x0, dtype=float)
    tape = Tape()
    xv = tape.leaf(x0, "gradcheck-x")
    out = f(xv)
    if not isinstance(out, Var):
        raise TapeError("grad_check function did not touch the tape")
    if not _finite(out.value):
        raise EvaluationError("grad_check function produced a non-finite value")
    (g_ad,) = tape.gradients(out, [xv])
    g_fd = np.zeros_like(x0)
    flat = x0.ravel()
    fd = g_fd.ravel()
    for i in range(flat.size):
        hi = h * max(1.0, abs(flat[i]))
        xp = flat.copy(); xp[i] += hi
        xm = flat.copy(); xm[i] -= hi
        fp = float(f(xp.reshape(x0.shape)))
        fm = float(f(xm.reshape(x0.shape)))
        fd[i] = (fp - fm) / (2.0 * hi)
    denom = np.abs(g_fd) + 1e-12
    return float(np.max(np.abs(g_ad - g_fd) / denom))

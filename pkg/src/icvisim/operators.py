"""Pointwise neural constitutive operators for the densification model.

Three small MLPs stand in for the unknown constitutive laws:

    D_eff(eps, T, P) = softplus(MLP(.)) * d_scale      effective diffusivity
    K(T)             = softplus(MLP(.)) * k_scale      surface reaction rate
    S_v(eps)         = Shat_v(eps) * (1 + b*tanh(MLP)) surface area per volume

with Shat_v(eps) = 2 (eps/eps0) (1 - eps0) / r_f the cylinder-fiber surface
area estimate used as a multiplicative baseline for the learned correction.
The softplus/tanh output maps keep D_eff and K strictly positive and the
surface-area correction inside (1-b, 1+b), so any parameter vector yields a
physically admissible operator set.

Inputs are affinely mapped to [-1, 1] using the configured physical ranges;
out-of-range temperatures and pressures (extrapolation studies) are clipped
at +-2 in normalized units, with a counter recording how often that fired.

All evaluation code paths are polymorphic over taped Vars and plain numpy
arrays via the autodiff op layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError

# keeps the elliptic diagonal nonzero even if a softplus output underflows
POSITIVE_FLOOR = 1e-30


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected tanh network with a single linear output unit."""

    n_in: int
    hidden: tuple = (32, 32)

    def layer_dims(self) -> list:
        dims = [self.n_in, *self.hidden, 1]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    def param_count(self) -> int:
        return sum(h * w + h for h, w in self.layer_dims())


def init_mlp(spec: MlpSpec, seed) -> list:
    """Xavier-uniform weights, zero biases; deterministic in the seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = []
    for h, w in spec.layer_dims():
        limit = np.sqrt(6.0 / (h + w))
        params.append((rng.uniform(-limit, limit, size=(h, w)), np.zeros(h)))
    return params


def mlp_flatten(params) -> np.ndarray:
    return np.concatenate([np.concatenate([ad.value_of(W).ravel(), ad.value_of(b).ravel()])
                           for W, b in params])


def mlp_unflatten(spec: MlpSpec, flat: np.ndarray) -> list:
    flat = np.asarray(flat, dtype=float)
    if flat.size != spec.param_count():
        raise ContractError(f"flat vector has {flat.size} entries, spec needs {spec.param_count()}")
    params, k = [], 0
    for h, w in spec.layer_dims():
        W = flat[k:k + h * w].reshape(h, w); k += h * w
        b = flat[k:k + h]; k += h
        params.append((W.copy(), b.copy()))
    return params


def mlp_apply(params, X):
    """Forward pass; X has shape (n_in, N), result (1, N). Works on Vars."""
    h = X
    last = len(params) - 1
    for l, (W, b) in enumerate(params):
        h = ad.add(ad.matmul(W, h), ad.reshape(b, (ad.value_of(b).shape[0], 1)))
        if l != last:
            h = ad.tanh(h)
    return h


@dataclass
class Normalization:
    """Physical-to-normalized input maps shared by the three operators."""

    eps0: float
    r_f: float
    T_range: tuple = (1100.0, 1400.0)
    P_range: tuple = (400.0, 10000.0)
    clip_events: int = 0

    def __post_init__(self):
        if not (self.T_range[0] < self.T_range[1]) or not (0 < self.P_range[0] < self.P_range[1]):
            raise ContractError("normalization ranges must be increasing (and positive for P)")

    def svhat_coeff(self) -> float:
        """Shat_v = svhat_coeff * eps."""
        return 2.0 * (1.0 - self.eps0) / (self.eps0 * self.r_f)

    def eps_unit(self, eps):
        # porosity is already confined to [0, eps0]; no clipping needed
        return ad.sub(ad.mul(eps, 2.0 / self.eps0), 1.0)

    def _clip(self, x: np.ndarray) -> np.ndarray:
        out = np.clip(x, -2.0, 2.0)
        n = int(np.count_nonzero(out != x))
        if n:
            self.clip_events += n
        return out

    def T_unit(self, T) -> np.ndarray:
        lo, hi = self.T_range
        return self._clip((2.0 * (np.asarray(T, dtype=float) - lo) / (hi - lo)) - 1.0)

    def logP_unit(self, P) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        if np.any(P <= 0):
            raise ContractError("pressure must be positive")
        lo, hi = np.log(self.P_range[0]), np.log(self.P_range[1])
        return self._clip((2.0 * (np.log(P) - lo) / (hi - lo)) - 1.0)


def _per_cell(const_per_run, batch_shape) -> np.ndarray:
    """Broadcast a per-run constant to one entry per cell of the flattened
    (possibly batched) field."""
    c = np.atleast_1d(np.asarray(const_per_run, dtype=float))
    n = int(np.prod(batch_shape))
    if c.size == 1:
        return np.full(n, c[0])
    cells = n // c.size
    if cells * c.size != n:
        raise ContractError(f"cannot spread {c.size} run constants over shape {batch_shape}")
    return np.repeat(c, cells)


class NeuralDeff:
    """softplus-positive effective diffusivity network over (eps, T, log P)."""

    trainable = True
    block = "deff"

    def __init__(self, params, spec: MlpSpec, scale: float = 1e-3):
        if spec.n_in != 3:
            raise ContractError("diffusivity network takes (eps, T, logP)")
        self.params = params
        self.spec = spec
        self.scale = float(scale)

    def evaluate(self, norm: Normalization, eps, T, P, pv=None):
        shape = ad.value_of(eps).shape
        n = int(np.prod(shape))
        rows = [ad.reshape(norm.eps_unit(eps), (n,)),
                _per_cell(norm.T_unit(T), shape),
                _per_cell(norm.logP_unit(P), shape)]
        raw = mlp_apply(pv if pv is not None else self.params, ad.stack_rows(rows))
        d = ad.mul(ad.add(ad.softplus(raw), POSITIVE_FLOOR), self.scale)
        return ad.reshape(d, shape)


class NeuralK:
    """softplus-positive reaction-rate network over temperature alone."""

    trainable = True
    block = "k"

    def __init__(self, params, spec: MlpSpec, scale: float = 1e-4):
        if spec.n_in != 1:
            raise ContractError("reaction-rate network takes (T,)")
        self.params = params
        self.spec = spec
        self.scale = float(scale)

    def evaluate(self, norm: Normalization, T, pv=None):
        t = np.atleast_1d(norm.T_unit(T))
        raw = mlp_apply(pv if pv is not None else self.params, t[None, :])
        k = ad.mul(ad.add(ad.softplus(raw), POSITIVE_FLOOR), self.scale)
        if np.ndim(T) == 0:
            return ad.reshape(k, ())
        return ad.reshape(k, (t.size, 1, 1))


class NeuralSv:
    """Bounded multiplicative correction to the fiber surface-area estimate."""

    trainable = True
    block = "sv"

    def __init__(self, params, spec: MlpSpec, bound: float = 0.95):
        if spec.n_in != 2:
            raise ContractError("surface-area network takes (eps, Shat_v)")
        if not (0.0 < bound < 1.0):
            raise ContractError("correction bound must sit in (0, 1) to keep S_v positive")
        self.params = params
        self.spec = spec
        self.bound = float(bound)

    def evaluate(self, norm: Normalization, eps, pv=None):
        shape = ad.value_of(eps).shape
        n = int(np.prod(shape))
        eps_row = ad.reshape(norm.eps_unit(eps), (n,))
        # Shat_v normalized by its value at eps0 lands in [0,1]; remap to [-1,1]
        svhat_row = ad.sub(ad.mul(ad.reshape(eps, (n,)), 2.0 / norm.eps0), 1.0)
        raw = mlp_apply(pv if pv is not None else self.params, ad.stack_rows([eps_row, svhat_row]))
        corr = ad.add(1.0, ad.mul(self.bound, ad.tanh(raw)))
        svhat = ad.mul(ad.reshape(eps, (1, n)), norm.svhat_coeff())
        return ad.reshape(ad.mul(svhat, corr), shape)


BLOCK_ORDER = ("deff", "k", "sv")


@dataclass
class OperatorBundle:
    """The three constitutive operators plus shared normalization.

    Each slot is either a neural operator above or a truth-backed adapter
    with the same evaluate() signature and trainable=False. Parameter
    flattening and tape binding follow the fixed block order deff, k, sv
    restricted to the trainable slots.
    """

    norm: Normalization
    deff: object
    k: object
    sv: object

    def op(self, block: str):
        return {"deff": self.deff, "k": self.k, "sv": self.sv}[block]

    def trainable_blocks(self) -> list:
        return [b for b in BLOCK_ORDER if getattr(self.op(b), "trainable", False)]

    def param_count(self) -> int:
        return sum(self.op(b).spec.param_count() for b in self.trainable_blocks())

    def get_flat(self) -> np.ndarray:
        blocks = self.trainable_blocks()
        if not blocks:
            return np.zeros(0)
        return np.concatenate([mlp_flatten(self.op(b).params) for b in blocks])

    def set_flat(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.param_count():
            raise ContractError(f"parameter vector has {flat.size} entries, bundle needs {self.param_count()}")
        k = 0
        for b in self.trainable_blocks():
            op = self.op(b)
            n = op.spec.param_count()
            op.params = mlp_unflatten(op.spec, flat[k:k + n])
            k += n

    def bind(self, tape: ad.Tape) -> dict:
        """Register trainable parameters as tape leaves.

        Returns {block: [(W Var, b Var), ...]}; leaf order matches get_flat.
        """
        bound = {}
        for b in self.trainable_blocks():
            op = self.op(b)
            pv = []
            for l, (W, bias) in enumerate(op.params):
                pv.append((tape.leaf(W, f"{b}/W{l}"), tape.leaf(bias, f"{b}/b{l}")))
            bound[b] = pv
        return bound

    def bound_leaves(self, bound: dict) -> list:
        leaves = []
        for b in self.trainable_blocks():
            for W, bias in bound[b]:
                leaves.extend([W, bias])
        return leaves

    def grads_to_flat(self, grads: list) -> np.ndarray:
        if not grads:
            return np.zeros(0)
        return np.concatenate([g.ravel() for g in grads])

    def eval_deff(self, eps, T, P, bound: dict = None):
        pv = bound.get("deff") if bound else None
        if getattr(self.deff, "trainable", False):
            return self.deff.evaluate(self.norm, eps, T, P, pv=pv)
        return self.deff.evaluate(self.norm, eps, T, P)

    def eval_k(self, T, bound: dict = None):
        pv = bound.get("k") if bound else None
        if getattr(self.k, "trainable", False):
            return self.k.evaluate(self.norm, T, pv=pv)
        return self.k.evaluate(self.norm, T)

    def eval_sv(self, eps, bound: dict = None):
        pv = bound.get("sv") if bound else None
        if getattr(self.sv, "trainable", False):
            return self.sv.evaluate(self.norm, eps, pv=pv)
        return self.sv.evaluate(self.norm, eps)


def neural_bundle(norm: Normalization, hidden=(32, 32), seed=0,
                  d_scale: float = 1e-3, k_scale: float = 1e-4,
                  sv_bound: float = 0.95) -> OperatorBundle:
    """All-neural bundle with per-block seeds split from the given seed."""
    ss = np.random.SeedSequence(seed).spawn(3)
    sd = MlpSpec(3, tuple(hidden))
    sk = MlpSpec(1, tuple(hidden))
    ss_v = MlpSpec(2, tuple(hidden))
    return OperatorBundle(
        norm,
        NeuralDeff(init_mlp(sd, ss[0]), sd, d_scale),
        NeuralK(init_mlp(sk, ss[1]), sk, k_scale),
        NeuralSv(init_mlp(ss_v, ss[2]), ss_v, sv_bound),
    )

"""Ground-truth constitutive laws and synthetic measurement generation.

These closed-form laws drive the twin experiments: data are generated by the
same discrete solver with the truth operators plugged in, then the neural
operators must recover them from noisy mass observations alone.

    K(T)        = k0 * exp(-E_r / (R T))
    D_AB(T, P)  = 1e-5 * T^1.75 / P
    D_K(T)      = (2/3) * sqrt(8 R T / (pi M_d)) * r_pore
    D_eff       = eps * D_K * D_AB / (tau0 * (D_K + D_AB))
    S_v(eps)    = (eps/eps0) ((1-eps0)/r_f) sqrt(1 - (eps0/(1-eps0)) ln(eps/eps0))

with R = 8.314 J/(mol K). The boundary molarity is the ideal-gas value
C_bc = P_precursor / (R T).

Every law is written against the autodiff op layer, so the same code runs
taped (hybrid training with some operators known) or plain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .grid import AxiGrid, SegmentSpec, initial_state
from .operators import Normalization, OperatorBundle, POSITIVE_FLOOR
from .solver import (GAS_CONSTANT, Material, OperatingCondition, SolverConfig,
                     batched_observables, molarity_bc, rollout)


@dataclass(frozen=True)
class TruthParams:
    """Physical constants of the synthetic-truth deposition system."""

    M_d: float = 0.01199      # kg/mol deposited species
    rho_d: float = 2260.0     # kg/m^3 deposit density
    q: float = 1.0            # mol deposit per mol precursor
    k0: float = 2.62          # m/s Arrhenius prefactor
    E_r: float = 1.46e5       # J/mol activation energy
    tau0: float = 6.78        # tortuosity
    eps0: float = 0.6         # initial porosity
    r_pore: float = 1e-5      # m Knudsen pore radius
    r_f: float = 5e-6         # m fiber radius

    def material(self) -> Material:
        return Material(self.M_d, self.rho_d, self.q, self.eps0)


def true_k(T, p: TruthParams):
    return ad.mul(p.k0, ad.exp(ad.mul(-p.E_r / GAS_CONSTANT, ad.div(1.0, T))))


def true_dab(T, P, p: TruthParams = None):
    return ad.div(ad.mul(1e-5, ad.power(T, 1.75)), P)


def true_dk(T, p: TruthParams):
    return ad.mul((2.0 / 3.0) * p.r_pore,
                  ad.sqrt(ad.mul(8.0 * GAS_CONSTANT / (math.pi * p.M_d), T)))


def true_deff(eps, T, P, p: TruthParams):
    """Bosanquet-combined bulk and Knudsen diffusion scaled by porosity.

    A 1e-30 floor keeps the elliptic operator nonsingular where pores have
    fully closed (eps = 0); it is invisible at the 1e-4 working scale.
    """
    dab = true_dab(T, P)
    dk = true_dk(T, p)
    coeff = ad.div(ad.mul(dk, dab), ad.mul(p.tau0, ad.add(dk, dab)))
    return ad.add(ad.mul(eps, coeff), POSITIVE_FLOOR)


class EventCounter:
    def __init__(self):
        self.count = 0


def true_sv(eps, p: TruthParams, counter: EventCounter = None):
    """Overlapping-cylinder surface area per volume.

    The log argument is floored so fully densified cells evaluate to
    S_v -> 0 instead of NaN, and the bracket is clamped at zero (it can only
    go negative for out-of-range eps > eps0); clamps are counted if a
    counter is supplied.
    """
    ratio = ad.div(ad.maximum(eps, 1e-300), p.eps0)
    bracket = ad.sub(1.0, ad.mul(p.eps0 / (1.0 - p.eps0), ad.ln(ratio)))
    if counter is not None:
        n = int(np.count_nonzero(ad.value_of(bracket) < 0.0))
        if n:
            counter.count += n
    root = ad.sqrt(ad.maximum(bracket, 0.0))
    return ad.mul(ad.mul(ratio, (1.0 - p.eps0) / p.r_f), root)


class TruthDeff:
    trainable = False
    block = "deff"

    def __init__(self, p: TruthParams):
        self.p = p

    def evaluate(self, norm, eps, T, P):
        Tb, Pb = _per_run_consts(T, P, ad.value_of(eps).shape)
        return true_deff(eps, Tb, Pb, self.p)


class TruthK:
    trainable = False
    block = "k"

    def __init__(self, p: TruthParams):
        self.p = p

    def evaluate(self, norm, T):
        if np.ndim(T) == 0:
            return float(ad.value_of(true_k(float(T), self.p)))
        return np.asarray(true_k(np.asarray(T, dtype=float), self.p)).reshape(-1, 1, 1)


class TruthSv:
    trainable = False
    block = "sv"

    def __init__(self, p: TruthParams):
        self.p = p
        self.counter = EventCounter()

    def evaluate(self, norm, eps):
        return true_sv(eps, self.p, self.counter)


def _per_run_consts(T, P, shape):
    """Reshape per-run scalars so they broadcast over (B, nr, nz) fields."""
    if len(shape) == 3 and np.ndim(T) > 0 and np.size(T) == shape[0]:
        return (np.asarray(T, dtype=float).reshape(-1, 1, 1),
                np.asarray(P, dtype=float).reshape(-1, 1, 1))
    return float(np.ravel(T)[0]) if np.ndim(T) else float(T), \
        float(np.ravel(P)[0]) if np.ndim(P) else float(P)


def truth_bundle(p: TruthParams, norm: Normalization = None) -> OperatorBundle:
    """Bundle evaluating the closed-form laws (nothing trainable)."""
    if norm is None:
        norm = Normalization(p.eps0, p.r_f)
    return OperatorBundle(norm, TruthDeff(p), TruthK(p), TruthSv(p))


def hybrid_bundle(p: TruthParams, neural: dict, norm: Normalization = None) -> OperatorBundle:
    """Truth bundle with selected slots replaced by neural operators.

    neural maps block name ('deff' | 'k' | 'sv') to an operator instance.
    """
    b = truth_bundle(p, norm)
    for name, op in neural.items():
        if name not in ("deff", "k", "sv"):
            raise ContractError(f"unknown operator block '{name}'")
        setattr(b, name, op)
    return b


# ----------------------------------------------------------------- datasets

def twin_conditions(duration_s: float = 350 * 3600.0,
                    temperatures=(1200.0, 1250.0, 1300.0),
                    pressures=(800.0, 1600.0, 3200.0)) -> list:
    """The 3x3 condition grid of the basic twin study; the feed is pure
    precursor, so total pressure equals the precursor partial pressure."""
    return [OperatingCondition(T, P, P, duration_s)
            for T in temperatures for P in pressures]


def wide_twin_conditions(duration_s: float = 350 * 3600.0) -> list:
    """The broader 5-temperature x 3-pressure grid (15 runs)."""
    return twin_conditions(duration_s,
                           temperatures=(1150.0, 1200.0, 1250.0, 1300.0, 1350.0),
                           pressures=(800.0, 1600.0, 3200.0))


def generate_synthetic(conditions, obs_times_s, seg: SegmentSpec, grid: AxiGrid,
                       p: TruthParams, cfg: SolverConfig,
                       noise_rel: float = 0.01, seed: int = 0,
                       cycle_index: int = 0):
    """Roll the truth model over the conditions and emit noisy observations.

    All runs advance in one batch through the same numerical path the
    training loss uses, so with zero noise and truth parameters the loss
    data term vanishes identically. Returns a list of run dicts, one per
    condition, each with the condition, times, clean and noisy segment
    masses, and the noise sigma.

    Noise is iid Gaussian with one sigma per run,
    sigma = noise_rel * (final total deposited mass of that run); per-run
    generators are split off the master seed with numpy
    SeedSequence(seed).spawn, so any subset regenerates identically.
    Negative noisy masses are clipped to zero (mass records are
    nonnegative); at percent-level noise this never fires in practice.
    """
    bundle = truth_bundle(p)
    times, masses, _ = batched_observables(bundle, conditions, grid, p.material(),
                                           cfg, obs_times_s, seg=seg)
    seeds = np.random.SeedSequence(seed).spawn(len(conditions))
    runs = []
    for i, cond in enumerate(conditions):
        clean = masses[:, i, :].copy()
        final_total = float(clean[-1].sum())
        sigma = noise_rel * final_total
        rng = np.random.Generator(np.random.PCG64(seeds[i]))
        noisy = clean + rng.normal(0.0, sigma, size=clean.shape) if sigma > 0 else clean.copy()
        noisy = np.maximum(noisy, 0.0)
        runs.append({
            "condition": cond,
            "times_s": np.asarray(times),
            "clean": clean,
            "noisy": noisy,
            "sigma": sigma,
            "cycle_index": cycle_index,
        })
    return runs


def benzinger_conditions(duration_s: float = 120 * 3600.0):
    """Literature-style single-temperature study: fixed furnace conditions,
    varying precursor fraction of a 20 kPa total pressure at 1373.15 K.

    Returns (train, test_interp, test_extrap) condition lists.
    """
    T, P_tot = 1373.15, 20000.0
    mk = lambda pr: OperatingCondition(T, P_tot, pr, duration_s)
    train = [mk(8000.0), mk(12000.0), mk(16000.0)]
    interp = [mk(10000.0), mk(14000.0)]
    extrap = [mk(4000.0), mk(20000.0)]
    return train, interp, extrap


def benzinger_truth() -> TruthParams:
    """Truth constants for the literature-style fixture (dense weave)."""
    return TruthParams(eps0=0.23)

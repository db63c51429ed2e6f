"""Quasi-steady reaction-diffusion solve and porosity time stepping.

Each time step solves the elliptic balance

    D_eff * lap(C) = K * S_v * C          (literal form, the default)
    div(D_eff grad C) = K * S_v * C       (conservative flux form, optional)

for the precursor molarity C on the axisymmetric grid, then advances the
porosity with the deposition law

    d(eps)/dt = -(q * M_d / rho_d) * K * S_v * C

using explicit Euler or an RK4 variant that refreezes C over the step. The
linear solve is plain point Jacobi, unrolled: when coefficients are taped
Vars every sweep lands on the tape and gradients flow through the whole
iteration. Warm starts reuse the previous step's molarity.

Discretization: cell-centered, r_i = (i+1/2) dr. The radial part of the
Laplacian uses face radii, (1/r_i) d/dr (r dC/dr) ->
[r_{i+1/2}(C_{i+1}-C_i) - r_{i-1/2}(C_i - C_{i-1})] / (r_i dr^2), which makes
the axis boundary condition automatic (r_{-1/2} = 0). Dirichlet faces use a
ghost cell 2*C_bc - C_edge, folded into a diagonal correction plus a source;
zero-flux faces are mirrored (their terms drop out).

All field arguments may carry a leading batch axis (B, nr, nz) so several
operating conditions share one tape; per-run boundary values broadcast as
(B, 1, 1).

The Jacobi update is a nonnegative convex-like combination whenever
K*S_v >= 0, so iterates (and hence converged solutions) respect
0 <= C <= max Dirichlet value sweep by sweep.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DivergenceError, SingularityError
from .grid import AxiGrid, CviState, ScalarField, SegmentSpec, segment_weight_matrix

FACES = ("outer", "top", "bottom")

GAS_CONSTANT = 8.314  # J / (mol K), the value used consistently throughout


def molarity_bc(P_precursor: float, T: float) -> float:
    """Ideal-gas molarity of the precursor at the preform surface."""
    if P_precursor < 0 or T <= 0:
        raise ContractError("need P_precursor >= 0 and T > 0")
    return P_precursor / (GAS_CONSTANT * T)


@dataclass(frozen=True)
class Material:
    """Deposit properties entering the porosity update."""

    M_d: float
    rho_d: float
    q: float
    eps0: float

    def rate_coeff(self) -> float:
        return self.q * self.M_d / self.rho_d


@dataclass(frozen=True)
class OperatingCondition:
    """One isothermal infiltration run."""

    T_K: float
    P_total_Pa: float
    P_precursor_Pa: float
    duration_s: float

    def __post_init__(self):
        if self.T_K <= 0 or self.P_total_Pa <= 0:
            raise ContractError("temperature and total pressure must be positive")
        if not (0.0 <= self.P_precursor_Pa <= self.P_total_Pa):
            raise ContractError("precursor partial pressure must lie in [0, P_total]")
        if self.duration_s < 0:
            raise ContractError("duration must be nonnegative")


@dataclass(frozen=True)
class BoundarySpec:
    """Kinds and values for the three exposed faces; the axis is always
    zero-flux. kind is 'dirichlet' or 'zero_flux'; values may be scalars or
    per-run (B,) arrays."""

    kinds: dict
    values: dict

    def __post_init__(self):
        for f in FACES:
            if self.kinds.get(f) not in ("dirichlet", "zero_flux"):
                raise ContractError(f"face '{f}' needs kind dirichlet or zero_flux")
        if not any(self.kinds[f] == "dirichlet" for f in FACES):
            raise ContractError("at least one Dirichlet face is required (otherwise singular)")

    @staticmethod
    def uniform_dirichlet(value) -> "BoundarySpec":
        return BoundarySpec({f: "dirichlet" for f in FACES}, {f: value for f in FACES})

    def max_value(self) -> float:
        vals = [np.max(np.asarray(self.values[f], dtype=float))
                for f in FACES if self.kinds[f] == "dirichlet"]
        return float(max(vals))


@dataclass(frozen=True)
class SolverConfig:
    jacobi_tol: float = 1e-8
    max_sweeps: int = 200          # per-solve hard cap (unrolled on tape)
    cold_sweeps: int = 1000        # cap for the first solve of a rollout
    check_every: int = 8           # residual evaluation cadence
    warm_start: bool = True
    flux_form: bool = False
    dt_s: float = 3600.0
    stepper: str = "euler"         # "euler" | "rk4-frozen-c"
    fixed_sweeps: int = 0          # >0: run exactly this many sweeps, no checks

    def __post_init__(self):
        if self.jacobi_tol <= 0 or self.max_sweeps < 1 or self.dt_s <= 0:
            raise ContractError("solver config values out of range")
        if self.stepper not in ("euler", "rk4-frozen-c"):
            raise ContractError(f"unknown stepper '{self.stepper}'")


class Stencil:
    """Geometry part of the five-point operator with BCs baked in.

    Weight arrays are zero on cells whose neighbor in that direction is a
    boundary; Dirichlet faces contribute 2*w to the diagonal and 2*w*bc to
    the source. gather/gather_adjoint form a verified linear adjoint pair
    used through the autodiff linear_map primitive.
    """

    def __init__(self, grid: AxiGrid, bc: BoundarySpec):
        nr, nz, dr, dz = grid.nr, grid.nz, grid.dr, grid.dz
        r = grid.r_centers
        rf = grid.r_faces
        self.grid, self.bc = grid, bc
        wE = np.zeros((nr, nz))
        wW = np.zeros((nr, nz))
        wN = np.zeros((nr, nz))
        wS = np.zeros((nr, nz))
        wE[:-1, :] = (rf[1:-1] / (r[:-1] * dr * dr))[:, None]
        wW[1:, :] = (rf[1:-1] / (r[1:] * dr * dr))[:, None]
        wN[:, :-1] = 1.0 / (dz * dz)
        wS[:, 1:] = 1.0 / (dz * dz)
        self.w = {"E": wE, "W": wW, "N": wN, "S": wS}
        diag = wE + wW + wN + wS
        # boundary-face geometric weights (per unit D for the flux form)
        face_w = {
            "outer": np.zeros((nr, nz)),
            "top": np.zeros((nr, nz)),
            "bottom": np.zeros((nr, nz)),
        }
        face_w["outer"][-1, :] = rf[-1] / (r[-1] * dr * dr)
        face_w["top"][:, -1] = 1.0 / (dz * dz)
        face_w["bottom"][:, 0] = 1.0 / (dz * dz)
        self.face_w = face_w
        self.dirichlet_faces = [f for f in FACES if bc.kinds[f] == "dirichlet"]
        for f in self.dirichlet_faces:
            diag = diag + 2.0 * face_w[f]
        self.diag = diag
        if np.any(diag <= 0.0):
            raise SingularityError("stencil diagonal has nonpositive entries")

    def bc_value_fields(self, batched: bool):
        """Per-face boundary values as scalars or (B,1,1) arrays."""
        out = {}
        for f in self.dirichlet_faces:
            v = np.asarray(self.bc.values[f], dtype=float)
            out[f] = float(v) if v.ndim == 0 else v.reshape(-1, 1, 1)
        return out

    def source(self, batched: bool):
        """sum over Dirichlet faces of 2 * w_face * bc (constant array)."""
        vals = self.bc_value_fields(batched)
        src = None
        for f in self.dirichlet_faces:
            term = 2.0 * self.face_w[f] * vals[f]
            src = term if src is None else src + term
        return src

    def gather(self, x: np.ndarray) -> np.ndarray:
        w = self.w
        out = np.zeros_like(x)
        out[..., :-1, :] += w["E"][:-1, :] * x[..., 1:, :]
        out[..., 1:, :] += w["W"][1:, :] * x[..., :-1, :]
        out[..., :, :-1] += w["N"][:, :-1] * x[..., :, 1:]
        out[..., :, 1:] += w["S"][:, 1:] * x[..., :, :-1]
        return out

    def gather_adjoint(self, g: np.ndarray) -> np.ndarray:
        w = self.w
        out = np.zeros_like(g)
        out[..., 1:, :] += w["E"][:-1, :] * g[..., :-1, :]
        out[..., :-1, :] += w["W"][1:, :] * g[..., 1:, :]
        out[..., :, 1:] += w["N"][:, :-1] * g[..., :, :-1]
        out[..., :, :-1] += w["S"][:, 1:] * g[..., :, 1:]
        return out

    def taped_gather(self, x):
        return ad.linear_map(x, self.gather, self.gather_adjoint, "stencil_gather")

    def lap(self, C: np.ndarray, src) -> np.ndarray:
        """Discrete Laplacian including BC source, plain arrays only."""
        return self.gather(C) + src - self.diag * C

    # zero-fill neighbor shifts (used by the flux form); direction names the
    # neighbor being fetched
    def _shift(self, d):
        def fwd(x):
            out = np.zeros_like(x)
            if d == "E":
                out[..., :-1, :] = x[..., 1:, :]
            elif d == "W":
                out[..., 1:, :] = x[..., :-1, :]
            elif d == "N":
                out[..., :, :-1] = x[..., :, 1:]
            else:
                out[..., :, 1:] = x[..., :, :-1]
            return out

        def adj(g):
            out = np.zeros_like(g)
            if d == "E":
                out[..., 1:, :] = g[..., :-1, :]
            elif d == "W":
                out[..., :-1, :] = g[..., 1:, :]
            elif d == "N":
                out[..., :, 1:] = g[..., :, :-1]
            else:
                out[..., :, :-1] = g[..., :, 1:]
            return out

        return fwd, adj

    def shift(self, x, d):
        fwd, adj = self._shift(d)
        return ad.linear_map(x, fwd, adj, f"shift_{d}")


def flux_coefficients(st: Stencil, deff, batched: bool):
    """Per-direction face weights w_d = geom_d * mean(D, D_neighbor) and the
    matching diagonal and source for the conservative form. deff may be a
    Var; everything returned is then taped."""
    w = {}
    for d in ("E", "W", "N", "S"):
        dn = st.shift(deff, d)
        w[d] = ad.mul(ad.add(deff, dn), 0.5 * st.w[d])
    diag = ad.add(ad.add(w["E"], w["W"]), ad.add(w["N"], w["S"]))
    src = None
    vals = st.bc_value_fields(batched)
    for f in st.dirichlet_faces:
        wb = ad.mul(deff, st.face_w[f])
        diag = ad.add(diag, ad.mul(wb, 2.0))
        term = ad.mul(wb, 2.0 * np.asarray(vals[f]))
        src = term if src is None else ad.add(src, term)
    return w, diag, src


@dataclass
class SolveInfo:
    sweeps: int
    rel_residual: float
    converged: bool
    flags: list = field(default_factory=list)


def _batch_rel_residual(r: np.ndarray, bnorm: np.ndarray) -> float:
    """Worst per-run relative residual; r is (..., nr, nz)."""
    if r.ndim == 2:
        rn = np.linalg.norm(r.ravel())
        return float(rn / bnorm)
    rn = np.sqrt((r * r).sum(axis=(-2, -1)))
    return float(np.max(rn / bnorm))


def jacobi_solve(deff, k_field, sv_field, bc: BoundarySpec, grid: AxiGrid,
                 cfg: SolverConfig, warm=None, stencil: Stencil = None,
                 cold: bool = False):
    """Solve the quasi-steady molarity balance by unrolled point Jacobi.

    deff, k_field, sv_field broadcast against each other to the field shape
    (optionally batched). Returns (C, SolveInfo); C is a Var whenever any
    coefficient is. Raises DivergenceError on a non-finite iterate and
    SingularityError if the effective diagonal is not strictly positive.
    """
    st = stencil if stencil is not None else Stencil(grid, bc)
    react = ad.mul(k_field, sv_field)
    dv = ad.value_of(deff)
    rv = ad.value_of(react)
    if np.any(dv <= 0.0):
        raise ContractError("effective diffusivity must be strictly positive")
    if np.any(rv < 0.0):
        raise ContractError("reaction coefficient K*S_v must be nonnegative")
    shape = np.broadcast_shapes(dv.shape, rv.shape, (grid.nr, grid.nz))
    batched = len(shape) == 3

    taped = isinstance(deff, ad.Var) or isinstance(react, ad.Var) or isinstance(warm, ad.Var)
    if cfg.flux_form:
        w, diag, src = flux_coefficients(st, deff, batched)
        denom = ad.add(diag, react)
        if np.any(ad.value_of(denom) <= 0.0):
            raise SingularityError("flux-form diagonal not strictly positive")
        invd = ad.div(1.0, denom)
        srcv = ad.value_of(src)

        def sweep(C):
            num = ad.add(ad.add(ad.mul(w["E"], st.shift(C, "E")), ad.mul(w["W"], st.shift(C, "W"))),
                         ad.add(ad.mul(w["N"], st.shift(C, "N")), ad.mul(w["S"], st.shift(C, "S"))))
            return ad.mul(ad.add(num, src), invd)

        def residual(Cv):
            wv = {d: ad.value_of(w[d]) for d in w}
            num = sum(wv[d] * st._shift(d)[0](Cv) for d in wv)
            return num + srcv - ad.value_of(denom) * Cv
    else:
        src_geom = st.source(batched)
        denom = ad.add(ad.mul(deff, st.diag), react)
        if np.any(ad.value_of(denom) <= 0.0):
            raise SingularityError("effective diagonal not strictly positive")
        invd = ad.div(1.0, denom)
        srcd = ad.mul(deff, src_geom)
        srcdv = ad.value_of(srcd)

        def sweep(C):
            return ad.mul(ad.add(ad.mul(deff, st.taped_gather(C)), srcd), invd)

        def residual(Cv):
            return dv * (st.gather(Cv) + src_geom - st.diag * Cv) - rv * Cv

    # reference norm for the relative residual: the Dirichlet source vector
    if cfg.flux_form:
        bres = srcv
    else:
        bres = srcdv
    bfield = np.broadcast_to(np.asarray(bres, dtype=float), shape)
    if batched:
        bnorm = np.sqrt((bfield * bfield).sum(axis=(-2, -1)))
        bnorm = np.where(bnorm == 0.0, 1e-300, bnorm)
    else:
        bnorm = max(float(np.linalg.norm(bfield.ravel())), 1e-300)

    if warm is not None and cfg.warm_start:
        C = warm
        if ad.value_of(C).shape != shape:
            C = ad.reshape(C, shape) if isinstance(C, ad.Var) else np.broadcast_to(ad.value_of(C), shape).copy()
    else:
        # start each run from its own largest Dirichlet value so that the
        # per-sweep bound 0 <= C <= max bc holds run by run
        vals = st.bc_value_fields(batched)
        init = None
        for f in st.dirichlet_faces:
            v = np.broadcast_to(np.asarray(vals[f]), shape)
            init = v if init is None else np.maximum(init, v)
        C = np.ascontiguousarray(init)

    cap = cfg.fixed_sweeps if cfg.fixed_sweeps > 0 else (cfg.cold_sweeps if cold else cfg.max_sweeps)
    tol = cfg.jacobi_tol
    flags = []
    converged = False
    rel = math.inf
    n = 0
    while n < cap:
        C = sweep(C)
        n += 1
        if cfg.fixed_sweeps > 0:
            continue
        if n % cfg.check_every == 0 or n == cap:
            Cv = ad.value_of(C)
            if not np.isfinite(Cv.sum()):
                raise DivergenceError(f"non-finite molarity iterate at sweep {n}")
            rel = _batch_rel_residual(residual(Cv), bnorm)
            if rel <= tol:
                converged = True
                break
    if cfg.fixed_sweeps > 0:
        Cv = ad.value_of(C)
        if not np.isfinite(Cv.sum()):
            raise DivergenceError(f"non-finite molarity iterate at sweep {n}")
        rel = _batch_rel_residual(residual(Cv), bnorm)
        converged = rel <= tol
    elif not converged:
        flags.append(f"sweep cap {cap} reached at residual {rel:.3e}")
    return C, SolveInfo(n, rel, converged, flags)


def porosity_step(eps, C, k_field, sv_field, material: Material, dt: float,
                  stepper: str = "euler", sv_fn=None):
    """Advance porosity one step; returns (eps_next, rate_field, clamped).

    rate_field is the K*S_v*C deposition rate actually integrated (for RK4
    the stage-weighted combination), so dt * rate_coeff * rate_field is the
    exact porosity decrement before clamping. clamped counts cells that hit
    the [0, eps0] bounds.
    """
    if stepper == "euler":
        rate = ad.mul(ad.mul(k_field, sv_field), C)
    elif stepper == "rk4-frozen-c":
        if sv_fn is None:
            raise ContractError("rk4-frozen-c needs the surface-area evaluator")
        c = material.rate_coeff()

        def f(e):
            return ad.mul(ad.mul(k_field, sv_fn(e)), C)

        k1 = f(eps)
        k2 = f(ad.sub(eps, ad.mul(k1, 0.5 * dt * c)))
        k3 = f(ad.sub(eps, ad.mul(k2, 0.5 * dt * c)))
        k4 = f(ad.sub(eps, ad.mul(k3, dt * c)))
        rate = ad.mul(ad.add(ad.add(k1, k4), ad.mul(ad.add(k2, k3), 2.0)), 1.0 / 6.0)
    else:
        raise ContractError(f"unknown stepper '{stepper}'")
    raw = ad.sub(eps, ad.mul(rate, dt * material.rate_coeff()))
    eps_next = ad.clamp(raw, 0.0, material.eps0)
    rawv = ad.value_of(raw)
    clamped = int(np.count_nonzero((rawv < 0.0) | (rawv > material.eps0)))
    return eps_next, rate, clamped


@dataclass
class RolloutResult:
    """Public single-run rollout output."""

    times_s: np.ndarray
    states: list
    seg_masses: np.ndarray        # (n_obs, nseg) deposited mass per segment
    total_masses: np.ndarray      # (n_obs,)
    quad_mass: float              # independently accumulated deposition quadrature
    diagnostics: dict


def _steps_for(duration_s: float, dt: float) -> int:
    n = int(round(duration_s / dt))
    if abs(n * dt - duration_s) > 1e-6 * max(dt, duration_s):
        warnings.warn(f"duration {duration_s} s is not a multiple of dt={dt} s; using {n} steps")
    return max(n, 0)


def obs_step_indices(times_s, dt: float, n_steps: int) -> list:
    """Map observation times to step indices, validating alignment."""
    out = []
    for t in np.asarray(times_s, dtype=float):
        k = int(round(t / dt))
        if abs(k * dt - t) > 1e-6 * max(dt, 1.0):
            warnings.warn(f"observation time {t} s snapped to step {k} (t={k * dt} s)")
        if not (0 <= k <= n_steps):
            raise ContractError(f"observation time {t} s outside the simulated span")
        out.append(k)
    if len(set(out)) != len(out):
        raise ContractError("observation times collide after snapping to steps")
    return out


class BatchRun:
    """Internal engine: advance B runs in lockstep on one (possibly taped)
    computation. Fields are (B, nr, nz); per-run scalars are (B,)."""

    def __init__(self, grid: AxiGrid, bundle, material: Material,
                 T: np.ndarray, P_total: np.ndarray, c_bc: np.ndarray,
                 cfg: SolverConfig, bound: dict = None):
        self.grid = grid
        self.bundle = bundle
        self.material = material
        self.T = np.atleast_1d(np.asarray(T, dtype=float))
        self.P = np.atleast_1d(np.asarray(P_total, dtype=float))
        self.c_bc = np.atleast_1d(np.asarray(c_bc, dtype=float))
        self.B = self.T.size
        self.cfg = cfg
        self.bound = bound
        self.bc = BoundarySpec.uniform_dirichlet(self.c_bc if self.B > 1 else float(self.c_bc[0]))
        self.stencil = Stencil(grid, self.bc)
        self.warm = None
        self.quad = 0.0         # accumulated integral of K Sv C dV dt (mol)
        self.clamped = 0
        self.solve_infos = []

    def solve(self, eps, cold: bool):
        deff = self.bundle.eval_deff(eps, self.T, self.P, bound=self.bound)
        sv = self.bundle.eval_sv(eps, bound=self.bound)
        k = self.bundle.eval_k(self.T if self.B > 1 else float(self.T[0]), bound=self.bound)
        C, info = jacobi_solve(deff, k, sv, self.bc, self.grid, self.cfg,
                               warm=self.warm if self.cfg.warm_start else None,
                               stencil=self.stencil, cold=cold)
        self.solve_infos.append(info)
        self.warm = C
        return C, deff, k, sv

    def step(self, eps, C, k, sv):
        sv_fn = None
        if self.cfg.stepper == "rk4-frozen-c":
            sv_fn = lambda e: self.bundle.eval_sv(e, bound=self.bound)
        eps2, rate, clamped = porosity_step(eps, C, k, sv, self.material,
                                            self.cfg.dt_s, self.cfg.stepper, sv_fn)
        self.clamped += clamped
        # independent quadrature route: flat dot product, untaped
        vol = np.broadcast_to(self.grid.column_volumes()[:, None],
                              (self.grid.nr, self.grid.nz)).ravel()
        rv = ad.value_of(rate)
        rflat = rv.reshape(-1, self.grid.ncells) if rv.ndim == 3 else rv.reshape(1, -1)
        self.quad += float(self.cfg.dt_s * (rflat @ vol).sum())
        return eps2


def batched_observables(bundle, conditions, grid: AxiGrid, material: Material,
                        cfg: SolverConfig, obs_times_s, seg: SegmentSpec = None,
                        eps_init: np.ndarray = None):
    """Segment-mass predictions for several same-duration runs in lockstep.

    This is the exact numerical path the training loss uses for its
    predictions (same batching, same op sequence), so truth-parameter
    predictions here and inside the loss agree bitwise. Returns
    (times (n_obs,), masses (n_obs, B, nseg), diagnostics dict).
    """
    seg = seg if seg is not None else SegmentSpec((0.0, 1.0))
    durations = {c.duration_s for c in conditions}
    if len(durations) != 1:
        raise ContractError("batched runs must share one duration")
    n_steps = _steps_for(durations.pop(), cfg.dt_s)
    obs = obs_step_indices(obs_times_s, cfg.dt_s, n_steps)
    want = {k: i for i, k in enumerate(obs)}
    T = np.array([c.T_K for c in conditions])
    P = np.array([c.P_total_Pa for c in conditions])
    cb = np.array([molarity_bc(c.P_precursor_Pa, c.T_K) for c in conditions])
    B = len(conditions)
    wseg_t = segment_weight_matrix(grid, seg, material.rho_d).T
    run = BatchRun(grid, bundle, material, T, P, cb, cfg)
    eps = eps_init.copy() if eps_init is not None else np.full((B, grid.nr, grid.nz), material.eps0)
    out = np.zeros((len(obs), B, seg.nseg))
    for t in range(n_steps + 1):
        C, deff, k, sv = run.solve(eps, cold=(t == 0))
        if t in want:
            dep = ad.reshape(ad.sub(material.eps0, eps), (B, grid.ncells))
            out[want[t]] = ad.value_of(ad.matmul(dep, wseg_t))
        if t < n_steps:
            eps = run.step(eps, C, k, sv)
    diags = {"sweeps": [i.sweeps for i in run.solve_infos],
             "converged": all(i.converged for i in run.solve_infos),
             "clamped_cells": run.clamped,
             "final_eps": ad.value_of(eps)}
    return np.asarray(obs, dtype=float) * cfg.dt_s, out, diags


def rollout(state0: CviState, bundle, cond: OperatingCondition,
            material: Material, cfg: SolverConfig, obs_times_s,
            seg: SegmentSpec = None, c_bc: float = None) -> RolloutResult:
    """Run one condition from state0, sampling observables at obs_times_s.

    c_bc defaults to the ideal-gas molarity P_precursor / (R T) with
    R = 8.314. The trajectory always includes the initial state when time 0
    is requested; a zero-duration run returns just the initial snapshot.
    """
    grid = state0.grid
    if c_bc is None:
        c_bc = molarity_bc(cond.P_precursor_Pa, cond.T_K)
    n_steps = _steps_for(cond.duration_s, cfg.dt_s)
    obs = obs_step_indices(obs_times_s, cfg.dt_s, n_steps)
    seg = seg if seg is not None else SegmentSpec((0.0, 1.0))
    wseg = segment_weight_matrix(grid, seg, material.rho_d)

    run = BatchRun(grid, bundle, material, cond.T_K, cond.P_total_Pa,
                   c_bc, cfg, bound=None)
    eps = state0.porosity.values.copy()
    want = set(obs)
    states, seg_masses, times = [], [], []

    for t in range(n_steps + 1):
        need_solve = (t < n_steps) or (t in want)
        if not need_solve:
            break
        C, deff, k, sv = run.solve(eps, cold=(t == 0))
        if t in want:
            Cv = ad.value_of(C).reshape(grid.nr, grid.nz)
            ev = ad.value_of(eps).reshape(grid.nr, grid.nz)
            st = CviState(ScalarField(grid, ev.copy()), ScalarField(grid, Cv.copy()),
                          material.eps0, t * cfg.dt_s)
            states.append(st)
            dep = (material.eps0 - ev).reshape(-1)
            seg_masses.append(wseg @ dep)
            times.append(t * cfg.dt_s)
        if t < n_steps:
            eps = run.step(eps, C, k, sv)

    seg_masses = np.asarray(seg_masses) if seg_masses else np.zeros((0, seg.nseg))
    totals = seg_masses.sum(axis=1) if seg_masses.size else np.zeros(0)
    diags = {
        "sweeps": [i.sweeps for i in run.solve_infos],
        "residuals": [i.rel_residual for i in run.solve_infos],
        "converged": all(i.converged for i in run.solve_infos),
        "clamped_cells": run.clamped,
        "flags": [f for i in run.solve_infos for f in i.flags],
    }
    order = np.argsort(times) if times else []
    states = [states[i] for i in order]
    return RolloutResult(np.asarray(times)[order] if times else np.zeros(0),
                         states,
                         seg_masses[order] if seg_masses.size else seg_masses,
                         totals[order] if totals.size else totals,
                         run.quad * material.rate_coeff() * material.rho_d,
                         diags)


def one_step(state: CviState, bundle, cond: OperatingCondition,
             material: Material, cfg: SolverConfig, c_bc: float = None):
    """Single solve+deposit step; returns (new CviState, SolveInfo)."""
    if c_bc is None:
        c_bc = molarity_bc(cond.P_precursor_Pa, cond.T_K)
    run = BatchRun(state.grid, bundle, material, cond.T_K, cond.P_total_Pa, c_bc, cfg)
    eps = state.porosity.values
    C, deff, k, sv = run.solve(eps, cold=True)
    eps2 = run.step(eps, C, k, sv)
    g = state.grid
    new = CviState(ScalarField(g, ad.value_of(eps2).reshape(g.nr, g.nz).copy()),
                   ScalarField(g, ad.value_of(C).reshape(g.nr, g.nz).copy()),
                   material.eps0, state.time_s + cfg.dt_s)
    return new, run.solve_infos[-1]


@dataclass(frozen=True)
class CycleSpec:
    """One infiltration cycle followed by optional machining."""

    condition: OperatingCondition
    obs_times_s: tuple
    trim: object = None           # TrimSpec or None


@dataclass
class MulticycleResult:
    cycles: list                  # RolloutResult per cycle
    machining_events: list        # (time_s, mass_before, mass_after, removed)
    final_state: CviState


def multicycle_rollout(state0: CviState, bundle, schedule,
                       material: Material, cfg: SolverConfig,
                       seg: SegmentSpec = None) -> MulticycleResult:
    """Run a machining schedule: infiltrate, trim, repeat.

    Observation times inside each CycleSpec are relative to the cycle start.
    Machining drops are reported as (absolute time, mass before, mass after,
    removed) where removed = before - after exactly.
    """
    from .grid import integrate_deposit_mass, machine_preform

    state = state0
    t0 = state0.time_s
    out = []
    events = []
    for cyc in schedule:
        res = rollout(state, bundle, cyc.condition, material, cfg,
                      cyc.obs_times_s, seg=seg)
        res = replace(res, times_s=res.times_s + t0)
        for s in res.states:
            s.time_s += t0
        out.append(res)
        state = res.states[-1] if res.states else state
        if not res.states or res.times_s[-1] != t0 + cyc.condition.duration_s:
            # make sure we advance to the cycle end even if it was not observed
            if not res.states or res.states[-1].time_s < t0 + cyc.condition.duration_s:
                raise ContractError("each cycle must observe its final time")
        t0 += cyc.condition.duration_s
        if cyc.trim is not None:
            before = integrate_deposit_mass(state, material.rho_d)
            state, _ = machine_preform(state, cyc.trim)
            after = integrate_deposit_mass(state, material.rho_d)
            events.append((t0, before, after, before - after))
    return MulticycleResult(out, events, state)

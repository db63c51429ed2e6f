"""Training neural constitutive operators from sparse mass observations.

The loss has four parts, each an L2 norm (not squared):

    data        sum over runs and observation times of
                ||predicted - measured segment masses||_2 / m_final(run)
    weight      beta1 * ||theta||_2 over all trainable parameters
    smoothness  beta2 * sum over strided step pairs of
                ||eps_{t+1} - eps_t||_2 + ||C_{t+1} - C_t||_2
    residual    beta3 * sum over strided steps of the elliptic residual norm,
                by default the literal form ||D_eff (lap C - C K S_v)||_2,
                or the consistent form ||D_eff lap C - K S_v C||_2 when
                LossConfig.residual_consistent is set.

Optimization is full-batch Adam with a cosine-decayed learning rate. All
runs are advanced in lockstep on one tape with a leading batch axis, which
is what "full batch" means here and is an order of magnitude faster than
looping runs.

Deep ensembles retrain the same architecture from M different seeds; the
prediction mean/variance are population statistics over members and the
reported confidence half-width is 3 * sqrt(variance).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DatasetError, DivergenceError, EvaluationError
from .grid import AxiGrid, SegmentSpec, initial_state, segment_weight_matrix
from .operators import OperatorBundle
from .solver import BatchRun, Material, SolverConfig, molarity_bc


@dataclass(frozen=True)
class LossConfig:
    beta1: float = 1e-4           # parameter-norm weight
    beta2: float = 1e-3           # state-smoothness weight
    beta3: float = 1e-3           # elliptic-residual weight
    smoothness_stride: int = 5    # evaluate terms 3 and 4 every this many steps
    residual_consistent: bool = False


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    cosine_alpha: float = 1e-2
    epochs: int = 500


def cosine_lr(step: int, total_steps: int, lr0: float, alpha: float) -> float:
    """Cosine decay from lr0 to alpha*lr0 over total_steps."""
    if total_steps < 1:
        raise ContractError("total_steps must be positive")
    s = min(max(step, 0), total_steps)
    cos = 0.5 * (1.0 + np.cos(np.pi * s / total_steps))
    return lr0 * (alpha + (1.0 - alpha) * cos)


def adam_update(theta: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                step: int, lr: float, cfg: OptimizerConfig):
    """One bias-corrected Adam step (step counts from 1); pure function."""
    if step < 1:
        raise ContractError("Adam step index counts from 1")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    m2 = b1 * m + (1.0 - b1) * grad
    v2 = b2 * v + (1.0 - b2) * grad * grad
    mhat = m2 / (1.0 - b1 ** step)
    vhat = v2 / (1.0 - b2 ** step)
    return theta - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps), m2, v2


@dataclass
class PreparedRun:
    """One measurement run in solver units, ready for batching."""

    run_id: str
    T_K: float
    P_total_Pa: float
    P_precursor_Pa: float
    duration_s: float
    times_s: np.ndarray           # observation times, strictly increasing
    observed: np.ndarray          # (n_obs, nseg) measured deposit masses
    norm_const: float             # final measured total mass of this run
    cycle_index: int = 0

    def __post_init__(self):
        self.times_s = np.asarray(self.times_s, dtype=float)
        self.observed = np.asarray(self.observed, dtype=float)
        if self.observed.ndim != 2 or self.observed.shape[0] != self.times_s.size:
            raise DatasetError(f"run {self.run_id}: observation matrix shape mismatch")
        if np.any(np.diff(self.times_s) <= 0):
            raise DatasetError(f"run {self.run_id}: observation times must increase strictly")
        if not self.norm_const > 0:
            raise DatasetError(f"run {self.run_id}: final measured mass must be positive")


def runs_from_synthetic(synth_runs) -> list:
    """Adapt truth.generate_synthetic output to PreparedRun records."""
    out = []
    for i, r in enumerate(synth_runs):
        c = r["condition"]
        out.append(PreparedRun(
            run_id=f"run{i:03d}", T_K=c.T_K, P_total_Pa=c.P_total_Pa,
            P_precursor_Pa=c.P_precursor_Pa, duration_s=c.duration_s,
            times_s=r["times_s"], observed=r["noisy"],
            norm_const=float(r["noisy"][-1].sum()), cycle_index=r.get("cycle_index", 0)))
    return out


def _group_runs(runs, dt: float):
    """Batch runs sharing step count and observation steps."""
    groups = {}
    for r in runs:
        n = int(round(r.duration_s / dt))
        obs = tuple(int(round(t / dt)) for t in r.times_s)
        if any(k > n for k in obs):
            raise DatasetError(f"run {r.run_id}: observation beyond run end")
        groups.setdefault((n, obs), []).append(r)
    return groups


def _l2_per_run(x, axes):
    """Batched Euclidean norms: sqrt over the given axes, keeping the batch."""
    return ad.sqrt(ad.wsum(ad.mul(x, x), axes=axes))


def build_loss(bundle: OperatorBundle, runs, grid: AxiGrid, material: Material,
               seg: SegmentSpec, lcfg: LossConfig, scfg: SolverConfig,
               tape: ad.Tape):
    """Record the full-batch loss on the tape.

    Returns (loss Var, breakdown dict, leaves). The breakdown holds floats
    for the four terms; their fixed-order sum reproduces the total exactly.
    """
    bound = bundle.bind(tape)
    leaves = bundle.bound_leaves(bound)
    wseg_t = segment_weight_matrix(grid, seg, material.rho_d).T  # (ncells, nseg)

    term1 = None
    smooth = None
    resid = None
    diagnostics = {"sweeps": 0, "clamped": 0, "unconverged": 0}

    for (n_steps, obs_steps), grp in sorted(_group_runs(runs, scfg.dt_s).items()):
        B = len(grp)
        T = np.array([r.T_K for r in grp])
        P = np.array([r.P_total_Pa for r in grp])
        cb = np.array([molarity_bc(r.P_precursor_Pa, r.T_K) for r in grp])
        obs_vals = np.stack([r.observed for r in grp], axis=1)  # (n_obs, B, nseg)
        inv_norm = np.array([1.0 / r.norm_const for r in grp])
        run = BatchRun(grid, bundle, material, T, P, cb, scfg, bound=bound)
        eps = np.full((B, grid.nr, grid.nz), material.eps0)
        want = dict((k, i) for i, k in enumerate(obs_steps))
        stride_steps = set(range(0, n_steps + 1, max(lcfg.smoothness_stride, 1)))
        prev_snap = None

        for t in range(n_steps + 1):
            C, deff, k, sv = run.solve(eps, cold=(t == 0))
            if t in want:
                dep = ad.reshape(ad.sub(material.eps0, eps), (B, grid.ncells))
                pred = ad.matmul(dep, wseg_t)                   # (B, nseg)
                diff = ad.sub(pred, obs_vals[want[t]])
                per_run = _l2_per_run(diff, axes=(1,))          # (B,)
                contrib = ad.wsum(per_run, weights=inv_norm)
                term1 = contrib if term1 is None else ad.add(term1, contrib)
            if t in stride_steps and (lcfg.beta2 > 0 or lcfg.beta3 > 0):
                if lcfg.beta3 > 0:
                    src = run.stencil.source(B > 1)
                    lap = ad.sub(ad.add(run.stencil.taped_gather(C), src),
                                 ad.mul(run.stencil.diag, C))
                    ksv = ad.mul(k, sv)
                    if lcfg.residual_consistent:
                        r_field = ad.sub(ad.mul(deff, lap), ad.mul(ksv, C))
                    else:
                        r_field = ad.mul(deff, ad.sub(lap, ad.mul(C, ksv)))
                    rn = ad.wsum(_l2_per_run(r_field, axes=(1, 2)))
                    resid = rn if resid is None else ad.add(resid, rn)
                if lcfg.beta2 > 0 and prev_snap is not None:
                    pe, pc = prev_snap
                    de = ad.wsum(_l2_per_run(ad.sub(eps, pe), axes=(1, 2)))
                    dc = ad.wsum(_l2_per_run(ad.sub(C, pc), axes=(1, 2)))
                    pair = ad.add(de, dc)
                    smooth = pair if smooth is None else ad.add(smooth, pair)
                prev_snap = (eps, C)
            if t < n_steps:
                eps = run.step(eps, C, k, sv)
        diagnostics["sweeps"] += sum(i.sweeps for i in run.solve_infos)
        diagnostics["clamped"] += run.clamped
        diagnostics["unconverged"] += sum(0 if i.converged else 1 for i in run.solve_infos)

    if term1 is None:
        raise DatasetError("no observations to fit")

    sq = None
    for leaf in leaves:
        s = ad.wsum(ad.mul(leaf, leaf))
        sq = s if sq is None else ad.add(sq, s)
    term2 = ad.mul(ad.sqrt(sq), lcfg.beta1) if sq is not None else None

    total = term1
    breakdown = {"data": ad.scalar(term1), "weight": 0.0, "smoothness": 0.0, "residual": 0.0}
    if term2 is not None:
        total = ad.add(total, term2)
        breakdown["weight"] = ad.scalar(term2)
    if smooth is not None and lcfg.beta2 > 0:
        t3 = ad.mul(smooth, lcfg.beta2)
        total = ad.add(total, t3)
        breakdown["smoothness"] = ad.scalar(t3)
    if resid is not None and lcfg.beta3 > 0:
        t4 = ad.mul(resid, lcfg.beta3)
        total = ad.add(total, t4)
        breakdown["residual"] = ad.scalar(t4)
    breakdown["total"] = ad.scalar(total)
    breakdown["diagnostics"] = diagnostics
    return total, breakdown, leaves


@dataclass
class TrainRecord:
    loss: np.ndarray
    terms: dict
    lr: np.ndarray
    grad_norm: np.ndarray
    epochs_run: int
    flags: list = field(default_factory=list)
    wall_s: float = 0.0


def train_single(bundle: OperatorBundle, runs, grid: AxiGrid, material: Material,
                 seg: SegmentSpec, lcfg: LossConfig, ocfg: OptimizerConfig,
                 scfg: SolverConfig, log_every: int = 0) -> TrainRecord:
    """Full-batch Adam training of the bundle's trainable blocks in place.

    A non-finite loss or gradient aborts the run, keeping the last finite
    parameters and flagging the record.
    """
    t_start = time.perf_counter()
    theta = bundle.get_flat()
    if theta.size == 0:
        raise ContractError("bundle has no trainable parameters")
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    losses, lrs, gnorms = [], [], []
    terms = {"data": [], "weight": [], "smoothness": [], "residual": []}
    flags = []
    epochs_run = 0
    for epoch in range(ocfg.epochs):
        tape = ad.Tape()
        try:
            loss, breakdown, leaves = build_loss(bundle, runs, grid, material,
                                                 seg, lcfg, scfg, tape)
            grads = tape.gradients(loss, leaves)
        except (EvaluationError, DivergenceError) as e:
            flags.append(f"epoch {epoch}: aborted ({e})")
            break
        g = bundle.grads_to_flat(grads)
        if not np.isfinite(g.sum()):
            flags.append(f"epoch {epoch}: non-finite gradient, keeping previous parameters")
            break
        lr = cosine_lr(epoch, ocfg.epochs, ocfg.lr, ocfg.cosine_alpha)
        theta, m, v = adam_update(theta, g, m, v, epoch + 1, lr, ocfg)
        bundle.set_flat(theta)
        losses.append(breakdown["total"])
        for k in terms:
            terms[k].append(breakdown[k])
        lrs.append(lr)
        gnorms.append(float(np.linalg.norm(g)))
        epochs_run = epoch + 1
        if log_every and (epoch % log_every == 0 or epoch == ocfg.epochs - 1):
            print(f"  epoch {epoch:4d}  loss {breakdown['total']:.6e}  "
                  f"data {breakdown['data']:.3e}  lr {lr:.2e}")
    return TrainRecord(np.asarray(losses), {k: np.asarray(x) for k, x in terms.items()},
                       np.asarray(lrs), np.asarray(gnorms), epochs_run, flags,
                       time.perf_counter() - t_start)


@dataclass
class EnsembleResult:
    members: list                  # trained OperatorBundle per surviving member
    records: list                  # TrainRecord per surviving member
    seeds: list                    # member seeds, aligned with members
    failed: list = field(default_factory=list)


def member_seeds(master_seed: int, n: int) -> list:
    """Documented splitter: SeedSequence(master).spawn(n), one child each."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master_seed).spawn(n)]


def train_ensemble(bundle_factory, seeds, runs, grid: AxiGrid, material: Material,
                   seg: SegmentSpec, lcfg: LossConfig, ocfg: OptimizerConfig,
                   scfg: SolverConfig, log_every: int = 0) -> EnsembleResult:
    """Train one member per seed; member failures are isolated.

    bundle_factory(seed) must build a freshly initialized bundle. Raises if
    seeds collide or if fewer than two members survive.
    """
    seeds = [int(s) for s in seeds]
    if len(set(seeds)) != len(seeds):
        raise ContractError("ensemble member seeds must be distinct")
    members, records, kept, failed = [], [], [], []
    for s in seeds:
        b = bundle_factory(s)
        try:
            rec = train_single(b, runs, grid, material, seg, lcfg, ocfg, scfg,
                               log_every=log_every)
        except (EvaluationError, DivergenceError) as e:
            failed.append((s, str(e)))
            continue
        if rec.epochs_run == 0:
            failed.append((s, "; ".join(rec.flags) or "no epochs completed"))
            continue
        members.append(b)
        records.append(rec)
        kept.append(s)
    if len(members) < 2:
        raise DivergenceError(f"ensemble collapsed: only {len(members)} member(s) survived")
    return EnsembleResult(members, records, kept, failed)


# ------------------------------------------------------------ UQ prediction

def default_probes(grid: AxiGrid) -> list:
    """Named probe cells: preform center (axis, mid-height) and the outer
    top corner (surface-adjacent)."""
    return [("center", (0, grid.nz // 2)),
            ("outer_corner", (grid.nr - 1, grid.nz - 1))]


@dataclass
class UqPrediction:
    times_s: np.ndarray
    quantities: dict               # name -> dict(locations, mean, variance, ci, members)
    condition: object
    flags: list = field(default_factory=list)


def uq_predict(members, cond, grid: AxiGrid, material: Material,
               scfg: SolverConfig, obs_times_s, seg: SegmentSpec = None,
               probes=None) -> UqPrediction:
    """Ensemble mean/variance trajectories for masses and probe-point fields.

    Population statistics over members; confidence half-width is
    3 * sqrt(variance). The mean lies inside the member envelope pointwise
    by construction.
    """
    from .solver import rollout

    if len(members) < 2:
        raise ContractError("uncertainty needs at least two ensemble members")
    probes = probes if probes is not None else default_probes(grid)
    seg = seg if seg is not None else SegmentSpec((0.0, 1.0))
    state0 = initial_state(grid, material.eps0)
    per_member = {"mass_total": [], "mass_segments": [], "porosity": [],
                  "molarity": [], "deff": [], "reaction": []}
    times = None
    for b in members:
        res = rollout(state0, b, cond, material, scfg, obs_times_s, seg=seg)
        times = res.times_s
        per_member["mass_total"].append(res.total_masses)
        per_member["mass_segments"].append(res.seg_masses)
        eps_t = np.array([[s.porosity.values[i, j] for _, (i, j) in probes] for s in res.states])
        mol_t = np.array([[s.molarity.values[i, j] for _, (i, j) in probes] for s in res.states])
        deff_t, react_t = [], []
        for s in res.states:
            d = ad.value_of(b.eval_deff(s.porosity.values, cond.T_K, cond.P_total_Pa))
            k = ad.value_of(b.eval_k(cond.T_K))
            sv = ad.value_of(b.eval_sv(s.porosity.values))
            r = k * sv
            deff_t.append([d[i, j] for _, (i, j) in probes])
            react_t.append([r[i, j] for _, (i, j) in probes])
        per_member["porosity"].append(eps_t)
        per_member["molarity"].append(mol_t)
        per_member["deff"].append(np.asarray(deff_t))
        per_member["reaction"].append(np.asarray(react_t))

    qnames = {"mass_total": ["total"],
              "mass_segments": [f"segment{k}" for k in range(seg.nseg)],
              "porosity": [n for n, _ in probes],
              "molarity": [n for n, _ in probes],
              "deff": [n for n, _ in probes],
              "reaction": [n for n, _ in probes]}
    out = {}
    for name, stack in per_member.items():
        arr = np.stack(stack)                      # (M, n_obs, n_loc) or (M, n_obs)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        mean = arr.mean(axis=0)
        var = arr.var(axis=0)                      # population (1/M)
        out[name] = {"locations": qnames[name], "mean": mean, "variance": var,
                     "ci_half_width": 3.0 * np.sqrt(var), "members": arr}
    return UqPrediction(times, out, cond)


def in_training_hull(train_pts: np.ndarray, query) -> bool:
    """Is (T, P) inside the convex hull of training conditions?

    Falls back to per-dimension intervals when the training set is
    degenerate (fewer than 3 distinct points, or collinear).
    """
    pts = np.asarray(train_pts, dtype=float)
    q = np.asarray(query, dtype=float)
    uniq = np.unique(pts, axis=0)
    if uniq.shape[0] >= 3:
        try:
            from scipy.spatial import Delaunay
            tri = Delaunay(uniq)
            return bool(tri.find_simplex(q[None, :])[0] >= 0)
        except Exception:
            # degenerate (collinear) point sets fall through to intervals
            pass
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return bool(np.all(q >= lo) and np.all(q <= hi))

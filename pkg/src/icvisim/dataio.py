"""Measurement tables, checkpoints, and result exports.

Measurement CSV schema (exact header, one observation per row):

    run_id,time_s,segment_id,value_kg,observable_kind,temperature_K,
    partial_pressure_Pa,total_pressure_Pa,cycle_index

observable_kind is 'segment_mass_gain' for per-segment deposit masses or
'total_mass_gain' when the whole preform is one segment. Values are
nonnegative deposit masses in kg.

Checkpoints are canonical JSON text: sorted keys, compact separators, LF
line ending, UTF-8. Floats are emitted by Python's shortest round-trip
repr, which parses back bit-exactly, so save -> load -> save is
byte-identical and equal parameter sets always serialize to equal bytes.

Exports: trajectory tables (time_s, quantity, segment_or_location, mean,
variance, ci_half_width) with a JSON manifest sidecar, and field snapshots
(r_m, z_m, value).
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import CheckpointError, DatasetError
from .grid import AxiGrid, SegmentSpec
from .operators import MlpSpec, NeuralDeff, NeuralK, NeuralSv, Normalization, mlp_flatten, mlp_unflatten
from .solver import Material, OperatingCondition
from .training import PreparedRun
from .truth import TruthParams, hybrid_bundle

MEASUREMENT_COLUMNS = ("run_id", "time_s", "segment_id", "value_kg",
                       "observable_kind", "temperature_K", "partial_pressure_Pa",
                       "total_pressure_Pa", "cycle_index")
OBSERVABLE_KINDS = ("segment_mass_gain", "total_mass_gain")
CHECKPOINT_FORMAT = "icvisim-checkpoint-1"


@dataclass(frozen=True)
class MeasurementRecord:
    run_id: str
    time_s: float
    segment_id: int
    value_kg: float
    observable_kind: str
    temperature_K: float
    partial_pressure_Pa: float
    total_pressure_Pa: float
    cycle_index: int = 0

    def __post_init__(self):
        if self.value_kg < 0:
            raise DatasetError(f"negative mass {self.value_kg} in run {self.run_id}")
        if self.time_s < 0:
            raise DatasetError("negative observation time")
        if self.observable_kind not in OBSERVABLE_KINDS:
            raise DatasetError(f"unknown observable kind '{self.observable_kind}'")
        if self.temperature_K <= 0:
            raise DatasetError("temperature must be positive")
        if not (0.0 <= self.partial_pressure_Pa <= self.total_pressure_Pa):
            raise DatasetError("need 0 <= partial pressure <= total pressure")
        if self.segment_id < 0 or self.cycle_index < 0:
            raise DatasetError("segment_id and cycle_index must be nonnegative")


@dataclass
class Dataset:
    records: list

    def run_ids(self):
        seen = []
        for r in self.records:
            if r.run_id not in seen:
                seen.append(r.run_id)
        return seen


def records_from_runs(runs, clean: bool = False) -> list:
    """Flatten truth.generate_synthetic output into measurement records."""
    recs = []
    for i, r in enumerate(runs):
        cond = r["condition"]
        vals = r["clean"] if clean else r["noisy"]
        nseg = vals.shape[1]
        kind = "total_mass_gain" if nseg == 1 else "segment_mass_gain"
        for ti, t in enumerate(r["times_s"]):
            for s in range(nseg):
                recs.append(MeasurementRecord(
                    run_id=f"run{i:03d}", time_s=float(t), segment_id=s,
                    value_kg=float(vals[ti, s]), observable_kind=kind,
                    temperature_K=cond.T_K, partial_pressure_Pa=cond.P_precursor_Pa,
                    total_pressure_Pa=cond.P_total_Pa,
                    cycle_index=int(r.get("cycle_index", 0))))
    return recs


def _fmt(x) -> str:
    """Shortest exact decimal text for a float (deterministic)."""
    return repr(float(x))


def write_measurements_csv(path, records):
    """Rows are sorted (run, cycle, time, segment) so identical datasets
    always produce identical bytes."""
    rows = sorted(records, key=lambda r: (r.run_id, r.cycle_index, r.time_s, r.segment_id))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MEASUREMENT_COLUMNS)
    for r in rows:
        w.writerow([r.run_id, _fmt(r.time_s), r.segment_id, _fmt(r.value_kg),
                    r.observable_kind, _fmt(r.temperature_K),
                    _fmt(r.partial_pressure_Pa), _fmt(r.total_pressure_Pa),
                    r.cycle_index])
    data = buf.getvalue().encode("utf-8")
    with open(path, "wb") as f:
        f.write(data)


def read_measurements_csv(path) -> Dataset:
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None or tuple(header) != MEASUREMENT_COLUMNS:
                raise DatasetError(
                    f"bad measurement header in {path}: expected {','.join(MEASUREMENT_COLUMNS)}")
            recs = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(MEASUREMENT_COLUMNS):
                    raise DatasetError(f"{path}:{lineno}: expected {len(MEASUREMENT_COLUMNS)} fields")
                try:
                    recs.append(MeasurementRecord(
                        run_id=row[0], time_s=float(row[1]), segment_id=int(row[2]),
                        value_kg=float(row[3]), observable_kind=row[4],
                        temperature_K=float(row[5]), partial_pressure_Pa=float(row[6]),
                        total_pressure_Pa=float(row[7]), cycle_index=int(row[8])))
                except ValueError as e:
                    raise DatasetError(f"{path}:{lineno}: {e}") from e
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e
    return Dataset(recs)


def prepared_runs(ds: Dataset, seg: SegmentSpec, cycle_index: int = None) -> list:
    """Validate a dataset against the segmentation and group it per run.

    Every (run, time) must carry exactly one value per segment, conditions
    must be constant within a run, and segment ids must match the spec
    (0..nseg-1). Duration is taken as the last observation time.
    """
    out = []
    for rid in ds.run_ids():
        rows = [r for r in ds.records if r.run_id == rid]
        if cycle_index is not None:
            rows = [r for r in rows if r.cycle_index == cycle_index]
            if not rows:
                continue
        conds = {(r.temperature_K, r.partial_pressure_Pa, r.total_pressure_Pa) for r in rows}
        if len(conds) != 1:
            raise DatasetError(f"run {rid}: inconsistent operating conditions across rows")
        kinds = {r.observable_kind for r in rows}
        if len(kinds) != 1:
            raise DatasetError(f"run {rid}: mixed observable kinds")
        kind = kinds.pop()
        if kind == "total_mass_gain" and seg.nseg != 1:
            raise DatasetError(f"run {rid}: total-mass data but config declares {seg.nseg} segments")
        times = sorted({r.time_s for r in rows})
        table = np.full((len(times), seg.nseg), np.nan)
        tidx = {t: i for i, t in enumerate(times)}
        for r in rows:
            if r.segment_id >= seg.nseg:
                raise DatasetError(f"run {rid}: segment_id {r.segment_id} outside 0..{seg.nseg - 1}")
            if not np.isnan(table[tidx[r.time_s], r.segment_id]):
                raise DatasetError(f"run {rid}: duplicate observation at t={r.time_s} segment {r.segment_id}")
            table[tidx[r.time_s], r.segment_id] = r.value_kg
        if np.isnan(table).any():
            raise DatasetError(f"run {rid}: missing segment values at some times")
        T, Pr, Pt = next(iter(conds))
        out.append(PreparedRun(run_id=rid, T_K=T, P_total_Pa=Pt, P_precursor_Pa=Pr,
                               duration_s=times[-1], times_s=np.asarray(times),
                               observed=table, norm_const=float(table[-1].sum()),
                               cycle_index=rows[0].cycle_index))
    if not out:
        raise DatasetError("dataset holds no usable runs")
    return out


# ---------------------------------------------------------------- checkpoint

def _canonical_json_bytes(payload) -> bytes:
    return (json.dumps(payload, sort_keys=True, separators=(",", ":"),
                       allow_nan=False) + "\n").encode("utf-8")


def save_checkpoint(path, payload: dict):
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"payload format must be {CHECKPOINT_FORMAT}")
    data = _canonical_json_bytes(payload)
    # round-trip guard: the canonical bytes must parse back to themselves
    if _canonical_json_bytes(json.loads(data.decode("utf-8"))) != data:
        raise CheckpointError("checkpoint failed its canonical round-trip")
    with open(path, "wb") as f:
        f.write(data)


def load_checkpoint(path) -> dict:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    try:
        payload = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} is not a checkpoint: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format "
                              f"{payload.get('format') if isinstance(payload, dict) else type(payload)}")
    return payload


def checkpoint_payload(grid: AxiGrid, truth_params: TruthParams, norm: Normalization,
                       arch: dict, neural_blocks, member_flats, member_seeds,
                       training_conditions, meta: dict) -> dict:
    """Assemble the canonical checkpoint structure."""
    return {
        "format": CHECKPOINT_FORMAT,
        "geometry": {"nr": grid.nr, "nz": grid.nz,
                     "radius_m": grid.radius, "height_m": grid.height},
        "truth": asdict(truth_params),
        "normalization": {"eps0": norm.eps0, "r_f": norm.r_f,
                          "T_range": list(norm.T_range), "P_range": list(norm.P_range)},
        "architecture": dict(arch),
        "neural_blocks": list(neural_blocks),
        "member_seeds": [int(s) for s in member_seeds],
        "members": [[float(x) for x in flat] for flat in member_flats],
        "training_conditions": [[float(c.T_K), float(c.P_precursor_Pa)]
                                for c in training_conditions],
        "meta": meta,
    }


def rebuild_from_checkpoint(payload: dict):
    """Reconstruct (grid, truth params, material, bundles) from a payload."""
    g = payload["geometry"]
    grid = AxiGrid(int(g["nr"]), int(g["nz"]), float(g["radius_m"]), float(g["height_m"]))
    tp = TruthParams(**payload["truth"])
    nm = payload["normalization"]
    arch = payload["architecture"]
    hidden = tuple(int(h) for h in arch["hidden"])
    blocks = list(payload["neural_blocks"])
    members = []
    for flat in payload["members"]:
        norm = Normalization(float(nm["eps0"]), float(nm["r_f"]),
                             tuple(nm["T_range"]), tuple(nm["P_range"]))
        neural = {}
        if "deff" in blocks:
            spec = MlpSpec(3, hidden)
            neural["deff"] = NeuralDeff(mlp_unflatten(spec, np.zeros(spec.param_count())),
                                        spec, float(arch["d_scale"]))
        if "k" in blocks:
            spec = MlpSpec(1, hidden)
            neural["k"] = NeuralK(mlp_unflatten(spec, np.zeros(spec.param_count())),
                                  spec, float(arch["k_scale"]))
        if "sv" in blocks:
            spec = MlpSpec(2, hidden)
            neural["sv"] = NeuralSv(mlp_unflatten(spec, np.zeros(spec.param_count())),
                                    spec, float(arch["sv_bound"]))
        b = hybrid_bundle(tp, neural, norm)
        b.set_flat(np.asarray(flat, dtype=float))
        members.append(b)
    if not members:
        raise CheckpointError("checkpoint holds no ensemble members")
    return grid, tp, tp.material(), members


# ------------------------------------------------------------------ exports

TRAJECTORY_COLUMNS = ("time_s", "quantity", "segment_or_location",
                      "mean", "variance", "ci_half_width")


def export_trajectories_csv(path, uq, manifest_extra: dict = None):
    """Write ensemble trajectory statistics plus a manifest sidecar."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_COLUMNS)
    for qname in sorted(uq.quantities):
        q = uq.quantities[qname]
        for li, loc in enumerate(q["locations"]):
            for ti, t in enumerate(uq.times_s):
                w.writerow([_fmt(t), qname, loc,
                            _fmt(q["mean"][ti, li]), _fmt(q["variance"][ti, li]),
                            _fmt(q["ci_half_width"][ti, li])])
    with open(path, "wb") as f:
        f.write(buf.getvalue().encode("utf-8"))
    manifest = {
        "columns": list(TRAJECTORY_COLUMNS),
        "quantities": {qn: list(uq.quantities[qn]["locations"]) for qn in sorted(uq.quantities)},
        "n_times": int(np.size(uq.times_s)),
        "confidence": "half-width = 3*sqrt(population variance over ensemble members)",
        "condition": {
            "temperature_K": uq.condition.T_K,
            "partial_pressure_Pa": uq.condition.P_precursor_Pa,
            "total_pressure_Pa": uq.condition.P_total_Pa,
            "duration_s": uq.condition.duration_s,
        },
        "flags": list(uq.flags),
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    with open(str(path) + ".manifest.json", "wb") as f:
        f.write(_canonical_json_bytes(manifest))


def export_field_csv(path, grid: AxiGrid, field: np.ndarray):
    """Cell-centered field snapshot: columns r_m, z_m, value."""
    field = np.asarray(field, dtype=float)
    if field.shape != (grid.nr, grid.nz):
        raise DatasetError(f"field shape {field.shape} does not match grid")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("r_m", "z_m", "value"))
    r, z = grid.r_centers, grid.z_centers
    for i in range(grid.nr):
        for j in range(grid.nz):
            w.writerow([_fmt(r[i]), _fmt(z[j]), _fmt(field[i, j])])
    with open(path, "wb") as f:
        f.write(buf.getvalue().encode("utf-8"))


def export_mass_curve_csv(path, rows):
    """Multicycle mass trajectory; rows are (time_s, mass_kg, cycle, event)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("time_s", "mass_kg", "cycle_index", "event"))
    for t, m, c, ev in rows:
        w.writerow([_fmt(t), _fmt(m), int(c), ev])
    with open(path, "wb") as f:
        f.write(buf.getvalue().encode("utf-8"))


def write_json(path, payload: dict):
    with open(path, "wb") as f:
        f.write(_canonical_json_bytes(payload))

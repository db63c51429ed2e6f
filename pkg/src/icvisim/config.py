"""Run configuration: YAML loading, strict schema validation, defaults.

Unknown keys are rejected (pointing at the offending /section/key path) so
typos fail fast instead of silently running with defaults. Durations and
step sizes are given in hours in the file and converted to seconds here.

Profiles bundle consistent presets:

    fast   small grid, 4 ensemble members, coarse training step; sized for
           continuous-integration budgets
    paper  16x32 grid, 8 members, 1 h training step

A profile is applied after the file is read and overrides the touched keys.
"""

from __future__ import annotations

import copy

import numpy as np
import yaml

from .errors import SchemaError
from .grid import AxiGrid, SegmentSpec, TrimSpec
from .operators import MlpSpec, NeuralDeff, NeuralK, NeuralSv, Normalization, init_mlp
from .solver import CycleSpec, OperatingCondition, SolverConfig
from .training import LossConfig, OptimizerConfig
from .truth import TruthParams, hybrid_bundle

HOUR = 3600.0


class Key:
    def __init__(self, default, kind, choices=None):
        self.default = default
        self.kind = kind
        self.choices = choices


_CONDITION_SCHEMA = {
    "temperature_K": Key(None, "pos_float"),
    "partial_pressure_Pa": Key(None, "nonneg_float"),
    "total_pressure_Pa": Key(None, "pos_float_opt"),
    "duration_h": Key(None, "pos_float"),
    "observe_every_h": Key(25.0, "pos_float"),
}

_TRIM_SCHEMA = {
    "radial_m": Key(0.0, "nonneg_float"),
    "top_m": Key(0.0, "nonneg_float"),
    "bottom_m": Key(0.0, "nonneg_float"),
}

SCHEMA = {
    "geometry": {
        "radius_m": Key(0.01, "pos_float"),
        "height_m": Key(0.04, "pos_float"),
    },
    "grid": {
        "nr": Key(16, "pos_int"),
        "nz": Key(32, "pos_int"),
    },
    "truth": {
        "M_d": Key(0.01199, "pos_float"),
        "rho_d": Key(2260.0, "pos_float"),
        "q": Key(1.0, "pos_float"),
        "k0": Key(2.62, "pos_float"),
        "E_r": Key(1.46e5, "pos_float"),
        "tau0": Key(6.78, "pos_float"),
        "eps0": Key(0.6, "unit_float"),
        "r_pore": Key(1e-5, "pos_float"),
        "r_f": Key(5e-6, "pos_float"),
    },
    "operators": {
        "hidden": Key([32, 32], "list_pos_int"),
        "d_scale": Key(1e-3, "pos_float"),
        "k_scale": Key(1e-4, "pos_float"),
        "sv_bound": Key(0.95, "unit_float"),
        "neural_blocks": Key(["deff", "k", "sv"], "list_block"),
        "T_range": Key([1100.0, 1400.0], "range_float"),
        "P_range": Key([400.0, 10000.0], "range_float"),
    },
    "solver": {
        "jacobi_tol": Key(1e-8, "pos_float"),
        "max_sweeps": Key(200, "pos_int"),
        "cold_sweeps": Key(2000, "pos_int"),
        "check_every": Key(8, "pos_int"),
        "warm_start": Key(True, "bool"),
        "flux_form": Key(False, "bool"),
        "dt_h": Key(1.0, "pos_float"),
        "stepper": Key("euler", "str", choices=("euler", "rk4-frozen-c")),
    },
    "training": {
        "epochs": Key(500, "pos_int"),
        "lr": Key(1e-3, "pos_float"),
        "adam_beta1": Key(0.9, "unit_float"),
        "adam_beta2": Key(0.999, "unit_float"),
        "adam_eps": Key(1e-8, "pos_float"),
        "cosine_alpha": Key(1e-2, "unit_float"),
        "beta1": Key(1e-4, "nonneg_float"),
        "beta2": Key(1e-3, "nonneg_float"),
        "beta3": Key(1e-3, "nonneg_float"),
        "smoothness_stride": Key(5, "pos_int"),
        "residual_consistent": Key(False, "bool"),
        "members": Key(8, "pos_int"),
        "seed": Key(1234, "int"),
        "dt_h": Key(5.0, "pos_float"),
        "jacobi_tol": Key(1e-6, "pos_float"),
        "max_sweeps": Key(60, "pos_int"),
        "cold_sweeps": Key(800, "pos_int"),
    },
    "segments": {
        "bounds": Key([0.0, 1.0], "list_float"),
    },
    "noise": {
        "rel_sigma": Key(0.01, "nonneg_float"),
        "seed": Key(2024, "int"),
    },
    "predict": {
        "observe_every_h": Key(25.0, "pos_float"),
    },
    "sweep": {
        "temperatures_K": Key([1200.0, 1250.0, 1300.0], "list_pos_float"),
        "partial_pressures_Pa": Key([800.0, 1600.0, 3200.0], "list_pos_float"),
        "duration_h": Key(350.0, "pos_float"),
        "observe_every_h": Key(50.0, "pos_float"),
    },
    "gradcheck": {
        "nr": Key(6, "pos_int"),
        "nz": Key(6, "pos_int"),
        "steps": Key(4, "pos_int"),
        "hidden": Key([6], "list_pos_int"),
        "fixed_sweeps": Key(30, "pos_int"),
        "dt_h": Key(10.0, "pos_float"),
        "h": Key(1e-4, "pos_float"),
        "tolerance": Key(5e-3, "pos_float"),
        "beta1": Key(1e-2, "nonneg_float"),
        "seed": Key(7, "int"),
    },
    "test_hooks": {
        "corrupt_adjoint": Key(False, "bool"),
    },
}

PROFILES = {
    "fast": {
        "grid": {"nr": 8, "nz": 16},
        "training": {"members": 4, "dt_h": 5.0, "epochs": 500,
                     "jacobi_tol": 1e-6, "max_sweeps": 60, "cold_sweeps": 800},
        "solver": {"dt_h": 1.0},
    },
    "paper": {
        "grid": {"nr": 16, "nz": 32},
        "training": {"members": 8, "dt_h": 1.0, "epochs": 500,
                     "jacobi_tol": 1e-7, "max_sweeps": 120, "cold_sweeps": 3000},
        "solver": {"dt_h": 0.5},
    },
}


def _check_leaf(path: str, val, key: Key):
    k = key.kind
    try:
        if k == "bool":
            if not isinstance(val, bool):
                raise SchemaError(f"{path}: expected a boolean")
            return val
        if k in ("int", "pos_int"):
            if isinstance(val, bool) or not isinstance(val, int):
                raise SchemaError(f"{path}: expected an integer")
            if k == "pos_int" and val <= 0:
                raise SchemaError(f"{path}: must be positive")
            return int(val)
        if k in ("float", "pos_float", "nonneg_float", "unit_float", "pos_float_opt"):
            if val is None and k == "pos_float_opt":
                return None
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise SchemaError(f"{path}: expected a number")
            v = float(val)
            if k in ("pos_float", "pos_float_opt") and v <= 0:
                raise SchemaError(f"{path}: must be positive")
            if k == "nonneg_float" and v < 0:
                raise SchemaError(f"{path}: must be nonnegative")
            if k == "unit_float" and not (0.0 < v < 1.0):
                raise SchemaError(f"{path}: must lie strictly inside (0, 1)")
            return v
        if k == "str":
            if not isinstance(val, str):
                raise SchemaError(f"{path}: expected a string")
            if key.choices and val not in key.choices:
                raise SchemaError(f"{path}: must be one of {key.choices}")
            return val
        if k.startswith("list") or k == "range_float":
            if not isinstance(val, (list, tuple)):
                raise SchemaError(f"{path}: expected a list")
            if k == "list_pos_int":
                out = [_check_leaf(f"{path}/{i}", x, Key(None, "pos_int")) for i, x in enumerate(val)]
            elif k == "list_pos_float":
                out = [_check_leaf(f"{path}/{i}", x, Key(None, "pos_float")) for i, x in enumerate(val)]
            elif k == "list_float":
                out = [_check_leaf(f"{path}/{i}", x, Key(None, "float")) for i, x in enumerate(val)]
            elif k == "list_block":
                out = []
                for i, x in enumerate(val):
                    if x not in ("deff", "k", "sv"):
                        raise SchemaError(f"{path}/{i}: operator block must be deff, k, or sv")
                    out.append(x)
                if len(set(out)) != len(out):
                    raise SchemaError(f"{path}: duplicate operator blocks")
            elif k == "range_float":
                out = [_check_leaf(f"{path}/{i}", x, Key(None, "float")) for i, x in enumerate(val)]
                if len(out) != 2 or not out[0] < out[1]:
                    raise SchemaError(f"{path}: expected [low, high] with low < high")
            else:
                raise SchemaError(f"{path}: unhandled list kind {k}")
            return out
    except SchemaError:
        raise
    raise SchemaError(f"{path}: unhandled schema kind {k}")


def _validate_section(path: str, raw: dict, schema: dict) -> dict:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise SchemaError(f"{path or '/'}: expected a mapping")
    out = {}
    for k in raw:
        if k not in schema:
            raise SchemaError(f"{path}/{k}: unknown key")
    for k, key in schema.items():
        if k in raw:
            out[k] = _check_leaf(f"{path}/{k}", raw[k], key)
        else:
            if key.default is None and key.kind != "pos_float_opt":
                raise SchemaError(f"{path}/{k}: required key missing")
            out[k] = copy.deepcopy(key.default)
    return out


def _validate_condition(path: str, raw) -> dict:
    c = _validate_section(path, raw, _CONDITION_SCHEMA)
    if c["total_pressure_Pa"] is None:
        c["total_pressure_Pa"] = c["partial_pressure_Pa"]
    if c["partial_pressure_Pa"] > c["total_pressure_Pa"]:
        raise SchemaError(f"{path}: partial pressure exceeds total pressure")
    return c


DEFAULT_CONDITIONS = [
    {"temperature_K": T, "partial_pressure_Pa": P, "duration_h": 350.0,
     "observe_every_h": 25.0}
    for T in (1200.0, 1250.0, 1300.0) for P in (800.0, 1600.0, 3200.0)
]


def validate_config(raw: dict) -> dict:
    """Apply defaults and validate; raises SchemaError at the first problem."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise SchemaError("/: config must be a mapping")
    known = set(SCHEMA) | {"conditions", "cycles"}
    for k in raw:
        if k not in known:
            raise SchemaError(f"/{k}: unknown section")
    cfg = {}
    for section, schema in SCHEMA.items():
        cfg[section] = _validate_section(f"/{section}", raw.get(section), schema)

    conds = raw.get("conditions", copy.deepcopy(DEFAULT_CONDITIONS))
    if not isinstance(conds, list) or not conds:
        raise SchemaError("/conditions: expected a nonempty list")
    cfg["conditions"] = [_validate_condition(f"/conditions/{i}", c) for i, c in enumerate(conds)]

    cycles = raw.get("cycles", [])
    if cycles is None:
        cycles = []
    if not isinstance(cycles, list):
        raise SchemaError("/cycles: expected a list")
    out_cycles = []
    for i, c in enumerate(cycles):
        if not isinstance(c, dict):
            raise SchemaError(f"/cycles/{i}: expected a mapping")
        for k in c:
            if k not in ("condition", "trim", "observe_every_h"):
                raise SchemaError(f"/cycles/{i}/{k}: unknown key")
        if "condition" not in c:
            raise SchemaError(f"/cycles/{i}/condition: required key missing")
        cond = _validate_condition(f"/cycles/{i}/condition", c["condition"])
        if "observe_every_h" in c:
            cond["observe_every_h"] = _check_leaf(f"/cycles/{i}/observe_every_h",
                                                  c["observe_every_h"], Key(None, "pos_float"))
        trim = None
        if c.get("trim") is not None:
            trim = _validate_section(f"/cycles/{i}/trim", c["trim"], _TRIM_SCHEMA)
        out_cycles.append({"condition": cond, "trim": trim})
    cfg["cycles"] = out_cycles

    b = cfg["segments"]["bounds"]
    if len(b) < 2 or b[0] != 0.0 or b[-1] != 1.0 or any(b[i + 1] <= b[i] for i in range(len(b) - 1)):
        raise SchemaError("/segments/bounds: must increase strictly from 0 to 1")
    return cfg


def _deep_update(dst: dict, src: dict):
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _deep_update(dst[k], v)
        else:
            dst[k] = copy.deepcopy(v)


def apply_profile(cfg: dict, profile: str) -> dict:
    if profile is None:
        return cfg
    if profile not in PROFILES:
        raise SchemaError(f"/profile: unknown profile '{profile}' (have {sorted(PROFILES)})")
    out = copy.deepcopy(cfg)
    _deep_update(out, PROFILES[profile])
    return out


def load_config(path, profile: str = None) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise SchemaError(f"cannot parse {path}: {e}") from e
    cfg = validate_config(raw)
    return apply_profile(cfg, profile)


# ------------------------------------------------------------------ builders

def grid_from(cfg: dict) -> AxiGrid:
    return AxiGrid(cfg["grid"]["nr"], cfg["grid"]["nz"],
                   cfg["geometry"]["radius_m"], cfg["geometry"]["height_m"])


def truth_from(cfg: dict) -> TruthParams:
    return TruthParams(**cfg["truth"])


def norm_from(cfg: dict) -> Normalization:
    op = cfg["operators"]
    return Normalization(cfg["truth"]["eps0"], cfg["truth"]["r_f"],
                         tuple(op["T_range"]), tuple(op["P_range"]))


def segments_from(cfg: dict) -> SegmentSpec:
    return SegmentSpec(tuple(cfg["segments"]["bounds"]))


def conditions_from(cfg: dict) -> list:
    return [OperatingCondition(c["temperature_K"], c["total_pressure_Pa"],
                               c["partial_pressure_Pa"], c["duration_h"] * HOUR)
            for c in cfg["conditions"]]


def obs_times_from(cfg_cond: dict) -> np.ndarray:
    """Observation instants for one condition entry: every observe_every_h
    hours, always including the final time."""
    dur = cfg_cond["duration_h"] * HOUR
    step = cfg_cond["observe_every_h"] * HOUR
    times = list(np.arange(step, dur + 0.5 * step, step))
    if not times or abs(times[-1] - dur) > 1e-6 * dur:
        times.append(dur)
    return np.asarray(sorted(set(times)))


def solver_from(cfg: dict, training: bool = False) -> SolverConfig:
    s = cfg["solver"]
    t = cfg["training"]
    if training:
        return SolverConfig(jacobi_tol=t["jacobi_tol"], max_sweeps=t["max_sweeps"],
                            cold_sweeps=t["cold_sweeps"], check_every=s["check_every"],
                            warm_start=s["warm_start"], flux_form=s["flux_form"],
                            dt_s=t["dt_h"] * HOUR, stepper=s["stepper"])
    return SolverConfig(jacobi_tol=s["jacobi_tol"], max_sweeps=s["max_sweeps"],
                        cold_sweeps=s["cold_sweeps"], check_every=s["check_every"],
                        warm_start=s["warm_start"], flux_form=s["flux_form"],
                        dt_s=s["dt_h"] * HOUR, stepper=s["stepper"])


def loss_from(cfg: dict) -> LossConfig:
    t = cfg["training"]
    return LossConfig(beta1=t["beta1"], beta2=t["beta2"], beta3=t["beta3"],
                      smoothness_stride=t["smoothness_stride"],
                      residual_consistent=t["residual_consistent"])


def optimizer_from(cfg: dict) -> OptimizerConfig:
    t = cfg["training"]
    return OptimizerConfig(lr=t["lr"], adam_beta1=t["adam_beta1"],
                           adam_beta2=t["adam_beta2"], adam_eps=t["adam_eps"],
                           cosine_alpha=t["cosine_alpha"], epochs=t["epochs"])


def bundle_factory_from(cfg: dict):
    """Factory building a per-seed bundle: configured blocks are neural,
    the rest evaluate the closed-form truth laws."""
    op = cfg["operators"]
    tp = truth_from(cfg)
    hidden = tuple(op["hidden"])
    blocks = list(op["neural_blocks"])

    def factory(seed: int):
        ss = np.random.SeedSequence(int(seed)).spawn(3)
        neural = {}
        if "deff" in blocks:
            spec = MlpSpec(3, hidden)
            neural["deff"] = NeuralDeff(init_mlp(spec, ss[0]), spec, op["d_scale"])
        if "k" in blocks:
            spec = MlpSpec(1, hidden)
            neural["k"] = NeuralK(init_mlp(spec, ss[1]), spec, op["k_scale"])
        if "sv" in blocks:
            spec = MlpSpec(2, hidden)
            neural["sv"] = NeuralSv(init_mlp(spec, ss[2]), spec, op["sv_bound"])
        return hybrid_bundle(tp, neural, norm_from(cfg))

    return factory


def cycles_from(cfg: dict) -> list:
    out = []
    for c in cfg["cycles"]:
        cond = OperatingCondition(c["condition"]["temperature_K"],
                                  c["condition"]["total_pressure_Pa"],
                                  c["condition"]["partial_pressure_Pa"],
                                  c["condition"]["duration_h"] * HOUR)
        times = obs_times_from(c["condition"])
        trim = None
        if c["trim"] is not None:
            trim = TrimSpec(c["trim"]["radial_m"], c["trim"]["top_m"], c["trim"]["bottom_m"])
        out.append(CycleSpec(cond, tuple(times), trim))
    return out

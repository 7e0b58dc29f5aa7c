"""Command-line entry point: ``omcrystal <subcommand> ...``.

Exit codes: 0 success, 1 runtime/module error, 2 usage or configuration error.
Configs are TOML; every physical quantity carries a unit suffix
(``_nm``, ``_hz``, ``_k``, ``_w``, ``_s``, ``_rad``, ``_deg``). A config path
``pkg:NAME`` refers to a config shipped with the package.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import platform
import sys
import warnings
from dataclasses import dataclass, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import pec as pec_mod
from .coupling import CouplingError, MaterialProps, g_om_total, load_field_mesh, rotation_z
from .geometry import (
    FABRICATION_PARAMS,
    SIMULATION_PARAMS,
    GeometryError,
    GratingParams,
    Layout,
    grating_layout,
    resonator_from_flat,
    symmetry_check,
    vertebrae_layout,
)
from .locksim import LockConfig, LockError, PlantState, loop_bandwidth_hz, run_lock
from .pec import DoseMap, PecError, PsfModel, convolve_dose, correct_dose, rasterize
from .spectra import (
    DETUNINGS,
    TWO_PI,
    WINDOWS,
    CalibrationTone,
    PipelineSettings,
    ScanParams,
    SpectraError,
    SpectrumTrace,
    analyze_scans,
    scan_params_dict,
    simulate_scans,
)

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

MODULE_ERRORS = (GeometryError, PecError, CouplingError, SpectraError, LockError)


class ConfigError(Exception):
    """Invalid invocation or configuration; carries every problem found."""

    def __init__(self, errors):
        self.errors = [errors] if isinstance(errors, str) else list(errors)
        super().__init__("; ".join(self.errors))


# ---------------------------------------------------------------------------
# config schema
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Field:
    key: str  # config key, with unit suffix
    target: str  # constructor argument
    kind: type = float
    rule: object = None  # "pos", "nonneg", "frac", ("choice", ...), None


def _check(field: Field, value, where: str) -> tuple[object, str | None]:
    name = f"{where}.{field.key}"
    if field.kind is bool:
        if not isinstance(value, bool):
            return None, f"{name} must be true or false"
    elif field.kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            return None, f"{name} must be an integer"
    elif field.kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return None, f"{name} must be a number"
        value = float(value)
        if math.isnan(value):
            return None, f"{name} must not be NaN"
    elif field.kind is str:
        if not isinstance(value, str):
            return None, f"{name} must be a string"
    elif field.kind is list:
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            return None, f"{name} must be a list of numbers"
        value = tuple(float(v) for v in value)
    rule = field.rule
    if rule == "pos" and not value > 0:
        return None, f"{name} must be > 0, got {value}"
    if rule == "nonneg" and not value >= 0:
        return None, f"{name} must be >= 0, got {value}"
    if rule == "frac" and not 0 < value < 1:
        return None, f"{name} must be in (0, 1), got {value}"
    if isinstance(rule, tuple) and rule[0] == "choice" and value not in rule[1:]:
        return None, f"{name} must be one of {list(rule[1:])}, got {value!r}"
    return value, None


def validate_section(data: dict, schema: list[Field], where: str) -> tuple[dict, list[str]]:
    """Map config keys to constructor arguments, collecting every error."""
    by_key = {f.key: f for f in schema}
    out, errors = {}, []
    if not isinstance(data, dict):
        return out, [f"[{where}] must be a table"]
    for key, value in data.items():
        field = by_key.get(key)
        if field is None:
            hint = [f.key for f in schema if f.key.startswith(key + "_")]
            extra = f" (did you mean {hint[0]!r}? physical quantities need a unit suffix)" if hint else ""
            errors.append(f"{where}.{key}: unknown key{extra}")
            continue
        val, err = _check(field, value, where)
        if err:
            errors.append(err)
        else:
            out[field.target] = val
    return out, errors


_LEN = ("t", "a", "r", "w", "q_mirror", "v_mirror", "p_mirror", "u_mirror", "q_defect", "v_defect", "p_defect", "u_defect", "d", "s", "chamfer", "chord_tol")
_COUNTS = ("n_defect", "n_gradient", "n_mirror", "n_taper", "n_rows", "extra_columns")
VERTEBRAE_SCHEMA = (
    [Field("kind", "kind", str, ("choice", "vertebrae", "grating")), Field("preset", "preset", str, ("choice", "simulation", "fabrication"))]
    + [Field(f"{k}_nm", k, float, "pos") for k in _LEN]
    + [Field(k, k, int, "nonneg") for k in _COUNTS]
)
GRATING_SCHEMA = [
    Field("kind", "kind", str, ("choice", "vertebrae", "grating")),
    Field("pitch_nm", "pitch", float, "pos"),
    Field("fill", "fill", float, "frac"),
    Field("b", "b", float),
    Field("n_grates", "n_grates", int, "pos"),
    Field("w_nm", "w", float, "pos"),
    Field("h_nm", "h", float, "pos"),
    Field("t_nm", "t", float, "pos"),
    Field("a0_nm", "a0", float, "pos"),
    Field("half_angle_deg", "half_angle_deg", float, "pos"),
    Field("chord_tol_nm", "chord_tol", float, "pos"),
]
SIMULATE_SCHEMA = [
    Field("g_om_hz", "g_om_hz", float, "pos"),
    Field("f_m_hz", "f_m_hz", float, "pos"),
    Field("q_m", "q_m", float, "pos"),
    Field("temperature_k", "temperature", float, "pos"),
    Field("tone_offset_hz", "tone_offset_hz", float),
    Field("tone_depth_rad", "tone_depth", float, "pos"),
    Field("rbw_hz", "rbw_hz", float, "pos"),
    Field("span_hz", "span_hz", float, "pos"),
    Field("step_hz", "step_hz", float, "pos"),
    Field("input_power_w", "input_power_w", float, "pos"),
    Field("transduction_per_w2", "transduction_per_w2", float, "pos"),
    Field("detuning", "detuning", str, ("choice",) + DETUNINGS),
    Field("red_factor", "red_factor", float, "pos"),
    Field("bg_thermal_units", "bg", list),
    Field("noise_rel", "noise_rel", float, "nonneg"),
    Field("noise_floor_w", "noise_floor_w", float, "nonneg"),
    Field("gain_jitter", "gain_jitter", float, "nonneg"),
    Field("detector_p2", "detector_p2", bool),
    Field("window", "window", str, ("choice",) + WINDOWS),
    Field("dither_hz", "dither_hz", float, "nonneg"),
    Field("dither_fraction", "dither_fraction", float, "nonneg"),
]
PLANT_SCHEMA = [
    Field("lambda_nm", "lambda_nm", float, "pos"),
    Field("q_loaded", "q_loaded", float, "pos"),
    Field("q_intrinsic", "q_intrinsic", float, "pos"),
    Field("center_rate_nm_s", "center_rate_nm_s", float),
    Field("center_walk_nm", "center_walk_nm", float, "nonneg"),
    Field("center_walk_time_s", "center_walk_time_s", float, "pos"),
    Field("eta", "eta", float, "pos"),
    Field("eta_rate_per_s", "eta_rate_per_s", float),
    Field("eta_walk", "eta_walk", float, "nonneg"),
    Field("eta_walk_time_s", "eta_walk_time_s", float, "pos"),
    Field("eta_step_time_s", "eta_step_time_s", float, "nonneg"),
    Field("eta_step_factor", "eta_step_factor", float, "pos"),
]
LOCK_SCHEMA = [
    Field("f_dither_hz", "f_dither_hz", float, "pos"),
    Field("dither_nm", "dither_nm", float, "pos"),
    Field("harmonic", "harmonic", int, ("choice", 1, 2)),
    Field("time_constant_s", "time_constant_s", float, "pos"),
    Field("kp_nm", "kp", float),
    Field("ki_nm_per_s", "ki", float),
    Field("kd_nm_s", "kd", float),
    Field("samples_per_period", "samples_per_period", int, "pos"),
    Field("mode", "mode", str, ("choice", "dither", "side")),
    Field("side", "side", int, ("choice", -1, 0, 1)),
    Field("side_setpoint", "side_setpoint", float, "frac"),
    Field("i_limit_nm", "i_limit", float, "pos"),
    Field("loss_width_gamma", "loss_width", float, "pos"),
    Field("start_offset_gamma", "start_offset", float),
]


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _resolve(path: str) -> Path | resources.abc.Traversable:
    if path.startswith("pkg:"):
        name = path[4:]
        res = resources.files("omcrystal").joinpath("configs", name if name.endswith(".toml") else name + ".toml")
        if not res.is_file():
            raise ConfigError(f"no shipped config named {name!r}: {path}")
        return res
    return Path(path)


def load_config(path: str) -> tuple[dict, str]:
    """Parsed TOML and the sha256 of its bytes."""
    res = _resolve(path)
    if not res.is_file():
        raise ConfigError(f"config file not found: {path}")
    raw = res.read_bytes()
    try:
        data = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from None
    return data, hashlib.sha256(raw).hexdigest()


def _need_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return p


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _strip_out(argv: list[str]) -> list[str]:
    out, skip = [], False
    for i, tok in enumerate(argv):
        if skip:
            skip = False
            continue
        if tok == "--out":
            skip = True
            continue
        if tok.startswith("--out="):
            continue
        out.append(tok)
    return out


def provenance(args, argv, config=None, config_sha=None, inputs=None) -> dict:
    return {
        "tool": "omcrystal",
        "version": __version__,
        "command": args.command,
        "argv": _strip_out(argv),
        "seed": args.seed,
        "config": config,
        "config_sha256": config_sha,
        "inputs": inputs or {},
        "versions": {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__},
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(payload: dict) -> str:
    return json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n"


def emit(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def rows_to_csv(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


QUIET = False


def _report(caught) -> None:
    if QUIET:
        return
    for msg in dict.fromkeys(str(w.message) for w in caught):
        print(f"warning: {msg}", file=sys.stderr)


def _require_json(args) -> None:
    if args.format != "json":
        raise ConfigError(f"--format {args.format} is not available for '{args.command}'; use json")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def build_layout(cfg: dict) -> tuple[Layout, dict]:
    section = cfg.get("layout", {})
    kind = section.get("kind", "vertebrae") if isinstance(section, dict) else "vertebrae"
    unknown = sorted(set(cfg) - {"layout"})
    errors = [f"unknown section [{k}]" for k in unknown]
    if kind == "grating":
        vals, errs = validate_section(section, GRATING_SCHEMA, "layout")
        errors += errs
        if errors:
            raise ConfigError(errors)
        vals.pop("kind", None)
        params = GratingParams(**vals)
        return grating_layout(params), {"kind": "grating", **{f.name: getattr(params, f.name) for f in fields(params)}}
    vals, errs = validate_section(section, VERTEBRAE_SCHEMA, "layout")
    errors += errs
    if errors:
        raise ConfigError(errors)
    vals.pop("kind", None)
    preset = vals.pop("preset", "simulation")
    base = dict(SIMULATION_PARAMS if preset == "simulation" else FABRICATION_PARAMS)
    base.update(vals)
    try:
        params = resonator_from_flat(base)
    except GeometryError as exc:
        raise ConfigError(str(exc).split("; ")) from None
    return vertebrae_layout(params), {"kind": "vertebrae", "preset": preset, **base}


def cmd_layout(args, argv) -> int:
    cfg, sha = load_config(args.params)
    layout, resolved = build_layout(cfg)
    _require_json(args)
    summary = {"n_polygons": len(layout.polygons), "bbox_nm": list(layout.bbox), "parameters": resolved}
    if resolved["kind"] == "vertebrae":
        summary["symmetry_max_distance_nm"] = {p: symmetry_check(layout, p).max_distance for p in ("x", "y")}
    summary["provenance"] = provenance(args, argv, cfg, sha)
    if args.out:
        layout.save(args.out)
        sys.stdout.write(dumps(summary))
    else:
        sys.stdout.write(json.dumps(layout.to_dict()) + "\n")
    return 0


def _psf(args) -> tuple[PsfModel, dict]:
    if args.psf:
        p = _need_file(args.psf, "PSF file")
        return PsfModel.load(p), {args.psf: file_digest(p)}
    return PsfModel.gaas_250nm(), {}


def _dose_input(path: str, pixel: float | None, margin: float) -> tuple[DoseMap, dict]:
    p = _need_file(path, "input")
    digest = {path: file_digest(p)}
    if p.suffix.lower() == ".json":
        if pixel is None:
            raise ConfigError("--pixel is required when the input is a layout")
        return rasterize(Layout.load(p), pixel, margin=margin), digest
    return DoseMap.load(p), digest


def _check_pixel(args) -> None:
    errors = []
    if args.pixel is not None and not args.pixel > 0:
        errors.append(f"--pixel must be > 0 nm, got {args.pixel}")
    if args.margin < 0:
        errors.append(f"--margin must be >= 0 nm, got {args.margin}")
    if getattr(args, "tol", 1.0) is not None and not getattr(args, "tol", 1.0) > 0:
        errors.append(f"--tol must be > 0, got {args.tol}")
    if errors:
        raise ConfigError(errors)


def cmd_pec(args, argv) -> int:
    _check_pixel(args)
    _require_json(args)
    model, inputs = _psf(args)
    if args.action == "forward":
        written, dig = _dose_input(args.layout, args.pixel, args.margin)
        inputs.update(dig)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            deposited = convolve_dose(written, model)
        _report(caught)
        if args.out:
            deposited.save(args.out)
        summary = {
            "action": "forward",
            "shape": list(written.shape),
            "pixel_nm": written.pixel,
            "written_total": written.total(),
            "deposited_total": deposited.total(),
            "deposited_max": float(deposited.values.max()),
        }
        code = 0
    else:
        target, dig = _dose_input(args.target, args.pixel, args.margin)
        inputs.update(dig)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            res = correct_dose(target, model, iters=args.iters, tol=args.tol, damping=args.damping, threshold=args.threshold)
        _report(caught)
        if args.out:
            res.dose.save(args.out)
        summary = {
            "action": "correct",
            "shape": list(target.shape),
            "pixel_nm": target.pixel,
            "residual": res.residual,
            "iterations": res.iterations,
            "converged": res.converged,
            "dose_max": float(res.dose.values.max()),
        }
        code = 0 if res.converged else 1
        if not res.converged:
            print(f"error: correction did not reach tol {args.tol} (residual {res.residual:.3g})", file=sys.stderr)
    summary["psf"] = model.to_dict()
    summary["provenance"] = provenance(args, argv, inputs=inputs)
    sys.stdout.write(dumps(summary))
    return code


def cmd_gom(args, argv) -> int:
    _require_json(args)
    mesh_path = _need_file(args.mesh, "field mesh")
    inputs = {args.mesh: file_digest(mesh_path)}
    if args.material:
        mat_path = _need_file(args.material, "material file")
        mat = MaterialProps.load(mat_path)
        inputs[args.material] = file_digest(mat_path)
    else:
        mat = MaterialProps.gaas()
    mesh = load_field_mesh(mesh_path)
    rot = rotation_z(math.radians(args.rotation_deg)) if args.rotation_deg else None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = g_om_total(mesh, mat, rot)
    _report(caught)
    payload = {
        "g_mb_hz": [res.g_mb.real / TWO_PI, res.g_mb.imag / TWO_PI],
        "g_pe_hz": [res.g_pe.real / TWO_PI, res.g_pe.imag / TWO_PI],
        "g_om_hz": res.g_om / TWO_PI,
        "mesh": mesh.stats(),
        "material": mat.to_dict(),
        "rotation_deg": args.rotation_deg,
        "provenance": provenance(args, argv, inputs=inputs),
    }
    emit(dumps(payload), args.out)
    return 0


def cmd_fit(args, argv) -> int:
    errors = []
    for name, val in (("--tone-freq", args.tone_freq), ("--tone-depth", args.tone_depth), ("--temp", args.temp)):
        if not val > 0:
            errors.append(f"{name} must be > 0, got {val}")
    if not 0 <= args.bg_order <= 5:
        errors.append(f"--bg-order must be in 0..5, got {args.bg_order}")
    folder = resources.files("omcrystal").joinpath("fixtures", args.traces[4:]) if args.traces.startswith("pkg:") else Path(args.traces)
    if not folder.is_dir():
        errors.append(f"trace directory not found: {args.traces}")
    if errors:
        raise ConfigError(errors)
    files = sorted((f for f in folder.iterdir() if f.name.endswith(".csv")), key=lambda f: f.name)
    if not files:
        raise ConfigError(f"no *.csv traces in {args.traces}")
    traces = []
    for f in files:
        with resources.as_file(f) as path:
            traces.append(SpectrumTrace.load_csv(path))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        tone = CalibrationTone(TWO_PI * args.tone_freq, args.tone_depth)
        settings = PipelineSettings(bg_order=args.bg_order, window=args.window)
        res = analyze_scans(traces, tone, args.temp, settings, args.temp_error, args.depth_error)
    _report(caught)
    payload = res.to_dict()
    payload["files"] = [f.name for f in files]
    inputs = {} if args.traces.startswith("pkg:") else {str(f): file_digest(f) for f in files}
    payload["provenance"] = provenance(args, argv, inputs=inputs)
    if args.format == "csv":
        header = ["scan_id", "detuning", "g_om_hz", "rel_error", "amplitude", "f_m_hz", "gamma_m_hz", "tone_peak_w"]
        rows = [[s[k] for k in header] for s in payload["scans"]]
        emit(rows_to_csv(header, rows), args.out)
    else:
        emit(dumps(payload), args.out)
    return 0


def scan_params_from_config(cfg: dict) -> ScanParams:
    unknown = sorted(set(cfg) - {"simulate"})
    vals, errors = validate_section(cfg.get("simulate", {}), SIMULATE_SCHEMA, "simulate")
    errors = [f"unknown section [{k}]" for k in unknown] + errors
    span, step = vals.get("span_hz", ScanParams.span_hz), vals.get("step_hz", ScanParams.step_hz)
    if step > 0 and span > 0 and step >= span:
        errors.append("simulate.step_hz must be smaller than simulate.span_hz")
    if errors:
        raise ConfigError(errors)
    return ScanParams(**vals)


def cmd_simulate(args, argv) -> int:
    cfg, sha = load_config(args.config)
    params = scan_params_from_config(cfg)
    if not args.scans >= 1:
        raise ConfigError(f"--scans must be >= 1, got {args.scans}")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        params.tone()  # depth warning
        traces = simulate_scans(params, args.scans, seed=args.seed)
    _report(caught)
    _require_json(args)
    out = Path(args.out) if args.out else None
    files = []
    if out:
        out.mkdir(parents=True, exist_ok=True)
        for t in traces:
            name = f"scan_{t.scan_id:04d}.csv"
            (t.in_dbm() if args.unit == "dBm" else t).save_csv(out / name)
            files.append(name)
    truth = scan_params_dict(params)
    summary = {
        "scans": args.scans,
        "files": files,
        "truth": truth,
        "tone_freq_hz": params.f_m_hz + params.tone_offset_hz,
        "provenance": provenance(args, argv, cfg, sha),
    }
    text = dumps(summary)
    if out:
        (out / "manifest.json").write_text(text)
    sys.stdout.write(text)
    return 0


def lock_from_config(cfg: dict):
    unknown = sorted(set(cfg) - {"plant", "lock"})
    pv, perr = validate_section(cfg.get("plant", {}), PLANT_SCHEMA, "plant")
    lv, lerr = validate_section(cfg.get("lock", {}), LOCK_SCHEMA, "lock")
    errors = [f"unknown section [{k}]" for k in unknown] + perr + lerr
    if pv.get("q_loaded", 4300.0) >= pv.get("q_intrinsic", 8600.0):
        errors.append("plant.q_loaded must be below plant.q_intrinsic")
    start = lv.pop("start_offset", 0.3)
    gains = {k: lv.pop(k) for k in ("kp", "ki", "kd") if k in lv}
    if errors:
        raise ConfigError(errors)
    base = {k: pv.pop(k) for k in ("lambda_nm", "q_loaded", "q_intrinsic") if k in pv}
    try:
        plant = PlantState.from_q(**base, **pv)
        harmonic, mode = lv.pop("harmonic", 2), lv.pop("mode", "dither")
        cfg_obj = LockConfig.tuned(plant, harmonic, mode, **lv)
    except LockError as exc:
        raise ConfigError(str(exc).split("; ")) from None
    if gains:
        cfg_obj = replace(cfg_obj, **gains)
    return plant, cfg_obj, start


def cmd_lock(args, argv) -> int:
    cfg, sha = load_config(args.config)
    plant, lock_cfg, start = lock_from_config(cfg)
    if not args.duration > 0:
        raise ConfigError(f"--duration must be > 0 s, got {args.duration}")
    traj = run_lock(plant, lock_cfg, args.duration, seed=args.seed, start_offset=start)
    if args.out:
        if args.format == "json":
            rows = {"t_s": traj.t, "lambda_nm": traj.lambda_nm, "demod": traj.demod, "transmission": traj.transmission, "locked": traj.locked.astype(int)}
            Path(args.out).write_text(dumps({k: list(v) for k, v in rows.items()}))
        else:
            traj.save_csv(args.out)
    summary = {
        "converged": traj.converged(),
        "lost_at_s": traj.lost_at,
        "target_offset_gamma": traj.target,
        "final_offset_gamma": float(traj.offset[-1]),
        "tail_offset_gamma": traj.tail_offset(),
        "loop_bandwidth_hz": loop_bandwidth_hz(plant, lock_cfg),
        "gains": {"kp_nm": lock_cfg.kp, "ki_nm_per_s": lock_cfg.ki, "kd_nm_s": lock_cfg.kd},
        "periods": len(traj.t),
        "provenance": provenance(args, argv, cfg, sha),
    }
    sys.stdout.write(dumps(summary))
    if traj.lost_at is not None:
        print(f"error: lock lost at t = {traj.lost_at:.4g} s", file=sys.stderr)
        return 1
    return 0


def cmd_rerun(args, argv) -> int:
    src = _need_file(args.result, "result file")
    try:
        prov = json.loads(src.read_text())["provenance"]
        old_argv = list(prov["argv"])
    except (json.JSONDecodeError, KeyError, TypeError):
        raise ConfigError(f"{args.result}: no provenance block") from None
    problems = []
    for path, digest in prov.get("inputs", {}).items():
        if not Path(path).is_file():
            problems.append(f"input missing: {path}")
        elif file_digest(path) != digest:
            problems.append(f"input changed since the recorded run: {path}")
    if prov.get("config_sha256"):
        idx = next((i for i, t in enumerate(old_argv) if t in ("--config", "--params")), None)
        if idx is not None and idx + 1 < len(old_argv):
            _, sha = load_config(old_argv[idx + 1])
            if sha != prov["config_sha256"]:
                problems.append(f"config changed since the recorded run: {old_argv[idx + 1]}")
    if problems:
        raise ConfigError(problems)
    if args.out:
        old_argv += ["--out", args.out]
    return main(old_argv)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=1, help="FFT worker threads (-1 for all cores)")
    common.add_argument("--out", help="output path (stdout if omitted)")
    common.add_argument("-q", "--quiet", action="store_true", help="suppress warnings on stderr")
    common.add_argument("--format", choices=("json", "csv"), help="result format (json; csv for lock-sim trajectories)")

    p = argparse.ArgumentParser(prog="omcrystal", description="Optomechanical crystal toolkit.")
    p.add_argument("--version", action="version", version=f"omcrystal {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("layout", parents=[common], help="generate a resonator or grating layout")
    s.add_argument("--params", required=True, help="TOML layout config (lengths in *_nm)")

    s = sub.add_parser("pec", parents=[common], help="proximity-effect forward model and dose correction")
    s.add_argument("action", choices=("forward", "correct"))
    s.add_argument("--layout", help="layout JSON or dose map (.bin) to expose (forward)")
    s.add_argument("--target", help="target layout JSON or dose map (.bin) (correct)")
    s.add_argument("--psf", help="PSF JSON (default: shipped GaAs 250 nm model)")
    s.add_argument("--pixel", type=float, help="pixel size in nm when rasterising a layout")
    s.add_argument("--margin", type=float, default=0.0, help="raster margin around the layout, nm")
    s.add_argument("--tol", type=float, default=1e-3, help="max residual on exposed pixels")
    s.add_argument("--iters", type=int, default=200)
    s.add_argument("--damping", type=float, default=1.0)
    s.add_argument("--threshold", type=float, default=0.5, help="target level counted as exposed")

    s = sub.add_parser("gom", parents=[common], help="coupling integrals from a field mesh")
    s.add_argument("--mesh", required=True, help="field file (.omcf)")
    s.add_argument("--material", help="material JSON (default: shipped GaAs)")
    s.add_argument("--rotation-deg", type=float, default=0.0, help="crystal rotation about z")

    s = sub.add_parser("fit", parents=[common], help="extract g_om from spectrum-analyzer traces")
    s.add_argument("--traces", required=True, help="directory of trace CSV files, or pkg:traces for the shipped set")
    s.add_argument("--tone-freq", type=float, required=True, help="calibration tone frequency, Hz")
    s.add_argument("--tone-depth", type=float, required=True, help="phase-modulation depth, rad")
    s.add_argument("--temp", type=float, required=True, help="temperature, K")
    s.add_argument("--temp-error", type=float, default=3.0, help="temperature uncertainty, K")
    s.add_argument("--depth-error", type=float, default=0.0, help="depth uncertainty, rad")
    s.add_argument("--bg-order", type=int, default=2)
    s.add_argument("--window", choices=WINDOWS, default="gaussian")

    s = sub.add_parser("simulate", parents=[common], help="synthesise spectrum-analyzer traces")
    s.add_argument("--config", required=True, help="TOML scan config, or pkg:simulate")
    s.add_argument("--scans", type=int, default=100)
    s.add_argument("--unit", choices=("W", "dBm"), default="W", help="power unit of the written traces")

    s = sub.add_parser("lock-sim", parents=[common], help="simulate the dither lock")
    s.add_argument("--config", required=True, help="TOML plant/lock config, or pkg:lock")
    s.add_argument("--duration", type=float, default=10.0, help="simulated time, s")

    s = sub.add_parser("rerun", parents=[common], help="repeat the run recorded in a result JSON")
    s.add_argument("result")
    return p


COMMANDS = {
    "layout": cmd_layout,
    "pec": cmd_pec,
    "gom": cmd_gom,
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "lock-sim": cmd_lock,
    "rerun": cmd_rerun,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.format is None:
        args.format = "csv" if args.command == "lock-sim" else "json"
    if args.command == "pec":
        missing = "--layout" if args.action == "forward" and not args.layout else "--target" if args.action == "correct" and not args.target else None
        if missing:
            print(f"error: pec {args.action} needs {missing}", file=sys.stderr)
            return 2
    if args.threads == 0 or args.threads < -1:
        print(f"error: --threads must be >= 1 or -1, got {args.threads}", file=sys.stderr)
        return 2
    global QUIET
    QUIET = args.quiet
    pec_mod.FFT_WORKERS = args.threads
    try:
        with np.errstate(under="ignore"):
            return COMMANDS[args.command](args, argv)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    except MODULE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        pec_mod.FFT_WORKERS = 1


if __name__ == "__main__":
    sys.exit(main())

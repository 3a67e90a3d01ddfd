"""Command-line front end: ``ddnfl {collect,train,verify,finetune,report,replay}``.

Every command that writes files also writes one ``manifest.json`` into its output
directory. Exit codes: 0 success, 1 unexpected failure, 2 config/IO error,
3 data/persistent-excitation error, 4 no convergence, 5 synthesis SDP infeasible,
6 verification infeasible.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__, errors
from .certify import StabilityCertificate, roa_from_certificate, solver_tolerance, verify_fixed_controller
from .finetune import FinetuneConfig, finetune
from .network import NnController
from .plant import (VEHICLE_BOX, ExperimentData, Excitation, PlantModel, StateBox, collect,
                    vehicle_lateral)
from .synthesis import SynthesisConfig, generate_expert_demos, synthesize, write_trace

log = logging.getLogger("ddnfl")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NOT_CONVERGED = 4
EXIT_SDP_INFEASIBLE = 5
EXIT_UNVERIFIED = 6


class ConfigError(errors.DdnflError):
    pass


PRESETS = {
    "vehicle-lateral": {
        "seed": 1,
        "plant": {"preset": "vehicle-lateral", "dt": 0.02},
        "box": {"lower": [-2.0, -5.0, -1.0, -5.0], "upper": [2.0, 5.0, 1.0, 5.0]},
        "collect": {"T": 50, "excitation": {"kind": "uniform", "lo": -1.0, "hi": 1.0}},
        "architecture": [4, 10, 10, 1],
        "synthesis": {"eta1": 100.0, "eta2": 100.0, "rho": 1000.0, "sigma": 0.005,
                      "max_outer_iters": 20, "inner_epochs": 200, "lr": 1e-3,
                      "expert": {"Q": [1.0, 0.1, 1.0, 0.1], "R": 1.0}, "demo_count": 500},
        "finetune": {"eta2": 100.0, "eta3": 1.0, "rho": 1000.0, "sigma": 0.005,
                     "sigma_prime": 1e-4, "max_outer_iters": 15, "max_inner_iters": 100},
        "solver": "CLARABEL",
    },
    "scalar-demo": {
        "seed": 0,
        "plant": {"A": [[1.2]], "B": [[1.0]], "dt": 1.0},
        "box": {"lower": [-1.0], "upper": [1.0]},
        "collect": {"T": 10, "excitation": {"kind": "uniform", "lo": -1.0, "hi": 1.0}},
        "architecture": [1, 4, 1],
        "synthesis": {"eta1": 100.0, "eta2": 1.0, "rho": 1000.0, "sigma": 0.005,
                      "max_outer_iters": 20, "inner_epochs": 100, "pretrain_epochs": 500,
                      "expert": {"Q": 1.0, "R": 1.0}, "demo_count": 200},
        "finetune": {"eta2": 1.0, "eta3": 1.0, "rho": 1000.0, "sigma": 0.005,
                     "sigma_prime": 1e-6, "max_outer_iters": 15, "max_inner_iters": 100},
        "solver": "CLARABEL",
    },
}


# ----------------------------------------------------------------- config handling

def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(ref) -> dict:
    """Preset name, YAML/JSON file path, or a dict; a ``preset`` key pulls in its defaults."""
    if isinstance(ref, dict):
        cfg = copy.deepcopy(ref)
    elif ref in PRESETS:
        cfg = copy.deepcopy(PRESETS[ref])
    else:
        path = Path(ref)
        if not path.is_file():
            raise ConfigError(f"config {ref!r} is neither a preset nor a readable file")
        try:
            cfg = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    base = cfg.pop("preset", None)
    if base is not None:
        if base not in PRESETS:
            raise ConfigError(f"unknown preset {base!r}; choose from {sorted(PRESETS)}")
        cfg = _merge(PRESETS[base], cfg)
    return cfg


def _section(cfg, key):
    sec = cfg.get(key) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {key!r} must be a mapping")
    return sec


def build_plant(cfg) -> PlantModel:
    spec = _section(cfg, "plant")
    if spec.get("preset") == "vehicle-lateral":
        return vehicle_lateral(float(spec.get("dt", 0.02)), **spec.get("params", {}))
    if "A" not in spec or "B" not in spec:
        raise ConfigError("plant needs either preset: vehicle-lateral or explicit A and B")
    try:
        return PlantModel(np.atleast_2d(np.asarray(spec["A"], dtype=float)),
                          np.atleast_2d(np.asarray(spec["B"], dtype=float)), float(spec.get("dt", 1.0)))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad plant matrices: {exc}") from exc


def build_box(cfg) -> StateBox:
    spec = cfg.get("box")
    if spec is None:
        if _section(cfg, "plant").get("preset") == "vehicle-lateral":
            return VEHICLE_BOX
        raise ConfigError("config has no box")
    try:
        return StateBox.from_dict(spec)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"bad box: {exc}") from exc


def _dataclass_from(cls, values, **extra):
    values = {**(values or {}), **extra}
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
    try:
        return cls(**values)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad {cls.__name__}: {exc}") from exc


def synthesis_config(cfg, seed) -> SynthesisConfig:
    return _dataclass_from(SynthesisConfig, _section(cfg, "synthesis"), seed=seed,
                           solver=cfg.get("solver", "CLARABEL"))


def finetune_config(cfg) -> FinetuneConfig:
    return _dataclass_from(FinetuneConfig, _section(cfg, "finetune"),
                           solver=cfg.get("solver", "CLARABEL"))


# ----------------------------------------------------------------- manifests

@dataclass
class RunManifest:
    command: str
    config: dict
    arguments: dict
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    version: str = __version__
    exit_code: int = 0
    notes: dict = field(default_factory=dict)

    def add_input(self, path):
        path = Path(path)
        files = sorted(p for p in path.iterdir() if p.is_file()) if path.is_dir() else [path]
        for p in files:
            self.inputs[str(p)] = hashlib.sha256(p.read_bytes()).hexdigest()

    def write(self, out_dir):
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, default=_json_default))
        return path


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not serialisable: {type(obj).__name__}")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, cfg):
    return int(args.seed if args.seed is not None else cfg.get("seed", 0))


def _load_data(path) -> ExperimentData:
    try:
        return ExperimentData.load(path)
    except (OSError, KeyError, ValueError) as exc:
        if isinstance(exc, errors.InvalidDimensions):
            raise
        raise ConfigError(f"cannot read data from {path}: {exc}") from exc


def _load_controller(path) -> NnController:
    try:
        return NnController.load(path)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read controller {path}: {exc}") from exc


def _data_dir(args, cfg):
    ref = args.data or cfg.get("data_dir")
    if ref is None:
        raise ConfigError("no data directory given (--data or data_dir in the config)")
    return Path(ref)


# ----------------------------------------------------------------- commands

def cmd_collect(args, cfg, manifest: RunManifest):
    out = _out_dir(args)
    plant = build_plant(cfg)
    box = build_box(cfg) if cfg.get("box") is not None or "preset" in _section(cfg, "plant") else None
    spec = _section(cfg, "collect")
    if "T" not in spec:
        raise ConfigError("collect.T is required")
    try:
        excitation = Excitation.from_dict(spec.get("excitation"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad excitation: {exc}") from exc
    seed = _seed(args, cfg)
    data = collect(plant, int(spec["T"]), excitation, seed=seed, box=box)
    data.save(out)
    manifest.outputs += [str(out / f) for f in ("u.csv", "x0.csv", "x1.csv", "data.json")]
    manifest.notes.update(T=data.T, pe_ok=bool(data.pe_ok), seed=seed)
    if not data.pe_ok:
        log.error("collected data fail the rank condition; increase T or the excitation")
        return EXIT_DATA
    return EXIT_OK


def _train_one(cfg, data_dir, out_dir, seed, solver_tol):
    """One synthesis run; returns ``(exit_code, outputs, notes)``. Safe to run in a worker."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = _load_data(data_dir)
    plant = build_plant(cfg)
    box = build_box(cfg)
    scfg = synthesis_config(cfg, seed)
    arch = cfg.get("architecture")
    if not arch:
        raise ConfigError("architecture is required")
    demos = generate_expert_demos(plant, box, scfg.expert, scfg.demo_count, seed)
    outputs, notes = [], {"seed": seed}
    code = EXIT_OK
    with solver_tolerance(solver_tol):
        try:
            result = synthesize(data, box, arch, scfg, demos)
        except errors.NotConverged as exc:
            result, code = exc.result, EXIT_NOT_CONVERGED
        except errors.SdpInfeasibleAtIteration as exc:
            result, code = exc.result, EXIT_SDP_INFEASIBLE
            notes["infeasible_at"] = exc.iteration
    result.controller.save(out / "controller.json")
    write_trace(result.trace, out / "trace.csv")
    outputs += [str(out / "controller.json"), str(out / "trace.csv")]
    if isinstance(result.certificate, StabilityCertificate):
        result.certificate.save(out / "certificate.json")
        outputs.append(str(out / "certificate.json"))
    notes.update(converged=result.converged, verified=result.verified,
                 outer_iterations=len(result.trace), prediction_loss=result.prediction_loss)
    if result.verified:
        notes["log_det_Q1"] = result.certificate.log_det_Q1
    return code, outputs, notes


def cmd_train(args, cfg, manifest: RunManifest):
    out = _out_dir(args)
    data_dir = _data_dir(args, cfg)
    manifest.add_input(data_dir)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [_seed(args, cfg)]
    if len(seeds) == 1:
        code, outputs, notes = _train_one(cfg, data_dir, out, seeds[0], args.solver_tol)
        manifest.outputs += outputs
        manifest.notes.update(notes)
        return code
    dirs = [out / f"seed_{s}" for s in seeds]
    jobs = max(1, int(args.jobs))
    if jobs == 1:
        runs = [_train_one(cfg, data_dir, d, s, args.solver_tol) for d, s in zip(dirs, seeds)]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_train_one, cfg, data_dir, d, s, args.solver_tol)
                       for d, s in zip(dirs, seeds)]
            runs = [f.result() for f in futures]
    manifest.notes["runs"] = []
    for code, outputs, notes in runs:
        manifest.outputs += outputs
        manifest.notes["runs"].append({**notes, "exit_code": code})
    return max(code for code, _, _ in runs)


def cmd_verify(args, cfg, manifest: RunManifest):
    out = _out_dir(args)
    data_dir = _data_dir(args, cfg)
    manifest.add_input(data_dir)
    manifest.add_input(args.controller)
    data = _load_data(data_dir)
    nn = _load_controller(args.controller)
    box = build_box(cfg)
    if box.n_x != nn.n_x:
        raise errors.InvalidDimensions("box and controller dimensions differ")
    with solver_tolerance(args.solver_tol):
        cert = verify_fixed_controller(nn, data, box, solver=cfg.get("solver", "CLARABEL"))
    if not cert:
        manifest.notes.update(verified=False, status=cert.status, detail=cert.detail)
        log.error("no certificate found: %s %s", cert.status, cert.detail)
        return EXIT_UNVERIFIED
    cert.save(out / "certificate.json")
    manifest.outputs.append(str(out / "certificate.json"))
    manifest.notes.update(verified=True, log_det_Q1=cert.log_det_Q1, margin=cert.margin)
    return EXIT_OK


def cmd_finetune(args, cfg, manifest: RunManifest):
    out = _out_dir(args)
    data_dir = _data_dir(args, cfg)
    manifest.add_input(data_dir)
    manifest.add_input(args.controller)
    data = _load_data(data_dir)
    nn = _load_controller(args.controller)
    box = build_box(cfg)
    fcfg = finetune_config(cfg)
    code = EXIT_OK
    with solver_tolerance(args.solver_tol):
        try:
            result = finetune(nn, data, box, fcfg)
        except (errors.NotConverged, errors.InnerLoopStalled) as exc:
            result, code = exc.result, EXIT_NOT_CONVERGED
            manifest.notes["failure"] = type(exc).__name__
        except errors.SdpInfeasibleAtIteration as exc:
            result, code = exc.result, EXIT_SDP_INFEASIBLE
            manifest.notes["failure"] = f"SDP infeasible at outer iteration {exc.iteration}"
    result.controller.save(out / "controller.json")
    (out / "finetune.json").write_text(json.dumps(result.to_dict(), indent=2, default=_json_default))
    manifest.outputs += [str(out / "controller.json"), str(out / "finetune.json")]
    if result.certificate is not None:
        result.certificate.save(out / "certificate.json")
        manifest.outputs.append(str(out / "certificate.json"))
    manifest.notes.update(already_stable=result.already_stable, total_delta=result.total_delta,
                          outer_iterations=result.outer_iterations,
                          inner_iterations=result.inner_iterations,
                          wall_time=result.wall_time)
    return code


def _rollout_norms(plant: PlantModel, nn: NnController, x0, steps):
    """``||x(k)||_2`` for k = 0..steps; NaN after the state leaves floating-point range."""
    norms = np.full(steps + 1, np.nan)
    x = np.asarray(x0, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps + 1):
            if not np.all(np.isfinite(x)):
                break
            norms[k] = np.linalg.norm(x)
            x = plant.step(x, nn(x))
    return norms


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_report(args, cfg, manifest: RunManifest):
    if not (args.certificate or args.controller or args.trace):
        raise ConfigError("report needs at least one --certificate, --controller or --trace")
    out = _out_dir(args)
    dims = [d - 1 for d in args.dims]
    if args.certificate and dims[0] == dims[1]:
        raise ConfigError("--dims needs two different state indices")
    for k, path in enumerate(args.certificate or []):
        manifest.add_input(path)
        try:
            cert = StabilityCertificate.load(path)
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read certificate {path}: {exc}") from exc
        if max(dims) >= cert.Q1.shape[0] or min(dims) < 0:
            raise ConfigError(f"dims {args.dims} out of range for a {cert.Q1.shape[0]}-state certificate")
        roa = roa_from_certificate(cert)
        pts = (roa.slice_boundary(*dims, num=args.points) if args.roa == "slice"
               else roa.projection_boundary(*dims, num=args.points))
        target = out / f"roa_{args.roa}_{k}.csv"
        _write_csv(target, [f"x{args.dims[0]}", f"x{args.dims[1]}"], pts.tolist())
        manifest.outputs.append(str(target))

    if args.controller:
        plant = build_plant(cfg)
        box = build_box(cfg)
        if args.x0 is not None:
            x0 = np.asarray(args.x0, dtype=float)
        else:
            x0 = box.sample(np.random.default_rng(_seed(args, cfg)), 1)[0]
        if x0.size != plant.n_x:
            raise ConfigError(f"x0 has {x0.size} entries, plant has {plant.n_x} states")
        series = []
        for path in args.controller:
            manifest.add_input(path)
            nn = _load_controller(path)
            if nn.n_x != plant.n_x or nn.n_pi != plant.n_u:
                raise errors.InvalidDimensions(f"controller {path} does not match the plant")
            series.append(_rollout_norms(plant, nn, x0, args.steps))
        times = plant.dt * np.arange(args.steps + 1)
        target = out / "state_norms.csv"
        _write_csv(target, ["time"] + [f"norm_{k}" for k in range(len(series))],
                   np.column_stack([times] + series).tolist())
        manifest.outputs.append(str(target))
        manifest.notes["x0"] = x0.tolist()

    if args.trace:
        rows = []
        for k, path in enumerate(args.trace):
            manifest.add_input(path)
            try:
                with open(path) as fh:
                    for rec in csv.DictReader(fh):
                        rows.append([k, rec["iteration"], rec["prediction_loss"],
                                     rec["residual_sq"], rec["log_det_Q1"]])
            except (OSError, KeyError) as exc:
                raise ConfigError(f"cannot read trace {path}: {exc}") from exc
        target = out / "loss_curves.csv"
        _write_csv(target, ["trace", "iteration", "prediction_loss", "residual_sq", "log_det_Q1"], rows)
        manifest.outputs.append(str(target))
    return EXIT_OK


COMMANDS = {"collect": cmd_collect, "train": cmd_train, "verify": cmd_verify,
            "finetune": cmd_finetune, "report": cmd_report}


# ----------------------------------------------------------------- entry point

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None,
                        help="preset name (%s) or YAML file" % ", ".join(PRESETS))
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out-dir", default="out", help="directory for outputs and manifest.json")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for seed sweeps")
    common.add_argument("--solver-tol", type=float, default=None, help="conic solver tolerance")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ddnfl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("collect", parents=[common], help="run an excited experiment and save the data")

    p = sub.add_parser("train", parents=[common], help="synthesise a certified controller")
    p.add_argument("--data", help="directory holding u.csv, x0.csv, x1.csv")
    p.add_argument("--seeds", help="comma-separated seed sweep (one subdirectory per seed)")

    p = sub.add_parser("verify", parents=[common], help="search for a stability certificate")
    p.add_argument("--controller", required=True)
    p.add_argument("--data")

    p = sub.add_parser("finetune", parents=[common], help="minimally adjust a controller until certified")
    p.add_argument("--controller", required=True)
    p.add_argument("--data")

    p = sub.add_parser("report", parents=[common], help="write plot-ready CSVs")
    p.add_argument("--certificate", action="append", help="certificate JSON (repeatable)")
    p.add_argument("--controller", action="append", help="controller JSON to simulate (repeatable)")
    p.add_argument("--trace", action="append", help="training trace CSV (repeatable)")
    p.add_argument("--dims", type=int, nargs=2, default=[1, 3], help="1-based state indices of the ROA plane")
    p.add_argument("--roa", choices=["slice", "projection"], default="slice")
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--x0", type=float, nargs="+", help="initial state (default: random in the box)")

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out-dir", default=None, help="write elsewhere instead of the recorded directory")
    return parser


def _run(command, args, cfg):
    manifest = RunManifest(command, copy.deepcopy(cfg),
                           {k: v for k, v in vars(args).items() if k not in ("command", "verbose")})
    if args.config and Path(str(args.config)).is_file():
        manifest.add_input(args.config)
    t0 = time.perf_counter()
    try:
        code = COMMANDS[command](args, cfg, manifest)
    finally:
        manifest.timings["wall_s"] = time.perf_counter() - t0
    manifest.exit_code = code
    manifest.write(_out_dir(args))
    return code


def _replay(args):
    try:
        rec = json.loads(Path(args.manifest).read_text())
        command, cfg, recorded = rec["command"], rec["config"], rec["arguments"]
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {args.manifest}: {exc}") from exc
    if command not in COMMANDS:
        raise ConfigError(f"manifest records unknown command {command!r}")
    ns = argparse.Namespace(**recorded)
    if args.out_dir is not None:
        ns.out_dir = args.out_dir
    ns.verbose = args.verbose if hasattr(args, "verbose") else False
    return command, ns, cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "replay":
            command, args, cfg = _replay(args)
        else:
            command = args.command
            cfg = load_config(args.config) if args.config else {}
        return _run(command, args, cfg)
    except (ConfigError, errors.InvalidDimensions, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (errors.DataTooShort, errors.NotPersistentlyExciting) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except errors.DdnflError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line pipeline: ``phantom -> simulate -> reconstruct -> report``.

All commands work on a run directory.  Fields are stored as raw dumps with
JSON sidecars (see :mod:`mrept.grid`) and every command records its
arguments, seeds and library versions in ``manifest.json``.

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 I/O error.
The environment variable ``MREPT_THREADS`` caps the BLAS/OpenMP thread count.
"""

from __future__ import annotations

import os

if os.environ.get("MREPT_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["MREPT_THREADS"])

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .constants import OMEGA_3T
from .forward import make_profile, synthesize_data
from .grid import Grid3D, load_field, save_field
from .linsolve import NonConvergenceError
from .metrics_report import anomaly_accuracy, convergence_log, export_slice, l2_error
from .phantom import (
    Admittivity,
    Material,
    PhantomError,
    anomaly_mask,
    default_config,
    grid_from_hints,
    load_phantom,
    phantom_from_dict,
    phantom_to_dict,
    sample,
)
from .recon_direct import direct_reconstruct
from .recon_init import DegenerateDataError, InitConfig, initial_guess
from .recon_newton import NewtonConfig, StationaryPointError, run_newton

log = logging.getLogger("mrept")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4
STOCK = ("model1", "model2")
METHODS = ("direct", "init", "newton")


class ConfigError(ValueError):
    pass


class MissingArtifacts(OSError):
    pass


# ---------------------------------------------------------------------------
# run-directory helpers


def _field_path(run: Path, name: str) -> Path:
    return run / f"{name}.bin"


def _save(run: Path, name: str, values, grid: Grid3D, **meta) -> Path:
    return save_field(_field_path(run, name), values, grid, name=name, **meta)


def _load(run: Path, name: str):
    path = _field_path(run, name)
    if not path.exists():
        raise MissingArtifacts(f"missing {path}")
    return load_field(path)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _update_manifest(run: Path, step: str, args: dict) -> None:
    path = run / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest["versions"] = {
        "mrept": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }
    manifest.setdefault("steps", {})[step] = args
    files = {}
    for f in sorted(run.iterdir()):
        if f.is_file() and f.name != "manifest.json":
            files[f.name] = _sha256(f)
    manifest["files"] = files
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _read_config(source: str) -> dict:
    """Resolved phantom document from a JSON path or a stock name."""
    path = Path(source)
    if path.exists():
        phantom = load_phantom(path)
        doc = json.loads(path.read_text())
    elif source in STOCK:
        doc = default_config(source)
        phantom = phantom_from_dict(doc)
    else:
        raise MissingArtifacts(f"config {source!r} not found (stock configs: {', '.join(STOCK)})")
    out = phantom_to_dict(phantom)
    out["grid"] = dict(doc.get("grid", {}))
    return out


def _run_phantom(run: Path):
    path = run / "phantom.json"
    if not path.exists():
        return None, None
    doc = json.loads(path.read_text())
    return phantom_from_dict(doc), grid_from_hints(doc)


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(args) -> int:
    doc = _read_config(args.config)
    if args.n is not None:
        doc["grid"]["n"] = args.n
    if args.length is not None:
        doc["grid"]["length"] = args.length
    phantom = phantom_from_dict(doc)  # validate everything before touching the disk
    grid = grid_from_hints(doc)
    adm = sample(phantom, grid)
    S = anomaly_mask(phantom, grid)

    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    (run / "phantom.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _save(run, "sigma_true", adm.sigma, grid, units="S/m")
    _save(run, "eps_true", adm.eps, grid, units="F/m")
    _save(run, "gamma_true", adm.gamma, grid, units="S/m", omega=phantom.omega)
    _save(run, "anomaly_mask", S.astype(float), grid)
    _update_manifest(run, "phantom", {"config": args.config, "n": args.n, "length": args.length})
    print(f"phantom {phantom.name or 'custom'}: {len(phantom.shapes)} shapes on {grid.shape} -> {run}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    run = Path(args.run)
    phantom, grid = _run_phantom(run)
    if phantom is None:
        raise MissingArtifacts(f"{run}/phantom.json missing; run `mrept phantom` first")
    if args.refine < 1:
        raise ConfigError("--refine must be >= 1")
    if args.noise < 0:
        raise ConfigError("--noise must be >= 0")
    profile_name = args.profile or phantom.excitation
    profile = make_profile(profile_name, phantom.gamma0, phantom.omega)
    h = synthesize_data(phantom, grid, profile, refine=args.refine, noise=args.noise, seed=args.seed, tol=args.tol)
    meta = {"refine": args.refine, "noise": args.noise, "seed": args.seed, "profile": profile_name,
            "omega": phantom.omega}
    _save(run, "hplus", h, grid, **meta)
    _update_manifest(run, "simulate", {**meta, "tol": args.tol})
    print(f"simulated H+ on {grid.shape} (refine={args.refine}, noise={args.noise}) -> {run}")
    return EXIT_OK


def _store_result(run: Path, name: str, adm: Admittivity, grid: Grid3D, **meta) -> None:
    _save(run, f"gamma_{name}", adm.gamma, grid, omega=adm.omega, **meta)
    _save(run, f"sigma_{name}", adm.sigma, grid, units="S/m")
    _save(run, f"eps_{name}", adm.eps, grid, units="F/m")


def _truth(run: Path):
    if not _field_path(run, "gamma_true").exists():
        return None, None
    truth, _, _ = _load(run, "gamma_true")
    mask, _, _ = _load(run, "anomaly_mask")
    return truth, mask > 0.5


def cmd_reconstruct(args) -> int:
    run = Path(args.run)
    h, grid, hmeta = _load(run, "hplus")
    phantom, _ = _run_phantom(run)
    omega = float(hmeta.get("omega", phantom.omega if phantom else OMEGA_3T))
    if phantom is not None:
        gamma_bg, collar = phantom.gamma0, phantom.collar_d
    elif args.background is not None:
        gamma_bg = Material(*args.background).gamma(omega)
        collar = 2.0 * max(grid.spacing)
    else:
        raise ConfigError("no phantom.json in the run directory; pass --background SIGMA EPS_REL")
    if args.collar_d is not None:
        collar = args.collar_d
    truth, S = _truth(run)
    methods = ["init", "newton"] if args.method == "full" else [args.method]
    summary = {}

    for method in methods:
        stage = f"reconstruct:{method}"
        try:
            if method == "direct":
                adm, mask = direct_reconstruct(h, grid, omega, args.guard, args.smooth_window)
                _store_result(run, "direct", adm, grid, guard=args.guard)
                _save(run, "direct_mask", mask.astype(float), grid)
                params = {"guard": args.guard, "smooth_window": args.smooth_window}
            elif method == "init":
                cfg = InitConfig(rho_fraction=args.rho, tau_D=args.tau_d, k_max=args.k_max, k_pick=args.k_pick,
                                 eps1=args.eps1, boundary_gamma=gamma_bg, collar_d=collar,
                                 full_history=args.full_history, tol=args.tol, omega=omega)
                adm, hist = initial_guess(h, grid, cfg, truth=truth)
                _store_result(run, "init", adm, grid, k_pick=cfg.k_pick)
                _save(run, "degenerate_mask", hist.degenerate.astype(float), grid)
                convergence_log(hist, run / "init_log.csv")
                if args.snapshots:
                    for k, gk in enumerate(hist.iterates, 1):
                        _save(run, f"init_iter{k:02d}", gk, grid, omega=omega)
                params = {k: getattr(cfg, k) for k in ("rho_fraction", "tau_D", "k_max", "k_pick", "eps1",
                                                         "collar_d", "full_history", "tol")}
            else:
                seed = _newton_seed(run, args.init)
                cfg = NewtonConfig(n_max=args.n_max, eps2=args.eps2, tol=args.tol, collar_d=collar,
                                   damping=args.damping, keep_iterates=args.snapshots, omega=omega)
                res = run_newton(seed, h, grid, cfg, truth=truth, anomaly_mask=S)
                _store_result(run, "newton", res.admittivity, grid, stop_reason=res.stop_reason)
                convergence_log(res, run / "newton_log.csv")
                for n, gn in enumerate(res.iterates):
                    _save(run, f"newton_iter{n:02d}", gn, grid, omega=omega)
                adm = res.admittivity
                params = {"init": args.init, "n_max": cfg.n_max, "eps2": cfg.eps2, "damping": cfg.damping,
                          "collar_d": cfg.collar_d, "tol": cfg.tol, "stop_reason": res.stop_reason}
        except (NonConvergenceError, StationaryPointError, DegenerateDataError) as exc:
            raise StageError(stage, exc) from exc
        _update_manifest(run, stage, params)
        if truth is not None and S.any():
            summary[method] = anomaly_accuracy(np.nan_to_num(adm.gamma), truth, S)
    for m, v in summary.items():
        print(f"{m}: anomaly metric {v:.4f}")
    print(f"reconstruction ({args.method}) -> {run}")
    return EXIT_OK


def _newton_seed(run: Path, init: str | None):
    if init in (None, "auto"):
        path = _field_path(run, "gamma_init")
        if not path.exists():
            raise ConfigError(
                f"no initial guess in {run}; run `mrept reconstruct {run} --method init` first or pass --init FIELD"
            )
    else:
        path = Path(init)
    values, _, _ = load_field(path)
    if not np.iscomplexobj(values):
        raise ConfigError(f"{path} is not a complex admittivity dump")
    return values


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage


REPORT_REQUIRED = ("phantom.json", "gamma_true.bin", "anomaly_mask.bin", "hplus.bin",
                   "gamma_direct.bin", "gamma_init.bin", "gamma_newton.bin")


def cmd_report(args) -> int:
    run = Path(args.run)
    missing = [f for f in REPORT_REQUIRED if not (run / f).exists()]
    if missing:
        raise MissingArtifacts(f"{run}: missing artifacts: {', '.join(missing)}")
    out = Path(args.out) if args.out else run / "report"
    truth, grid, _ = _load(run, "gamma_true")
    S = _load(run, "anomaly_mask")[0] > 0.5
    h = _load(run, "hplus")[0]
    phantom, _ = _run_phantom(run)
    omega = phantom.omega
    z = grid.nz // 2 if args.z_index is None else args.z_index
    out.mkdir(parents=True, exist_ok=True)

    fields = {"true": truth}
    for m in METHODS:
        fields[m] = _load(run, f"gamma_{m}")[0]
    eps0 = phantom.background.eps / phantom.background.eps_rel
    sig_win = (float(truth.real.min()), float(truth.real.max()))
    eps_win = (float(truth.imag.min() / (omega * eps0)), float(truth.imag.max() / (omega * eps0)))
    written = []
    for name, gm in fields.items():
        gm = np.nan_to_num(gm)
        written.append(export_slice(gm.real, z, out / f"sigma_{name}.pgm", window=sig_win, quantity="sigma"))
        written.append(export_slice(gm.real, z, out / f"sigma_{name}.csv", quantity="sigma"))
        er = gm.imag / (omega * eps0)
        written.append(export_slice(er, z, out / f"eps_rel_{name}.pgm", window=eps_win, quantity="eps_rel"))
        written.append(export_slice(er, z, out / f"eps_rel_{name}.csv", quantity="eps_rel"))
    errs = {m: np.abs(np.nan_to_num(fields[m]) / truth - 1.0) for m in METHODS}
    err_max = max(float(e[:, :, z].max()) for e in errs.values())
    for m, e in errs.items():
        written.append(export_slice(e, z, out / f"error_{m}.pgm", window=(0.0, err_max), quantity="relative error"))
    written.append(export_slice(h.real, z, out / "hplus_real.pgm", quantity="Re H+"))
    written.append(export_slice(h.imag, z, out / "hplus_imag.pgm", quantity="Im H+"))
    degenerate = run / "degenerate_mask.bin"
    D = np.zeros(grid.shape, dtype=bool)
    if degenerate.exists():
        D = load_field(degenerate)[0] > 0.5
        written.append(export_slice(D.astype(float), z, out / "degenerate.pgm", window=(0.0, 1.0)))
    # comparison panels: truth, init (outside D), newton and the two error maps
    init_sigma = np.where(D, np.nan, np.nan_to_num(fields["init"]).real)
    panels = {
        "compare_a_true": (truth.real, sig_win),
        "compare_b_init": (init_sigma, sig_win),
        "compare_c_newton": (np.nan_to_num(fields["newton"]).real, sig_win),
        "compare_d_error_init": (np.where(D, np.nan, errs["init"]), (0.0, err_max)),
        "compare_e_error_newton": (errs["newton"], (0.0, err_max)),
    }
    for name, (f, win) in panels.items():
        written.append(export_slice(f, z, out / f"{name}.pgm", window=win, quantity=name.split("_", 2)[-1]))

    rows = ["method,l2_error,anomaly_accuracy"]
    for m in METHODS:
        gm = np.nan_to_num(fields[m])
        acc = anomaly_accuracy(gm, truth, S) if S.any() else float("nan")
        rows.append(f"{m},{l2_error(gm, truth, grid)!r},{acc!r}")
    (out / "summary.csv").write_text("\n".join(rows) + "\n")
    written.append(out / "summary.csv")
    for log_name in ("init_log.csv", "newton_log.csv"):
        src = run / log_name
        if src.exists():
            (out / log_name).write_bytes(src.read_bytes())
            written.append(out / log_name)
    index = {"z_index": z, "files": sorted(p.name for p in written)}
    (out / "report.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    print("\n".join(rows))
    print(f"report -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrept", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="sample a phantom config into a run directory")
    ph.add_argument("config", help="phantom JSON file or stock name (model1, model2)")
    ph.add_argument("--out", required=True, help="run directory")
    ph.add_argument("--n", type=int, help="nodes per axis (overrides the config grid hint)")
    ph.add_argument("--length", type=float, help="cube side in metres (overrides the config grid hint)")
    ph.set_defaults(func=cmd_phantom)

    si = sub.add_parser("simulate", help="synthesize H+ data for the run's phantom")
    si.add_argument("run", help="run directory")
    si.add_argument("--refine", type=int, default=2, help="data grid refinement factor (default 2)")
    si.add_argument("--noise", type=float, default=0.0, help="relative complex Gaussian noise level")
    si.add_argument("--seed", type=int, default=0, help="noise seed")
    si.add_argument("--profile", choices=("constant", "long_body"), help="boundary profile (default: phantom's)")
    si.add_argument("--tol", type=float, default=1e-10, help="linear solver tolerance")
    si.set_defaults(func=cmd_simulate)

    rc = sub.add_parser("reconstruct", help="reconstruct the admittivity from the run's H+ data")
    rc.add_argument("run", help="run directory")
    rc.add_argument("--method", choices=("direct", "init", "newton", "full"), default="full")
    rc.add_argument("--init", help="Newton seed: 'auto' (the run's init result) or a complex gamma dump")
    rc.add_argument("--background", type=float, nargs=2, metavar=("SIGMA", "EPS_REL"),
                    help="boundary/collar material when the run has no phantom.json")
    rc.add_argument("--collar-d", type=float, help="collar width in metres")
    rc.add_argument("--guard", type=float, default=1e-3, help="direct formula |H+| guard (relative)")
    rc.add_argument("--smooth-window", type=int, help="local polynomial fit window for the direct formula")
    rc.add_argument("--rho", type=float, default=0.05, help="regularization fraction of max A33")
    rc.add_argument("--tau-d", type=float, default=0.05, help="degenerate-region threshold")
    rc.add_argument("--k-max", type=int, default=10)
    rc.add_argument("--k-pick", type=int, default=3)
    rc.add_argument("--eps1", type=float, default=0.0, help="init stop on ||gamma_k - gamma_k-1||")
    rc.add_argument("--full-history", action="store_true", help="run all k_max init steps")
    rc.add_argument("--n-max", type=int, default=10)
    rc.add_argument("--eps2", type=float, default=0.0, help="Newton stop on ||gamma_n - gamma_n-1||")
    rc.add_argument("--damping", type=float, default=1.0)
    rc.add_argument("--tol", type=float, default=1e-10, help="linear solver tolerance")
    rc.add_argument("--snapshots", action="store_true", help="dump every iterate")
    rc.set_defaults(func=cmd_reconstruct)

    rp = sub.add_parser("report", help="write metrics, slice images and error maps")
    rp.add_argument("run", help="run directory")
    rp.add_argument("--out", help="report directory (default RUN/report)")
    rp.add_argument("--z-index", type=int, help="slice index (default: middle)")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"mrept: solver failure in {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (NonConvergenceError, StationaryPointError, DegenerateDataError) as exc:
        print(f"mrept: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"mrept: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (PhantomError, ConfigError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"mrept: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

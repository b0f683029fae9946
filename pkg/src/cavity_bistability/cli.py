"""Command-line front end.

    cavity-bistability <experiment> --config run.yaml [--out DIR] [--jobs N]
    cavity-bistability <experiment> --seed-from-manifest DIR/stem_manifest.json

Every run writes its data files plus ``<stem>_manifest.json`` holding the
fully resolved config; re-running from that manifest reproduces the CSV
files bit for bit.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 partial failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import EXPERIMENTS, ConfigError, ExperimentConfig, load_config, parse_config
from .detect import PreparationError, prepare_on_branch, speed_limit_scan
from .integrate import ATOL, H_MAX, RTOL, IntegrationError, evolve
from .io import write_csv, write_json
from .model import cooperativity, empty_cavity_alpha, ground_state
from .steady import NEWTON_TOL, STABILITY_MARGIN, SteadyStateError, find_all_branches, solve_steady
from .sweep import GridScanError, SweepError, grid_scan, run_sweep, threshold_scan

log = logging.getLogger("cavity_bistability")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_PARTIAL = 0, 2, 3, 4


@dataclass
class RunResult:
    exit_code: int
    outputs: list[Path] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    error: str | None = None


class _Writer:
    """Single point through which every output file of a run is written."""

    def __init__(self, out_dir: Path, stem: str):
        self.out_dir = out_dir
        self.stem = stem
        self.written: list[Path] = []

    def path(self, suffix: str) -> Path:
        return self.out_dir / f"{self.stem}_{suffix}"

    def csv(self, suffix: str, header, rows) -> Path:
        p = write_csv(self.path(suffix), header, rows)
        self.written.append(p)
        return p

    def json(self, suffix: str, obj) -> Path:
        p = write_json(self.path(suffix), obj)
        self.written.append(p)
        return p


def _state_row(st):
    return [st.alpha.real, st.alpha.imag, st.s11, st.s22, st.s33, abs(st.s13), abs(st.s12), abs(st.s23)]


_STATE_COLS = ["re_alpha", "im_alpha", "s11", "s22", "s33", "abs_s13", "abs_s12", "abs_s23"]


def _run_steady(cfg: ExperimentConfig, w: _Writer, jobs: int) -> RunResult:
    p = cfg.params
    points = find_all_branches(p) if cfg.experiment.all_branches else [solve_steady(p)]
    if not points:
        raise SteadyStateError("no steady state found from any seed", ground_state(), math.inf)
    rows = []
    for i, pt in enumerate(points):
        t = pt.n_photons / p.epsilon ** 2 if p.epsilon > 0 else math.nan
        rows.append([i, pt.n_photons, t, *_state_row(pt.state), pt.residual, pt.leading_rate, pt.stability])
    w.csv("steady.csv", ["branch", "n", "transmission_norm", *_STATE_COLS, "residual", "leading_rate",
                         "stability"], rows)
    return RunResult(EXIT_OK, summary={
        "roots": len(points),
        "stable": sum(pt.stability == "stable" for pt in points),
        "n_photons": [pt.n_photons for pt in points],
    })


def _run_evolve(cfg: ExperimentConfig, w: _Writer, jobs: int) -> RunResult:
    e, p = cfg.experiment, cfg.params
    init = ground_state() if e.initial == "ground" else ground_state(empty_cavity_alpha(p))
    traj = evolve(init, p, [s.schedule(p) for s in e.schedules], t_end=e.t_end, dt=e.dt)
    cols = traj.columns()
    w.csv("trajectory.csv", list(cols), zip(*cols.values()))
    return RunResult(EXIT_OK, summary={
        "samples": len(traj), "n_final": float(traj.n_photons[-1]),
        "population_drift": traj.population_drift(),
    })


def _curve_files(w: _Writer, curve, prefix: str = ""):
    w.csv(f"{prefix}curve.csv", [curve.parameter, "n_up", "n_down", "relative_gap"],
          zip(curve.axis, curve.n_up, curve.n_down, curve.relative_gap()))
    w.csv(f"{prefix}regions.csv", ["lo", "hi", "width"], curve.regions)


def _run_sweep(cfg: ExperimentConfig, w: _Writer, jobs: int) -> RunResult:
    curve = run_sweep(cfg.params, cfg.experiment.sweep.spec(), cfg.numerics.sweep_numerics())
    _curve_files(w, curve)
    return RunResult(EXIT_OK, summary={
        "width": curve.width, "regions": curve.regions, "jumps_up": curve.jumps_up,
        "jumps_down": curve.jumps_down, "failed_points": curve.failures,
    })


def _run_grid(cfg: ExperimentConfig, w: _Writer, jobs: int) -> RunResult:
    e = cfg.experiment
    code = EXIT_OK
    try:
        scan = grid_scan(cfg.params, e.sweep.spec(), e.rows.parameter, e.rows.values(), e.cols.parameter,
                         e.cols.values(), cfg.numerics.sweep_numerics(), jobs, e.max_missing_fraction)
    except GridScanError as exc:
        log.error("%s", exc)
        scan, code = exc.partial, EXIT_PARTIAL
    w.csv("grid.csv", [scan.row_param, scan.col_param, "width"], scan.long_rows())
    return RunResult(code, summary={"cells": int(scan.width.size), "missing": scan.missing,
                                    "max_width": float(np.nanmax(scan.width)) if scan.missing < scan.width.size
                                    else None})


def _run_threshold(cfg: ExperimentConfig, w: _Writer, jobs: int) -> RunResult:
    e = cfg.experiment
    scan = threshold_scan(cfg.params, e.sweep.spec(), e.cooperativities, cfg.numerics.sweep_numerics(),
                          e.width_floor, jobs)
    w.csv("threshold.csv", ["cooperativity", "width"], scan.rows())
    code = EXIT_PARTIAL if scan.missing else EXIT_OK
    return RunResult(code, summary={"threshold": scan.threshold, "width_floor": scan.width_floor,
                                    "missing": scan.missing})


def _run_detect(cfg: ExperimentConfig, w: _Writer, jobs: int) -> RunResult:
    e = cfg.experiment
    spec = cfg.detector_spec(e.fwhm[0])
    prep = prepare_on_branch(spec.params, spec.sweep, spec.target, spec.branch, spec.numerics)
    scan = speed_limit_scan(spec, e.fwhm, jobs=jobs, prepared=prep)
    for run in scan.runs:
        tag = f"fwhm{run.schedule.fwhm:.6g}"
        cols = run.trajectory.columns()
        cols["pulsed_value"] = run.schedule.value(run.trajectory.times)
        w.csv(f"{tag}_trajectory.csv", list(cols), zip(*cols.values()))
        w.json(f"{tag}_verdict.json", run.verdict())
    w.csv("speed_limit.csv", ["fwhm", "latched", "n_before", "n_after", "relative_change"],
          ([r.schedule.fwhm, int(r.latched), r.n_before, r.n_after, r.relative_change] for r in scan.runs))
    for f in scan.findings:
        log.warning("non-monotone width response: %s", f)
    return RunResult(EXIT_OK, summary={
        "latched": {f"{r.schedule.fwhm:.6g}": r.latched for r in scan.runs},
        "smallest_latching_fwhm": scan.smallest_latching,
        "findings": scan.findings,
        "n_prepared": prep.n_prepared, "n_other_branch": prep.n_other,
        "bistable_region": list(prep.region),
    })


_RUNNERS = {
    "steady": _run_steady, "evolve": _run_evolve, "sweep": _run_sweep, "grid": _run_grid,
    "threshold": _run_threshold, "detect": _run_detect,
}


def _numerics_record(cfg: ExperimentConfig) -> dict:
    rec = cfg.numerics.model_dump(mode="json")
    rec.update(integrator_rtol=RTOL, integrator_atol=ATOL, integrator_h_max=H_MAX, newton_tol_steady=NEWTON_TOL,
               stability_margin=STABILITY_MARGIN)
    return rec


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, jobs: int = 1) -> RunResult:
    """Run ``cfg``, write its files and manifest into ``out_dir`` (default: the config's)."""
    out = Path(out_dir if out_dir is not None else cfg.output.dir)
    w = _Writer(out, cfg.output.stem)
    t0 = time.perf_counter()
    try:
        result = _RUNNERS[cfg.kind](cfg, w, jobs)
    except (SteadyStateError, SweepError, IntegrationError, PreparationError) as exc:
        result = RunResult(EXIT_NUMERICAL, error=f"{type(exc).__name__}: {exc}")
    except ValueError as exc:
        result = RunResult(EXIT_CONFIG, error=f"{type(exc).__name__}: {exc}")
    wall = time.perf_counter() - t0
    p = cfg.params
    manifest = {
        "version": __version__,
        "experiment": cfg.kind,
        "config": cfg.resolved(),
        "derived": {"cooperativity": cooperativity(p) if p.gamma3_total > 0 else 0.0},
        "numerics": _numerics_record(cfg),
        "wall_time_s": wall,
        "exit_code": result.exit_code,
        "error": result.error,
        "outputs": [q.name for q in w.written],
        "summary": result.summary,
    }
    w.json("manifest.json", manifest)
    result.outputs = list(w.written)
    return result


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cavity-bistability", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        sp = sub.add_parser(name, help=f"run a {name} experiment")
        src = sp.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", type=Path, help="YAML experiment config")
        src.add_argument("--seed-from-manifest", type=Path, metavar="PATH",
                         help="re-run the resolved config stored in a manifest")
        sp.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for grid/threshold/detect")
        mode = sp.add_mutually_exclusive_group()
        mode.add_argument("--strict", dest="strict", action="store_true", default=True,
                          help="reject unknown config keys (default)")
        mode.add_argument("--lenient", dest="strict", action="store_false", help="warn on unknown keys")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def _load(args) -> ExperimentConfig:
    if args.config is not None:
        return load_config(args.config, strict=args.strict, experiment=args.command)
    try:
        manifest = json.loads(args.seed_from_manifest.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"<manifest>: cannot read {args.seed_from_manifest}: {exc}") from None
    if not isinstance(manifest, dict) or "config" not in manifest:
        raise ConfigError("<manifest>: no 'config' section")
    return parse_config(manifest["config"], strict=True, experiment=args.command)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    result = run_experiment(cfg, args.out, args.jobs)
    if result.error:
        print(f"error: {result.error}", file=sys.stderr)
    for p in result.outputs:
        print(p)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())

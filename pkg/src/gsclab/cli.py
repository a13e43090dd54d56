"""Command-line front end: ``gsclab run | gradcheck | audit-labels | plot | sweep``.

Exit codes: 0 success, 1 verification failure, 2 invalid input or
configuration, 3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import ContractViolation
from .gradcheck import COMPONENTS, inject_fault, run_suite
from .relabel import IGNORED, write_audit_csv, write_pgm
from .scenario import CLASS_ORDERS, PRESET_GROUPS, ScenarioSpec, build_step_dataset, dump_scenario, \
    permute_classes, preset_scenario
from .segnet import load_checkpoint
from .trainer import ALL_METHODS, TrainConfig, TrainingDiverged, audit_pseudo_labels, run_scenario, train_step0

log = logging.getLogger("gsclab")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    """Bad flags or configuration; reported with exit code 2."""


# ---------------------------------------------------------------- config


def _read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot parse {p}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{p}: top level must be an object")
    return data.get("config", data)  # a run manifest is accepted as a config


def _parse_order(text: str) -> list[int]:
    if text.upper() in CLASS_ORDERS:
        return list(CLASS_ORDERS[text.upper()])
    try:
        return [int(t) for t in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"--class_order must be A-E or a comma list of ids, got {text!r}") from exc


def resolve(args) -> tuple[ScenarioSpec, TrainConfig, list[str], dict]:
    """Merge defaults < config file < flags into validated objects."""
    cfg = _read_config(getattr(args, "config", None))
    unknown = set(cfg) - {"scenario", "train", "method", "class_order"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    scen = dict(cfg.get("scenario", {}))
    train = dict(cfg.get("train", {}))
    name = args.scenario or scen.pop("preset", None) or ("custom" if "groups" in scen else "4-1")
    scen.pop("preset", None)
    if args.setting:
        scen["setting"] = args.setting
    if args.seed is not None:
        scen["seed"] = args.seed
        train["seed"] = args.seed
    try:
        if name == "custom":
            if "groups" not in scen:
                raise UsageError("--scenario=custom needs scenario.groups in the config file")
            spec = ScenarioSpec.from_dict(scen)
        else:
            scen.pop("groups", None)
            spec = preset_scenario(name, **scen)
        order = args.class_order or cfg.get("class_order")
        if order:
            spec = permute_classes(spec, _parse_order(order) if isinstance(order, str) else order)
        train.setdefault("seed", spec.seed)
        config = TrainConfig.from_dict(train)
    except UsageError:
        raise
    except (ContractViolation, TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    methods = (getattr(args, "method", None) or cfg.get("method") or "gsc")
    methods = methods.split(",") if isinstance(methods, str) else list(methods)
    bad = [m for m in methods if m not in ALL_METHODS]
    if bad:
        raise UsageError(f"unknown method(s) {bad}; choose from {list(ALL_METHODS)}")
    resolved = {"scenario": spec.to_dict(), "train": config.to_dict(), "method": methods}
    return spec, config, methods, resolved


def _write_atomic(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _out_dir(args) -> Path:
    if not args.out_dir:
        raise UsageError("--out_dir is required")
    out = Path(args.out_dir)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    return out


# -------------------------------------------------------------- commands


def cmd_run(args) -> int:
    spec, config, methods, resolved = resolve(args)
    out = _out_dir(args)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    out.mkdir(parents=True, exist_ok=True)
    if args.dump_dataset:
        dump_scenario(spec, out / "dataset")
    report = run_scenario(spec, config, methods, out_dir=out)
    for r in report.results:
        if r.step == spec.n_steps - 1:
            g = r.grouped
            print(f"{r.method:12s} step {r.step}: " + "  ".join(
                f"{k}={'nan' if g[k] is None else f'{g[k]:.4f}'}" for k in ("initial", "incremental", "all")))
    outputs = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file())
    manifest = {
        "tool": "gsclab", "version": __version__, "command": "run",
        "config": resolved, "seed": config.seed,
        "started": started, "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": outputs + ["manifest.json"],
    }
    _write_atomic(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    if not args.tolerance > 0:
        raise UsageError("--tolerance must be positive")
    names = args.components.split(",") if args.components else None
    if names and set(names) - set(COMPONENTS):
        raise UsageError(f"unknown components {sorted(set(names) - set(COMPONENTS))}")
    started = time.perf_counter()
    if args.inject_fault:
        with inject_fault(args.inject_fault):
            worst = run_suite(args.trials, args.seed, names)
    else:
        worst = run_suite(args.trials, args.seed, names)
    failed = 0
    for name, err in worst.items():
        ok = err < args.tolerance
        failed += not ok
        print(f"{name:16s} worst_rel_err={err:.3e}  {'ok' if ok else 'FAIL'}")
    print(f"{len(worst) - failed}/{len(worst)} components within {args.tolerance:g} "
          f"({args.trials} trials each, {time.perf_counter() - started:.1f}s)")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def cmd_audit_labels(args) -> int:
    spec, config, _, _ = resolve(args)
    if not 1 <= args.step < spec.n_steps:
        raise UsageError(f"--step must lie in 1..{spec.n_steps - 1}")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    try:
        snap = load_checkpoint(ckpt)
    except (ContractViolation, OSError) as exc:
        raise UsageError(str(exc)) from exc
    if list(snap.step_boundaries) != spec.step_boundaries[:args.step]:
        raise UsageError(f"checkpoint heads {list(snap.step_boundaries)} do not fit step {args.step} "
                         f"of a scenario with boundaries {spec.step_boundaries}")
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    ds, maps, rows = audit_pseudo_labels(spec, snap, args.step, config.temperature)
    write_audit_csv(rows, out / f"audit_step{args.step}.csv")
    ids = np.array([0] + list(spec.foreground_ids) + [0] * (IGNORED - len(spec.foreground_ids)))
    ids[IGNORED] = IGNORED
    for i in range(min(args.max_images, len(ds))):
        for m, p in maps.items():
            write_pgm(ids[p[i]], out / f"pseudo_{m}_step{args.step}_{i:04d}.pgm")
        write_pgm(ds.gt_full[i], out / f"oracle_step{args.step}_{i:04d}.pgm")
    for r in rows:
        print(f"{r['method']:8s} labelled_old={r['case2']:7d} ignored={r['ignored']:7d} "
              f"precision={r['precision_vs_oracle']:.4f} recall={r['recall_vs_oracle']:.4f}")
    return EXIT_OK


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def read_summary(path) -> dict[str, list[tuple[int, float]]]:
    series: dict[str, list[tuple[int, float]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            v = row["miou_all"]
            if v != "nan":
                series.setdefault(row["method"], []).append((int(row["step"]), float(v)))
    return series


def render_svg(series: dict[str, list[tuple[int, float]]], width: int = 480, height: int = 320) -> str:
    """Line chart of mIoU (all classes, %) against step; one polyline per method."""
    left, right, top, bottom = 56, 120, 20, 44
    steps = [s for pts in series.values() for s, _ in pts] or [0]
    x_lo, x_hi = min(steps), max(max(steps), min(steps) + 1)
    pw, ph = width - left - right, height - top - bottom

    def px(s):
        return left + pw * (s - x_lo) / (x_hi - x_lo)

    def py(v):
        return top + ph * (1 - v)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>']
    for tick in range(0, 101, 20):
        y = py(tick / 100)
        out.append(f'<line x1="{left - 4}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="#888"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{tick}</text>')
    for s in range(x_lo, x_hi + 1):
        x = px(s)
        out.append(f'<text x="{x:.1f}" y="{top + ph + 16}" text-anchor="middle">{s}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">step</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">mIoU all (%)</text>')
    for k, (method, pts) in enumerate(sorted(series.items())):
        color = PALETTE[k % len(PALETTE)]
        pts = sorted(pts)
        coords = " ".join(f"{px(s):.1f},{py(v):.1f}" for s, v in pts)
        if len(pts) > 1:
            out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for s, v in pts:
            out.append(f'<circle cx="{px(s):.1f}" cy="{py(v):.1f}" r="3" fill="{color}"/>')
        ly = top + 14 * k + 8
        out.append(f'<line x1="{width - right + 10}" y1="{ly}" x2="{width - right + 28}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{width - right + 32}" y="{ly + 4}">{method}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot(args) -> int:
    report = Path(args.report_dir)
    summary = report / "summary.csv"
    if not summary.is_file():
        raise UsageError(f"no summary.csv in {report}")
    try:
        series = read_summary(summary)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"malformed {summary}: {exc}") from exc
    target = Path(args.output) if args.output else report / "miou.svg"
    target.write_text(render_svg(series))
    print(target)
    return EXIT_OK


SWEEP_PARAMS = {"lambda1": "softness", "lambda2": "sharpness"}


def cmd_sweep(args) -> int:
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--values must be numbers: {exc}") from exc
    if not values:
        raise UsageError("--values is empty")
    if any(v < 0 or not math.isfinite(v) for v in values):
        raise UsageError("--values must be finite and non-negative")
    spec, config, methods, _ = resolve(args)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    train0 = build_step_dataset(spec, 0, dtype=config.np_dtype)
    net0, _ = train_step0(config, train0.images, spec.to_channels(train0.gt_visible), len(spec.groups[0]))
    snap0 = net0.snapshot()
    rows = []
    for v in values:
        weights = replace(config.weights, **{SWEEP_PARAMS[args.param]: v})
        report = run_scenario(spec, replace(config, weights=weights), methods[:1],
                              out_dir=out / f"{args.param}_{v:g}", step0=snap0)
        rows.append((v, report.final(methods[0]).grouped["all"]))
        print(f"{args.param}={v:g} miou_all={rows[-1][1]:.4f}")
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value", "miou_all"])
        for v, m in rows:
            w.writerow([f"{v:g}", "nan" if m is None else f"{m:.6f}"])
    return EXIT_OK


# ----------------------------------------------------------------- parser


def _scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with 'scenario' and 'train' sections")
    p.add_argument("--scenario", choices=sorted(PRESET_GROUPS) + ["3-1×3", "custom"])
    p.add_argument("--setting", choices=["disjoint", "overlapped"])
    p.add_argument("--seed", type=int)
    p.add_argument("--class_order", help="A-E or an explicit comma-separated permutation of class ids")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsclab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gsclab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train a scenario and write reports")
    p.add_argument("config_path", nargs="?", help="same as --config")
    _scenario_flags(p)
    p.add_argument("--method", help=f"one or more of {', '.join(ALL_METHODS)} (comma separated)")
    p.add_argument("--out_dir", required=True)
    p.add_argument("--dump_dataset", action="store_true", help="also write the training images and masks")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--components", help="comma-separated subset")
    p.add_argument("--inject-fault", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("audit-labels", help="compare pseudo-label rules against the full labels")
    p.add_argument("checkpoint", help="model trained through the step before --step")
    _scenario_flags(p)
    p.add_argument("--step", type=int, default=1)
    p.add_argument("--out_dir", required=True)
    p.add_argument("--max_images", type=int, default=8, help="label maps to write as PGM")
    p.set_defaults(func=cmd_audit_labels)

    p = sub.add_parser("plot", help="SVG chart of mIoU per step from a report directory")
    p.add_argument("report_dir")
    p.add_argument("--output")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("sweep", help="rerun the scenario over values of one loss weight")
    _scenario_flags(p)
    p.add_argument("--param", choices=sorted(SWEEP_PARAMS), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--method", default="gsc")
    p.add_argument("--out_dir", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config_path", None):
        if args.config and args.config != args.config_path:
            parser.error("give the config either positionally or with --config, not both")
        args.config = args.config_path
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gsclab {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"gsclab {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

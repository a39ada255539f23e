"""Command-line entry point: ``tiltlab <command> [options]``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from pathlib import Path

import numpy as np
import yaml

from . import battery
from . import bounds as B
from . import config as cfgmod
from .coder import code_length_bits, decode, encode, read_message
from .errors import ConfigError, TiltlabError
from .scenario import SparseShiftScenario, generate, save_scenario
from .talr import TalrModulator, TokenLossBatch, apply_floor, select_tau, solve_weights_closed_form
from .tilting import measure_step_kl, run_schedule
from .tree import ModelState, check_budget, kl_paths, load as load_tree, path_distribution, divergence

TRAJECTORY_COLUMNS = ["t", "lambda", "step_kl", "kl_Q_P2", "chi2_P1_Q", "delta_P1_cum", "delta_P2_cum"]
REPORT_COLUMNS = ["name", "measured", "bound", "margin", "pass"]
SWEEP_COLUMNS = ["lambda", "T", "modulator", "domain_gain", "general_change", "mean_step_kl", "pareto", "status"]


# --------------------------------------------------------------------------
# output helpers


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value)) if math.isfinite(value) else ("nan" if math.isnan(value) else str(float(value)))
    return "" if value is None else str(value)


def atomic_write(path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def svg_scatter(rows, x="domain_gain", y="general_change", width=640, height=480) -> str:
    """Static scatter of one point per row, coloured by modulator."""
    pad = 60
    pts = [(r[x], r[y], r["modulator"], r["lambda"], r["T"]) for r in rows
           if math.isfinite(r.get(x, math.nan)) and math.isfinite(r.get(y, math.nan))]
    xs = [p[0] for p in pts] or [0.0, 1.0]
    ys = [p[1] for p in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1.0, x1 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 1.0, y1 + 1.0

    def sx(v):
        return pad + (v - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)

    colours = {"none": "#1f77b4", "talr": "#d62728"}
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 15}" text-anchor="middle" font-size="13">domain gain -dL(P2) [nats]</text>',
        f'<text x="18" y="{height / 2:.1f}" text-anchor="middle" font-size="13" transform="rotate(-90 18 {height / 2:.1f})">general change -dL(P1) [nats]</text>',
        f'<text x="{pad}" y="{height - pad + 16}" font-size="10">{x0:.4g}</text>',
        f'<text x="{width - pad}" y="{height - pad + 16}" font-size="10" text-anchor="end">{x1:.4g}</text>',
        f'<text x="{pad - 4}" y="{height - pad}" font-size="10" text-anchor="end">{y0:.4g}</text>',
        f'<text x="{pad - 4}" y="{pad + 4}" font-size="10" text-anchor="end">{y1:.4g}</text>',
    ]
    for gx, gy, mod, lam, T in pts:
        c = colours.get(mod, "#555555")
        out.append(
            f'<circle cx="{sx(gx):.2f}" cy="{sy(gy):.2f}" r="4" fill="{c}" fill-opacity="0.8">'
            f"<title>lambda={lam:g} T={T} {mod}</title></circle>"
        )
    for i, (mod, c) in enumerate(colours.items()):
        yy = pad + 14 * i
        out.append(f'<circle cx="{width - pad - 60}" cy="{yy}" r="4" fill="{c}"/>')
        out.append(f'<text x="{width - pad - 50}" y="{yy + 4}" font-size="11">{mod}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# shared plumbing


def load_config(args) -> cfgmod.ExperimentConfig:
    path = getattr(args, "config", None)
    cfg = cfgmod.load(path) if path else cfgmod.ExperimentConfig().validate()
    if getattr(args, "seed", None) is not None:
        cfg.seed = int(args.seed)
    if getattr(args, "out", None) is not None:
        cfg.out = str(args.out)
    sc = cfg.scenario
    check_budget(sc.vocab, sc.depth, cfg.resolved_budget())
    return cfg


def constants_for(cfg: cfgmod.ExperimentConfig, params: SparseShiftScenario) -> B.Constants:
    c = cfg.constants
    base = battery.CONSTANT_SEED_BASE
    return B.estimate_constants(
        params,
        lam_grid=tuple(c.lambdas),
        seeds=range(base, base + c.runs),
        steps=tuple(c.steps),
        alpha=cfg.schedule.alpha,
        reference=cfg.schedule.reference,
        percentile=c.percentile,
    )


def _modulator(name: str, cfg: cfgmod.ExperimentConfig):
    return TalrModulator(cfg.talr_config()) if name == "talr" else None


def trajectory_rows(scen, models, sched) -> list[dict]:
    rows = []
    p1_0 = kl_paths(scen.P1, models[0])
    p2_0 = kl_paths(scen.P2, models[0])
    p1 = path_distribution(scen.P1)
    for t, lam in enumerate(sched.lambdas):
        Q, Qn = models[t], models[t + 1]
        rows.append({
            "t": t,
            "lambda": lam,
            "step_kl": measure_step_kl(Q, Qn),
            "kl_Q_P2": kl_paths(Q, scen.P2),
            "chi2_P1_Q": divergence("chi_square", p1, path_distribution(Q)),
            "delta_P1_cum": kl_paths(scen.P1, Qn) - p1_0,
            "delta_P2_cum": kl_paths(scen.P2, Qn) - p2_0,
        })
    return rows


def _run_and_report(cfg, scen, sched, modulator_name):
    models, _ = run_schedule(scen.Q0, scen.P2, sched, modulator=_modulator(modulator_name, cfg), diagnostics=False)
    report = None
    if modulator_name == "none":
        consts = constants_for(cfg, scen.params)
        report = B.verify_multi_step(models, sched, scen.P1, scen.P2, scen.P2, consts, scen=scen)
    return models, report


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cfg = load_config(args)
    params = cfg.scenario_params()
    sched = cfg.tilting_schedule()
    scen = generate(params)
    models, report = _run_and_report(cfg, scen, sched, cfg.schedule.modulator)
    out = Path(cfg.out)
    atomic_write(out / "config.yaml", cfg.dumps())
    atomic_write(out / "trajectory.csv", csv_text(TRAJECTORY_COLUMNS, trajectory_rows(scen, models, sched)))
    rows = report.rows() if report is not None else []
    atomic_write(out / "report.csv", csv_text(REPORT_COLUMNS, rows))
    d1 = kl_paths(scen.P1, models[-1]) - kl_paths(scen.P1, scen.Q0)
    d2 = kl_paths(scen.P2, models[-1]) - kl_paths(scen.P2, scen.Q0)
    print(f"domain_gain={-d2:.6g} general_change={-d1:.6g} steps={sched.steps}")
    if report is None:
        print("bound checks apply to unmodulated runs only; none evaluated")
        return 0
    for c in report.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name} margin={c.margin:.4g}")
    for flag in report.flags:
        print(f"FLAG {flag}")
    return 0 if report.passed else 1


@lru_cache(maxsize=4)
def _cached_scenario(params: SparseShiftScenario):
    return generate(params)


def _sweep_cell(job):
    params, lam, T, mod, alpha, reference, talr_cfg = job
    scen = _cached_scenario(params)
    return B.sweep_cell(scen, lam, T, mod, alpha, reference, talr_cfg)


def sweep_rows(cfg: cfgmod.ExperimentConfig, jobs: int = 1) -> list[dict]:
    params = cfg.scenario_params()
    sw = cfg.sweep
    talr_cfg = cfg.talr_config()
    cells = [
        (params, float(lam), int(T), mod, cfg.schedule.alpha, cfg.schedule.reference, talr_cfg)
        for lam in sw.lambdas for T in sw.T for mod in sw.modulators
    ]
    if jobs <= 1:
        rows = [_sweep_cell(c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_cell, cells, chunksize=1))
    for row, flag in zip(rows, B.pareto_flags(rows)):
        row["pareto"] = flag
    return rows


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    jobs = int(getattr(args, "jobs", None) or 1)
    rows = sweep_rows(cfg, jobs)
    out = Path(cfg.out)
    atomic_write(out / "config.yaml", cfg.dumps())
    atomic_write(out / "frontier.csv", csv_text(SWEEP_COLUMNS, rows))
    atomic_write(out / "frontier.svg", svg_scatter(rows))
    bad = sum(1 for r in rows if r["status"] != "ok")
    print(f"{len(rows)} cells written to {out / 'frontier.csv'} ({bad} failed)")
    return 0


def _read_yaml(path) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a mapping")
    return raw


def cmd_verify_bounds(args) -> int:
    raw = {}
    if getattr(args, "config", None):
        raw = _read_yaml(args.config)
    scen_raw = dict(_read_yaml(args.scenario))
    seed = scen_raw.pop("seed", raw.get("seed", 0))
    raw["scenario"] = scen_raw
    raw["schedule"] = _read_yaml(args.schedule)
    raw["seed"] = seed
    cfg = cfgmod.from_dict(raw)
    if getattr(args, "seed", None) is not None:
        cfg.seed = int(args.seed)
    check_budget(cfg.scenario.vocab, cfg.scenario.depth, cfg.resolved_budget())
    scen = generate(cfg.scenario_params())
    sched = cfg.tilting_schedule()
    consts = constants_for(cfg, scen.params)
    report = B.verify_one_step(scen.P1, scen.P2, scen.Q0, scen.target, sched.lambdas[0], consts, scen=scen)
    models, _ = run_schedule(scen.Q0, scen.P2, sched, modulator=_modulator(cfg.schedule.modulator, cfg), diagnostics=False)
    if cfg.schedule.modulator == "none":
        multi = B.verify_multi_step(models, sched, scen.P1, scen.P2, scen.P2, consts, scen=scen)
        report.checks.extend(multi.checks)
    out = Path(args.out) if getattr(args, "out", None) else Path("report.csv")
    if out.suffix != ".csv":
        out = out / "report.csv"
    atomic_write(out, csv_text(REPORT_COLUMNS, report.rows()))
    for c in report.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name} margin={c.margin:.4g}")
    return 0 if report.passed else 1


def cmd_verify_all(args) -> int:
    dump = Path(args.out) / "counterexamples" if getattr(args, "out", None) else None
    rows = battery.run_selector(args.selector, quick=not args.full, dump_dir=dump)
    print(f"{'check':52s} {'instances':>9s} {'failures':>8s} {'worst_margin':>13s}")
    for r in rows:
        print(f"{r.check:52s} {r.instances:9d} {r.failures:8d} {r.worst_margin:13.4g}")
    failures = sum(r.failures for r in rows)
    return 0 if failures == 0 else 1


def cmd_talr_solve(args) -> int:
    text = Path(args.losses).read_text()
    # blank lines separate sequences; the dynamic temperature uses per-sequence means
    seqs, cur = [], []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            if cur:
                seqs.append(cur)
                cur = []
            continue
        try:
            cur.append(float(line))
        except ValueError as exc:
            raise ConfigError(f"not a number: {line!r}") from exc
    if cur:
        seqs.append(cur)
    batch = TokenLossBatch(seqs)
    tau = select_tau(batch) if args.tau in ("median", "dynamic-median") else float(args.tau)
    losses = batch.flat()
    w = solve_weights_closed_form(losses, tau, mode=args.mode)
    if args.mode == "unnormalized":
        w = apply_floor(w, args.floor)
    rows = [{"index": i, "loss": float(l), "weight": float(x)} for i, (l, x) in enumerate(zip(losses, w))]
    text_out = csv_text(["index", "loss", "weight"], rows)
    if getattr(args, "out", None):
        out = Path(args.out)
        if out.suffix != ".csv":
            out = out / "weights.csv"
        atomic_write(out, text_out)
    else:
        sys.stdout.write(text_out)
    print(f"tau={tau!r}", file=sys.stderr)
    return 0


def _parse_response(text: str) -> tuple[int, ...]:
    text = text.strip()
    if text in ("", "-", "empty"):
        return ()
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"response must be comma-separated token indices, got {text!r}") from exc


def cmd_encode(args) -> int:
    model = load_tree(args.model, cls=ModelState)
    z = _parse_response(args.response)
    msg = encode(z, model)
    out = Path(args.out) if getattr(args, "out", None) else Path("message.bin")
    if out.suffix != ".bin":
        out = out / "message.bin"
    atomic_write(out, msg.to_bytes())
    print(f"bits={msg.bit_length} ideal={code_length_bits(z, model):.6f} symbols={msg.symbol_count} -> {out}")
    return 0


def cmd_decode(args) -> int:
    model = load_tree(args.model, cls=ModelState)
    msg = read_message(args.message)
    z = decode(msg, model)
    print(",".join(map(str, z)) if z else "empty")
    return 0


def cmd_gen_scenario(args) -> int:
    cfg = load_config(args)
    scen = generate(cfg.scenario_params())
    out = Path(cfg.out)
    save_scenario(scen, out)
    atomic_write(out / "config.yaml", cfg.dumps())
    atomic_write(out / "stats.json", json.dumps(scen.stats, indent=2, sort_keys=True) + "\n")
    print(json.dumps(scen.stats, sort_keys=True))
    return 0


# --------------------------------------------------------------------------
# parser


def _global_options(parser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="YAML experiment config")
    parser.add_argument("--seed", type=int, default=default, help="experiment seed")
    parser.add_argument("--out", default=default, help="output directory (or file for single-file commands)")
    parser.add_argument("--jobs", type=int, default=default, help="worker processes for sweeps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tiltlab", description="Exponential-tilting fine-tuning simulator and bound checker.")
    _global_options(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="run one schedule and check the step bounds")
    sub.add_parser("sweep", parents=[common], help="lambda x T x modulator frontier")
    p = sub.add_parser("verify-bounds", parents=[common], help="bound report for one scenario and schedule")
    p.add_argument("--scenario", required=True)
    p.add_argument("--schedule", required=True)
    p = sub.add_parser("verify-all", parents=[common], help="run the verification battery")
    p.add_argument("selector", nargs="?", default="all", choices=battery.SELECTORS)
    p.add_argument("--full", action="store_true", help="acceptance-size instance counts")
    p = sub.add_parser("talr-solve", parents=[common], help="token weights for a list of losses")
    p.add_argument("--losses", required=True)
    p.add_argument("--tau", default="median")
    p.add_argument("--floor", type=float, default=0.01)
    p.add_argument("--mode", choices=("unnormalized", "simplex"), default="unnormalized")
    p = sub.add_parser("encode", parents=[common], help="range-code one response")
    p.add_argument("--model", required=True)
    p.add_argument("--response", required=True, help="comma-separated token indices; 'empty' for the empty response")
    p = sub.add_parser("decode", parents=[common], help="decode a message file")
    p.add_argument("--model", required=True)
    p.add_argument("--message", required=True)
    sub.add_parser("gen-scenario", parents=[common], help="write a sparse-shift scenario to disk")
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "verify-bounds": cmd_verify_bounds,
    "verify-all": cmd_verify_all,
    "talr-solve": cmd_talr_solve,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "gen-scenario": cmd_gen_scenario,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except TiltlabError as exc:
        print(f"ERROR {exc.code}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

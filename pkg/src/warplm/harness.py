"""Command-line harness: synthetic data, registration runs, sweeps and benchmarks.

Every command writes CSV that starts with the ``# warplm-csv v1`` comment line.
Config files are plain ``key = value`` text; keys are the dotted paths of the
configuration dataclasses, for example::

    optimizer = lm
    lm.lambda0 = 0.006
    lm.lambda_max = inf
    metric.kind = lncc
    schedule.levels = 4:100, 2:75, 1:50
    synth.warp_max = 3

Exit codes: 0 success, 1 run failure, 2 bad input (usage, config or file format).
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, is_dataclass, replace
from functools import partial
from pathlib import Path

import numpy as np

from .driver import (TRACE_COLUMNS, RegConfig, RegResult, endpoint_error, first_order_iterate,
                     register, smooth_field)
from .field import zero_field
from .io import FormatError, read_field, read_volume, write_field, write_volume
from .lmopt import AdamOptimizer, LMOptimizer, LmState, RegState, lm_iterate, state_bytes
from .pyramid import PyramidSchedule
from .similarity import residual
from .synth import SynthSpec, synth_pair

log = logging.getLogger("warplm")

CSV_VERSION = "# warplm-csv v1"
SUITE_SEEDS = (0, 1, 2, 3, 4)
# the rejection ablation adds one pair with a much larger deformation
HARD_SEED_OFFSET = 100
HARD_WARP_FRACTION = 0.22

SWEEP_COLUMNS = ("param", "value", "repeat", "final_loss", "mean_epe", "max_epe", "final_lambda",
                 "steps_rejected")
MEMBENCH_COLUMNS = ("n", "field_bytes", "adam_state_bytes", "lm_state_bytes", "lm_sec_per_step",
                    "adam_sec_per_step")
ABLATION_COLUMNS = ("variant", "pair", "warp_max", "final_loss", "mean_epe", "final_lambda",
                    "max_lambda", "steps_rejected", "late_update_norm")
ABLATION_TRACE_COLUMNS = ("variant", "pair", "step", "lambda", "retries", "r")
SWEEP_PARAMS = ("lambda0", "mu_plus", "mu_minus", "tile_size")
ABLATION_VARIANTS = {
    "no_rejection": dict(rejection_enabled=False),
    "rejection_cap1": dict(rejection_enabled=True, lambda_max=1.0),
    "rejection_uncapped": dict(rejection_enabled=True, lambda_max=math.inf),
}


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


# ---------------------------------------------------------------------------
# config files


def _parse_value(text: str, current):
    text = text.strip()
    if isinstance(current, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, PyramidSchedule):
        levels = []
        for item in text.split(","):
            factor, iters = item.split(":")
            levels.append((int(factor), int(iters)))
        return PyramidSchedule(tuple(levels))
    if isinstance(current, tuple):
        return tuple(int(x) for x in text.replace("x", ",").split(","))
    return text


def _set_path(obj, path, text):
    head, _, rest = path.partition(".")
    names = {f.name for f in fields(obj)}
    if head not in names:
        raise ConfigError(f"unknown config key {path!r}")
    current = getattr(obj, head)
    if rest:
        if not is_dataclass(current) or isinstance(current, PyramidSchedule) and rest != "levels":
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(current, PyramidSchedule):
            return replace(obj, **{head: _parse_value(text, current)})
        return replace(obj, **{head: _set_path(current, rest, text)})
    if is_dataclass(current) and not isinstance(current, PyramidSchedule):
        if head == "metric":
            return replace(obj, metric=replace(current, kind=text.strip()))
        raise ConfigError(f"config key {path!r} needs a field name")
    return replace(obj, **{head: _parse_value(text, current)})


def parse_config(text: str, reg: RegConfig = RegConfig(), synth: SynthSpec = SynthSpec()):
    """Apply ``key = value`` lines to a registration config and a synthetic spec."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key.startswith("synth."):
                synth = _set_path(synth, key[len("synth."):], value)
            else:
                reg = _set_path(reg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return reg, synth


def load_config(path=None, seed=None):
    reg, synth = RegConfig(), SynthSpec()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        reg, synth = parse_config(text, reg, synth)
    if seed is not None:
        reg = replace(reg, seed=seed)
        synth = replace(synth, seed=seed)
    return reg, synth


# ---------------------------------------------------------------------------
# CSV


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(dest, columns, rows):
    """Write a versioned CSV to a path, an open text stream, or stdout (None or '-')."""
    if hasattr(dest, "write"):
        _write_rows(dest, columns, rows)
        return
    if dest is None or str(dest) == "-":
        _write_rows(sys.stdout, columns, rows)
        return
    with open(dest, "w", newline="") as fh:
        _write_rows(fh, columns, rows)


def _write_rows(fh, columns, rows):
    fh.write(CSV_VERSION + "\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])


def read_csv(path):
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != CSV_VERSION:
            raise FormatError(f"missing CSV version line, found {first!r}")
        return list(csv.DictReader(fh))


def trace_rows(result: RegResult):
    for row in result.loss_trace:
        yield {"level": row.level, "iter": row.iter, "loss_raw": row.loss_raw, "r": row.r,
               "lambda": row.lam, "eps": row.eps, "accepted": row.accepted,
               "retries": row.retries, "jac_det_min": row.jac_det_min}


# ---------------------------------------------------------------------------
# commands


@dataclass
class RunSummary:
    final_loss: float
    mean_epe: float
    max_epe: float
    final_lambda: float
    steps_rejected: int
    max_lambda: float
    late_update_norm: float
    lambdas: list
    aborted: str = ""
    # smallest Jacobian determinant of any accepted incremental warp
    min_step_jacobian: float = float("nan")


def run_pair(spec: SynthSpec, cfg: RegConfig, keep_trace=False) -> RunSummary:
    fixed, moving, u_true = synth_pair(spec)
    res = register(fixed, moving, cfg)
    mean_epe, max_epe = endpoint_error(res.final_warp, u_true)
    lams = [row.lam for row in res.loss_trace]
    late = [row.update_norm for row in res.loss_trace[-10:]]
    return RunSummary(res.final_loss, mean_epe, max_epe, res.final_lambda, res.steps_rejected,
                      max(lams, default=float("nan")), max(late, default=float("nan")),
                      [(row.lam, row.retries, row.r) for row in res.loss_trace] if keep_trace
                      else [], res.aborted,
                      min((row.jac_det_min for row in res.loss_trace), default=float("nan")))


def cmd_synth(spec: SynthSpec, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fixed, moving, u_true = synth_pair(spec)
    write_volume(out / "fixed.vol", fixed)
    write_volume(out / "moving.vol", moving)
    write_field(out / "u_true.dsp", u_true)
    return fixed, moving, u_true


def cmd_register(fixed_path, moving_path, cfg: RegConfig, out_dir=None, csv_path=None,
                 truth_path=None):
    fixed = read_volume(fixed_path)
    moving = read_volume(moving_path)
    truth = read_field(truth_path) if truth_path else None
    res = register(fixed, moving, cfg)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_field(out / "warp.dsp", res.final_warp)
        if csv_path is None:
            csv_path = out / "trace.csv"
    write_csv(csv_path, TRACE_COLUMNS, trace_rows(res))
    summary = {"final_loss": res.final_loss,
               "loss_raw": res.loss_trace[-1].loss_raw if res.loss_trace else float("nan"),
               "final_lambda": res.final_lambda, "jac_det_min": res.jac_det_min_final}
    if truth is not None:
        summary["mean_epe"], summary["max_epe"] = endpoint_error(res.final_warp, truth)
    return res, summary


def _sweep_job(job):
    param, value, repeat, spec, cfg = job
    try:
        s = run_pair(spec, cfg)
        return {"param": param, "value": value, "repeat": repeat, "final_loss": s.final_loss,
                "mean_epe": s.mean_epe, "max_epe": s.max_epe, "final_lambda": s.final_lambda,
                "steps_rejected": s.steps_rejected}, s.aborted
    except Exception as exc:  # a failed row must not stop the sweep
        nan = float("nan")
        return {"param": param, "value": value, "repeat": repeat, "final_loss": nan,
                "mean_epe": nan, "max_epe": nan, "final_lambda": nan,
                "steps_rejected": -1}, f"{type(exc).__name__}: {exc}"


def _run_jobs(fn, jobs, workers):
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(fn, jobs))  # map keeps submission order
    return [fn(job) for job in jobs]


def cmd_sweep(param, values, cfg: RegConfig, spec: SynthSpec, repeats=1, workers=1):
    """Registration per value and repeat; repeat ``i`` uses synthetic seed ``spec.seed + i``."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    cast = int if param == "tile_size" else float
    jobs = []
    for value in values:
        run_cfg = replace(cfg, optimizer="lm", lm=replace(cfg.lm, **{param: cast(value)}))
        for rep in range(repeats):
            jobs.append((param, cast(value), rep, replace(spec, seed=spec.seed + rep), run_cfg))
    rows, errors = [], []
    for row, err in _run_jobs(_sweep_job, jobs, workers):
        rows.append(row)
        if err:
            errors.append(f"{row['param']}={row['value']} repeat {row['repeat']}: {err}")
    return rows, errors


def _time_steps(step_fn, warmup=2, timed=5):
    for _ in range(warmup):
        step_fn()
    times = []
    for _ in range(timed):
        t0 = time.perf_counter()
        step_fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def membench_row(n, cfg: RegConfig = RegConfig(), element_size=4, timing=True):
    shape = (n, n, n, 3)
    adam = AdamOptimizer(cfg.adam, shape)
    lm = LMOptimizer(cfg.lm)
    row = {"n": n, "field_bytes": int(np.prod(shape)) * element_size,
           "adam_state_bytes": state_bytes(adam, element_size),
           "lm_state_bytes": state_bytes(lm, element_size),
           "lm_sec_per_step": float("nan"), "adam_sec_per_step": float("nan")}
    if not timing:
        return row
    fixed, moving, _ = synth_pair(SynthSpec(dims=(n, n, n), warp_max=min(3.0, n / 4 - 0.5)))
    residual_fn = partial(residual, fixed, moving, cfg=cfg.metric)
    su = partial(smooth_field, sigma=cfg.sigma_update)
    sw = partial(smooth_field, sigma=cfg.sigma_warp)
    start = RegState(zero_field(fixed.shape), residual_fn(zero_field(fixed.shape)))

    state = {"reg": start, "lm": LmState.initial(cfg.lm)}

    def lm_step():
        state["reg"], state["lm"], _ = lm_iterate(state["reg"], residual_fn, cfg.lm, state["lm"],
                                                  cfg.step, su, sw)

    row["lm_sec_per_step"] = _time_steps(lm_step)
    state["reg"] = start

    def adam_step():
        state["reg"], _ = first_order_iterate(state["reg"], residual_fn, adam, cfg.step, su, sw)

    row["adam_sec_per_step"] = _time_steps(adam_step)
    return row


def cmd_membench(sizes, cfg: RegConfig = RegConfig()):
    rows, notes = [], []
    for n in sizes:
        try:
            rows.append(membench_row(n, cfg))
        except MemoryError:
            notes.append(f"n={n}: allocation failed, row skipped")
    return rows, notes


def _ablation_job(job):
    variant, pair, spec, cfg = job
    try:
        s = run_pair(spec, cfg, keep_trace=True)
        err = s.aborted
    except Exception as exc:
        nan = float("nan")
        s = RunSummary(nan, nan, nan, nan, -1, nan, nan, [])
        err = f"{type(exc).__name__}: {exc}"
    row = {"variant": variant, "pair": pair, "warp_max": spec.warp_max,
           "final_loss": s.final_loss, "mean_epe": s.mean_epe, "final_lambda": s.final_lambda,
           "max_lambda": s.max_lambda, "steps_rejected": s.steps_rejected,
           "late_update_norm": s.late_update_norm}
    trace = [{"variant": variant, "pair": pair, "step": i, "lambda": lam, "retries": k, "r": r}
             for i, (lam, k, r) in enumerate(s.lambdas)]
    return row, trace, err


def suite_specs(base: SynthSpec = SynthSpec(), seeds=SUITE_SEEDS):
    return [(f"seed{s}", replace(base, seed=s)) for s in seeds]


def hard_pair(base: SynthSpec = SynthSpec()) -> SynthSpec:
    """Same texture as the suite, displacement close to the quarter-grid limit (7 at 32³)."""
    return replace(base, seed=base.seed + HARD_SEED_OFFSET,
                   warp_max=round(HARD_WARP_FRACTION * min(base.dims), 2))


def cmd_reject_ablation(cfg: RegConfig, base: SynthSpec = SynthSpec(), seeds=SUITE_SEEDS,
                        workers=1):
    pairs = suite_specs(base, seeds) + [("hard", hard_pair(base))]
    jobs = [(name, pair, spec, replace(cfg, optimizer="lm", lm=replace(cfg.lm, **over)))
            for name, over in ABLATION_VARIANTS.items() for pair, spec in pairs]
    rows, traces, errors = [], [], []
    for row, trace, err in _run_jobs(_ablation_job, jobs, workers):
        rows.append(row)
        traces.extend(trace)
        if err:
            errors.append(f"{row['variant']}/{row['pair']}: {err}")
    return rows, traces, errors


# ---------------------------------------------------------------------------
# CLI


def _values(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser():
    p = argparse.ArgumentParser(prog="warplm", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, csv_help="CSV output path ('-' for stdout)"):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int, help="overrides the seed in the config")
        sp.add_argument("--out-dir", help="directory for output files")
        sp.add_argument("--csv", help=csv_help)
        return sp

    sp = common(sub.add_parser("synth", help="write a synthetic fixed/moving/u_true triple"))
    sp.add_argument("--dims", help="grid size, e.g. 32,32,32")
    sp.add_argument("--warp-max", type=float)

    sp = common(sub.add_parser("register", help="register moving onto fixed"))
    sp.add_argument("fixed")
    sp.add_argument("moving")
    sp.add_argument("--truth", help="ground-truth DSP3 field for endpoint error")
    sp.add_argument("--optimizer", choices=("lm", "adam", "gd"))

    sp = common(sub.add_parser("sweep", help="LM hyperparameter sweep on synthetic pairs"))
    sp.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    sp.add_argument("--values", required=True, type=_values)
    sp.add_argument("--repeats", type=int, default=len(SUITE_SEEDS))
    sp.add_argument("--workers", type=int, default=1)

    sp = common(sub.add_parser("membench", help="optimizer state bytes and time per step"))
    sp.add_argument("--sizes", type=lambda t: [int(v) for v in _values(t)], default=[16, 32, 64])

    sp = common(sub.add_parser("reject-ablation", help="rejection with and without a cap"))
    sp.add_argument("--workers", type=int, default=1)
    return p


def _csv_dest(args, default_name):
    if args.csv:
        return args.csv
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        return Path(args.out_dir) / default_name
    return "-"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg, spec = load_config(args.config, args.seed)
        return _dispatch(args, cfg, spec)
    except (FormatError, ConfigError) as exc:
        print(f"warplm: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"warplm: error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args, cfg: RegConfig, spec: SynthSpec) -> int:
    if args.command == "synth":
        if args.dims:
            spec = replace(spec, dims=tuple(int(v) for v in _values(args.dims)))
        if args.warp_max is not None:
            spec = replace(spec, warp_max=args.warp_max)
        try:
            spec = replace(spec)  # re-validate
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        out = args.out_dir or "."
        cmd_synth(spec, out)
        print(f"wrote fixed.vol moving.vol u_true.dsp to {out} (dims={spec.dims}, "
              f"warp_max={spec.warp_max}, seed={spec.seed})")
        return 0

    if args.command == "register":
        if args.optimizer:
            cfg = replace(cfg, optimizer=args.optimizer)
        csv_path = args.csv or (None if args.out_dir else "-")
        res, summary = cmd_register(args.fixed, args.moving, cfg, args.out_dir, csv_path,
                                    args.truth)
        print(" ".join(f"{k}={v:.6g}" for k, v in summary.items()),
              file=sys.stderr if csv_path == "-" else sys.stdout)
        if res.aborted:
            print(f"warplm: registration aborted: {res.aborted}", file=sys.stderr)
            return 1
        return 0

    if args.command == "sweep":
        rows, errors = cmd_sweep(args.param, args.values, cfg, spec, args.repeats, args.workers)
        write_csv(_csv_dest(args, f"sweep_{args.param}.csv"), SWEEP_COLUMNS, rows)
        for err in errors:
            print(f"warplm: sweep row failed: {err}", file=sys.stderr)
        return 1 if errors else 0

    if args.command == "membench":
        rows, notes = cmd_membench(args.sizes, cfg)
        write_csv(_csv_dest(args, "membench.csv"), MEMBENCH_COLUMNS, rows)
        for note in notes:
            print(f"warplm: {note}", file=sys.stderr)
        return 0

    if args.command == "reject-ablation":
        rows, traces, errors = cmd_reject_ablation(cfg, spec, workers=args.workers)
        write_csv(_csv_dest(args, "reject_ablation.csv"), ABLATION_COLUMNS, rows)
        if args.out_dir:
            write_csv(Path(args.out_dir) / "reject_ablation_lambda.csv", ABLATION_TRACE_COLUMNS,
                      traces)
        for err in errors:
            print(f"warplm: ablation run failed: {err}", file=sys.stderr)
        return 1 if errors else 0
    return 2

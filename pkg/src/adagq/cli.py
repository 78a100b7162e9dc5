"""Command-line driver: run, compare, sweep and replay experiments.

Exit codes: 0 target reached (or check passed), 2 round cap reached before
the target, 1 any error.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .config import ConfigError, config_from_dict, parse_config
from .engine import MetricsRecord, SCHEMA_VERSION, ExperimentResult, replay_decision, run_experiment
from .simnet import dump_profiles

log = logging.getLogger("adagq")

EXIT_REACHED = 0
EXIT_ERROR = 1
EXIT_CAP = 2

METRICS_COLUMNS = (
    "round",
    "sim_time_s",
    "train_loss",
    "test_accuracy",
    "mean_levels",
    "aux_levels",
    "sign",
    "grad_norm",
    "round_time_s",
    "client_bits",
    "client_upload_bits",
    "t_cp",
    "t_cm",
    "t_down",
    "cum_uploaded_bytes",
)


class CliError(Exception):
    pass


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ";".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(records: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for rec in records:
        w.writerow([_fmt(getattr(rec, col)) for col in METRICS_COLUMNS])
    return buf.getvalue()


def write_outputs(out: Path, cfg, result: ExperimentResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(result.records))
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2) + "\n")
    echo = {"version": __version__, "schema_version": SCHEMA_VERSION, "config": cfg.to_dict()}
    (out / "config_echo.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    dump_profiles(out / "profiles.json", result.links, result.compute)
    with open(out / "telemetry.jsonl", "w") as fh:
        for entry in result.telemetry:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def status_code(summary: dict[str, Any]) -> int:
    return EXIT_REACHED if summary["status"] == "reached" else EXIT_CAP


def _run_one(cfg, out: Path) -> int:
    result = run_experiment(cfg)
    write_outputs(out, cfg, result)
    s = result.summary
    log.info(
        "%s seed=%d: %s after %d rounds, %.4fs simulated, %.6f GB/client",
        cfg.strategy, cfg.seed, s["status"], s["rounds"], s["total_time_s"], s["avg_uploaded_gb"],
    )
    return status_code(s)


# --------------------------------------------------------------------------
# verbs


def cmd_run(args) -> int:
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.profiles:
        overrides.append(f"profiles_path={args.profiles}")
    cfg = parse_config(args.config, overrides)
    return _run_one(cfg, Path(args.out))


def load_summary(run_dir: str | Path) -> dict[str, Any]:
    path = Path(run_dir) / "summary.json"
    if not path.is_file():
        raise CliError(f"{run_dir}: no summary.json in run directory")
    return json.loads(path.read_text())


def _ratio(base: float, this: float) -> str:
    if this == 0:
        return "n/a" if base else "1×"
    return f"{base / this:.2f}×".replace(".00×", "×")


def compare_table(run_dirs: Sequence[str | Path]) -> str:
    """Rounds, uploaded data and simulated time per run, with first-run/this ratios."""
    if not run_dirs:
        raise CliError("compare needs at least one run directory")
    rows = [(str(d), load_summary(d)) for d in run_dirs]
    base = rows[0][1]
    header = ("run", "strategy", "status", "rounds", "uploaded_gb", "total_time_s", "rounds_x", "data_x", "time_x")
    lines = [header]
    for name, s in rows:
        lines.append(
            (
                name,
                str(s["strategy"]),
                str(s["status"]),
                str(s["rounds"]),
                f"{s['avg_uploaded_gb']:.6g}",
                f"{s['total_time_s']:.6g}",
                _ratio(base["rounds"], s["rounds"]),
                _ratio(base["avg_uploaded_gb"], s["avg_uploaded_gb"]),
                _ratio(base["total_time_s"], s["total_time_s"]),
            )
        )
    widths = [max(len(r[i]) for r in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in lines)


def cmd_compare(args) -> int:
    print(compare_table(args.runs))
    return EXIT_REACHED


def _split(s: str | None, conv) -> list:
    if not s:
        return [None]
    return [conv(x) for x in s.split(",") if x.strip()]


def _sweep_job(job: tuple[dict, str]) -> int:
    data, out = job
    return _run_one(config_from_dict(data), Path(out))


def cmd_sweep(args) -> int:
    base = parse_config(args.config, args.override).to_dict()
    if args.strategy:
        base.pop("strategy_params")
    if args.seed is not None:
        base["seed"] = args.seed
    strategies = _split(args.strategy, str)
    sds = _split(args.sigma_d, float)
    srs = _split(args.sigma_r, float)
    jobs = []
    for strat, sd, sr in itertools.product(strategies, sds, srs):
        data = dict(base)
        name = []
        if strat is not None:
            data["strategy"] = strat
        name.append(data["strategy"])
        if sd is not None:
            data["sigma_d"] = sd
            name.append(f"sd{sd:g}")
        if sr is not None:
            data["sigma_r"] = sr
            name.append(f"sr{sr:g}")
        config_from_dict(data)  # validate every cell before any run starts
        jobs.append((data, str(Path(args.out) / "_".join(name))))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            codes = list(pool.map(_sweep_job, jobs))
    else:
        codes = [_sweep_job(j) for j in jobs]
    print(compare_table([out for _, out in jobs]))
    return EXIT_CAP if any(c == EXIT_CAP for c in codes) else EXIT_REACHED


def replay_telemetry(run_dir: str | Path) -> list[int]:
    """Rounds whose recorded controller/allocator decisions do not reproduce."""
    run_dir = Path(run_dir)
    echo = json.loads((run_dir / "config_echo.json").read_text())
    cfg = config_from_dict(echo["config"])
    bad = []
    with open(run_dir / "telemetry.jsonl") as fh:
        for line in fh:
            entry = json.loads(line)
            got = replay_decision(entry, cfg.controller)
            if any(got[k] != entry[k] for k in got):
                bad.append(entry["round"])
    return bad


def cmd_replay(args) -> int:
    src = Path(args.run)
    if not (src / "config_echo.json").is_file():
        raise CliError(f"{src}: no config_echo.json in run directory")
    bad = replay_telemetry(src)
    if bad:
        print(f"controller decisions differ in rounds {bad}")
        return EXIT_ERROR
    print("controller decisions reproduced")
    if args.out:
        data = json.loads((src / "config_echo.json").read_text())["config"]
        data["profiles_path"] = str(src / "profiles.json")
        cfg = config_from_dict(data)
        _run_one(cfg, Path(args.out))
        same = (Path(args.out) / "metrics.csv").read_bytes() == (src / "metrics.csv").read_bytes()
        print("metrics.csv identical" if same else "metrics.csv differs")
        if not same:
            return EXIT_ERROR
    return EXIT_REACHED


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adagq", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML or JSON experiment config")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    r = sub.add_parser("run", help="run one experiment")
    common(r)
    r.add_argument("--profiles", help="replay link/compute profiles from a trace file")
    r.set_defaults(fn=cmd_run)

    c = sub.add_parser("compare", help="side-by-side table of finished runs")
    c.add_argument("runs", nargs="+")
    c.set_defaults(fn=cmd_compare)

    s = sub.add_parser("sweep", help="cartesian sweep over strategies, sigma_d and sigma_r")
    common(s)
    s.add_argument("--strategy", help="comma-separated strategies")
    s.add_argument("--sigma-d", help="comma-separated sigma_d values")
    s.add_argument("--sigma-r", help="comma-separated sigma_r values")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(fn=cmd_sweep)

    rp = sub.add_parser("replay", help="re-derive controller decisions, optionally rerun from traces")
    rp.add_argument("run", help="run directory to replay")
    rp.add_argument("--out", help="rerun with the recorded profiles into this directory")
    rp.set_defaults(fn=cmd_replay)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s"
    )
    try:
        return args.fn(args)
    except (CliError, ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

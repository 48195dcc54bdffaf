"""Command line: ``singulax <experiment> --config FILE [--set key=value]... --out DIR``.

Exit status: 0 when every gated metric passes, 1 on a numeric failure,
2 on a configuration or validation error.
"""
from __future__ import annotations

import argparse
import copy
import itertools
import sys
from pathlib import Path

from .config import EXPERIMENTS, ConfigError, load_config, make_config, parse_value
from .experiments import HEADLINE, run_experiment
from .report import dumps, write_csv

EXIT_OK, EXIT_FAIL, EXIT_INVALID = 0, 1, 2


def _build_config(experiment, args):
    if args.config:
        return load_config(args.config, experiment, args.set, args.seed, args.out)
    return make_config(experiment, None, args.set, args.seed, args.out)


def parse_axis(spec: str) -> tuple[str, list]:
    """``key=v1,v2,...`` or ``key=[json list]``."""
    if "=" not in spec:
        raise ConfigError(spec, "axis must look like key=v1,v2,...")
    key, text = spec.split("=", 1)
    text = text.strip()
    if text.startswith("["):
        vals = parse_value(text)
        if not isinstance(vals, list):
            raise ConfigError(key, "axis values must form a list")
    else:
        vals = [parse_value(v) for v in text.split(",") if v.strip()]
    if not vals:
        raise ConfigError(key, "axis has no values")
    return key.strip(), vals


def sweep(experiment: str, base_overrides, axes, out_dir, config_path=None, seed=None, cap: int = 64):
    """Cartesian sweep in deterministic (row-major) order.

    Invalid points are recorded and skipped without aborting the sweep.
    Returns (rows, reports) where ``rows`` is the summary table.
    """
    total = 1
    for _, vals in axes:
        total *= len(vals)
    if total > cap:
        raise ConfigError("axis", f"sweep has {total} runs, cap is {cap}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = [k for k, _ in axes]
    headline = HEADLINE[experiment]
    rows, reports = [], []
    for i, combo in enumerate(itertools.product(*[v for _, v in axes])):
        sets = list(base_overrides) + [f"{k}={dumps(v, indent=0).replace(chr(10), '')}" for k, v in zip(keys, combo)]
        row = {"run": i, **dict(zip(keys, combo)), "status": "", "passed": "", headline: "",
               "stability_ratio": "", "last_admissible": False, "message": ""}
        try:
            cfg = (load_config(config_path, experiment, sets, seed) if config_path
                   else make_config(experiment, None, sets, seed))
        except ConfigError as exc:
            row["status"] = "invalid"
            row["message"] = str(exc)
            rows.append(row)
            reports.append(None)
            continue
        rep = run_experiment(cfg, out / f"run_{i:03d}")
        row["status"] = "ok"
        row["passed"] = rep.passed
        if headline in rep.metrics:
            row[headline] = rep.metrics[headline].value
        rows.append(row)
        reports.append(rep)
    prev = None
    for k, row in enumerate(rows):
        if row["status"] == "ok":
            nxt = rows[k + 1] if k + 1 < len(rows) else None
            row["last_admissible"] = bool(nxt is not None and nxt["status"] == "invalid")
            if prev is not None and isinstance(prev[headline], float) and isinstance(row[headline], float) \
                    and prev[headline] != 0:
                row["stability_ratio"] = row[headline] / prev[headline]
            prev = row
        else:
            prev = None
    header = ["run"] + keys + ["status", "passed", headline, "stability_ratio", "last_admissible", "message"]
    write_csv(out / "summary.csv", header,
              [[r[h] if not isinstance(r[h], (list, dict)) else dumps(r[h], indent=0).replace("\n", "")
                for h in header] for r in rows])
    return rows, reports


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="singulax", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="JSON config file (schema_version, seed, params)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a parameter (JSON literal); repeatable")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")
    p = sub.add_parser("sweep", help="Cartesian parameter sweep over one experiment")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--axis", action="append", default=[], metavar="KEY=V1,V2,...", required=True)
    p.add_argument("--cap", type=int, default=64, help="maximum number of runs")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "sweep":
            axes = [parse_axis(a) for a in args.axis]
            rows, _ = sweep(args.experiment, args.set, axes, args.out, args.config, args.seed, args.cap)
            for r in rows:
                print(f"run {r['run']:3d}  {r['status']:8s} passed={r['passed']}  {r['message']}")
            ok = [r for r in rows if r["status"] == "ok"]
            return EXIT_OK if ok and all(r["passed"] for r in ok) else EXIT_FAIL
        cfg = _build_config(args.command, args)
    except ConfigError as exc:
        print(f"singulax: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    rep = run_experiment(cfg, args.out)
    for name, m in sorted(rep.metrics.items()):
        flag = {True: "PASS", False: "FAIL", None: "info"}[m.passed]
        tol = "" if m.tolerance is None else f" ({m.comparator} {m.tolerance:g})"
        print(f"{flag:4s}  {name} = {m.value:.6g}{tol}")
    print(f"report: {Path(args.out) / 'report.json'}")
    return EXIT_OK if rep.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

"""Command line: run experiments from JSON configs and compare results with targets.

    slekpz run CONFIG.json [--seed N] [--workers K] [--out DIR]
    slekpz report DIR [DIR ...] [--json FILE]

Config files look like

    {"schema_version": 1, "experiment": "spectral-check",
     "parameters": {"kappa": 4, "M": 2000}, "seed": 0, "workers": 1}

Command line flags override the seed and worker count in the file.  The
output directory is --out, else $SLEKPZ_OUT, else runs/<experiment>-<hash>.
Exit codes: 0 success, 2 invalid config, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import math
import os
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import experiments

SCHEMA_VERSION = 1
OUT_ENV = "SLEKPZ_OUT"
N_CRITERIA = 13


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    parameters: dict = field(default_factory=dict)
    seed: int = 0
    workers: int = 1
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, d) -> ExperimentConfig:
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        extra = set(d) - {"schema_version", "experiment", "parameters", "seed", "workers"}
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
        if d.get("experiment") not in experiments.RUNNERS:
            raise ConfigError(f"unknown experiment {d.get('experiment')!r}; "
                              f"choose from {sorted(experiments.RUNNERS)}")
        params = d.get("parameters", {})
        if not isinstance(params, dict):
            raise ConfigError("parameters must be an object")
        cfg = cls(d["experiment"], dict(params), d.get("seed", 0), d.get("workers", 1))
        cfg.check()
        return cfg

    def check(self):
        for name in ("seed", "workers"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < (1 if name == "workers" else 0):
                raise ConfigError(f"{name} must be a {'positive' if name == 'workers' else 'non-negative'} integer")
        try:
            experiments.params_for(self.experiment, self.parameters)
        except (ValueError, KeyError) as e:
            raise ConfigError(str(e)) from e

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "experiment": self.experiment,
                "parameters": self.parameters, "seed": self.seed, "workers": self.workers}

    def resolved(self) -> dict:
        return experiments.params_for(self.experiment, self.parameters)

    def hash(self) -> str:
        """Hash of the experiment, resolved parameters and seed (not the worker count)."""
        blob = json.dumps({"experiment": self.experiment, "parameters": _plain(self.resolved()),
                           "seed": self.seed}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return ExperimentConfig.from_dict(d)


def _plain(x):
    """JSON-safe copy: numpy scalars to Python, NaN/inf to None, keys to str."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_plain(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def run(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Execute one config and write CSV tables plus summary.json; returns the run record."""
    out = Path(out_dir or os.environ.get(OUT_ENV) or Path("runs") / f"{cfg.experiment}-{cfg.hash()}")
    out.mkdir(parents=True, exist_ok=True)
    start = _now()
    summary, tables = experiments.run_experiment(cfg.experiment, cfg.parameters, cfg.seed,
                                                 cfg.workers)
    files = {}
    for name, (header, rows) in tables.items():
        p = out / f"{name}.csv"
        write_table(p, header, rows)
        files[name] = str(p)
    record = {"config": cfg.to_dict(), "resolved_parameters": cfg.resolved(),
              "config_hash": cfg.hash(), "start": start, "end": _now(), "outputs": files,
              "summary": summary}
    with open(out / "summary.json", "w") as fh:
        json.dump(_plain(record), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return record


def collect(dirs):
    """Criterion rows from run directories; unreadable runs become SKIPPED rows."""
    rows, seen = [], set()
    for d in dirs:
        p = Path(d) / "summary.json"
        try:
            with open(p) as fh:
                rec = json.load(fh)
            crit = rec["summary"]["criteria"]
            exp = rec["config"]["experiment"]
        except (OSError, KeyError, TypeError, json.JSONDecodeError):
            rows.append({"id": None, "name": f"run {d}", "experiment": None, "status": "SKIPPED",
                         "observed": None, "target": None, "tolerance": "missing or unreadable run"})
            continue
        for c in crit:
            seen.add(c["id"])
            rows.append({"id": c["id"], "name": c["name"], "experiment": exp,
                         "status": "PASS" if c["passed"] else "FAIL", "observed": c["observed"],
                         "target": c["target"], "tolerance": c["tolerance"]})
    if dirs:
        for i in range(1, N_CRITERIA + 1):
            if i not in seen:
                rows.append({"id": i, "name": f"criterion {i}", "experiment": None,
                             "status": "SKIPPED", "observed": None, "target": None,
                             "tolerance": "no run covers it"})
    rows.sort(key=lambda r: (r["id"] is None, r["id"] or 0))
    return rows


def format_report(rows) -> str:
    def f(v):
        return "-" if v is None else f"{v:.6g}" if isinstance(v, float) else str(v)

    lines = [f"{'id':>3}  {'status':<7} {'observed':>12} {'target':>12}  {'tolerance':<28} name"]
    for r in rows:
        lines.append(f"{f(r['id']):>3}  {r['status']:<7} {f(r['observed']):>12} "
                     f"{f(r['target']):>12}  {r['tolerance']:<28} {r['name']}")
    return "\n".join(lines)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="slekpz", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--workers", type=int)
    r.add_argument("--out")
    rp = sub.add_parser("report", help="summarize finished runs")
    rp.add_argument("dirs", nargs="*")
    rp.add_argument("--json", dest="json_path", help="also write the table as JSON")
    args = ap.parse_args(argv)

    if args.command == "report":
        rows = collect(args.dirs)
        print(format_report(rows))
        if args.json_path:
            with open(args.json_path, "w") as fh:
                json.dump(_plain(rows), fh, indent=2)
                fh.write("\n")
        return 0

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.workers is not None:
            cfg.workers = args.workers
        cfg.check()
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        rec = run(cfg, args.out)
    except Exception as e:  # anything raised while sampling is a runtime failure
        traceback.print_exc()
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3
    out = Path(next(iter(rec["outputs"].values()), ".")).parent
    for c in rec["summary"]["criteria"]:
        print(f"{c['id']:>3} {'PASS' if c['passed'] else 'FAIL'}  {c['name']}: "
              f"observed {c['observed']:.6g}, target {c['target']:.6g} ({c['tolerance']})")
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

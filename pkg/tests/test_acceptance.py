"""Full-scale acceptance runs, one test per criterion.

Each experiment runs once at its default parameters (survival paths are
switched on for the spectral check) and its run directory is written under
runs/acceptance, so `slekpz report runs/acceptance/*` reproduces the table.
Set SLEKPZ_WORKERS to use more processes.  The whole suite takes just under
an hour on one core.
"""
import os
from pathlib import Path

import pytest

from slekpz import cli, experiments

OUT = Path(os.environ.get("SLEKPZ_ACCEPTANCE_OUT",
                          Path(__file__).resolve().parents[1] / "runs" / "acceptance"))
WORKERS = int(os.environ.get("SLEKPZ_WORKERS", "1"))

# experiment and parameter overrides that decide each criterion
PLAN = {
    1: ("spectral-check", {"survival_paths": 10 ** 6}),
    2: ("spectral-check", {"survival_paths": 10 ** 6}),
    3: ("spectral-check", {"survival_paths": 10 ** 6}),
    4: ("winding-variance", {}),
    5: ("winding-moments", {}),
    6: ("winding-variance", {}),
    7: ("scaling-check", {}),
    8: ("scaling-check", {}),
    9: ("sle-dimension", {}),
    10: ("flowline-square-scaling", {}),
    11: ("levelline-bound", {}),
    12: ("whitney-stats", {}),
    13: ("kpz-table", {}),
}

_runs = {}


def _run(experiment, overrides):
    if experiment not in _runs:
        cfg = cli.ExperimentConfig(experiment, dict(overrides), seed=0, workers=WORKERS)
        _runs[experiment] = cli.run(cfg, OUT / experiment)
    return _runs[experiment]


@pytest.mark.parametrize("cid", sorted(PLAN))
def test_criterion(cid, capsys):
    experiment, overrides = PLAN[cid]
    assert cid in experiments.COVERS[experiment]
    rows = [c for c in _run(experiment, overrides)["summary"]["criteria"] if c["id"] == cid]
    ok = bool(rows) and all(c["passed"] for c in rows)
    with capsys.disabled():
        print(f"\ncriterion {cid:>2} {'PASS' if ok else 'FAIL'}  [{experiment}]")
        for c in rows:
            print(f"    {'ok ' if c['passed'] else 'BAD'} {c['name']}: observed {c['observed']:.6g}, "
                  f"target {c['target']:.6g} ({c['tolerance']})")
    assert rows, f"{experiment} reported nothing for criterion {cid}"
    assert ok, "; ".join(f"{c['name']} observed {c['observed']:.6g}" for c in rows if not c["passed"])

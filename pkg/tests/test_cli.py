import csv
import json

import numpy as np
import pytest

from slekpz import cli, core, experiments


def write_cfg(path, experiment, parameters=None, seed=0, workers=1, **extra):
    d = {"schema_version": 1, "experiment": experiment, "parameters": parameters or {},
         "seed": seed, "workers": workers, **extra}
    path.write_text(json.dumps(d))
    return path


def test_config_round_trip_and_hash(tmp_path):
    p = write_cfg(tmp_path / "c.json", "kpz-table", {"gamma": 0.5}, seed=3)
    cfg = cli.load_config(p)
    assert cli.ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    h = cfg.hash()
    cfg.workers = 4
    assert cfg.hash() == h
    cfg.seed = 4
    assert cfg.hash() != h
    assert cfg.resolved()["kappa_points"] == experiments.DEFAULTS["kpz-table"]["kappa_points"]


@pytest.mark.parametrize("bad", [
    {"experiment": "nope"},
    {"parameters": {"kappa": 9.0}},
    {"parameters": {"kappas": [2.0, 8.0]}},
    {"parameters": {"gamma": 2.5}},
    {"parameters": {"M": 0}},
    {"parameters": {"unknown_key": 1}},
    {"seed": -1},
    {"workers": 0},
    {"schema_version": 2},
    {"extra_field": 1},
])
def test_invalid_configs_exit_2(tmp_path, bad):
    d = {"schema_version": 1, "experiment": "spectral-check", "parameters": {}, "seed": 0,
         "workers": 1}
    d.update(bad)
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(d))
    assert cli.main(["run", str(p), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_unreadable_config_exit_2(tmp_path):
    (tmp_path / "x.json").write_text("{not json")
    assert cli.main(["run", str(tmp_path / "x.json")]) == 2
    assert cli.main(["run", str(tmp_path / "missing.json")]) == 2


def test_runtime_failure_exit_3(tmp_path, monkeypatch):
    def boom(p, seed, workers):
        raise RuntimeError("sampler broke")

    monkeypatch.setitem(experiments.RUNNERS, "kpz-table", boom)
    p = write_cfg(tmp_path / "c.json", "kpz-table")
    assert cli.main(["run", str(p), "--out", str(tmp_path / "o")]) == 3


def test_kpz_table_run(tmp_path, capsys):
    p = write_cfg(tmp_path / "c.json", "kpz-table", {"gamma": 1.0, "kappa_points": 101})
    out = tmp_path / "out"
    assert cli.main(["run", str(p), "--out", str(out)]) == 0
    assert "PASS" in capsys.readouterr().out
    rows = list(csv.DictReader(open(out / "kpz_table.csv")))
    assert len(rows) == 101
    for r in rows:
        k, d = float(r["kappa"]), float(r["d"])
        assert d == 1 + k / 8
        assert float(r["q_kpz"]) == core.kpz_inverse(d, 1.0)
        assert float(r["q_flowline"]) <= float(r["q_kpz"])
    s = json.load(open(out / "summary.json"))
    assert s["config_hash"] == cli.load_config(p).hash()
    assert s["resolved_parameters"]["kappa_points"] == 101
    assert s["start"] <= s["end"]
    assert all(c["passed"] for c in s["summary"]["criteria"])


def test_spectral_check_run(tmp_path):
    p = write_cfg(tmp_path / "c.json", "spectral-check", {"kappa": 4, "M": 2000})
    out = tmp_path / "out"
    assert cli.main(["run", str(p), "--out", str(out)]) == 0
    s = json.load(open(out / "summary.json"))["summary"]
    assert s["lambda0_abs_error"] < 1e-3
    assert {c["id"] for c in s["criteria"]} == {1, 2}


def test_output_dir_precedence(tmp_path, monkeypatch):
    p = write_cfg(tmp_path / "c.json", "kpz-table", {"kappa_points": 11})
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert cli.main(["run", str(p)]) == 0
    assert (tmp_path / "env" / "summary.json").exists()
    monkeypatch.delenv(cli.OUT_ENV)
    assert cli.main(["run", str(p)]) == 0
    h = cli.load_config(p).hash()
    assert (tmp_path / "runs" / f"kpz-table-{h}" / "summary.json").exists()


def test_results_independent_of_workers(tmp_path):
    params = {"kappas": [2.0], "T": [6.0], "n_paths": 4000, "shard": 1000, "ks_samples": 0}
    outs = []
    for w in (1, 2):
        p = write_cfg(tmp_path / f"c{w}.json", "winding-variance", params, seed=5, workers=w)
        outs.append(tmp_path / f"o{w}")
        assert cli.main(["run", str(p), "--out", str(outs[-1])]) == 0
    files = sorted(f.name for f in outs[0].glob("*.csv"))
    assert files
    for f in files:
        assert (outs[0] / f).read_text() == (outs[1] / f).read_text()


def test_seed_flag_overrides_file(tmp_path):
    params = {"kappas": [2.0], "T": [6.0], "n_paths": 2000, "shard": 1000, "ks_samples": 0}
    p = write_cfg(tmp_path / "c.json", "winding-variance", params, seed=1)
    assert cli.main(["run", str(p), "--seed", "2", "--out", str(tmp_path / "a")]) == 0
    s = json.load(open(tmp_path / "a" / "summary.json"))
    assert s["config"]["seed"] == 2


def test_report(tmp_path, capsys):
    assert cli.collect([]) == []
    p = write_cfg(tmp_path / "c.json", "kpz-table", {"kappa_points": 51})
    cli.main(["run", str(p), "--out", str(tmp_path / "k")])
    capsys.readouterr()
    assert cli.main(["report", str(tmp_path / "k"), str(tmp_path / "gone"),
                     "--json", str(tmp_path / "r.json")]) == 0
    text = capsys.readouterr().out
    assert "PASS" in text and "SKIPPED" in text
    rows = json.load(open(tmp_path / "r.json"))
    by_id = {}
    for r in rows:
        by_id.setdefault(r["id"], []).append(r["status"])
    assert set(by_id[13]) == {"PASS"}
    assert by_id[1] == ["SKIPPED"]
    assert "SKIPPED" in by_id[None]
    assert {i for i in by_id if i is not None} == set(range(1, 14))


def test_plain_json_sanitizer():
    x = cli._plain({1: np.float64(np.nan), "a": [np.int64(2), np.bool_(True)], "b": (1.5,)})
    assert x == {"1": None, "a": [2, True], "b": [1.5]}
    assert cli._cell(0.1) == "0.10000000000000001"

import csv
import io
import json
import math

import numpy as np
import pytest

from lyari.cli import main
from lyari.config import CIF_SYMBOL_RATE, ConfigError, dump_scenario, from_dict, load_baseline, load_scenario
from lyari.lyari_optimizer import InfeasibleSlot
from lyari.sim import CSV_COLUMNS, SweepSpec, csv_text, fit, oracle_check, simulate, summarize, sweep, trend_violations
from lyari.source_dprd import DelayModel, FitError, SigmaModel, dcoe, qp_to_qstep, sigma

MINIMAL = {
    "sigma": {"a1": 8.0, "a2": 0.25, "a3": 45.0, "a4": 0.06},
    "delay": {"d1": 1.2, "d2": 0.98, "d3": 0.04, "d4": 0.02},
}


def write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc), encoding="utf-8")
    return p


# ---------------------------------------------------------------------------
# configuration


def test_baseline_constants(baseline):
    o = baseline.optimizer
    assert (o.V, o.rho1, o.rho2, baseline.T) == (4.0, 2.0, 0.01, 40)
    rd = baseline.system.rd
    assert (rd.C, rd.K, rd.mu) == (0.0015, 0.55, 0.1)
    assert baseline.system.budget.Pmax == 2000.0
    assert baseline.system.budget.Pe == pytest.approx(1300.0, rel=1e-12)


def test_round_trip(tmp_path, baseline):
    text = dump_scenario(baseline)
    again = load_scenario(write(tmp_path, json.loads(text)))
    assert dump_scenario(again) == text
    assert again.system == baseline.system and again.optimizer == baseline.optimizer


def test_default_symbol_rate():
    sc = from_dict(dict(MINIMAL))
    assert sc.system.symbol_rate == CIF_SYMBOL_RATE == 352 * 288 * 30


@pytest.mark.parametrize(
    "patch, where",
    [
        ({"optimizer": {"d_max_trans": 3.0}}, "optimizer.d_max_trans"),
        ({"bogus": 1}, "<root>"),
        ({"optimizer": {"V": -1}}, "optimizer.V"),
        ({"power": {"Pc": 1900.0}}, "optimizer.Pmax"),
        ({"sigma": {"a1": 1.0}}, "sigma"),
    ],
)
def test_config_errors(patch, where):
    doc = dict(MINIMAL, **patch)
    with pytest.raises(ConfigError) as info:
        from_dict(doc)
    assert info.value.path == where


def test_unreadable_config(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError, match="line 1"):
        load_scenario(p)


# ---------------------------------------------------------------------------
# simulate


def test_csv_deterministic(tmp_path, baseline):
    a = simulate(baseline, tmp_path / "a", T=8)
    b = simulate(baseline, tmp_path / "b", T=8)
    assert a.csv_path.read_bytes() == b.csv_path.read_bytes()
    assert a.summary_path.read_bytes() == b.summary_path.read_bytes()
    header = a.csv_path.read_text().splitlines()[0].split(",")
    assert tuple(header) == CSV_COLUMNS


def test_csv_summary_consistency(tmp_path, baseline):
    art = simulate(baseline, tmp_path, T=12)
    with open(art.csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    re = np.array([float(r["re"]) for r in rows])
    de = np.array([float(r["de"]) for r in rows])
    pt = np.array([float(r["pt_mw"]) for r in rows])
    s = json.loads(art.summary_path.read_text())
    assert s["T"] == len(rows) == 12
    for got, want in ((s["re_mean"], re.mean()), (s["re_var"], re.var()), (s["sd"], de.mean()),
                      (s["pt_mean"], pt.mean()), (s["final_S_X"], float(rows[-1]["S_X"]))):
        assert got == pytest.approx(want, rel=1e-12, abs=1e-15)


def test_csv_values_round_trip(baseline):
    art = simulate(baseline, T=3)
    text = csv_text(art.rows)
    rows = list(csv.DictReader(io.StringIO(text)))
    for r, res in zip(rows, art.results):
        assert float(r["pt_mw"]) == res.decision.Pt
        assert int(r["lambda"]) == res.decision.lam
        assert r["oracle_gap"] == ""


def test_partial_output_on_infeasible(tmp_path, baseline):
    # slot 1 is feasible at this cap, later slots farther out are not
    sc = baseline.with_overrides(**{"optimizer.d_max_trans": 0.04})
    with pytest.raises(InfeasibleSlot) as info:
        simulate(sc, tmp_path)
    t = info.value.t
    assert t > 1
    rows = (tmp_path / "slots.csv").read_text().splitlines()
    assert len(rows) == t
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["error"].startswith(f"slot {t}")


def test_pt_follows_distance(baseline_run):
    pt = [r.decision.Pt for r in baseline_run]
    dis = [r.geometry.dis for r in baseline_run]
    assert np.corrcoef(pt, dis)[0, 1] > 0.8


def test_oracle_columns(baseline):
    art = simulate(baseline, T=3, oracle=True)
    rows = list(csv.DictReader(io.StringIO(csv_text(art.rows))))
    assert all(r["oracle_gap"] != "" for r in rows)
    assert max(r.oracle_gap for r in art.results) <= 0.05


# ---------------------------------------------------------------------------
# sweeps


def test_single_cell_sweep_is_simulate(baseline):
    sc = baseline.with_overrides(T=6)
    (row,) = sweep(sc, SweepSpec.of({"d_max": [2.8]}))
    art = simulate(sc)
    assert row["status"] == "ok"
    assert row["sd"] == art.summary["sd"] and row["pt_mean"] == art.summary["pt_mean"]


def test_sweep_records_failures(tmp_path, baseline):
    sc = baseline.with_overrides(T=3)
    table = sweep(sc, SweepSpec.of({"d_max_trans": [0.01, 0.2]}), tmp_path)
    assert table[0]["status"].startswith("failed") and table[1]["status"] == "ok"
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert len(lines) == 3
    assert trend_violations([dict(r, d_max=2.8) for r in table], "d_max_trans", "d_max", "increasing") != []


def test_sweep_spec_validation():
    with pytest.raises(ValueError):
        SweepSpec.of({})
    with pytest.raises(ValueError):
        SweepSpec.of({"speed": [1.0]})
    with pytest.raises(ValueError):
        SweepSpec.of({"V": [math.nan]})


def test_trend_violations():
    table = [{"a": 1, "g": 0, "sd": 1.0}, {"a": 2, "g": 0, "sd": 2.0}, {"a": 3, "g": 0, "sd": 1.5}]
    assert trend_violations(table, "a", "g", "increasing") == [(0, 2, 3, -0.5)]
    assert trend_violations(table, "a", "g", "decreasing") == [(0, 1, 2, 1.0)]


# ---------------------------------------------------------------------------
# fitting


def paper_grid_files(tmp_path, sig=SigmaModel(5.0, 0.1, 2.0, 0.05), dm=DelayModel(1.2, 0.98, 0.04, 0.02)):
    s = tmp_path / "sigma.csv"
    with open(s, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "qp", "sigma"])
        for lam in (1, 4, 8, 16, 32):
            for qp in (18, 24, 30, 36, 42):
                w.writerow([lam, qp, repr(sigma(sig, lam, qp_to_qstep(qp)))])
    d = tmp_path / "dcoe.csv"
    with open(d, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["q", "dcoe"])
        for qp in range(18, 52, 3):
            q = qp_to_qstep(qp)
            w.writerow([repr(q), repr(dcoe(dm, q))])
    return s, d


def test_fit_round_trip(tmp_path):
    s, d = paper_grid_files(tmp_path)
    doc = fit(s, d, tmp_path)
    assert doc["sigma"]["samples"] == 25
    for k, v in zip(("a1", "a2", "a3", "a4"), (5.0, 0.1, 2.0, 0.05)):
        assert doc["sigma"][k] == pytest.approx(v, rel=1e-4)
    # d2 + d4 = 1 here, which is the normalization the fit reports in
    for k, v in zip(("d1", "d2", "d3", "d4"), (1.2, 0.98, 0.04, 0.02)):
        assert doc["delay"][k] == pytest.approx(v, rel=1e-4)
    assert json.loads((tmp_path / "fit.json").read_text()) == json.loads(json.dumps(doc))


def test_fit_names_bad_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("lambda,qp,sigma\n1,18,3.0\n4,x,2.0\n", encoding="utf-8")
    with pytest.raises(FitError, match=r"bad.csv:3"):
        fit(p)


def test_config_with_sample_files(tmp_path):
    s, d = paper_grid_files(tmp_path)
    sc = load_scenario(write(tmp_path, {"sigma": {"samples": "sigma.csv"}, "delay": {"samples": "dcoe.csv"}}))
    assert sc.system.sigma.a1 == pytest.approx(5.0, rel=1e-4)
    assert set(sc.fits) == {"sigma", "delay"}


# ---------------------------------------------------------------------------
# oracle check and CLI


def test_oracle_check_degenerate(tmp_path, baseline):
    sc = baseline.with_overrides(**{"optimizer.V": 0.0, "queue.initial": 0.0})
    rep = oracle_check(sc, tmp_path, T=1)
    assert rep["max_gap"] == 0.0
    assert (tmp_path / "oracle_report.json").exists()


def test_cli_exit_codes(tmp_path, capsys):
    base = json.loads(dump_scenario(load_baseline()))
    ok = write(tmp_path, dict(base, T=2), "ok.json")
    assert main(["simulate", "--config", str(ok), "--out", str(tmp_path / "o1"), "--seed", "3"]) == 0
    assert json.loads((tmp_path / "o1" / "summary.json").read_text())["seed"] == 3

    bad = write(tmp_path, dict(base, optimizer=dict(base["optimizer"], d_max_trans=5.0)), "bad.json")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o2")]) == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == 2

    inf = write(tmp_path, dict(base, optimizer=dict(base["optimizer"], d_max_trans=0.01)), "inf.json")
    assert main(["simulate", "--config", str(inf), "--out", str(tmp_path / "o3")]) == 3
    assert (tmp_path / "o3" / "summary.json").exists()

    junk = tmp_path / "junk.csv"
    junk.write_text("lambda,qp,sigma\n1,18,nan\n", encoding="utf-8")
    assert main(["fit", "--sigma-samples", str(junk), "--out", str(tmp_path / "o4")]) == 4
    assert "junk.csv:2" in capsys.readouterr().err


def test_cli_sweep_and_fit(tmp_path):
    base = json.loads(dump_scenario(load_baseline()))
    doc = dict(base, T=2, sweep={"axes": {"d_max": [2.8, 3.0]}})
    cfg = write(tmp_path, doc)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "sw")]) == 0
    assert len((tmp_path / "sw" / "sweep.csv").read_text().splitlines()) == 3
    s, d = paper_grid_files(tmp_path)
    assert main(["fit", "--sigma-samples", str(s), "--dcoe-samples", str(d), "--out", str(tmp_path / "f")]) == 0
    assert main(["oracle-check", "--T", "1", "--out", str(tmp_path / "oc")]) == 0


def test_shipped_schema_matches():
    from pathlib import Path

    from lyari.config import SCHEMA

    doc = json.loads((Path(__file__).parents[1] / "docs" / "scenario.schema.json").read_text())
    doc.pop("$schema")
    doc.pop("title")
    assert doc == json.loads(json.dumps(SCHEMA))

"""Simulation driver: horizon runs, parameter sweeps, coefficient fitting, oracle checks."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ScenarioConfig
from .lyari_optimizer import InfeasibleSlot, SlotResult, run_horizon, stability_metric
from .oracle import GridSpec, oracle_gap, oracle_slot
from .source_dprd import fit_dcoe_model, fit_sigma_model, read_samples

CSV_COLUMNS = (
    "t", "x_uav", "y_uav", "dis", "L_atg_db", "lambda", "qp", "q_step", "pt_mw", "re", "rc", "de", "dc",
    "ptot", "t_send", "d_code", "X", "S_X", "iterations", "oracle_gap",
)

SWEEP_AXES = ("d_max", "d_max_trans", "rho1", "rho2", "V")


def fmt(v) -> str:
    """Shortest round-trip text for numbers; empty for missing values."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class RunArtifact:
    results: list[SlotResult]
    rows: list[dict]
    summary: dict
    error: str | None = None
    csv_path: Path | None = None
    summary_path: Path | None = None


def slot_rows(results: Sequence[SlotResult]) -> list[dict]:
    hist = [r.X_before for r in results]
    rows = []
    for i, r in enumerate(results):
        g = r.geometry
        rows.append({
            "t": r.t,
            "x_uav": float(g.position[0]),
            "y_uav": float(g.position[1]),
            "dis": g.dis,
            "L_atg_db": g.path_loss_db,
            "lambda": int(r.decision.lam),
            "qp": r.qp,
            "q_step": r.decision.Q,
            "pt_mw": r.decision.Pt,
            "re": r.re,
            "rc": r.rc,
            "de": r.de,
            "dc": r.dc,
            "ptot": r.ptot,
            "t_send": r.t_send,
            "d_code": r.d_code,
            "X": r.X_before,
            "S_X": stability_metric(hist, i + 1),
            "iterations": r.iterations,
            "oracle_gap": r.oracle_gap,
        })
    return rows


def summarize(rows: Sequence[dict], name: str = "", extra: dict | None = None) -> dict:
    """Summary statistics, computed only from the CSV row values."""
    out: dict = {"name": name, "T": len(rows)}
    if rows:
        re = np.array([r["re"] for r in rows])
        de = np.array([r["de"] for r in rows])
        pt = np.array([r["pt_mw"] for r in rows])
        ptot = np.array([r["ptot"] for r in rows])
        lam = [r["lambda"] for r in rows]
        vals, counts = np.unique(lam, return_counts=True)
        out.update({
            "final_S_X": rows[-1]["S_X"],
            "final_X": rows[-1]["X"],
            "re_mean": float(np.mean(re)),
            "re_var": float(np.var(re)),
            "sd": float(np.mean(de)),
            "de_var": float(np.var(de)),
            "pt_mean": float(np.mean(pt)),
            "ptot_mean": float(np.mean(ptot)),
            "lambda_mode": float(vals[np.argmax(counts)]),
            "qp_mean": float(np.mean([r["qp"] for r in rows])),
            "iterations_max": int(max(r["iterations"] for r in rows)),
        })
        gaps = [r["oracle_gap"] for r in rows if r["oracle_gap"] is not None]
        if gaps:
            out["oracle_gap_max"] = float(max(gaps))
            out["oracle_gap_mean"] = float(np.mean(gaps))
            out["oracle_gap_min"] = float(min(gaps))
    if extra:
        out.update(extra)
    return out


def write_csv(rows: Sequence[dict], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(csv_text(rows))


def csv_text(rows: Sequence[dict], columns: Sequence[str] = CSV_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"not serializable: {type(v)}")


def write_json(doc: dict, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def simulate(scenario: ScenarioConfig, out_dir: str | Path | None = None, oracle: bool | None = None,
             T: int | None = None, seed: int | None = None) -> RunArtifact:
    """Run the horizon; write the per-slot CSV and summary JSON when ``out_dir`` is given.

    On an infeasible slot the slots solved so far are still written, the summary
    records the diagnostic, and the exception is re-raised.
    """
    system, cfg = scenario.system, scenario.optimizer
    use_oracle = scenario.oracle["enabled"] if oracle is None else oracle
    grid = (
        GridSpec.default(system, cfg, scenario.oracle["pt_points"], scenario.oracle["pt_spacing"])
        if use_oracle else None
    )
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    dump = bool(scenario.oracle.get("dump_landscape")) and out is not None

    def attach(res: SlotResult):
        if grid is None:
            return
        land = out / f"landscape_t{res.t:04d}.csv" if dump else None
        ref = oracle_slot(system, cfg, res.geometry.path_loss, max(res.X_before, 0.0), grid, land)
        res.oracle_gap = oracle_gap(res, ref)

    results: list[SlotResult] = []
    error = None
    exc_out = None

    def collect(res):
        attach(res)
        results.append(res)

    try:
        run_horizon(system, cfg, T or scenario.T, scenario.X1, on_slot=collect)
    except InfeasibleSlot as exc:
        error = f"slot {exc.t}: {exc} (binding: {', '.join(exc.binding)})"
        exc_out = exc
    rows = slot_rows(results)
    extra = {"seed": seed} if seed is not None else {}
    if error:
        extra["error"] = error
    summary = summarize(rows, scenario.name, extra)
    art = RunArtifact(results, rows, summary, error)
    if out is not None:
        art.csv_path = out / scenario.raw["output"]["csv"]
        art.summary_path = out / scenario.raw["output"]["summary"]
        write_csv(rows, art.csv_path)
        write_json(summary, art.summary_path)
    if exc_out is not None:
        raise exc_out
    return art


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepSpec:
    axes: tuple[tuple[str, tuple[float, ...]], ...]

    def __post_init__(self):
        if not self.axes:
            raise ValueError("a sweep needs at least one axis")
        for name, values in self.axes:
            if name not in SWEEP_AXES:
                raise ValueError(f"unknown sweep axis {name!r}")
            if not values or not all(math.isfinite(v) for v in values):
                raise ValueError(f"axis {name} needs finite values")

    @classmethod
    def of(cls, axes: dict[str, Sequence[float]]) -> SweepSpec:
        return cls(tuple((k, tuple(float(v) for v in vals)) for k, vals in axes.items()))

    def cells(self):
        names = [a for a, _ in self.axes]
        for combo in itertools.product(*(v for _, v in self.axes)):
            yield dict(zip(names, combo))


def _run_cell(args):
    scenario, cell = args
    over = {f"optimizer.{k}": v for k, v in cell.items()}
    row = dict(cell)
    try:
        sc = scenario.with_overrides(**over)
        art = simulate(sc)
    except Exception as exc:  # recorded per cell, the sweep goes on
        row.update(status=f"failed: {exc}", sd=None, pt_mean=None, ptot_mean=None, objective_mean=None,
                   final_S_X=None)
        return row
    res = art.results
    row.update(
        status="ok",
        sd=art.summary["sd"],
        pt_mean=art.summary["pt_mean"],
        ptot_mean=art.summary["ptot_mean"],
        objective_mean=float(np.mean([r.penalty for r in res])),
        final_S_X=art.summary["final_S_X"],
    )
    return row


def sweep(scenario: ScenarioConfig, spec: SweepSpec, out_dir: str | Path | None = None,
          workers: int = 1) -> list[dict]:
    """One horizon run per grid cell; SD is the time average of the coding distortion."""
    jobs = [(scenario, cell) for cell in spec.cells()]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            table = list(ex.map(_run_cell, jobs))
    else:
        table = [_run_cell(j) for j in jobs]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = [a for a, _ in spec.axes] + ["status", "sd", "pt_mean", "ptot_mean", "objective_mean", "final_S_X"]
        with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(cols)
            for row in table:
                w.writerow([row[c] if c == "status" else fmt(row.get(c)) for c in cols])
    return table


def trend_violations(table: Sequence[dict], along: str, group: str, direction: str,
                     metric: str = "sd") -> list[tuple]:
    """Adjacent pairs where ``metric`` moves against ``direction`` along one axis.

    ``direction`` is ``"increasing"`` (non-decreasing expected) or ``"decreasing"``.
    Ties are allowed.  Failed cells count as violations.
    """
    out = []
    groups: dict = {}
    for row in table:
        groups.setdefault(row[group], []).append(row)
    for g, rows in groups.items():
        rows = sorted(rows, key=lambda r: r[along])
        for a, b in zip(rows, rows[1:]):
            if a[metric] is None or b[metric] is None:
                out.append((g, a[along], b[along], "failed cell"))
                continue
            if direction == "increasing" and b[metric] < a[metric]:
                out.append((g, a[along], b[along], b[metric] - a[metric]))
            if direction == "decreasing" and b[metric] > a[metric]:
                out.append((g, a[along], b[along], b[metric] - a[metric]))
    return out


# ---------------------------------------------------------------------------
# fitting and oracle checks


def fit(sigma_csv: str | Path | None = None, dcoe_csv: str | Path | None = None,
        out_dir: str | Path | None = None) -> dict:
    """Fit the residual-spread and delay-coefficient models from sample CSV files."""
    if sigma_csv is None and dcoe_csv is None:
        raise ValueError("give at least one sample file")
    doc: dict = {}
    if sigma_csv is not None:
        rows = read_samples(sigma_csv, ("lambda", "qp", "sigma"))
        f = fit_sigma_model(rows)
        m = f.model
        doc["sigma"] = {"a1": m.a1, "a2": m.a2, "a3": m.a3, "a4": m.a4, "rms": f.rms,
                        "samples": len(rows), "violations": f.violations}
    if dcoe_csv is not None:
        rows = read_samples(dcoe_csv, ("q", "dcoe"))
        f = fit_dcoe_model(rows)
        doc["delay"] = {"d1": f.d1, "d2": f.d2, "d3": f.d3, "d4": f.d4, "rms": f.rms,
                        "samples": len(rows), "degenerate": f.degenerate}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(doc, out / "fit.json")
    return doc


def oracle_check(scenario: ScenarioConfig, out_dir: str | Path | None = None, T: int | None = None) -> dict:
    """Run with a per-slot grid oracle and report the relative gaps."""
    art = simulate(scenario, out_dir, oracle=True, T=T)
    gaps = [r.oracle_gap for r in art.results]
    report = {
        "name": scenario.name,
        "T": len(gaps),
        "max_gap": float(max(gaps)),
        "mean_gap": float(np.mean(gaps)),
        "min_gap": float(min(gaps)),
        "gaps": [float(g) for g in gaps],
    }
    if out_dir is not None:
        write_json(report, Path(out_dir) / "oracle_report.json")
    return report

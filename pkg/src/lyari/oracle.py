"""Brute-force reference for the per-slot problem.

Evaluates the drift-plus-penalty objective exactly on a (lambda, QP, Pt) grid
with the raw models and checks every per-slot constraint directly.  Nothing
here touches the convexified programs, so it is an independent check of the
alternating solver.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erfc

from . import kernels
from .lyari_optimizer import OptimizerConfig, SlotResult, SystemModel
from .source_dprd import SQRT2, qp_to_qstep


class OracleInfeasible(RuntimeError):
    """Empty feasible grid; ``violations`` counts points breaking each constraint."""

    def __init__(self, violations: dict[str, int], n_points: int):
        parts = ", ".join(f"{k}: {v}/{n_points}" for k, v in violations.items())
        super().__init__(f"no feasible grid point ({parts})")
        self.violations = violations
        self.n_points = n_points


@dataclass(frozen=True)
class GridSpec:
    lambdas: tuple[float, ...]
    qps: tuple[float, ...]
    pts: tuple[float, ...]

    def __post_init__(self):
        if not self.lambdas or not self.qps or not self.pts:
            raise ValueError("grid axes must be non-empty")

    @property
    def size(self) -> int:
        return len(self.lambdas) * len(self.qps) * len(self.pts)

    @classmethod
    def default(cls, system: SystemModel, cfg: OptimizerConfig, pt_points: int = 200,
                spacing: str = "log") -> GridSpec:
        lam = tuple(float(v) for v in range(math.ceil(cfg.lam_box[0]), math.floor(cfg.lam_box[1]) + 1))
        qps = tuple(float(v) for v in range(math.ceil(cfg.qp_box[0]), math.floor(cfg.qp_box[1]) + 1))
        hi = system.budget.pt_max
        lo = min(cfg.pt_floor, hi)
        if spacing == "log":
            pts = np.geomspace(lo, hi, pt_points)
        else:
            pts = np.linspace(lo, hi, pt_points)
        return cls(lam, qps, tuple(float(p) for p in pts))

    def check_within(self, system: SystemModel, cfg: OptimizerConfig) -> None:
        if min(self.lambdas) < cfg.lam_box[0] or max(self.lambdas) > cfg.lam_box[1]:
            raise ValueError("lambda grid leaves the configured box")
        if min(self.qps) < cfg.qp_box[0] or max(self.qps) > cfg.qp_box[1]:
            raise ValueError("QP grid leaves the configured box")
        if min(self.pts) < 0:
            raise ValueError("Pt grid has negative powers")


@dataclass(frozen=True)
class OracleResult:
    lam: float
    qp: float
    Q: float
    Pt: float
    objective: float
    n_feasible: int
    n_points: int


def _tables(system: SystemModel, cfg: OptimizerConfig, path_loss: float, grid: GridSpec):
    lam = np.asarray(grid.lambdas, float)
    Q = np.array([qp_to_qstep(q) for q in grid.qps])
    pt = np.asarray(grid.pts, float)
    s = system.sigma
    L, QQ = np.meshgrid(lam, Q, indexing="ij")
    sig = s.a1 * np.exp(-s.a2 * L) + s.a3 + s.a4 * QQ
    if np.any(sig <= 0):
        raise ValueError("sigma model is not positive on the grid")
    re = kernels.entropy_rate_batch(SQRT2 * QQ / sig, system.rd.mu)
    de = system.rd.C * re ** (-system.rd.K)
    dm = system.delay
    dly = system.frames_per_slot * (2.0 * L + 1.0) ** 2 * dm.d1 * (dm.d2 * np.exp(-dm.d3 * QQ) + dm.d4)
    snr = pt / (path_loss * system.tx.Pn_noise)
    rc = np.log2(1.0 + snr)
    dc = 0.5 * erfc(np.sqrt(snr))
    with np.errstate(divide="ignore"):
        tsend = np.where(rc > 0, system.tx.L / (system.tx.B * rc), np.inf)
    ptot = system.budget.Pc + system.budget.Pe + pt
    re_term = re * system.symbol_rate / system.rate_unit
    rc_term = system.tx.B * rc / system.rate_unit
    return lam, Q, pt, re_term, de, dly, rc_term, dc, ptot, tsend


def oracle_slot(system: SystemModel, cfg: OptimizerConfig, path_loss: float, queue_plus: float,
                grid: GridSpec, landscape: str | Path | None = None) -> OracleResult:
    """Best feasible grid point of the per-slot objective; ties go to the smallest (lambda, QP, Pt)."""
    lam, Q, pt, re_term, de, dly, rc_term, dc, ptot, tsend = _tables(system, cfg, path_loss, grid)
    idx, obj, n_feas, n_t, n_d, n_p = kernels.grid_search(
        float(queue_plus), re_term, de, dly, rc_term, dc, ptot, tsend,
        cfg.V, cfg.rho1, cfg.rho2, cfg.d_max, cfg.d_max_trans, system.budget.Pmax,
    )
    if landscape is not None:
        _dump_landscape(landscape, grid, queue_plus, cfg, re_term, de, dly, rc_term, dc, ptot, tsend, system)
    if idx < 0:
        raise OracleInfeasible(
            {"transmit-delay cap": n_t, "end-to-end delay cap": n_d, "power budget": n_p}, grid.size
        )
    i, rem = divmod(idx, len(Q) * len(pt))
    j, k = divmod(rem, len(pt))
    return OracleResult(
        lam=float(lam[i]), qp=float(grid.qps[j]), Q=float(Q[j]), Pt=float(pt[k]),
        objective=float(obj), n_feasible=int(n_feas), n_points=grid.size,
    )


def _dump_landscape(path, grid, queue_plus, cfg, re_term, de, dly, rc_term, dc, ptot, tsend, system):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "qp", "pt_mw", "objective"])
        for i, lv in enumerate(grid.lambdas):
            for j, qv in enumerate(grid.qps):
                for k, pv in enumerate(grid.pts):
                    if tsend[k] > cfg.d_max_trans or dly[i, j] + tsend[k] > cfg.d_max or ptot[k] > system.budget.Pmax:
                        continue
                    o = queue_plus * (re_term[i, j] - rc_term[k]) + cfg.V * (
                        de[i, j] + cfg.rho1 * dc[k] + cfg.rho2 * ptot[k]
                    )
                    w.writerow([repr(lv), repr(qv), repr(pv), repr(float(o))])


def oracle_gap(lyari_result: SlotResult, oracle_result: OracleResult) -> float:
    """Relative excess of the alternating solver over the grid optimum."""
    if not lyari_result.feasible:
        raise ValueError("gap undefined: the slot decision violates a constraint")
    ref = oracle_result.objective
    return (lyari_result.surrogate - ref) / max(abs(ref), 1e-12)

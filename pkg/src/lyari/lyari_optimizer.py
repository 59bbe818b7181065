"""Per-slot drift-plus-penalty control with alternating convexified subproblems.

Each slot observes the virtual queue, then alternates between the
quantization-step program and the joint power / search-range program, each
rebuilt around the current iterate.  A candidate is only accepted if the true
per-slot objective does not increase; otherwise a line search on the segment
between the iterate and the candidate picks the best point.  After the loop the
search range is rounded to an integer and the queue is advanced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .atg_channel import ChannelEnvironment, SlotGeometry, TrajectoryConfig, slot_geometry
from .channel_dprd import (
    PowerBudget,
    TransmissionModel,
    channel_distortion,
    data_rate,
    sending_delay,
    snr,
)
from .conic_forms import (
    EQ,
    EXP,
    LEQ,
    RQUAD,
    ConicProgram,
    LinearizationPoint,
    ProgramError,
    build_power_lambda_subproblem,
    build_Q_subproblem,
    exp_cone_violation,
    q_lower_bound,
    rquad_cone_violation,
)
from .source_dprd import (
    DecisionTriple,
    DelayModel,
    PowerModel,
    RateDistortionModel,
    SigmaModel,
    coding_bitrate,
    coding_delay,
    coding_distortion,
    coding_power,
    dcoe,
    qp_to_qstep,
    qstep_to_qp_continuous,
)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class InfeasibleSlot(RuntimeError):
    """No decision satisfies the per-slot constraints."""

    def __init__(self, message: str, binding: Sequence[str] = (), t: int | None = None):
        super().__init__(message)
        self.binding = tuple(binding)
        self.t = t


class SolverError(RuntimeError):
    """The subproblem solver did not produce a usable point."""


class InfeasibleProgram(SolverError):
    def __init__(self, message: str, binding: Sequence[str] = ()):
        super().__init__(message)
        self.binding = tuple(binding)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class OptimizerConfig:
    V: float = 4.0
    rho1: float = 2.0
    rho2: float = 0.01
    d_max: float = 2.8
    d_max_trans: float = 0.2
    Pmax: float = 2000.0
    r_max: int = 30
    conv_tol: float = 1e-5
    lam_box: tuple[float, float] = (1.0, 32.0)
    qp_box: tuple[float, float] = (18.0, 51.0)
    pt_floor: float = 1.0
    initial: DecisionTriple = DecisionTriple(4.0, qp_to_qstep(30), 100.0)
    # transmit delay the Q program budgets for: "reserve" uses the d_max_trans
    # cap, "previous" uses t_send at the current power iterate
    tsend_mode: str = "reserve"
    backend: str = "reference"

    def __post_init__(self):
        if self.V < 0 or self.rho1 < 0 or self.rho2 < 0:
            raise ValueError("V, rho1 and rho2 must be non-negative")
        if not 0 < self.d_max_trans <= self.d_max:
            raise ValueError("need 0 < d_max_trans <= d_max")
        if self.r_max < 1 or not self.conv_tol > 0:
            raise ValueError("need r_max >= 1 and conv_tol > 0")
        if not 1 <= self.lam_box[0] <= self.lam_box[1]:
            raise ValueError("search-range box must satisfy 1 <= lo <= hi")
        if not 0 <= self.qp_box[0] <= self.qp_box[1] <= 51:
            raise ValueError("QP box must lie in [0, 51]")
        if self.pt_floor <= 0:
            raise ValueError("pt_floor must be positive")
        if self.tsend_mode not in ("reserve", "previous"):
            raise ValueError("tsend_mode must be 'reserve' or 'previous'")
        if self.backend not in ("reference", "clarabel"):
            raise ValueError("backend must be 'reference' or 'clarabel'")

    @property
    def q_box(self) -> tuple[float, float]:
        return qp_to_qstep(self.qp_box[0]), qp_to_qstep(self.qp_box[1])


@dataclass(frozen=True)
class SystemModel:
    """Every model handle one slot needs, plus rate scaling.

    Queue quantities are expressed in ``rate_unit`` bits per second: the source
    rate is ``R_e * symbol_rate / rate_unit`` and the channel rate
    ``B * R_c / rate_unit``.
    """

    env: ChannelEnvironment
    traj: TrajectoryConfig
    tx: TransmissionModel
    sigma: SigmaModel
    rd: RateDistortionModel
    delay: DelayModel
    power: PowerModel
    budget: PowerBudget
    symbol_rate: float = 352 * 288 * 30
    rate_unit: float = 1e8
    frames_per_slot: float = 1.0

    @property
    def Pe(self) -> float:
        return coding_power(self.power)


# ---------------------------------------------------------------------------
# virtual queue and Lyapunov bound


@dataclass(frozen=True)
class VirtualQueue:
    X: float = 0.0
    history: tuple[float, ...] = ()

    @property
    def plus(self) -> float:
        return max(self.X, 0.0)


def queue_update(q: VirtualQueue, re_rate: float, b_rc_rate: float) -> VirtualQueue:
    """Advance the queue by one slot; ``history`` records every value held so far."""
    hist = q.history if q.history else (q.X,)
    x_next = q.X + re_rate - b_rc_rate
    return VirtualQueue(x_next, hist + (x_next,))


def stability_metric(history: Sequence[float], t: int) -> float:
    """Running maximum of the positive queue part over the first ``t`` slots, divided by ``t``."""
    if t < 1:
        raise ValueError("t starts at 1")
    if t > len(history):
        raise ValueError("history shorter than t")
    return max(max(x, 0.0) for x in history[:t]) / t


def lyapunov(x: float) -> float:
    return 0.5 * max(x, 0.0) ** 2


def drift_penalty_upper_bound(queue_plus, Re, B_Rc, De, Dc, Ptot, V, rho1, rho2, Rc_max) -> float:
    return queue_plus * (Re - B_Rc) + 0.5 * Rc_max**2 + V * (De + rho1 * Dc + rho2 * Ptot)


def drift_plus_penalty(X, Re, B_Rc, De, Dc, Ptot, V, rho1, rho2) -> float:
    """Actual one-slot drift of ``0.5 [X]+^2`` plus the weighted penalty."""
    return lyapunov(X + Re - B_Rc) - lyapunov(X) + V * (De + rho1 * Dc + rho2 * Ptot)


# ---------------------------------------------------------------------------
# raw per-slot evaluation


@dataclass(frozen=True)
class SlotMetrics:
    re: float
    rc: float
    de: float
    dc: float
    ptot: float
    t_send: float
    d_code: float
    penalty: float
    surrogate: float
    ok_trans: bool
    ok_delay: bool
    ok_power: bool

    @property
    def feasible(self) -> bool:
        return self.ok_trans and self.ok_delay and self.ok_power

    def binding(self) -> list[str]:
        out = []
        if not self.ok_trans:
            out.append("transmit-delay cap")
        if not self.ok_delay:
            out.append("end-to-end delay cap")
        if not self.ok_power:
            out.append("power budget")
        return out


FEAS_TOL = 1e-12


def evaluate_slot(system: SystemModel, cfg: OptimizerConfig, path_loss: float, queue_plus: float,
                  d: DecisionTriple) -> SlotMetrics:
    """Raw-model objective and constraint checks for one decision."""
    re = coding_bitrate(system.sigma, system.rd, d.lam, d.Q)
    s = snr(d.Pt, path_loss, system.tx.Pn_noise)
    rc = data_rate(s)
    de = coding_distortion(system.rd, re)
    dc = channel_distortion(d.Pt, path_loss, system.tx.Pn_noise)
    ptot = system.budget.Pc + system.budget.Pe + d.Pt
    t_send = sending_delay(system.tx.L, system.tx.B, rc) if rc > 0 else math.inf
    d_code = system.frames_per_slot * coding_delay(system.delay, d.lam, d.Q)
    penalty = de + cfg.rho1 * dc + cfg.rho2 * ptot
    queue_term = queue_plus * (re * system.symbol_rate - system.tx.B * rc) / system.rate_unit
    return SlotMetrics(
        re=re, rc=rc, de=de, dc=dc, ptot=ptot, t_send=t_send, d_code=d_code,
        penalty=penalty,
        surrogate=queue_term + cfg.V * penalty,
        ok_trans=t_send <= cfg.d_max_trans * (1 + FEAS_TOL),
        ok_delay=d_code + t_send <= cfg.d_max * (1 + FEAS_TOL),
        ok_power=ptot <= system.budget.Pmax * (1 + FEAS_TOL),
    )


# ---------------------------------------------------------------------------
# reference conic solver


@dataclass
class ConicSolution:
    x: dict[str, float]
    objective: float
    evaluations: int
    backend: str = "reference"


def _lin(row, index):
    """(list of (slot, coef), const) for fast evaluation."""
    return [(index[n], c) for n, c in row.coef], row.const


def _lin_value(lin, vals):
    terms, const = lin
    v = const
    for i, c in terms:
        v += c * vals[i]
    return v


class _Reducer:
    """Collapses a program onto its decision variables by tight slack recovery.

    For each slack (in the program's elimination order) the constraints whose
    other variables are already fixed give an interval; the slack takes the end
    its direction asks for.  Constraints not used that way are checked at the end.
    """

    def __init__(self, prog: ConicProgram, tol: float):
        self.prog = prog
        self.tol = tol
        names = [v.name for v in prog.variables]
        self.index = {n: i for i, n in enumerate(names)}
        self.lo = [v.lo for v in prog.variables]
        self.hi = [v.hi for v in prog.variables]
        self.decision = [self.index[n] for n in prog.decision]
        self.objective = _lin(prog.objective, self.index)
        known = set(prog.decision)
        used = set()
        self.rules = []
        for name, mode in prog.elimination:
            rules = []
            for ci, c in enumerate(prog.constraints):
                names_c = c.names()
                if name in names_c and names_c - {name} <= known:
                    rules.append(self._rule(c, name))
                    used.add(ci)
            if not rules:
                raise ProgramError(f"slack {name} is not determined by earlier variables")
            self.rules.append((self.index[name], mode, rules))
            known.add(name)
        self.checks = [
            (c.kind, [_lin(r, self.index) for r in c.rows], c.label or c.kind)
            for ci, c in enumerate(prog.constraints) if ci not in used
        ]

    def _rule(self, c, name):
        rows = [_lin(r, self.index) for r in c.rows]
        pos = [k for k, r in enumerate(c.rows) if name in r.names()]
        if len(pos) != 1:
            raise ProgramError(f"slack {name} appears in several rows of {c.label}")
        k = pos[0]
        a = c.rows[k].coefficient(name)
        # row value with the slack zeroed
        terms = [(i, cf) for i, cf in rows[k][0] if i != self.index[name]]
        rows[k] = (terms, rows[k][1])
        if c.kind == RQUAD and k >= 2:
            raise ProgramError("slack inside the squared part of a rotated cone is not supported")
        if c.kind == EXP and k == 1:
            raise ProgramError("slack in the scale row of an exponential cone is not supported")
        return (c.kind, k, a, rows, c.label or c.kind)

    def _interval(self, slot, rules, vals):
        lo, hi = self.lo[slot], self.hi[slot]
        eq = None
        for kind, k, a, rows, _label in rules:
            v = [_lin_value(r, vals) for r in rows]
            b = v[k]
            if kind == LEQ:  # a s + b <= 0
                bound = -b / a
                if a > 0:
                    hi = min(hi, bound)
                else:
                    lo = max(lo, bound)
                continue
            if kind == EQ:
                eq = -b / a
                lo, hi = max(lo, eq), min(hi, eq)
                continue
            if kind == EXP:
                x1, x2, x3 = v
                if k == 0:  # a s + b >= x2 exp(x3 / x2)
                    if x2 > 0:
                        m = x2 * math.exp(min(x3 / x2, 700.0))
                    elif x2 == 0 and x3 <= 0:
                        m = 0.0
                    else:
                        return None
                    if a > 0:
                        lo = max(lo, (m - b) / a)
                    else:
                        hi = min(hi, (m - b) / a)
                else:  # a s + b <= x2 ln(x1 / x2)
                    if x2 > 0:
                        if x1 <= 0:
                            return None
                        m = x2 * math.log(x1 / x2)
                    elif x2 == 0 and x1 >= 0:
                        m = 0.0
                    else:
                        return None
                    if a > 0:
                        hi = min(hi, (m - b) / a)
                    else:
                        lo = max(lo, (m - b) / a)
                continue
            # rotated quadratic, slack in x1 or x2: 2 x1 x2 >= sum(rest^2), both >= 0
            other = v[1 - k]
            sq = sum(r * r for r in v[2:])
            if other < 0 or (other == 0 and sq > 0):
                return None
            m = 0.0 if sq == 0 else sq / (2.0 * other)
            if a > 0:
                lo = max(lo, (m - b) / a)
            else:
                hi = min(hi, (m - b) / a)
        if eq is not None:
            return lo, hi, eq
        return lo, hi, None

    def __call__(self, dvals: Sequence[float]):
        """Objective and full assignment at the decision point, or ``(inf, None)``."""
        vals = [0.0] * len(self.lo)
        for slot, v in zip(self.decision, dvals):
            if v < self.lo[slot] - self.tol or v > self.hi[slot] + self.tol or not math.isfinite(v):
                return math.inf, None
            vals[slot] = v
        for slot, mode, rules in self.rules:
            iv = self._interval(slot, rules, vals)
            if iv is None:
                return math.inf, None
            lo, hi, eq = iv
            scale = self.tol * max(1.0, abs(lo), abs(hi)) if math.isfinite(lo) and math.isfinite(hi) else self.tol
            if lo > hi + scale:
                return math.inf, None
            if mode == "eq":
                val = eq if eq is not None else lo
            elif mode == "min":
                val = lo
            else:
                val = hi
            if not math.isfinite(val):
                raise ProgramError("unbounded slack; program objective is unbounded")
            vals[slot] = val
        for kind, rows, _label in self.checks:
            v = [_lin_value(r, vals) for r in rows]
            if not all(math.isfinite(e) for e in v):
                return math.inf, None
            if kind == LEQ:
                bad = v[0] > self.tol * max(1.0, abs(rows[0][1]))
            elif kind == EQ:
                bad = abs(v[0]) > self.tol * max(1.0, abs(rows[0][1]))
            elif kind == EXP:
                bad = exp_cone_violation(*v) > self.tol * max(1.0, abs(v[0]))
            else:
                bad = rquad_cone_violation(v) > self.tol * max(1.0, abs(v[0] * v[1]))
            if bad:
                return math.inf, None
        return _lin_value(self.objective, vals), vals

    def assignment(self, vals) -> dict[str, float]:
        return {v.name: vals[i] for i, v in enumerate(self.prog.variables)}


def golden_section(f: Callable[[float], float], a: float, b: float, xtol: float, max_iter: int = 200):
    """Minimize a unimodal function on ``[a, b]``; returns ``(x, f(x), evaluations)``."""
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    n = 2
    while abs(b - a) > xtol and n < max_iter:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
        n += 1
    return (c, fc, n) if fc <= fd else (d, fd, n)


def _edge(feasible: Callable[[float], bool], inside: float, outside: float, rel: float = 1e-13) -> float:
    """Bisect toward the boundary of a feasible interval; returns a feasible point."""
    for _ in range(200):
        if abs(outside - inside) <= rel * max(1.0, abs(inside)):
            break
        mid = 0.5 * (inside + outside)
        if feasible(mid):
            inside = mid
        else:
            outside = mid
    return inside


def _solve_1d(red: _Reducer, lo: float, hi: float, grid: int) -> tuple[float, float, int]:
    n_eval = 0

    def f(v):
        nonlocal n_eval
        n_eval += 1
        return red([v])[0]

    if hi - lo <= 0:
        return lo, f(lo), n_eval
    pts = np.linspace(lo, hi, grid)
    vals = [f(p) for p in pts]
    feas = [i for i, v in enumerate(vals) if math.isfinite(v)]
    if not feas:
        raise InfeasibleProgram("no feasible point on the decision box")
    i0, i1 = feas[0], feas[-1]
    left = pts[i0] if i0 == 0 else _edge(lambda v: math.isfinite(f(v)), pts[i0], pts[i0 - 1])
    right = pts[i1] if i1 == grid - 1 else _edge(lambda v: math.isfinite(f(v)), pts[i1], pts[i1 + 1])
    xtol = 1e-12 * max(1.0, abs(left), abs(right))
    x, fx, _ = golden_section(f, left, right, xtol)
    best = min([(fx, x), (f(left), left), (f(right), right)])
    return best[1], best[0], n_eval


def _solve_2d(red: _Reducer, box, grid: int) -> tuple[np.ndarray, float, int]:
    n_eval = 0

    def f(v):
        nonlocal n_eval
        n_eval += 1
        return red(v)[0]

    (l0, h0), (l1, h1) = box
    g0 = np.linspace(l0, h0, grid) if h0 > l0 else np.array([l0])
    g1 = np.linspace(l1, h1, grid) if h1 > l1 else np.array([l1])
    best_v, best_x = math.inf, None
    for a in g0:
        for b in g1:
            v = f((a, b))
            if v < best_v:
                best_v, best_x = v, np.array([a, b])
    if best_x is None:
        raise InfeasibleProgram("no feasible point on the decision grid")
    if len(g0) == 1 and len(g1) == 1:
        return best_x, best_v, n_eval
    step = np.array([(h0 - l0) / max(len(g0) - 1, 1), (h1 - l1) / max(len(g1) - 1, 1)])
    simplex = [best_x]
    for k in range(2):
        p = best_x.copy()
        p[k] += step[k] if best_x[k] + step[k] <= (h0, h1)[k] else -step[k]
        simplex.append(p)
    res = minimize(
        f, best_x, method="Nelder-Mead", bounds=box,
        options={"initial_simplex": np.array(simplex), "xatol": 1e-10 * max(1.0, float(np.max(np.abs(best_x)))),
                 "fatol": 1e-13 * max(1.0, abs(best_v)), "maxiter": 2000},
    )
    if np.isfinite(res.fun) and res.fun <= best_v:
        best_x, best_v = np.asarray(res.x, float), float(res.fun)
    # polish each coordinate along its feasible segment
    for _ in range(3):
        improved = False
        for k in range(2):
            def along(v, k=k):
                p = best_x.copy()
                p[k] = v
                return f(p)

            lo_k, hi_k = box[k]
            if hi_k <= lo_k:
                continue
            pts = np.linspace(lo_k, hi_k, 9)
            fin = [p for p in pts if math.isfinite(along(p))] + [best_x[k]]
            a = min(fin)
            b = max(fin)
            if a > lo_k:
                a = _edge(lambda v: math.isfinite(along(v)), a, max(lo_k, a - (hi_k - lo_k) / 8))
            if b < hi_k:
                b = _edge(lambda v: math.isfinite(along(v)), b, min(hi_k, b + (hi_k - lo_k) / 8))
            x, fx, _ = golden_section(along, a, b, 1e-12 * max(1.0, abs(b)))
            for cand in (x, a, b):
                fc = along(cand)
                if fc < best_v - 1e-15 * max(1.0, abs(best_v)):
                    best_v = fc
                    best_x = best_x.copy()
                    best_x[k] = cand
                    improved = True
        if not improved:
            break
    return best_x, best_v, n_eval


def solve_conic(prog: ConicProgram, backend: str = "reference", grid: int | None = None,
                tol: float = 1e-9) -> ConicSolution:
    """Minimize a conic program.

    The reference backend recovers every slack at its tight value, then
    minimizes the resulting function of the 1 or 2 decision variables
    (golden section in 1-D; grid, Nelder-Mead and coordinate polishing in 2-D).
    ``backend="clarabel"`` hands the same program to an interior-point solver
    through cvxpy.
    """
    if backend == "clarabel":
        return solve_conic_clarabel(prog)
    if backend != "reference":
        raise ValueError(f"unknown backend {backend!r}")
    red = _Reducer(prog, tol)
    box = [(red.lo[i], red.hi[i]) for i in red.decision]
    if any(not (math.isfinite(a) and math.isfinite(b)) for a, b in box):
        raise ProgramError("decision variables need finite bounds")
    if any(b < a for a, b in box):
        raise InfeasibleProgram("empty decision box")
    if len(box) == 1:
        x, fx, n = _solve_1d(red, box[0][0], box[0][1], grid or 65)
        dvals = [x]
    elif len(box) == 2:
        xv, fx, n = _solve_2d(red, box, grid or 17)
        dvals = list(xv)
    else:
        raise ProgramError("reference solver handles one or two decision variables")
    obj, vals = red(dvals)
    if vals is None:
        raise SolverError("solver ended on an infeasible point")
    return ConicSolution({k: float(v) for k, v in red.assignment(vals).items()}, float(obj), n)


def solve_conic_clarabel(prog: ConicProgram) -> ConicSolution:
    """Interior-point cross-check backend (requires cvxpy with Clarabel)."""
    import cvxpy as cp

    xs = {v.name: cp.Variable(name=v.name) for v in prog.variables}

    def aff(row):
        expr = row.const
        for n, c in row.coef:
            expr = expr + c * xs[n]
        return expr

    cons = []
    for v in prog.variables:
        if math.isfinite(v.lo):
            cons.append(xs[v.name] >= v.lo)
        if math.isfinite(v.hi):
            cons.append(xs[v.name] <= v.hi)
    for c in prog.constraints:
        r = [aff(row) for row in c.rows]
        if c.kind == LEQ:
            cons.append(r[0] <= 0)
        elif c.kind == EQ:
            cons.append(r[0] == 0)
        elif c.kind == EXP:
            # cvxpy's ExpCone(x, y, z) is y exp(x / y) <= z
            cons.append(cp.constraints.ExpCone(r[2], r[1], r[0]))
        else:
            # 2 x1 x2 >= sum(xj^2)  <=>  ||(x1 - x2, sqrt2 xj)|| <= x1 + x2
            cons.append(cp.SOC(r[0] + r[1], cp.hstack([r[0] - r[1]] + [math.sqrt(2.0) * e for e in r[2:]])))
    problem = cp.Problem(cp.Minimize(aff(prog.objective)), cons)
    problem.solve(solver=cp.CLARABEL)
    if problem.status not in ("optimal", "optimal_inaccurate"):
        raise InfeasibleProgram(f"interior-point status {problem.status}")
    x = {n: float(v.value) for n, v in xs.items()}
    return ConicSolution(x, float(problem.value), 0, backend="clarabel")


# ---------------------------------------------------------------------------
# slot algorithm


@dataclass
class SlotResult:
    t: int
    decision: DecisionTriple
    iterations: int
    surrogate: float
    penalty: float
    re: float
    rc: float
    de: float
    dc: float
    ptot: float
    t_send: float
    d_code: float
    X_before: float
    X_after: float
    # queue increments in rate units, kept so the queue can be replayed exactly
    re_rate: float
    b_rc_rate: float
    ok_trans: bool
    ok_delay: bool
    ok_power: bool
    trace: list[float] = field(default_factory=list)
    continuous_lam: float = math.nan
    restored: bool = False
    oracle_gap: float | None = None
    geometry: SlotGeometry | None = None

    @property
    def qp(self) -> float:
        return qstep_to_qp_continuous(self.decision.Q)

    @property
    def feasible(self) -> bool:
        return self.ok_trans and self.ok_delay and self.ok_power


def rate_terms(system: SystemModel, re: float, rc: float) -> tuple[float, float]:
    return re * system.symbol_rate / system.rate_unit, system.tx.B * rc / system.rate_unit


def min_power_for_rate(system: SystemModel, path_loss: float, rc: float) -> float:
    return (2.0**rc - 1.0) * path_loss * system.tx.Pn_noise


def transmit_floor(system: SystemModel, cfg: OptimizerConfig, path_loss: float) -> float:
    """Smallest transmit power meeting the transmit-delay cap (and the configured floor)."""
    rc_need = system.tx.L / (system.tx.B * cfg.d_max_trans)
    return max(cfg.pt_floor, min_power_for_rate(system, path_loss, rc_need))


def _point(system, cfg, path_loss, queue_plus, d: DecisionTriple, pt_box, reserved=None):
    return LinearizationPoint(
        lam0=d.lam, Q0=d.Q, Pt0=d.Pt, queue_plus=queue_plus, path_loss=path_loss, system=system,
        V=cfg.V, rho1=cfg.rho1, rho2=cfg.rho2, d_max=cfg.d_max, d_max_trans=cfg.d_max_trans,
        lam_box=cfg.lam_box, q_box=cfg.q_box, pt_box=pt_box, reserved_tsend=reserved,
    )


def restore_feasibility(system: SystemModel, cfg: OptimizerConfig, path_loss: float,
                        init: DecisionTriple) -> tuple[DecisionTriple, bool]:
    """Move an initial triple into the boxes and the per-slot constraints.

    Order: clamp to boxes; raise Pt to the transmit-delay floor; lower lambda
    until the largest Q can meet the end-to-end delay; raise Q to its delay floor.
    """
    q_lo, q_hi = cfg.q_box
    pt_hi = system.budget.pt_max
    pt_need = transmit_floor(system, cfg, path_loss)
    if pt_need > pt_hi:
        raise InfeasibleSlot(
            f"transmit-delay cap needs {pt_need:.6g} mW but only {pt_hi:.6g} mW are available",
            ("transmit-delay cap", "power budget"),
        )
    lam = min(max(init.lam, cfg.lam_box[0]), cfg.lam_box[1])
    Q = min(max(init.Q, q_lo), q_hi)
    Pt = min(max(init.Pt, pt_need), pt_hi)
    changed = (lam, Q, Pt) != (init.lam, init.Q, init.Pt)

    def tsend(pt):
        return sending_delay(system.tx.L, system.tx.B, data_rate(snr(pt, path_loss, system.tx.Pn_noise)))

    def coding(lam_, q_):
        return system.frames_per_slot * coding_delay(system.delay, lam_, q_)

    if coding(lam, q_hi) + tsend(Pt) > cfg.d_max:
        per = system.frames_per_slot * dcoe(system.delay, q_hi)
        budget = cfg.d_max - tsend(Pt)
        lam_fit = (math.sqrt(budget / per * (1 - 1e-9)) - 1.0) / 2.0 if budget > 0 else -math.inf
        lam = max(cfg.lam_box[0], min(lam, lam_fit))
        changed = True
        if coding(lam, q_hi) + tsend(Pt) > cfg.d_max:
            # spend more power on a shorter transmission
            Pt = pt_hi
            if coding(lam, q_hi) + tsend(Pt) > cfg.d_max:
                raise InfeasibleSlot(
                    "end-to-end delay cap cannot be met at the smallest search range",
                    ("end-to-end delay cap", "transmit-delay cap", "power budget"),
                )
    pt_box = (cfg.pt_floor, pt_hi)
    pnt = _point(system, cfg, path_loss, 0.0, DecisionTriple(lam, Q, Pt), pt_box)
    q_need = q_lower_bound(pnt, cfg.d_max - tsend(Pt))
    if Q < q_need:
        Q = min(q_hi, q_need * (1 + 1e-12))
        changed = True
    return DecisionTriple(lam, Q, Pt), changed


def _line_search(phi: Callable[[float], float], f0: float) -> tuple[float, float]:
    """Best step in [0, 1] for a segment objective; returns ``(s, value)``."""
    f1 = phi(1.0)
    if f1 <= f0:
        return 1.0, float(f1)
    s, fs, _ = golden_section(phi, 0.0, 1.0, 1e-10)
    if fs < f0:
        return float(s), float(fs)
    return 0.0, f0


def round_search_range(system, cfg, path_loss, queue_plus, d: DecisionTriple) -> DecisionTriple:
    """Nearest feasible integer search range; exact halves go down."""
    lo = math.floor(d.lam)
    hi = math.ceil(d.lam)
    if lo == hi:
        return d
    first, second = (hi, lo) if d.lam - lo > 0.5 else (lo, hi)
    for cand in (first, second):
        if cfg.lam_box[0] <= cand <= cfg.lam_box[1]:
            t = replace(d, lam=float(cand))
            if evaluate_slot(system, cfg, path_loss, queue_plus, t).feasible:
                return t
    raise InfeasibleSlot("no feasible integer search range next to the continuous optimum",
                         ("end-to-end delay cap",))


def reserved_tsend(system: SystemModel, cfg: OptimizerConfig, d: DecisionTriple) -> float | None:
    """Transmit delay the quantization-step program budgets for.

    "reserve" keeps the full transmit cap free so the power step is never boxed
    in by Q, but never more than the current iterate leaves, so the iterate
    stays feasible in its own program.  "previous" returns None (t_send at Pt0).
    """
    if cfg.tsend_mode != "reserve":
        return None
    slack = cfg.d_max - system.frames_per_slot * coding_delay(system.delay, d.lam, d.Q)
    return min(cfg.d_max_trans, slack)


STEP_TOL = 1e-3  # relative move per iteration below which a flat objective counts as settled


def lyari_slot(system: SystemModel, cfg: OptimizerConfig, geom: SlotGeometry, queue: VirtualQueue,
               init: DecisionTriple) -> SlotResult:
    """One slot: alternate the two programs until the objective settles, then round and queue."""
    path_loss = geom.path_loss
    qp_ = queue.plus
    try:
        cur, restored = restore_feasibility(system, cfg, path_loss, init)
    except InfeasibleSlot as exc:
        exc.t = geom.t
        raise

    def psi(d):
        m = evaluate_slot(system, cfg, path_loss, qp_, d)
        return m.surrogate if m.feasible else math.inf

    pt_box = (cfg.pt_floor, system.budget.pt_max)
    pt_need = transmit_floor(system, cfg, path_loss)
    f_cur = psi(cur)
    if not math.isfinite(f_cur):
        raise SolverError(f"slot {geom.t}: restored start is not feasible")
    trace = [f_cur]
    iterations = 0
    for r in range(cfg.r_max):
        iterations = r + 1
        f_start, d_start = f_cur, cur
        # quantization step at fixed lambda, Pt
        prog = build_Q_subproblem(_point(system, cfg, path_loss, qp_, cur, pt_box, reserved_tsend(system, cfg, cur)))
        try:
            sol = solve_conic(prog, cfg.backend)
            cand = replace(cur, Q=sol.x["Q"])
            base = cur

            def seg_q(s):
                return psi(replace(base, Q=base.Q + s * (cand.Q - base.Q)))

            s, f_new = _line_search(seg_q, f_cur)
            if s > 0:
                cur, f_cur = replace(base, Q=base.Q + s * (cand.Q - base.Q)), f_new
        except InfeasibleProgram:
            pass
        trace.append(f_cur)
        # power and search range at fixed Q
        prog = build_power_lambda_subproblem(_point(system, cfg, path_loss, qp_, cur, pt_box), cfg.pt_floor)
        try:
            sol = solve_conic(prog, cfg.backend)
            # the solver may land a hair under the transmit-delay floor
            pt = min(max(sol.x["Pt"], pt_need), system.budget.pt_max)
            cand = replace(cur, lam=sol.x["lam"], Pt=pt)
            base = cur

            def seg_p(s):
                return psi(replace(base, lam=base.lam + s * (cand.lam - base.lam),
                                   Pt=base.Pt + s * (cand.Pt - base.Pt)))

            s, f_new = _line_search(seg_p, f_cur)
            if s > 0:
                cur = replace(base, lam=base.lam + s * (cand.lam - base.lam), Pt=base.Pt + s * (cand.Pt - base.Pt))
                f_cur = f_new
        except InfeasibleProgram:
            pass
        trace.append(f_cur)
        moved = max(abs(a - b) / max(abs(b), 1.0) for a, b in zip((cur.lam, cur.Q, cur.Pt), (d_start.lam, d_start.Q, d_start.Pt)))
        if f_start - f_cur <= cfg.conv_tol * max(abs(f_start), 1e-12) and moved <= STEP_TOL:
            break

    lam_cont = cur.lam
    final = round_search_range(system, cfg, path_loss, qp_, cur)
    m = evaluate_slot(system, cfg, path_loss, qp_, final)
    re_rate, b_rc_rate = rate_terms(system, m.re, m.rc)
    res = SlotResult(
        t=geom.t, decision=final, iterations=iterations, surrogate=m.surrogate, penalty=m.penalty,
        re=m.re, rc=m.rc, de=m.de, dc=m.dc, ptot=m.ptot, t_send=m.t_send, d_code=m.d_code,
        X_before=queue.X, X_after=queue.X + re_rate - b_rc_rate, re_rate=re_rate, b_rc_rate=b_rc_rate,
        ok_trans=m.ok_trans, ok_delay=m.ok_delay, ok_power=m.ok_power,
        trace=trace, continuous_lam=lam_cont, restored=restored, geometry=geom,
    )
    return res


def run_horizon(system: SystemModel, cfg: OptimizerConfig, T: int, X1: float = 0.0,
                init: DecisionTriple | None = None,
                on_slot: Callable[[SlotResult], None] | None = None) -> list[SlotResult]:
    """Sequential slots threading the queue; each slot warm-starts from the previous decision."""
    if T < 1:
        raise ValueError("T must be at least 1")
    queue = VirtualQueue(X1, (X1,))
    start = init or cfg.initial
    out = []
    for t in range(1, T + 1):
        geom = slot_geometry(system.env, system.traj, t)
        try:
            res = lyari_slot(system, cfg, geom, queue, start)
        except InfeasibleSlot as exc:
            exc.t = t
            raise
        queue = queue_update(queue, res.re_rate, res.b_rc_rate)
        if on_slot is not None:
            on_slot(res)
        out.append(res)
        start = res.decision
    return out


def queue_history(results: Sequence[SlotResult]) -> list[float]:
    """``X(1), ..., X(T)`` as observed at the start of each slot."""
    return [r.X_before for r in results]


def stability_series(results: Sequence[SlotResult]) -> list[float]:
    hist = queue_history(results)
    return [stability_metric(hist, t) for t in range(1, len(hist) + 1)]

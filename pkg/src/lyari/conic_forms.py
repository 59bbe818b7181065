"""Convex subproblems of the per-slot decision, written as small conic programs.

Each slot alternates between a quantization-step program and a joint
power / search-range program.  The non-convex pieces (encoding rate, bit-error
distortion) are replaced by tangents at the current iterate; the remaining
nonlinear constraints are exactly representable with exponential cones and
3-dimensional rotated quadratic cones.

A program is a plain value: affine rows over named variables, grouped into
typed constraints, plus a linear objective.  ``solve_conic`` in
``lyari_optimizer`` consumes it, and ``ConicProgram.to_json`` dumps it for
cross-checking with an external solver.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping

from .channel_dprd import channel_distortion, channel_distortion_dpt, data_rate, sending_delay, snr
from .source_dprd import coding_bitrate, coding_bitrate_grad, dcoe

EXP = "exponential"
RQUAD = "rotated-quadratic"
LEQ = "linear-inequality"  # row <= 0
EQ = "linear-equality"  # row == 0
KINDS = (EXP, RQUAD, LEQ, EQ)

LN2 = math.log(2.0)


class ProgramError(ValueError):
    """A program references unknown variables or has malformed cones."""


@dataclass(frozen=True)
class Affine:
    """``sum(coef * var) + const``."""

    coef: tuple[tuple[str, float], ...] = ()
    const: float = 0.0

    @classmethod
    def of(cls, terms: Mapping[str, float] | None = None, const: float = 0.0) -> Affine:
        return cls(tuple((k, float(v)) for k, v in (terms or {}).items() if v != 0.0), float(const))

    def value(self, x: Mapping[str, float]) -> float:
        return self.const + sum(c * x[name] for name, c in self.coef)

    def names(self) -> set[str]:
        return {name for name, _ in self.coef}

    def coefficient(self, name: str) -> float:
        return sum(c for n, c in self.coef if n == name)

    def to_json(self):
        c = self.const if math.isfinite(self.const) else repr(self.const)
        return {"coef": dict(self.coef), "const": c}


@dataclass(frozen=True)
class ConeConstraint:
    """A typed constraint over affine rows.

    ``exponential``: 3 rows ``(x1, x2, x3)`` with ``x1 >= x2 exp(x3/x2)``, ``x1, x2 >= 0``.
    ``rotated-quadratic``: rows ``(x1, x2, x3, ...)`` with ``2 x1 x2 >= sum(xj^2)``.
    Linear kinds hold a single row: ``row <= 0`` or ``row == 0``.
    """

    kind: str
    rows: tuple[Affine, ...]
    label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ProgramError(f"unknown constraint kind {self.kind!r}")
        if self.kind == EXP and len(self.rows) != 3:
            raise ProgramError("exponential cone rows must have arity 3")
        if self.kind == RQUAD and len(self.rows) < 3:
            raise ProgramError("rotated quadratic cone needs at least 3 rows")
        if self.kind in (LEQ, EQ) and len(self.rows) != 1:
            raise ProgramError("linear constraints hold exactly one row")

    def names(self) -> set[str]:
        out: set[str] = set()
        for r in self.rows:
            out |= r.names()
        return out

    def violation(self, x: Mapping[str, float]) -> float:
        """Non-negative residual; zero means satisfied."""
        v = [r.value(x) for r in self.rows]
        if self.kind == LEQ:
            return max(v[0], 0.0)
        if self.kind == EQ:
            return abs(v[0])
        if self.kind == EXP:
            return exp_cone_violation(*v)
        return rquad_cone_violation(v)

    def to_json(self):
        return {"kind": self.kind, "label": self.label, "rows": [r.to_json() for r in self.rows]}


def exp_cone_violation(x1: float, x2: float, x3: float) -> float:
    """Distance-like residual to the closed exponential cone."""
    if x2 > 0:
        if x1 <= 0:
            return max(-x1, 0.0) + 1.0
        # compare in log space: x3/x2 <= ln(x1/x2)
        gap = x3 / x2 - math.log(x1 / x2)
        return max(gap, 0.0) * x2
    if x2 == 0:
        return max(-x1, 0.0) + max(x3, 0.0)
    return -x2 + max(-x1, 0.0)


def in_exp_cone(x1: float, x2: float, x3: float, tol: float = 0.0) -> bool:
    return exp_cone_violation(x1, x2, x3) <= tol


def rquad_cone_violation(v) -> float:
    x1, x2, rest = v[0], v[1], v[2:]
    neg = max(-x1, 0.0) + max(-x2, 0.0)
    return neg + max(sum(r * r for r in rest) - 2.0 * x1 * x2, 0.0)


def in_rquad_cone(v, tol: float = 0.0) -> bool:
    return rquad_cone_violation(v) <= tol


@dataclass(frozen=True)
class Variable:
    name: str
    lo: float = -math.inf
    hi: float = math.inf


@dataclass(frozen=True)
class ConicProgram:
    """Linear objective over named variables subject to typed conic constraints.

    ``decision`` lists the variables that carry the actual choice; every other
    variable is a slack.  ``elimination`` gives, in order, each slack and whether
    its tight value is the smallest (``"min"``) or largest (``"max"``) one the
    constraints allow given the variables fixed before it, or is pinned by an
    equality (``"eq"``).  The reference solver
    uses it to collapse the program onto the decision variables.
    """

    name: str
    variables: tuple[Variable, ...]
    objective: Affine
    constraints: tuple[ConeConstraint, ...]
    decision: tuple[str, ...]
    elimination: tuple[tuple[str, str], ...]
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        declared = {v.name for v in self.variables}
        if len(declared) != len(self.variables):
            raise ProgramError("duplicate variable name")
        unknown = self.objective.names() - declared
        for c in self.constraints:
            unknown |= c.names() - declared
        unknown |= set(self.decision) - declared
        unknown |= {s for s, _ in self.elimination} - declared
        if unknown:
            raise ProgramError(f"undeclared variables: {sorted(unknown)}")
        covered = set(self.decision) | {s for s, _ in self.elimination}
        if covered != declared:
            raise ProgramError(f"variables neither decided nor eliminated: {sorted(declared - covered)}")

    def bounds(self, name: str) -> tuple[float, float]:
        for v in self.variables:
            if v.name == name:
                return v.lo, v.hi
        raise KeyError(name)

    def evaluate(self, x: Mapping[str, float]) -> float:
        return self.objective.value(x)

    def max_violation(self, x: Mapping[str, float]) -> float:
        worst = 0.0
        for v in self.variables:
            worst = max(worst, v.lo - x[v.name], x[v.name] - v.hi)
        for c in self.constraints:
            worst = max(worst, c.violation(x))
        return worst

    def violated(self, x: Mapping[str, float], tol: float = 1e-9) -> list[str]:
        return [c.label or c.kind for c in self.constraints if c.violation(x) > tol]

    def to_json(self) -> str:
        def num(v):
            return v if math.isfinite(v) else repr(v)

        doc = {
            "name": self.name,
            "variables": [{"name": v.name, "lo": num(v.lo), "hi": num(v.hi)} for v in self.variables],
            "objective": self.objective.to_json(),
            "constraints": [c.to_json() for c in self.constraints],
            "decision": list(self.decision),
            "elimination": [list(e) for e in self.elimination],
            "meta": {k: num(v) if isinstance(v, float) else v for k, v in self.meta.items()},
        }
        return json.dumps(doc, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# tangents


@dataclass(frozen=True)
class Tangent:
    """Affine model ``value + slope * (v - at)``."""

    at: float
    value: float
    slope: float

    def __call__(self, v: float) -> float:
        return self.value + self.slope * (v - self.at)


@dataclass(frozen=True)
class LinearizationPoint:
    """Current iterate plus the slot context the programs need.

    ``system`` is any object exposing the model handles used below
    (``sigma``, ``rd``, ``delay``, ``tx``, ``budget``) and the rate scaling
    ``symbol_rate``, ``rate_unit`` and ``frames_per_slot``.
    """

    lam0: float
    Q0: float
    Pt0: float
    queue_plus: float
    path_loss: float
    system: object
    V: float
    rho1: float
    rho2: float
    d_max: float
    d_max_trans: float
    lam_box: tuple[float, float]
    q_box: tuple[float, float]
    pt_box: tuple[float, float]
    # transmit delay assumed inside the quantization-step program; None means
    # "use t_send at Pt0"
    reserved_tsend: float | None = None


def linearize_Re_in_Q(point: LinearizationPoint) -> Tangent:
    s = point.system
    value = coding_bitrate(s.sigma, s.rd, point.lam0, point.Q0)
    _, slope = coding_bitrate_grad(s.sigma, s.rd, point.lam0, point.Q0)
    return Tangent(point.Q0, value, slope)


def linearize_Re_in_lambda(point: LinearizationPoint) -> Tangent:
    s = point.system
    value = coding_bitrate(s.sigma, s.rd, point.lam0, point.Q0)
    slope, _ = coding_bitrate_grad(s.sigma, s.rd, point.lam0, point.Q0)
    return Tangent(point.lam0, value, slope)


PT_FLOOR = 1.0  # mW; the bit-error derivative is singular at zero power


def linearize_Dc_in_Pt(point: LinearizationPoint, pt_floor: float = PT_FLOOR) -> Tangent:
    pt0 = max(point.Pt0, pt_floor)
    pn = point.system.tx.Pn_noise
    return Tangent(
        pt0,
        channel_distortion(pt0, point.path_loss, pn),
        channel_distortion_dpt(pt0, point.path_loss, pn),
    )


# ---------------------------------------------------------------------------
# program builders


def _var(name, lo=-math.inf, hi=math.inf):
    return Variable(name, lo, hi)


def _leq(label, terms, const=0.0):
    return ConeConstraint(LEQ, (Affine.of(terms, const),), label)


def _eq(label, terms, const=0.0):
    return ConeConstraint(EQ, (Affine.of(terms, const),), label)


def _rate_cones(C: float, K: float) -> tuple[ConeConstraint, ConeConstraint]:
    """``eps >= exp(xi)`` and ``delta >= C exp(-K xi)`` as exponential cones."""
    return (
        ConeConstraint(EXP, (Affine.of({"eps": 1}), Affine.of({}, 1.0), Affine.of({"xi": 1})), "eps>=exp(xi)"),
        ConeConstraint(
            EXP, (Affine.of({"delta": 1}), Affine.of({}, C), Affine.of({"xi": -C * K})), "delta>=C*exp(-K*xi)"
        ),
    )


def _rate_scale(point: LinearizationPoint) -> tuple[float, float]:
    """Objective weights turning bits/symbol and bps/Hz into queue units."""
    s = point.system
    return s.symbol_rate / s.rate_unit, s.tx.B / s.rate_unit


def q_lower_bound(point: LinearizationPoint, budget: float) -> float:
    """Smallest Q with coding delay at ``lam0`` within ``budget`` seconds (may exceed the box)."""
    dm = point.system.delay
    per = (2.0 * point.lam0 + 1.0) ** 2 * point.system.frames_per_slot * dm.d1
    if budget <= 0:
        return math.inf
    target = budget / per - dm.d4
    if target <= 0:
        return math.inf
    if dm.d2 == 0 or dm.d3 == 0:
        return -math.inf if dm.d2 + dm.d4 <= budget / per else math.inf
    return -math.log(target / dm.d2) / dm.d3


def build_Q_subproblem(point: LinearizationPoint) -> ConicProgram:
    """Quantization-step program at fixed search range and transmit power.

    Variables ``Q, Omega, delta, eps, xi``.  The delay cap is linear in Q once
    written as a lower bound on Q, because ``d_coe`` is monotone decreasing.
    """
    s = point.system
    tan = linearize_Re_in_Q(point)
    w_re, _ = _rate_scale(point)
    if point.reserved_tsend is None:
        tsend = sending_delay(s.tx.L, s.tx.B, data_rate(snr(point.Pt0, point.path_loss, s.tx.Pn_noise)))
    else:
        tsend = point.reserved_tsend
    q_lo = max(point.q_box[0], q_lower_bound(point, point.d_max - tsend))
    q_hi = point.q_box[1]

    # tangent rows: value + slope (Q - Q0) <= Omega and >= eps
    c0 = tan.value - tan.slope * tan.at
    cons = (
        _leq("rate-tangent<=Omega", {"Q": tan.slope, "Omega": -1.0}, c0),
        _leq("rate-tangent>=eps", {"Q": -tan.slope, "eps": 1.0}, -c0),
        *_rate_cones(s.rd.C, s.rd.K),
        _leq("delay", {"Q": -1.0}, q_lo),
    )
    return ConicProgram(
        name="quantization-step",
        variables=(
            _var("Q", point.q_box[0], q_hi),
            _var("Omega"),
            _var("delta", 0.0),
            _var("eps", 0.0),
            _var("xi"),
        ),
        objective=Affine.of({"Omega": point.queue_plus * w_re, "delta": point.V}),
        constraints=cons,
        decision=("Q",),
        elimination=(("Omega", "min"), ("eps", "max"), ("xi", "max"), ("delta", "min")),
        meta={"Q0": point.Q0, "lam0": point.lam0, "tsend": tsend, "q_lo": q_lo, "re_slope": tan.slope},
    )


def build_power_lambda_subproblem(point: LinearizationPoint, pt_floor: float = PT_FLOOR) -> ConicProgram:
    """Joint search-range / transmit-power program at fixed Q.

    Variables ``lam, Pt, Omega, delta, eps, xi, zeta, phi, tau, Z1, Z2, Z3``.
    ``Ptot`` is affine in ``Pt`` so it is written out instead of declared.
    """
    s = point.system
    tan = linearize_Re_in_lambda(point)
    dtan = linearize_Dc_in_Pt(point, pt_floor)
    w_re, w_rc = _rate_scale(point)
    pn = s.tx.Pn_noise
    d_coe = s.frames_per_slot * dcoe(s.delay, point.Q0)
    budget = s.budget
    c0 = tan.value - tan.slope * tan.at
    dc0 = dtan.value - dtan.slope * dtan.at
    Pc_Pe = budget.Pc + budget.Pe

    cons = (
        _leq("rate-tangent<=Omega", {"lam": tan.slope, "Omega": -1.0}, c0),
        _leq("rate-tangent>=eps", {"lam": -tan.slope, "eps": 1.0}, -c0),
        _leq("ber-tangent<=zeta", {"Pt": dtan.slope, "zeta": -1.0}, dc0),
        _leq("power-budget", {"Pt": 1.0}, Pc_Pe - budget.Pmax),
        *_rate_cones(s.rd.C, s.rd.K),
        ConeConstraint(
            EXP, (Affine.of({"Z1": 1}), Affine.of({}, 1.0), Affine.of({"phi": LN2})), "log2(Z1)>=phi"
        ),
        ConeConstraint(
            RQUAD,
            (Affine.of({"phi": 1}), Affine.of({"tau": 1}), Affine.of({}, math.sqrt(2.0 * s.tx.L / s.tx.B))),
            "tau>=L/(B*phi)",
        ),
        ConeConstraint(
            RQUAD, (Affine.of({}, 0.5), Affine.of({"Z3": 1}), Affine.of({"Z2": 1})), "Z3>=Z2^2"
        ),
        _eq("Z1=1+snr", {"Z1": -1.0, "Pt": 1.0 / (point.path_loss * pn)}, 1.0),
        _eq("Z2=2lam+1", {"Z2": 1.0, "lam": -2.0}, -1.0),
        _eq("Z3=(dmax-tau)/dcoe", {"Z3": 1.0, "tau": 1.0 / d_coe}, -point.d_max / d_coe),
        _leq("tau<=dmax_trans", {"tau": 1.0}, -point.d_max_trans),
    )
    V = point.V
    objective = Affine.of(
        {
            "Omega": point.queue_plus * w_re,
            "phi": -point.queue_plus * w_rc,
            "delta": V,
            "zeta": V * point.rho1,
            "Pt": V * point.rho2,
        },
        V * point.rho2 * Pc_Pe,
    )
    return ConicProgram(
        name="power-search-range",
        variables=(
            _var("lam", *point.lam_box),
            _var("Pt", max(point.pt_box[0], 0.0), point.pt_box[1]),
            _var("Omega"),
            _var("delta", 0.0),
            _var("eps", 0.0),
            _var("xi"),
            _var("zeta"),
            _var("phi"),
            _var("tau", 0.0),
            _var("Z1", 0.0),
            _var("Z2"),
            _var("Z3"),
        ),
        objective=objective,
        constraints=cons,
        decision=("lam", "Pt"),
        elimination=(
            ("Z1", "eq"),
            ("Z2", "eq"),
            ("phi", "max"),
            ("tau", "min"),
            ("Z3", "eq"),
            ("Omega", "min"),
            ("eps", "max"),
            ("xi", "max"),
            ("delta", "min"),
            ("zeta", "min"),
        ),
        meta={
            "lam0": point.lam0,
            "Q0": point.Q0,
            "Pt0": point.Pt0,
            "re_slope": tan.slope,
            "dc_slope": dtan.slope,
            "dcoe": d_coe,
        },
    )

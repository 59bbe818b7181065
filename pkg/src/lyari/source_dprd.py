"""Video-coding delay/power/rate/distortion model.

The encoder side is described by the residual spread ``sigma(lambda, Q)``, the
entropy of a uniformly quantized (dead-zone) Laplacian source, a hyperbolic
rate-distortion curve, a motion-estimation delay that grows with ``(2*lambda+1)**2``
and a cubic clock-power law.  The regression coefficients of ``sigma`` and of the
delay coefficient can be fitted from residual-statistics samples.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import least_squares

LOG2E = 1.0 / math.log(2.0)
SQRT2 = math.sqrt(2.0)

QP_MIN, QP_MAX = 0, 51


class ModelError(ValueError):
    """A model was queried outside the region where it is defined."""


class FitError(ValueError):
    """Regression could not produce a model from the given samples."""


@dataclass(frozen=True)
class SigmaModel:
    a1: float
    a2: float
    a3: float
    a4: float

    def __post_init__(self):
        if self.a1 < 0 or self.a2 <= 0 or self.a3 <= 0 or self.a4 < 0:
            raise ModelError("sigma model needs a1 >= 0, a2 > 0, a3 > 0, a4 >= 0")


@dataclass(frozen=True)
class RateDistortionModel:
    C: float = 0.0015
    K: float = 0.55
    mu: float = 0.1

    def __post_init__(self):
        if self.C <= 0 or self.K <= 0 or not 0 < self.mu < 1:
            raise ModelError("rate-distortion model needs C > 0, K > 0, 0 < mu < 1")


@dataclass(frozen=True)
class DelayModel:
    """Motion-estimation delay model.

    ``N``, ``Cs`` and ``F_clk`` describe the raw SAD-count form; the optimizer
    works with the fitted surrogate ``d_coe(Q) = d1 * (d2 * exp(-d3 * Q) + d4)``.
    """

    d1: float
    d2: float
    d3: float
    d4: float
    N: int = 396
    Cs: float = 10.0
    F_clk: float = 1e9

    def __post_init__(self):
        if self.N < 1 or self.Cs < 1 or self.F_clk <= 0:
            raise ModelError("delay model needs N >= 1, Cs >= 1, F_clk > 0")
        if self.d1 <= 0 or self.d2 < 0 or self.d3 < 0 or self.d4 < 0 or self.d2 + self.d4 <= 0:
            raise ModelError("delay coefficient must stay positive")


@dataclass(frozen=True)
class PowerModel:
    k: float = 1.3e-24  # mW / Hz^3
    F_clk: float = 1e9
    Pc: float = 100.0

    def __post_init__(self):
        if self.k <= 0 or self.Pc < 0 or self.F_clk < 0:
            raise ModelError("power model needs k > 0, Pc >= 0, F_clk >= 0")


@dataclass(frozen=True)
class DecisionTriple:
    lam: float
    Q: float
    Pt: float


# ---------------------------------------------------------------------------
# residual statistics and entropy


def sigma(model: SigmaModel, lam: float, Q: float) -> float:
    s = model.a1 * math.exp(-model.a2 * lam) + model.a3 + model.a4 * Q
    if not s > 0:
        raise ModelError(f"sigma({lam}, {Q}) = {s} is not positive")
    return s


def laplace_delta(sig: float) -> float:
    return SQRT2 / sig


def laplace_p0(delta: float, Q: float, mu: float) -> float:
    """Probability that a residual quantizes to zero (dead zone of half-width (1-mu)Q)."""
    return -math.expm1(delta * Q * (mu - 1.0))


def laplace_pn(delta: float, Q: float, mu: float, n: int) -> float:
    """Probability of the n-th positive quantization bin (same mass on the negative side)."""
    if n < 1:
        raise ValueError("bin index starts at 1")
    x = delta * Q
    return 0.5 * -math.expm1(-x) * math.exp(x * (mu - n))


def entropy_rate(x: float, mu: float) -> float:
    """Closed-form entropy (bits/symbol) of the quantized Laplacian at ``x = delta*Q``.

    Algebraically identical to ``1 - P0 log2(2 P0) + (1 - P0)[x log2e / (1 - e^-x)
    - log2(e^(mu x) - e^((mu-1) x))]``; rearranged around expm1 so it stays
    accurate for both small and large ``x``.
    """
    if not x > 0:
        raise ModelError("entropy diverges at x <= 0")
    tail = math.exp(-(1.0 - mu) * x)  # 1 - P0
    p0 = -math.expm1(-(1.0 - mu) * x)
    one_m_ex = -math.expm1(-x)
    head = 0.0 if p0 <= 0.0 else -p0 * math.log2(p0)
    bracket = 1.0 + (x / one_m_ex - mu * x - math.log(one_m_ex)) * LOG2E
    return head + tail * bracket


def series_terms(x: float) -> int:
    """Bins needed so the geometric tail of the bin masses is below 1e-12."""
    return math.ceil(40.0 / x) + 8


def entropy_series(x: float, mu: float, n_terms: int | None = None) -> float:
    """Entropy by direct summation over quantization bins, the reference for the closed form."""
    n = series_terms(x) if n_terms is None else n_terms
    delta_q = x  # the bin masses only depend on delta * Q
    p0 = laplace_p0(delta_q, 1.0, mu)
    h = -p0 * math.log2(p0) if p0 > 0 else 0.0
    for k in range(1, n + 1):
        pk = laplace_pn(delta_q, 1.0, mu, k)
        if pk > 0:
            h -= 2.0 * pk * math.log2(pk)
    return h


def probability_mass(x: float, mu: float, n_terms: int | None = None) -> float:
    """``P0 + 2 * sum(Pn)`` truncated at the series length."""
    n = series_terms(x) if n_terms is None else n_terms
    terms = [laplace_p0(x, 1.0, mu)]
    terms.extend(2.0 * laplace_pn(x, 1.0, mu, k) for k in range(1, n + 1))
    return math.fsum(terms)


def entropy_rate_dx(x: float, mu: float) -> float:
    """Derivative of :func:`entropy_rate` with respect to ``x``."""
    a = 1.0 - mu
    tail = math.exp(-a * x)
    p0 = -math.expm1(-a * x)
    one_m_ex = -math.expm1(-x)
    bracket = 1.0 + (x / one_m_ex - mu * x - math.log(one_m_ex)) * LOG2E
    dp0 = a * tail
    # x e^-x / (1 - e^-x)^2 written as x / (4 sinh^2(x/2)) to avoid overflow
    sh = math.sinh(0.5 * x)
    dbracket = (a - x / (4.0 * sh * sh)) * LOG2E
    dhead = 0.0 if p0 <= 0.0 else -dp0 * (math.log2(p0) + LOG2E)
    return dhead - dp0 * bracket + tail * dbracket


def quantization_ratio(model: SigmaModel, lam: float, Q: float) -> float:
    """``x = delta * Q = sqrt(2) Q / sigma(lam, Q)``."""
    return SQRT2 * Q / sigma(model, lam, Q)


def coding_bitrate(model: SigmaModel, rd: RateDistortionModel, lam: float, Q: float) -> float:
    """Encoding rate R_e in bits per source symbol."""
    return entropy_rate(quantization_ratio(model, lam, Q), rd.mu)


def coding_bitrate_grad(model: SigmaModel, rd: RateDistortionModel, lam: float, Q: float) -> tuple[float, float]:
    """Analytic ``(dR_e/dlambda, dR_e/dQ)``."""
    s = sigma(model, lam, Q)
    x = SQRT2 * Q / s
    dr = entropy_rate_dx(x, rd.mu)
    decay = model.a1 * math.exp(-model.a2 * lam)
    dx_dq = SQRT2 * (decay + model.a3) / (s * s)
    dx_dlam = SQRT2 * Q * model.a2 * decay / (s * s)
    return dr * dx_dlam, dr * dx_dq


def coding_distortion(rd: RateDistortionModel, Re: float) -> float:
    if not Re > 0:
        raise ModelError("distortion is infinite at zero encoding rate")
    return rd.C * Re ** (-rd.K)


# ---------------------------------------------------------------------------
# delay and power


def dcoe(model: DelayModel, Q: float) -> float:
    return model.d1 * (model.d2 * math.exp(-model.d3 * Q) + model.d4)


def coding_delay(model: DelayModel, lam: float, Q: float) -> float:
    """Per-frame motion-estimation delay in seconds."""
    if lam < 0:
        raise ValueError("search range must be non-negative")
    return (2.0 * lam + 1.0) ** 2 * dcoe(model, Q)


def coding_delay_raw(N: int, r: float, Cs: float, F_clk: float, lam: float) -> float:
    """SAD-count form: N (2 lambda + 1)^2 r C_s / F_clk."""
    return N * (2.0 * lam + 1.0) ** 2 * r * Cs / F_clk


def coding_power(model: PowerModel) -> float:
    """Encoding power in mW (cubic dynamic-voltage scaling)."""
    return model.k * model.F_clk ** 3


# ---------------------------------------------------------------------------
# QP <-> quantization step


def qp_to_qstep(qp: float) -> float:
    if not QP_MIN <= qp <= QP_MAX:
        raise ValueError(f"QP {qp} outside [{QP_MIN}, {QP_MAX}]")
    return 2.0 ** ((qp - 4.0) / 6.0)


def qstep_to_qp_continuous(Q: float) -> float:
    return 4.0 + 6.0 * math.log2(Q)


def qstep_to_qp(Q: float) -> int:
    """Nearest integer QP for a quantization step, clipped to the valid range."""
    return int(min(QP_MAX, max(QP_MIN, round(qstep_to_qp_continuous(Q)))))


# ---------------------------------------------------------------------------
# regression


@dataclass
class SigmaFit:
    model: SigmaModel
    rms: float
    nfev: int
    # Monotonicity checks of R_e over the sample box; empty when the model behaves.
    violations: list[str] = field(default_factory=list)


@dataclass
class DcoeFit:
    d1: float
    d2: float
    d3: float
    d4: float
    rms: float
    degenerate: bool = False


N_STARTS = 8


def _lm(residual, x0, bounds):
    return least_squares(
        residual, x0, bounds=bounds, method="trf", x_scale="jac",
        xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000,
    )


def fit_sigma_model(samples: Iterable[Sequence[float]], rd: RateDistortionModel | None = None) -> SigmaFit:
    """Least-squares fit of ``a1 exp(-a2 lam) + a3 + a4 Q`` to ``(lambda, QP, sigma)`` rows.

    Multi-start over log-spaced ``a2``; for each start the linear coefficients
    are initialized by ordinary least squares, then all four are refined jointly.
    Residuals are relative, matching multiplicative measurement noise.
    """
    data = np.asarray(list(samples), dtype=float)
    if data.ndim != 2 or data.shape[1] != 3 or len(data) < 4:
        raise FitError(f"need at least 4 (lambda, qp, sigma) samples, got {len(data)}")
    lam, qp, sig = data.T
    if len(np.unique(lam)) < 2 or len(np.unique(qp)) < 2:
        raise FitError("samples must span at least 2 distinct lambda and 2 distinct QP values")
    Q = np.array([qp_to_qstep(v) for v in qp])

    def model_fn(p):
        return p[0] * np.exp(-p[1] * lam) + p[2] + p[3] * Q

    best = None
    scale = 1.0 / max(lam.max(), 1.0)
    for a2 in np.logspace(-2, 1, N_STARTS) * scale * 10:
        A = np.column_stack([np.exp(-a2 * lam), np.ones_like(lam), Q])
        lin, *_ = np.linalg.lstsq(A, sig, rcond=None)
        x0 = np.array([max(lin[0], 1e-6), a2, max(lin[1], 1e-6), max(lin[2], 0.0)])
        try:
            res = _lm(lambda p: model_fn(p) / sig - 1.0, x0, ([0.0, 1e-9, 1e-12, 0.0], np.inf))
        except ValueError:
            continue
        if best is None or res.cost < best.cost:
            best = res
    if best is None or not best.success:
        raise FitError("sigma regression did not converge")
    p = best.x
    model = SigmaModel(*map(float, p))
    rms = float(np.sqrt(np.mean((model_fn(p) - sig) ** 2)))
    fit = SigmaFit(model=model, rms=rms, nfev=int(best.nfev))
    fit.violations = check_rate_monotonicity(model, rd or RateDistortionModel(), lam, Q)
    return fit


def check_rate_monotonicity(model, rd, lams, Qs) -> list[str]:
    """R_e must not increase with Q nor with lambda over the sampled box."""
    out = []
    lam_grid = np.unique(lams)
    q_grid = np.unique(Qs)
    for lv in lam_grid:
        r = [coding_bitrate(model, rd, lv, q) for q in q_grid]
        if np.any(np.diff(r) > 1e-12):
            out.append(f"R_e increases with Q at lambda={lv:g}")
    for qv in q_grid:
        r = [coding_bitrate(model, rd, lv, qv) for lv in lam_grid]
        if np.any(np.diff(r) > 1e-12):
            out.append(f"R_e increases with lambda at Q={qv:g}")
    return out


def fit_dcoe_model(samples: Iterable[Sequence[float]]) -> DcoeFit:
    """Fit ``d1 (d2 exp(-d3 Q) + d4)`` to ``(Q, dcoe)`` rows.

    The product form is only identified up to a common scale, so the result is
    normalized to ``d2 + d4 = 1``; ``d1`` is then the delay coefficient at Q = 0.
    Internally the fit runs on ``A exp(-d3 Q) + B`` with ``A = d1 d2``, ``B = d1 d4``,
    with relative residuals as in :func:`fit_sigma_model`.
    """
    data = np.asarray(list(samples), dtype=float)
    if data.ndim != 2 or data.shape[1] != 2 or len(data) < 4:
        raise FitError(f"need at least 4 (Q, dcoe) samples, got {len(data)}")
    Q, y = data.T
    if len(np.unique(Q)) < 4:
        raise FitError("need at least 4 distinct Q values")
    if np.any(y <= 0):
        raise FitError("delay coefficients must be positive")
    scale = float(np.max(y))
    yn = y / scale
    if np.ptp(yn) < 1e-12:
        # any d2 with d3 = 0 reproduces a constant; report the d2 = 0 member
        return DcoeFit(d1=float(np.mean(y)), d2=0.0, d3=0.0, d4=1.0, rms=0.0, degenerate=True)

    best = None
    for d3 in np.logspace(-3, 0, N_STARTS) * 10.0 / max(Q.max(), 1.0):
        A = np.column_stack([np.exp(-d3 * Q), np.ones_like(Q)])
        lin, *_ = np.linalg.lstsq(A, yn, rcond=None)
        x0 = np.array([max(lin[0], 1e-9), d3, max(lin[1], 0.0)])
        res = _lm(lambda p: (p[0] * np.exp(-p[1] * Q) + p[2]) / yn - 1.0, x0, ([0.0, 0.0, 0.0], np.inf))
        if best is None or res.cost < best.cost:
            best = res
    if best is None or not best.success:
        raise FitError("delay-coefficient regression did not converge")
    amp, d3, floor = (float(v) for v in best.x)
    d1 = (amp + floor) * scale
    rms = float(np.sqrt(np.mean(((amp * np.exp(-d3 * Q) + floor - yn) * scale) ** 2)))
    return DcoeFit(
        d1=d1, d2=amp * scale / d1, d3=d3, d4=floor * scale / d1, rms=rms,
        degenerate=amp * scale < 1e-12 * d1 or d3 < 1e-12,
    )


def read_samples(path: str | Path, columns: Sequence[str]) -> list[tuple[float, ...]]:
    """Read a residual-statistics CSV whose header is exactly ``columns``."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise FitError(f"{path}: empty file") from None
        if header != list(columns):
            raise FitError(f"{path}: expected header {','.join(columns)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(columns):
                raise FitError(f"{path}:{lineno}: expected {len(columns)} fields, got {len(row)}")
            try:
                vals = tuple(float(c) for c in row)
            except ValueError:
                raise FitError(f"{path}:{lineno}: non-numeric field in {row!r}") from None
            if not all(math.isfinite(v) for v in vals):
                raise FitError(f"{path}:{lineno}: non-finite value")
            rows.append(vals)
    return rows

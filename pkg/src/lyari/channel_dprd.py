"""Transmission-side model: SNR, Shannon rate, AWGN bit-error distortion, sending delay, power."""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy.special import erfc


class InfeasibleRate(ValueError):
    """The channel rate is zero, so nothing can be sent."""


@dataclass(frozen=True)
class TransmissionModel:
    """``B`` in Hz, ``Pn_noise`` in mW, data-unit length ``L`` in bits."""

    B: float = 10e6
    Pn_noise: float = 1e-9
    L: float = 1e6

    def __post_init__(self):
        if self.B <= 0 or self.Pn_noise <= 0 or self.L <= 0:
            raise ValueError("B, Pn_noise and L must be positive")


@dataclass(frozen=True)
class PowerBudget:
    Pmax: float
    Pc: float
    Pe: float

    def __post_init__(self):
        if self.Pc + self.Pe > self.Pmax:
            raise ValueError(
                f"circuit + encoding power {self.Pc + self.Pe:g} mW exceeds Pmax {self.Pmax:g} mW"
            )

    @property
    def pt_max(self) -> float:
        return self.Pmax - self.Pc - self.Pe


def snr(Pt: float, L_atg_linear: float, Pn_noise: float) -> float:
    return Pt / (L_atg_linear * Pn_noise)


def data_rate(snr_value: float) -> float:
    """Spectral efficiency log2(1 + snr) in bps/Hz."""
    return math.log2(1.0 + snr_value)


def channel_distortion(Pt: float, L_atg_linear: float, Pn_noise: float) -> float:
    """AWGN bit error rate 0.5 * (1 - erf(sqrt(snr))), evaluated as 0.5 * erfc(.)."""
    return 0.5 * float(erfc(math.sqrt(snr(Pt, L_atg_linear, Pn_noise))))


def channel_distortion_dpt(Pt: float, L_atg_linear: float, Pn_noise: float) -> float:
    s = snr(Pt, L_atg_linear, Pn_noise)
    if s <= 0:
        return -math.inf
    return -math.exp(-s) / (2.0 * math.sqrt(math.pi * s) * L_atg_linear * Pn_noise)


def sending_delay(L: float, B: float, Rc: float) -> float:
    if L == 0:
        return 0.0
    if not Rc > 0:
        raise InfeasibleRate("sending delay is unbounded at zero channel rate")
    return L / (B * Rc)


def total_power(budget: PowerBudget, Pt: float) -> tuple[float, bool]:
    """Total UAV power and whether it respects ``Pmax``."""
    ptot = budget.Pc + budget.Pe + Pt
    return ptot, ptot <= budget.Pmax

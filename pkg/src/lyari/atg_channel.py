"""Air-to-ground channel: UAV circular trajectory, elevation, LoS probability, path loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ChannelEnvironment:
    """Environment constants of the probabilistic LoS/NLoS path-loss model.

    ``eta_los`` / ``eta_nlos`` are excess losses in dB, ``fc`` in Hz, ``c`` in m/s.
    """

    a: float = 9.61
    b: float = 0.16
    eta_los: float = 1.0
    eta_nlos: float = 20.0
    fc: float = 2e9
    c: float = 3e8

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("environment coefficients a, b must be positive")
        # any finite excess losses are accepted; loss grows with distance only
        # when eta_nlos >= eta_los
        if not (math.isfinite(self.eta_los) and math.isfinite(self.eta_nlos)):
            raise ValueError("excess losses must be finite")
        if self.fc <= 0 or self.c <= 0:
            raise ValueError("fc and c must be positive")

    @property
    def E(self) -> float:
        return self.eta_los - self.eta_nlos

    @property
    def F(self) -> float:
        return 20.0 * math.log10(4.0 * math.pi * self.fc / self.c) + self.eta_nlos


@dataclass(frozen=True)
class TrajectoryConfig:
    center: tuple[float, float] = (250.0, 250.0)
    radius: float = 250.0
    H: float = 500.0
    speed: float = 20.0
    q_ecv: tuple[float, float] = (50.0, 50.0)
    slot_duration: float = 1.0

    def __post_init__(self):
        if self.radius <= 0 or self.H <= 0 or self.slot_duration <= 0:
            raise ValueError("radius, H and slot_duration must be positive")
        if self.speed < 0:
            raise ValueError("speed must be non-negative")

    @property
    def period(self) -> float:
        """Slots per lap; ``inf`` for a hovering UAV."""
        if self.speed == 0:
            return math.inf
        return 2.0 * math.pi * self.radius / (self.speed * self.slot_duration)


def uav_position(traj: TrajectoryConfig, t: int) -> np.ndarray:
    """Horizontal UAV coordinate at slot ``t`` (1-based), starting at angle 0."""
    if t < 1:
        raise ValueError("slot index starts at 1")
    angle = (t - 1) * traj.speed * traj.slot_duration / traj.radius
    cx, cy = traj.center
    return np.array([cx + traj.radius * math.cos(angle), cy + traj.radius * math.sin(angle)])


def horizontal_distance(p_uav, q_ecv) -> float:
    return math.hypot(p_uav[0] - q_ecv[0], p_uav[1] - q_ecv[1])


def elevation_angle(H: float, dis: float) -> float:
    """Elevation of the UAV seen from the ground node, in degrees."""
    if dis == 0:
        return 90.0
    return math.degrees(math.atan(H / dis))


def los_probability(env: ChannelEnvironment, theta: float) -> float:
    return 1.0 / (1.0 + env.a * math.exp(-env.b * (theta - env.a)))


def atg_path_loss_db(env: ChannelEnvironment, H: float, dis: float) -> float:
    p_los = los_probability(env, elevation_angle(H, dis))
    return 20.0 * math.log10(math.hypot(H, dis)) + env.E * p_los + env.F


def atg_path_loss(env: ChannelEnvironment, H: float, dis: float) -> float:
    """Linear path-loss factor ``10**(dB/10)``; this is what the SNR divides by."""
    return 10.0 ** (atg_path_loss_db(env, H, dis) / 10.0)


@dataclass(frozen=True)
class SlotGeometry:
    t: int
    position: np.ndarray
    dis: float
    theta: float
    path_loss_db: float
    path_loss: float


def slot_geometry(env: ChannelEnvironment, traj: TrajectoryConfig, t: int) -> SlotGeometry:
    pos = uav_position(traj, t)
    dis = horizontal_distance(pos, traj.q_ecv)
    loss_db = atg_path_loss_db(env, traj.H, dis)
    return SlotGeometry(
        t=t,
        position=pos,
        dis=dis,
        theta=elevation_angle(traj.H, dis),
        path_loss_db=loss_db,
        path_loss=10.0 ** (loss_db / 10.0),
    )

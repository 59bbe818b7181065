"""Joint source and channel control for UAV video links.

The per-slot problem trades coding distortion, channel distortion and power
under delay caps; a virtual queue keeps the encoder rate matched to the link.
"""

from .atg_channel import ChannelEnvironment, TrajectoryConfig, slot_geometry
from .channel_dprd import PowerBudget, TransmissionModel
from .config import ConfigError, ScenarioConfig, load_baseline, load_scenario
from .kernels import BACKEND
from .lyari_optimizer import (
    InfeasibleSlot,
    OptimizerConfig,
    SolverError,
    SystemModel,
    lyari_slot,
    run_horizon,
)
from .source_dprd import DecisionTriple, qp_to_qstep
from .sim import fit, oracle_check, simulate, sweep

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ChannelEnvironment", "ConfigError", "DecisionTriple", "InfeasibleSlot", "OptimizerConfig",
    "PowerBudget", "ScenarioConfig", "SolverError", "SystemModel", "TrajectoryConfig", "TransmissionModel",
    "fit", "load_baseline", "load_scenario", "lyari_slot", "oracle_check", "qp_to_qstep", "run_horizon",
    "simulate", "slot_geometry", "sweep",
]

"""Scenario configuration: JSON schema, loading with cross-field checks, serialization."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema

from .atg_channel import ChannelEnvironment, TrajectoryConfig
from .channel_dprd import PowerBudget, TransmissionModel
from .lyari_optimizer import OptimizerConfig, SystemModel
from .source_dprd import (
    DecisionTriple,
    DelayModel,
    PowerModel,
    RateDistortionModel,
    SigmaModel,
    coding_power,
    fit_dcoe_model,
    fit_sigma_model,
    qp_to_qstep,
    read_samples,
)

CIF_SYMBOL_RATE = 352 * 288 * 30


class ConfigError(ValueError):
    """Invalid scenario file; ``path`` names the offending field."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def _num(minimum=None, exclusive=None):
    s: dict[str, Any] = {"type": "number"}
    if minimum is not None:
        s["minimum"] = minimum
    if exclusive is not None:
        s["exclusiveMinimum"] = exclusive
    return s


def _obj(props: dict, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_PAIR = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}

SCHEMA = _obj(
    {
        "name": {"type": "string"},
        "T": {"type": "integer", "minimum": 1},
        "symbol_rate": _num(exclusive=0),
        "frames_per_slot": _num(exclusive=0),
        "channel": _obj(
            {k: _num() for k in ("a", "b", "eta_los", "eta_nlos", "fc", "c")},
        ),
        "trajectory": _obj(
            {
                "center": _PAIR,
                "radius": _num(exclusive=0),
                "H": _num(exclusive=0),
                "speed": _num(minimum=0),
                "q_ecv": _PAIR,
                "slot_duration": _num(exclusive=0),
            }
        ),
        "transmission": _obj({"B": _num(exclusive=0), "Pn_noise": _num(exclusive=0), "L": _num(exclusive=0)}),
        "sigma": _obj(
            {"a1": _num(), "a2": _num(), "a3": _num(), "a4": _num(), "samples": {"type": "string"}}
        ),
        "rate_distortion": _obj({"C": _num(exclusive=0), "K": _num(exclusive=0), "mu": _num(exclusive=0)}),
        "delay": _obj(
            {
                "d1": _num(), "d2": _num(), "d3": _num(), "d4": _num(),
                "N": {"type": "integer", "minimum": 1},
                "Cs": _num(minimum=1),
                "F_clk": _num(exclusive=0),
                "samples": {"type": "string"},
            }
        ),
        "power": _obj({"k": _num(exclusive=0), "F_clk": _num(minimum=0), "Pc": _num(minimum=0)}),
        "optimizer": _obj(
            {
                "V": _num(minimum=0),
                "rho1": _num(minimum=0),
                "rho2": _num(minimum=0),
                "d_max": _num(exclusive=0),
                "d_max_trans": _num(exclusive=0),
                "Pmax": _num(exclusive=0),
                "r_max": {"type": "integer", "minimum": 1},
                "conv_tol": _num(exclusive=0),
                "lambda_box": _PAIR,
                "qp_box": _PAIR,
                "pt_floor": _num(exclusive=0),
                "initial": _obj(
                    {
                        "lambda": _num(minimum=0),
                        "qp": _num(minimum=0),
                        "q_step": _num(exclusive=0),
                        "pt": _num(minimum=0),
                    },
                    required=("lambda", "pt"),
                ),
                "tsend_mode": {"enum": ["reserve", "previous"]},
                "backend": {"enum": ["reference", "clarabel"]},
            }
        ),
        "queue": _obj({"initial": {"type": "number"}, "rate_unit_bps": _num(exclusive=0)}),
        "oracle": _obj(
            {
                "enabled": {"type": "boolean"},
                "pt_points": {"type": "integer", "minimum": 1},
                "pt_spacing": {"enum": ["log", "linear"]},
                "dump_landscape": {"type": "boolean"},
            }
        ),
        "output": _obj({"csv": {"type": "string"}, "summary": {"type": "string"}}),
        "sweep": _obj(
            {
                "axes": {
                    "type": "object",
                    "propertyNames": {"enum": ["d_max", "d_max_trans", "rho1", "rho2", "V"]},
                    "additionalProperties": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                    "minProperties": 1,
                }
            },
            required=("axes",),
        ),
    }
)

DEFAULTS: dict[str, Any] = {
    "name": "scenario",
    "T": 40,
    "symbol_rate": CIF_SYMBOL_RATE,
    "frames_per_slot": 1.0,
    "channel": {"a": 9.61, "b": 0.16, "eta_los": 1.0, "eta_nlos": 20.0, "fc": 2e9, "c": 3e8},
    "trajectory": {
        "center": [250.0, 250.0], "radius": 250.0, "H": 500.0, "speed": 20.0,
        "q_ecv": [50.0, 50.0], "slot_duration": 1.0,
    },
    "transmission": {"B": 1e7, "Pn_noise": 2.3e-8, "L": 1e6},
    "sigma": {},
    "rate_distortion": {"C": 0.0015, "K": 0.55, "mu": 0.1},
    "delay": {"N": 396, "Cs": 10.0, "F_clk": 1e9},
    "power": {"k": 1.3e-24, "F_clk": 1e9, "Pc": 100.0},
    "optimizer": {
        "V": 4.0, "rho1": 2.0, "rho2": 0.01, "d_max": 2.8, "d_max_trans": 0.2, "Pmax": 2000.0,
        "r_max": 30, "conv_tol": 1e-5, "lambda_box": [1, 32], "qp_box": [18, 51], "pt_floor": 1.0,
        "initial": {"lambda": 4, "qp": 30, "pt": 100.0},
        "tsend_mode": "reserve", "backend": "reference",
    },
    "queue": {"initial": 0.01, "rate_unit_bps": 1e8},
    "oracle": {"enabled": False, "pt_points": 200, "pt_spacing": "log", "dump_landscape": False},
    "output": {"csv": "slots.csv", "summary": "summary.json"},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "axes":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ScenarioConfig:
    """A validated scenario.  ``raw`` is the merged document; ``base_dir`` anchors sample paths."""

    raw: dict
    system: SystemModel
    optimizer: OptimizerConfig
    T: int
    X1: float
    name: str
    base_dir: Path | None = None
    fits: dict = field(default_factory=dict)

    @property
    def oracle(self) -> dict:
        return self.raw["oracle"]

    @property
    def sweep_axes(self) -> dict[str, list[float]] | None:
        sw = self.raw.get("sweep")
        return dict(sw["axes"]) if sw else None

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def with_overrides(self, **changes) -> ScenarioConfig:
        """A new scenario with dotted-path overrides, e.g. ``{"optimizer.d_max": 2.9}``."""
        doc = self.to_dict()
        for path, value in changes.items():
            node = doc
            keys = path.split(".")
            for k in keys[:-1]:
                node = node.setdefault(k, {})
            node[keys[-1]] = value
        return from_dict(doc, self.base_dir)


def _schema_error(err: jsonschema.ValidationError) -> ConfigError:
    path = ".".join(str(p) for p in err.absolute_path) or "<root>"
    return ConfigError(err.message, path)


def _initial_triple(init: dict) -> DecisionTriple:
    has_qp, has_q = "qp" in init, "q_step" in init
    if has_qp == has_q:
        raise ConfigError("give exactly one of qp or q_step", "optimizer.initial")
    if has_qp:
        if not 0 <= init["qp"] <= 51:
            raise ConfigError("QP must lie in [0, 51]", "optimizer.initial.qp")
        Q = qp_to_qstep(init["qp"])
    else:
        Q = float(init["q_step"])
    return DecisionTriple(float(init["lambda"]), Q, float(init["pt"]))


def _resolve(base_dir: Path | None, p: str) -> Path:
    path = Path(p)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    return path


def from_dict(doc: dict, base_dir: Path | None = None) -> ScenarioConfig:
    if not isinstance(doc, dict):
        raise ConfigError("top level must be an object")
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as err:
        raise _schema_error(err) from None
    raw = _merge(DEFAULTS, doc)
    fits: dict = {}

    def build(path, fn):
        try:
            return fn()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc), path) from None

    env = build("channel", lambda: ChannelEnvironment(**raw["channel"]))
    tr = dict(raw["trajectory"])
    tr["center"] = tuple(tr["center"])
    tr["q_ecv"] = tuple(tr["q_ecv"])
    traj = build("trajectory", lambda: TrajectoryConfig(**tr))
    tx = build("transmission", lambda: TransmissionModel(**raw["transmission"]))
    rd = build("rate_distortion", lambda: RateDistortionModel(**raw["rate_distortion"]))

    sig = dict(raw["sigma"])
    if "samples" in sig:
        if set(sig) != {"samples"}:
            raise ConfigError("give either coefficients or a samples file", "sigma")
        rows = build("sigma.samples", lambda: read_samples(_resolve(base_dir, sig["samples"]), ("lambda", "qp", "sigma")))
        fit = build("sigma.samples", lambda: fit_sigma_model(rows, rd))
        fits["sigma"] = fit
        sigma_model = fit.model
    else:
        missing = {"a1", "a2", "a3", "a4"} - set(sig)
        if missing:
            raise ConfigError(f"missing coefficients {sorted(missing)}", "sigma")
        sigma_model = build("sigma", lambda: SigmaModel(**sig))

    dl = dict(raw["delay"])
    if "samples" in dl:
        rows = build("delay.samples", lambda: read_samples(_resolve(base_dir, dl.pop("samples")), ("q", "dcoe")))
        fit = build("delay.samples", lambda: fit_dcoe_model(rows))
        fits["delay"] = fit
        dl.update(d1=fit.d1, d2=fit.d2, d3=fit.d3, d4=fit.d4)
    missing = {"d1", "d2", "d3", "d4"} - set(dl)
    if missing:
        raise ConfigError(f"missing coefficients {sorted(missing)}", "delay")
    delay = build("delay", lambda: DelayModel(**dl))
    power = build("power", lambda: PowerModel(**raw["power"]))

    o = raw["optimizer"]
    if o["d_max_trans"] > o["d_max"]:
        raise ConfigError("d_max_trans must not exceed d_max", "optimizer.d_max_trans")
    Pe = coding_power(power)
    if power.Pc + Pe > o["Pmax"]:
        raise ConfigError(
            f"circuit + encoding power {power.Pc + Pe:g} mW exceeds Pmax {o['Pmax']:g} mW", "optimizer.Pmax"
        )
    budget = PowerBudget(o["Pmax"], power.Pc, Pe)
    init = _initial_triple(o["initial"])
    opt = build(
        "optimizer",
        lambda: OptimizerConfig(
            V=o["V"], rho1=o["rho1"], rho2=o["rho2"], d_max=o["d_max"], d_max_trans=o["d_max_trans"],
            Pmax=o["Pmax"], r_max=o["r_max"], conv_tol=o["conv_tol"],
            lam_box=tuple(float(v) for v in o["lambda_box"]), qp_box=tuple(float(v) for v in o["qp_box"]),
            pt_floor=o["pt_floor"], initial=init, tsend_mode=o["tsend_mode"], backend=o["backend"],
        ),
    )
    system = SystemModel(
        env=env, traj=traj, tx=tx, sigma=sigma_model, rd=rd, delay=delay, power=power, budget=budget,
        symbol_rate=float(raw["symbol_rate"]), rate_unit=float(raw["queue"]["rate_unit_bps"]),
        frames_per_slot=float(raw["frames_per_slot"]),
    )
    if not math.isfinite(raw["queue"]["initial"]):
        raise ConfigError("must be finite", "queue.initial")
    return ScenarioConfig(
        raw=raw, system=system, optimizer=opt, T=int(raw["T"]), X1=float(raw["queue"]["initial"]),
        name=str(raw["name"]), base_dir=base_dir, fits=fits,
    )


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return from_dict(doc, path.parent)


def dump_scenario(cfg: ScenarioConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)


def baseline_path() -> Path:
    return Path(str(resources.files("lyari") / "data" / "paper_baseline.json"))


def load_baseline() -> ScenarioConfig:
    return load_scenario(baseline_path())

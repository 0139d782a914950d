"""Scenario configuration: defaults, YAML loading and validation.

The config file is the single source of truth for an episode; its full echo
is embedded in every episode log so runs replay bit-exactly.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Any, Optional

import yaml

from .drivers import DriverProfile, IdmParams, style_profile
from .payoff import HvWeights, SvWeights
from .trust import TrustParams, TrustThresholds
from .world import RoadLayout, VehicleKind

SCHEMA_VERSION = 1

CONTROLLERS = ("sv", "av", "surrogate", "constant", "external")
MODES = ("trust_on", "trust_off")

# Ledgered default initial speeds per surrogate style.
STYLE_SPEEDS = {"defensive": 13.0, "normal": 14.5, "aggressive": 16.0}
STYLE_HEADWAY_T = {"defensive": 2.2, "normal": 1.5, "aggressive": 0.9}

# The scenario spawns this long before the SV starts signaling, so style
# classification sees an undisturbed following window first. At signal time
# the human vehicle sits just ahead of the SV, following the lead AV at its
# style-equilibrium headway, with the trailing AV 50 m behind the lead.
RUNUP_S = 5.5
SIGNAL_S = 30.0            # SV station where signaling begins (zone - lead)
HV_AT_SIGNAL = SIGNAL_S + 5.0
AV_SPACING = 55.0          # lead-to-trailing AV station difference (50 m gap)


def _platoon_spawn(style: str) -> dict[str, tuple[float, float]]:
    """Spawn (station, speed) per vehicle so the at-signal geometry holds."""
    v_hv = STYLE_SPEEDS[style]
    front_gap = 2.0 + STYLE_HEADWAY_T[style] * v_hv  # IDM s0 + T*v
    lead_at_signal = HV_AT_SIGNAL + front_gap + 5.0
    return {
        "sv": (round(SIGNAL_S - 15.0 * RUNUP_S, 1), 15.0),
        "hv": (round(HV_AT_SIGNAL - v_hv * RUNUP_S, 1), v_hv),
        "lead_av": (round(lead_at_signal - 15.0 * RUNUP_S, 1), 15.0),
        "trail_av": (round(lead_at_signal - AV_SPACING - 15.0 * RUNUP_S, 1), 15.0),
    }


class ConfigError(ValueError):
    """Invalid scenario configuration; the message names the field."""


@dataclass(frozen=True)
class VehicleSpec:
    vid: int
    kind: VehicleKind
    controller: str
    lane: int
    s: float
    v: float
    profile: Optional[DriverProfile] = None
    const_accel: float = 0.0

    def __post_init__(self) -> None:
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"vehicle {self.vid}: unknown controller {self.controller!r}")
        if self.v < 0:
            raise ConfigError(f"vehicle {self.vid}: negative initial speed")


@dataclass(frozen=True)
class HilConfig:
    port: int = 8765
    pace: float = 1.0           # 1.0 = wall clock; 0 = as fast as possible
    lockstep: bool = False      # await one control per decision step (tapes)
    human_vehicle: Optional[int] = None
    connect_timeout: float = 120.0
    max_drift: float = 0.05


@dataclass(frozen=True)
class ScenarioConfig:
    layout: RoadLayout
    vehicles: tuple[VehicleSpec, ...]
    dt: float = 0.1
    decision_interval: float = 0.5
    duration: float = 45.0
    perception_range: float = 150.0
    seed: int = 0
    mode: str = "trust_on"
    trust: TrustParams = field(default_factory=TrustParams)
    trust_alpha0: float = 3.0
    trust_beta0: float = 2.0
    sv_weights: SvWeights = field(default_factory=SvWeights)
    hv_weights: HvWeights = field(default_factory=HvWeights)
    sv_v_desire: float = 15.0
    hil: HilConfig = field(default_factory=HilConfig)

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ConfigError("dt: must be positive")
        ratio = self.decision_interval / self.dt
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigError("decision_interval: must be a positive multiple of dt")
        if self.perception_range <= 0:
            raise ConfigError("perception_range: must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode: {self.mode!r} not one of {MODES}")
        svs = [v for v in self.vehicles if v.controller == "sv"]
        if len(svs) != 1:
            raise ConfigError("vehicles: exactly one vehicle must have controller 'sv'")
        if svs[0].lane != self.layout.ramp_lane:
            raise ConfigError("vehicles: the SV must start on the ramp lane")
        ids = [v.vid for v in self.vehicles]
        if len(set(ids)) != len(ids):
            raise ConfigError("vehicles: ids must be unique")
        by_lane: dict[int, list[VehicleSpec]] = {}
        for v in self.vehicles:
            by_lane.setdefault(v.lane, []).append(v)
        for lane, members in by_lane.items():
            members = sorted(members, key=lambda m: m.s)
            for rear, front in zip(members, members[1:]):
                if front.s - rear.s < 5.0:
                    raise ConfigError(
                        f"vehicles: {rear.vid} and {front.vid} overlap in lane {lane}")

    @property
    def sv_id(self) -> int:
        return next(v.vid for v in self.vehicles if v.controller == "sv")

    @property
    def steps_per_decision(self) -> int:
        return int(round(self.decision_interval / self.dt))

    @property
    def hv_ids(self) -> list[int]:
        return [v.vid for v in self.vehicles if v.kind == VehicleKind.HV]


# ---------------------------------------------------------------------------
# dict <-> dataclass round trip


def _profile_to_dict(p: DriverProfile) -> dict:
    return {
        "gamma": p.gamma, "tau": p.tau, "v_desire": p.v_desire,
        "noise_w": p.noise_w, "reaction_delay": p.reaction_delay,
        "idm": {"v0": p.idm.v0, "T": p.idm.T, "a_max": p.idm.a_max,
                "b": p.idm.b, "s0": p.idm.s0},
    }


def _profile_from_dict(data: dict, where: str) -> DriverProfile:
    try:
        if "style" in data:
            base = style_profile(data["style"],
                                 tau=float(data.get("tau", 0.5)),
                                 v_desire=float(data.get("v_desire", 15.0)),
                                 noise_w=float(data.get("noise_w", 1.0)))
            if "gamma" in data:
                base = DriverProfile(gamma=float(data["gamma"]), tau=base.tau,
                                     v_desire=base.v_desire, idm=base.idm,
                                     noise_w=base.noise_w)
            return base
        idm = IdmParams(**data["idm"]) if "idm" in data else IdmParams()
        return DriverProfile(
            gamma=float(data.get("gamma", 0.5)), tau=float(data.get("tau", 0.5)),
            v_desire=float(data.get("v_desire", 15.0)), idm=idm,
            reaction_delay=float(data.get("reaction_delay", 0.0)),
            noise_w=float(data.get("noise_w", 1.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_to_dict(cfg: ScenarioConfig) -> dict:
    vehicles = []
    for v in cfg.vehicles:
        entry: dict[str, Any] = {
            "id": v.vid, "kind": v.kind.value, "controller": v.controller,
            "lane": v.lane, "s": v.s, "v": v.v,
        }
        if v.profile is not None:
            entry["profile"] = _profile_to_dict(v.profile)
        if v.controller == "constant":
            entry["accel"] = v.const_accel
        vehicles.append(entry)
    th = cfg.trust.thresholds
    return {
        "schema_version": SCHEMA_VERSION,
        "dt": cfg.dt,
        "decision_interval": cfg.decision_interval,
        "duration": cfg.duration,
        "perception_range": cfg.perception_range,
        "seed": cfg.seed,
        "mode": cfg.mode,
        "layout": {
            "merge_zone": list(cfg.layout.merge_zone),
            "lane_width": cfg.layout.lane_width,
        },
        "trust": {
            "Z": cfg.trust.Z, "H": cfg.trust.H,
            "thresholds": {"delta_x": th.delta_x, "delta_v": th.delta_v,
                           "eps_x": th.eps_x, "eps_v": th.eps_v},
            "alpha0": cfg.trust_alpha0, "beta0": cfg.trust_beta0,
        },
        "weights": {
            "sv": {"safe": cfg.sv_weights.safe, "eff": cfg.sv_weights.eff,
                   "com": cfg.sv_weights.com, "trust": cfg.sv_weights.trust,
                   "xi1": cfg.sv_weights.xi1, "xi2": cfg.sv_weights.xi2},
            "hv": {"safe": cfg.hv_weights.safe, "eff": cfg.hv_weights.eff,
                   "com": cfg.hv_weights.com},
        },
        "sv": {"v_desire": cfg.sv_v_desire},
        "vehicles": vehicles,
        "hil": {"port": cfg.hil.port, "pace": cfg.hil.pace,
                "lockstep": cfg.hil.lockstep,
                "human_vehicle": cfg.hil.human_vehicle,
                "connect_timeout": cfg.hil.connect_timeout},
    }


def _require(data: dict, key: str, where: str) -> Any:
    if key not in data:
        raise ConfigError(f"{where}: missing required field '{key}'")
    return data[key]


def config_from_dict(data: dict) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, found {version}")

    layout_data = data.get("layout", {})
    zone = layout_data.get("merge_zone", [60.0, 220.0])
    if not (isinstance(zone, (list, tuple)) and len(zone) == 2):
        raise ConfigError("layout.merge_zone: expected [start, end]")
    layout = RoadLayout(merge_zone=(float(zone[0]), float(zone[1])),
                        lane_width=float(layout_data.get("lane_width", 3.5)))

    vehicles = []
    for i, entry in enumerate(_require(data, "vehicles", "config")):
        where = f"vehicles[{i}]"
        try:
            kind = VehicleKind(_require(entry, "kind", where))
        except ValueError as exc:
            raise ConfigError(f"{where}.kind: {exc}") from exc
        profile = None
        if "profile" in entry:
            profile = _profile_from_dict(entry["profile"], f"{where}.profile")
        elif kind == VehicleKind.HV:
            profile = DriverProfile()
        vehicles.append(VehicleSpec(
            vid=int(_require(entry, "id", where)),
            kind=kind,
            controller=str(_require(entry, "controller", where)),
            lane=int(_require(entry, "lane", where)),
            s=float(_require(entry, "s", where)),
            v=float(_require(entry, "v", where)),
            profile=profile,
            const_accel=float(entry.get("accel", 0.0)),
        ))

    trust_data = data.get("trust", {})
    th = trust_data.get("thresholds", {})
    trust = TrustParams(
        Z=int(trust_data.get("Z", 200)),
        H=int(trust_data.get("H", 30)),
        dt=float(_require(data, "dt", "config")),
        thresholds=TrustThresholds(
            delta_x=float(th.get("delta_x", 2.0)),
            delta_v=float(th.get("delta_v", 1.0)),
            eps_x=float(th.get("eps_x", 2.0)),
            eps_v=float(th.get("eps_v", 1.0))),
    )

    weights = data.get("weights", {})
    svw = weights.get("sv", {})
    hvw = weights.get("hv", {})
    try:
        sv_weights = SvWeights(
            safe=float(svw.get("safe", 1.0)), eff=float(svw.get("eff", 1.0)),
            com=float(svw.get("com", 0.5)), trust=float(svw.get("trust", 1.0)),
            xi1=float(svw.get("xi1", 0.5)), xi2=float(svw.get("xi2", 0.5)))
        hv_weights = HvWeights(safe=float(hvw.get("safe", 1.0)),
                               eff=float(hvw.get("eff", 1.0)),
                               com=float(hvw.get("com", 1.0)))
    except ValueError as exc:
        raise ConfigError(f"weights: {exc}") from exc

    hil_data = data.get("hil", {})
    hil = HilConfig(
        port=int(hil_data.get("port", 8765)),
        pace=float(hil_data.get("pace", 1.0)),
        lockstep=bool(hil_data.get("lockstep", False)),
        human_vehicle=hil_data.get("human_vehicle"),
        connect_timeout=float(hil_data.get("connect_timeout", 120.0)),
    )

    try:
        return ScenarioConfig(
            layout=layout,
            vehicles=tuple(vehicles),
            dt=float(_require(data, "dt", "config")),
            decision_interval=float(_require(data, "decision_interval", "config")),
            duration=float(data.get("duration", 45.0)),
            perception_range=float(data.get("perception_range", 150.0)),
            seed=int(data.get("seed", 0)),
            mode=str(data.get("mode", "trust_on")),
            trust=trust,
            trust_alpha0=float(trust_data.get("alpha0", 3.0)),
            trust_beta0=float(trust_data.get("beta0", 2.0)),
            sv_weights=sv_weights,
            hv_weights=hv_weights,
            sv_v_desire=float(data.get("sv", {}).get("v_desire", 15.0)),
            hil=hil,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str) -> ScenarioConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def save_config(cfg: ScenarioConfig, path: str) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)


# ---------------------------------------------------------------------------
# Default on-ramp scenario


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def default_scenario_dict() -> dict:
    """The reference merging layout: SV on the ramp beside a three-vehicle
    mainline platoon (lead AV far ahead, one HV, one trailing AV 50 m behind
    the lead)."""
    return {
        "schema_version": SCHEMA_VERSION,
        "dt": 0.1,
        "decision_interval": 0.5,
        "duration": 45.0,
        "perception_range": 150.0,
        "seed": 0,
        "mode": "trust_on",
        "layout": {"merge_zone": [60.0, 320.0], "lane_width": 3.5},
        "trust": {"Z": 200, "H": 30,
                  "thresholds": {"delta_x": 2.0, "delta_v": 1.0,
                                 "eps_x": 2.0, "eps_v": 1.0},
                  "alpha0": 3.0, "beta0": 2.0},
        "weights": {"sv": {"safe": 1.0, "eff": 1.0, "com": 0.5, "trust": 1.0,
                           "xi1": 0.5, "xi2": 0.5},
                    "hv": {"safe": 1.0, "eff": 1.0, "com": 1.0}},
        "sv": {"v_desire": 15.0},
        "vehicles": [
            {"id": 0, "kind": "AV", "controller": "sv", "lane": 0, "s": -52.5, "v": 15.0},
            {"id": 1, "kind": "HV", "controller": "surrogate", "lane": 1,
             "s": -36.5, "v": 13.0,
             "profile": {"style": "defensive", "tau": 0.5, "v_desire": 15.0,
                         "noise_w": 0.5}},
            {"id": 2, "kind": "AV", "controller": "av", "lane": 1, "s": -6.9, "v": 15.0},
            {"id": 3, "kind": "AV", "controller": "av", "lane": 1, "s": -61.9, "v": 15.0},
        ],
        "hil": {"port": 8765, "pace": 1.0, "lockstep": False,
                "human_vehicle": 1, "connect_timeout": 120.0},
    }


def init_merge_scenario(overrides: Optional[dict] = None, *,
                        seed: Optional[int] = None, mode: Optional[str] = None,
                        hv_style: Optional[str] = None, hv_tau: Optional[float] = None,
                        drop_hv: bool = False) -> ScenarioConfig:
    """Default merging scenario with optional shorthand overrides.

    `hv_style` / `hv_tau` retune the human vehicle (its initial speed follows
    the style); `drop_hv` yields the all-automated variant; `overrides` is a
    deep-merged raw dict for anything else.
    """
    data = default_scenario_dict()
    if hv_style is not None or hv_tau is not None:
        hv = data["vehicles"][1]
        if hv_style is not None:
            if hv_style not in STYLE_SPEEDS:
                raise ConfigError(f"hv_style: unknown style {hv_style!r}")
            hv["profile"]["style"] = hv_style
            spawn = _platoon_spawn(hv_style)
            hv["s"], hv["v"] = spawn["hv"]
            data["vehicles"][2]["s"], data["vehicles"][2]["v"] = spawn["lead_av"]
            data["vehicles"][3]["s"], data["vehicles"][3]["v"] = spawn["trail_av"]
        if hv_tau is not None:
            hv["profile"]["tau"] = float(hv_tau)
    if drop_hv:
        data["vehicles"] = [v for v in data["vehicles"] if v["kind"] != "HV"]
        data["hil"]["human_vehicle"] = None
    if seed is not None:
        data["seed"] = int(seed)
    if mode is not None:
        data["mode"] = mode
    if overrides:
        data = _deep_merge(data, overrides)
    return config_from_dict(data)

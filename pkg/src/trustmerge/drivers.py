"""Scripted human-driver surrogates and the trajectory-based style classifier.

Surrogates follow the intelligent driver model and, once the subject vehicle
signals, draw a yield/maintain choice from a logit over their own payoffs.
The latent trust propensity `tau` shifts that choice, controls how sticky it
is between decision intervals, and scales an extra hesitation noise, so that
decisive behavior is identifiable from the outside. Commanded accelerations
are continuous, like a real driver's pedal input; the discrete action
vocabulary belongs to the game layer only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .payoff import (HvWeights, PayoffContext, STYLE_AGGRESSIVE, STYLE_DEFENSIVE,
                     STYLE_NORMAL, component_payoffs, hv_payoff, validate_style)
from .world import (ACCEL_MIN, LateralIntent, MergePhase, THW_CAP, VehicleState,
                    bumper_gap, clamp_accel, jerk_of, step_longitudinal,
                    thw_from_gap)


@dataclass(frozen=True)
class IdmParams:
    v0: float = 16.7
    T: float = 1.5
    a_max: float = 1.5
    b: float = 2.0
    s0: float = 2.0

    def __post_init__(self) -> None:
        if min(self.v0, self.T, self.a_max, self.b, self.s0) <= 0:
            raise ValueError("IDM parameters must be positive")


# Style presets tuned so the classifier recovers the generating class.
IDM_PRESETS = {
    "aggressive": IdmParams(T=0.9, a_max=2.5),
    "normal": IdmParams(T=1.5, a_max=1.5),
    "defensive": IdmParams(T=2.2, a_max=1.0),
}

# Standing dither keeps style observable in calm traffic (fraction of a_max).
BASE_DITHER_FRACTION = 0.15
# Log-odds shift and hesitation noise coupling for the trust propensity.
TAU_LOGODDS_GAIN = 2.0
TAU_NOISE_FLOOR = 1.5
ASSERT_PUSH = 0.75  # decisive non-yielders push forward by tau * this
YIELD_LOOKBACK = 30.0  # m the merger may trail and still be yielded to


@dataclass(frozen=True)
class DriverProfile:
    gamma: float = STYLE_NORMAL
    tau: float = 0.5
    v_desire: float = 15.0
    idm: IdmParams = field(default_factory=IdmParams)
    reaction_delay: float = 0.0
    noise_w: float = 0.5
    hv_weights: HvWeights = field(default_factory=HvWeights)

    def __post_init__(self) -> None:
        validate_style(self.gamma)
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.v_desire <= 0:
            raise ValueError("v_desire must be positive")
        if self.noise_w < 0:
            raise ValueError("noise_w must be nonnegative")


def style_profile(style: str, tau: float = 0.5, v_desire: float = 15.0,
                  noise_w: float = 0.5) -> DriverProfile:
    if style not in IDM_PRESETS:
        raise ValueError(f"unknown style {style!r}; choose from {sorted(IDM_PRESETS)}")
    gamma = {"aggressive": STYLE_AGGRESSIVE, "normal": STYLE_NORMAL,
             "defensive": STYLE_DEFENSIVE}[style]
    return DriverProfile(gamma=gamma, tau=tau, v_desire=v_desire,
                         idm=IDM_PRESETS[style], noise_w=noise_w)


def idm_accel(gap: Optional[float], v: float, dv: float, params: IdmParams) -> float:
    """Intelligent-driver-model acceleration, clamped to the actuator range.

    `gap` is the bumper gap to the leader (None for a free road); `dv` is the
    closing speed v_follower - v_leader.
    """
    free = params.a_max * (1.0 - (v / params.v0) ** 4)
    if gap is None:
        return clamp_accel(free)
    if gap <= 0:
        return ACCEL_MIN
    s_star = params.s0 + v * params.T + v * dv / (2.0 * math.sqrt(params.a_max * params.b))
    s_star = max(s_star, params.s0)
    accel = params.a_max * (1.0 - (v / params.v0) ** 4 - (s_star / gap) ** 2)
    return clamp_accel(accel)


# ---------------------------------------------------------------------------
# Style classification from trajectory windows


@dataclass(frozen=True)
class StyleFeatures:
    mean_thw: float
    max_abs_accel: float
    jerk_std: float


# Min-max reference ranges for feature normalization (calibrated against the
# surrogate presets; see the self-consistency test).
INV_THW_RANGE = (0.30, 0.72)
ACCEL_RANGE = (0.2, 2.0)
JERK_RANGE = (0.0, 1.6)
STYLE_WEIGHTS = (0.5, 0.3, 0.2)
AGGRESSIVE_SCORE = 0.6
DEFENSIVE_SCORE = 0.4


def extract_style_features(states: list[VehicleState],
                           leaders: list[Optional[VehicleState]],
                           dt: float) -> StyleFeatures:
    """Features over a trailing window (>= 5 s recommended)."""
    if len(states) != len(leaders):
        raise ValueError("states and leaders must align")
    if len(states) < 2:
        raise ValueError("window too short for features")
    thws = []
    for st, ld in zip(states, leaders):
        if ld is None:
            thws.append(THW_CAP)
            continue
        gap = bumper_gap(st, ld)
        thws.append(THW_CAP if gap < 0 else thw_from_gap(gap, st.v))
    accels = [st.a for st in states]
    jerks = jerk_of(accels, dt)
    return StyleFeatures(
        mean_thw=float(np.mean(thws)),
        max_abs_accel=float(np.max(np.abs(accels))),
        jerk_std=float(np.std(jerks)),
    )


def _norm(value: float, lo: float, hi: float) -> float:
    return min(max((value - lo) / (hi - lo), 0.0), 1.0)


def classify_style(features: StyleFeatures) -> float:
    """Map trajectory features to a style factor preset.

    Degenerate windows (no headway information, no motion) fall back to the
    normal style.
    """
    if features.mean_thw <= 0 or not math.isfinite(features.mean_thw):
        return STYLE_NORMAL
    score = (STYLE_WEIGHTS[0] * _norm(1.0 / features.mean_thw, *INV_THW_RANGE)
             + STYLE_WEIGHTS[1] * _norm(features.max_abs_accel, *ACCEL_RANGE)
             + STYLE_WEIGHTS[2] * _norm(features.jerk_std, *JERK_RANGE))
    if score >= AGGRESSIVE_SCORE:
        return STYLE_AGGRESSIVE
    if score <= DEFENSIVE_SCORE:
        return STYLE_DEFENSIVE
    return STYLE_NORMAL


# ---------------------------------------------------------------------------
# Surrogate stepping


@dataclass(frozen=True)
class SurrogateView:
    """What the surrogate perceives at one decision boundary."""

    me: VehicleState
    leader: Optional[VehicleState]
    sv: Optional[VehicleState]          # projected onto the surrogate's lane axis
    sv_signal: MergePhase = MergePhase.NONE


@dataclass(frozen=True)
class SurrogateDecision:
    """Sticky yield/maintain choice carried between decision intervals."""

    intent: LateralIntent = LateralIntent.MAINTAIN
    decided: bool = False
    prev_accel: Optional[float] = None


@dataclass(frozen=True)
class DriverCommand:
    accel: float
    intent: LateralIntent


def _follow_accel(me: VehicleState, leader: Optional[VehicleState], params: IdmParams) -> float:
    if leader is None:
        return idm_accel(None, me.v, 0.0, params)
    gap = bumper_gap(me, leader)
    if gap <= 0:
        return ACCEL_MIN
    return idm_accel(gap, me.v, me.v - leader.v, params)


def _yield_accel(profile: DriverProfile, view: SurrogateView) -> float:
    """Settle behind the merger: brake firmly if squeezed, never contest."""
    a = max(_follow_accel(view.me, view.sv, profile.idm), -2.5)
    a = min(a, 0.8)
    if view.leader is not None:
        a = min(a, _follow_accel(view.me, view.leader, profile.idm))
    return a


def _yield_maintain_payoffs(profile: DriverProfile, view: SurrogateView,
                            dt: float) -> tuple[float, float]:
    """Strategic payoffs of yielding vs carrying on.

    Yielding is scored at its settled outcome (own equilibrium headway
    behind the merger, matched speed) plus the immediate braking cost;
    maintaining at a one-interval rollout behind the current leader. The
    instantaneous squeeze while the slot opens would otherwise make every
    mid-maneuver redraw flip the decision.
    """
    settled_thw = profile.idm.T + profile.idm.s0 / max(view.me.v, 1.0)
    u_safe_y = min(settled_thw / 2.0, 1.0)
    sv_v = view.sv.v if view.sv is not None else view.me.v
    u_eff_y = 1.0 - min(abs(sv_v - profile.v_desire) / profile.v_desire, 1.0)
    # Braking toward the slot is transient; settled comfort is neutral.
    u_yield = hv_payoff((u_safe_y, u_eff_y, 1.0), profile.gamma, profile.hv_weights)

    a_maintain = _follow_accel(view.me, view.leader, profile.idm)
    me_next = step_longitudinal(view.me, a_maintain, dt)
    lead_next = (step_longitudinal(view.leader, 0.0, dt)
                 if view.leader is not None else None)
    comps = component_payoffs(me_next, PayoffContext(
        leader=lead_next, v_desire=profile.v_desire,
        accel_window=(view.me.a, a_maintain)))
    u_maintain = hv_payoff(comps, profile.gamma, profile.hv_weights)
    return u_yield, u_maintain


def hv_surrogate_step(profile: DriverProfile, view: SurrogateView,
                      memory: SurrogateDecision, rng: np.random.Generator,
                      decision_dt: float = 0.5) -> tuple[DriverCommand, SurrogateDecision]:
    """One decision-interval step of the scripted human driver.

    Returns the continuous acceleration command plus the updated sticky
    decision. Deterministic given the rng stream.
    """
    base = _follow_accel(view.me, view.leader, profile.idm)
    dither = rng.normal(0.0, BASE_DITHER_FRACTION * profile.idm.a_max)

    # Yielding makes sense while the merger's slot is ahead of this driver
    # (including when it still trails slightly on the ramp) and the merger
    # is actually moving; nobody holds a highway stop for a parked car.
    signal_active = (view.sv_signal in (MergePhase.SIGNALING, MergePhase.EXECUTING)
                     and view.sv is not None
                     and view.sv.s > view.me.s - YIELD_LOOKBACK
                     and view.sv.v >= 2.0)
    if not signal_active:
        return (DriverCommand(accel=clamp_accel(base + dither),
                              intent=LateralIntent.MAINTAIN),
                SurrogateDecision())

    # Redraw the yield choice when undecided; hesitant drivers redraw often.
    redraw = (not memory.decided) or (rng.random() < (1.0 - profile.tau))
    if redraw:
        u_yield, u_maintain = _yield_maintain_payoffs(profile, view, decision_dt)
        logodds = (u_yield - u_maintain) + TAU_LOGODDS_GAIN * (profile.tau - 0.5)
        p_yield = 1.0 / (1.0 + math.exp(-logodds))
        intent = LateralIntent.YIELD if rng.random() < p_yield else LateralIntent.MAINTAIN
    else:
        intent = memory.intent

    if intent == LateralIntent.YIELD:
        # Hesitant drivers only half-commit to the maneuver; decisive ones
        # execute it at full depth.
        commitment = 0.3 + 0.7 * profile.tau
        accel = base + commitment * (_yield_accel(profile, view) - base)
    else:
        # Carry on; decisive non-yielders contest the slot unless squeezed
        # against their own leader already.
        accel = base
        if base > -0.5:
            accel = base + ASSERT_PUSH * profile.tau

    hesitation = rng.normal(0.0, math.sqrt(profile.noise_w * (TAU_NOISE_FLOOR - profile.tau)))
    accel = accel + dither + hesitation
    # Calm decisive drivers move the pedal smoothly; hesitant ones lunge.
    slew = 3.0 * (1.2 - 0.8 * profile.tau)
    prev = memory.prev_accel if memory.prev_accel is not None else view.me.a
    accel = min(max(accel, prev - slew), prev + slew)
    accel = clamp_accel(accel)
    return (DriverCommand(accel=accel, intent=intent),
            SurrogateDecision(intent=intent, decided=True, prev_accel=accel))

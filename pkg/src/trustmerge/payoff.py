"""Utility functions for both driver kinds.

Component payoffs are clamped-linear maps into [0, 1] built on time headway
(safety), desired-speed deviation (efficiency) and jerk (comfort). The
human-vehicle total blends them through a driving-style factor; the
subject-vehicle total adds a two-part trust term: the probability that the
responder reacts favorably, and the margin between the subject vehicle's two
most likely actions (self-predictability).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .world import VehicleState, bumper_gap, thw_from_gap

# Driving style presets: gamma trades safety/comfort against efficiency.
STYLE_AGGRESSIVE = 0.7
STYLE_NORMAL = 0.5
STYLE_DEFENSIVE = 0.3
STYLE_PRESETS = {
    "aggressive": STYLE_AGGRESSIVE,
    "normal": STYLE_NORMAL,
    "defensive": STYLE_DEFENSIVE,
}

SAFE_THW_SCALE = 2.0     # THW at which the safety payoff saturates
COMFORT_JERK_SCALE = 3.0  # |jerk| at which the comfort payoff floors
COMMAND_JERK_DT = 1.0    # command steps are scored as per-second jerk


def validate_style(gamma: float) -> float:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"style factor {gamma} outside [0, 1]")
    return gamma


@dataclass(frozen=True)
class HvWeights:
    """Safety / efficiency / comfort weights for the human payoff."""

    safe: float = 1.0
    eff: float = 1.0
    com: float = 1.0

    def __post_init__(self) -> None:
        if min(self.safe, self.eff, self.com) < 0:
            raise ValueError("HV weights must be nonnegative")


@dataclass(frozen=True)
class SvWeights:
    """Weights of the subject-vehicle total, including the trust split.

    xi1 + xi2 = 1 normalizes the two trust terms into one channel whose
    overall strength is k_trust.
    """

    safe: float = 1.0
    eff: float = 1.0
    com: float = 0.5
    trust: float = 1.0
    xi1: float = 0.5
    xi2: float = 0.5

    def __post_init__(self) -> None:
        if min(self.safe, self.eff, self.com, self.trust, self.xi1, self.xi2) < 0:
            raise ValueError("SV weights must be nonnegative")
        if abs(self.xi1 + self.xi2 - 1.0) > 1e-9:
            raise ValueError("xi1 + xi2 must equal 1")

    def without_trust(self) -> "SvWeights":
        return SvWeights(self.safe, self.eff, self.com, 0.0, self.xi1, self.xi2)


@dataclass(frozen=True)
class PayoffBreakdown:
    u_safe: float
    u_eff: float
    u_com: float
    u_trust: float = 0.0
    total: float = 0.0


@dataclass(frozen=True)
class PayoffContext:
    """What a component evaluation needs besides the ego state.

    `leader` is the vehicle ahead on the ego's (projected) lane axis, or
    None for a free road. `accel_window` holds recent accelerations, newest
    last; its final first-difference over `jerk_dt` is the jerk that the
    comfort term sees.
    """

    leader: Optional[VehicleState]
    v_desire: float
    accel_window: Sequence[float] = ()
    jerk_dt: float = COMMAND_JERK_DT


def window_jerk(accel_window: Sequence[float], jerk_dt: float) -> float:
    if len(accel_window) < 2:
        return 0.0
    return (accel_window[-1] - accel_window[-2]) / jerk_dt


def component_payoffs(ego: VehicleState, context: PayoffContext) -> tuple[float, float, float]:
    """Safety, efficiency and comfort components, each clamped to [0, 1]."""
    if context.v_desire <= 0:
        raise ValueError("v_desire must be positive")

    if context.leader is None:
        u_safe = 1.0
    else:
        gap = bumper_gap(ego, context.leader)
        if gap <= 0:
            # Bumper contact (or overlap) is maximally unsafe regardless of
            # the stopped-follower headway cap.
            u_safe = 0.0
        else:
            u_safe = min(thw_from_gap(gap, ego.v) / SAFE_THW_SCALE, 1.0)

    u_eff = 1.0 - min(abs(ego.v - context.v_desire) / context.v_desire, 1.0)
    jerk = window_jerk(context.accel_window, context.jerk_dt)
    u_com = 1.0 - min(abs(jerk) / COMFORT_JERK_SCALE, 1.0)
    return (u_safe, u_eff, u_com)


def hv_payoff(components: tuple[float, float, float], gamma: float,
              weights: HvWeights = HvWeights()) -> float:
    """Style-weighted human payoff.

    gamma = 1 cares only about efficiency, gamma = 0 only about safety; the
    comfort weight peaks at gamma = 0.5.
    """
    validate_style(gamma)
    u_safe, u_eff, u_com = components
    return ((1.0 - gamma) * weights.safe * u_safe
            + gamma * weights.eff * u_eff
            + (1.0 - abs(1.0 - 2.0 * gamma)) * weights.com * u_com)


def fv_response_distribution(payoffs: Sequence[float]) -> np.ndarray:
    """Logit (softmax) response probabilities over a responder's action set.

    Stabilized by max subtraction, which leaves the distribution unchanged.
    """
    values = np.asarray(payoffs, dtype=float)
    if values.size == 0:
        raise ValueError("responder action set must be nonempty")
    if not np.all(np.isfinite(values)):
        raise ValueError("payoffs must be finite")
    shifted = values - values.max()
    weights = np.exp(shifted)
    return weights / weights.sum()


def trust1(dist: Sequence[float], favorable: Sequence[bool]) -> float:
    """Probability mass of the favorable responses (empty set scores 0)."""
    dist = np.asarray(dist, dtype=float)
    mask = np.asarray(favorable, dtype=bool)
    if mask.shape != dist.shape:
        raise ValueError("favorable mask must match the distribution length")
    if not mask.any():
        return 0.0
    return float(dist[mask].sum())


def trust2(dist: Sequence[float]) -> float:
    """Margin between the most and second-most likely action.

    A lone action is maximally predictable (1.0); a tie for the top yields 0.
    """
    values = np.asarray(dist, dtype=float)
    if values.size == 0:
        raise ValueError("action distribution must be nonempty")
    if values.size == 1:
        return 1.0
    top_two = np.sort(values)[-2:]
    return float(top_two[1] - top_two[0])


def sv_trust_term(u_t1: float, u_t2: float, weights: SvWeights) -> float:
    return weights.xi1 * u_t1 + weights.xi2 * u_t2


def sv_payoff(components: tuple[float, float, float],
              trust_terms: tuple[float, float],
              weights: SvWeights) -> float:
    """Subject-vehicle total: weighted components plus the trust channel."""
    u_safe, u_eff, u_com = components
    u_trust = sv_trust_term(trust_terms[0], trust_terms[1], weights)
    return (weights.safe * u_safe + weights.eff * u_eff
            + weights.com * u_com + weights.trust * u_trust)


def sv_breakdown(components: tuple[float, float, float],
                 trust_terms: tuple[float, float],
                 weights: SvWeights) -> PayoffBreakdown:
    u_trust = sv_trust_term(trust_terms[0], trust_terms[1], weights)
    return PayoffBreakdown(
        u_safe=components[0], u_eff=components[1], u_com=components[2],
        u_trust=u_trust,
        total=sv_payoff(components, trust_terms, weights),
    )

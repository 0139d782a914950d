"""Online trust estimation from longitudinal behavior.

Per tracked human vehicle, each decision interval: predict a nominal action
from recent observed accelerations, Monte-Carlo sample perturbed futures
under the current action-noise estimate, label every sample forward /
backward / uncertain against a no-reaction (zero-acceleration) continuation
of the current state, and count. The trust level is the decisive fraction:
drivers whose predicted future commits clearly one way or the other are
easy to rely on, hesitant ones are not. The action-noise variance follows a
conjugate inverse-gamma posterior over one-step prediction residuals.

The labeling baseline is deliberately not the sampling center: measured
against the sampling center itself, the decisive fraction would collapse to
a pure noise-spread statistic and decisive sustained maneuvers would never
register (see the single-step oracle test, where the two baselines coincide
because the nominal action is zero).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .world import Trajectory, VehicleState, clamp_accel, rollout_constant_accel

NOMINAL_HISTORY_SAMPLES = 3   # observed accelerations averaged into a*
# Demonstrated decisiveness raises trust quickly; it fades slowly once the
# driver goes quiet (an absent maneuver is not a violation).
TRUST_GAIN_UP = 0.5
TRUST_GAIN_DOWN = 0.3


class IntentionLabel(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"
    UNCERTAIN = "uncertain"


@dataclass(frozen=True)
class TrustThresholds:
    """Position / velocity deviation thresholds for intention labels."""

    delta_x: float = 2.0
    delta_v: float = 1.0
    eps_x: float = 2.0
    eps_v: float = 1.0

    def __post_init__(self) -> None:
        if min(self.delta_x, self.delta_v, self.eps_x, self.eps_v) <= 0:
            raise ValueError("trust thresholds must be strictly positive")


@dataclass(frozen=True)
class NoisePosterior:
    """Inverse-gamma posterior over the action-noise variance."""

    alpha: float = 3.0
    beta: float = 2.0

    def __post_init__(self) -> None:
        if self.alpha <= 1 or self.beta <= 0:
            raise ValueError("posterior requires alpha > 1 and beta > 0")

    @property
    def point(self) -> float:
        return self.beta / (self.alpha - 1.0)

    def updated(self, residual: float) -> "NoisePosterior":
        return NoisePosterior(alpha=self.alpha + 0.5,
                              beta=self.beta + residual * residual / 2.0)


@dataclass
class TrustState:
    p: float = 0.5
    posterior: NoisePosterior = field(default_factory=NoisePosterior)
    residual_window: deque = field(default_factory=lambda: deque(maxlen=20))
    last_tick: Optional[int] = None
    last_predicted_a: Optional[float] = None
    # Smoothed backward-minus-forward tendency: positive for a yielder,
    # negative for a gap contester.
    direction: float = 0.0


@dataclass(frozen=True)
class TrustParams:
    Z: int = 200
    H: int = 30
    dt: float = 0.1
    thresholds: TrustThresholds = field(default_factory=TrustThresholds)

    def __post_init__(self) -> None:
        if self.Z < 1 or self.H < 2 or self.dt <= 0:
            raise ValueError("need Z >= 1, H >= 2 and positive dt")


@dataclass(frozen=True)
class TrustEstimate:
    p_forward: float
    p_backward: float
    p: float
    n_forward: int = 0
    n_backward: int = 0
    n_uncertain: int = 0
    z: int = 0


@dataclass(frozen=True)
class TrustTrace:
    tick: int
    vehicle_id: int
    p_forward: float
    p_backward: float
    p: float
    noise_w: float


def predict_nominal(hv_history: Trajectory, horizon: int,
                    roll_dt: Optional[float] = None) -> tuple[float, Trajectory]:
    """Constant-acceleration nominal: mean of the last observed accelerations.

    Returns the (clamped) nominal action and its recursive rollout from the
    newest state. The history may be sampled coarser than the rollout step
    (`roll_dt`); a too-short history falls back to zero acceleration.
    """
    if horizon < 2:
        raise ValueError("horizon must be at least 2 steps")
    if len(hv_history) >= NOMINAL_HISTORY_SAMPLES:
        recent = hv_history.accels()[-NOMINAL_HISTORY_SAMPLES:]
        a_star = clamp_accel(float(np.mean(recent)))
    else:
        a_star = 0.0
    dt = roll_dt if roll_dt is not None else hv_history.dt
    states = rollout_constant_accel(hv_history.last, a_star, horizon - 1, dt)
    return a_star, states


def zero_accel_reference(current: VehicleState, horizon: int, dt: float) -> Trajectory:
    """No-reaction continuation: the baseline intention labels measure against."""
    return rollout_constant_accel(current, 0.0, horizon - 1, dt)


def sample_stream(seed: Sequence[int] | int) -> np.random.Generator:
    return np.random.default_rng(seed)


def sample_trajectories(nominal: Trajectory, nominal_accel: float, noise_w: float,
                        Z: int, horizon: int,
                        seed: Sequence[int] | int) -> tuple[np.ndarray, np.ndarray]:
    """Z perturbed rollouts of the nominal action sequence.

    Every step's action is the nominal plus independent N(0, W) noise; sample
    z is row z of a noise matrix drawn from a generator keyed by the seed, so
    reruns are bit-identical and rows are independent streams. Returns
    (positions, velocities) of shape (Z, horizon), column 0 the current state.
    """
    if noise_w < 0:
        raise ValueError("noise variance must be nonnegative")
    if Z < 1:
        raise ValueError("Z must be at least 1")
    dt = nominal.dt
    start = nominal.states[0]
    rng = sample_stream(seed)
    noise = rng.standard_normal((Z, horizon - 1)) * math.sqrt(noise_w)
    actions = nominal_accel + noise

    v = np.empty((Z, horizon))
    x = np.empty((Z, horizon))
    v[:, 0] = start.v
    x[:, 0] = start.s
    for k in range(1, horizon):
        v_prev = v[:, k - 1]
        v_next = np.maximum(v_prev + actions[:, k - 1] * dt, 0.0)
        x[:, k] = x[:, k - 1] + 0.5 * (v_prev + v_next) * dt
        v[:, k] = v_next
    return x, v


def label_intention(sampled: Trajectory, reference: Trajectory,
                    thresholds: TrustThresholds) -> IntentionLabel:
    """Forward / backward / uncertain from terminal-step deviations."""
    if len(sampled) != len(reference) or sampled.dt != reference.dt:
        raise ValueError("sampled and reference trajectories must align")
    return label_terminal(sampled.last.s - reference.last.s,
                          sampled.last.v - reference.last.v, thresholds)


def label_terminal(dx: float, dv: float, thresholds: TrustThresholds) -> IntentionLabel:
    forward = dx > thresholds.delta_x or dv > thresholds.delta_v
    backward = dx < -thresholds.eps_x or dv < -thresholds.eps_v
    if forward and not backward:
        return IntentionLabel.FORWARD
    if backward and not forward:
        return IntentionLabel.BACKWARD
    return IntentionLabel.UNCERTAIN


def label_samples(x: np.ndarray, v: np.ndarray, reference: Trajectory,
                  thresholds: TrustThresholds) -> list[IntentionLabel]:
    """Vectorized terminal labeling of sampled (positions, velocities)."""
    dx = x[:, -1] - reference.last.s
    dv = v[:, -1] - reference.last.v
    fwd = (dx > thresholds.delta_x) | (dv > thresholds.delta_v)
    bwd = (dx < -thresholds.eps_x) | (dv < -thresholds.eps_v)
    out = []
    for f, b in zip(fwd, bwd):
        if f and not b:
            out.append(IntentionLabel.FORWARD)
        elif b and not f:
            out.append(IntentionLabel.BACKWARD)
        else:
            out.append(IntentionLabel.UNCERTAIN)
    return out


def estimate_trust(labels: Sequence[IntentionLabel]) -> TrustEstimate:
    """Counting estimator; p is exactly one minus the uncertain fraction."""
    if not labels:
        raise ValueError("need at least one labeled sample")
    z = len(labels)
    n_fwd = sum(1 for l in labels if l == IntentionLabel.FORWARD)
    n_bwd = sum(1 for l in labels if l == IntentionLabel.BACKWARD)
    return TrustEstimate(p_forward=n_fwd / z, p_backward=n_bwd / z,
                         p=(n_fwd + n_bwd) / z,
                         n_forward=n_fwd, n_backward=n_bwd,
                         n_uncertain=z - n_fwd - n_bwd, z=z)


def update_noise(state: TrustState, observed_a: float, predicted_a: float) -> TrustState:
    """Conjugate inverse-gamma update on the one-step action residual."""
    if not (math.isfinite(observed_a) and math.isfinite(predicted_a)):
        raise ValueError("non-finite residual inputs")
    residual = observed_a - predicted_a
    window = deque(state.residual_window, maxlen=state.residual_window.maxlen)
    window.append(residual)
    return TrustState(p=state.p, posterior=state.posterior.updated(residual),
                      residual_window=window, last_tick=state.last_tick,
                      last_predicted_a=state.last_predicted_a)


def trust_tick(state: TrustState, hv_history: Trajectory, params: TrustParams,
               tick: int, vehicle_id: int, seed: int) -> tuple[TrustState, TrustTrace]:
    """One estimation cycle for one tracked human vehicle.

    Composes the nominal prediction, Monte-Carlo sampling under the current
    noise estimate, terminal labeling against the no-reaction baseline, the
    counting estimator, and the noise update with the newest observed
    acceleration. The stored trust level is an EMA of the per-tick decisive
    fractions, so only persistent decisiveness moves it far from the middle.
    Deterministic given (seed, vehicle, tick).
    """
    a_star, nominal = predict_nominal(hv_history, params.H, roll_dt=params.dt)
    reference = zero_accel_reference(hv_history.last, params.H, params.dt)
    noise_w = state.posterior.point
    x, v = sample_trajectories(nominal, a_star, noise_w, params.Z, params.H,
                               seed=(seed, vehicle_id, tick))
    labels = label_samples(x, v, reference, params.thresholds)
    estimate = estimate_trust(labels)

    predicted = state.last_predicted_a if state.last_predicted_a is not None \
        else hv_history.last.a
    updated = update_noise(state, hv_history.last.a, predicted)
    if len(hv_history) < NOMINAL_HISTORY_SAMPLES:
        # Cold start: the zero-action fallback carries no evidence yet.
        smoothed = state.p
        direction = state.direction
    else:
        # A decisive maneuver points one way tick after tick; an estimate
        # that contradicts the accumulated tendency is a flip-flop and
        # counts mostly as hesitation, not decisiveness.
        swing = estimate.p_backward - estimate.p_forward
        flip = (state.direction > 0.05 and swing < -0.05) \
            or (state.direction < -0.05 and swing > 0.05)
        effective = estimate.p * (0.15 if flip else 1.0)
        gain = TRUST_GAIN_UP if effective >= state.p else TRUST_GAIN_DOWN
        smoothed = (1.0 - gain) * state.p + gain * effective
        direction = (1.0 - TRUST_GAIN_UP) * state.direction + TRUST_GAIN_UP * swing
    new_state = TrustState(
        p=min(max(smoothed, 0.0), 1.0),
        posterior=updated.posterior,
        residual_window=updated.residual_window,
        last_tick=tick,
        last_predicted_a=a_star,
        direction=direction,
    )
    trace = TrustTrace(tick=tick, vehicle_id=vehicle_id,
                       p_forward=estimate.p_forward, p_backward=estimate.p_backward,
                       p=new_state.p, noise_w=noise_w)
    return new_state, trace

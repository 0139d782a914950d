"""Road geometry, vehicle kinematics and the primitive measurements.

Everything here is a pure function of its inputs; the simulation loop owns
all mutation. Longitudinal integration is exact constant-acceleration (not
Euler) so repeated short steps and one long step agree to machine precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

# Physical and decision-layer constants (SI units throughout).
ACCEL_MIN = -4.0
ACCEL_MAX = 3.0
ACTION_ACCELS = (-3.0, -1.5, 0.0, 1.5, 3.0)
THW_CAP = 10.0
STOPPED_SPEED = 0.1          # below this the follower counts as stopped
VEHICLE_LENGTH = 5.0         # bumper-to-bumper gaps assume this length
VEHICLE_WIDTH = 2.0
LANE_WIDTH = 3.5
MERGE_DURATION = 3.0         # seconds a lane change takes (quintic profile)


class GeometryError(ValueError):
    """Raised when a measurement is asked of an impossible arrangement."""


class VehicleKind(str, Enum):
    AV = "AV"
    HV = "HV"


class MergePhase(str, Enum):
    NONE = "none"
    SIGNALING = "signaling"
    EXECUTING = "executing"
    DONE = "done"
    ABORTED = "aborted"


class LateralIntent(str, Enum):
    # subject-vehicle intents
    KEEP = "keep"
    INITIATE_MERGE = "initiate_merge"
    ABORT_MERGE = "abort_merge"
    # responder intents
    MAINTAIN = "maintain"
    YIELD = "yield"


SV_INTENTS = (LateralIntent.KEEP, LateralIntent.INITIATE_MERGE, LateralIntent.ABORT_MERGE)
RESPONDER_INTENTS = (LateralIntent.MAINTAIN, LateralIntent.YIELD)


@dataclass(frozen=True)
class ActionPair:
    """Discrete (acceleration, lateral intent) command."""

    accel: float
    intent: LateralIntent

    def __post_init__(self) -> None:
        if self.accel not in ACTION_ACCELS:
            raise ValueError(f"accel {self.accel} not in the discrete action set {ACTION_ACCELS}")

    def key(self) -> tuple:
        return (self.accel, self.intent.value)


@dataclass(frozen=True)
class VehicleState:
    """Kinematic state of one vehicle at one instant.

    `s` is the longitudinal station, `d` the lateral offset from the current
    lane centerline (positive toward the merge target), `lane` an integer
    lane id.
    """

    s: float
    v: float
    a: float = 0.0
    d: float = 0.0
    lane: int = 0
    merge_phase: MergePhase = MergePhase.NONE
    t: float = 0.0

    def __post_init__(self) -> None:
        for name in ("s", "v", "a", "d", "t"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite {name} in VehicleState")
        if self.v < 0:
            raise ValueError("speed must be nonnegative")


@dataclass(frozen=True)
class RoadLayout:
    """Two mainline lanes plus one ramp, all parallel and station-aligned."""

    merge_zone: tuple[float, float] = (60.0, 320.0)
    lane_width: float = LANE_WIDTH
    ramp_lane: int = 0
    mainline_lanes: tuple[int, int] = (1, 2)

    def __post_init__(self) -> None:
        if self.merge_zone[1] <= self.merge_zone[0]:
            raise ValueError("merge zone must have positive length")

    @property
    def target_lane(self) -> int:
        return self.mainline_lanes[0]


@dataclass
class Trajectory:
    """Uniformly sampled state history for one vehicle."""

    states: list[VehicleState] = field(default_factory=list)
    dt: float = 0.1

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        ts = [st.t for st in self.states]
        for earlier, later in zip(ts, ts[1:]):
            if later <= earlier:
                raise ValueError("trajectory timestamps must strictly increase")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def last(self) -> VehicleState:
        return self.states[-1]

    def accels(self) -> list[float]:
        return [st.a for st in self.states]

    def speeds(self) -> list[float]:
        return [st.v for st in self.states]

    def stations(self) -> list[float]:
        return [st.s for st in self.states]


def step_longitudinal(state: VehicleState, accel: float, dt: float) -> VehicleState:
    """Advance one vehicle by `dt` under constant acceleration.

    Exact closed form, with the braking-to-rest correction: once the speed
    hits zero the vehicle stays at rest for the remainder of the step.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not (math.isfinite(accel) and math.isfinite(dt)):
        raise ValueError("non-finite step inputs")

    v_end = state.v + accel * dt
    if v_end < 0.0:
        # time until rest; accel is strictly negative here
        t_stop = state.v / (-accel)
        s_new = state.s + state.v * t_stop + 0.5 * accel * t_stop * t_stop
        v_new = 0.0
    else:
        s_new = state.s + state.v * dt + 0.5 * accel * dt * dt
        v_new = v_end
    return replace(state, s=s_new, v=v_new, a=accel, t=state.t + dt)


def lateral_profile(t_elapsed: float, duration: float, lane_offset: float) -> float:
    """Lateral offset along a quintic lane-change path.

    Zero lateral velocity and acceleration at both endpoints; d(0) = 0 and
    d(duration) = lane_offset.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    if t_elapsed < 0 or t_elapsed > duration:
        raise ValueError(f"t_elapsed {t_elapsed} outside [0, {duration}]")
    tau = t_elapsed / duration
    return lane_offset * (10.0 * tau**3 - 15.0 * tau**4 + 6.0 * tau**5)


def bumper_gap(follower: VehicleState, leader: VehicleState) -> float:
    """Bumper-to-bumper gap along the shared station axis."""
    return (leader.s - follower.s) - VEHICLE_LENGTH


def thw(follower: VehicleState, leader: VehicleState) -> float:
    """Time headway of `follower` behind `leader`, capped at THW_CAP.

    Both states must already be projected onto the same lane axis. A leader
    behind the follower is a geometry error for the caller to handle.
    """
    gap = bumper_gap(follower, leader)
    if gap < 0:
        raise GeometryError(f"leader is not ahead of follower (bumper gap {gap:.2f} m)")
    if follower.v <= STOPPED_SPEED:
        return THW_CAP
    return min(gap / follower.v, THW_CAP)


def thw_from_gap(gap: float, follower_speed: float) -> float:
    """THW from a precomputed bumper gap; same capping rules as `thw`."""
    if gap < 0:
        raise GeometryError(f"negative bumper gap {gap:.2f} m")
    if follower_speed <= STOPPED_SPEED:
        return THW_CAP
    return min(gap / follower_speed, THW_CAP)


def jerk_of(accel_series: Sequence[float], dt: float) -> np.ndarray:
    """First difference of an acceleration series divided by dt."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    arr = np.asarray(accel_series, dtype=float)
    if arr.size < 2:
        raise ValueError("need at least two acceleration samples")
    return np.diff(arr) / dt


def rollout_constant_accel(state: VehicleState, accel: float, steps: int, dt: float) -> Trajectory:
    """Roll a state forward `steps` times under one constant acceleration."""
    states = [state]
    current = state
    for _ in range(steps):
        current = step_longitudinal(current, accel, dt)
        states.append(current)
    return Trajectory(states=states, dt=dt)


def clamp_accel(accel: float) -> float:
    return min(max(accel, ACCEL_MIN), ACCEL_MAX)

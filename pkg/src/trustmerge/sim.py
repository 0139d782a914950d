"""Scenario construction and the deterministic episode loop.

Per decision interval the subject vehicle classifies styles from trailing
windows, updates trust estimates, and re-derives its merge plan; surrogate
humans draw their own behavior; cooperative automated vehicles execute the
joint actions agreed for the chosen gap. Integration runs at the simulation
step with commanded accelerations ramped linearly across one decision
interval, so logged jerk is finite and command swings are visible in it.

Everything is keyed off the scenario seed through named substreams, so a
rerun with the same config is bit-identical, and an externally controlled
human vehicle that happens to send the same pedal inputs as a scripted one
produces the same decisions.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .config import ScenarioConfig, VehicleSpec, config_to_dict
from .drivers import (DriverProfile, IdmParams, SurrogateDecision, SurrogateView,
                      classify_style, extract_style_features, hv_surrogate_step,
                      idm_accel)
from .game import (GapRef, MergePlan, ResponderProfile, SvParams, VehicleInfo,
                   WorldSnapshot, merge_decision)
from .logs import DecisionRecord, EpisodeLog, Event, TickRecord
from .trust import NoisePosterior, TrustParams, TrustState, trust_tick
from .world import (LateralIntent, MergePhase, VEHICLE_LENGTH, VehicleKind,
                    VehicleState, bumper_gap, clamp_accel, lateral_profile,
                    step_longitudinal)

SIGNAL_LEAD = 30.0          # m before the merge zone the SV starts signaling
STYLE_WINDOW_S = 5.0        # trailing window for style classification
MERGE_GRACE_S = 5.0         # episode continues this long after completion
DEADLOCK_SPEED = 2.0
DEADLOCK_HOLD_S = 10.0
LATERAL_OCCUPY_MARGIN = 2.0  # m from a lane center that counts as occupying it
EMERGENCY_IDM_FLOOR = -2.0   # coalition commands yield to IDM braking below this

# Substream tags for seed derivation.
STREAM_SURROGATE = 1
STREAM_TRUST = 2

ControlFn = Callable[[int, int], Optional[tuple[float, float]]]


def lane_center(lane: int, lane_width: float) -> float:
    return lane * lane_width


def lateral_position(state: VehicleState, lane_width: float) -> float:
    return lane_center(state.lane, lane_width) + state.d


def occupies_lane(state: VehicleState, lane: int, lane_width: float) -> bool:
    y = lateral_position(state, lane_width)
    return abs(y - lane_center(lane, lane_width)) < LATERAL_OCCUPY_MARGIN


@dataclass
class _MergeController:
    phase: MergePhase = MergePhase.NONE
    lat_elapsed: float = 0.0
    committed_gap: Optional[GapRef] = None
    signal_tick: Optional[int] = None
    done_tick: Optional[int] = None


@dataclass
class _Runtime:
    spec: VehicleSpec
    state: VehicleState
    command: float = 0.0
    ramp_from: float = 0.0
    ramp_start: float = 0.0
    history: deque = field(default_factory=lambda: deque(maxlen=80))
    leader_history: deque = field(default_factory=lambda: deque(maxlen=80))
    # States sampled at decision boundaries; feeds the trust predictor so its
    # short averaging window spans several independent driver choices.
    decision_history: deque = field(default_factory=lambda: deque(maxlen=8))
    surrogate_memory: SurrogateDecision = field(default_factory=SurrogateDecision)
    trust_state: Optional[TrustState] = None
    last_intent: LateralIntent = LateralIntent.MAINTAIN


class Simulation:
    """One episode; `run()` drives it to completion, `tick()` by one step."""

    def __init__(self, config: ScenarioConfig, external_control: Optional[ControlFn] = None):
        self.config = config
        self.external_control = external_control
        self.dt = config.dt
        self.steps_per_decision = config.steps_per_decision
        self.sv_params = SvParams(v_desire=config.sv_v_desire,
                                  decision_dt=config.decision_interval,
                                  sim_dt=config.dt)
        self.trust_params = config.trust
        self.merge = _MergeController()
        self.tick_index = 0
        self.time = 0.0
        self._slow_since: Optional[float] = None
        self._collision: Optional[tuple[int, ...]] = None
        self._latest_control: dict[int, tuple[float, float]] = {}
        self._coop_commands: dict[int, float] = {}
        self._previous_gap_id = None
        self._fallback_latch = None
        self._frozen_profiles: dict[int, ResponderProfile] = {}
        self._deadlock_logged = False

        self.vehicles: dict[int, _Runtime] = {}
        for spec in config.vehicles:
            state = VehicleState(s=spec.s, v=spec.v, a=0.0, d=0.0, lane=spec.lane,
                                 merge_phase=MergePhase.NONE, t=0.0)
            rt = _Runtime(spec=spec, state=state)
            if spec.kind == VehicleKind.HV:
                rt.trust_state = TrustState(posterior=NoisePosterior(
                    alpha=config.trust_alpha0, beta=config.trust_beta0))
            self.vehicles[spec.vid] = rt
        self.sv_id = config.sv_id

        self.log = EpisodeLog(config=config_to_dict(config), seed=config.seed,
                              mode=config.mode)
        self._finished = False
        self._end_reason: Optional[str] = None
        self._record_tick()  # initial conditions at tick 0

    # -- perception helpers -------------------------------------------------

    def _leader_of(self, vid: int, lane: Optional[int] = None) -> Optional[VehicleState]:
        me = self.vehicles[vid].state
        lane = me.lane if lane is None else lane
        width = self.config.layout.lane_width
        best = None
        for other_id, rt in self.vehicles.items():
            if other_id == vid:
                continue
            st = rt.state
            if not occupies_lane(st, lane, width):
                continue
            if st.s > me.s and (best is None or st.s < best.s):
                best = st
        return best

    def snapshot(self) -> WorldSnapshot:
        profiles = self._estimate_profiles()
        infos = {vid: VehicleInfo(vid=vid, kind=rt.spec.kind, state=rt.state)
                 for vid, rt in self.vehicles.items()}
        return WorldSnapshot(layout=self.config.layout, sv_id=self.sv_id,
                             vehicles=infos,
                             perception_range=self.config.perception_range,
                             responder_profiles=profiles)

    def _estimate_profiles(self) -> dict[int, ResponderProfile]:
        """Style and desired speed per human vehicle.

        Estimated from the trailing window of undisturbed following and
        frozen once the SV starts signaling: classification belongs to the
        time before the interaction perturbs the trajectory.
        """
        window = int(round(STYLE_WINDOW_S / self.dt))
        out: dict[int, ResponderProfile] = {}
        for vid, rt in self.vehicles.items():
            if rt.spec.kind != VehicleKind.HV:
                continue
            if vid in self._frozen_profiles:
                out[vid] = self._frozen_profiles[vid]
                continue
            states = list(rt.history)
            leaders = list(rt.leader_history)
            if len(states) >= window:
                feats = extract_style_features(states[-window:], leaders[-window:], self.dt)
                gamma = classify_style(feats)
                v_desire = max(float(np.mean([s.v for s in states[-window:]])), 1.0)
            else:
                gamma, v_desire = 0.5, max(rt.state.v, 1.0)
            profile = ResponderProfile(gamma=gamma, v_desire=v_desire,
                                       weights=self.config.hv_weights)
            if self.merge.phase in (MergePhase.SIGNALING, MergePhase.EXECUTING):
                self._frozen_profiles[vid] = profile
            out[vid] = profile
        return out

    def _tracked_hvs(self) -> list[int]:
        sv = self.vehicles[self.sv_id].state
        lane = self.config.layout.target_lane
        out = []
        for vid, rt in self.vehicles.items():
            if rt.spec.kind != VehicleKind.HV:
                continue
            if rt.state.lane != lane:
                continue
            if abs(rt.state.s - sv.s) <= self.config.perception_range:
                out.append(vid)
        return sorted(out)

    # -- decision step -------------------------------------------------------

    def _decide(self) -> None:
        tick = self.tick_index
        sv_rt = self.vehicles[self.sv_id]
        zone_start = self.config.layout.merge_zone[0]

        if (self.merge.phase == MergePhase.NONE
                and sv_rt.state.s >= zone_start - SIGNAL_LEAD):
            self.merge.phase = MergePhase.SIGNALING
            self.merge.signal_tick = tick

        self._sync_phase()
        snapshot = self.snapshot()
        plan: Optional[MergePlan] = None
        trust_map: dict[int, float] = {}

        if self.merge.phase in (MergePhase.SIGNALING, MergePhase.EXECUTING):
            trust_map = self._trust_step(tick)
            directions = {vid: rt.trust_state.direction
                          for vid, rt in self.vehicles.items()
                          if rt.trust_state is not None and self.config.mode == "trust_on"}
            noise = {vid: rt.trust_state.posterior.point
                     for vid, rt in self.vehicles.items()
                     if rt.trust_state is not None and self.config.mode == "trust_on"}
            remaining = None
            if self.merge.phase == MergePhase.EXECUTING:
                remaining = max(self.sv_params.merge_duration - self.merge.lat_elapsed,
                                self.dt)
            solve_inputs = {
                "committed_gap": self.merge.committed_gap,
                "remaining_merge_time": remaining,
                "directions": directions,
                "previous_gap_id": self._previous_gap_id,
                "noise": noise,
                "latched_gap_id": self._fallback_latch,
            }
            plan = merge_decision(snapshot, trust_map, self.config.sv_weights,
                                  self.sv_params, mode=self.config.mode,
                                  **solve_inputs)
            self._previous_gap_id = plan.gap.gap_id if plan.gap is not None else None
            if plan.committed or plan.abort or sv_rt.state.v < 1.0:
                self._fallback_latch = None
            elif plan.behind_target and plan.gap is not None:
                self._fallback_latch = plan.gap.gap_id
            self._apply_plan(plan, tick, snapshot)
        else:
            # Cruise toward the merge zone at the desired speed.
            solve_inputs = {}
            self._set_command(self.sv_id, idm_accel(None, sv_rt.state.v, 0.0,
                                                    IdmParams(v0=self.config.sv_v_desire)))

        self._drive_others(plan, tick)
        if plan is not None:
            self._record_decision(plan, trust_map, snapshot, tick, solve_inputs)

    def _trust_step(self, tick: int) -> dict[int, float]:
        """Estimate while negotiating; hold the estimate while executing.

        Once the merge is committed the estimator's question (will this
        driver accommodate?) is settled; the executing phase only monitors
        headways, so the last negotiated trust level is carried through.
        """
        estimating = self.merge.phase == MergePhase.SIGNALING
        trust_map: dict[int, float] = {}
        for vid in self._tracked_hvs():
            rt = self.vehicles[vid]
            rt.decision_history.append(rt.state)
            if self.config.mode == "trust_off":
                trust_map[vid] = 0.5
                continue
            if not estimating:
                trust_map[vid] = rt.trust_state.p
                continue
            history = self._history_trajectory(vid)
            state, trace = trust_tick(rt.trust_state, history, self.trust_params,
                                      tick=tick, vehicle_id=vid,
                                      seed=(self.config.seed, STREAM_TRUST))
            rt.trust_state = state
            trust_map[vid] = state.p
            self.log.trust_traces.append({
                "tick": trace.tick, "vehicle_id": trace.vehicle_id,
                "p_forward": trace.p_forward, "p_backward": trace.p_backward,
                "p": trace.p, "noise_w": trace.noise_w,
            })
        return trust_map

    def _history_trajectory(self, vid: int):
        from .world import Trajectory
        rt = self.vehicles[vid]
        states = list(rt.decision_history)
        if not states:
            states = [rt.state]
        return Trajectory(states=states, dt=self.config.decision_interval)

    def _apply_plan(self, plan: MergePlan, tick: int, snapshot: WorldSnapshot) -> None:
        if plan.committed and self.merge.phase == MergePhase.SIGNALING:
            self.merge.phase = MergePhase.EXECUTING
            self.merge.lat_elapsed = 0.0
            self.merge.committed_gap = plan.gap
        elif plan.abort and self.merge.phase == MergePhase.EXECUTING:
            self.merge.phase = MergePhase.ABORTED
            self.merge.committed_gap = None
        self._set_command(self.sv_id, plan.action.accel)
        self._sync_phase()

    def _drive_others(self, plan: Optional[MergePlan], tick: int) -> None:
        # Joint actions agreed for the chosen gap bind cooperative AVs.
        self._coop_commands = {}
        if plan is not None and plan.gap is not None:
            for outcome in plan.outcomes:
                if outcome.mode != "cooperative":
                    continue
                if outcome.gap_id != plan.gap.gap_id:
                    continue
                rt = self.vehicles.get(outcome.col_id)
                if rt is not None and rt.spec.kind == VehicleKind.AV:
                    self._coop_commands[outcome.col_id] = outcome.col_action.accel

        sv_state = self.vehicles[self.sv_id].state
        for vid, rt in self.vehicles.items():
            if vid == self.sv_id:
                continue
            spec = rt.spec
            if spec.controller == "constant":
                self._set_command(vid, spec.const_accel)
            elif spec.controller == "external":
                throttle, brake = self._latest_control.get(vid, (0.0, 0.0))
                self._set_command(vid, clamp_accel(3.0 * throttle - 4.0 * brake))
            elif spec.controller == "surrogate":
                self._surrogate_command(vid, rt, sv_state, tick)
            else:  # mainline AV
                leader = self._leader_of(vid)
                gap = bumper_gap(rt.state, leader) if leader is not None else None
                dv = rt.state.v - leader.v if leader is not None else 0.0
                idm = idm_accel(gap, rt.state.v, dv, IdmParams(v0=max(spec.v, 1.0)))
                command = self._coop_commands.get(vid, idm)
                if idm < EMERGENCY_IDM_FLOOR:
                    command = min(command, idm)
                self._set_command(vid, command)

    def _surrogate_command(self, vid: int, rt: _Runtime, sv_state: VehicleState,
                           tick: int) -> None:
        view = SurrogateView(me=rt.state, leader=self._leader_of(vid),
                             sv=sv_state, sv_signal=self.merge.phase)
        rng = np.random.default_rng((self.config.seed, STREAM_SURROGATE, vid, tick))
        command, memory = hv_surrogate_step(rt.spec.profile, view,
                                            rt.surrogate_memory, rng,
                                            decision_dt=self.config.decision_interval)
        rt.surrogate_memory = memory
        rt.last_intent = command.intent
        self._set_command(vid, command.accel)

    def _set_command(self, vid: int, accel: float) -> None:
        rt = self.vehicles[vid]
        current = self._applied_accel(rt)
        rt.command = clamp_accel(accel)
        # Emergency braking is applied instantly; comfort shaping must never
        # delay collision avoidance.
        rt.ramp_from = rt.command if rt.command <= -3.5 else current
        rt.ramp_start = self.time

    def _ramp_span(self, rt: _Runtime) -> float:
        # Automated actuators rate-limit for comfort; human pedals move at
        # the decision cadence.
        if rt.spec.kind == VehicleKind.AV:
            return 2.0 * self.config.decision_interval
        return self.config.decision_interval

    def _applied_accel(self, rt: _Runtime) -> float:
        span = self._ramp_span(rt)
        progress = min(max((self.time - rt.ramp_start) / span, 0.0), 1.0)
        return rt.ramp_from + (rt.command - rt.ramp_from) * progress

    # -- integration ---------------------------------------------------------

    def _integrate(self) -> None:
        width = self.config.layout.lane_width
        for vid, rt in self.vehicles.items():
            applied = self._applied_accel(rt)
            rt.state = step_longitudinal(rt.state, applied, self.dt)
        self.time = round(self.time + self.dt, 9)

        sv_rt = self.vehicles[self.sv_id]
        if self.merge.phase == MergePhase.EXECUTING:
            self.merge.lat_elapsed = min(self.merge.lat_elapsed + self.dt,
                                         self.sv_params.merge_duration)
            self._place_lateral(sv_rt, self.merge.lat_elapsed)
            if self.merge.lat_elapsed >= self.sv_params.merge_duration:
                self.merge.phase = MergePhase.DONE
                self.merge.done_tick = self.tick_index + 1
                sv_rt.state = replace(sv_rt.state,
                                      lane=self.config.layout.target_lane, d=0.0)
        elif self.merge.phase == MergePhase.ABORTED:
            self.merge.lat_elapsed = max(self.merge.lat_elapsed - self.dt, 0.0)
            self._place_lateral(sv_rt, self.merge.lat_elapsed)
            if self.merge.lat_elapsed <= 0.0:
                self.merge.phase = MergePhase.SIGNALING
                sv_rt.state = replace(sv_rt.state,
                                      lane=self.config.layout.ramp_lane, d=0.0)
        self._sync_phase()

    def _place_lateral(self, rt: _Runtime, elapsed: float) -> None:
        width = self.config.layout.lane_width
        d_abs = lateral_profile(elapsed, self.sv_params.merge_duration, width)
        if d_abs <= width / 2:
            rt.state = replace(rt.state, lane=self.config.layout.ramp_lane, d=d_abs)
        else:
            rt.state = replace(rt.state, lane=self.config.layout.target_lane,
                               d=d_abs - width)

    def _sync_phase(self) -> None:
        rt = self.vehicles[self.sv_id]
        if rt.state.merge_phase != self.merge.phase:
            rt.state = replace(rt.state, merge_phase=self.merge.phase)

    # -- bookkeeping ----------------------------------------------------------

    def _record_tick(self) -> None:
        vehicles = {}
        for vid, rt in self.vehicles.items():
            st = rt.state
            vehicles[vid] = {"s": st.s, "d": st.d, "v": st.v, "a": st.a,
                             "lane": st.lane, "merge_phase": st.merge_phase.value}
            rt.history.append(st)
            rt.leader_history.append(self._leader_of(vid))
        self.log.ticks.append(TickRecord(tick=self.tick_index, t=self.time,
                                         vehicles=vehicles))

    def _record_decision(self, plan: MergePlan, trust_map: dict[int, float],
                         snapshot: WorldSnapshot, tick: int,
                         solve_inputs: dict) -> None:
        """Log the decision with every input needed to re-solve it offline."""
        outcomes = []
        for o in plan.outcomes:
            outcomes.append({
                "row_id": o.row_id, "col_id": o.col_id,
                "row_idx": o.row_idx, "col_idx": o.col_idx,
                "row_action": {"a": o.row_action.accel, "intent": o.row_action.intent.value},
                "col_action": {"a": o.col_action.accel, "intent": o.col_action.intent.value},
                "row_payoff": o.row_payoff, "col_payoff": o.col_payoff,
                "mode": o.mode, "gap_id": o.gap_id,
                "col_distribution": list(o.col_distribution) if o.col_distribution else None,
                "trace": o.trace,
            })
        profiles = {vid: {"gamma": p.gamma, "v_desire": p.v_desire}
                    for vid, p in snapshot.responder_profiles.items()}
        committed_gap = None
        if solve_inputs.get("committed_gap") is not None:
            g = solve_inputs["committed_gap"]
            committed_gap = {"gap_id": g.gap_id, "lag_id": g.lag_id, "lead_id": g.lead_id}
        self.log.decisions.append(DecisionRecord(
            tick=tick, phase=snapshot.sv.state.merge_phase.value,
            trust=dict(trust_map), profiles=profiles,
            action={"a": plan.action.accel, "intent": plan.action.intent.value},
            gap_id=plan.gap.gap_id if plan.gap is not None else None,
            committed=plan.committed, abort=plan.abort, deadlock=plan.deadlock,
            gap_scores=plan.gap_scores, outcomes=outcomes,
            committed_gap=committed_gap,
            remaining_merge_time=solve_inputs.get("remaining_merge_time"),
            directions=dict(solve_inputs.get("directions") or {}),
            noise=dict(solve_inputs.get("noise") or {}),
            previous_gap_id=solve_inputs.get("previous_gap_id"),
            latched_gap_id=solve_inputs.get("latched_gap_id")))

    def _check_collision(self) -> Optional[tuple[int, ...]]:
        width = self.config.layout.lane_width
        items = list(self.vehicles.items())
        for i, (vid_a, rt_a) in enumerate(items):
            for vid_b, rt_b in items[i + 1:]:
                ya = lateral_position(rt_a.state, width)
                yb = lateral_position(rt_b.state, width)
                if abs(ya - yb) >= LATERAL_OCCUPY_MARGIN:
                    continue
                if abs(rt_a.state.s - rt_b.state.s) < VEHICLE_LENGTH:
                    return tuple(sorted((vid_a, vid_b)))
        return None

    # -- loop -----------------------------------------------------------------

    def apply_control(self, vid: int, throttle: float, brake: float) -> None:
        """Latest-wins external pedal input for a HIL-controlled vehicle."""
        self._latest_control[vid] = (min(max(throttle, 0.0), 1.0),
                                     min(max(brake, 0.0), 1.0))

    @property
    def finished(self) -> bool:
        return self._finished

    def tick(self) -> bool:
        """Advance one simulation step; returns False once the episode ended."""
        if self._finished:
            return False
        if self.tick_index % self.steps_per_decision == 0:
            self._decide()
        self._integrate()
        self.tick_index += 1
        self._record_tick()

        collision = self._check_collision()
        if collision is not None:
            self._collision = collision
            self._end("collision")
            return False

        sv = self.vehicles[self.sv_id].state
        if sv.v < DEADLOCK_SPEED and self.merge.phase != MergePhase.DONE:
            if self._slow_since is None:
                self._slow_since = self.time
        else:
            self._slow_since = None

        if (self.merge.done_tick is not None
                and self.time >= self.merge.done_tick * self.dt + MERGE_GRACE_S):
            self._end("merged")
            return False
        if self.time >= self.config.duration - 1e-9:
            self._end("timeout")
            return False
        return True

    def _end(self, reason: str) -> None:
        self._finished = True
        self._end_reason = reason
        self.log.final_tick = self.tick_index
        self.log.events = detect_events(self.log)

    def run(self) -> EpisodeLog:
        while self.tick():
            pass
        return self.log


def run_episode(config: ScenarioConfig,
                external_control: Optional[ControlFn] = None) -> EpisodeLog:
    return Simulation(config, external_control=external_control).run()


# ---------------------------------------------------------------------------
# Event detection (recomputed from the log so it is idempotent)


def detect_events(log: EpisodeLog) -> list[Event]:
    config = log.config
    width = config["layout"]["lane_width"]
    dt = config["dt"]
    sv_id = next(v["id"] for v in config["vehicles"] if v["controller"] == "sv")
    events: list[Event] = []

    def lat(entry: dict) -> float:
        return entry["lane"] * width + entry["d"]

    collision_tick = None
    for record in log.ticks:
        ids = sorted(record.vehicles)
        for i, vid_a in enumerate(ids):
            for vid_b in ids[i + 1:]:
                a, b = record.vehicles[vid_a], record.vehicles[vid_b]
                if abs(lat(a) - lat(b)) >= LATERAL_OCCUPY_MARGIN:
                    continue
                if abs(a["s"] - b["s"]) < VEHICLE_LENGTH:
                    collision_tick = (record.tick, (vid_a, vid_b))
                    break
            if collision_tick:
                break
        if collision_tick:
            break
    if collision_tick:
        events.append(Event(kind="collision", tick=collision_tick[0],
                            vehicles=collision_tick[1]))

    prev_phase = None
    merged_tick = None
    for record in log.ticks:
        phase = record.vehicles[sv_id]["merge_phase"]
        if phase == MergePhase.DONE.value and merged_tick is None:
            merged_tick = record.tick
            events.append(Event(kind="merge_complete", tick=record.tick,
                                vehicles=(sv_id,)))
        if prev_phase == MergePhase.EXECUTING.value and phase == MergePhase.ABORTED.value:
            events.append(Event(kind="merge_abort", tick=record.tick,
                                vehicles=(sv_id,)))
        prev_phase = phase

    slow_start = None
    deadlock_emitted = False
    for record in log.ticks:
        entry = record.vehicles[sv_id]
        slow = (entry["v"] < DEADLOCK_SPEED
                and entry["merge_phase"] != MergePhase.DONE.value)
        if slow and slow_start is None:
            slow_start = record.tick
        elif not slow:
            slow_start = None
        if (slow_start is not None and not deadlock_emitted
                and (record.tick - slow_start) * dt > DEADLOCK_HOLD_S):
            events.append(Event(kind="deadlock", tick=record.tick, vehicles=(sv_id,)))
            deadlock_emitted = True
    events.append(Event(kind="episode_end", tick=log.final_tick))
    events.sort(key=lambda e: (e.tick, e.kind))
    return events

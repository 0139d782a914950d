"""Coalition bookkeeping, two-vehicle subgames and the merge decision.

The merge is decomposed into pairwise games against each conflicting vehicle
in the target lane. Pairs where the responder is an automated vehicle, or a
human one whose live trust estimate clears the cooperation gate, are solved
jointly (trust-weighted sum of both payoffs); everything else is solved as a
leader problem against the responder's logit response. Gap choice, the
commit threshold over the whole lane-change rollout and the abort rule live
in `merge_decision`. All tie-breaking is lexicographic so seeded runs replay
exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .payoff import (HvWeights, PayoffContext, SvWeights, component_payoffs,
                     fv_response_distribution, hv_payoff, sv_payoff, trust1, trust2)
from .world import (ACTION_ACCELS, ActionPair, LateralIntent, MergePhase,
                    RoadLayout, THW_CAP, VEHICLE_LENGTH, VehicleKind,
                    VehicleState, bumper_gap, step_longitudinal, thw_from_gap)

COOP_TRUST_GATE = 0.7       # HV counts as a cooperator at or above this trust
CONFLICT_HORIZON = 8.0      # s of constant-speed projection for conflicts
CONFLICT_HEADWAY = 1.5      # s; proximity envelope = headway * speed + length
COMMIT_MIN_THW = 1.2        # s over the merge rollout before committing
ABORT_MIN_THW = 0.5         # s; an executing merge aborts below this
FAVORABLE_MIN_THW = 1.5     # responder headway that counts as favorable
FAVORABLE_MIN_ACCEL = -1.5  # responders braking harder are not favorable
ALIGN_AHEAD = 0.03          # score discount per meter of forward misalignment
ALIGN_BEHIND = 0.06         # dropping back costs double: brake, recover, wait
ALIGN_TOLERANCE = 5.0       # m of misalignment that positioning absorbs freely
AHEAD_BIAS = 0.15           # merging forward is the natural ramp maneuver
TARGET_HYSTERESIS = 0.15    # score bonus of the previously targeted slot
FALLBACK_HYSTERESIS = 0.6   # a decision to drop back is strongly sticky


def accommodation_credence(p: float, direction: float, noise_w: float = 1.0) -> float:
    """How much of a negotiated accommodation to believe.

    Optimistic prior (drivers usually make room for a signaling merger),
    raised by demonstrated decisiveness when it points backward, pulled down
    hard when the driver decisively contests, and discounted when its action
    noise says it is erratic either way.
    """
    raw = (0.75 + 0.5 * (p - 0.5) + 2.0 * p * direction
           - 0.3 * max(noise_w - 0.5, 0.0))
    return min(max(raw, 0.0), 1.0)


# ---------------------------------------------------------------------------
# Coalition arithmetic


@dataclass(frozen=True)
class Coalition:
    members: tuple[tuple[int, VehicleKind], ...]
    trust: dict[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("coalition must be nonempty")
        for vid, kind in self.members:
            if kind == VehicleKind.HV and vid not in self.trust:
                raise ValueError(f"HV member {vid} has no trust entry")


@dataclass(frozen=True)
class Allocation:
    u: dict[int, float]


def coalition_value(coalition: Coalition, payoffs: Allocation) -> float:
    """Total benefit: AV gains plus trust-weighted HV gains."""
    total = 0.0
    for vid, kind in coalition.members:
        if vid not in payoffs.u:
            raise ValueError(f"allocation missing member {vid}")
        if kind == VehicleKind.AV:
            total += payoffs.u[vid]
        else:
            total += coalition.trust[vid] * payoffs.u[vid]
    return total


@dataclass(frozen=True)
class RationalityReport:
    individual: dict[int, bool]
    group: bool

    @property
    def accepted(self) -> bool:
        return self.group and all(self.individual.values())


def rationality_check(coalition: Coalition, allocation: Allocation,
                      subcoalition_values: dict[int, float],
                      characteristic_value: Optional[float] = None,
                      tol: float = 1e-9) -> RationalityReport:
    """Individual and group rationality of an allocation.

    `subcoalition_values[i]` is the value secured when member i does not
    participate; the caller computes it from counterfactual solves.
    `characteristic_value` is the coalition's total benefit; when omitted it
    is derived from the allocation itself. Boundary equality is accepted
    (the conditions are non-strict).
    """
    individual: dict[int, bool] = {}
    for vid, _kind in coalition.members:
        if vid not in subcoalition_values:
            raise ValueError(f"missing counterfactual value for member {vid}")
        if vid not in allocation.u:
            raise ValueError(f"allocation missing member {vid}")
        individual[vid] = allocation.u[vid] >= subcoalition_values[vid] - tol
    total = sum(allocation.u[vid] for vid, _ in coalition.members)
    if characteristic_value is None:
        characteristic_value = coalition_value(coalition, allocation)
    group = abs(total - characteristic_value) <= tol
    return RationalityReport(individual=individual, group=group)


# ---------------------------------------------------------------------------
# Snapshots and responder profiles


@dataclass(frozen=True)
class ResponderProfile:
    """The subject vehicle's working model of a responder."""

    gamma: float = 0.5
    v_desire: float = 15.0
    weights: HvWeights = field(default_factory=HvWeights)


@dataclass(frozen=True)
class VehicleInfo:
    vid: int
    kind: VehicleKind
    state: VehicleState


@dataclass(frozen=True)
class WorldSnapshot:
    layout: RoadLayout
    sv_id: int
    vehicles: dict[int, VehicleInfo]
    perception_range: float = 150.0
    responder_profiles: dict[int, ResponderProfile] = field(default_factory=dict)

    @property
    def sv(self) -> VehicleInfo:
        return self.vehicles[self.sv_id]

    def profile_of(self, vid: int) -> ResponderProfile:
        return self.responder_profiles.get(vid, ResponderProfile())

    def target_lane_vehicles(self) -> list[VehicleInfo]:
        lane = self.layout.target_lane
        out = [v for v in self.vehicles.values()
               if v.vid != self.sv_id and v.state.lane == lane]
        return sorted(out, key=lambda v: v.state.s)


@dataclass(frozen=True)
class SvParams:
    v_desire: float = 15.0
    decision_dt: float = 0.5
    merge_duration: float = 3.0
    sim_dt: float = 0.1


# ---------------------------------------------------------------------------
# Subgames


@dataclass
class Subgame:
    row_id: int
    col_id: int
    row_actions: list[ActionPair]
    col_actions: list[ActionPair]
    u_row: np.ndarray
    u_col: np.ndarray
    cooperative: bool
    trust_weight: float
    u_row_base: np.ndarray = None  # SV payoff before the trust term
    gap_id: str = ""

    def __post_init__(self) -> None:
        expected = (len(self.row_actions), len(self.col_actions))
        if self.u_row.shape != expected or self.u_col.shape != expected:
            raise ValueError("payoff tensor shape does not match the action sets")
        if not (np.all(np.isfinite(self.u_row)) and np.all(np.isfinite(self.u_col))):
            raise ValueError("payoff tensors must be finite")
        if self.u_row_base is None:
            self.u_row_base = self.u_row.copy()


@dataclass(frozen=True)
class GameOutcome:
    row_id: int
    col_id: int
    row_idx: int
    col_idx: int
    row_action: ActionPair
    col_action: ActionPair
    row_payoff: float
    col_payoff: float
    mode: str  # "cooperative" | "quantal_noncooperative"
    gap_id: str = ""
    row_values: tuple[float, ...] = ()
    col_distribution: Optional[tuple[float, ...]] = None
    trace: dict = field(default_factory=dict)


def solve_cooperative(game: Subgame, trust_weight: Optional[float] = None) -> GameOutcome:
    """Exhaustive argmax of U_row + p * U_col over joint actions.

    Ties break on higher U_row, then lower row index, then lower column
    index; the row-major scan with strict improvement realizes exactly that.
    """
    p = game.trust_weight if trust_weight is None else trust_weight
    joint = game.u_row + p * game.u_col
    best_key = None
    best_rc = (0, 0)
    ties = 0
    for r in range(joint.shape[0]):
        for c in range(joint.shape[1]):
            key = (joint[r, c], game.u_row[r, c])
            if best_key is None or key > best_key:
                best_key = key
                best_rc = (r, c)
                ties = 1
            elif key == best_key:
                ties += 1
    r, c = best_rc
    row_values = tuple(float(v) for v in joint.max(axis=1))
    return GameOutcome(
        row_id=game.row_id, col_id=game.col_id, row_idx=r, col_idx=c,
        row_action=game.row_actions[r], col_action=game.col_actions[c],
        row_payoff=float(game.u_row[r, c]), col_payoff=float(game.u_col[r, c]),
        mode="cooperative", gap_id=game.gap_id, row_values=row_values,
        trace={"joint_value": float(joint[r, c]), "trust_weight": p,
               "tied_candidates": ties},
    )


def solve_noncooperative(game: Subgame) -> GameOutcome:
    """Leader solve against the responder's logit response.

    The responder's realized action is sampled later by the simulator from
    the same distribution; here the predicted column is the distribution's
    mode. Row ties break to the lowest index.
    """
    n_rows = len(game.row_actions)
    expected = np.empty(n_rows)
    dists = []
    for r in range(n_rows):
        dist = fv_response_distribution(game.u_col[r])
        dists.append(dist)
        expected[r] = float(dist @ game.u_row[r])
    r = int(np.argmax(expected))  # argmax takes the lowest index on ties
    dist = dists[r]
    c = int(np.argmax(dist))
    return GameOutcome(
        row_id=game.row_id, col_id=game.col_id, row_idx=r, col_idx=c,
        row_action=game.row_actions[r], col_action=game.col_actions[c],
        row_payoff=float(expected[r]), col_payoff=float(game.u_col[r, c]),
        mode="quantal_noncooperative", gap_id=game.gap_id,
        row_values=tuple(float(x) for x in expected),
        col_distribution=tuple(float(x) for x in dist),
    )


# ---------------------------------------------------------------------------
# Decomposition: conflicts, gaps and tensor construction


def _conflict_time(sv: VehicleState, other: VehicleState, horizon: float) -> Optional[float]:
    """First time within the horizon the pair is inside the proximity envelope."""
    envelope = CONFLICT_HEADWAY * max(sv.v, other.v) + VEHICLE_LENGTH
    gap0 = other.s - sv.s
    rel_v = other.v - sv.v
    if abs(gap0) <= envelope:
        return 0.0
    if rel_v == 0:
        return None
    t = (math.copysign(envelope, gap0) - gap0) / rel_v
    if 0.0 <= t <= horizon:
        return t
    return None


@dataclass(frozen=True)
class GapRef:
    gap_id: str
    lag_id: Optional[int]
    lead_id: Optional[int]


def candidate_gaps(snapshot: WorldSnapshot) -> list[GapRef]:
    """Gaps between consecutive target-lane vehicles, rear to front."""
    vehicles = snapshot.target_lane_vehicles()
    if not vehicles:
        return [GapRef(gap_id="open", lag_id=None, lead_id=None)]
    gaps = [GapRef(gap_id=f"behind_{vehicles[0].vid}", lag_id=None, lead_id=vehicles[0].vid)]
    for rear, front in zip(vehicles, vehicles[1:]):
        gaps.append(GapRef(gap_id=f"between_{rear.vid}_{front.vid}",
                           lag_id=rear.vid, lead_id=front.vid))
    gaps.append(GapRef(gap_id=f"ahead_{vehicles[-1].vid}", lag_id=vehicles[-1].vid, lead_id=None))
    return gaps


def reachable_gaps(snapshot: WorldSnapshot) -> list[GapRef]:
    """The gap whose span contains the SV plus its immediate neighbors.

    Slots further away would need the SV to overtake or drop behind several
    vehicles; they are not merge candidates at this decision.
    """
    gaps = candidate_gaps(snapshot)
    vehicles = snapshot.target_lane_vehicles()
    if not vehicles:
        return gaps
    sv_s = snapshot.sv.state.s
    containing = 0
    for info in vehicles:
        if info.state.s <= sv_s:
            containing += 1
    lo = max(containing - 1, 0)
    hi = min(containing + 1, len(gaps) - 1)
    return gaps[lo:hi + 1]


def conflicting_vehicles(snapshot: WorldSnapshot) -> list[VehicleInfo]:
    """Target-lane vehicles in conflict with the merge, nearest first."""
    sv = snapshot.sv.state
    out = []
    for info in snapshot.target_lane_vehicles():
        if abs(info.state.s - sv.s) > snapshot.perception_range:
            continue
        if _conflict_time(sv, info.state, CONFLICT_HORIZON) is not None:
            out.append(info)
    out.sort(key=lambda v: abs(v.state.s - sv.s))
    return out


def _sv_rows(phase: MergePhase) -> list[ActionPair]:
    # Merge rows enumerate first so a safe merge wins ties against waiting.
    if phase == MergePhase.EXECUTING:
        return [ActionPair(a, LateralIntent.KEEP) for a in ACTION_ACCELS]
    rows = [ActionPair(a, LateralIntent.INITIATE_MERGE) for a in ACTION_ACCELS]
    rows += [ActionPair(a, LateralIntent.KEEP) for a in ACTION_ACCELS]
    return rows


def _responder_cols() -> list[ActionPair]:
    cols = [ActionPair(a, LateralIntent.MAINTAIN) for a in ACTION_ACCELS]
    cols += [ActionPair(a, LateralIntent.YIELD) for a in ACTION_ACCELS]
    return cols


def _safe_thw(follower: VehicleState, leader: Optional[VehicleState]) -> float:
    if leader is None:
        return THW_CAP
    gap = bumper_gap(follower, leader)
    if gap < 0:
        return 0.0
    return thw_from_gap(gap, follower.v)


def _wall_state(layout: RoadLayout, t: float) -> VehicleState:
    # The ramp terminus acts as a stopped leader one car length past the end.
    return VehicleState(s=layout.merge_zone[1] + VEHICLE_LENGTH, v=0.0, t=t)


def _style_headway(gamma: float) -> float:
    """Typical settled time headway a driver of this style accepts."""
    if gamma >= 0.6:
        return 0.9
    if gamma <= 0.4:
        return 2.2
    return 1.5


def _own_leader(snapshot: WorldSnapshot, vehicle: VehicleInfo) -> Optional[VehicleState]:
    best = None
    for other in snapshot.vehicles.values():
        if other.vid == vehicle.vid or other.state.lane != vehicle.state.lane:
            continue
        if other.state.s > vehicle.state.s:
            if best is None or other.state.s < best.s:
                best = other.state
    return best


def build_subgame(snapshot: WorldSnapshot, responder: VehicleInfo, gap: GapRef,
                  trust: dict[int, float], weights: SvWeights, params: SvParams,
                  phase: MergePhase = MergePhase.SIGNALING) -> Subgame:
    """Payoff tensors for the SV against one responder, in one gap's context.

    Every cell is a one-decision-interval rollout: both vehicles apply their
    candidate accelerations. A yielding responder scores its safety against
    the SV (projected into the target lane), a maintaining one against its
    own leader; the SV scores against the gap's lead vehicle, plus the ramp
    terminus while it keeps lane. The trust channel rides on the row: the
    favorable-response mass of the logit response and the predictability
    margin averaged under that response.
    """
    dt = params.decision_dt
    sv = snapshot.sv.state
    fv = responder.state
    profile = snapshot.profile_of(responder.vid)
    lead = snapshot.vehicles[gap.lead_id].state if gap.lead_id is not None else None
    fv_own_lead = _own_leader(snapshot, responder)

    rows = _sv_rows(phase)
    cols = _responder_cols()
    sv_next = {a: step_longitudinal(sv, a, dt) for a in ACTION_ACCELS}
    fv_next = {a: step_longitudinal(fv, a, dt) for a in ACTION_ACCELS}
    lead_next = step_longitudinal(lead, 0.0, dt) if lead is not None else None
    own_lead_next = (step_longitudinal(fv_own_lead, 0.0, dt)
                     if fv_own_lead is not None else None)
    wall_next = _wall_state(snapshot.layout, sv.t + dt)

    n_rows, n_cols = len(rows), len(cols)
    u_col = np.zeros((n_rows, n_cols))
    base = np.zeros((n_rows, n_cols))
    favorable = np.zeros((n_rows, n_cols), dtype=bool)

    # A yielding responder is modeled as accepting its style-typical headway
    # behind the SV once settled; scoring the transient squeeze instead would
    # make yielding look bad exactly when it matters.
    settled_thw = _style_headway(profile.gamma) + 2.0 / max(fv.v, 1.0)
    u_safe_settled = min(settled_thw / 2.0, 1.0)
    # Rear margins materialize at the lateral crossing, not within one
    # decision interval; merge rows project that far.
    t_cross = params.merge_duration / 2.0

    for ri, row in enumerate(rows):
        sv_n = sv_next[row.accel]
        front = _safe_thw(sv_n, lead_next)
        if row.intent == LateralIntent.KEEP and phase != MergePhase.EXECUTING:
            front = min(front, _safe_thw(sv_n, wall_next))
        u_eff = 1.0 - min(abs(sv_n.v - params.v_desire) / params.v_desire, 1.0)
        u_com = 1.0 - min(abs(row.accel - sv.a) / 3.0, 1.0)
        merge_row = row.intent != LateralIntent.KEEP or phase == MergePhase.EXECUTING
        sv_cross = step_longitudinal(sv, row.accel, t_cross) if merge_row else None
        for ci, col in enumerate(cols):
            fv_n = fv_next[col.accel]
            if col.intent == LateralIntent.YIELD:
                u_eff_c = 1.0 - min(abs(fv_n.v - profile.v_desire) / profile.v_desire, 1.0)
                u_com_c = 1.0 - min(abs(col.accel - fv.a) / 3.0, 1.0)
                comps = (u_safe_settled, u_eff_c, u_com_c)
                favorable[ri, ci] = col.accel >= FAVORABLE_MIN_ACCEL
            else:
                comps = component_payoffs(fv_n, PayoffContext(
                    leader=own_lead_next, v_desire=profile.v_desire,
                    accel_window=(fv.a, col.accel)))
                rear_thw = (_safe_thw(fv_n, sv_n) if fv_n.s <= sv_n.s
                            else _safe_thw(sv_n, fv_n))
                favorable[ri, ci] = (rear_thw >= FAVORABLE_MIN_THW
                                     and col.accel >= FAVORABLE_MIN_ACCEL)
            u_col[ri, ci] = hv_payoff(comps, profile.gamma, profile.weights)

            u_safe = min(front / 2.0, 1.0)
            if merge_row and fv.s <= sv.s + VEHICLE_LENGTH:
                fv_cross = step_longitudinal(fv, col.accel, t_cross)
                u_safe = min(u_safe, _safe_thw(fv_cross, sv_cross) / 2.0)
            base[ri, ci] = sv_payoff((u_safe, u_eff, u_com), (0.0, 0.0),
                                     weights.without_trust())

    u_row = base.copy()
    if weights.trust > 0:
        # Self-predictability margin, conditioned on each responder action by
        # re-deriving the SV's trust-free action distribution.
        t2_by_col = np.array([trust2(fv_response_distribution(base[:, ci]))
                              for ci in range(n_cols)])
        for ri in range(n_rows):
            dist = fv_response_distribution(u_col[ri])
            u_t1 = trust1(dist, favorable[ri])
            u_t2 = float(dist @ t2_by_col)
            u_row[ri, :] = base[ri, :] + weights.trust * (
                weights.xi1 * u_t1 + weights.xi2 * u_t2)

    kind = snapshot.vehicles[responder.vid].kind
    p = 1.0 if kind == VehicleKind.AV else trust.get(responder.vid, 0.5)
    cooperative = kind == VehicleKind.AV or p >= COOP_TRUST_GATE
    return Subgame(
        row_id=snapshot.sv_id, col_id=responder.vid,
        row_actions=rows, col_actions=cols,
        u_row=u_row, u_col=u_col,
        cooperative=cooperative, trust_weight=p,
        u_row_base=base, gap_id=gap.gap_id,
    )


def decompose(snapshot: WorldSnapshot, trust: dict[int, float],
              weights: SvWeights = SvWeights(), params: SvParams = SvParams(),
              phase: Optional[MergePhase] = None) -> list[Subgame]:
    """One subgame per conflicting target-lane vehicle, nearest first.

    Each responder is paired with the gap directly ahead of it: the slot the
    SV would take when negotiating with that vehicle as its new follower.
    Without an active merge intention there is nothing to decompose.
    """
    if phase is None:
        phase = snapshot.sv.state.merge_phase
    if phase not in (MergePhase.SIGNALING, MergePhase.EXECUTING):
        return []
    gap_ahead_of = {g.lag_id: g for g in candidate_gaps(snapshot) if g.lag_id is not None}
    games = []
    for info in conflicting_vehicles(snapshot):
        gap = gap_ahead_of.get(info.vid)
        if gap is None:
            continue
        games.append(build_subgame(snapshot, info, gap, trust, weights, params, phase))
    return games


# ---------------------------------------------------------------------------
# Merge decision


@dataclass(frozen=True)
class MergePlan:
    action: ActionPair
    gap: Optional[GapRef]
    committed: bool
    abort: bool
    outcomes: list[GameOutcome]
    gap_scores: dict[str, float]
    deadlock: bool = False
    behind_target: bool = False  # the chosen slot requires dropping back


def _merge_rollout_min_thw(snapshot: WorldSnapshot, gap: GapRef, sv_accel: float,
                           responder_moves: dict[int, float], params: SvParams,
                           duration: Optional[float] = None,
                           count_from: Optional[float] = None) -> float:
    """Minimum projected THW (front and rear of the slot) over the lane change.

    Headways count from the instant the SV's lateral path crosses into the
    target lane (half the maneuver for a fresh commit); before that moment
    there is no shared lane axis to measure on.
    """
    dt = params.sim_dt
    steps = max(int(round((duration if duration is not None else params.merge_duration) / dt)), 1)
    if count_from is None:
        count_from = params.merge_duration / 2.0
    sv = snapshot.sv.state
    lag = snapshot.vehicles[gap.lag_id].state if gap.lag_id is not None else None
    lead = snapshot.vehicles[gap.lead_id].state if gap.lead_id is not None else None
    worst = THW_CAP
    for k in range(steps):
        sv = step_longitudinal(sv, sv_accel, dt)
        if lead is not None:
            lead = step_longitudinal(lead, responder_moves.get(gap.lead_id, 0.0), dt)
        if lag is not None:
            lag = step_longitudinal(lag, responder_moves.get(gap.lag_id, 0.0), dt)
        if (k + 1) * dt < count_from:
            continue
        if lead is not None:
            worst = min(worst, _safe_thw(sv, lead))
        if lag is not None:
            worst = min(worst, _safe_thw(lag, sv))
    return worst


def _attach_rationality(outcome: GameOutcome, game: Subgame,
                        snapshot: WorldSnapshot, trust: dict[int, float]) -> GameOutcome:
    """Log the coalition accounting for a cooperative pair.

    The HV's allocated gain is recorded at trust weight, so the group
    identity against the characteristic function holds by construction.
    Individual-rationality flags are recorded under both readings of "the
    payoff if the member does not participate" (remainder coalition and own
    standalone value); they are diagnostics, not a gate.
    """
    kinds = {game.row_id: snapshot.vehicles[game.row_id].kind,
             game.col_id: snapshot.vehicles[game.col_id].kind}
    coalition = Coalition(
        members=((game.row_id, kinds[game.row_id]), (game.col_id, kinds[game.col_id])),
        trust={vid: trust.get(vid, 0.5) for vid, kind in kinds.items()
               if kind == VehicleKind.HV},
    )
    raw = {game.row_id: outcome.row_payoff, game.col_id: outcome.col_payoff}
    alloc = Allocation(u={
        vid: (raw[vid] if kinds[vid] == VehicleKind.AV else game.trust_weight * raw[vid])
        for vid in raw})

    keep_rows = [i for i, a in enumerate(game.row_actions)
                 if a.intent == LateralIntent.KEEP] or list(range(len(game.row_actions)))
    maintain_cols = [i for i, a in enumerate(game.col_actions)
                     if a.intent == LateralIntent.MAINTAIN] or list(range(len(game.col_actions)))
    solo_row = float(max(game.u_row_base[i].max() for i in keep_rows))
    solo_col_raw = float(max(game.u_col[0, i] for i in maintain_cols))
    solo_col = solo_col_raw if kinds[game.col_id] == VehicleKind.AV \
        else game.trust_weight * solo_col_raw

    # The characteristic function reads raw payoffs (trust-weighting the
    # HV's contribution itself); the allocation already records the HV's
    # gain at trust weight, so the group identity holds by construction.
    v_total = coalition_value(coalition, Allocation(u=raw))
    remainder = rationality_check(coalition, alloc, {
        game.row_id: solo_col,   # value the rest secures without the SV
        game.col_id: solo_row,   # value the rest secures without the responder
    }, characteristic_value=v_total)
    standalone = rationality_check(coalition, alloc, {
        game.row_id: solo_row,
        game.col_id: solo_col,
    }, characteristic_value=v_total)
    trace = dict(outcome.trace)
    trace["rationality"] = {
        "group": remainder.group,
        "individual_remainder": remainder.individual,
        "individual_standalone": standalone.individual,
        "allocation": alloc.u,
        "coalition_value": v_total,
    }
    return GameOutcome(**{**outcome.__dict__, "trace": trace})


def _solve_subgame(game: Subgame, snapshot: WorldSnapshot,
                   trust: dict[int, float]) -> GameOutcome:
    if game.cooperative:
        return _attach_rationality(solve_cooperative(game), game, snapshot, trust)
    return solve_noncooperative(game)


def _best_row(outcome: GameOutcome, game: Subgame, intent: LateralIntent,
              mild_only: bool = False) -> Optional[int]:
    """Highest-value row with the given intent (ties prefer mild accelerations).

    `mild_only` restricts to comfortable accelerations, which is how the
    committed maneuver itself is executed.
    """
    best = None
    for i, action in enumerate(game.row_actions):
        if action.intent != intent:
            continue
        if mild_only and abs(action.accel) > 1.5:
            continue
        key = (outcome.row_values[i], -abs(action.accel))
        if best is None or key > best[0]:
            best = (key, i)
    return None if best is None else best[1]


def _free_merge_accel(snapshot: WorldSnapshot, gap: GapRef, params: SvParams) -> float:
    """Merge acceleration when no responder constrains the slot."""
    sv = snapshot.sv.state
    best = None
    lead = snapshot.vehicles[gap.lead_id].state if gap.lead_id is not None else None
    for accel in ACTION_ACCELS:
        sv_n = step_longitudinal(sv, accel, params.decision_dt)
        front = _safe_thw(sv_n, step_longitudinal(lead, 0.0, params.decision_dt)
                          if lead is not None else None)
        u_safe = min(front / 2.0, 1.0)
        u_eff = 1.0 - min(abs(sv_n.v - params.v_desire) / params.v_desire, 1.0)
        u_com = 1.0 - min(abs(accel - sv.a) / 3.0, 1.0)
        key = (u_safe + u_eff + 0.5 * u_com, -abs(accel))
        if best is None or key > best[0]:
            best = (key, accel)
    return best[1]


def _slot_center(snapshot: WorldSnapshot, gap: GapRef) -> tuple[Optional[float], float]:
    """Projected slot center and its running speed."""
    sv = snapshot.sv.state
    lag = snapshot.vehicles[gap.lag_id].state if gap.lag_id is not None else None
    lead = snapshot.vehicles[gap.lead_id].state if gap.lead_id is not None else None
    if lag is not None and lead is not None:
        return (lag.s + lead.s) / 2.0, (lag.v + lead.v) / 2.0
    if lead is not None:
        return lead.s - VEHICLE_LENGTH - 1.2 * lead.v, lead.v
    if lag is not None:
        return lag.s + VEHICLE_LENGTH + 1.2 * lag.v, lag.v
    return None, sv.v


def _slot_distance(snapshot: WorldSnapshot, gap: GapRef) -> float:
    slot, _ = _slot_center(snapshot, gap)
    return 0.0 if slot is None else abs(slot - snapshot.sv.state.s)


def containing_gap(snapshot: WorldSnapshot) -> GapRef:
    """The gap whose longitudinal span holds the SV right now."""
    gaps = candidate_gaps(snapshot)
    sv_s = snapshot.sv.state.s
    for gap in gaps:
        lead = snapshot.vehicles[gap.lead_id].state if gap.lead_id is not None else None
        if lead is None or lead.s > sv_s:
            return gap
    return gaps[-1]


def _span_distance(snapshot: WorldSnapshot, gap: GapRef) -> float:
    """Distance from the SV to the gap's usable span (zero when inside)."""
    sv_s = snapshot.sv.state.s
    lag = snapshot.vehicles[gap.lag_id].state if gap.lag_id is not None else None
    lead = snapshot.vehicles[gap.lead_id].state if gap.lead_id is not None else None
    lo = lag.s + VEHICLE_LENGTH if lag is not None else -math.inf
    hi = lead.s - VEHICLE_LENGTH if lead is not None else math.inf
    if sv_s < lo:
        return lo - sv_s
    if sv_s > hi:
        return sv_s - hi
    return 0.0


def slot_prospect(snapshot: WorldSnapshot, gap: GapRef, trust: dict[int, float],
                  directions: dict[int, float], weights: SvWeights,
                  params: SvParams, noise: Optional[dict[int, float]] = None) -> float:
    """What this slot offers once the SV is aligned in it.

    The binding uncertainty is whether the slot's rear vehicle makes room:
    its yield branch grants the SV the slot minus the style-typical headway
    the driver keeps for itself, the no-accommodation branch squeezes the SV
    into whatever is left right now. The branches blend by accommodation
    credence (agreements from automated partners are binding).
    """
    sv = snapshot.sv.state
    lag = snapshot.vehicles[gap.lag_id].state if gap.lag_id is not None else None
    lead = snapshot.vehicles[gap.lead_id].state if gap.lead_id is not None else None
    _, v_slot = _slot_center(snapshot, gap)
    v_slot = max(v_slot, 1.0)
    u_eff = 1.0 - min(abs(v_slot - params.v_desire) / params.v_desire, 1.0)

    def value(front: float, rear: float) -> float:
        tight = min(front, rear)
        u_safe = min(tight / 2.0, 1.0)
        u_t1 = 1.0 if rear >= FAVORABLE_MIN_THW else 0.0
        return sv_payoff((u_safe, u_eff, 1.0), (u_t1, 0.0), weights)

    if lag is None and lead is None:
        return value(THW_CAP, THW_CAP)

    span = THW_CAP
    if lag is not None and lead is not None:
        span = max((lead.s - lag.s) - 2 * VEHICLE_LENGTH, 0.0) / v_slot

    if lag is None:
        return value(min(span, THW_CAP), THW_CAP)

    # Rear vehicle present: how much room will it concede?
    info = snapshot.vehicles[gap.lag_id]
    if info.kind == VehicleKind.AV:
        credence = 1.0
        style_headway = 1.2
    else:
        credence = accommodation_credence(
            trust.get(gap.lag_id, 0.5), directions.get(gap.lag_id, 0.0),
            (noise or {}).get(gap.lag_id, 1.0))
        gamma = snapshot.profile_of(gap.lag_id).gamma
        style_headway = _style_headway(gamma) + 2.0 / max(lag.v, 1.0)

    front_yield = span if lead is not None else THW_CAP
    yield_value = value(front_yield, style_headway)

    rear_now = _safe_thw(lag, sv) if lag.s <= sv.s else 0.0
    rear_hold = min(span / 2.0, rear_now)
    front_hold = max(span - rear_hold, 0.0) if lead is not None else THW_CAP
    hold_value = value(front_hold, rear_hold)
    return credence * yield_value + (1.0 - credence) * hold_value


def _banks_on_accommodation(vid: int, snapshot: WorldSnapshot,
                            trust: dict[int, float],
                            directions: dict[int, float]) -> bool:
    """Whether a predicted accommodation from this vehicle can be relied on.

    Automated partners honor agreements. A human's accommodation is banked
    only when its trust estimate clears the cooperation gate and its decisive
    tendency points backward; a trusted but decisively contesting driver is
    predictable, not accommodating.
    """
    if snapshot.vehicles[vid].kind == VehicleKind.AV:
        return True
    return (trust.get(vid, 0.5) >= COOP_TRUST_GATE
            and directions.get(vid, 0.0) >= 0.0)


def _predicted_moves(gap: GapRef, solved: dict[int, GameOutcome],
                     snapshot: WorldSnapshot, trust: dict[int, float],
                     directions: dict[int, float]) -> dict[int, float]:
    """Responder accelerations the merge projection banks on."""
    moves = {}
    for vid in (gap.lag_id, gap.lead_id):
        if vid is None:
            continue
        outcome = solved.get(vid)
        if outcome is None:
            moves[vid] = 0.0
            continue
        accel = outcome.col_action.accel
        accommodating = (outcome.col_action.intent == LateralIntent.YIELD or accel < 0)
        if accommodating and not _banks_on_accommodation(vid, snapshot, trust, directions):
            accel = 0.0
        moves[vid] = accel
    return moves


def _monitor_executing(snapshot: WorldSnapshot, gap: GapRef,
                       solved: dict[int, GameOutcome],
                       subgames: dict[int, Subgame], params: SvParams,
                       outcomes: list[GameOutcome],
                       remaining: Optional[float],
                       trust: dict[int, float],
                       directions: dict[int, float]) -> MergePlan:
    responder_moves = _predicted_moves(gap, solved, snapshot, trust, directions)
    horizon = remaining if remaining is not None and remaining > params.sim_dt \
        else params.sim_dt * 2
    accel = 0.0
    binding = solved.get(gap.lag_id) if gap.lag_id is not None else None
    if binding is not None:
        accel = binding.row_action.accel
    elapsed = params.merge_duration - horizon
    count_from = max(params.merge_duration / 2.0 - elapsed, 0.0)
    min_thw = _merge_rollout_min_thw(snapshot, gap, accel, responder_moves,
                                     params, duration=horizon,
                                     count_from=count_from)
    if min_thw < ABORT_MIN_THW:
        return MergePlan(action=ActionPair(-1.5, LateralIntent.ABORT_MERGE), gap=gap,
                         committed=False, abort=True, outcomes=outcomes,
                         gap_scores={})
    return MergePlan(action=ActionPair(accel, LateralIntent.KEEP), gap=gap,
                     committed=False, abort=False, outcomes=outcomes, gap_scores={})


def merge_decision(snapshot: WorldSnapshot, trust: dict[int, float],
                   weights: SvWeights, params: SvParams = SvParams(),
                   mode: str = "trust_on",
                   committed_gap: Optional[GapRef] = None,
                   remaining_merge_time: Optional[float] = None,
                   directions: Optional[dict[int, float]] = None,
                   previous_gap_id: Optional[str] = None,
                   noise: Optional[dict[int, float]] = None,
                   latched_gap_id: Optional[str] = None) -> MergePlan:
    """Gap selection and the commit / adjust / abort choice for one interval.

    Scores every candidate gap through its responder subgame (or geometry
    when unconstrained), commits the merge only when the whole lane change
    keeps projected headways at or above the commit threshold, and otherwise
    returns the best lane-keeping adjustment. An executing merge is only
    aborted when the projection drops below the abort threshold.
    """
    if mode not in ("trust_on", "trust_off"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "trust_off":
        weights = weights.without_trust()
    if directions is None:
        directions = {}

    phase = snapshot.sv.state.merge_phase
    if phase not in (MergePhase.SIGNALING, MergePhase.EXECUTING):
        return MergePlan(action=ActionPair(0.0, LateralIntent.KEEP), gap=None,
                         committed=False, abort=False, outcomes=[], gap_scores={})

    subgames = {g.col_id: g for g in decompose(snapshot, trust, weights, params, phase)}
    outcomes: list[GameOutcome] = []
    solved: dict[int, GameOutcome] = {}
    for vid, g in subgames.items():
        outcome = _solve_subgame(g, snapshot, trust)
        solved[vid] = outcome
        outcomes.append(outcome)

    if phase == MergePhase.EXECUTING and committed_gap is not None:
        return _monitor_executing(snapshot, committed_gap, solved, subgames,
                                  params, outcomes, remaining_merge_time, trust,
                                  directions)

    # Slots are ranked by what they will offer once the SV is aligned in
    # them, discounted by the travel to get there; merging forward is the
    # natural ramp maneuver and the current target is sticky.
    current = containing_gap(snapshot)
    gap_scores: dict[str, float] = {}
    best: Optional[tuple[float, GapRef]] = None
    sv_s = snapshot.sv.state.s
    for gap in reachable_gaps(snapshot):
        score = slot_prospect(snapshot, gap, trust, directions, weights, params, noise)
        slot, _ = _slot_center(snapshot, gap)
        ahead = slot is None or slot > sv_s
        distance = max(_span_distance(snapshot, gap) - ALIGN_TOLERANCE, 0.0)
        score -= (ALIGN_AHEAD if ahead else ALIGN_BEHIND) * distance
        if ahead and slot is not None:
            score += AHEAD_BIAS
        if previous_gap_id is not None and gap.gap_id == previous_gap_id:
            score += TARGET_HYSTERESIS
        # A decision to drop back stays strongly sticky so the fallback is
        # executed decisively, but a qualitatively better slot can still win.
        if latched_gap_id is not None and gap.gap_id == latched_gap_id:
            score += FALLBACK_HYSTERESIS
        gap_scores[gap.gap_id] = score
        if best is None or score > best[0]:
            best = (score, gap)

    _, gap = best
    sv_state = snapshot.sv.state
    zone_start, zone_end = snapshot.layout.merge_zone
    responder_moves = _predicted_moves(gap, solved, snapshot, trust, directions)

    if _span_distance(snapshot, gap) == 0.0:
        binding = solved.get(gap.lag_id) if gap.lag_id is not None else None
        if binding is not None:
            merge_row = _best_row(binding, subgames[gap.lag_id],
                                  LateralIntent.INITIATE_MERGE, mild_only=True)
            merge_accel = subgames[gap.lag_id].row_actions[merge_row].accel \
                if merge_row is not None else 0.0
        else:
            merge_accel = _free_merge_accel(snapshot, gap, params)
        in_zone = zone_start <= sv_state.s <= zone_end
        min_thw = _merge_rollout_min_thw(snapshot, gap, merge_accel, responder_moves, params)
        if min_thw >= COMMIT_MIN_THW and in_zone:
            return MergePlan(action=ActionPair(merge_accel, LateralIntent.INITIATE_MERGE),
                             gap=gap, committed=True, abort=False, outcomes=outcomes,
                             gap_scores=gap_scores)

    # Hard ramp-end constraint: keep enough room to brake to rest before the
    # terminus whenever the merge has not committed.
    wall_gap = zone_end - sv_state.s
    if wall_gap < sv_state.v ** 2 / 5.0 + 2.0:
        return MergePlan(action=ActionPair(-3.0, LateralIntent.KEEP), gap=gap,
                         committed=False, abort=False, outcomes=outcomes,
                         gap_scores=gap_scores, deadlock=wall_gap < VEHICLE_LENGTH)

    slot, _ = _slot_center(snapshot, gap)
    behind = slot is not None and slot < sv_state.s - 2.0
    adjust = _adjust_action(snapshot, gap, params, responder_moves)
    if adjust is None:
        return MergePlan(action=ActionPair(-3.0, LateralIntent.KEEP), gap=gap,
                         committed=False, abort=False, outcomes=outcomes,
                         gap_scores=gap_scores, deadlock=True, behind_target=behind)
    return MergePlan(action=adjust, gap=gap, committed=False, abort=False,
                     outcomes=outcomes, gap_scores=gap_scores, behind_target=behind)


def _adjust_action(snapshot: WorldSnapshot, gap: GapRef, params: SvParams,
                   responder_moves: dict[int, float]) -> Optional[ActionPair]:
    """Longitudinal positioning onto the chosen slot while the gate is shut.

    Picks the acceleration that best aligns the SV with the slot's projected
    center a couple of seconds out, subject to keeping stopping room on the
    ramp; this is what lets the SV assert into a trusted front slot or drop
    back decisively toward a rear one.
    """
    sv = snapshot.sv.state
    lag = snapshot.vehicles[gap.lag_id].state if gap.lag_id is not None else None
    lead = snapshot.vehicles[gap.lead_id].state if gap.lead_id is not None else None

    if lag is not None and lead is not None:
        slot = (lag.s + lead.s) / 2.0
        v_slot = (lag.v + lead.v) / 2.0
    elif lead is not None:
        slot = lead.s - VEHICLE_LENGTH - 1.2 * lead.v
        v_slot = lead.v
    elif lag is not None:
        slot = lag.s + VEHICLE_LENGTH + 1.2 * lag.v
        v_slot = lag.v
    else:
        slot, v_slot = sv.s, params.v_desire

    # Bounded relative-speed regulation toward the slot; strong braking is
    # reserved for the ramp-end constraint. A deadband keeps the commanded
    # level where it is unless a real correction is called for, and chasing
    # a slot never outruns the desired speed by more than a step.
    err = slot - sv.s
    dv_target = min(max(err / 4.0, -2.5), 2.5)
    dv = sv.v - v_slot
    raw = min(max(dv_target - dv, -1.5), 1.5)
    raw = min(raw, params.v_desire + 1.5 - sv.v)
    raw = max(raw, -1.5)
    if abs(raw - sv.a) < 0.75:
        accel = round(sv.a / 1.5) * 1.5
    else:
        accel = round(raw / 1.5) * 1.5
    accel = min(max(accel, -1.5), 1.5)

    # Target-lane vehicles are in another lane while positioning; the only
    # hard obstacle on the ramp is its terminus.
    horizon = 1.0
    wall = _wall_state(snapshot.layout, sv.t + horizon)
    for candidate in (accel, -1.5, -3.0):
        sv_h = step_longitudinal(sv, candidate, horizon)
        if _safe_thw(sv_h, wall) >= ABORT_MIN_THW:
            return ActionPair(candidate, LateralIntent.KEEP)
    return None

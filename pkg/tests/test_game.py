import math

import numpy as np
import pytest

from trustmerge.config import init_merge_scenario
from trustmerge.game import (Allocation, Coalition, GapRef, Subgame, SvParams,
                             VehicleInfo, WorldSnapshot, coalition_value,
                             candidate_gaps, conflicting_vehicles, decompose,
                             merge_decision, rationality_check,
                             solve_cooperative, solve_noncooperative)
from trustmerge.payoff import SvWeights
from trustmerge.world import (ACTION_ACCELS, ActionPair, LateralIntent,
                              MergePhase, RoadLayout, VehicleKind, VehicleState)


def make_subgame(u_row, u_col, cooperative=True, p=1.0):
    u_row = np.asarray(u_row, dtype=float)
    u_col = np.asarray(u_col, dtype=float)
    n_rows, n_cols = u_row.shape
    intents = (LateralIntent.INITIATE_MERGE, LateralIntent.KEEP,
               LateralIntent.ABORT_MERGE)
    rows = [ActionPair(ACTION_ACCELS[i % 5], intents[i // 5]) for i in range(n_rows)]
    cols = [ActionPair(ACTION_ACCELS[i % 5], intents[i // 5]) for i in range(n_cols)]
    return Subgame(row_id=0, col_id=1, row_actions=rows, col_actions=cols,
                   u_row=u_row, u_col=u_col, cooperative=cooperative,
                   trust_weight=p)


def oracle_cooperative(u_row, u_col, p):
    """Independent exhaustive enumeration with the stated tie-breaks."""
    best = None
    for r in range(len(u_row)):
        for c in range(len(u_row[0])):
            key = (u_row[r][c] + p * u_col[r][c], u_row[r][c], -r, -c)
            if best is None or key > best[0]:
                best = (key, r, c)
    return best[1], best[2]


def oracle_noncooperative(u_row, u_col):
    """Brute-force logit expectation, plain math only."""
    best = None
    for r in range(len(u_row)):
        mx = max(u_col[r])
        weights = [math.exp(v - mx) for v in u_col[r]]
        total = sum(weights)
        expected = sum(w / total * u for w, u in zip(weights, u_row[r]))
        if best is None or expected > best[0] + 0.0:
            best = (expected, r)
    return best[1]


class TestCoalition:
    def test_characteristic_function(self):
        coalition = Coalition(members=((0, VehicleKind.AV), (1, VehicleKind.AV),
                                       (2, VehicleKind.HV)),
                              trust={2: 0.5})
        alloc = Allocation(u={0: 2.0, 1: 3.0, 2: 4.0})
        assert coalition_value(coalition, alloc) == pytest.approx(7.0)

    @pytest.mark.parametrize("p,total", [(0.0, 5.0), (1.0, 9.0)])
    def test_trust_boundaries(self, p, total):
        coalition = Coalition(members=((0, VehicleKind.AV), (1, VehicleKind.AV),
                                       (2, VehicleKind.HV)),
                              trust={2: p})
        alloc = Allocation(u={0: 2.0, 1: 3.0, 2: 4.0})
        assert coalition_value(coalition, alloc) == pytest.approx(total)

    def test_missing_trust_rejected(self):
        with pytest.raises(ValueError):
            Coalition(members=((0, VehicleKind.HV),), trust={})

    def test_linearity(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            u = {0: float(rng.normal()), 1: float(rng.normal())}
            p = float(rng.uniform(0, 1))
            coalition = Coalition(members=((0, VehicleKind.AV), (1, VehicleKind.HV)),
                                  trust={1: p})
            base = coalition_value(coalition, Allocation(u=u))
            bumped = coalition_value(coalition, Allocation(u={0: u[0] + 1.0, 1: u[1]}))
            assert bumped - base == pytest.approx(1.0)
            bumped_hv = coalition_value(coalition, Allocation(u={0: u[0], 1: u[1] + 1.0}))
            assert bumped_hv - base == pytest.approx(p)


class TestRationality:
    def _coalition(self):
        return Coalition(members=((0, VehicleKind.AV), (1, VehicleKind.AV)), trust={})

    def test_group_identity(self):
        alloc = Allocation(u={0: 3.0, 1: 4.0})
        report = rationality_check(self._coalition(), alloc, {0: 0.0, 1: 0.0})
        assert report.group

    def test_individual_failure(self):
        alloc = Allocation(u={0: 2.0, 1: 4.0})
        report = rationality_check(self._coalition(), alloc, {0: 5.0, 1: 0.0})
        assert report.individual[0] is False
        assert report.individual[1] is True

    def test_boundary_equality_accepted(self):
        alloc = Allocation(u={0: 2.0, 1: 4.0})
        report = rationality_check(self._coalition(), alloc, {0: 2.0, 1: 4.0})
        assert all(report.individual.values())

    def test_missing_counterfactual_rejected(self):
        with pytest.raises(ValueError):
            rationality_check(self._coalition(), Allocation(u={0: 1.0, 1: 1.0}), {0: 0.0})


class TestCooperativeSolver:
    def test_joint_sum_example(self):
        game = make_subgame([[3.0, 1.0], [2.0, 2.5]], [[0.0, 0.0], [0.0, 0.0]])
        outcome = solve_cooperative(game, trust_weight=1.0)
        assert (outcome.row_idx, outcome.col_idx) == (0, 0)

    def test_all_equal_tiebreak(self):
        game = make_subgame(np.ones((3, 3)), np.zeros((3, 3)))
        outcome = solve_cooperative(game, trust_weight=1.0)
        assert (outcome.row_idx, outcome.col_idx) == (0, 0)

    def test_zero_trust_reduces_to_row_argmax(self):
        u_row = [[1.0, 5.0], [2.0, 0.0]]
        u_col = [[100.0, 0.0], [0.0, 100.0]]
        outcome = solve_cooperative(make_subgame(u_row, u_col), trust_weight=0.0)
        assert (outcome.row_idx, outcome.col_idx) == (0, 1)

    def test_scale_invariance(self):
        rng = np.random.default_rng(23)
        for _ in range(50):
            shape = (int(rng.integers(2, 8)), int(rng.integers(2, 8)))
            u_row = rng.normal(0, 3, shape)
            u_col = rng.normal(0, 3, shape)
            p = float(rng.uniform(0, 1))
            a = solve_cooperative(make_subgame(u_row, u_col), trust_weight=p)
            b = solve_cooperative(make_subgame(u_row * 7.5, u_col * 7.5), trust_weight=p)
            assert (a.row_idx, a.col_idx) == (b.row_idx, b.col_idx)


class TestNoncooperativeSolver:
    def test_dominant_response_close_to_pure(self):
        u_col = [[10.0, 0.0], [10.0, 0.0]]
        u_row = [[0.9, 0.1], [0.8, 0.95]]
        outcome = solve_noncooperative(make_subgame(u_row, u_col, cooperative=False))
        assert outcome.row_idx == 0
        assert outcome.row_payoff == pytest.approx(0.9, abs=1e-3)

    def test_uniform_responder_means_row_mean(self):
        u_col = [[1.0, 1.0], [1.0, 1.0]]
        u_row = [[0.0, 1.0], [0.4, 0.45]]
        outcome = solve_noncooperative(make_subgame(u_row, u_col, cooperative=False))
        assert outcome.row_idx == 0
        assert outcome.col_distribution == pytest.approx((0.5, 0.5))

    def test_two_by_two_hand_case(self):
        # responder indifferent under row 0, decisive under row 1
        u_row = [[1.0, 0.0], [0.6, 0.6]]
        u_col = [[1.0, 1.0], [0.0, 1.0]]
        outcome = solve_noncooperative(make_subgame(u_row, u_col, cooperative=False))
        assert outcome.row_idx == 1
        assert outcome.row_payoff == pytest.approx(0.6)


class TestSolverOracles:
    def test_cooperative_matches_enumeration(self):
        rng = np.random.default_rng(29)
        for _ in range(150):
            shape = (int(rng.integers(1, 16)), int(rng.integers(1, 16)))
            u_row = rng.normal(0, 2, shape)
            u_col = rng.normal(0, 2, shape)
            p = float(rng.uniform(0, 1))
            outcome = solve_cooperative(make_subgame(u_row, u_col), trust_weight=p)
            assert (outcome.row_idx, outcome.col_idx) == oracle_cooperative(
                u_row.tolist(), u_col.tolist(), p)

    def test_noncooperative_matches_enumeration(self):
        rng = np.random.default_rng(31)
        for _ in range(150):
            shape = (int(rng.integers(1, 16)), int(rng.integers(1, 16)))
            u_row = rng.normal(0, 2, shape)
            u_col = rng.normal(0, 2, shape)
            outcome = solve_noncooperative(make_subgame(u_row, u_col, cooperative=False))
            assert outcome.row_idx == oracle_noncooperative(u_row.tolist(), u_col.tolist())


def fig1_snapshot(hv_trust_p=0.5, hv_speed=13.0):
    """Reference layout: SV on the ramp beside the platoon's middle gap."""
    layout = RoadLayout()
    vehicles = {
        0: VehicleInfo(0, VehicleKind.AV, VehicleState(
            s=70.0, v=15.0, lane=0, merge_phase=MergePhase.SIGNALING)),
        1: VehicleInfo(1, VehicleKind.HV, VehicleState(s=75.0, v=hv_speed, lane=1)),
        2: VehicleInfo(2, VehicleKind.AV, VehicleState(s=100.0, v=15.0, lane=1)),
        3: VehicleInfo(3, VehicleKind.AV, VehicleState(s=50.0, v=15.0, lane=1)),
    }
    return WorldSnapshot(layout=layout, sv_id=0, vehicles=vehicles)


class TestDecompose:
    def test_fig1_layout(self):
        games = decompose(fig1_snapshot(), trust={1: 0.5})
        responders = [g.col_id for g in games]
        # nearest-first: the human, then the trailing AV; the distant lead
        # AV does not interact
        assert responders == [1, 3]

    def test_all_av_coalition_is_cooperative(self):
        snapshot = fig1_snapshot()
        vehicles = dict(snapshot.vehicles)
        vehicles[1] = VehicleInfo(1, VehicleKind.AV, vehicles[1].state)
        snapshot = WorldSnapshot(layout=snapshot.layout, sv_id=0, vehicles=vehicles)
        games = decompose(snapshot, trust={})
        assert games and all(g.cooperative for g in games)

    def test_trusted_hv_is_cooperative(self):
        games = decompose(fig1_snapshot(), trust={1: 0.9})
        hv_game = next(g for g in games if g.col_id == 1)
        assert hv_game.cooperative

    def test_distrusted_hv_is_noncooperative(self):
        games = decompose(fig1_snapshot(), trust={1: 0.2})
        hv_game = next(g for g in games if g.col_id == 1)
        assert not hv_game.cooperative

    def test_no_intention_means_no_games(self):
        snapshot = fig1_snapshot()
        vehicles = dict(snapshot.vehicles)
        sv = vehicles[0]
        vehicles[0] = VehicleInfo(0, sv.kind, VehicleState(
            s=70.0, v=15.0, lane=0, merge_phase=MergePhase.NONE))
        snapshot = WorldSnapshot(layout=snapshot.layout, sv_id=0, vehicles=vehicles)
        assert decompose(snapshot, trust={}) == []


class TestMergeDecision:
    def test_empty_target_lane_commits_immediately(self):
        layout = RoadLayout()
        vehicles = {0: VehicleInfo(0, VehicleKind.AV, VehicleState(
            s=80.0, v=15.0, lane=0, merge_phase=MergePhase.SIGNALING))}
        snapshot = WorldSnapshot(layout=layout, sv_id=0, vehicles=vehicles)
        plan = merge_decision(snapshot, trust={}, weights=SvWeights())
        assert plan.committed
        assert plan.action.intent == LateralIntent.INITIATE_MERGE
        assert plan.action.accel == 0.0

    def test_outside_zone_never_commits(self):
        layout = RoadLayout()
        vehicles = {0: VehicleInfo(0, VehicleKind.AV, VehicleState(
            s=10.0, v=15.0, lane=0, merge_phase=MergePhase.SIGNALING))}
        snapshot = WorldSnapshot(layout=layout, sv_id=0, vehicles=vehicles)
        plan = merge_decision(snapshot, trust={}, weights=SvWeights())
        assert not plan.committed

    def test_cooperative_solutions_satisfy_group_rationality(self):
        games = decompose(fig1_snapshot(hv_trust_p=0.9), trust={1: 0.9})
        plan = merge_decision(fig1_snapshot(), trust={1: 0.9}, weights=SvWeights())
        for outcome in plan.outcomes:
            if outcome.mode == "cooperative":
                assert outcome.trace["rationality"]["group"] is True

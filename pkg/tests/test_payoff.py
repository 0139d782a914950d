import numpy as np
import pytest

from trustmerge.payoff import (HvWeights, PayoffContext, SvWeights,
                               component_payoffs, fv_response_distribution,
                               hv_payoff, sv_payoff, trust1, trust2)
from trustmerge.world import VehicleState


def ctx(thw=2.0, v=15.0, v_desire=15.0, jerk=0.0):
    ego = VehicleState(s=0.0, v=v)
    leader = VehicleState(s=thw * v + 5.0, v=v) if thw is not None else None
    return ego, PayoffContext(leader=leader, v_desire=v_desire,
                              accel_window=(0.0, jerk), jerk_dt=1.0)


class TestComponents:
    def test_saturation_point(self):
        ego, context = ctx(thw=2.0, v=15.0, jerk=0.0)
        assert component_payoffs(ego, context) == pytest.approx((1.0, 1.0, 1.0))

    def test_half_scale(self):
        ego, context = ctx(thw=1.0, v=7.5, jerk=1.5)
        assert component_payoffs(ego, context) == pytest.approx((0.5, 0.5, 0.5))

    def test_floor(self):
        ego = VehicleState(s=0.0, v=0.0)
        context = PayoffContext(leader=VehicleState(s=5.0, v=0.0), v_desire=15.0,
                                accel_window=(0.0, 3.5), jerk_dt=1.0)
        assert component_payoffs(ego, context) == pytest.approx((0.0, 0.0, 0.0))

    def test_no_leader_is_safe(self):
        ego = VehicleState(s=0.0, v=15.0)
        context = PayoffContext(leader=None, v_desire=15.0)
        assert component_payoffs(ego, context)[0] == 1.0

    def test_bad_v_desire(self):
        ego = VehicleState(s=0.0, v=15.0)
        with pytest.raises(ValueError):
            component_payoffs(ego, PayoffContext(leader=None, v_desire=0.0))


class TestHvPayoff:
    def test_direct_arithmetic(self):
        assert hv_payoff((0.8, 0.6, 0.4), 0.5) == pytest.approx(1.1)

    def test_pure_efficiency_boundary(self):
        lam = HvWeights(safe=2.0, eff=3.0, com=4.0)
        assert hv_payoff((0.9, 0.6, 0.7), 1.0, lam) == pytest.approx(3.0 * 0.6)

    def test_defensive_weights_safety_more(self):
        aggressive = hv_payoff((1.0, 0.0, 0.0), 0.7)
        defensive = hv_payoff((1.0, 0.0, 0.0), 0.3)
        assert aggressive == pytest.approx(0.3)
        assert defensive == pytest.approx(0.7)

    def test_monotone_in_components(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            gamma = float(rng.uniform(0, 1))
            lam = HvWeights(*rng.uniform(0, 2, size=3))
            comps = rng.uniform(0, 1, size=3)
            base = hv_payoff(tuple(comps), gamma, lam)
            for i in range(3):
                bumped = comps.copy()
                bumped[i] = min(bumped[i] + 0.1, 1.0)
                assert hv_payoff(tuple(bumped), gamma, lam) >= base - 1e-12


class TestResponseDistribution:
    def test_symmetry(self):
        assert fv_response_distribution([2.0, 2.0]) == pytest.approx([0.5, 0.5])

    def test_scalar_softmax(self):
        dist = fv_response_distribution([1.0, 0.0])
        e = np.e
        assert dist == pytest.approx([e / (1 + e), 1 / (1 + e)])

    def test_stabilization_keeps_result(self):
        dist = fv_response_distribution([10.0, 0.0])
        assert dist[0] > 0.9999

    def test_probability_vector_for_random_payoffs(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            values = rng.normal(0, 50, size=int(rng.integers(1, 12)))
            dist = fv_response_distribution(values)
            assert np.all(dist >= 0)
            assert abs(dist.sum() - 1.0) <= 1e-9

    def test_shift_invariance(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            values = rng.normal(0, 5, size=6)
            base = fv_response_distribution(values)
            shifted = fv_response_distribution(values + 123.456)
            assert np.all(np.abs(base - shifted) <= 1e-9)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fv_response_distribution([])


class TestTrustTerms:
    def test_trust1_subset_sum(self):
        assert trust1([0.7, 0.3], [True, False]) == pytest.approx(0.7)

    def test_trust1_all_favorable(self):
        assert trust1([0.25, 0.25, 0.5], [True, True, True]) == pytest.approx(1.0)

    def test_trust1_empty_favorable(self):
        assert trust1([0.5, 0.5], [False, False]) == 0.0

    def test_trust2_margin(self):
        assert trust2([0.6, 0.3, 0.1]) == pytest.approx(0.3)

    def test_trust2_uniform_tie(self):
        assert trust2([0.25] * 4) == pytest.approx(0.0)

    def test_trust2_singleton(self):
        assert trust2([1.0]) == 1.0

    def test_trust2_range(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            raw = rng.uniform(0, 1, size=int(rng.integers(2, 9)))
            dist = raw / raw.sum()
            assert 0.0 <= trust2(dist) <= 1.0


class TestSvPayoff:
    def test_all_ones(self):
        w = SvWeights(safe=1, eff=1, com=1, trust=1, xi1=0.5, xi2=0.5)
        assert sv_payoff((1, 1, 1), (1, 1), w) == pytest.approx(4.0)

    def test_trust_free_ablation_identity(self):
        w = SvWeights(safe=1.2, eff=0.8, com=0.5, trust=0.0)
        for trust_terms in ((0, 0), (1, 1), (0.3, 0.9)):
            assert sv_payoff((0.5, 0.6, 0.7), trust_terms, w) == pytest.approx(
                1.2 * 0.5 + 0.8 * 0.6 + 0.5 * 0.7)

    def test_hand_arithmetic(self):
        w = SvWeights(safe=1, eff=0, com=0, trust=2, xi1=1.0, xi2=0.0)
        assert sv_payoff((0.5, 0.9, 0.1), (0.4, 0.8), w) == pytest.approx(1.3)

    def test_xi_normalization_enforced(self):
        with pytest.raises(ValueError):
            SvWeights(xi1=0.7, xi2=0.7)

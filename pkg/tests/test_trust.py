import math
from fractions import Fraction

import numpy as np
import pytest

from trustmerge.trust import (IntentionLabel, NoisePosterior, TrustParams,
                              TrustState, TrustThresholds, estimate_trust,
                              label_intention, label_samples, label_terminal,
                              predict_nominal, sample_trajectories, trust_tick,
                              update_noise, zero_accel_reference)
from trustmerge.world import Trajectory, VehicleState, rollout_constant_accel


def history(accels, v0=15.0, dt=0.1):
    states = []
    st = VehicleState(s=0.0, v=v0, a=accels[0], t=0.0)
    states.append(st)
    for i, a in enumerate(accels[1:], start=1):
        from dataclasses import replace
        nxt = VehicleState(s=st.s + st.v * dt, v=max(st.v + a * dt, 0.0),
                           a=a, t=i * dt)
        states.append(nxt)
        st = nxt
    return Trajectory(states=states, dt=dt)


class TestPosterior:
    def test_conjugate_update_example(self):
        prior = NoisePosterior(alpha=2.0, beta=1.0)
        assert prior.point == pytest.approx(1.0)
        updated = prior.updated(2.0)
        assert (updated.alpha, updated.beta) == (2.5, 3.0)
        assert updated.point == pytest.approx(2.0)

    def test_zero_residual_shrinks_variance(self):
        state = NoisePosterior(alpha=3.0, beta=2.0)
        updated = state.updated(0.0)
        assert updated.point < state.point

    def test_repeated_zero_residuals_drive_w_down(self):
        post = NoisePosterior(alpha=3.0, beta=2.0)
        last = post.point
        for _ in range(200):
            post = post.updated(0.0)
            assert post.point < last
            last = post.point
        assert post.point < 0.05

    def test_update_order_commutes(self):
        residuals = [0.3, -1.2, 2.0, 0.0, 0.7]
        a = NoisePosterior()
        for r in residuals:
            a = a.updated(r)
        b = NoisePosterior()
        for r in reversed(residuals):
            b = b.updated(r)
        assert a.point == pytest.approx(b.point, rel=1e-12)

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            NoisePosterior(alpha=1.0, beta=1.0)
        with pytest.raises(ValueError):
            TrustThresholds(delta_x=0.0)


class TestPredictNominal:
    def test_zero_accel_fixed_point(self):
        a_star, states = predict_nominal(history([0, 0, 0]), horizon=10)
        assert a_star == 0.0
        assert all(st.v == pytest.approx(15.0) for st in states.states)

    def test_constant_accel(self):
        a_star, states = predict_nominal(history([1, 1, 1]), horizon=5)
        assert a_star == pytest.approx(1.0)
        speeds = states.speeds()
        assert speeds[1] - speeds[0] == pytest.approx(0.1)

    def test_clamp(self):
        a_star, _ = predict_nominal(history([3, 3, 6]), horizon=3)
        assert a_star == 3.0

    def test_short_history_falls_back_to_zero(self):
        a_star, _ = predict_nominal(history([2.0, 2.0][:1]), horizon=3)
        assert a_star == 0.0


class TestSampling:
    def test_degenerate_noise_equals_nominal(self):
        _, nominal = predict_nominal(history([0.5, 0.5, 0.5]), horizon=20)
        x, v = sample_trajectories(nominal, 0.5, 0.0, Z=5, horizon=20, seed=1)
        assert np.allclose(x, nominal.stations(), atol=1e-9)
        assert np.allclose(v, nominal.speeds(), atol=1e-9)

    def test_bit_identical_rerun(self):
        _, nominal = predict_nominal(history([0, 0, 0]), horizon=15)
        a = sample_trajectories(nominal, 0.0, 1.3, Z=1, horizon=15, seed=(7, 1, 3))
        b = sample_trajectories(nominal, 0.0, 1.3, Z=1, horizon=15, seed=(7, 1, 3))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_single_step_velocity_variance(self):
        _, nominal = predict_nominal(history([0, 0, 0]), horizon=2)
        w = 4.0
        x, v = sample_trajectories(nominal, 0.0, w, Z=10_000, horizon=2, seed=5)
        dv = v[:, -1] - nominal.last.v
        assert np.var(dv) == pytest.approx(w * 0.1**2, rel=0.05)


class TestLabels:
    thresholds = TrustThresholds()

    def test_forward(self):
        assert label_terminal(2.1, 0.0, self.thresholds) == IntentionLabel.FORWARD

    def test_backward(self):
        assert label_terminal(-2.1, 0.0, self.thresholds) == IntentionLabel.BACKWARD

    def test_uncertain(self):
        assert label_terminal(0.0, 0.0, self.thresholds) == IntentionLabel.UNCERTAIN

    def test_overlap_is_uncertain(self):
        # forward in velocity but backward in position
        assert label_terminal(-2.5, 1.5, self.thresholds) == IntentionLabel.UNCERTAIN

    def test_trajectory_variant_matches_terminal_rule(self):
        start = VehicleState(s=0.0, v=15.0)
        ref = rollout_constant_accel(start, 0.0, 9, 0.1)
        fast = rollout_constant_accel(start, 3.0, 9, 0.1)
        assert label_intention(fast, ref, self.thresholds) == label_terminal(
            fast.last.s - ref.last.s, fast.last.v - ref.last.v, self.thresholds)

    def test_length_mismatch_rejected(self):
        start = VehicleState(s=0.0, v=15.0)
        with pytest.raises(ValueError):
            label_intention(rollout_constant_accel(start, 0.0, 5, 0.1),
                            rollout_constant_accel(start, 0.0, 6, 0.1),
                            self.thresholds)

    def test_widening_thresholds_never_raises_p(self):
        rng = np.random.default_rng(9)
        dx = rng.normal(0, 3, size=400)
        dv = rng.normal(0, 1.5, size=400)
        narrow = TrustThresholds(delta_x=1.0, delta_v=0.5, eps_x=1.0, eps_v=0.5)
        wide = TrustThresholds(delta_x=2.5, delta_v=1.5, eps_x=2.5, eps_v=1.5)
        def decisive(th):
            labels = [label_terminal(a, b, th) for a, b in zip(dx, dv)]
            return sum(1 for l in labels if l != IntentionLabel.UNCERTAIN)
        assert decisive(wide) <= decisive(narrow)


class TestEstimate:
    def test_counting(self):
        labels = ([IntentionLabel.FORWARD] * 40 + [IntentionLabel.BACKWARD] * 35
                  + [IntentionLabel.UNCERTAIN] * 25)
        est = estimate_trust(labels)
        assert (est.p_forward, est.p_backward, est.p) == (0.40, 0.35, 0.75)

    def test_all_uncertain(self):
        assert estimate_trust([IntentionLabel.UNCERTAIN] * 10).p == 0.0

    def test_none_uncertain(self):
        assert estimate_trust([IntentionLabel.FORWARD] * 10).p == 1.0

    def test_identity_exact_as_fractions(self):
        rng = np.random.default_rng(4)
        choices = list(IntentionLabel)
        for _ in range(100):
            labels = [choices[i] for i in rng.integers(0, 3, size=int(rng.integers(1, 50)))]
            est = estimate_trust(labels)
            assert Fraction(est.n_forward + est.n_backward, est.z) \
                + Fraction(est.n_uncertain, est.z) == 1


class TestTrustTick:
    params = TrustParams(Z=400, H=30, dt=0.1)

    def test_initial_state_and_range(self):
        state = TrustState()
        assert state.p == 0.5
        hist = history([0.0] * 10)
        for tick in range(12):
            state, trace = trust_tick(state, hist, self.params, tick=tick,
                                      vehicle_id=1, seed=3)
            assert 0.0 <= state.p <= 1.0
            assert 0.0 <= trace.p_forward and 0.0 <= trace.p_backward

    def test_determinism_to_the_bit(self):
        runs = []
        for _ in range(2):
            state = TrustState()
            hist = history([-1.0] * 10)
            trail = []
            for tick in range(8):
                state, trace = trust_tick(state, hist, self.params, tick=tick,
                                          vehicle_id=2, seed=11)
                trail.append((state.p, trace.p_forward, trace.p_backward,
                              state.posterior.point))
            runs.append(trail)
        assert runs[0] == runs[1]

    def test_single_step_matches_gaussian_tail(self):
        # With a zero nominal action and the velocity threshold binding, the
        # forward share is the upper tail of the one-step noise.
        w = 100.0
        thresholds = TrustThresholds(delta_x=50.0, delta_v=1.0,
                                     eps_x=50.0, eps_v=1.0)
        _, nominal = predict_nominal(history([0.0] * 5), horizon=2)
        x, v = sample_trajectories(nominal, 0.0, w, Z=10_000, horizon=2, seed=21)
        ref = zero_accel_reference(nominal.states[0], 2, 0.1)
        labels = label_samples(x, v, ref, thresholds)
        est = estimate_trust(labels)
        analytic = 1.0 - 0.5 * (1.0 + math.erf((1.0 / (0.1 * math.sqrt(w)))
                                               / math.sqrt(2.0)))
        assert est.p_forward == pytest.approx(analytic, abs=0.02)

    def test_decisive_sustained_behavior_raises_trust(self):
        state = TrustState()
        for tick in range(8):
            hist = history([-2.5] * 10)
            state, _ = trust_tick(state, hist, self.params, tick=tick,
                                  vehicle_id=1, seed=9)
        assert state.p > 0.8
        assert state.direction > 0  # backward = yielding

    def test_update_noise_window(self):
        state = TrustState()
        updated = update_noise(state, observed_a=1.0, predicted_a=0.0)
        assert list(updated.residual_window) == [1.0]
        assert updated.posterior.point != state.posterior.point

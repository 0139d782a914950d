import math

import numpy as np
import pytest

from trustmerge.world import (ACTION_ACCELS, GeometryError, Trajectory,
                              VehicleState, bumper_gap, jerk_of,
                              lateral_profile, step_longitudinal, thw,
                              thw_from_gap)


def state(s=0.0, v=15.0, a=0.0, **kw):
    return VehicleState(s=s, v=v, a=a, **kw)


class TestStepLongitudinal:
    def test_zero_acceleration(self):
        out = step_longitudinal(state(s=0, v=15), 0.0, 0.1)
        assert out.s == pytest.approx(1.5)
        assert out.v == pytest.approx(15.0)

    def test_closed_form_kinematics(self):
        out = step_longitudinal(state(s=0, v=15), 1.0, 0.1)
        assert out.s == pytest.approx(1.505)
        assert out.v == pytest.approx(15.1)
        assert out.a == 1.0

    def test_braking_to_rest(self):
        # rest is reached after v/|a| = 1/60 s; no motion afterwards
        out = step_longitudinal(state(s=0, v=0.05), -3.0, 0.1)
        t_stop = 0.05 / 3.0
        expected_s = 0.05 * t_stop - 1.5 * t_stop**2
        assert out.v == 0.0
        assert out.s == pytest.approx(expected_s, rel=1e-12)

    def test_speed_never_negative_over_random_sequences(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            st = state(v=float(rng.uniform(0, 20)))
            for _ in range(50):
                st = step_longitudinal(st, float(rng.choice(ACTION_ACCELS)), 0.1)
                assert st.v >= 0.0

    def test_substeps_match_single_step(self):
        for accel in (0.7, -1.2, 2.9):
            st = state(s=3.0, v=12.0)
            stepped = st
            for _ in range(40):
                stepped = step_longitudinal(stepped, accel, 0.05)
            direct = step_longitudinal(st, accel, 2.0)
            assert stepped.s == pytest.approx(direct.s, rel=1e-9)
            assert stepped.v == pytest.approx(direct.v, rel=1e-9)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            step_longitudinal(state(), float("nan"), 0.1)
        with pytest.raises(ValueError):
            step_longitudinal(state(), 0.0, 0.0)


class TestLateralProfile:
    def test_boundaries(self):
        assert lateral_profile(0.0, 3.0, 3.5) == 0.0
        assert lateral_profile(3.0, 3.0, 3.5) == pytest.approx(3.5)

    def test_midpoint_symmetry(self):
        assert lateral_profile(1.5, 3.0, 3.5) == pytest.approx(1.75)

    def test_monotone_for_positive_offset(self):
        values = [lateral_profile(t, 3.0, 3.5) for t in np.linspace(0, 3, 61)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_outside_range_rejected(self):
        with pytest.raises(ValueError):
            lateral_profile(-0.1, 3.0, 3.5)
        with pytest.raises(ValueError):
            lateral_profile(3.1, 3.0, 3.5)


class TestThw:
    def test_direct_ratio(self):
        follower = state(s=0, v=15)
        leader = state(s=35, v=15)  # bumper gap 30
        assert thw(follower, leader) == pytest.approx(2.0)

    def test_stopped_follower_rule(self):
        follower = state(s=0, v=0)
        leader = state(s=35, v=15)
        assert thw(follower, leader) == 10.0

    def test_reference_magnitude(self):
        assert thw_from_gap(36.6, 15.0) == pytest.approx(2.44)

    def test_leader_behind_is_geometry_error(self):
        with pytest.raises(GeometryError):
            thw(state(s=10, v=15), state(s=5, v=15))

    def test_monotonicity(self):
        gaps = np.linspace(1, 80, 25)
        speeds = np.linspace(0.2, 25, 25)
        fixed_gap = [thw_from_gap(30.0, v) for v in speeds]
        assert all(b <= a for a, b in zip(fixed_gap, fixed_gap[1:]))
        fixed_speed = [thw_from_gap(g, 15.0) for g in gaps]
        assert all(b >= a for a, b in zip(fixed_speed, fixed_speed[1:]))


class TestJerk:
    def test_constant_accel(self):
        assert np.allclose(jerk_of([0, 0, 0], 0.1), [0, 0])

    def test_single_difference(self):
        assert np.allclose(jerk_of([0, 0.3], 0.1), [3.0])

    def test_sawtooth_peak(self):
        series = [0.0, 0.247, 0.0, 0.247, 0.0]
        peaks = np.abs(jerk_of(series, 0.1))
        assert peaks.max() == pytest.approx(2.47)

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            jerk_of([1.0], 0.1)


class TestTrajectory:
    def test_timestamps_must_increase(self):
        a = state(t=0.0)
        b = state(t=0.0)
        with pytest.raises(ValueError):
            Trajectory(states=[a, b], dt=0.1)

    def test_bumper_gap(self):
        assert bumper_gap(state(s=0), state(s=35)) == 30.0

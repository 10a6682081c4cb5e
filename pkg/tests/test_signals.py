import math

import numpy as np
import pytest

from musq.errors import BadPlantConfigError
from musq.numerics import SeededRng
from musq.signals import (BASIS_A, BASIS_B, BASIS_C, CONDITIONS, LabelTrack,
                          PlantConfig, compose_schedule, eval_basis,
                          make_condition_label_track, make_label_track)


QUIET_PLANT = PlantConfig(emg_noise_frac=0.0, torque_noise_frac=0.0)


class TestBases:
    # closed forms: A(t) = -cos(0.4*pi*t), B(t) = -cos(0.5*pi*t),
    # C(t) = sin(-30*pi*cos(pi*t/30) - pi/2)
    def test_basis_a_points(self):
        assert eval_basis(BASIS_A, 0.0) == pytest.approx(-1.0)
        assert eval_basis(BASIS_A, 1.25) == pytest.approx(0.0, abs=1e-12)
        assert eval_basis(BASIS_A, 2.5) == pytest.approx(1.0)

    def test_basis_b_points(self):
        assert eval_basis(BASIS_B, 0.0) == pytest.approx(-1.0)
        assert eval_basis(BASIS_B, 1.0) == pytest.approx(0.0, abs=1e-12)
        assert eval_basis(BASIS_B, 2.0) == pytest.approx(1.0)

    def test_basis_c_points(self):
        # 30*pi*cos(0) = 15 full turns, so C(0) = sin(-pi/2) = -1
        assert eval_basis(BASIS_C, 0.0) == pytest.approx(-1.0)
        # cos(pi/2) = 0 at t = 15
        assert eval_basis(BASIS_C, 15.0) == pytest.approx(-1.0)

    def test_bases_bounded(self):
        t = np.linspace(0, 180, 20001)
        for b in (BASIS_A, BASIS_B, BASIS_C):
            v = eval_basis(b, t)
            assert np.all(np.abs(v) <= 1.0 + 1e-12)

    def test_c_oscillates_faster(self):
        # zero crossings over one minute
        t = np.linspace(0, 60, 60001)
        def crossings(b):
            v = eval_basis(b, t)
            return int(np.sum(np.signbit(v[1:]) != np.signbit(v[:-1])))
        assert crossings(BASIS_C) > 3 * crossings(BASIS_A)

    def test_vector_matches_scalar(self):
        t = np.array([0.3, 1.7, 42.0])
        v = eval_basis(BASIS_A, t)
        assert v.shape == (3,)
        assert v[1] == eval_basis(BASIS_A, 1.7)

    def test_unknown_basis(self):
        with pytest.raises(ValueError):
            eval_basis("Z", 0.0)


class TestSchedules:
    def test_screen_layout_180s(self):
        s = compose_schedule("screen", 180.0)
        assert len(s.segments) == 18
        assert all(t1 - t0 == 10.0 for t0, t1, _ in s.segments)
        bases = [b for _, _, b in s.segments]
        # C replaces the segments starting at odd multiples of 30 s
        assert [i for i, b in enumerate(bases) if b == BASIS_C] == [3, 9, 15]
        # the rest alternate A/B by segment index
        for i, b in enumerate(bases):
            if b != BASIS_C:
                assert b == (BASIS_A if i % 2 == 0 else BASIS_B)

    def test_pedal_layout_180s(self):
        s = compose_schedule("pedal", 180.0)
        assert len(s.segments) == 9
        assert all(t1 - t0 == 20.0 for t0, t1, _ in s.segments)
        bases = [b for _, _, b in s.segments]
        assert [i for i, b in enumerate(bases) if b == BASIS_C] == [3]
        assert bases[0] == BASIS_A and bases[1] == BASIS_B

    def test_segments_tile_duration(self):
        for role in ("screen", "pedal"):
            s = compose_schedule(role, 95.0)   # not a multiple of seg length
            assert s.segments[0][0] == 0.0
            assert s.segments[-1][1] == 95.0
            for (_, t1, _), (t0, _, _) in zip(s.segments, s.segments[1:]):
                assert t1 == t0

    def test_basis_at_half_open(self):
        s = compose_schedule("screen", 60.0)
        assert s.basis_at(0.0) == BASIS_A
        assert s.basis_at(9.999) == BASIS_A
        assert s.basis_at(10.0) == BASIS_B
        with pytest.raises(ValueError):
            s.basis_at(60.0)
        with pytest.raises(ValueError):
            s.basis_at(-0.1)

    def test_evaluate_uses_absolute_time(self):
        # inside segment [10, 20) the value is B evaluated at absolute t,
        # not at the segment-local offset
        s = compose_schedule("screen", 60.0)
        assert s.evaluate(13.7) == pytest.approx(eval_basis(BASIS_B, 13.7))

    def test_evaluate_vectorized(self):
        s = compose_schedule("pedal", 120.0)
        t = np.linspace(0, 119.99, 500)
        v = s.evaluate(t)
        assert v.shape == t.shape
        assert v[123] == pytest.approx(s.evaluate(float(t[123])))

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            compose_schedule("screen", 0.0)
        with pytest.raises(ValueError):
            compose_schedule("knob", 60.0)


class TestPlant:
    def test_validate_rejects_bad_configs(self):
        with pytest.raises(BadPlantConfigError):
            PlantConfig(emg_span=0.0).validate()
        with pytest.raises(BadPlantConfigError):
            PlantConfig(neutral_seconds=-1.0).validate()
        with pytest.raises(BadPlantConfigError):
            PlantConfig(torque_noise_frac=-0.1).validate()

    def test_neutral_hold_prefix(self):
        track = make_condition_label_track("combined", 20.0, QUIET_PLANT,
                                           25.0, SeededRng(0))
        n_hold = int(10.0 * 25.0)
        assert len(track) == n_hold + int(20.0 * 25.0)
        assert np.all(track.emg[:n_hold] == 0.0)
        assert np.all(track.angle[:n_hold] == 0.0)
        assert np.all(track.torque[:n_hold] == 0.0)

    def test_hand_computed_sample(self):
        # combined, first frame after the hold is trial time t = 0:
        # screen = pedal = -1 there, so emg = span*max(0,-1) = 0,
        # angle = -angle_span, torque = 0.3 * -1 * torque_span
        p = QUIET_PLANT
        track = make_condition_label_track("combined", 20.0, p, 25.0,
                                           SeededRng(0))
        i = int(10.0 * 25.0)
        assert track.emg[i] == pytest.approx(0.0)
        assert track.angle[i] == pytest.approx(-p.angle_span)
        assert track.torque[i] == pytest.approx(-p.k_passive * p.torque_span)

    def test_hand_computed_positive_screen(self):
        # trial t = 2.5 s: screen = A(2.5) = 1 -> emg = emg_span, and
        # torque = (0.7*1 + 0.3*pedal) * torque_span with pedal = B-less
        # schedule value A(2.5) on the pedal too (first pedal segment is A)
        p = QUIET_PLANT
        track = make_condition_label_track("combined", 20.0, p, 10.0,
                                           SeededRng(0))
        i = int(10.0 * 10.0) + int(2.5 * 10.0)
        pedal = eval_basis(BASIS_A, 2.5)
        assert track.emg[i] == pytest.approx(p.emg_span)
        assert track.torque[i] == pytest.approx(
            (p.k_active * 1.0 + p.k_passive * pedal) * p.torque_span)

    def test_emg_never_negative(self):
        plant = PlantConfig(emg_noise_frac=0.05, torque_noise_frac=0.0)
        track = make_condition_label_track("isometric", 30.0, plant, 25.0,
                                           SeededRng(3))
        assert np.all(track.emg >= 0.0)

    def test_condition_semantics(self):
        iso = make_condition_label_track("isometric", 20.0, QUIET_PLANT,
                                         25.0, SeededRng(0))
        pas = make_condition_label_track("passive", 20.0, QUIET_PLANT,
                                         25.0, SeededRng(0))
        assert np.all(iso.angle == 0.0)
        assert np.any(iso.emg > 0.0)
        assert np.all(pas.emg == 0.0)
        assert np.any(pas.angle != 0.0)
        with pytest.raises(ValueError):
            make_condition_label_track("seated", 20.0, QUIET_PLANT, 25.0,
                                       SeededRng(0))

    def test_deltas_are_first_differences(self):
        track = make_condition_label_track("combined", 15.0, QUIET_PLANT,
                                           25.0, SeededRng(0))
        assert track.d_angle[0] == 0.0
        assert np.allclose(track.d_angle[1:], np.diff(track.angle))
        assert np.allclose(track.d_torque[1:], np.diff(track.torque))
        t = track.targets()
        assert t.shape == (len(track), 3)
        assert np.array_equal(t[:, 2], track.d_angle)

    def test_noise_reproducible_by_seed(self):
        plant = PlantConfig()
        a = make_condition_label_track("combined", 10.0, plant, 25.0,
                                       SeededRng(11))
        b = make_condition_label_track("combined", 10.0, plant, 25.0,
                                       SeededRng(11))
        assert np.array_equal(a.torque, b.torque)

    def test_schedule_duration_mismatch(self):
        screen = compose_schedule("screen", 30.0)
        pedal = compose_schedule("pedal", 60.0)
        with pytest.raises(ValueError):
            make_label_track(screen, pedal, QUIET_PLANT, 25.0, SeededRng(0))
        with pytest.raises(ValueError):
            make_label_track(None, None, QUIET_PLANT, 25.0, SeededRng(0))

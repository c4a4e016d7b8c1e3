"""Gating, differentiability probes, turbulence penalties, elite staging."""

import numpy as np
import pytest

from pitpo.constraints import (
    ConstraintConfig,
    ConstraintReport,
    TurbulenceSample,
    diff_penalty,
    elite_schedule,
    gate_open,
    turb_asymptotic_slope,
    turb_energy_consistency,
    turb_realizability,
    turb_wall_decay,
)


class TestGate:
    def test_closed_without_baseline(self):
        cfg = ConstraintConfig(delta_gate=None)
        assert not gate_open(1e-9, cfg)

    def test_threshold_strict(self):
        cfg = ConstraintConfig(delta_gate=1e-3)
        assert gate_open(0.5e-3, cfg)
        assert not gate_open(1e-3, cfg)  # strict inequality
        assert not gate_open(2e-3, cfg)

    def test_closed_gate_total_exactly_zero(self):
        cfg = ConstraintConfig(delta_gate=1e-3)
        report = ConstraintReport(p_dim=3.0, p_diff=0.5, p_domain={"real": 2.0}, gate_open=False)
        assert report.total(cfg) == 0.0

    def test_open_gate_weighted_sum(self):
        cfg = ConstraintConfig(w_dim=1.0, w_diff=0.5, w_domain=0.5, delta_gate=1e-3)
        report = ConstraintReport(p_dim=2.0, p_diff=1.0, p_domain={"a": 4.0}, gate_open=True)
        assert report.total(cfg) == 1.0 * 2.0 + 0.5 * 1.0 + 0.5 * 4.0


class TestDiffPenalty:
    def test_smooth_kink_passes(self):
        # |x| has a kink but small finite jumps; not flagged
        X = np.linspace(-1, 1, 50)[:, None]
        penalty = diff_penalty(lambda m: np.abs(m[:, 0]) * 2.0, X)
        assert penalty == 0.0

    def test_pole_inside_box_fails_probes(self):
        X = np.linspace(-1, 1, 50)[:, None]
        penalty = diff_penalty(lambda m: 1.0 / m[:, 0], X)
        assert penalty > 0.0

    def test_step_function_detected(self):
        X = np.linspace(-1, 1, 50)[:, None]
        penalty = diff_penalty(lambda m: np.where(m[:, 0] > 0, 1e9, 0.0), X)
        assert penalty > 0.0


def _sym(m):
    return np.asarray(m, dtype=float)


class TestTurbulence:
    def test_realizability_psd_is_zero(self):
        taus = [np.eye(3), _sym(np.diag([2.0, 1.0, 0.0]))]
        assert turb_realizability(taus) <= 1e-12

    def test_realizability_negative_eigenvalue(self):
        taus = [_sym(np.diag([-1.0, 1.0, 1.0]))]
        assert abs(turb_realizability(taus) - 1.0) < 1e-12

    def test_realizability_rejects_asymmetric(self):
        bad = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        with pytest.raises(ValueError):
            turb_realizability([bad])

    def test_wall_decay_single_in_band(self):
        taus = [_sym(np.diag([3.0, 0.0, 0.0])), np.eye(3)]
        ys = np.array([0.01, 0.5])
        assert abs(turb_wall_decay(taus, ys, y0=0.02) - 3.0) < 1e-12

    def test_wall_decay_empty_band(self):
        assert turb_wall_decay([np.eye(3)], np.array([1.0]), y0=0.5) == 0.0

    def test_asymptotic_cubic_is_zero(self):
        y_plus = np.linspace(1.2, 4.8, 30)
        tau_xy = 0.01 * y_plus**3
        assert turb_asymptotic_slope(tau_xy, y_plus) < 1e-10

    def test_asymptotic_too_few_samples(self):
        assert turb_asymptotic_slope(np.array([1.0, 2.0]), np.array([2.0, 3.0])) == 0.0

    def test_energy_consistency_contraction(self):
        # tau = -I, gradU = I: P_k = -sum(tau*gradU) = 3
        value = turb_energy_consistency([-np.eye(3)], [np.eye(3)], np.array([3.0]))
        assert value == 0.0
        off = turb_energy_consistency([-np.eye(3)], [np.eye(3)], np.array([0.0]))
        assert abs(off - 9.0) < 1e-12

    def test_sample_validates_symmetry(self):
        bad = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        with pytest.raises(ValueError):
            TurbulenceSample(
                i1=0.0, i2=0.0,
                bases=(np.eye(3), np.eye(3), np.eye(3)),
                target_b=bad, k=1.0, y=0.1,
            )


class TestEliteSchedule:
    def test_single_new_best(self):
        stages, best = elite_schedule([5.0, 3.0, 9.0, 4.0], best_so_far=4.0)
        assert stages == ["A", "B", "A", "A"]
        assert best == 3.0

    def test_sequential_updates(self):
        stages, best = elite_schedule([5.0, 3.0, 2.0], best_so_far=10.0)
        assert stages == ["B", "B", "B"]
        assert best == 2.0

    def test_ties_stay_stage_a(self):
        stages, best = elite_schedule([4.0, 4.0], best_so_far=4.0)
        assert stages == ["A", "A"]
        assert best == 4.0

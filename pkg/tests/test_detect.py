import math

import numpy as np
import pytest

from cavity_bistability import detect
from cavity_bistability.detect import (
    DetectorSpec,
    PreparationError,
    prepare_on_branch,
    run_detector,
    speed_limit_scan,
)
from cavity_bistability.integrate import IntegrationError
from cavity_bistability.model import transmission_norm
from cavity_bistability.sweep import SweepSpec
from conftest import lambda_params

SPEC6 = SweepSpec("delta_p", -0.1, 0.1, 401)
TARGET6 = 0.0135


@pytest.fixture(scope="module")
def fig6_module():
    return lambda_params(5, omega_c=0.05, epsilon=math.sqrt(5))


@pytest.fixture(scope="module")
def upper6(fig6_module):
    return prepare_on_branch(fig6_module, SPEC6, TARGET6, "upper")


def detector(params, **kw):
    base = dict(params=params, sweep=SPEC6, target=TARGET6, branch="upper", amplitude=0.02, fwhm=1.0,
                center=800.0)
    base.update(kw)
    return DetectorSpec(**base)


class TestPreparation:
    def test_upper_branch_is_transparent(self, fig6_module, upper6):
        p = fig6_module.replace(delta_p=TARGET6)
        assert transmission_norm(upper6.state, p) > 0.9
        assert upper6.direction == "up" and upper6.leading_rate < 0
        lo, hi = upper6.region
        assert lo < TARGET6 < hi

    def test_lower_branch_is_dark(self, fig6_module, upper6):
        low = prepare_on_branch(fig6_module, SPEC6, TARGET6, "lower")
        assert transmission_norm(low.state, fig6_module.replace(delta_p=TARGET6)) < 0.05
        assert low.n_prepared == pytest.approx(upper6.n_other, rel=1e-8)

    def test_monostable_target_names_nearest_region(self, fig6_module):
        with pytest.raises(PreparationError) as exc:
            prepare_on_branch(fig6_module, SPEC6, 0.05, "upper")
        lo, hi = exc.value.nearest
        assert 0 < lo < hi < 0.05
        assert "nearest bistable interval" in str(exc.value)

    def test_target_outside_sweep(self, fig6_module):
        with pytest.raises(PreparationError):
            prepare_on_branch(fig6_module, SPEC6, 0.5, "upper")

    def test_bad_branch(self, fig6_module):
        with pytest.raises(ValueError):
            prepare_on_branch(fig6_module, SPEC6, TARGET6, "middle")


class TestRun:
    def test_zero_amplitude_is_a_no_op(self, fig6_module, upper6):
        run = run_detector(detector(fig6_module, amplitude=0.0), upper6)
        assert not run.latched
        n = run.trajectory.n_photons
        assert np.max(np.abs(n - upper6.n_prepared)) <= 1e-7 * upper6.n_prepared

    def test_short_pulse_does_not_latch(self, fig6_module, upper6):
        run = run_detector(detector(fig6_module, fwhm=0.1), upper6)
        assert not run.latched
        assert run.relative_change < 0.5

    def test_slow_pulse_latches_and_persists(self, fig6_module, upper6):
        run = run_detector(detector(fig6_module, fwhm=100.0, t_end=2e4), upper6)
        assert run.latched
        assert run.n_before == pytest.approx(upper6.n_prepared, rel=1e-6)
        assert run.relative_change > 0.5
        assert run.tail_deviation(upper6.n_other) < 1e-3

    def test_windows_and_verdict(self, fig6_module, upper6):
        spec = detector(fig6_module, fwhm=2.0)
        run = run_detector(spec, upper6)
        sigma = run.schedule.sigma
        (a, b), (c, d) = run.windows
        assert b == pytest.approx(800.0 - 5 * sigma) and a == pytest.approx(b - 20.0)
        assert c == pytest.approx(800.0 + 5 * sigma) and d == pytest.approx(c + 20.0)
        assert run.trajectory.times[-1] == pytest.approx(800.0 + 100.0)
        v = run.verdict()
        assert v["latched"] is run.latched
        assert v["schedule"]["base"] == TARGET6 and v["preparation"]["branch"] == "upper"
        assert (v["relative_change"] > v["latch_threshold"]) == v["latched"]

    def test_default_duration_covers_long_pulses(self, fig6_module):
        spec = detector(fig6_module, fwhm=50.0, center=1000.0)
        assert spec.resolved_t_end() == pytest.approx(1000.0 + 10 * spec.schedule().sigma)

    def test_pulse_too_early(self, fig6_module, upper6):
        with pytest.raises(ValueError):
            run_detector(detector(fig6_module, fwhm=100.0, center=100.0), upper6)

    def test_integration_failure_propagates(self, fig6_module, upper6, monkeypatch):
        def boom(*a, **k):
            raise IntegrationError("step size underflow", 1.0)
        monkeypatch.setattr(detect, "evolve", boom)
        with pytest.raises(IntegrationError):
            run_detector(detector(fig6_module), upper6)


class TestSpeedLimit:
    def test_width_threshold(self, fig6_module, upper6):
        scan = speed_limit_scan(detector(fig6_module, center=2000.0), [0.1, 10.0, 100.0, 300.0], prepared=upper6)
        assert scan.latched.tolist() == [False, False, True, True]
        assert scan.smallest_latching == 100.0
        assert scan.findings == []

    def test_non_monotone_outcomes_are_reported(self, fig6_module, upper6, monkeypatch):
        outcomes = iter([True, False, True])

        class Fake:
            def __init__(self):
                self.latched = next(outcomes)

        monkeypatch.setattr(detect, "_scan_cell", lambda item: Fake())
        scan = speed_limit_scan(detector(fig6_module), [1.0, 2.0, 3.0], prepared=upper6)
        assert scan.smallest_latching == 1.0
        assert scan.findings == ["fwhm=1 latches but wider fwhm=2 does not"]

    def test_rejects_unsorted_widths(self, fig6_module, upper6):
        with pytest.raises(ValueError):
            speed_limit_scan(detector(fig6_module), [2.0, 1.0], prepared=upper6)

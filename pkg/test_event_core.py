import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from config import BiasConfig, DomainError, ModelError, device_params
from event_core import (
    NoiseStats,
    autocorrelation,
    event_path_stats,
    leak_rate,
    noise_stats,
    predict_rate,
    refractory_correct,
    rice_rate,
    threshold_charge,
)
from noise_psd import FrequencyGrid, SpectrumSeries

THETA = BiasConfig().theta_on


def tc_spectrum(values: np.ndarray, grid: FrequencyGrid) -> SpectrumSeries:
    return SpectrumSeries("v_sf", grid, {"pd": values}, values.copy(), units="tc^2/Hz")


def test_rice_rate_value():
    # theta^2 / 2 sigma^2 = ln 10, so each polarity crosses at nu0 / 10 before the refractory cut
    stats = NoiseStats(sigma_tc=THETA / math.sqrt(2 * math.log(10)), nu0=10.0)
    prediction = rice_rate(stats, BiasConfig(delta_refr=0.1))
    assert prediction.on_rate == pytest.approx(1 / 1.1)
    assert prediction.off_rate == pytest.approx(1 / 1.1)
    assert prediction.total_rate == pytest.approx(2 / 1.1)


def test_rate_vanishes_for_huge_threshold():
    stats = NoiseStats(sigma_tc=0.05, nu0=100.0)
    prediction = rice_rate(stats, BiasConfig(theta_on=50.0, theta_off=50.0))
    assert prediction.total_rate == 0.0


@pytest.mark.parametrize("reference", ["fixed", "renewal"])
def test_no_noise_no_events(reference):
    prediction = rice_rate(NoiseStats(sigma_tc=0.0, nu0=0.0), BiasConfig(), reference=reference)
    assert prediction.total_rate == 0.0


def test_unknown_reference():
    with pytest.raises(DomainError):
        rice_rate(NoiseStats(sigma_tc=0.05, nu0=10.0), BiasConfig(), reference="moving")


@pytest.mark.parametrize("reference", ["fixed", "renewal"])
def test_asymmetric_thresholds(reference):
    stats = NoiseStats(sigma_tc=0.05, nu0=100.0)
    prediction = rice_rate(stats, BiasConfig(theta_on=0.1, theta_off=0.2), reference=reference)
    assert prediction.on_rate > prediction.off_rate


@given(
    rate=st.floats(min_value=0.0, max_value=1e6),
    delta=st.floats(min_value=0.0, max_value=1.0),
)
def test_refractory_bounds(rate, delta):
    corrected = refractory_correct(rate, delta)
    assert corrected <= rate * (1 + 1e-12)
    if delta > 0:
        assert corrected <= 1.0 / delta * (1 + 1e-12)


@given(
    low=st.floats(min_value=0.0, max_value=1e5),
    extra=st.floats(min_value=0.0, max_value=1e5),
)
def test_refractory_correction_is_monotone(low, extra):
    assert refractory_correct(low, 1e-3) <= refractory_correct(low + extra, 1e-3) + 1e-9


def test_single_pole_second_moment_diverges():
    grid = FrequencyGrid.log_spaced(1e-2, 1e7, 64)
    s = 1e-6 / (1 + (grid.points / 100.0) ** 2)
    with pytest.raises(ModelError):
        noise_stats(tc_spectrum(s, grid))


def test_event_path_pole_makes_single_pole_converge():
    grid = FrequencyGrid.log_spaced(1e-2, 1e7, 64)
    s = 1e-6 / (1 + (grid.points / 100.0) ** 2)
    stats = noise_stats(tc_spectrum(s, grid), f_ca=1000.0)
    assert stats.nu0 == pytest.approx(math.sqrt(100.0 * 1000.0), rel=0.01)


def test_two_pole_zero_crossing_rate():
    a, b = 100.0, 1000.0
    grid = FrequencyGrid.log_spaced(1e-2, 1e7, 64)
    f = grid.points
    s = 1e-6 / ((1 + (f / a) ** 2) * (1 + (f / b) ** 2))
    stats = noise_stats(tc_spectrum(s, grid))
    assert stats.nu0 == pytest.approx(316.2, rel=0.01)
    assert stats.sigma_tc ** 2 == pytest.approx(1e-6 * math.pi / 2 * a * b / (a + b), rel=0.01)


@pytest.mark.parametrize("reference", ["fixed", "renewal"])
@settings(max_examples=20, deadline=None)
@given(k=st.floats(min_value=0.1, max_value=10.0))
def test_rate_depends_on_threshold_over_sigma(reference, k):
    base = rice_rate(NoiseStats(sigma_tc=0.05, nu0=50.0), BiasConfig(delta_refr=0.0), reference=reference)
    scaled = rice_rate(
        NoiseStats(sigma_tc=0.05 * k, nu0=50.0),
        BiasConfig(theta_on=THETA * k, theta_off=THETA * k, delta_refr=0.0),
        reference=reference,
    )
    assert scaled.total_rate == pytest.approx(base.total_rate, rel=1e-6)


@pytest.mark.parametrize("reference", ["fixed", "renewal"])
def test_rate_scales_with_nu0(reference):
    slow = rice_rate(NoiseStats(sigma_tc=0.05, nu0=50.0), BiasConfig(delta_refr=0.0), reference=reference)
    fast = rice_rate(NoiseStats(sigma_tc=0.05, nu0=150.0), BiasConfig(delta_refr=0.0), reference=reference)
    assert fast.total_rate == pytest.approx(3 * slow.total_rate, rel=1e-6)


@pytest.mark.parametrize("ratio", [2.0, 3.0, 4.0])
def test_renewal_polarities_balance(ratio):
    stats = NoiseStats(sigma_tc=THETA / ratio, nu0=100.0)
    prediction = rice_rate(stats, BiasConfig(delta_refr=0.0), reference="renewal")
    assert prediction.total_rate > 0
    assert prediction.on_rate == pytest.approx(prediction.off_rate, rel=1e-6)


def test_stepped_level_fires_more_than_a_fixed_reference():
    stats = NoiseStats(sigma_tc=THETA / 3, nu0=100.0)
    fixed = rice_rate(stats, BiasConfig(delta_refr=0.0))
    stepped = rice_rate(stats, BiasConfig(delta_refr=0.0), reference="renewal")
    assert stepped.total_rate > 2 * fixed.total_rate


def test_renewal_saturates_below_refractory_limit():
    stats = NoiseStats(sigma_tc=THETA, nu0=1e4)
    free = rice_rate(stats, BiasConfig(delta_refr=0.0), reference="renewal")
    held = rice_rate(stats, BiasConfig(delta_refr=0.01), reference="renewal")
    assert held.total_rate < free.total_rate
    assert held.total_rate < 1 / 0.01


def test_renewal_falls_with_threshold():
    stats = NoiseStats(sigma_tc=0.05, nu0=50.0)
    low = rice_rate(stats, BiasConfig(theta_on=0.1, theta_off=0.1), reference="renewal")
    high = rice_rate(stats, BiasConfig(theta_on=0.2, theta_off=0.2), reference="renewal")
    assert high.total_rate < low.total_rate


def test_single_pole_autocorrelation():
    S0, fc = 1e-6, 20.0
    grid = FrequencyGrid.log_spaced(1e-4, 1e7, 64)
    s = S0 / (1 + (grid.points / fc) ** 2)
    stats = NoiseStats(sigma_tc=math.sqrt(S0 * math.pi * fc / 2), nu0=1.0, f=grid.points, s=s)
    lags = np.array([0.0, 0.5, 1.0, 3.0]) / (2 * math.pi * fc)
    r, rp = autocorrelation(stats, lags)
    expected = S0 * math.pi * fc / 2 * np.exp(-2 * math.pi * fc * lags)
    np.testing.assert_allclose(r, expected, rtol=0.01)
    np.testing.assert_allclose(rp[1:], -2 * math.pi * fc * expected[1:], rtol=0.02)


def test_renewal_uses_the_attached_spectrum(low_system):
    stats = event_path_stats(low_system)
    bare = NoiseStats(sigma_tc=stats.sigma_tc, nu0=stats.nu0)
    bias = BiasConfig(I_pr=10e-12)
    from_spectrum = rice_rate(stats, bias, reference="renewal")
    from_moments = rice_rate(bare, bias, reference="renewal")
    assert from_spectrum.total_rate != from_moments.total_rate
    assert from_spectrum.total_rate == pytest.approx(from_moments.total_rate, rel=0.5)


def test_threshold_charge(params, bias, system):
    nominal = threshold_charge(params, bias)
    assert nominal == pytest.approx(200e-15 * THETA * 0.025 / 0.7, rel=1e-9)
    assert threshold_charge(params, bias, system) < nominal


def test_leak_rate(params, bias):
    assert leak_rate(params, bias) == pytest.approx(1e-17 / (200e-15 * THETA * 0.025 / 0.7), rel=1e-9)
    assert leak_rate(device_params(I_leak=0.0), bias) == 0.0
    with pytest.raises(DomainError):
        leak_rate(params, bias, q_theta=0.0)


def test_leak_rate_halves_when_on_threshold_doubles(params, system):
    base = BiasConfig()
    doubled = BiasConfig(theta_on=2 * base.theta_on)
    assert leak_rate(params, doubled, system) == pytest.approx(leak_rate(params, base, system) / 2, rel=1e-12)
    assert leak_rate(params, doubled) == pytest.approx(leak_rate(params, base) / 2, rel=1e-12)


def test_event_path_stats_at_reference_conditions(system):
    stats = event_path_stats(system)
    assert 0 < stats.nu0 < 1000.0
    assert stats.sigma_tc > 0


@pytest.mark.parametrize("I_pr, expected", [(3e-9, 0.02), (10e-12, 0.66)])
def test_rate_anchors(op_point, params, I_pr, expected):
    from pixel_model import build_system

    bias = BiasConfig(I_pr=I_pr)
    prediction = predict_rate(build_system(op_point, bias, params), bias, params)
    assert expected / 3 < prediction.total_rate < expected * 3


def test_disabling_sources_lowers_rate(system, bias, params):
    full = predict_rate(system, bias, params)
    quiet = predict_rate(system, bias, params, disabled=["pr"])
    assert quiet.total_rate < full.total_rate


def test_prediction_serializes_with_units(system, bias, params):
    data = json.loads(json.dumps(predict_rate(system, bias, params, reference="renewal").to_dict()))
    assert data["units"]["total_rate"] == "Hz"
    assert data["units"]["sigma_tc"] == "log-e"
    assert data["reference"] == "renewal"

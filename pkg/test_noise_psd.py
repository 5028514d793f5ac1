import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from config import BiasConfig, DomainError, OperatingPoint, device_params
from noise_psd import (
    FrequencyGrid,
    SpectrumSeries,
    cumulative_rms,
    integrate,
    noise_budget,
    photon_fraction,
    psd,
    refer_to_tc,
    shot_limit_ratio,
    source_weights,
)
from pixel_model import build_system


def single_pole(S0: float, fc: float, grid: FrequencyGrid) -> SpectrumSeries:
    s = S0 / (1 + (grid.points / fc) ** 2)
    return SpectrumSeries("v_pr", grid, {"pd": s}, s.copy())


def test_sources_add_in_power(system):
    spectrum = psd(system, "v_sf")
    summed = spectrum.per_source["pd"] + spectrum.per_source["pr"] + spectrum.per_source["sf"]
    np.testing.assert_allclose(spectrum.total, summed, rtol=1e-12)


def test_pd_psd_is_injection_times_impedance(system):
    from pixel_model import transfer_fn

    spectrum = psd(system, "v_pr")
    z = transfer_fn(system, "pd", "v_pr", spectrum.f)
    np.testing.assert_allclose(spectrum.per_source["pd"], system.injection("pd").psd * np.abs(z) ** 2)


@pytest.mark.parametrize("source", ["pd", "pr", "sf"])
def test_ablation_zeroes_one_source(system, source):
    full = psd(system, "v_sf")
    ablated = psd(system, "v_sf", disabled=[source])
    assert np.all(ablated.per_source[source] == 0)
    for other in {"pd", "pr", "sf"} - {source}:
        np.testing.assert_allclose(ablated.per_source[other], full.per_source[other])


def test_photon_ablation_halves_pd(system):
    full = psd(system, "v_pr")
    no_photon = psd(system, "v_pr", disabled=["photon"])
    np.testing.assert_allclose(no_photon.per_source["pd"], 0.5 * full.per_source["pd"])
    assert no_photon.photon_share == 0.0
    assert psd(system, "v_pr", disabled=["mfb"]).photon_share == 1.0


def test_unknown_source_rejected():
    with pytest.raises(DomainError):
        source_weights(["thermal"])


def test_single_pole_integral():
    S0, fc = 1e-10, 50.0
    grid = FrequencyGrid.log_spaced(fc * 1e-4, fc * 1e5, 64)
    rms = cumulative_rms(single_pole(S0, fc, grid))
    assert rms.final_rms["total"] == pytest.approx(math.sqrt(S0 * fc * math.pi / 2), rel=0.01)
    assert np.all(np.diff(rms.total) >= 0)


def test_sparse_grid_warns():
    grid = FrequencyGrid.log_spaced(1e-2, 1e6, 4)
    rms = cumulative_rms(single_pole(1e-10, 50.0, grid))
    assert any("points per decade" in w for w in rms.warnings)


def test_truncated_grid_warns():
    grid = FrequencyGrid.log_spaced(1e-2, 100.0, 64)
    rms = cumulative_rms(single_pole(1e-10, 50.0, grid))
    assert any("truncates" in w for w in rms.warnings)


@pytest.mark.parametrize("points", [[], [0.0, 1.0], [1.0, 1.0, 2.0], [3.0, 2.0]])
def test_invalid_grid(points):
    with pytest.raises(DomainError):
        FrequencyGrid(np.array(points, dtype=float))


def test_system_grid_covers_poles(system):
    grid = FrequencyGrid.for_system(system)
    poles = system.pole_frequencies_hz()
    assert grid.points[0] < poles.min() / 100
    assert grid.points[-1] > poles.max() * 100
    assert grid.points_per_decade >= 63


@pytest.mark.parametrize("I_pr", [10e-12, 100e-12, 1e-9, 10e-9])
def test_pr_noise_in_tc_units_does_not_depend_on_i_pr(op_point, params, I_pr):
    reference = build_system(op_point, BiasConfig(I_pr=1e-9), params)
    system = build_system(op_point, BiasConfig(I_pr=I_pr), params)
    ref = refer_to_tc(cumulative_rms(psd(reference, "v_pr")), reference, "v_pr")
    got = refer_to_tc(cumulative_rms(psd(system, "v_pr")), system, "v_pr")
    assert got.final_rms["pr"] == pytest.approx(ref.final_rms["pr"], rel=0.10)


def test_tc_rms_budget_at_reference_conditions(system):
    budget = noise_budget(system)
    assert budget["v_pr"]["rms_tc"]["pd"] == pytest.approx(0.04, rel=0.5)
    assert budget["v_pr"]["rms_tc"]["pr"] == pytest.approx(0.06, rel=0.5)
    assert budget["v_sf"]["rms_tc"]["sf"] == pytest.approx(0.006, rel=0.5)
    assert budget["warnings"] == []


def test_photon_fraction_anchors(system, low_system):
    assert photon_fraction(psd(system, "v_sf")) == pytest.approx(0.46, abs=0.10)
    assert photon_fraction(psd(low_system, "v_sf")) == pytest.approx(0.12, abs=0.10)


def test_shot_limit_with_quiet_amplifier(params):
    op = OperatingPoint(I_pd=2.5e-15)
    system = build_system(op, BiasConfig(I_pr=2.5e-8), params)
    ratio = shot_limit_ratio(psd(system, "v_sf", disabled=["sf"]))
    assert 2.0 <= ratio <= 2.1


@settings(max_examples=30, deadline=None)
@given(
    I_pd=st.floats(min_value=1e-16, max_value=1e-12),
    I_pr=st.floats(min_value=1e-12, max_value=1e-7),
)
def test_shot_limit_ratio_never_below_two(I_pd, I_pr):
    system = build_system(OperatingPoint(I_pd=I_pd), BiasConfig(I_pr=I_pr), device_params())
    assert shot_limit_ratio(psd(system, "v_sf")) >= 2.0 - 1e-9


def test_ratio_undefined_without_photons(system):
    with pytest.raises(DomainError):
        shot_limit_ratio(psd(system, "v_sf", disabled=["photon"]))


def test_refer_to_tc_scales_psd_by_gain_squared(system):
    spectrum = psd(system, "v_sf")
    tc = refer_to_tc(spectrum, system, "v_sf")
    gain = system.dc_gain("v_sf")
    assert tc.units == "tc^2/Hz"
    assert integrate(tc.f, tc.total) == pytest.approx(integrate(spectrum.f, spectrum.total) / gain ** 2)


def test_pr_psd_collapses_against_f_over_i_pr(op_point, params):
    # around and above the pr corner, which sits near 5.7 kHz at 1 nA
    x = np.logspace(-1, 2, 40) * 5.7e3
    reference = psd(build_system(op_point, BiasConfig(I_pr=1e-9), params), "v_pr", FrequencyGrid(x))
    for I_pr in (100e-12, 10e-9):
        system = build_system(op_point, BiasConfig(I_pr=I_pr), params)
        spectrum = psd(system, "v_pr", FrequencyGrid(x * I_pr / 1e-9))
        np.testing.assert_allclose(
            spectrum.per_source["pr"] * I_pr, reference.per_source["pr"] * 1e-9, rtol=0.10
        )


def test_lowering_sf_bias_never_raises_v_sf_noise(op_point, params):
    grid = FrequencyGrid.log_spaced(1e-4, 1e9, 64)
    previous = None
    for I_sf in np.logspace(-9, -13, 9):
        system = build_system(op_point, BiasConfig(I_sf=float(I_sf)), params)
        final = cumulative_rms(psd(system, "v_sf", grid)).final_rms
        if previous is not None:
            for source in ("pd", "pr", "sf"):
                # the sf share is flat in I_sf up to quadrature error
                assert final[source] <= previous[source] * (1 + 1e-3)
            assert final["pd"] < previous["pd"]
        previous = final


@settings(max_examples=30, deadline=None)
@given(c=st.floats(min_value=1e-6, max_value=1e6))
def test_photon_fraction_ignores_global_rescaling(c):
    system = build_system(OperatingPoint(I_pd=2.5e-15), BiasConfig(), device_params())
    spectrum = psd(system, "v_sf")
    assert photon_fraction(spectrum.scaled(c)) == pytest.approx(photon_fraction(spectrum), rel=1e-9)


def test_photon_fraction_tends_to_half_at_high_pr_bias(op_point, params):
    fractions = [
        photon_fraction(psd(build_system(op_point, BiasConfig(I_pr=I_pr), params), "v_sf", disabled=["sf"]))
        for I_pr in (10e-12, 1e-9, 100e-9)
    ]
    assert fractions[0] < fractions[1] <= fractions[2] <= 0.5
    assert fractions[2] == pytest.approx(0.50, abs=0.005)

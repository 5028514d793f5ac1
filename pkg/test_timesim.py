import math
import warnings

import numpy as np
import pytest

from config import AccuracyError, BiasConfig, DomainError, SimConfig, device_params
from event_core import predict_rate
from noise_psd import integrate, psd
from pixel_model import build_system
from timesim import (
    LEAK_ON,
    OFF,
    ON,
    default_dt,
    empirical_psd,
    simulate,
    simulate_trials,
    time_constants,
)

THETA = BiasConfig().theta_on


@pytest.fixture
def quiet_params():
    return device_params(I_leak=0.0)


def test_time_constants(low_system):
    fastest, slowest = time_constants(low_system)
    assert fastest < slowest
    assert default_dt(low_system) == pytest.approx(fastest / 10)
    assert default_dt(low_system) == pytest.approx(107e-6, rel=0.05)


def test_no_noise_no_leak_no_events(low_system, low_bias, quiet_params):
    run = simulate(low_system, low_bias, quiet_params, SimConfig(duration=1.0, sources=()))
    assert run.events == []
    assert run.summary["var_tc"] == pytest.approx(0.0, abs=1e-20)


def test_step_of_two_thresholds_gives_two_on_events(low_system, low_bias, quiet_params):
    sim = SimConfig(duration=2.0, sources=(), stimulus=[(0.2, 2 * THETA)])
    run = simulate(low_system, low_bias, quiet_params, sim)
    assert [e.polarity for e in run.events] == [ON, ON]
    assert all(e.timestamp > 0.2 for e in run.events)
    assert run.events[1].timestamp - run.events[0].timestamp > low_bias.delta_refr


def test_step_just_under_three_thresholds(low_system, low_bias, quiet_params):
    sim = SimConfig(duration=2.0, sources=(), stimulus=[(0.2, 2.9 * THETA)])
    run = simulate(low_system, low_bias, quiet_params, sim)
    assert [e.polarity for e in run.events] == [ON, ON]


def test_simulation_emits_no_warnings(low_system, low_bias, quiet_params):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        simulate(low_system, low_bias, quiet_params, SimConfig(duration=0.5, seed=9))


def test_negative_step_gives_off_events(low_system, low_bias, quiet_params):
    sim = SimConfig(duration=1.0, sources=(), stimulus=[(0.2, -1.5 * THETA)])
    run = simulate(low_system, low_bias, quiet_params, sim)
    assert [e.polarity for e in run.events] == [OFF]


def test_same_seed_same_run(low_system, low_bias, quiet_params):
    sim = SimConfig(duration=2.0, seed=42)
    first = simulate(low_system, low_bias, quiet_params, sim)
    second = simulate(low_system, low_bias, quiet_params, sim)
    assert first.event_rows() == second.event_rows()
    assert first.summary == second.summary

    other = simulate(low_system, low_bias, quiet_params, sim.model_copy(update={"seed": 43}))
    assert other.summary["var_tc"] != first.summary["var_tc"]


def test_refractory_gap_between_events(op_point, params, quiet_params):
    bias = BiasConfig(I_pr=10e-12, theta_on=0.05, theta_off=0.05, delta_refr=5e-3)
    system = build_system(op_point, bias, params)
    run = simulate(system, bias, quiet_params, SimConfig(duration=5.0, seed=7))
    times = np.array([e.timestamp for e in run.events])
    assert times.size > 10
    assert np.all(np.diff(times) >= bias.delta_refr * (1 - 1e-9))


def test_dt_too_coarse(low_system, low_bias, params):
    with pytest.raises(DomainError):
        simulate(low_system, low_bias, params, SimConfig(duration=1.0, dt=1e-2))


def test_leak_events_are_periodic(low_system, low_bias):
    params = device_params(I_leak=1e-14)
    run = simulate(low_system, low_bias, params, SimConfig(duration=2.0, sources=()))
    assert run.summary["counts"]["ON"] == 0
    assert run.summary["counts"]["OFF"] == 0
    assert all(e.polarity == LEAK_ON for e in run.events)

    times = np.array([e.timestamp for e in run.events])
    assert times.size > 10
    expected = 1 / predict_rate(low_system, low_bias, params).leak_rate
    assert float(np.median(np.diff(times))) == pytest.approx(expected, rel=0.05)


def test_traces_are_recorded(low_system, low_bias, quiet_params):
    run = simulate(low_system, low_bias, quiet_params, SimConfig(duration=0.5, record_traces=True))
    assert set(run.traces) == {"t_seconds", "v_pr", "v_sf"}
    assert run.traces["v_pr"].size == run.summary["steps"]
    assert run.traces["t_seconds"][0] > 0


def test_trials_pool_independent_of_order(low_system, low_bias, quiet_params):
    sim = SimConfig(duration=1.0)
    forward = simulate_trials(low_system, low_bias, quiet_params, sim, [1, 2, 3])
    backward = simulate_trials(low_system, low_bias, quiet_params, sim, [3, 2, 1], max_workers=1)
    assert forward["noise_rate"] == pytest.approx(backward["noise_rate"])
    assert forward["duration"] == pytest.approx(3.0, rel=1e-3)


def test_empirical_psd_needs_enough_samples():
    with pytest.raises(AccuracyError):
        empirical_psd(np.zeros(100), 1e-3)


def test_empirical_psd_of_white_noise():
    rng = np.random.default_rng(0)
    dt, sigma = 1e-3, 0.5
    spectrum = empirical_psd(rng.normal(0, sigma, 1 << 18), dt)
    assert float(np.mean(spectrum.total)) == pytest.approx(2 * sigma ** 2 * dt, rel=0.05)
    assert spectrum.f[0] > 0


def test_empirical_psd_finds_a_tone():
    dt, f0 = 1e-3, 50.0
    t = np.arange(1 << 15) * dt
    spectrum = empirical_psd(np.sin(2 * math.pi * f0 * t), dt)
    assert spectrum.f[int(np.argmax(spectrum.total))] == pytest.approx(f0, rel=0.02)


@pytest.mark.slow
def test_simulated_variance_matches_psd(low_system, low_bias, quiet_params):
    run = simulate(low_system, low_bias, quiet_params, SimConfig(duration=100.0, seed=1))
    for node in ("v_pr", "v_sf"):
        spectrum = psd(low_system, node)
        assert run.summary[f"var_{node}"] == pytest.approx(integrate(spectrum.f, spectrum.total), rel=0.10)


@pytest.mark.slow
def test_simulated_spectrum_matches_model(low_system, low_bias, quiet_params):
    run = simulate(low_system, low_bias, quiet_params, SimConfig(duration=100.0, seed=2, record_traces=True))
    measured = empirical_psd(run.traces["v_sf"], run.dt, node="v_sf", nperseg=1 << 14)
    band = (measured.f > 1.0) & (measured.f < 50.0)
    model = psd(low_system, "v_sf")
    predicted = np.interp(measured.f[band], model.f, model.total)
    ratio_db = 10 * np.log10(np.median(measured.total[band] / predicted))
    assert abs(ratio_db) < 3.0


@pytest.mark.slow
def test_simulated_rate_matches_renewal_prediction(low_system, low_bias, params):
    predicted = predict_rate(low_system, low_bias, params, reference="renewal")
    assert predicted.total_rate >= 0.1
    run = simulate(low_system, low_bias, params, SimConfig(duration=2000.0, seed=3))
    assert run.summary["noise_rate"] == pytest.approx(predicted.total_rate, rel=0.30)
    assert run.summary["on_rate"] == pytest.approx(run.summary["off_rate"], rel=0.10)


@pytest.mark.slow
def test_poisson_and_gaussian_photon_drive_agree(low_system, low_bias, quiet_params):
    gauss = simulate(low_system, low_bias, quiet_params, SimConfig(duration=100.0, seed=4))
    poisson = simulate(
        low_system, low_bias, quiet_params,
        SimConfig(duration=100.0, seed=4, drive_mode="poisson-photon"),
    )
    assert poisson.summary["var_tc"] == pytest.approx(gauss.summary["var_tc"], rel=0.10)

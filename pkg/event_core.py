"""Predicted DVS event rates from node noise statistics.

Noise events come from the level-crossing rate of the TC-referred v_sf
process seen by the change amplifier; leak events are reported on their own.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, Literal, Optional, Tuple

import numpy as np
from scipy.special import logsumexp, ndtr

from config import BiasConfig, DeviceParams, DomainError, ModelError
from noise_psd import FrequencyGrid, SpectrumSeries, integrate, psd, refer_to_tc
from pixel_model import SmallSignalSystem

logger = logging.getLogger(__name__)

# f^2 * S must fall at least this steeply at the top of the grid for m2 to converge
MIN_M2_TAIL_SLOPE = -1.0
TAIL_POINTS = 8
# exp() overflows past this
MAX_EXPONENT = 700.0
# memorized levels considered, in sigma either side of the mean
RENEWAL_SPAN = 8.0
RENEWAL_OFFSETS = 32
RENEWAL_GRID = 401
# conditional hazards are tracked over these lags, in units of 1 / (2 pi nu0)
RENEWAL_LAG_RANGE = (1e-3, 1e3)
RENEWAL_LAGS = 400

RATE_UNITS = {
    "on_rate": "Hz",
    "off_rate": "Hz",
    "total_rate": "Hz",
    "leak_rate": "Hz",
    "sigma_tc": "log-e",
    "nu0": "Hz",
}


@dataclass(frozen=True)
class NoiseStats:
    sigma_tc: float
    nu0: float
    m0: float = 0.0
    m2: float = 0.0
    # event-path spectrum the moments came from; the renewal estimate needs its autocorrelation
    f: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    s: Optional[np.ndarray] = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class RatePrediction:
    on_rate: float
    off_rate: float
    total_rate: float
    leak_rate: float
    sigma_tc: float
    nu0: float
    reference: str = "fixed"

    def to_dict(self) -> Dict[str, object]:
        data = asdict(self)
        data["units"] = dict(RATE_UNITS)
        return data


def event_path_filter(f: np.ndarray, f_ca: float) -> np.ndarray:
    """|H|^2 of the one-pole change-amplifier/comparator stage"""
    return 1.0 / (1.0 + (np.asarray(f, dtype=float) / f_ca) ** 2)


def _m2_tail_slope(f: np.ndarray, s: np.ndarray) -> float:
    tail_f = f[-TAIL_POINTS:]
    tail = (f ** 2 * s)[-TAIL_POINTS:]
    if np.all(tail <= 0):
        return -np.inf
    if np.any(tail <= 0):
        # partially zero tail: the integrand is already gone
        return -np.inf
    slope, _ = np.polyfit(np.log(tail_f), np.log(tail), 1)
    return float(slope)


def noise_stats(spectrum: SpectrumSeries, f_ca: Optional[float] = None) -> NoiseStats:
    """Spectral moments of a TC-referred PSD.

    With f_ca given, the spectrum is first passed through the event-path
    low-pass. Raises ModelError when m2 does not converge on the grid.
    """
    if not spectrum.units.startswith("tc"):
        logger.warning(f"noise_stats got a spectrum in {spectrum.units}; expected TC units")
    if f_ca is not None:
        if not f_ca > 0:
            raise DomainError(f"Event-path bandwidth must be positive, got {f_ca}")
        spectrum = spectrum.filtered(event_path_filter(spectrum.f, f_ca))

    f = spectrum.f
    s = spectrum.total
    if len(f) < TAIL_POINTS:
        raise DomainError(f"Need at least {TAIL_POINTS} grid points for spectral moments")

    m0 = integrate(f, s)
    if not m0 > 0:
        return NoiseStats(sigma_tc=0.0, nu0=0.0, m0=0.0, m2=0.0)

    slope = _m2_tail_slope(f, s)
    if slope > MIN_M2_TAIL_SLOPE:
        raise ModelError(
            f"Second spectral moment diverges: f^2*S falls as f^{slope:.2f} at the top of the grid; "
            "the PSD needs at least a two-pole roll-off"
        )

    m2 = integrate(f, (2 * math.pi * f) ** 2 * s)
    if not math.isfinite(m2):
        raise ModelError("Second spectral moment is not finite")
    return NoiseStats(
        sigma_tc=math.sqrt(m0), nu0=math.sqrt(m2 / m0) / (2 * math.pi), m0=m0, m2=m2, f=f, s=s
    )


def event_path_stats(
    system: SmallSignalSystem,
    grid: Optional[FrequencyGrid] = None,
    disabled: Iterable[str] = (),
) -> NoiseStats:
    """NoiseStats of the TC-referred v_sf noise after the event-path pole"""
    spectrum = refer_to_tc(psd(system, "v_sf", grid, disabled), system, "v_sf")
    return noise_stats(spectrum, f_ca=system.f_ca)


def refractory_correct(rate: float, delta_refr: float) -> float:
    return rate / (1.0 + rate * delta_refr)


def _fixed_rate(stats: NoiseStats, theta: float, delta_refr: float) -> float:
    x = theta ** 2 / (2 * stats.sigma_tc ** 2)
    return refractory_correct(stats.nu0 * math.exp(-x), delta_refr)


def _gaussian_acf(stats: NoiseStats, lags: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """R and dR/dtau of a Gaussian-shaped spectrum with the same m0 and m2"""
    w = 2 * math.pi * stats.nu0
    m0 = stats.sigma_tc ** 2
    r = m0 * np.exp(-0.5 * (w * lags) ** 2)
    return r, -(w ** 2) * lags * r


def autocorrelation(stats: NoiseStats, lags: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Autocovariance R(tau) and its slope R'(tau) of the TC-referred event-path noise.

    Uses the PSD the stats were computed from when it is attached, integrating
    the piecewise-linear spectrum against cos / sin exactly so long lags do not
    alias on a log grid. Hand-built stats fall back to a Gaussian-shaped
    spectrum with the same variance and nu0.
    """
    lags = np.asarray(lags, dtype=float)
    if stats.f is None or stats.s is None:
        return _gaussian_acf(stats, lags)

    f, s = stats.f, stats.s
    g = 2 * math.pi * f * s
    h = np.diff(f)
    mid = 0.5 * (f[1:] + f[:-1])
    slope_s = np.diff(s) / h
    slope_g = np.diff(g) / h

    r = np.empty_like(lags)
    rp = np.empty_like(lags)
    zero = lags == 0
    r[zero] = integrate(f, s)
    rp[zero] = 0.0

    k = 2 * math.pi * lags[~zero][:, None]
    half = np.sin(k * h / 2)
    # edge terms telescope; the slope terms carry the interior
    r_edge = (s[-1] * np.sin(k[:, 0] * f[-1]) - s[0] * np.sin(k[:, 0] * f[0])) / k[:, 0]
    r[~zero] = r_edge - 2 * np.sum(slope_s * np.sin(k * mid) * half, axis=1) / k[:, 0] ** 2
    g_edge = -(g[-1] * np.cos(k[:, 0] * f[-1]) - g[0] * np.cos(k[:, 0] * f[0])) / k[:, 0]
    rp[~zero] = -(g_edge + 2 * np.sum(slope_g * np.cos(k * mid) * half, axis=1) / k[:, 0] ** 2)
    return r, rp


def _expected_positive(mean: np.ndarray, sd: np.ndarray) -> np.ndarray:
    """E[max(Z, 0)] for Z ~ N(mean, sd^2)"""
    safe = np.where(sd > 0, sd, 1.0)
    z = mean / safe
    out = mean * ndtr(z) + safe * np.exp(-0.5 * z ** 2) / math.sqrt(2 * math.pi)
    return np.where(sd > 0, out, np.maximum(mean, 0.0))


def _level_waits(
    stats: NoiseStats, levels: np.ndarray, theta_on: float, theta_off: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Log mean wait, log P(ON next) and log P(OFF next) after an event at each level.

    The noise starts exactly at the memorized level m and its crossing
    intensities of m + theta_on (up) and m - theta_off (down) follow from the
    Gaussian process conditioned on that start. Past the last lag the process
    has forgotten m and the stationary Rice rates take over.
    """
    m0 = stats.sigma_tc ** 2
    m2 = m0 * (2 * math.pi * stats.nu0) ** 2
    scale = 1.0 / (2 * math.pi * stats.nu0)
    lags = np.concatenate(([0.0], np.geomspace(RENEWAL_LAG_RANGE[0] * scale, RENEWAL_LAG_RANGE[1] * scale,
                                               RENEWAL_LAGS)))
    r, rp = autocorrelation(stats, lags)
    r, rp = r[1:, None], rp[1:, None]
    m = np.asarray(levels, dtype=float)[None, :]

    var = np.maximum(m0 - r ** 2 / m0, m0 * 1e-18)
    sd = np.sqrt(var)
    mean = r / m0 * m
    slope_mean = rp / m0 * m
    cov = -r * rp / m0
    slope_sd = np.sqrt(np.maximum(m2 - rp ** 2 / m0 - cov ** 2 / var, 0.0))

    def intensity(level: np.ndarray, sign: float) -> np.ndarray:
        x = level - mean
        density = np.exp(-0.5 * x ** 2 / var) / (sd * math.sqrt(2 * math.pi))
        return density * _expected_positive(sign * (slope_mean + cov / var * x), slope_sd)

    up = np.vstack([np.zeros(m.shape), intensity(m + theta_on, 1.0)])
    down = np.vstack([np.zeros(m.shape), intensity(m - theta_off, -1.0)])

    # piecewise-constant hazard per lag interval, trapezoid-averaged
    dt = np.diff(lags)[:, None]
    up_bar = 0.5 * (up[1:] + up[:-1])
    down_bar = 0.5 * (down[1:] + down[:-1])
    hazard = up_bar + down_bar
    step = hazard * dt
    log_survive = -np.vstack([np.zeros(m.shape), np.cumsum(step, axis=0)])
    survive = np.exp(log_survive[:-1])
    leave = -np.expm1(-step)
    safe = np.where(hazard > 0, hazard, 1.0)
    spent = np.where(hazard > 0, leave / safe, dt)
    wait = np.sum(survive * spent, axis=0)
    p_on = np.sum(survive * np.where(hazard > 0, leave * up_bar / safe, 0.0), axis=0)
    p_off = np.sum(survive * np.where(hazard > 0, leave * down_bar / safe, 0.0), axis=0)

    # stationary tail
    m = m[0]
    log_on = -((m + theta_on) ** 2) / (2 * m0)
    log_off = -((m - theta_off) ** 2) / (2 * m0)
    log_h = np.logaddexp(log_on, log_off) + math.log(stats.nu0)
    log_rest = log_survive[-1]
    with np.errstate(divide="ignore"):
        log_wait = np.logaddexp(np.log(wait), log_rest - log_h)
        log_p_on = np.logaddexp(np.log(p_on), log_rest + log_on - np.logaddexp(log_on, log_off))
        log_p_off = np.logaddexp(np.log(p_off), log_rest + log_off - np.logaddexp(log_on, log_off))
    norm = np.logaddexp(log_p_on, log_p_off)
    return log_wait, log_p_on - norm, log_p_off - norm


def _cycle_rates(log_pi: np.ndarray, log_wait: np.ndarray, log_p_on: np.ndarray, delta_refr: float) -> Tuple[float, float]:
    """ON and OFF rates of a semi-Markov chain from its embedded stationary law"""
    log_pi = log_pi - logsumexp(log_pi)
    log_cycle = np.logaddexp(math.log(delta_refr), log_wait) if delta_refr > 0 else log_wait
    log_mean_cycle = float(logsumexp(log_pi + log_cycle))
    if log_mean_cycle > MAX_EXPONENT:
        return 0.0, 0.0
    total = math.exp(-log_mean_cycle)
    share_on = float(np.exp(logsumexp(log_pi + log_p_on)))
    return total * share_on, total * (1.0 - share_on)


def _renewal_rates(stats: NoiseStats, theta_on: float, theta_off: float, delta_refr: float) -> Tuple[float, float]:
    """ON and OFF rates of the threshold-stepped memorized level.

    Every event moves the memorized level by its threshold, so the level walks
    a birth-death chain whose steps are drawn from _level_waits. With equal
    thresholds the levels sit on a lattice u + k*theta; the leak drift sweeps
    the offset u evenly in time, so rates are averaged over u. Unequal
    thresholds mix the level on their own and the chain runs on a fine grid
    with linear interpolation of the landing point.
    """
    s = stats.sigma_tc
    if math.isclose(theta_on, theta_off, rel_tol=1e-9):
        theta = theta_on
        span = int(math.ceil(RENEWAL_SPAN * s / theta)) + 1
        k = np.arange(-span, span + 1)
        offsets = (np.arange(RENEWAL_OFFSETS) + 0.5) / RENEWAL_OFFSETS * theta
        levels = (offsets[:, None] + k[None, :] * theta).ravel()
        log_wait, log_p_on, log_p_off = (
            a.reshape(RENEWAL_OFFSETS, k.size) for a in _level_waits(stats, levels, theta, theta)
        )
        on = off = 0.0
        for row in range(RENEWAL_OFFSETS):
            # detailed balance: pi(k+1) / pi(k) = p_on(k) / p_off(k+1)
            log_pi = np.concatenate(([0.0], np.cumsum(log_p_on[row, :-1] - log_p_off[row, 1:])))
            r_on, r_off = _cycle_rates(log_pi, log_wait[row], log_p_on[row], delta_refr)
            on += r_on
            off += r_off
        return on / RENEWAL_OFFSETS, off / RENEWAL_OFFSETS

    levels = np.linspace(-RENEWAL_SPAN * s - theta_off, RENEWAL_SPAN * s + theta_on, RENEWAL_GRID)
    log_wait, log_p_on, log_p_off = _level_waits(stats, levels, theta_on, theta_off)
    step = levels[1] - levels[0]
    n = levels.size
    transition = np.zeros((n, n))
    for target, log_p in ((levels + theta_on, log_p_on), (levels - theta_off, log_p_off)):
        pos = np.clip((target - levels[0]) / step, 0, n - 1)
        lo = np.minimum(np.floor(pos).astype(int), n - 2)
        frac = pos - lo
        p = np.exp(log_p)
        np.add.at(transition, (np.arange(n), lo), p * (1 - frac))
        np.add.at(transition, (np.arange(n), lo + 1), p * frac)
    system = transition.T - np.eye(n)
    system[-1] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    pi = np.clip(np.linalg.lstsq(system, rhs, rcond=None)[0], 0.0, None)
    with np.errstate(divide="ignore"):
        log_pi = np.log(pi)
    return _cycle_rates(log_pi, log_wait, log_p_on, delta_refr)


def rice_rate(
    stats: NoiseStats,
    bias: BiasConfig,
    reference: Literal["fixed", "renewal"] = "fixed",
    leak_rate: float = 0.0,
) -> RatePrediction:
    """Level-crossing noise event rates with refractory correction.

    "fixed": nu0 * exp(-theta^2 / 2 sigma^2) per polarity, then nu / (1 + nu * delta_refr).
    "renewal": events step the memorized level by one threshold; the level walks a
    semi-Markov chain whose waits come from the noise conditioned on starting at it.
    """
    if reference not in ("fixed", "renewal"):
        raise DomainError(f"Unknown crossing reference '{reference}'")
    if not (bias.theta_on > 0 and bias.theta_off > 0):
        raise DomainError("Thresholds must be positive")

    if stats.sigma_tc == 0 or stats.nu0 == 0:
        on = off = 0.0
    elif reference == "fixed":
        on = _fixed_rate(stats, bias.theta_on, bias.delta_refr)
        off = _fixed_rate(stats, bias.theta_off, bias.delta_refr)
    else:
        on, off = _renewal_rates(stats, bias.theta_on, bias.theta_off, bias.delta_refr)
    return RatePrediction(
        on_rate=on,
        off_rate=off,
        total_rate=on + off,
        leak_rate=leak_rate,
        sigma_tc=stats.sigma_tc,
        nu0=stats.nu0,
        reference=reference,
    )


def threshold_charge(params: DeviceParams, bias: BiasConfig, system: Optional[SmallSignalSystem] = None) -> float:
    """Charge the leak must deliver to walk the change amp through one ON threshold"""
    if system is not None:
        gain = system.dc_gain("v_sf")
    else:
        gain = params.U_T / params.kappa_fb * params.A_sf
    return params.C_leak * bias.theta_on * gain


def leak_rate(
    params: DeviceParams,
    bias: BiasConfig,
    system: Optional[SmallSignalSystem] = None,
    q_theta: Optional[float] = None,
) -> float:
    """Periodic leak event rate I_leak / Q_theta in hertz"""
    if params.I_leak < 0:
        raise DomainError(f"I_leak must be non-negative, got {params.I_leak}")
    q = threshold_charge(params, bias, system) if q_theta is None else q_theta
    if not q > 0:
        raise DomainError("Threshold charge is zero; leak rate undefined")
    return params.I_leak / q


def predict_rate(
    system: SmallSignalSystem,
    bias: BiasConfig,
    params: DeviceParams,
    grid: Optional[FrequencyGrid] = None,
    disabled: Iterable[str] = (),
    reference: Literal["fixed", "renewal"] = "fixed",
) -> RatePrediction:
    """Noise and leak rates for one operating point"""
    stats = event_path_stats(system, grid, disabled)
    return rice_rate(stats, bias, reference=reference, leak_rate=leak_rate(params, bias, system))

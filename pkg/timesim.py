"""Seeded Monte-Carlo simulation of the pixel.

The linear node dynamics are propagated exactly per time step in the modal
basis of -C^-1 G with the injected currents held over each step. The
TC-referred v_sf then goes through the event-path low-pass and the
change-amplifier / comparator / refractory pipeline.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal

from config import AccuracyError, BiasConfig, DeviceParams, DomainError, NumericalError, SimConfig
from event_core import leak_rate
from noise_psd import FrequencyGrid, SpectrumSeries, source_weights
from pixel_model import SOURCES, SmallSignalSystem

logger = logging.getLogger(__name__)

ON = 1
OFF = -1
LEAK_ON = 2
POLARITY_NAMES = {ON: "ON", OFF: "OFF", LEAK_ON: "LEAK-ON"}

CHUNK_STEPS = 1 << 18
SEARCH_BLOCK = 4096
MIN_PSD_SAMPLES = 1 << 12
DT_PER_TAU = 10.0
# levels approached asymptotically still trip the comparator
COMPARATOR_RTOL = 1e-9


@dataclass(frozen=True)
class EventRecord:
    timestamp: float
    polarity: int

    @property
    def label(self) -> str:
        return POLARITY_NAMES[self.polarity]


@dataclass
class SimResult:
    events: List[EventRecord]
    summary: Dict[str, object]
    dt: float
    traces: Optional[Dict[str, np.ndarray]] = None

    def event_rows(self) -> List[Tuple[float, int]]:
        return [(e.timestamp, e.polarity) for e in self.events]


def time_constants(system: SmallSignalSystem) -> Tuple[float, float]:
    """(fastest, slowest) time constant in seconds, event-path pole included"""
    rates = np.append(np.abs(system.natural_frequencies()), 2 * math.pi * system.f_ca)
    return 1.0 / rates.max(), 1.0 / rates.min()


def default_dt(system: SmallSignalSystem) -> float:
    return time_constants(system)[0] / DT_PER_TAU


def _stimulus_at(stimulus: Optional[Sequence[Tuple[float, float]]], t: np.ndarray) -> np.ndarray:
    """Piecewise-constant log-intensity; zero before the first breakpoint"""
    if not stimulus:
        return np.zeros_like(t)
    times = np.array([p[0] for p in stimulus], dtype=float)
    values = np.array([p[1] for p in stimulus], dtype=float)
    idx = np.searchsorted(times, t, side="right") - 1
    out = np.where(idx >= 0, values[np.clip(idx, 0, None)], 0.0)
    return out


class _ModalPropagator:
    """Exact zero-order-hold stepping of dv/dt = -C^-1 G v + C^-1 i"""

    def __init__(self, system: SmallSignalSystem, dt: float):
        A = -np.linalg.solve(system.C, system.G)
        lam, V = np.linalg.eig(A)
        # modal state is complex whether or not the eigenvalues are
        lam, V = lam.astype(complex), V.astype(complex)
        try:
            V_inv = np.linalg.inv(V)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"System matrix is not diagonalizable: {exc}") from exc
        self.V = V
        self.W = V_inv @ np.linalg.inv(system.C)
        self.a = np.exp(lam * dt)
        self.gamma = (self.a - 1.0) / lam
        self.z = np.zeros(len(lam), dtype=complex)

    def step_block(self, currents: np.ndarray) -> np.ndarray:
        """Node voltages after each step; currents has shape (nodes, steps)"""
        drive = self.W @ currents
        Z = np.empty(drive.shape, dtype=complex)
        for m in range(len(self.a)):
            Z[m], _ = signal.lfilter([self.gamma[m]], [1.0, -self.a[m]], drive[m], zi=[self.a[m] * self.z[m]])
        self.z = Z[:, -1].copy()
        return (self.V @ Z).real


class _EventPipeline:
    """Change amplifier with memorized level, refractory hold and leak ramp (TC units).

    Each event moves the memorized level by one threshold in its direction,
    so a jump of k thresholds yields k events. The leak ramp is a steady drift
    of the change-amp input that events do not reset.
    """

    def __init__(self, bias: BiasConfig, leak_ramp: float):
        self.theta_on = bias.theta_on
        self.theta_off = bias.theta_off
        self.refr = bias.delta_refr
        self.leak_ramp = leak_ramp
        self.memorized: Optional[float] = None
        self.t_start = 0.0
        self.t_last = 0.0
        self.hold_until: Optional[float] = None

    def feed(self, t: np.ndarray, y: np.ndarray) -> List[EventRecord]:
        events: List[EventRecord] = []
        n = len(t)
        k = 0
        if self.memorized is None:
            self.memorized = float(y[0])
            self.t_start = self.t_last = float(t[0])
            k = 1
        on_level = self.theta_on * (1 - COMPARATOR_RTOL)
        off_level = self.theta_off * (1 - COMPARATOR_RTOL)
        while k < n:
            if self.hold_until is not None:
                k = int(np.searchsorted(t[k:], self.hold_until, side="left")) + k
                if k >= n:
                    break
                self.hold_until = None

            stop = min(k + SEARCH_BLOCK, n)
            d = y[k:stop] + self.leak_ramp * (t[k:stop] - self.t_start) - self.memorized
            hits = np.flatnonzero((d >= on_level) | (d <= -off_level))
            if hits.size == 0:
                k = stop
                continue

            j = k + int(hits[0])
            if d[hits[0]] >= on_level:
                leaked = self.leak_ramp * (t[j] - self.t_last)
                polarity = LEAK_ON if leaked >= 0.5 * self.theta_on else ON
                self.memorized += self.theta_on
            else:
                polarity = OFF
                self.memorized -= self.theta_off
            events.append(EventRecord(float(t[j]), polarity))
            self.t_last = float(t[j])
            if self.refr > 0:
                self.hold_until = float(t[j]) + self.refr
            k = j + 1
        return events


class _NoiseDrive:
    """Per-source current samples, one independent stream per source"""

    def __init__(self, system: SmallSignalSystem, sim: SimConfig, dt: float, disabled: Iterable[str]):
        self.dt = dt
        self.mode = sim.drive_mode
        self.system = system
        disabled = set(disabled) | (set(SOURCES) - set(sim.sources))
        self.weights = source_weights(disabled)
        self.photon_on = "pd" not in disabled and "photon" not in disabled
        self.mfb_on = "pd" not in disabled and "mfb" not in disabled

        streams = np.random.SeedSequence(sim.seed).spawn(4)
        self.rng = {
            name: np.random.Generator(np.random.PCG64(ss))
            for name, ss in zip(("photon", "mfb", "pr", "sf"), streams)
        }

    def _gaussian(self, name: str, psd: float, n: int) -> np.ndarray:
        return self.rng[name].standard_normal(n) * math.sqrt(psd / (2 * self.dt))

    def currents(self, n: int) -> np.ndarray:
        out = np.zeros((len(self.system.nodes), n))
        q = self.system.q_e
        for inj in self.system.injections:
            if inj.source == "pd":
                if self.mode == "poisson-photon":
                    if self.photon_on:
                        mean = self.system.I_pd / q * self.dt
                        counts = self.rng["photon"].poisson(mean, n)
                        out[inj.node] += q * (counts - mean) / self.dt
                    if self.mfb_on:
                        out[inj.node] += self._gaussian("mfb", 0.5 * inj.psd, n)
                elif self.weights["pd"] > 0:
                    out[inj.node] += self._gaussian("photon", self.weights["pd"] * inj.psd, n)
            elif self.weights[inj.source] > 0:
                out[inj.node] += self._gaussian(inj.source, inj.psd, n)
        return out


def simulate(
    system: SmallSignalSystem,
    bias: BiasConfig,
    params: DeviceParams,
    sim: SimConfig,
    disabled: Iterable[str] = (),
) -> SimResult:
    """Run one seeded trial and return events, summary and optional traces"""
    tau_min, tau_max = time_constants(system)
    dt_limit = tau_min / DT_PER_TAU
    dt = sim.dt if sim.dt is not None else dt_limit
    if dt > dt_limit * (1 + 1e-9):
        raise DomainError(f"dt = {dt:g} s is too coarse; must be <= {dt_limit:g} s (fastest time constant / 10)")
    if sim.duration < dt:
        raise DomainError("duration must be at least one time step")

    n_warm = int(math.ceil(sim.warmup_tau * tau_max / dt))
    n_run = int(round(sim.duration / dt))
    logger.info(
        f"Simulating {sim.duration:g} s at dt={dt:.3g} s ({n_run} steps, {n_warm} warm-up), "
        f"seed={sim.seed}, mode={sim.drive_mode}"
    )

    prop = _ModalPropagator(system, dt)
    drive = _NoiseDrive(system, sim, dt, disabled)
    gain_sf = system.dc_gain("v_sf")
    a_ca = math.exp(-2 * math.pi * system.f_ca * dt)
    y_ca = 0.0

    i_pr, i_sf = system.node_index("v_pr"), system.node_index("v_sf")
    ramp = bias.theta_on * leak_rate(params, bias, system)
    pipeline = _EventPipeline(bias, ramp)
    events: List[EventRecord] = []

    sums = {"v_pr": 0.0, "v_sf": 0.0, "tc": 0.0}
    squares = dict.fromkeys(sums, 0.0)
    counted = 0
    traces: Dict[str, List[np.ndarray]] = {"t_seconds": [], "v_pr": [], "v_sf": []}

    total = n_warm + n_run
    done = 0
    while done < total:
        n = min(CHUNK_STEPS, total - done)
        # step k ends at time (k + 1 - n_warm) * dt
        t = (np.arange(done, done + n) + 1 - n_warm) * dt

        currents = drive.currents(n)
        currents[system.node_index("v_in")] += -system.I_pd * _stimulus_at(sim.stimulus, t - dt)
        v = prop.step_block(currents)
        if not np.all(np.isfinite(v)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(v), axis=0))[0])
            raise NumericalError(f"Non-finite node voltage at t = {t[bad]:.6g} s (step {done + bad})")

        tc = v[i_sf] / gain_sf
        y, _ = signal.lfilter([1 - a_ca], [1.0, -a_ca], tc, zi=[a_ca * y_ca])
        y_ca = float(y[-1])

        live = t > 0
        if np.any(live):
            tl, yl = t[live], y[live]
            events.extend(pipeline.feed(tl, yl))
            for name, series in (("v_pr", v[i_pr][live]), ("v_sf", v[i_sf][live]), ("tc", yl)):
                sums[name] += float(np.sum(series))
                squares[name] += float(np.dot(series, series))
            counted += int(np.count_nonzero(live))
            if sim.record_traces:
                traces["t_seconds"].append(tl)
                traces["v_pr"].append(v[i_pr][live])
                traces["v_sf"].append(v[i_sf][live])
        done += n

    duration = counted * dt
    counts = {label: 0 for label in POLARITY_NAMES.values()}
    for e in events:
        counts[e.label] += 1
    variances = {
        f"var_{name}": squares[name] / counted - (sums[name] / counted) ** 2 for name in sums
    }
    summary: Dict[str, object] = {
        "duration": duration,
        "dt": dt,
        "steps": counted,
        "warmup_steps": n_warm,
        "seed": sim.seed,
        "drive_mode": sim.drive_mode,
        "counts": counts,
        "on_rate": counts["ON"] / duration,
        "off_rate": counts["OFF"] / duration,
        "leak_rate": counts["LEAK-ON"] / duration,
        "noise_rate": (counts["ON"] + counts["OFF"]) / duration,
        **variances,
    }
    logger.info(f"Simulation done: {len(events)} events, noise rate {summary['noise_rate']:.4g} Hz")

    result_traces = None
    if sim.record_traces:
        result_traces = {k: np.concatenate(v) for k, v in traces.items()}
    return SimResult(events=events, summary=summary, dt=dt, traces=result_traces)


def simulate_trials(
    system: SmallSignalSystem,
    bias: BiasConfig,
    params: DeviceParams,
    sim: SimConfig,
    seeds: Sequence[int],
    max_workers: Optional[int] = None,
) -> Dict[str, object]:
    """Independent trials with distinct seeds; pooled rates are order-independent"""
    configs = [sim.model_copy(update={"seed": s, "record_traces": False}) for s in seeds]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        results = list(pool.map(lambda c: simulate(system, bias, params, c), configs))

    duration = sum(r.summary["duration"] for r in results)
    noise_events = sum(r.summary["counts"]["ON"] + r.summary["counts"]["OFF"] for r in results)
    leak_events = sum(r.summary["counts"]["LEAK-ON"] for r in results)
    return {
        "seeds": list(seeds),
        "duration": duration,
        "noise_rate": noise_events / duration,
        "leak_rate": leak_events / duration,
        "per_trial": [r.summary for r in results],
    }


def empirical_psd(
    trace: np.ndarray,
    dt: float,
    node: str = "v_pr",
    nperseg: Optional[int] = None,
) -> SpectrumSeries:
    """One-sided Welch PSD of a sampled trace (Hann window, 50% overlap)"""
    x = np.asarray(trace, dtype=float)
    if x.ndim != 1 or x.size < MIN_PSD_SAMPLES:
        raise AccuracyError(f"Trace has {x.size} samples; at least {MIN_PSD_SAMPLES} are needed")
    if not dt > 0:
        raise DomainError(f"dt must be positive, got {dt}")
    if nperseg is None:
        nperseg = max(256, 1 << int(math.log2(x.size // 8)))

    f, pxx = signal.welch(x, fs=1.0 / dt, window="hann", nperseg=min(nperseg, x.size),
                          detrend="constant", scaling="density")
    # drop the DC bin so the grid stays strictly positive
    f, pxx = f[1:], pxx[1:]
    return SpectrumSeries(
        node=node,
        grid=FrequencyGrid(f),
        per_source={"measured": pxx},
        total=pxx.copy(),
    )

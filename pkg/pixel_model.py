"""Small-signal model of the photoreceptor + source follower.

Three nodes: the photodiode node v_in, the photoreceptor output v_pr and the
source-follower output v_sf. Node equations are written as

    (G + s*C) v = i

where i holds the currents injected into each node.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np

from config import (
    BiasConfig,
    DeviceParams,
    DomainError,
    ModelError,
    NumericalError,
    OperatingPoint,
    RangeError,
)

logger = logging.getLogger(__name__)

NODES = ("v_in", "v_pr", "v_sf")
SOURCES = ("pd", "pr", "sf")
SIGNAL = "signal"

ArrayLike = Union[float, np.ndarray, Iterable[float]]


@dataclass(frozen=True)
class NoiseInjection:
    """White current noise injected at one node (one-sided PSD, A^2/Hz)"""

    source: str
    node: int
    psd: float


@dataclass(frozen=True, eq=False)
class SmallSignalSystem:
    """Linearized pixel at one operating point"""

    G: np.ndarray
    C: np.ndarray
    injections: Tuple[NoiseInjection, ...]
    signal_gain_dc: float
    I_pd: float
    conductances: Dict[str, float]
    f_ca: float
    nodes: Tuple[str, ...] = NODES
    A_sf: float = 1.0
    q_e: float = 1.602176634e-19

    def node_index(self, node: str) -> int:
        try:
            return self.nodes.index(node)
        except ValueError:
            raise DomainError(f"Unknown node '{node}'. Known: {', '.join(self.nodes)}")

    def injection(self, source: str) -> NoiseInjection:
        for inj in self.injections:
            if inj.source == source:
                return inj
        raise DomainError(f"Unknown noise source '{source}'. Known: {', '.join(SOURCES)}")

    def natural_frequencies(self) -> np.ndarray:
        """Eigenvalues of -C^-1 G in rad/s"""
        return np.linalg.eigvals(-np.linalg.solve(self.C, self.G))

    def pole_frequencies_hz(self) -> np.ndarray:
        """Pole magnitudes in Hz, ascending"""
        return np.sort(np.abs(self.natural_frequencies())) / (2 * math.pi)

    def dc_gain(self, node: str = "v_pr") -> float:
        """Actual DC signal gain (volts per log-e unit) at a node"""
        return float(abs(transfer_fn(self, SIGNAL, node, 0.0)))


def lux_to_photocurrent(illuminance: float, params: DeviceParams) -> float:
    """Photodiode current for an on-chip illuminance"""
    if not illuminance > 0:
        raise DomainError(f"Illuminance must be positive, got {illuminance}")
    return illuminance * params.lux_to_amps


def _conductances(op_point: OperatingPoint, bias: BiasConfig, params: DeviceParams) -> Dict[str, float]:
    U_T = params.U_T
    return {
        "g_s": op_point.I_pd / U_T,
        "g_mfb": params.kappa_fb * op_point.I_pd / U_T,
        "g_ma": params.kappa_n * bias.I_pr / U_T,
        "g_oa": bias.I_pr / params.V_A,
        "g_msf": params.kappa_sf * bias.I_sf / U_T,
    }


def build_system(op_point: OperatingPoint, bias: BiasConfig, params: DeviceParams) -> SmallSignalSystem:
    """Linearize the pixel around its operating point"""
    g = _conductances(op_point, bias, params)

    G = np.array([
        [g["g_s"], -g["g_mfb"], 0.0],
        [g["g_ma"], g["g_oa"], 0.0],
        [0.0, -g["g_msf"] * params.A_sf, g["g_msf"]],
    ])
    C = np.diag([params.C_in, params.C_out, params.C_sf])

    q = params.q_e
    injections = (
        # photon shot noise plus M_fb channel noise, 2qI_pd each
        NoiseInjection("pd", 0, 4 * q * op_point.I_pd),
        NoiseInjection("pr", 1, 4 * q * bias.I_pr),
        NoiseInjection("sf", 2, 4 * q * bias.I_sf),
    )

    G.setflags(write=False)
    C.setflags(write=False)
    system = SmallSignalSystem(
        G=G,
        C=C,
        injections=injections,
        signal_gain_dc=params.U_T / params.kappa_fb,
        I_pd=op_point.I_pd,
        conductances=g,
        f_ca=params.f_ca,
        A_sf=params.A_sf,
        q_e=q,
    )

    lam = system.natural_frequencies()
    if not np.all(np.isfinite(lam)) or np.any(lam.real >= 0):
        raise ModelError(f"Linearized system is unstable (natural frequencies {lam}); check parameters")
    return system


def _rhs(system: SmallSignalSystem, source: Union[str, NoiseInjection]) -> np.ndarray:
    e = np.zeros(len(system.nodes), dtype=complex)
    if isinstance(source, NoiseInjection):
        e[source.node] = 1.0
    elif source == SIGNAL:
        # a log-e step of the light raises the photocurrent by I_pd
        e[0] = -system.I_pd
    else:
        e[system.injection(source).node] = 1.0
    return e


def transfer_fn(
    system: SmallSignalSystem,
    source: Union[str, NoiseInjection],
    node: str,
    f: ArrayLike,
) -> Union[complex, np.ndarray]:
    """Complex gain from a unit injection (or the log-intensity signal) to a node.

    Noise sources give an impedance in ohms; the signal path gives volts per
    log-e unit. Accepts a scalar or an array of frequencies in hertz.
    """
    scalar = np.ndim(f) == 0
    freqs = np.atleast_1d(np.asarray(f, dtype=float))
    if np.any(freqs < 0):
        raise DomainError("Frequencies must be non-negative")

    idx = system.node_index(node)
    e = _rhs(system, source)
    w = 2 * math.pi * freqs
    M = system.G[None, :, :] + 1j * w[:, None, None] * system.C[None, :, :]
    try:
        v = np.linalg.solve(M, np.broadcast_to(e, (len(w), len(e)))[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Singular system matrix: {exc}") from exc
    h = v[:, idx]
    if not np.all(np.isfinite(h)):
        raise NumericalError("Non-finite transfer function value")
    return complex(h[0]) if scalar else h


@dataclass(frozen=True)
class ClosedFormTF:
    """Analytic two-pole photoreceptor response, plus the SF pole"""

    node: str
    dc_gain: float
    omega_in: float
    omega_out: float
    A_loop: float
    omega0: float
    Q: float
    poles_hz: Tuple[complex, complex]
    sf_pole_hz: float
    pole_ratio: float
    regime: str

    def evaluate(self, f: ArrayLike) -> np.ndarray:
        s = 2j * math.pi * np.asarray(f, dtype=float)
        h = self.dc_gain * self.omega0 ** 2 / (s ** 2 + (self.omega_in + self.omega_out) * s + self.omega0 ** 2)
        if self.node == "v_sf":
            w_sf = 2 * math.pi * self.sf_pole_hz
            h = h * w_sf / (s + w_sf)
        return h

    def to_dict(self) -> Dict[str, object]:
        return {
            "node": self.node,
            "dc_gain": self.dc_gain,
            "omega_in": self.omega_in,
            "omega_out": self.omega_out,
            "A_loop": self.A_loop,
            "omega0": self.omega0,
            "Q": self.Q,
            "poles_hz": [[p.real, p.imag] for p in self.poles_hz],
            "sf_pole_hz": self.sf_pole_hz,
            "pole_ratio": self.pole_ratio,
            "regime": self.regime,
        }


def signal_tf_closed_form(
    op_point: OperatingPoint,
    bias: BiasConfig,
    params: DeviceParams,
    node: str = "v_pr",
) -> ClosedFormTF:
    """Closed-form signal transfer function used to cross-check transfer_fn"""
    if node not in ("v_pr", "v_sf"):
        raise DomainError(f"Closed form is defined for v_pr and v_sf, not '{node}'")
    g = _conductances(op_point, bias, params)

    omega_in = g["g_s"] / params.C_in
    omega_out = g["g_oa"] / params.C_out
    A_loop = (g["g_ma"] / g["g_oa"]) * (g["g_mfb"] / g["g_s"])
    omega0_sq = (1 + A_loop) * omega_in * omega_out
    omega0 = math.sqrt(omega0_sq)
    damping = omega_in + omega_out
    Q = omega0 / damping

    disc = complex(damping ** 2 - 4 * omega0_sq)
    root = np.sqrt(disc)
    p1 = (-damping + root) / 2 / (2 * math.pi)
    p2 = (-damping - root) / 2 / (2 * math.pi)
    slow, fast = sorted((complex(p1), complex(p2)), key=abs)
    pole_ratio = abs(fast) / abs(slow)

    if disc.real < 0:
        regime = "complex"
    elif pole_ratio >= 100:
        regime = "pd-dominant"
    else:
        regime = "near-coincident"

    dc_gain = params.U_T / params.kappa_fb * A_loop / (1 + A_loop)
    if node == "v_sf":
        dc_gain *= params.A_sf

    return ClosedFormTF(
        node=node,
        dc_gain=dc_gain,
        omega_in=omega_in,
        omega_out=omega_out,
        A_loop=A_loop,
        omega0=omega0,
        Q=Q,
        poles_hz=(slow, fast),
        sf_pole_hz=g["g_msf"] / params.C_sf / (2 * math.pi),
        pole_ratio=pole_ratio,
        regime=regime,
    )


def bandwidth_3db(
    system: SmallSignalSystem,
    node: str = "v_pr",
    f_min: float = 1e-3,
    f_max: float = 1e9,
    points_per_decade: int = 20,
) -> float:
    """Smallest frequency where the signal gain falls to 1/sqrt(2) of DC"""
    h0 = abs(transfer_fn(system, SIGNAL, node, 0.0))
    target = h0 / math.sqrt(2)

    decades = math.log10(f_max / f_min)
    grid = np.logspace(math.log10(f_min), math.log10(f_max), int(decades * points_per_decade) + 1)
    mag = np.abs(transfer_fn(system, SIGNAL, node, grid))
    below = np.flatnonzero(mag <= target)
    if below.size == 0:
        raise RangeError(f"No 3 dB crossing at {node} within [{f_min:g}, {f_max:g}] Hz")
    k = below[0]
    if k == 0:
        raise RangeError(f"Gain at {node} is already below -3 dB at {f_min:g} Hz")

    lo, hi = math.log(grid[k - 1]), math.log(grid[k])
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if abs(transfer_fn(system, SIGNAL, node, math.exp(mid))) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    return math.exp(0.5 * (lo + hi))


def system_for(
    op_point: OperatingPoint,
    bias: BiasConfig,
    params: DeviceParams,
    **bias_overrides: float,
) -> SmallSignalSystem:
    """build_system with some bias fields replaced"""
    if bias_overrides:
        bias = bias.model_copy(update=bias_overrides)
    return build_system(op_point, bias, params)


def pole_report(system: SmallSignalSystem, closed: Optional[ClosedFormTF] = None) -> Dict[str, object]:
    """Natural frequencies and the analytic pole description, JSON-ready"""
    report: Dict[str, object] = {
        "poles_hz": [float(p) for p in system.pole_frequencies_hz()],
        "signal_gain_dc": system.signal_gain_dc,
        "dc_gain_v_pr": system.dc_gain("v_pr"),
        "dc_gain_v_sf": system.dc_gain("v_sf"),
    }
    if closed is not None:
        report["closed_form"] = closed.to_dict()
    return report

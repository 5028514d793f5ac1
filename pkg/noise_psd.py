"""Noise PSD synthesis, cumulative RMS and shot-noise limit metrics.

All spectra are one-sided. Independent sources add in power.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np

from config import DomainError
from pixel_model import SOURCES, SmallSignalSystem, transfer_fn

logger = logging.getLogger(__name__)

MIN_POINTS_PER_DECADE = 16
TAIL_TOLERANCE = 1e-3
ABLATABLE = SOURCES + ("photon", "mfb")


@dataclass(frozen=True, eq=False)
class FrequencyGrid:
    """Strictly increasing positive frequencies in hertz"""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size == 0:
            raise DomainError("Frequency grid must be a non-empty 1-D sequence")
        if np.any(pts <= 0):
            raise DomainError("Frequency grid points must be positive")
        if np.any(np.diff(pts) <= 0):
            raise DomainError("Frequency grid must be strictly increasing")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def log_spaced(cls, f_min: float, f_max: float, points_per_decade: int = 64) -> "FrequencyGrid":
        if not 0 < f_min < f_max:
            raise DomainError(f"Need 0 < f_min < f_max, got {f_min}, {f_max}")
        n = max(2, int(math.ceil(math.log10(f_max / f_min) * points_per_decade)) + 1)
        return cls(np.logspace(math.log10(f_min), math.log10(f_max), n))

    @classmethod
    def for_system(
        cls,
        system: SmallSignalSystem,
        points_per_decade: int = 64,
        upper_factor: float = 1000.0,
        lower_factor: float = 1e-3,
    ) -> "FrequencyGrid":
        """Grid from well below the slowest pole to upper_factor x the fastest one.

        The change-amplifier bandwidth counts as a pole so event-path moments
        are covered too.
        """
        poles = np.append(system.pole_frequencies_hz(), system.f_ca)
        return cls.log_spaced(poles.min() * lower_factor, poles.max() * upper_factor, points_per_decade)

    @property
    def points_per_decade(self) -> float:
        if self.points.size < 2:
            return 0.0
        return (self.points.size - 1) / math.log10(self.points[-1] / self.points[0])

    def __len__(self) -> int:
        return self.points.size


@dataclass(frozen=True, eq=False)
class SpectrumSeries:
    """Per-source and total PSD at one node"""

    node: str
    grid: FrequencyGrid
    per_source: Dict[str, np.ndarray]
    total: np.ndarray
    units: str = "V^2/Hz"
    disabled: Tuple[str, ...] = ()

    @property
    def photon_share(self) -> float:
        """Part of the pd column that is photon shot noise"""
        if "photon" in self.disabled or "pd" in self.disabled:
            return 0.0
        return 1.0 if "mfb" in self.disabled else 0.5

    @property
    def f(self) -> np.ndarray:
        return self.grid.points

    def scaled(self, factor: float, units: Optional[str] = None) -> "SpectrumSeries":
        return SpectrumSeries(
            node=self.node,
            grid=self.grid,
            per_source={k: v * factor for k, v in self.per_source.items()},
            total=self.total * factor,
            units=units or self.units,
            disabled=self.disabled,
        )

    def filtered(self, h2: np.ndarray) -> "SpectrumSeries":
        """Apply a power transfer |H(f)|^2 sampled on the grid"""
        per_source = {k: v * h2 for k, v in self.per_source.items()}
        return SpectrumSeries(self.node, self.grid, per_source, _power_sum(per_source), self.units, self.disabled)


@dataclass(frozen=True, eq=False)
class CumulativeRms:
    """sqrt of the running integral of each PSD component"""

    grid: FrequencyGrid
    per_source: Dict[str, np.ndarray]
    total: np.ndarray
    final_rms: Dict[str, float]
    units: str = "V"
    warnings: Tuple[str, ...] = field(default_factory=tuple)


def _power_sum(per_source: Dict[str, np.ndarray]) -> np.ndarray:
    return np.sum(np.vstack(list(per_source.values())), axis=0)


def cumulative_integral(f: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Running trapezoidal integral in linear f, starting at f = 0.

    The segment [0, f0] is taken as flat at y(f0).
    """
    f = np.asarray(f, dtype=float)
    y = np.asarray(y, dtype=float)
    steps = 0.5 * (y[1:] + y[:-1]) * np.diff(f)
    return y[0] * f[0] + np.concatenate(([0.0], np.cumsum(steps)))


def integrate(f: np.ndarray, y: np.ndarray) -> float:
    return float(cumulative_integral(f, y)[-1])


def source_weights(disabled: Iterable[str] = ()) -> Dict[str, float]:
    """Power weight per injection after ablation.

    "photon" and "mfb" each remove one half of the pd injection.
    """
    disabled = set(disabled)
    unknown = disabled - set(ABLATABLE)
    if unknown:
        raise DomainError(f"Unknown noise sources to disable: {sorted(unknown)}")
    weights = {s: 0.0 if s in disabled else 1.0 for s in SOURCES}
    if "pd" not in disabled:
        weights["pd"] = 1.0 - 0.5 * len(disabled & {"photon", "mfb"})
    return weights


def psd(
    system: SmallSignalSystem,
    node: str,
    grid: Optional[FrequencyGrid] = None,
    disabled: Iterable[str] = (),
) -> SpectrumSeries:
    """Per-source noise PSD at a node: S_source * |Z_source->node|^2"""
    if grid is None:
        grid = FrequencyGrid.for_system(system)
    disabled = tuple(disabled)
    scale = source_weights(disabled)

    per_source: Dict[str, np.ndarray] = {}
    for inj in system.injections:
        if scale[inj.source] == 0:
            per_source[inj.source] = np.zeros(len(grid))
            continue
        z = transfer_fn(system, inj, node, grid.points)
        per_source[inj.source] = scale[inj.source] * inj.psd * np.abs(z) ** 2

    return SpectrumSeries(
        node=node,
        grid=grid,
        per_source=per_source,
        total=_power_sum(per_source),
        disabled=tuple(sorted(set(disabled))),
    )


def cumulative_rms(spectrum: SpectrumSeries) -> CumulativeRms:
    """Square root of the running integral, per source and total"""
    f = spectrum.f
    warnings = []
    if len(f) >= 2 and spectrum.grid.points_per_decade < MIN_POINTS_PER_DECADE:
        warnings.append(
            f"grid has {spectrum.grid.points_per_decade:.1f} points per decade, "
            f"below {MIN_POINTS_PER_DECADE}; quadrature may be inaccurate"
        )

    per_source = {}
    final = {}
    for source, values in spectrum.per_source.items():
        cum = cumulative_integral(f, values)
        per_source[source] = np.sqrt(np.maximum(cum, 0.0))
        final[source] = float(per_source[source][-1])

    cum_total = cumulative_integral(f, spectrum.total)
    total = np.sqrt(np.maximum(cum_total, 0.0))
    final["total"] = math.sqrt(sum(v ** 2 for k, v in final.items()))

    # a 1/f^2 tail beyond the last point would still carry about S(f_N)*f_N
    if cum_total[-1] > 0:
        tail = spectrum.total[-1] * f[-1] / cum_total[-1]
        if tail > TAIL_TOLERANCE:
            warnings.append(f"upper grid limit truncates about {tail:.2%} of the noise power")

    units = "tc" if spectrum.units.startswith("tc") else "V"
    for w in warnings:
        logger.warning(f"cumulative_rms at {spectrum.node}: {w}")
    return CumulativeRms(spectrum.grid, per_source, total, final, units, tuple(warnings))


RmsLike = Union[float, np.ndarray, SpectrumSeries, CumulativeRms]


def refer_to_tc(values: RmsLike, system: SmallSignalSystem, node: Optional[str] = None) -> RmsLike:
    """Express node voltages in temporal-contrast log-e units.

    Voltages (and RMS curves) are divided by the node's DC signal gain, PSDs
    by its square.
    """
    if isinstance(values, (SpectrumSeries, CumulativeRms)):
        node = node or getattr(values, "node", None)
    node = node or "v_pr"
    gain = system.dc_gain(node)
    if not gain > 0:
        raise DomainError(f"Zero DC signal gain at {node}; cannot refer to TC units")

    if isinstance(values, SpectrumSeries):
        return values.scaled(1.0 / gain ** 2, units="tc^2/Hz")
    if isinstance(values, CumulativeRms):
        return CumulativeRms(
            grid=values.grid,
            per_source={k: v / gain for k, v in values.per_source.items()},
            total=values.total / gain,
            final_rms={k: v / gain for k, v in values.final_rms.items()},
            units="tc",
            warnings=values.warnings,
        )
    return values / gain


def _source_powers(spectrum: SpectrumSeries) -> Dict[str, float]:
    powers = {k: integrate(spectrum.f, v) for k, v in spectrum.per_source.items()}
    powers["photon"] = spectrum.photon_share * powers.get("pd", 0.0)
    powers["total"] = integrate(spectrum.f, spectrum.total)
    return powers


def photon_fraction(spectrum: SpectrumSeries) -> float:
    """Share of the integrated noise power that is photon shot noise"""
    p = _source_powers(spectrum)
    if not p["total"] > 0:
        raise DomainError("Total noise power is zero; photon fraction undefined")
    return p["photon"] / p["total"]


def shot_limit_ratio(spectrum: SpectrumSeries) -> float:
    """Total integrated noise power over photon shot noise power (>= 2 in this topology)"""
    p = _source_powers(spectrum)
    if not p["photon"] > 0:
        raise DomainError("Photon shot noise power is zero; ratio undefined")
    return p["total"] / p["photon"]


def noise_budget(
    system: SmallSignalSystem,
    grid: Optional[FrequencyGrid] = None,
    disabled: Iterable[str] = (),
) -> Dict[str, object]:
    """Per-source RMS at v_pr and v_sf in volts and TC units, plus limit metrics"""
    if grid is None:
        grid = FrequencyGrid.for_system(system)
    disabled = tuple(disabled)
    report: Dict[str, object] = {}
    warnings = []
    for node in ("v_pr", "v_sf"):
        spectrum = psd(system, node, grid, disabled)
        rms = cumulative_rms(spectrum)
        rms_tc = refer_to_tc(rms, system, node)
        report[node] = {
            "rms_v": rms.final_rms,
            "rms_tc": rms_tc.final_rms,
        }
        warnings.extend(rms.warnings)
        if node == "v_sf":
            report["photon_fraction"] = photon_fraction(spectrum)
            report["shot_limit_ratio"] = shot_limit_ratio(spectrum)
    report["warnings"] = sorted(set(warnings))
    return report

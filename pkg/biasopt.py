"""Bias sweeps, the bias recommendation rule and PSD calibration.

The sweep evaluates rate / bandwidth / noise metrics over a Cartesian bias
grid. The optimizer sets the SF bias from the required bandwidth and then
picks the smallest photoreceptor bias whose noise rate has settled onto the
high-bias plateau. The calibrator fits device parameters to a measured PSD.
"""

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.optimize
from pydantic import ValidationError

from config import (
    BiasConfig,
    DeviceParams,
    DomainError,
    DVSNoiseError,
    OperatingPoint,
    OptimizeConstraints,
    SweepConfig,
)
from event_core import predict_rate
from noise_psd import FrequencyGrid, cumulative_rms, photon_fraction, psd, refer_to_tc
from pixel_model import bandwidth_3db, build_system, lux_to_photocurrent, system_for

logger = logging.getLogger(__name__)

METRICS = ("rate", "bandwidth", "rms", "photon_fraction", "power")
SWEEP_COLUMNS = (
    "i_pd", "i_pr", "i_sf", "rate_hz", "bandwidth_hz", "rms_tc", "photon_fraction", "power_w",
)
# optimizer grid: 1 pA .. 10 nA, four points per decade
OPTIMIZE_I_PR_GRID = tuple(10 ** (-12 + k / 4) for k in range(17))

CALIBRATION_PARAMS = ("C_in", "C_out", "C_sf", "V_A", "kappa_fb", "kappa_n", "kappa_sf", "U_T")


def _check_grid(name: str, values: Sequence[float]) -> Tuple[float, ...]:
    values = tuple(float(v) for v in values)
    if not values:
        raise DomainError(f"{name} grid is empty")
    if any(not v > 0 for v in values):
        raise DomainError(f"{name} grid values must be positive")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise DomainError(f"{name} grid must be strictly increasing")
    return values


@dataclass(frozen=True)
class SweepSpec:
    I_pd: Tuple[float, ...]
    I_pr: Tuple[float, ...]
    I_sf: Tuple[float, ...]
    bias: BiasConfig = field(default_factory=BiasConfig)
    metrics: Tuple[str, ...] = METRICS
    lux: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "I_pd", _check_grid("I_pd", self.I_pd))
        object.__setattr__(self, "I_pr", _check_grid("I_pr", self.I_pr))
        object.__setattr__(self, "I_sf", _check_grid("I_sf", self.I_sf))
        unknown = set(self.metrics) - set(METRICS)
        if unknown:
            raise DomainError(f"Unknown sweep metrics: {sorted(unknown)}")
        if self.lux is not None and len(self.lux) != len(self.I_pd):
            raise DomainError("lux and I_pd grids must have the same length")

    @classmethod
    def from_config(
        cls,
        sweep: SweepConfig,
        bias: BiasConfig,
        params: DeviceParams,
        op_point: Optional[OperatingPoint] = None,
    ) -> "SweepSpec":
        """Build a spec from the config block; lux values take precedence over I_pd"""
        lux = None
        if sweep.lux:
            lux = tuple(sorted(sweep.lux))
            I_pd = tuple(lux_to_photocurrent(v, params) for v in lux)
        elif sweep.I_pd:
            I_pd = tuple(sweep.I_pd)
        elif op_point is not None:
            I_pd = (op_point.I_pd,)
        else:
            raise DomainError("Sweep needs I_pd or lux values, or an operating point")
        return cls(I_pd=I_pd, I_pr=tuple(sweep.I_pr), I_sf=tuple(sweep.I_sf), bias=bias,
                   metrics=tuple(sweep.metrics), lux=lux)


@dataclass
class SweepRecord:
    I_pd: float
    I_pr: float
    I_sf: float
    rate_hz: Optional[float] = None
    bandwidth_hz: Optional[float] = None
    rms_tc: Optional[float] = None
    photon_fraction: Optional[float] = None
    power_w: Optional[float] = None
    illuminance: Optional[float] = None
    error: Optional[str] = None

    def to_row(self) -> Dict[str, object]:
        return {
            "i_pd": self.I_pd,
            "i_pr": self.I_pr,
            "i_sf": self.I_sf,
            "rate_hz": self.rate_hz,
            "bandwidth_hz": self.bandwidth_hz,
            "rms_tc": self.rms_tc,
            "photon_fraction": self.photon_fraction,
            "power_w": self.power_w,
            "illuminance": self.illuminance,
            "error": self.error,
        }


def power(I_pd: float, I_pr: float, I_sf: float, params: DeviceParams) -> float:
    """Static pixel power V_dd * (I_pr + I_sf + I_pd) in watts"""
    return params.V_dd * (I_pr + I_sf + I_pd)


def evaluate_point(
    I_pd: float,
    I_pr: float,
    I_sf: float,
    bias: BiasConfig,
    params: DeviceParams,
    metrics: Iterable[str] = METRICS,
    disabled: Iterable[str] = (),
    illuminance: Optional[float] = None,
) -> SweepRecord:
    """All requested metrics at one grid point; model errors are stored in the record"""
    metrics = set(metrics)
    disabled = tuple(disabled)
    record = SweepRecord(I_pd=I_pd, I_pr=I_pr, I_sf=I_sf, illuminance=illuminance)
    point_bias = bias.model_copy(update={"I_pr": I_pr, "I_sf": I_sf})
    try:
        system = build_system(OperatingPoint(I_pd=I_pd), point_bias, params)
        if "rate" in metrics:
            record.rate_hz = predict_rate(system, point_bias, params, disabled=disabled).total_rate
        if "bandwidth" in metrics:
            record.bandwidth_hz = bandwidth_3db(system, "v_sf")
        if "rms" in metrics or "photon_fraction" in metrics:
            spectrum = psd(system, "v_sf", FrequencyGrid.for_system(system), disabled)
            if "rms" in metrics:
                record.rms_tc = refer_to_tc(cumulative_rms(spectrum), system, "v_sf").final_rms["total"]
            if "photon_fraction" in metrics:
                record.photon_fraction = photon_fraction(spectrum)
        if "power" in metrics:
            record.power_w = power(I_pd, I_pr, I_sf, params)
    except (DVSNoiseError, ValidationError) as e:
        logger.warning(f"Sweep point I_pd={I_pd:g} I_pr={I_pr:g} I_sf={I_sf:g} failed: {e}")
        record.error = f"{type(e).__name__}: {e}"
    return record


def sweep(
    spec: SweepSpec,
    params: DeviceParams,
    disabled: Iterable[str] = (),
    max_workers: Optional[int] = None,
) -> List[SweepRecord]:
    """Evaluate every (I_pd, I_pr, I_sf) point, ordered lexicographically by inputs"""
    disabled = tuple(disabled)
    lux_of = dict(zip(spec.I_pd, spec.lux)) if spec.lux else {}
    points = list(itertools.product(spec.I_pd, spec.I_pr, spec.I_sf))
    logger.info(f"Sweeping {len(points)} bias points")

    def run(point):
        I_pd, I_pr, I_sf = point
        return evaluate_point(I_pd, I_pr, I_sf, spec.bias, params, spec.metrics, disabled, lux_of.get(I_pd))

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        records = list(pool.map(run, points))

    failed = sum(1 for r in records if r.error)
    if failed:
        logger.warning(f"{failed} of {len(records)} sweep points failed")
    return records


def plateau_rate(I_pd: float, I_pr: float, I_sf: float, bias: BiasConfig, params: DeviceParams) -> float:
    """Noise rate with the photoreceptor-bias noise source removed"""
    record = evaluate_point(I_pd, I_pr, I_sf, bias, params, metrics=("rate",), disabled=("pr",))
    if record.error:
        raise DomainError(f"Plateau rate unavailable: {record.error}")
    return record.rate_hz


def plateau_rates(spec: SweepSpec, params: DeviceParams) -> List[Dict[str, float]]:
    """Plateau reference per (I_pd, I_sf), taken at the top of the I_pr grid"""
    rows = []
    top = spec.I_pr[-1]
    for I_pd, I_sf in itertools.product(spec.I_pd, spec.I_sf):
        rows.append({"i_pd": I_pd, "i_sf": I_sf, "i_pr": top,
                     "plateau_rate_hz": plateau_rate(I_pd, top, I_sf, spec.bias, params)})
    return rows


@dataclass
class BiasRecommendation:
    I_pr: float
    I_sf: float
    rate_hz: float
    bandwidth_hz: float
    power_w: float
    rationale: str
    feasible: bool = True
    binding_constraint: Optional[str] = None
    plateau_rate_hz: Optional[float] = None
    pr_bandwidth_hz: Optional[float] = None
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, object]:
        data = asdict(self)
        data["units"] = {"I_pr": "A", "I_sf": "A", "rate_hz": "Hz", "bandwidth_hz": "Hz", "power_w": "W"}
        return data


def sf_bias_for_bandwidth(f_pole: float, params: DeviceParams) -> float:
    """I_sf that puts the SF pole g_msf / (2 pi C_sf) at f_pole"""
    return 2 * math.pi * f_pole * params.C_sf * params.U_T / params.kappa_sf


def _settled_index(rates: Sequence[float], reference: float, slack: float) -> Optional[int]:
    """First index from which every rate stays within slack of the reference"""
    idx = None
    for k in range(len(rates) - 1, -1, -1):
        r = rates[k]
        if r is None or abs(r - reference) > slack * reference:
            break
        idx = k
    return idx


def optimize(
    op_point: OperatingPoint,
    constraints: OptimizeConstraints,
    params: DeviceParams,
    bias: Optional[BiasConfig] = None,
    I_pr_grid: Sequence[float] = OPTIMIZE_I_PR_GRID,
) -> BiasRecommendation:
    """Recommend (I_pr, I_sf) for an operating point under bandwidth and power limits"""
    bias = bias or BiasConfig()
    grid = _check_grid("I_pr", I_pr_grid)
    I_pd = op_point.I_pd

    # the photoreceptor alone caps the pixel bandwidth; its best case is at the top of the grid
    pr_system = system_for(op_point, bias, params, I_pr=grid[-1])
    pr_bandwidth = bandwidth_3db(pr_system, "v_pr")

    target = constraints.min_bandwidth * constraints.margin
    rationale = "sf-limited"
    if pr_bandwidth < target:
        rationale = "pr-limited"
        target = pr_bandwidth * constraints.margin
        logger.info(
            f"Photoreceptor bandwidth {pr_bandwidth:.3g} Hz is below the required "
            f"{constraints.min_bandwidth:.3g} Hz; minimizing both biases"
        )
    I_sf = sf_bias_for_bandwidth(target, params)

    records = [evaluate_point(I_pd, I_pr, I_sf, bias, params, metrics=("rate",)) for I_pr in grid]
    reference = plateau_rate(I_pd, grid[-1], I_sf, bias, params)
    k = _settled_index([r.rate_hz for r in records], reference, constraints.rate_slack)
    warnings = []
    if k is None:
        warnings.append("noise rate never settles within rate_slack of the plateau on the I_pr grid")
        k = len(grid) - 1
    I_pr = grid[k]

    if power(I_pd, I_pr, I_sf, params) > constraints.max_power:
        affordable = [p for p in grid if power(I_pd, p, I_sf, params) <= constraints.max_power]
        if not affordable:
            final = evaluate_point(I_pd, grid[0], I_sf, bias, params)
            logger.warning(f"No bias on the grid meets max_power={constraints.max_power:g} W")
            return BiasRecommendation(
                I_pr=grid[0], I_sf=I_sf, rate_hz=final.rate_hz, bandwidth_hz=final.bandwidth_hz,
                power_w=final.power_w, rationale="power-capped", feasible=False,
                binding_constraint="max_power", plateau_rate_hz=reference,
                pr_bandwidth_hz=pr_bandwidth, warnings=warnings,
            )
        I_pr = affordable[-1]
        rationale = "power-capped"

    final = evaluate_point(I_pd, I_pr, I_sf, bias, params)
    if final.error:
        raise DomainError(f"Recommended point cannot be evaluated: {final.error}")

    feasible, binding = True, None
    if final.bandwidth_hz < constraints.min_bandwidth:
        feasible, binding = False, "min_bandwidth"
    elif final.power_w > constraints.max_power:
        feasible, binding = False, "max_power"

    logger.info(
        f"Recommendation: I_pr={I_pr:.3g} A, I_sf={I_sf:.3g} A ({rationale}), "
        f"rate={final.rate_hz:.3g} Hz, bandwidth={final.bandwidth_hz:.3g} Hz"
    )
    return BiasRecommendation(
        I_pr=I_pr, I_sf=I_sf, rate_hz=final.rate_hz, bandwidth_hz=final.bandwidth_hz,
        power_w=final.power_w, rationale=rationale, feasible=feasible, binding_constraint=binding,
        plateau_rate_hz=reference, pr_bandwidth_hz=pr_bandwidth, warnings=warnings,
    )


@dataclass
class CalibrationResult:
    params: DeviceParams
    values: Dict[str, float]
    residual: float
    converged: bool
    evaluations: int
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, object]:
        return {
            "values": self.values,
            "residual": self.residual,
            "converged": self.converged,
            "evaluations": self.evaluations,
            "warnings": self.warnings,
            "params": self.params.model_dump(),
        }


class _PsdObjective:
    """Log10-PSD residuals as a function of log-parameters"""

    def __init__(self, f, measured, known: DeviceParams, free, op_point, bias, node):
        self.f = FrequencyGrid(f)
        self.log_measured = np.log10(measured)
        self.known = known
        self.free = free
        self.op_point = op_point
        self.bias = bias
        self.node = node
        self.evaluations = 0

    def params_for(self, x: np.ndarray) -> DeviceParams:
        update = {name: float(math.exp(v)) for name, v in zip(self.free, x)}
        return self.known.model_copy(update=update)

    def residuals(self, x: np.ndarray) -> np.ndarray:
        self.evaluations += 1
        try:
            params = DeviceParams(**self.params_for(x).model_dump())
            system = build_system(self.op_point, self.bias, params)
            model = psd(system, self.node, self.f).total
        except (DVSNoiseError, ValidationError):
            return np.full(len(self.f), 1e3)
        with np.errstate(divide="ignore"):
            r = np.log10(model) - self.log_measured
        return np.where(np.isfinite(r), r, 1e3)

    def cost(self, x: np.ndarray) -> float:
        r = self.residuals(x)
        return float(np.mean(r ** 2))


def _coordinate_descent(objective: _PsdObjective, x0: np.ndarray, step: float, budget: int, tol: float):
    x = x0.copy()
    best = objective.cost(x)
    h = np.full(len(x), step)
    used = 1
    while used < budget and np.max(h) > tol:
        for i in range(len(x)):
            improved = False
            for direction in (1.0, -1.0):
                trial = x.copy()
                trial[i] += direction * h[i]
                c = objective.cost(trial)
                used += 1
                if c < best:
                    x, best, improved = trial, c, True
                    h[i] *= 1.5
                    break
            if not improved:
                h[i] *= 0.5
    return x, best, used


def calibrate(
    measured: Sequence[Tuple[float, float]],
    known: DeviceParams,
    free: Iterable[str],
    op_point: OperatingPoint,
    bias: Optional[BiasConfig] = None,
    node: str = "v_pr",
    start_factors: Sequence[float] = (1.0, 0.3, 3.0),
    budget: int = 3000,
    max_workers: Optional[int] = None,
) -> CalibrationResult:
    """Fit free device parameters to a measured PSD (mean squared log10 error)"""
    free = tuple(sorted(set(free)))
    if not free:
        raise DomainError("Calibration needs at least one free parameter")
    unknown = set(free) - set(CALIBRATION_PARAMS)
    if unknown:
        raise DomainError(f"Cannot fit {sorted(unknown)}; choose from {', '.join(CALIBRATION_PARAMS)}")

    data = np.asarray(measured, dtype=float)
    if data.ndim != 2 or data.shape[1] != 2 or data.shape[0] < 8:
        raise DomainError("Calibration needs at least 8 (f_hz, psd_v2hz) points")
    order = np.argsort(data[:, 0])
    f, S = data[order, 0], data[order, 1]
    if np.any(f <= 0) or np.any(S <= 0):
        raise DomainError("Frequencies and PSD values must be positive")

    warnings = []
    span = math.log10(f[-1] / f[0])
    if span < 2:
        warnings.append(f"data spans only {span:.2f} decades; fitted parameters may be poorly conditioned")

    bias = bias or BiasConfig()
    x_init = np.log([getattr(known, name) for name in free])

    def run_start(factor: float):
        objective = _PsdObjective(f, S, known, free, op_point, bias, node)
        x, c, _ = _coordinate_descent(objective, x_init + math.log(factor), step=0.5, budget=budget, tol=1e-6)
        return x, c, objective.evaluations

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        starts = list(pool.map(run_start, start_factors))

    evaluations = sum(s[2] for s in starts)
    # ties go to the earlier start
    x_best, c_best, _ = min(starts, key=lambda s: s[1])

    objective = _PsdObjective(f, S, known, free, op_point, bias, node)
    refined = scipy.optimize.least_squares(objective.residuals, x_best, method="lm", xtol=1e-12, ftol=1e-12)
    evaluations += objective.evaluations
    c_refined = float(np.mean(refined.fun ** 2))
    if c_refined <= c_best:
        x_best, c_best = refined.x, c_refined

    converged = bool(refined.success) or c_best < 1e-10
    if not converged:
        warnings.append(f"refinement did not converge: {refined.message}")

    fitted = DeviceParams(**objective.params_for(x_best).model_dump())
    values = {name: getattr(fitted, name) for name in free}
    for w in warnings:
        logger.warning(f"calibrate: {w}")
    logger.info(f"Calibrated {values} with residual {c_best:.3g}")
    return CalibrationResult(
        params=fitted, values=values, residual=c_best, converged=converged,
        evaluations=evaluations, warnings=warnings,
    )

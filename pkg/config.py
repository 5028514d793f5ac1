"""Configuration, parameter types and errors for dvs-noise-lab.

Device constants, user biases and run settings are pydantic models so a JSON
config file is validated field by field; unknown keys are rejected.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

__version__ = "1.0.0"

Q_E = 1.602176634e-19

DEFAULT_CONFIG_PATH = os.getenv("DVSNOISE_CONFIG")
DEFAULT_OUT_DIR = os.getenv("DVSNOISE_OUT_DIR", "./out")
LOG_LEVEL = os.getenv("DVSNOISE_LOG_LEVEL", "INFO")


class DVSNoiseError(Exception):
    """Base class for all errors raised by the noise model"""


class ConfigError(DVSNoiseError):
    """Malformed, incomplete or inconsistent configuration"""


class DomainError(DVSNoiseError):
    """Physically invalid input (non-positive current, zero gain, ...)"""


class ModelError(DVSNoiseError):
    """The model is not applicable (unstable system, divergent moments)"""


class NumericalError(DVSNoiseError):
    """Singular matrices or non-finite state"""


class RangeError(DVSNoiseError):
    """A searched quantity lies outside the admissible range"""


class AccuracyError(DVSNoiseError):
    """Input too short or too sparse to reach the stated accuracy"""


class _Frozen(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DeviceParams(_Frozen):
    """Fixed silicon/process constants of the pixel"""

    U_T: float = Field(0.025, gt=0)
    kappa_fb: float = Field(0.7, gt=0, le=1)
    kappa_n: float = Field(0.7, gt=0, le=1)
    kappa_sf: float = Field(0.4, gt=0, le=1)
    C_in: float = Field(90e-15, gt=0)
    C_out: float = Field(40e-15, gt=0)
    C_sf: float = Field(170e-15, gt=0)
    # fitted well below the long-channel 20 V so the I_pr noise is filtered out at v_sf by 10 nA;
    # costs about 7% of v_pr DC gain against U_T/kappa_fb
    V_A: float = Field(0.7, gt=0)
    q_e: float = Field(Q_E, gt=0)
    I_leak: float = Field(1e-17, ge=0)
    lux_to_amps: float = Field(25e-15, gt=0)
    # supplements: leak charge, event path bandwidth, SF gain, supply
    C_leak: float = Field(200e-15, gt=0)
    f_ca: float = Field(30.0, gt=0)
    A_sf: float = Field(1.0, gt=0)
    V_dd: float = Field(1.8, gt=0)


class BiasConfig(_Frozen):
    """User-controllable currents and event pipeline settings"""

    I_pr: float = Field(3e-9, gt=0)
    I_sf: float = Field(10e-12, gt=0)
    theta_on: float = Field(0.118, gt=0)
    theta_off: float = Field(0.118, gt=0)
    delta_refr: float = Field(1e-3, ge=0)


class OperatingPoint(_Frozen):
    """DC photocurrent, given directly or derived from illuminance"""

    I_pd: float = Field(gt=0)
    illuminance: Optional[float] = Field(None, gt=0)

    @classmethod
    def from_lux(cls, illuminance: float, params: DeviceParams) -> "OperatingPoint":
        from pixel_model import lux_to_photocurrent

        return cls(I_pd=lux_to_photocurrent(illuminance, params), illuminance=illuminance)


class SimConfig(_Frozen):
    """Monte-Carlo run settings"""

    duration: float = Field(10.0, gt=0)
    dt: Optional[float] = Field(None, gt=0)
    seed: int = Field(0, ge=0, lt=2**64)
    drive_mode: Literal["gaussian-white", "poisson-photon"] = "gaussian-white"
    record_traces: bool = False
    stimulus: Optional[List[Tuple[float, float]]] = None
    sources: Tuple[str, ...] = ("pd", "pr", "sf")
    warmup_tau: float = Field(5.0, ge=0)

    @model_validator(mode="after")
    def _check(self) -> "SimConfig":
        if self.dt is not None and self.duration < self.dt:
            raise ValueError("duration must be at least one time step")
        unknown = set(self.sources) - {"pd", "pr", "sf"}
        if unknown:
            raise ValueError(f"unknown noise sources: {sorted(unknown)}")
        if self.stimulus:
            times = [t for t, _ in self.stimulus]
            if any(b < a for a, b in zip(times, times[1:])):
                raise ValueError("stimulus times must be non-decreasing")
        return self


class SweepConfig(_Frozen):
    """Grid settings for the bias sweep command"""

    I_pd: Optional[List[float]] = None
    lux: Optional[List[float]] = None
    I_pr: List[float] = Field(default_factory=lambda: [10 ** (-12 + k / 4) for k in range(17)])
    I_sf: List[float] = Field(default_factory=lambda: [10e-12])
    metrics: Tuple[str, ...] = ("rate", "bandwidth", "rms", "photon_fraction", "power")


class OptimizeConstraints(_Frozen):
    """Constraints for the bias optimizer"""

    min_bandwidth: float = Field(1.0, gt=0)
    max_power: float = Field(1e-6, gt=0)
    rate_slack: float = Field(0.10, gt=0)
    margin: float = Field(1.2, gt=0)


class OutputConfig(_Frozen):
    node: Literal["v_in", "v_pr", "v_sf"] = "v_pr"
    points_per_decade: int = Field(64, ge=16)
    upper_factor: float = Field(1000.0, gt=1)


class PixelConfig(_Frozen):
    """Top-level run configuration as stored in a JSON file"""

    device: DeviceParams = Field(default_factory=DeviceParams)
    bias: BiasConfig = Field(default_factory=BiasConfig)
    operating_point: OperatingPoint
    simulation: SimConfig = Field(default_factory=SimConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    constraints: OptimizeConstraints = Field(default_factory=OptimizeConstraints)
    output: OutputConfig = Field(default_factory=OutputConfig)


PARAMETER_SETS: Dict[str, Dict[str, Any]] = {
    "davis346-default": {},
}


def device_params(name: str = "davis346-default", **overrides: Any) -> DeviceParams:
    """Return a named parameter set with optional field overrides"""
    if name not in PARAMETER_SETS:
        raise ConfigError(f"Unknown parameter set '{name}'. Known: {', '.join(PARAMETER_SETS)}")
    return DeviceParams(**{**PARAMETER_SETS[name], **overrides})


def default_config(illuminance: float = 0.1) -> PixelConfig:
    """Reference-conditions config: 0.1 lux, I_pr = 3 nA, I_sf = 10 pA"""
    params = device_params()
    return PixelConfig(
        device=params,
        operating_point=OperatingPoint.from_lux(illuminance, params),
    )


def _describe_validation_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        key = ".".join(str(p) for p in err.get("loc", ()))
        if err.get("type") == "missing":
            parts.append(f"missing key '{key}'")
        elif err.get("type") == "extra_forbidden":
            parts.append(f"unknown key '{key}'")
        else:
            parts.append(f"invalid value for '{key}': {err.get('msg')}")
    return "; ".join(parts)


def parse_config(data: Dict[str, Any]) -> PixelConfig:
    """Validate a decoded config mapping"""
    data = dict(data)
    op = data.get("operating_point")
    # illuminance alone is enough; the photocurrent follows from the device
    if isinstance(op, dict) and "I_pd" not in op and "illuminance" in op:
        try:
            params = DeviceParams(**data.get("device", {}))
            data["operating_point"] = {**op, "I_pd": op["illuminance"] * params.lux_to_amps}
        except ValidationError:
            pass
    try:
        return PixelConfig(**data)
    except ValidationError as e:
        raise ConfigError(_describe_validation_error(e)) from e


def load_config(path: Optional[str] = None) -> PixelConfig:
    """Load and validate a JSON config file"""
    path = path or DEFAULT_CONFIG_PATH
    if not path:
        logger.info("No config file given, using reference-conditions defaults")
        return default_config()

    config_path = Path(path)
    try:
        text = config_path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e

    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e

    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")

    config = parse_config(data)
    logger.info(f"Loaded config from {path}")
    return config


def config_snapshot(config: PixelConfig) -> Dict[str, Any]:
    """JSON-ready dump used in run manifests"""
    return config.model_dump(mode="json")

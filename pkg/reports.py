"""CSV/JSON artifact writers and run manifests.

Every file is written to a temporary sibling and renamed into place.
"""

import csv
import io
import json
import logging
import os
import tempfile
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from config import PixelConfig, __version__, config_snapshot
from noise_psd import CumulativeRms, SpectrumSeries
from pixel_model import SOURCES

logger = logging.getLogger(__name__)

PSD_COLUMNS = ("f_hz", "psd_total") + tuple(f"psd_{s}" for s in SOURCES)
RMS_COLUMNS = ("f_hz", "cum_rms_total") + tuple(f"cum_rms_{s}" for s in SOURCES)
TF_COLUMNS = ("f_hz", "magnitude", "phase_deg", "real", "imag", "closed_form_magnitude")
EVENT_COLUMNS = ("t_seconds", "polarity")
TRACE_COLUMNS = ("t_seconds", "v_pr", "v_sf")
CALIBRATION_COLUMNS = ("f_hz", "psd_v2hz")


def _json_default(value: Any):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, complex):
        return [value.real, value.imag]
    if isinstance(value, (set, tuple)):
        return list(value)
    if isinstance(value, datetime):
        return value.isoformat()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def to_json(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True, default=_json_default)


def atomic_write_text(path: Path, text: str) -> Path:
    """Write text to path via a temporary file in the same directory"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.debug(f"Wrote {path}")
    return path


def _cell(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float):
        return f"{value:.9e}"
    return value


def csv_text(columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    return atomic_write_text(path, csv_text(columns, rows))


def write_json(path: Path, data: Any) -> Path:
    return atomic_write_text(path, to_json(data) + "\n")


def spectrum_rows(spectrum: SpectrumSeries) -> List[List[float]]:
    cols = [spectrum.f, spectrum.total] + [spectrum.per_source[s] for s in SOURCES]
    return np.column_stack(cols).tolist()


def rms_rows(rms: CumulativeRms) -> List[List[float]]:
    cols = [rms.grid.points, rms.total] + [rms.per_source[s] for s in SOURCES]
    return np.column_stack(cols).tolist()


def tf_rows(f: np.ndarray, h: np.ndarray, closed: Optional[np.ndarray] = None) -> List[List[float]]:
    closed_mag = np.abs(closed) if closed is not None else np.full(len(f), np.nan)
    return np.column_stack([
        f, np.abs(h), np.degrees(np.angle(h)), h.real, h.imag, closed_mag,
    ]).tolist()


def read_calibration_csv(path: Path) -> List[List[float]]:
    """Read (f_hz, psd_v2hz) pairs; the header row is required"""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = set(CALIBRATION_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [[float(row["f_hz"]), float(row["psd_v2hz"])] for row in reader]


def build_manifest(
    command: str,
    config: PixelConfig,
    artifacts: Sequence[Path] = (),
    seeds: Sequence[int] = (),
    warnings: Sequence[str] = (),
    extra: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config": config_snapshot(config),
        "seeds": list(seeds),
        "artifacts": [str(p) for p in artifacts],
        "warnings": list(warnings),
        "created_at": datetime.utcnow().isoformat(),
    }
    if extra:
        manifest.update(extra)
    return manifest


def write_manifest(out_dir: Path, manifest: Dict[str, Any]) -> Path:
    return write_json(Path(out_dir) / f"{manifest['command']}_manifest.json", manifest)

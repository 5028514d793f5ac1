from fastapi import FastAPI, HTTPException, Depends, Query
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field
from contextlib import contextmanager
from typing import List, Dict, Any, Literal, Optional, Tuple
import logging
import os
from dotenv import load_dotenv

from config import (
    ConfigError,
    DomainError,
    DVSNoiseError,
    LOG_LEVEL,
    PixelConfig,
    __version__,
    default_config,
    parse_config,
)
from pixel_model import SIGNAL, build_system, pole_report, signal_tf_closed_form, transfer_fn
from noise_psd import FrequencyGrid, cumulative_rms, noise_budget, psd, refer_to_tc
from event_core import event_path_stats, leak_rate, rice_rate
from biasopt import SweepSpec, calibrate, optimize, plateau_rates, sweep
from timesim import simulate
from database import get_db, db_manager
import reports

# Load environment variables
load_dotenv()

# Configure logging
logging.basicConfig(level=getattr(logging, LOG_LEVEL.upper(), logging.INFO))
logger = logging.getLogger(__name__)

NodeName = Literal["v_in", "v_pr", "v_sf"]

app = FastAPI(title="DVS Noise Lab", version=__version__)

app.add_middleware(
    CORSMiddleware,
    allow_origins=os.getenv("DVSNOISE_CORS_ORIGINS", "http://localhost:8000").split(","),
    allow_methods=["*"],
    allow_headers=["*"],
)


class CalibrateRequest(BaseModel):
    config: Dict[str, Any] = Field(default_factory=dict)
    measured: List[Tuple[float, float]]
    free: List[str]
    node: str = "v_pr"


def _config(body: Optional[Dict[str, Any]]) -> PixelConfig:
    """Request body as a PixelConfig; an empty body means the built-in defaults"""
    if not body:
        return default_config()
    return parse_config(body)


def _grid(config: PixelConfig, system) -> FrequencyGrid:
    return FrequencyGrid.for_system(
        system,
        points_per_decade=config.output.points_per_decade,
        upper_factor=config.output.upper_factor,
    )


@contextmanager
def _http_errors(command: str):
    try:
        yield
    except (ConfigError, DomainError) as e:
        logger.warning(f"{command}: rejected request: {str(e)}")
        raise HTTPException(status_code=422, detail={"error": type(e).__name__, "message": str(e)})
    except DVSNoiseError as e:
        logger.error(f"{command} failed: {str(e)}")
        raise HTTPException(status_code=500, detail={"error": type(e).__name__, "message": str(e)})


def _record(command: str, config: PixelConfig, warnings=(), seeds=(), sweep_rows=()):
    manifest = reports.build_manifest(command, config, seeds=seeds, warnings=warnings)
    manifest["source"] = "api"
    db_manager.record_run(manifest, sweep_rows)


@app.post("/api/tf")
def api_tf(
    body: Optional[Dict[str, Any]] = None,
    node: NodeName = "v_pr",
    source: str = Query(SIGNAL),
):
    """Transfer function from an injection point (or the light signal) to a node"""
    with _http_errors("tf"):
        config = _config(body)
        system = build_system(config.operating_point, config.bias, config.device)
        grid = _grid(config, system)
        h = transfer_fn(system, source, node, grid.points)
        closed = None
        if source == SIGNAL and node in ("v_pr", "v_sf"):
            closed = signal_tf_closed_form(config.operating_point, config.bias, config.device, node)
        _record("tf", config)
        return {
            "node": node,
            "source": source,
            "f_hz": grid.points.tolist(),
            "magnitude": abs(h).tolist(),
            "poles": pole_report(system, closed),
        }


@app.post("/api/psd")
def api_psd(
    body: Optional[Dict[str, Any]] = None,
    node: NodeName = "v_pr",
    disable: List[str] = Query([]),
):
    """Per-source noise PSD at a node"""
    with _http_errors("psd"):
        config = _config(body)
        system = build_system(config.operating_point, config.bias, config.device)
        spectrum = psd(system, node, _grid(config, system), disable)
        _record("psd", config)
        return {
            "node": node,
            "units": spectrum.units,
            "f_hz": spectrum.f.tolist(),
            "psd_total": spectrum.total.tolist(),
            **{f"psd_{k}": v.tolist() for k, v in spectrum.per_source.items()},
        }


@app.post("/api/rms")
def api_rms(
    body: Optional[Dict[str, Any]] = None,
    node: NodeName = "v_pr",
    disable: List[str] = Query([]),
):
    """Final RMS per source at a node plus the noise budget"""
    with _http_errors("rms"):
        config = _config(body)
        system = build_system(config.operating_point, config.bias, config.device)
        grid = _grid(config, system)
        rms = cumulative_rms(psd(system, node, grid, disable))
        budget = noise_budget(system, grid, disable)
        _record("rms", config, warnings=budget["warnings"])
        return {
            "node": node,
            "rms_v": rms.final_rms,
            "rms_tc": refer_to_tc(rms, system, node).final_rms,
            "budget": budget,
        }


@app.post("/api/rate")
def api_rate(
    body: Optional[Dict[str, Any]] = None,
    reference: Literal["fixed", "renewal"] = "fixed",
    disable: List[str] = Query([]),
):
    """Predicted noise and leak event rates"""
    with _http_errors("rate"):
        config = _config(body)
        system = build_system(config.operating_point, config.bias, config.device)
        stats = event_path_stats(system, _grid(config, system), disable)
        leak = leak_rate(config.device, config.bias, system)
        prediction = rice_rate(stats, config.bias, reference=reference, leak_rate=leak)
        _record("rate", config)
        return prediction.to_dict()


@app.post("/api/sweep")
def api_sweep(body: Optional[Dict[str, Any]] = None):
    """Metrics over the configured bias grid"""
    with _http_errors("sweep"):
        config = _config(body)
        spec = SweepSpec.from_config(config.sweep, config.bias, config.device, config.operating_point)
        rows = [r.to_row() for r in sweep(spec, config.device)]
        _record("sweep", config, sweep_rows=rows)
        return {"records": rows, "plateau": plateau_rates(spec, config.device)}


@app.post("/api/optimize")
def api_optimize(body: Optional[Dict[str, Any]] = None):
    """Bias recommendation for the configured operating point and constraints"""
    with _http_errors("optimize"):
        config = _config(body)
        rec = optimize(config.operating_point, config.constraints, config.device, config.bias)
        _record("optimize", config, warnings=rec.warnings)
        return rec.to_dict()


@app.post("/api/calibrate")
def api_calibrate(request: CalibrateRequest):
    """Fit device parameters to measured PSD points"""
    with _http_errors("calibrate"):
        config = _config(request.config)
        fit = calibrate(
            request.measured, config.device, request.free, config.operating_point, config.bias,
            node=request.node,
        )
        _record("calibrate", config, warnings=fit.warnings)
        return fit.to_dict()


@app.post("/api/simulate")
def api_simulate(
    body: Optional[Dict[str, Any]] = None,
    max_events: int = Query(10000, ge=0),
):
    """Seeded Monte-Carlo run; returns the summary and the first max_events events"""
    with _http_errors("simulate"):
        config = _config(body)
        system = build_system(config.operating_point, config.bias, config.device)
        run = simulate(system, config.bias, config.device, config.simulation)
        _record("simulate", config, seeds=[config.simulation.seed])
        return {
            "summary": run.summary,
            "events": [{"t_seconds": t, "polarity": p} for t, p in run.event_rows()[:max_events]],
            "truncated": len(run.events) > max_events,
        }


@app.get("/api/runs")
async def get_runs(
    limit: int = Query(50, ge=1, le=1000),
    command: Optional[str] = None,
    registry=Depends(get_db),
):
    """Recorded run manifests, newest first"""
    try:
        return registry.list_runs(limit=limit, command=command)
    except Exception as e:
        logger.error(f"Error listing runs: {str(e)}")
        raise HTTPException(status_code=500, detail=str(e))


@app.get("/api/runs/{run_id}")
async def get_run(run_id: int, registry=Depends(get_db)):
    run = registry.get_run(run_id)
    if run is None:
        raise HTTPException(status_code=404, detail="Run not found")
    return run


@app.get("/health")
async def health_check():
    """Health check endpoint"""
    return {"status": "healthy", "service": "DVS Noise Lab", "version": __version__}


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=int(os.getenv("PORT", "8000")))

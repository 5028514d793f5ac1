"""Command-line interface: psd, rms, tf, rate, sweep, simulate, optimize, calibrate.

Every command reads a JSON config (or the built-in defaults), writes its
artifacts atomically to --out and lists them in a run manifest.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

import reports
from biasopt import SWEEP_COLUMNS, SweepSpec, calibrate, optimize, plateau_rates, sweep
from config import (
    DEFAULT_OUT_DIR,
    LOG_LEVEL,
    ConfigError,
    DVSNoiseError,
    PixelConfig,
    __version__,
    load_config,
)
from event_core import event_path_stats, leak_rate, rice_rate
from noise_psd import FrequencyGrid, cumulative_rms, noise_budget, psd, refer_to_tc
from pixel_model import NODES, SIGNAL, SOURCES, build_system, pole_report, signal_tf_closed_form, transfer_fn
from timesim import simulate

logger = logging.getLogger(__name__)

COMMANDS = ("psd", "rms", "tf", "rate", "sweep", "simulate", "optimize", "calibrate")


class CommandResult:
    """Artifacts, seeds and warnings produced by one command"""

    def __init__(self, out_dir: Path, fmt: str):
        self.out_dir = out_dir
        self.fmt = fmt
        self.artifacts: List[Path] = []
        self.seeds: List[int] = []
        self.warnings: List[str] = []
        self.sweep_rows: List[Dict[str, Any]] = []
        self.summary: Dict[str, Any] = {}

    def table(self, name: str, columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
        if self.fmt == "json":
            data = [dict(zip(columns, row)) for row in rows]
            path = reports.write_json(self.out_dir / f"{name}.json", data)
        else:
            path = reports.write_csv(self.out_dir / f"{name}.csv", columns, rows)
        self.artifacts.append(path)
        return path

    def document(self, name: str, data: Any) -> Path:
        path = reports.write_json(self.out_dir / f"{name}.json", data)
        self.artifacts.append(path)
        return path


def _system(config: PixelConfig):
    return build_system(config.operating_point, config.bias, config.device)


def _grid(config: PixelConfig, system) -> FrequencyGrid:
    return FrequencyGrid.for_system(
        system,
        points_per_decade=config.output.points_per_decade,
        upper_factor=config.output.upper_factor,
    )


def cmd_psd(config: PixelConfig, args, result: CommandResult):
    system = _system(config)
    node = config.output.node
    spectrum = psd(system, node, _grid(config, system), args.disable)
    result.table(f"psd_{node}", reports.PSD_COLUMNS, reports.spectrum_rows(spectrum))
    result.summary = {"node": node, "points": len(spectrum.grid)}


def cmd_rms(config: PixelConfig, args, result: CommandResult):
    system = _system(config)
    node = config.output.node
    grid = _grid(config, system)
    rms = cumulative_rms(psd(system, node, grid, args.disable))
    if args.tc:
        rms = refer_to_tc(rms, system, node)
    result.warnings.extend(rms.warnings)
    result.table(f"rms_{node}", reports.RMS_COLUMNS, reports.rms_rows(rms))
    budget = noise_budget(system, grid, args.disable)
    result.warnings.extend(budget["warnings"])
    result.document("noise_budget", budget)
    result.summary = {"node": node, "final_rms": rms.final_rms, "units": rms.units}


def cmd_tf(config: PixelConfig, args, result: CommandResult):
    system = _system(config)
    node = config.output.node
    grid = _grid(config, system)
    h = transfer_fn(system, args.source, node, grid.points)
    closed = None
    closed_tf = None
    if args.source == SIGNAL and node in ("v_pr", "v_sf"):
        closed_tf = signal_tf_closed_form(config.operating_point, config.bias, config.device, node)
        closed = closed_tf.evaluate(grid.points)
    result.table(f"tf_{args.source}_{node}", reports.TF_COLUMNS, reports.tf_rows(grid.points, h, closed))
    result.document("poles", pole_report(system, closed_tf))
    dc = float(abs(transfer_fn(system, args.source, node, 0.0)))
    result.summary = {"node": node, "source": args.source, "dc_gain": dc}


def cmd_rate(config: PixelConfig, args, result: CommandResult):
    system = _system(config)
    stats = event_path_stats(system, _grid(config, system), args.disable)
    leak = leak_rate(config.device, config.bias, system)
    prediction = rice_rate(stats, config.bias, reference=args.reference, leak_rate=leak)
    result.document("rate", prediction.to_dict())
    result.summary = {"total_rate": prediction.total_rate, "leak_rate": leak}


def cmd_sweep(config: PixelConfig, args, result: CommandResult):
    spec = SweepSpec.from_config(config.sweep, config.bias, config.device, config.operating_point)
    records = sweep(spec, config.device, args.disable, max_workers=args.workers)
    rows = [r.to_row() for r in records]
    columns = SWEEP_COLUMNS + ("illuminance", "error")
    result.table("sweep", columns, [[row[c] for c in columns] for row in rows])
    result.document("sweep_plateau", plateau_rates(spec, config.device))
    result.sweep_rows = rows
    failed = [r for r in records if r.error]
    if failed:
        result.warnings.append(f"{len(failed)} sweep points failed; see the error column")
    result.summary = {"points": len(records), "failed": len(failed)}


def cmd_simulate(config: PixelConfig, args, result: CommandResult):
    sim = config.simulation
    system = _system(config)
    run = simulate(system, config.bias, config.device, sim, args.disable)
    result.seeds.append(sim.seed)
    result.table("events", reports.EVENT_COLUMNS, run.event_rows())
    if run.traces is not None:
        traces = run.traces
        rows = np.column_stack([traces[c] for c in reports.TRACE_COLUMNS]).tolist()
        result.table("traces", reports.TRACE_COLUMNS, rows)
    result.document("simulation_summary", run.summary)
    result.summary = {"events": len(run.events), "noise_rate": run.summary["noise_rate"]}


def cmd_optimize(config: PixelConfig, args, result: CommandResult):
    rec = optimize(config.operating_point, config.constraints, config.device, config.bias)
    result.warnings.extend(rec.warnings)
    result.document("recommendation", rec.to_dict())
    result.summary = {"rationale": rec.rationale, "feasible": rec.feasible, "I_pr": rec.I_pr, "I_sf": rec.I_sf}


def cmd_calibrate(config: PixelConfig, args, result: CommandResult):
    try:
        data = reports.read_calibration_csv(Path(args.data))
    except (OSError, ValueError) as e:
        raise DVSNoiseError(f"Cannot read calibration data: {e}") from e
    free = [name.strip() for name in args.free.split(",") if name.strip()]
    fit = calibrate(data, config.device, free, config.operating_point, config.bias, node=config.output.node)
    result.warnings.extend(fit.warnings)
    result.document("calibration", fit.to_dict())
    result.summary = {"values": fit.values, "residual": fit.residual, "converged": fit.converged}


HANDLERS: Dict[str, Callable] = {
    "psd": cmd_psd,
    "rms": cmd_rms,
    "tf": cmd_tf,
    "rate": cmd_rate,
    "sweep": cmd_sweep,
    "simulate": cmd_simulate,
    "optimize": cmd_optimize,
    "calibrate": cmd_calibrate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults to $DVSNOISE_CONFIG or built-in defaults)")
    common.add_argument("--out", default=DEFAULT_OUT_DIR, help="output directory")
    common.add_argument("--seed", type=int, help="RNG seed (unsigned 64-bit)")
    common.add_argument("--format", choices=("csv", "json"), default="csv", help="table output format")
    common.add_argument("--error-json", action="store_true", help="print errors as JSON on stdout")
    common.add_argument("--log-level", default=LOG_LEVEL)
    common.add_argument("--no-registry", action="store_true", help="do not record the run in the database")
    common.add_argument("--disable", action="append", default=[], metavar="SOURCE",
                        help="ablate a noise source (pd, pr, sf, photon, mfb); repeatable")

    parser = argparse.ArgumentParser(prog="dvs-noise", description="DVS pixel noise model")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("psd", parents=[common], help="per-source noise PSD at a node")
    p.add_argument("--node", choices=NODES)

    p = sub.add_parser("rms", parents=[common], help="cumulative RMS noise and noise budget")
    p.add_argument("--node", choices=NODES)
    p.add_argument("--tc", action="store_true", help="refer the RMS curve to TC log-e units")

    p = sub.add_parser("tf", parents=[common], help="transfer function to a node")
    p.add_argument("--node", choices=NODES)
    p.add_argument("--source", choices=(SIGNAL,) + SOURCES, default=SIGNAL)

    p = sub.add_parser("rate", parents=[common], help="predicted noise and leak event rates")
    p.add_argument("--reference", choices=("fixed", "renewal"), default="fixed")

    p = sub.add_parser("sweep", parents=[common], help="metrics over a bias grid")
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("simulate", parents=[common], help="Monte-Carlo simulation")
    p.add_argument("--duration", type=float)
    p.add_argument("--traces", action="store_true", help="also write v_pr/v_sf traces")

    sub.add_parser("optimize", parents=[common], help="recommend I_pr and I_sf")

    p = sub.add_parser("calibrate", parents=[common], help="fit device parameters to a PSD")
    p.add_argument("--data", required=True, help="CSV with columns f_hz, psd_v2hz")
    p.add_argument("--free", required=True, help="comma-separated parameter names, e.g. C_in,C_out")
    p.add_argument("--node", choices=NODES)

    return parser


# options without a config field; recorded next to the snapshot in the manifest
RECORDED_ARGUMENTS = ("disable", "reference", "source", "tc", "free", "data", "workers")


def _updated(model, update: Dict[str, Any]):
    try:
        return type(model).model_validate({**model.model_dump(), **update})
    except ValidationError as e:
        raise ConfigError(f"invalid command-line override: {e.errors()[0].get('msg')}") from e


def resolve_config(config: PixelConfig, args) -> PixelConfig:
    """Fold command-line overrides into the config the manifest records"""
    seed = args.seed
    if seed is not None and not 0 <= seed < 2 ** 64:
        raise DVSNoiseError(f"seed must be an unsigned 64-bit integer, got {seed}")

    sim: Dict[str, Any] = {}
    if seed is not None:
        sim["seed"] = seed
    if getattr(args, "duration", None) is not None:
        sim["duration"] = args.duration
    if getattr(args, "traces", False):
        sim["record_traces"] = True

    update: Dict[str, Any] = {}
    if sim:
        update["simulation"] = _updated(config.simulation, sim)
    if getattr(args, "node", None):
        update["output"] = _updated(config.output, {"node": args.node})
    return config.model_copy(update=update) if update else config


def recorded_arguments(args) -> Dict[str, Any]:
    return {name: getattr(args, name) for name in RECORDED_ARGUMENTS if hasattr(args, name)}


def _record(manifest: Dict[str, Any], sweep_rows: List[Dict[str, Any]]):
    try:
        from database import db_manager

        db_manager.record_run(manifest, sweep_rows)
    except Exception as e:
        logger.warning(f"Run registry unavailable: {str(e)}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        config = resolve_config(load_config(args.config), args)
        result = CommandResult(Path(args.out), args.format)
        HANDLERS[args.command](config, args, result)
        manifest = reports.build_manifest(
            args.command, config, result.artifacts, result.seeds, result.warnings,
            extra={"summary": result.summary, "arguments": recorded_arguments(args)},
        )
        manifest_path = reports.write_manifest(Path(args.out), manifest)
        if not args.no_registry:
            _record(manifest, result.sweep_rows)
    except DVSNoiseError as e:
        logger.error(f"{args.command} failed: {e}")
        if args.error_json:
            print(json.dumps({"error": type(e).__name__, "message": str(e)}))
        else:
            print(f"error: {e}", file=sys.stderr)
        return 1

    for path in result.artifacts + [manifest_path]:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())

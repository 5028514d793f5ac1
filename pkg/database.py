from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
from sqlalchemy.pool import StaticPool
import json
import os
import logging
from typing import Any, Dict, Iterable, List, Optional
from models import Base, RunManifest, SweepPoint

logger = logging.getLogger(__name__)

DEFAULT_DATABASE_URL = "sqlite:///./dvs_noise_runs.db"


class DatabaseManager:
    """Run registry connection; failures are logged and never stop a command"""

    def __init__(self, database_url: Optional[str] = None):
        self.engine = None
        self.SessionLocal = None
        try:
            self._initialize_database(database_url)
        except Exception as e:
            logger.warning(f"Run registry initialization failed, runs will not be recorded: {str(e)}")

    def _initialize_database(self, database_url: Optional[str] = None):
        """Initialize database connection"""
        try:
            database_url = database_url or os.getenv("DVSNOISE_DATABASE_URL")

            if not database_url:
                database_url = DEFAULT_DATABASE_URL
                logger.info("Using local SQLite run registry")
            elif database_url.startswith("postgres://"):
                database_url = database_url.replace("postgres://", "postgresql://", 1)

            if database_url.startswith("sqlite"):
                self.engine = create_engine(
                    database_url,
                    connect_args={"check_same_thread": False},
                    poolclass=StaticPool,
                )
            else:
                self.engine = create_engine(database_url)

            self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)
            Base.metadata.create_all(bind=self.engine)
            logger.info("Run registry initialized")

        except Exception as e:
            logger.error(f"Failed to initialize run registry: {str(e)}")
            raise

    @property
    def available(self) -> bool:
        return self.SessionLocal is not None

    def get_session(self):
        """Get database session"""
        return self.SessionLocal()

    def record_run(
        self,
        manifest: Dict[str, Any],
        sweep_rows: Iterable[Dict[str, Any]] = (),
    ) -> Optional[int]:
        """Store a run manifest (and sweep points); returns the run id or None"""
        if not self.available:
            return None
        db = self.get_session()
        try:
            run = RunManifest(
                command=manifest["command"],
                tool_version=manifest["tool_version"],
                config_snapshot=json.dumps(manifest.get("config", {})),
                seeds=json.dumps(manifest.get("seeds", [])),
                artifacts=json.dumps(manifest.get("artifacts", [])),
                warnings=json.dumps(manifest.get("warnings", [])),
                status=manifest.get("status", "ok"),
            )
            for row in sweep_rows:
                run.sweep_points.append(SweepPoint(
                    i_pd=row["i_pd"],
                    i_pr=row["i_pr"],
                    i_sf=row["i_sf"],
                    illuminance=row.get("illuminance"),
                    rate_hz=row.get("rate_hz"),
                    bandwidth_hz=row.get("bandwidth_hz"),
                    rms_tc=row.get("rms_tc"),
                    photon_fraction=row.get("photon_fraction"),
                    power_w=row.get("power_w"),
                    error=row.get("error"),
                ))
            db.add(run)
            db.commit()
            logger.info(f"Recorded run {run.id} ({run.command})")
            return run.id
        except Exception as e:
            db.rollback()
            logger.warning(f"Could not record run: {str(e)}")
            return None
        finally:
            db.close()

    def list_runs(self, limit: int = 50, command: Optional[str] = None) -> List[Dict[str, Any]]:
        if not self.available:
            return []
        db = self.get_session()
        try:
            query = db.query(RunManifest)
            if command:
                query = query.filter(RunManifest.command == command)
            runs = query.order_by(RunManifest.id.desc()).limit(limit).all()
            return [r.to_dict() for r in runs]
        finally:
            db.close()

    def get_run(self, run_id: int) -> Optional[Dict[str, Any]]:
        if not self.available:
            return None
        db = self.get_session()
        try:
            run = db.query(RunManifest).filter(RunManifest.id == run_id).first()
            if run is None:
                return None
            data = run.to_dict()
            data["sweep_points"] = [p.to_dict() for p in run.sweep_points]
            return data
        finally:
            db.close()

    def close(self):
        """Close database connection"""
        if self.engine:
            self.engine.dispose()


# Global run registry instance
db_manager = DatabaseManager()


def get_db():
    """Dependency returning the run registry"""
    if not db_manager.available:
        from fastapi import HTTPException
        raise HTTPException(status_code=503, detail="Run registry not available")
    return db_manager

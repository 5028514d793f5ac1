from sqlalchemy import Column, Integer, String, Float, DateTime, Text, ForeignKey
from sqlalchemy.orm import declarative_base, relationship
from datetime import datetime
import json

Base = declarative_base()


def _loads(text, default):
    if not text:
        return default
    try:
        return json.loads(text)
    except ValueError:
        return default


class RunManifest(Base):
    """One CLI/API command execution with everything needed to repeat it"""
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String(50), nullable=False, index=True)
    tool_version = Column(String(20), nullable=False)
    config_snapshot = Column(Text, nullable=False)
    seeds = Column(Text, nullable=True)
    artifacts = Column(Text, nullable=True)
    warnings = Column(Text, nullable=True)
    status = Column(String(20), default="ok")
    created_at = Column(DateTime, default=datetime.utcnow)

    sweep_points = relationship("SweepPoint", back_populates="run", cascade="all, delete-orphan")

    def to_dict(self):
        return {
            "id": self.id,
            "command": self.command,
            "tool_version": self.tool_version,
            "config": _loads(self.config_snapshot, {}),
            "seeds": _loads(self.seeds, []),
            "artifacts": _loads(self.artifacts, []),
            "warnings": _loads(self.warnings, []),
            "status": self.status,
            "created_at": self.created_at.isoformat() if self.created_at else None
        }


class SweepPoint(Base):
    """One evaluated bias grid point of a sweep run"""
    __tablename__ = "sweep_points"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False, index=True)
    i_pd = Column(Float, nullable=False)
    i_pr = Column(Float, nullable=False)
    i_sf = Column(Float, nullable=False)
    illuminance = Column(Float, nullable=True)
    rate_hz = Column(Float, nullable=True)
    bandwidth_hz = Column(Float, nullable=True)
    rms_tc = Column(Float, nullable=True)
    photon_fraction = Column(Float, nullable=True)
    power_w = Column(Float, nullable=True)
    error = Column(Text, nullable=True)

    run = relationship("RunManifest", back_populates="sweep_points")

    def to_dict(self):
        return {
            "id": self.id,
            "run_id": self.run_id,
            "i_pd": self.i_pd,
            "i_pr": self.i_pr,
            "i_sf": self.i_sf,
            "illuminance": self.illuminance,
            "rate_hz": self.rate_hz,
            "bandwidth_hz": self.bandwidth_hz,
            "rms_tc": self.rms_tc,
            "photon_fraction": self.photon_fraction,
            "power_w": self.power_w,
            "error": self.error
        }

from sqlalchemy import create_engine, Column, Integer, String, DateTime, Text, JSON, text
from sqlalchemy.orm import declarative_base, sessionmaker
from datetime import datetime
from typing import List, Optional
import logging
import os

logger = logging.getLogger(__name__)

Base = declarative_base()

class ExperimentRun(Base):
    __tablename__ = "experiment_runs"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String(32), nullable=False, index=True)  # synth, train, eval, ablate-samples, audit
    config_hash = Column(String(64), nullable=False, index=True)
    config_snapshot = Column(Text, nullable=False)
    dataset_hash = Column(String(64), nullable=True)
    metrics = Column(JSON, nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)

    def as_dict(self) -> dict:
        return {
            "id": self.id,
            "command": self.command,
            "config_hash": self.config_hash,
            "dataset_hash": self.dataset_hash,
            "metrics": self.metrics,
            "created_at": self.created_at.isoformat() if self.created_at else None,
        }

# Registry URL resolution
def get_database_url(explicit: Optional[str] = None) -> Optional[str]:
    """Registry URL from the config key or the environment; None disables recording"""
    database_url = (
        explicit or
        os.getenv("IWSL_DATABASE_URL") or
        os.getenv("DATABASE_URL")
    )

    if database_url:
        # Hosted PostgreSQL URLs may still use the postgres:// scheme
        if database_url.startswith("postgres://"):
            database_url = database_url.replace("postgres://", "postgresql://", 1)
        return database_url
    return None

def mask_url(database_url: str) -> str:
    return database_url.split('@')[0] + "@***" if '@' in database_url else database_url

_engines = {}

def get_engine(database_url: str):
    """One engine per URL, with settings for PostgreSQL vs SQLite"""
    if database_url not in _engines:
        if database_url.startswith("postgresql://"):
            _engines[database_url] = create_engine(
                database_url,
                pool_pre_ping=True,
                pool_recycle=300,
                echo=False
            )
        else:
            _engines[database_url] = create_engine(
                database_url,
                connect_args={"check_same_thread": False} if database_url.startswith("sqlite") else {},
                echo=False
            )
    return _engines[database_url]

def get_session(database_url: str):
    return sessionmaker(autocommit=False, autoflush=False, bind=get_engine(database_url))()

def create_tables(database_url: str):
    """Create all tables"""
    Base.metadata.create_all(bind=get_engine(database_url))
    logger.info(f"Registry tables created/verified using: {mask_url(database_url)}")

def record_run(database_url: str, command: str, config_hash: str, config_snapshot: str,
               dataset_hash: Optional[str] = None, metrics: Optional[dict] = None) -> int:
    """Store one finished command; returns the new row id"""
    create_tables(database_url)
    db = get_session(database_url)
    try:
        run = ExperimentRun(
            command=command,
            config_hash=config_hash,
            config_snapshot=config_snapshot,
            dataset_hash=dataset_hash,
            metrics=metrics,
        )
        db.add(run)
        db.commit()
        db.refresh(run)
        logger.info(f"Recorded {command} run {run.id} (config {config_hash[:12]})")
        return run.id
    except Exception as e:
        db.rollback()
        logger.error(f"Error recording {command} run: {str(e)}")
        raise
    finally:
        db.close()

def list_runs(database_url: str, command: Optional[str] = None, limit: int = 20) -> List[dict]:
    """Most recent runs first"""
    create_tables(database_url)
    db = get_session(database_url)
    try:
        query = db.query(ExperimentRun)
        if command:
            query = query.filter(ExperimentRun.command == command)
        runs = query.order_by(ExperimentRun.id.desc()).limit(limit).all()
        return [run.as_dict() for run in runs]
    finally:
        db.close()

def test_database_connection(database_url: Optional[str] = None):
    """Test registry connection and return info"""
    database_url = get_database_url(database_url)
    if database_url is None:
        return {"status": "disabled", "database_type": None, "url_masked": None}
    try:
        db = get_session(database_url)

        if database_url.startswith("postgresql://"):
            result = db.execute(text("SELECT version()"))
            version = result.fetchone()[0]
            db_type = "PostgreSQL"
            db_info = version.split(' ')[0:2]
        else:
            result = db.execute(text("SELECT sqlite_version()"))
            version = result.fetchone()[0]
            db_type = "SQLite"
            db_info = [f"SQLite {version}"]

        db.close()
        return {
            "status": "connected",
            "database_type": db_type,
            "version": db_info,
            "url_masked": mask_url(database_url)
        }

    except Exception as e:
        return {
            "status": "error",
            "error": str(e),
            "database_type": "Unknown",
            "url_masked": mask_url(database_url)
        }

"""
Database Configuration and Session Management

This module handles the connection to the optional results store, session
management, and helpers to persist and query registration runs.

The store is opt-in: nothing is written unless a database URL is given on
the command line or through CROSSREG_DATABASE_URL.
"""

import logging
import os
from typing import Any, Callable, Dict, List, Optional, Sequence

from dotenv import load_dotenv
from sqlalchemy import create_engine, text
from sqlalchemy.engine import Engine
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import Session, sessionmaker

from errors import StorageError
from models import Base, BenchmarkRow, PairRecord, PairResultDB, RunDB

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

DATABASE_URL_ENV = "CROSSREG_DATABASE_URL"


def database_url(override: Optional[str] = None) -> Optional[str]:
    """Flag value first, then CROSSREG_DATABASE_URL; None disables persistence."""
    return override or os.getenv(DATABASE_URL_ENV) or None


def make_engine(url: str) -> Engine:
    """
    Create the SQLAlchemy engine.

    For SQLite, check_same_thread is disabled since the benchmark worker
    pool hands results to the writer from other threads.
    """
    if url.startswith("sqlite"):
        return create_engine(url, connect_args={"check_same_thread": False}, echo=False)
    return create_engine(url, echo=False)


class DatabaseManager:
    """
    Database manager class providing high-level operations on one store.

    Args:
        url: SQLAlchemy database URL
    """

    def __init__(self, url: str):
        self.url = url
        self.engine = make_engine(url)
        self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)

    def create_all_tables(self) -> None:
        """Create all tables defined in models.py; existing tables are left alone."""
        Base.metadata.create_all(bind=self.engine)

    def init_database(self) -> None:
        logger.info(f"Initializing results store at {self.url}")
        try:
            self.create_all_tables()
        except SQLAlchemyError as e:
            raise StorageError(f"Failed to initialize results store: {str(e)}")

    def execute_with_session(self, operation: Callable[..., Any], *args, **kwargs) -> Any:
        """
        Execute a database operation with automatic session management.

        The session is committed on success and rolled back on failure;
        SQLAlchemy errors surface as StorageError.

        Args:
            operation: Function taking a session as first parameter
            *args: Additional positional arguments for the operation
            **kwargs: Additional keyword arguments for the operation

        Returns:
            The result of the operation function
        """
        session = self.SessionLocal()
        try:
            result = operation(session, *args, **kwargs)
            session.commit()
            return result
        except SQLAlchemyError as e:
            session.rollback()
            raise StorageError(f"Results store operation failed: {str(e)}")
        except Exception:
            session.rollback()
            raise
        finally:
            session.close()

    def test_connection(self) -> bool:
        try:
            with self.engine.connect() as connection:
                connection.execute(text("SELECT 1"))
            return True
        except SQLAlchemyError as e:
            logger.error(f"Database connection test failed: {e}")
            return False


def open_store(url: str) -> DatabaseManager:
    """
    Connect to a results store and make sure its tables exist.

    Raises:
        StorageError: If the store cannot be reached or initialized
    """
    try:
        manager = DatabaseManager(url)
    except SQLAlchemyError as e:
        raise StorageError(f"Invalid results store URL {url}: {str(e)}")
    if not manager.test_connection():
        raise StorageError(f"Cannot connect to results store at {url}")
    manager.init_database()
    return manager


def _save_run(
    session: Session,
    command: str,
    label: str,
    config: Dict[str, Any],
    seeds: Dict[str, int],
    rows: Sequence[BenchmarkRow],
    records: Sequence[PairRecord],
    timings: Sequence[Dict[str, float]],
) -> int:
    run = RunDB(
        command=command,
        label=label,
        config=config,
        seeds=seeds,
        recall=rows[0].recall if rows else None,
        mean_ir=rows[0].mean_ir if rows else None,
        pair_count=len({record.pair for record in records}),
    )
    session.add(run)
    session.flush()
    for record, timing in zip(records, timings):
        session.add(PairResultDB(run_id=run.id, timings=timing, **record.model_dump()))
    return int(run.id)


def save_run(
    manager: DatabaseManager,
    command: str,
    label: str,
    config: Dict[str, Any],
    seeds: Dict[str, int],
    rows: Sequence[BenchmarkRow],
    records: Sequence[PairRecord],
    timings: Optional[Sequence[Dict[str, float]]] = None,
) -> int:
    """
    Persist one run with its per-pair records.

    The run-level RR and mean IR are those of the first estimator row.

    Returns:
        int: The new run id
    """
    timings = list(timings) if timings is not None else [{} for _ in records]
    run_id = manager.execute_with_session(_save_run, command, label, config, seeds, rows, records, timings)
    logger.info(f"Stored run {run_id} with {len(records)} records")
    return run_id


def load_run_records(manager: DatabaseManager, run_id: int) -> List[PairRecord]:
    """
    Records of a stored run, in insertion order.

    Raises:
        StorageError: If the run does not exist
    """
    def operation(session: Session) -> List[PairRecord]:
        if session.get(RunDB, run_id) is None:
            raise StorageError(f"Run {run_id} not found")
        rows = (
            session.query(PairResultDB)
            .filter(PairResultDB.run_id == run_id)
            .order_by(PairResultDB.id)
            .all()
        )
        return [
            PairRecord(**{name: getattr(row, name) for name in PairRecord.model_fields})
            for row in rows
        ]

    return manager.execute_with_session(operation)


def list_runs(manager: DatabaseManager, limit: int = 20) -> List[Dict[str, Any]]:
    """Most recent runs first."""
    def operation(session: Session) -> List[Dict[str, Any]]:
        runs = session.query(RunDB).order_by(RunDB.id.desc()).limit(limit).all()
        return [
            {
                "id": run.id,
                "command": run.command,
                "label": run.label,
                "pairs": run.pair_count,
                "recall": run.recall,
                "mean_ir": run.mean_ir,
                "created": run.created_time,
            }
            for run in runs
        ]

    return manager.execute_with_session(operation)

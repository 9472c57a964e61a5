"""
Error types and run-failure bookkeeping for regret-forge.
Every experiment failure is recorded with diagnostics instead of aborting a sweep.
"""

import logging
import time
from datetime import datetime
from functools import wraps
from threading import Lock
from typing import Any, Callable, Dict, List, Optional, Tuple

logger = logging.getLogger(__name__)


class RegretForgeError(Exception):
    """Base class for all domain errors raised by regret-forge."""

    def diagnostics(self) -> Dict[str, Any]:
        """Structured details attached to failure records."""
        return {}


class InvalidMDPError(RegretForgeError):
    """A transition row or the initial distribution is not a probability vector."""

    def __init__(self, message: str, index: Optional[Tuple[int, ...]] = None):
        super().__init__(message)
        self.index = index

    def diagnostics(self) -> Dict[str, Any]:
        return {'index': list(self.index) if self.index is not None else None}


class MarginZeroError(RegretForgeError):
    """A reachable state has tied best actions, so no positive action gap exists."""

    def __init__(self, period: int, state: int):
        super().__init__(f"Exact tie between best actions at reachable (h={period}, s={state})")
        self.period = period
        self.state = state

    def diagnostics(self) -> Dict[str, Any]:
        return {'period': self.period, 'state': self.state}


class GenerationFailedError(RegretForgeError):
    """Rejection sampling did not produce a certified instance."""


class EmptyDatasetError(RegretForgeError):
    """An operation needs at least one recorded transition."""


class ImpossibleDataError(RegretForgeError):
    """Every hypothesis assigns zero likelihood to the observed data."""


class InvalidArgsError(RegretForgeError):
    """Arguments fall outside the domain of a closed-form quantity."""


class ConfigError(RegretForgeError):
    """Experiment configuration could not be loaded or validated."""


class SolverDivergedError(RegretForgeError):
    """A per-row convex solve ran out of iterations before meeting tolerance."""

    def __init__(self, period: int, iterations: int, grad_norm: float, episode: Optional[int] = None):
        super().__init__(
            f"Row solve at period {period} stopped after {iterations} iterations "
            f"with gradient norm {grad_norm:.3e}"
        )
        self.period = period
        self.iterations = iterations
        self.grad_norm = grad_norm
        self.episode = episode

    def diagnostics(self) -> Dict[str, Any]:
        return {
            'period': self.period,
            'iterations': self.iterations,
            'grad_norm': self.grad_norm,
            'episode': self.episode,
        }


class ErrorHandler:
    """
    Failure ledger for experiment runs.

    Provides:
    - Per-kind failure counters with escalation when a kind keeps repeating
    - Failure records (task key, error type, message, diagnostics) for the run report
    - A status snapshot consumed by the harness when writing run_status.json
    """

    def __init__(self, escalation_threshold: int = 10):
        """
        Initialize error handler.

        Args:
            escalation_threshold: Failures of one kind after which a critical log is emitted
        """
        self.error_counts: Dict[str, int] = {}
        self.failures: List[Dict[str, Any]] = []
        self._escalation_threshold = escalation_threshold
        self._lock = Lock()

        logger.debug("ErrorHandler initialized")

    def record_run_failure(self, task_key: str, operation: str, error: Exception) -> Dict[str, Any]:
        """
        Record a failed experiment task.

        Args:
            task_key: Identifier of the failed task (grid point, seed, agent)
            operation: Operation that raised
            error: Exception that occurred

        Returns:
            The stored failure record
        """
        details = error.diagnostics() if isinstance(error, RegretForgeError) else {}
        record = {
            'task': task_key,
            'operation': operation,
            'error_type': type(error).__name__,
            'message': str(error),
            'diagnostics': details,
            'timestamp': datetime.now().isoformat(),
        }
        with self._lock:
            self._log_error(operation, error)
            self.failures.append(record)
        return record

    def _log_error(self, operation: str, error: Exception):
        error_key = f"{operation}_{type(error).__name__}"
        self.error_counts[error_key] = self.error_counts.get(error_key, 0) + 1

        logger.error(f"Run failure in {operation}: {error}")

        if self.error_counts[error_key] > self._escalation_threshold:
            logger.critical(f"Repeated failures for {error_key}: {self.error_counts[error_key]} errors")

    def failed_tasks(self) -> List[str]:
        with self._lock:
            return [f['task'] for f in self.failures]

    def get_status(self) -> Dict[str, Any]:
        """Get current failure status."""
        return {
            'error_counts': dict(self.error_counts),
            'failures': list(self.failures),
            'timestamp': datetime.now().isoformat(),
        }


def with_error_handling(error_handler: ErrorHandler, operation: str) -> Callable:
    """
    Decorator that records domain failures of a task and returns None instead.

    The wrapped callable must take the task key as its first positional argument.
    Non-domain exceptions (programming errors) are recorded and re-raised.

    Args:
        error_handler: ErrorHandler instance
        operation: Operation name used in failure records
    """
    def decorator(func):
        @wraps(func)
        def wrapper(task_key, *args, **kwargs):
            try:
                return func(task_key, *args, **kwargs)
            except RegretForgeError as e:
                error_handler.record_run_failure(str(task_key), operation, e)
                return None
            except Exception as e:
                error_handler.record_run_failure(str(task_key), operation, e)
                raise

        return wrapper

    return decorator


class RunMonitor:
    """
    Tracks throughput and failure rate of experiment tasks.
    """

    def __init__(self):
        self.metrics = {
            'runs_completed': 0,
            'runs_failed': 0,
            'total_run_seconds': 0.0,
            'started': datetime.now(),
        }
        self._t0 = time.perf_counter()
        self._lock = Lock()

    def record_run(self, duration: float, success: bool = True):
        """Record one finished task."""
        with self._lock:
            if success:
                self.metrics['runs_completed'] += 1
            else:
                self.metrics['runs_failed'] += 1
            self.metrics['total_run_seconds'] += duration

    def get_health_status(self) -> Dict[str, Any]:
        """Summarize the sweep so far."""
        total = self.metrics['runs_completed'] + self.metrics['runs_failed']
        failure_rate = (self.metrics['runs_failed'] / max(total, 1)) * 100

        return {
            'status': 'healthy' if failure_rate == 0 else 'degraded' if failure_rate < 20 else 'unhealthy',
            'wall_seconds': time.perf_counter() - self._t0,
            'runs_completed': self.metrics['runs_completed'],
            'runs_failed': self.metrics['runs_failed'],
            'failure_rate_percent': failure_rate,
            'mean_run_seconds': self.metrics['total_run_seconds'] / max(total, 1),
            'started': self.metrics['started'].isoformat(),
        }

"""
Experiment orchestration for regret-forge.
Runs every agent over (beta, kappa, beta_tilde) grid points and seeds on a
thread pool, aggregates cumulative regret and writes CSV and JSON outputs.
"""

import configparser
import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from environments import make_certified_hypothesis_set, make_environment
from error_handler import ConfigError, ErrorHandler, RunMonitor, with_error_handling
from expert import OfflineDataset, episodes_for_ratio, generate_offline, load_dataset
from ipsrl import HypothesisSet, ipsrl_run
from models import (
    AgentKind, Competence, ExperimentConfig, RegretCurve, SummaryRow, SummaryTable,
)
from rlsvi import run_agent
from seeding import derive_stream
from tabular_mdp import TabularMDP

logger = logging.getLogger(__name__)

THREADS_ENV = "REGRET_FORGE_THREADS"
CONFIG_SECTION = "experiment"

# Stream roles under (master_seed, grid index, seed index)
DATA_STREAM, AGENT_STREAM, TRUTH_STREAM = 0, 1, 2

ENV_KEYS = {'kind', 'M', 'slip', 'S', 'A', 'H', 'margin', 'env_seed', 'n_hypotheses'}

_DEEP_SEA_BASE = {'env': {'kind': 'deep_sea', 'M': 10}, 'T': 300, 'n_seeds': 50}

PRESETS: Dict[str, Dict[str, Any]] = {
    # cumulative regret against expert deliberateness
    'beta_sweep': {**_DEEP_SEA_BASE, 'beta_grid': [0.1, 1.0, 5.0, 10.0, 50.0], 'kappa_grid': [1.0, 5.0]},
    # robustness of iRLSVI to a misspecified beta
    'misspecification': {**_DEEP_SEA_BASE, 'beta_grid': [5.0], 'kappa_grid': [1.0, 5.0],
                'beta_tilde_grid': [0.05, 0.5, 2.5, 5.0, 50.0]},
    # cumulative regret over episodes
    'learning_curve': {**_DEEP_SEA_BASE, 'beta_grid': [1.0, 10.0], 'kappa_grid': [1.0, 5.0]},
}

CURVE_COLUMNS = ['agent', 'beta', 'kappa', 'beta_tilde', 'seed', 'episode', 'per_episode_regret', 'cumulative_regret']
SUMMARY_COLUMNS = ['agent', 'beta', 'kappa', 'beta_tilde', 'mean_cumreg_T', 'stderr', 'n_seeds', 'n_failed', 'status']


@dataclass(frozen=True)
class GridPoint:
    """Expert (beta, kappa) with the beta the agents are told (None means the true beta)."""
    data_index: int
    beta: float
    kappa: float
    beta_tilde: Optional[float]

    @property
    def agent_beta(self) -> float:
        return self.beta if self.beta_tilde is None else self.beta_tilde


@dataclass(frozen=True)
class ExperimentTask:
    point: GridPoint
    seed: int

    @property
    def key(self) -> str:
        return f"beta={self.point.beta},kappa={self.point.kappa},beta_tilde={self.point.beta_tilde},seed={self.seed}"


def grid_points(config: ExperimentConfig) -> List[GridPoint]:
    """
    Grid in (beta, kappa, beta_tilde) order.

    Points sharing (beta, kappa) share data_index, so every beta_tilde sees the
    same offline datasets and agent streams.
    """
    tildes = config.beta_tilde_grid if config.beta_tilde_grid is not None else [None]
    points = []
    for data_index, (beta, kappa) in enumerate(itertools.product(config.beta_grid, config.kappa_grid)):
        points.extend(GridPoint(data_index, beta, kappa, tilde) for tilde in tildes)
    return points


def resolve_threads(requested: Optional[int] = None) -> int:
    """Worker count: explicit request, then REGRET_FORGE_THREADS, then the CPU count."""
    if requested is not None:
        return max(1, requested)
    env_value = os.environ.get(THREADS_ENV)
    if env_value:
        try:
            return max(1, int(env_value))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env_value!r}")
    return os.cpu_count() or 1


def load_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """
    Read flat key = value settings.

    Keys may sit under an [experiment] section or before any section header.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")

    text = path.read_text()
    if not text.lstrip().startswith('['):
        text = f"[{CONFIG_SECTION}]\n" + text
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as e:
        raise ConfigError(f"Cannot parse {path}: {e}")
    if not parser.has_section(CONFIG_SECTION):
        raise ConfigError(f"{path} has no [{CONFIG_SECTION}] section")
    return dict(parser.items(CONFIG_SECTION))


def build_config(*layers: Dict[str, Any]) -> ExperimentConfig:
    """
    Merge flat settings (later layers win) into a validated ExperimentConfig.

    Environment keys (kind or env, M, S, A, H, margin, ...) are gathered into the env block.
    """
    merged: Dict[str, Any] = {}
    env: Dict[str, Any] = {}
    for layer in layers:
        for key, value in layer.items():
            if value is None:
                continue
            if key == 'env' and isinstance(value, dict):
                env.update(value)
            elif key == 'env':
                env['kind'] = value
            elif key in ENV_KEYS:
                env[key] = value
            else:
                merged[key] = value
    merged['env'] = env
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(f"Invalid experiment configuration: {e}")


def preset(name: str) -> Dict[str, Any]:
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return dict(PRESETS[name])


class ExperimentRunner:
    """
    Executes one ExperimentConfig.

    Environments and hypothesis sets are built once; every task then owns its
    child streams, so results do not depend on scheduling.
    """

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.error_handler = ErrorHandler()
        self.monitor = RunMonitor()
        self.hypotheses: Optional[HypothesisSet] = None
        self.env: Optional[TabularMDP] = None
        self.shared_dataset: Optional[OfflineDataset] = None

        if AgentKind.IPSRL in config.agents:
            env_cfg = config.env
            members = make_certified_hypothesis_set(
                env_cfg.S, env_cfg.A, env_cfg.H, env_cfg.n_hypotheses, env_cfg.margin,
                np.random.default_rng(env_cfg.env_seed),
            )
            self.hypotheses = HypothesisSet(members)
        else:
            self.env = make_environment(config.env)

        if config.dataset_path:
            self.shared_dataset = load_dataset(config.dataset_path)
            logger.info(f"Reusing offline dataset {config.dataset_path} ({self.shared_dataset.num_episodes} episodes)")

        self._run_one = with_error_handling(self.error_handler, "run_agent")(self._run_agent)

    def _task_environment(self, task: ExperimentTask) -> Tuple[TabularMDP, Optional[int]]:
        if self.hypotheses is None:
            return self.env, None
        rng = derive_stream(self.config.master_seed, task.point.data_index, task.seed, TRUTH_STREAM)
        truth = int(rng.choice(len(self.hypotheses), p=self.hypotheses.prior))
        return self.hypotheses.hypotheses[truth], truth

    def _dataset(self, task: ExperimentTask, env: TabularMDP) -> OfflineDataset:
        if self.shared_dataset is not None:
            return self.shared_dataset
        point = task.point
        rng = derive_stream(self.config.master_seed, point.data_index, task.seed, DATA_STREAM)
        L = episodes_for_ratio(point.kappa, env.num_states, env.num_actions, env.horizon)
        competence = Competence(beta=point.beta, lambda_=self.config.expert_lambda)
        return generate_offline(env, competence, L, rng, kappa=point.kappa, seed=task.seed,
                                env_label=self.config.env.describe())

    def _run_agent(self, task_key: str, kind: AgentKind, task: ExperimentTask, env: TabularMDP,
                   truth: Optional[int], data: OfflineDataset) -> RegretCurve:
        point = task.point
        rng = derive_stream(self.config.master_seed, point.data_index, task.seed, AGENT_STREAM)
        if kind == AgentKind.IPSRL:
            return ipsrl_run(self.hypotheses, data, point.agent_beta, truth, self.config.T, rng, seed=task.seed)
        rlsvi_config = self.config.rlsvi_config(kind, point.agent_beta)
        return run_agent(env, data, rlsvi_config, self.config.T, rng, seed=task.seed)

    def run_task(self, task: ExperimentTask) -> List[Tuple[AgentKind, ExperimentTask, RegretCurve]]:
        env, truth = self._task_environment(task)
        data = self._dataset(task, env)

        results = []
        for kind in self.config.agents:
            started = time.perf_counter()
            curve = self._run_one(f"{task.key},agent={kind.value}", kind, task, env, truth, data)
            self.monitor.record_run(time.perf_counter() - started, success=curve is not None)
            if curve is not None:
                results.append((kind, task, curve))
        logger.debug(f"Finished task {task.key}")
        return results

    def tasks(self) -> List[ExperimentTask]:
        return [ExperimentTask(point, seed) for point in grid_points(self.config) for seed in range(self.config.n_seeds)]

    def run(self, threads: int = 1) -> List[Tuple[AgentKind, ExperimentTask, RegretCurve]]:
        tasks = self.tasks()
        logger.info(f"Running {len(tasks)} tasks x {len(self.config.agents)} agents on {threads} threads "
                    f"({self.config.env.describe()}, T={self.config.T})")
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                batches = list(pool.map(self.run_task, tasks))
        else:
            batches = [self.run_task(task) for task in tasks]
        return [result for batch in batches for result in batch]


def summarize(config: ExperimentConfig,
              results: Sequence[Tuple[AgentKind, ExperimentTask, RegretCurve]]) -> SummaryTable:
    """
    Mean cumulative regret at T and its standard error std / sqrt(n) per (agent, grid point).
    """
    totals: Dict[Tuple[str, GridPoint], List[float]] = {}
    for kind, task, curve in results:
        totals.setdefault((kind.value, task.point), []).append(curve.total)

    rows = []
    for point in grid_points(config):
        for kind in config.agents:
            values = np.array(totals.get((kind.value, point), []))
            n = len(values)
            n_failed = config.n_seeds - n
            if n == 0:
                mean, stderr, status = math.nan, math.nan, "empty"
            elif n == 1:
                mean, stderr, status = float(values[0]), 0.0, "single_seed" if n_failed == 0 else "incomplete"
                logger.warning(f"Only one seed for {kind.value} at beta={point.beta}, kappa={point.kappa}; "
                               f"standard error reported as 0")
            else:
                mean = float(values.mean())
                stderr = float(values.std(ddof=1) / math.sqrt(n))
                status = "ok" if n_failed == 0 else "incomplete"
            if n_failed and n:
                logger.warning(f"{n_failed} failed seeds for {kind.value} at beta={point.beta}, kappa={point.kappa}")
            rows.append(SummaryRow(
                agent=kind.value, beta=point.beta, kappa=point.kappa, beta_tilde=point.beta_tilde,
                mean_cumreg_T=mean, stderr=stderr, n_seeds=n, n_failed=n_failed, status=status,
            ))
    return SummaryTable(rows=rows)


def curves_frame(results: Sequence[Tuple[AgentKind, ExperimentTask, RegretCurve]]) -> pd.DataFrame:
    frames = []
    for kind, task, curve in results:
        T = len(curve.per_episode)
        frames.append(pd.DataFrame({
            'agent': kind.value,
            'beta': task.point.beta,
            'kappa': task.point.kappa,
            'beta_tilde': task.point.beta_tilde,
            'seed': task.seed,
            'episode': np.arange(T),
            'per_episode_regret': curve.per_episode,
            'cumulative_regret': curve.cumulative,
        }))
    if not frames:
        return pd.DataFrame(columns=CURVE_COLUMNS)
    return pd.concat(frames, ignore_index=True)[CURVE_COLUMNS]


def write_outputs(output_dir: Union[str, Path], config: ExperimentConfig, table: SummaryTable,
                  results: Sequence[Tuple[AgentKind, ExperimentTask, RegretCurve]],
                  status: Dict[str, Any]) -> Path:
    """
    Write summary.csv, curves/seed_XXXX.csv (one per seed) and run_status.json.
    """
    out = Path(output_dir)
    (out / 'curves').mkdir(parents=True, exist_ok=True)

    order = {(point, kind): i for i, (point, kind) in
             enumerate(itertools.product(grid_points(config), config.agents))}
    ordered = sorted(results, key=lambda r: (r[1].seed, order[(r[1].point, r[0])]))
    for seed, group in itertools.groupby(ordered, key=lambda r: r[1].seed):
        curves_frame(list(group)).to_csv(out / 'curves' / f'seed_{seed:04d}.csv', index=False)

    summary = pd.DataFrame([row.model_dump() for row in table.rows], columns=SUMMARY_COLUMNS)
    summary.to_csv(out / 'summary.csv', index=False)
    (out / 'run_status.json').write_text(json.dumps(status, indent=2, default=str))

    logger.info(f"Wrote summary of {len(table.rows)} rows and {len(ordered)} curves to {out}")
    return out


def run_experiment(config: ExperimentConfig, threads: Optional[int] = None,
                   write: bool = True) -> SummaryTable:
    """
    Run all agents over the configured grid and seeds.

    Per-agent failures are recorded in run_status.json and mark their summary
    cells incomplete; the sweep itself continues.
    """
    runner = ExperimentRunner(config)
    results = runner.run(resolve_threads(threads if threads is not None else config.threads))
    table = summarize(config, results)

    status = {
        'config': config.model_dump(mode='json'),
        'health': runner.monitor.get_health_status(),
        'errors': runner.error_handler.get_status(),
        'failed_tasks': runner.error_handler.failed_tasks(),
    }
    if write:
        write_outputs(config.output_dir, config, table, results, status)
    return table

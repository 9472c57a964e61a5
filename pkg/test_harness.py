"""
Tests for experiment orchestration: grids, configuration layers, aggregation and outputs.
"""

import json
import math
import os
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

import harness
from environments import make_deep_sea
from error_handler import ConfigError, SolverDivergedError
from expert import generate_offline, save_dataset
from harness import (
    THREADS_ENV, build_config, grid_points, load_config_file, preset, resolve_threads,
    run_experiment, summarize,
)
from models import AgentKind, Competence, DeepSeaSpec


def small_config(tmp_path, **overrides):
    values = {'env': 'deep_sea', 'M': 3, 'T': 4, 'n_seeds': 3, 'beta_grid': [10.0], 'kappa_grid': [1.0],
              'output_dir': str(tmp_path)}
    values.update(overrides)
    return build_config(values)


class TestGridAndPresets:
    """Grid enumeration and built-in presets."""

    def test_beta_tilde_points_share_data_index(self):
        config = build_config(preset('misspecification'))
        points = grid_points(config)
        assert len(points) == 10
        assert {p.data_index for p in points[:5]} == {0}
        assert {p.data_index for p in points[5:]} == {1}
        assert [p.agent_beta for p in points[:5]] == [0.05, 0.5, 2.5, 5.0, 50.0]

    def test_true_beta_when_no_tilde(self):
        points = grid_points(build_config(preset('beta_sweep')))
        assert len(points) == 10
        assert all(p.beta_tilde is None and p.agent_beta == p.beta for p in points)

    def test_presets_use_deep_sea_ten(self):
        for name in ('beta_sweep', 'misspecification', 'learning_curve'):
            config = build_config(preset(name))
            assert config.env.kind == 'deep_sea' and config.env.M == 10
            assert config.T == 300 and config.n_seeds == 50

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset('unknown_sweep')

    def test_misspecified_mode_when_tilde_given(self):
        config = build_config(preset('misspecification'))
        assert config.rlsvi_config(AgentKind.INFORMED, 0.5).beta_mode.value == 'misspecified'


class TestConfiguration:
    """Flat config files and layered overrides."""

    def test_file_without_section(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("T = 7\nbeta_grid = 1, 5\nenv = deep_sea\nM = 4\n")
        config = build_config(load_config_file(path))
        assert config.T == 7
        assert config.beta_grid == [1.0, 5.0]
        assert config.env.M == 4

    def test_file_with_section(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text("[experiment]\nagents = irlsvi, urlsvi\nn_seeds = 2\n")
        config = build_config(load_config_file(path))
        assert config.agents == [AgentKind.INFORMED, AgentKind.UNINFORMED]
        assert config.n_seeds == 2

    def test_later_layers_win(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("T = 7\n")
        config = build_config(preset('beta_sweep'), load_config_file(path), {'T': 11, 'M': 5})
        assert config.T == 11
        assert config.env.M == 5
        assert config.beta_grid == [0.1, 1.0, 5.0, 10.0, 50.0]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config_file(tmp_path / "absent.cfg")

    def test_file_without_experiment_section(self, tmp_path):
        path = tmp_path / "other.ini"
        path.write_text("[other]\nT = 3\n")
        with pytest.raises(ConfigError):
            load_config_file(path)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            build_config({'episodes': 10})

    def test_entropy_mode_rejects_beta_tilde_grid(self):
        with pytest.raises(ConfigError):
            build_config({'beta_mode': 'entropy', 'beta_tilde_grid': '0.5, 5'})

    def test_infinite_lambda_from_file(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("expert_lambda = inf\n")
        assert build_config(load_config_file(path)).expert_lambda == math.inf

    def test_ipsrl_needs_random_env(self):
        with pytest.raises(ConfigError):
            build_config({'agents': 'ipsrl', 'env': 'deep_sea'})


class TestResolveThreads:
    """Worker count resolution."""

    def test_explicit_request_wins(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "3")
        assert resolve_threads(2) == 2

    def test_environment_variable(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "3")
        assert resolve_threads() == 3

    def test_bad_environment_variable(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "many")
        with pytest.raises(ConfigError):
            resolve_threads()

    def test_cpu_count_fallback(self, monkeypatch):
        monkeypatch.delenv(THREADS_ENV, raising=False)
        assert resolve_threads() == (os.cpu_count() or 1)


class TestRunExperiment:
    """End-to-end sweeps on a small Deep Sea."""

    def test_outputs_written(self, tmp_path):
        table = run_experiment(small_config(tmp_path), threads=1)
        assert len(table.rows) == 3
        assert sorted(p.name for p in (tmp_path / 'curves').iterdir()) == [
            'seed_0000.csv', 'seed_0001.csv', 'seed_0002.csv']
        status = json.loads((tmp_path / 'run_status.json').read_text())
        assert status['health']['runs_completed'] == 9
        assert status['errors']['failures'] == []
        assert status['failed_tasks'] == []

    def test_status_file_is_strict_json(self, tmp_path):
        run_experiment(small_config(tmp_path, agents='urlsvi', n_seeds=1), threads=1)

        def reject(token):
            raise ValueError(f"non-standard JSON constant {token}")

        status = json.loads((tmp_path / 'run_status.json').read_text(), parse_constant=reject)
        assert status['config']['expert_lambda'] == 'inf'

    def test_thread_count_does_not_change_results(self, tmp_path):
        run_experiment(small_config(tmp_path / "one"), threads=1)
        run_experiment(small_config(tmp_path / "eight"), threads=8)
        one, eight = tmp_path / "one", tmp_path / "eight"
        assert (one / 'summary.csv').read_bytes() == (eight / 'summary.csv').read_bytes()
        for name in ('seed_0000.csv', 'seed_0001.csv', 'seed_0002.csv'):
            assert (one / 'curves' / name).read_bytes() == (eight / 'curves' / name).read_bytes()

    def test_summary_recomputed_from_curves(self, tmp_path):
        table = run_experiment(small_config(tmp_path, n_seeds=4), threads=2)
        curves = pd.concat(pd.read_csv(p) for p in sorted((tmp_path / 'curves').iterdir()))
        final = curves[curves['episode'] == curves['episode'].max()]
        for agent, group in final.groupby('agent'):
            row = table.lookup(agent, 10.0, 1.0)
            assert row.mean_cumreg_T == pytest.approx(group['cumulative_regret'].mean(), abs=1e-9)
            assert row.stderr == pytest.approx(group['cumulative_regret'].std(ddof=1) / 2, abs=1e-9)

    def test_single_seed_has_zero_stderr(self, tmp_path):
        table = run_experiment(small_config(tmp_path, n_seeds=1, agents='urlsvi'), write=False)
        row = table.rows[0]
        assert row.stderr == 0.0
        assert row.status == 'single_seed'
        assert row.n_seeds == 1

    def test_failed_seed_marks_cell_incomplete(self, tmp_path):
        real_run_agent = harness.run_agent

        def failing(env, data, config, T, rng, seed=0):
            if seed == 1:
                raise SolverDivergedError(period=0, iterations=1, grad_norm=1.0, episode=0)
            return real_run_agent(env, data, config, T, rng, seed=seed)

        with patch('harness.run_agent', side_effect=failing):
            table = run_experiment(small_config(tmp_path, agents='urlsvi'), threads=1)

        row = table.rows[0]
        assert row.status == 'incomplete'
        assert row.n_seeds == 2 and row.n_failed == 1
        status = json.loads((tmp_path / 'run_status.json').read_text())
        assert len(status['errors']['failures']) == 1
        assert status['errors']['failures'][0]['error_type'] == 'SolverDivergedError'
        assert status['health']['runs_failed'] == 1
        assert status['failed_tasks'] == [status['errors']['failures'][0]['task']]
        assert 'seed=1' in status['failed_tasks'][0]

    def test_no_successful_seed_is_empty(self, tmp_path):
        with patch('harness.run_agent', side_effect=SolverDivergedError(0, 1, 1.0)):
            table = run_experiment(small_config(tmp_path, agents='urlsvi', n_seeds=2), write=False)
        assert table.rows[0].status == 'empty'
        assert math.isnan(table.rows[0].mean_cumreg_T)

    def test_shared_dataset_reused(self, tmp_path):
        env = make_deep_sea(DeepSeaSpec(M=3))
        data = generate_offline(env, Competence(beta=10.0), 5, np.random.default_rng(0))
        path = save_dataset(data, tmp_path / "d0.jsonl")
        table = run_experiment(small_config(tmp_path / "out", dataset_path=str(path), agents='pirlsvi'),
                               write=False)
        assert table.rows[0].status == 'ok'

    def test_ipsrl_on_certified_random_environment(self, tmp_path):
        config = build_config({
            'env': 'random', 'S': 2, 'A': 2, 'H': 2, 'margin': 0.05, 'n_hypotheses': 3,
            'agents': 'ipsrl, pirlsvi', 'T': 5, 'n_seeds': 2, 'beta_grid': [5.0], 'kappa_grid': [1.0],
            'output_dir': str(tmp_path),
        })
        table = run_experiment(config, threads=1, write=False)
        assert [row.agent for row in table.rows] == ['ipsrl', 'pirlsvi']
        assert all(row.status == 'ok' for row in table.rows)

    def test_summarize_without_results(self, tmp_path):
        table = summarize(small_config(tmp_path), [])
        assert [row.status for row in table.rows] == ['empty'] * 3


@pytest.mark.slow
class TestDeepSeaOrdering:
    """Regret ordering of the three RLSVI agents on Deep Sea M=10."""

    def _table(self, tmp_path, beta, **overrides):
        layers = {'beta_grid': [beta], 'kappa_grid': [5.0], 'output_dir': str(tmp_path)}
        layers.update(overrides)
        return run_experiment(build_config(preset('beta_sweep'), layers), write=False)

    def test_large_beta_ordering(self, tmp_path):
        table = self._table(tmp_path, 10.0)
        informed = table.lookup('irlsvi', 10.0, 5.0)
        partial = table.lookup('pirlsvi', 10.0, 5.0)
        uninformed = table.lookup('urlsvi', 10.0, 5.0)
        assert informed.mean_cumreg_T + 2 * informed.stderr < partial.mean_cumreg_T - 2 * partial.stderr
        assert partial.mean_cumreg_T + 2 * partial.stderr < uninformed.mean_cumreg_T - 2 * uninformed.stderr

    def test_small_beta_informed_matches_partial(self, tmp_path):
        table = self._table(tmp_path, 0.1, agents='irlsvi, pirlsvi')
        informed = table.lookup('irlsvi', 0.1, 5.0)
        partial = table.lookup('pirlsvi', 0.1, 5.0)
        assert abs(informed.mean_cumreg_T - partial.mean_cumreg_T) <= 2 * (informed.stderr + partial.stderr)

    def test_robust_to_moderate_misspecification(self, tmp_path):
        config = build_config(preset('misspecification'), {
            'beta_grid': [5.0], 'kappa_grid': [5.0], 'beta_tilde_grid': [0.05, 2.5, 5.0, 50.0],
            'agents': 'irlsvi, pirlsvi', 'output_dir': str(tmp_path),
        })
        table = run_experiment(config, write=False)
        reference = table.lookup('irlsvi', 5.0, 5.0, 5.0).mean_cumreg_T
        for tilde in (2.5, 50.0):
            assert abs(table.lookup('irlsvi', 5.0, 5.0, tilde).mean_cumreg_T - reference) <= 0.25 * reference
        informed = table.lookup('irlsvi', 5.0, 5.0, 0.05)
        partial = table.lookup('pirlsvi', 5.0, 5.0, 0.05)
        assert abs(informed.mean_cumreg_T - partial.mean_cumreg_T) <= 2 * (informed.stderr + partial.stderr)

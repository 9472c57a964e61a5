"""
Command-line entry point for regret-forge.
Subcommands generate offline datasets, run experiments and sweeps, and
evaluate the closed-form and Monte-Carlo policy-error bounds.
"""

import argparse
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from environments import make_certified_hypothesis_set, make_environment
from error_handler import ConfigError, InvalidArgsError, RegretForgeError
from expert import episodes_for_ratio, generate_offline, save_dataset
from harness import DATA_STREAM, build_config, load_config_file, preset, run_experiment
from ipsrl import HypothesisSet, beta_threshold, epsilon_bound, estimate_epsilon_mc
from models import Competence, EnvConfig
from seeding import derive_stream
from tabular_mdp import TabularMDP

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# CLI flag dest -> ExperimentConfig key
EXPERIMENT_FLAGS = {
    'env': 'env', 'M': 'M', 'slip': 'slip', 'S': 'S', 'A': 'A', 'H': 'H', 'margin': 'margin',
    'env_seed': 'env_seed', 'n_hypotheses': 'n_hypotheses', 'agent': 'agents', 'T': 'T',
    'seeds': 'n_seeds', 'beta': 'beta_grid', 'kappa': 'kappa_grid', 'beta_tilde': 'beta_tilde_grid',
    'expert_lambda': 'expert_lambda', 'master_seed': 'master_seed', 'output': 'output_dir',
    'threads': 'threads', 'dataset': 'dataset_path', 'beta_mode': 'beta_mode', 'c0': 'c0',
    'alpha': 'alpha', 'full_map': 'use_full_map_loss', 'lambda2': 'lambda2',
    'sigma0_sq': 'sigma0_sq', 'sigma_sq': 'sigma_sq', 'buffer_B': 'buffer_B',
}

EPSILON_COLUMNS = {
    'L': 'L', 'mc_estimate_pi_tilde': 'mc_pi_tilde', 'mc_estimate_pi_hat': 'mc_pi_hat', 'bound_eps_L': 'bound',
    'n_trials': 'n_trials', 'se_pi_tilde': 'se_pi_tilde', 'se_pi_hat': 'se_pi_hat',
}


def configure_logging(level: str = "INFO", solver_log: Optional[str] = None):
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT, force=True)
    diagnostics = logging.getLogger("rlsvi.diagnostics")
    for old in list(diagnostics.handlers):
        diagnostics.removeHandler(old)
        old.close()
    diagnostics.setLevel(logging.DEBUG if solver_log else logging.NOTSET)
    diagnostics.propagate = not solver_log
    if solver_log:
        handler = logging.FileHandler(solver_log, mode='w')
        handler.setFormatter(logging.Formatter('%(message)s'))
        diagnostics.addHandler(handler)


def _add_env_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group('environment')
    group.add_argument('--env', choices=['deep_sea', 'random'], help='Environment family')
    group.add_argument('--M', type=int, help='Deep Sea size (also the horizon)')
    group.add_argument('--slip', type=float, help='Deep Sea right-move slip probability')
    group.add_argument('--S', type=int, help='Random MDP states')
    group.add_argument('--A', type=int, help='Random MDP actions')
    group.add_argument('--H', type=int, help='Random MDP horizon')
    group.add_argument('--margin', type=float, help='Certified minimum action gap')
    group.add_argument('--env-seed', dest='env_seed', type=int, help='Seed of the random environment')
    group.add_argument('--n-hypotheses', dest='n_hypotheses', type=int, help='Hypotheses for ipsrl')


def _add_experiment_flags(parser: argparse.ArgumentParser):
    _add_env_flags(parser)
    parser.add_argument('--config', help='Flat key = value experiment file')
    parser.add_argument('--agent', action='append', help='Agent(s): urlsvi, pirlsvi, irlsvi, ipsrl (comma list or repeat)')
    parser.add_argument('--T', type=int, help='Episodes per run')
    parser.add_argument('--seeds', type=int, help='Simulations per grid point')
    parser.add_argument('--beta', help='Expert deliberateness (comma list)')
    parser.add_argument('--kappa', help='Data ratio (comma list)')
    parser.add_argument('--beta-tilde', dest='beta_tilde', help='Beta told to the agents (comma list)')
    parser.add_argument('--lambda', dest='expert_lambda', type=float, help='Expert knowledgeability')
    parser.add_argument('--master-seed', dest='master_seed', type=int, help='Root seed')
    parser.add_argument('--output', help='Output directory')
    parser.add_argument('--threads', type=int, help='Worker threads')
    parser.add_argument('--dataset', help='Stored offline dataset reused for every seed')
    parser.add_argument('--beta-mode', dest='beta_mode', choices=['known', 'entropy', 'misspecified'])
    parser.add_argument('--c0', type=float, help='Entropy estimator constant')
    parser.add_argument('--alpha', type=float, help='RL/IL interpolation weight')
    parser.add_argument('--full-map', dest='full_map', action='store_true', default=None,
                        help='Exp(1)-weighted IL over all offline data with beta search')
    parser.add_argument('--lambda2', type=float, help='Exponential prior rate over beta')
    parser.add_argument('--sigma0-sq', dest='sigma0_sq', type=float, help='Prior variance')
    parser.add_argument('--sigma-sq', dest='sigma_sq', type=float, help='Target noise variance')
    parser.add_argument('--B', dest='buffer_B', type=int, help='Offline tuples per resample')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='regret-forge', description='Informed exploration experiments')
    parser.add_argument('--log-level', dest='log_level', default='INFO', help='Logging level')
    parser.add_argument('--solver-log', dest='solver_log', help='JSON-lines file for solver diagnostics')
    commands = parser.add_subparsers(dest='command', required=True)

    gen = commands.add_parser('gen-offline', help='Generate an offline expert dataset')
    _add_env_flags(gen)
    gen.add_argument('--env-json', dest='env_json', help='Stored MDP document instead of --env flags')
    gen.add_argument('--beta', type=float, default=10.0, help='Expert deliberateness')
    gen.add_argument('--lambda', dest='expert_lambda', type=float, default=math.inf, help='Expert knowledgeability')
    gen.add_argument('--kappa', type=float, default=5.0, help='Data ratio')
    gen.add_argument('--L', type=int, help='Episode count (overrides --kappa)')
    gen.add_argument('--master-seed', dest='master_seed', type=int, default=0)
    gen.add_argument('--output', default='offline.jsonl', help='JSON-lines output path')

    run = commands.add_parser('run', help='Run one experiment')
    _add_experiment_flags(run)

    sweep = commands.add_parser('sweep', help='Run a grid from a config file or preset')
    _add_experiment_flags(sweep)
    sweep.add_argument('--preset', choices=['beta_sweep', 'misspecification', 'learning_curve'])

    bound = commands.add_parser('bound', help='Print epsilon_L (and the beta threshold)')
    bound.add_argument('--S', type=int, required=True)
    bound.add_argument('--H', type=int, required=True)
    bound.add_argument('--L', type=int, required=True)
    bound.add_argument('--p', type=float, required=True, help='Minimum reachable probability')
    bound.add_argument('--A', type=int, help='Actions (for the beta threshold)')
    bound.add_argument('--delta', type=float, help='Action gap (for the beta threshold)')

    eps = commands.add_parser('estimate-eps', help='Monte-Carlo policy-error report')
    _add_env_flags(eps)
    eps.add_argument('--beta', type=float, help='Expert deliberateness (default twice the threshold)')
    eps.add_argument('--L', default='0,25,50,100,200', help='Offline episode counts (comma list)')
    eps.add_argument('--trials', type=int, default=2000)
    eps.add_argument('--master-seed', dest='master_seed', type=int, default=0)
    eps.add_argument('--threads', type=int, default=1)
    eps.add_argument('--output', help='CSV report path')
    return parser


def _experiment_layers(args: argparse.Namespace) -> List[Dict[str, Any]]:
    layers: List[Dict[str, Any]] = []
    if getattr(args, 'preset', None):
        layers.append(preset(args.preset))
    if args.config:
        layers.append(load_config_file(args.config))

    flags: Dict[str, Any] = {}
    for dest, key in EXPERIMENT_FLAGS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        flags[key] = ','.join(value) if dest == 'agent' else value
    layers.append(flags)
    return layers


def cmd_experiment(args: argparse.Namespace) -> int:
    config = build_config(*_experiment_layers(args))
    table = run_experiment(config)
    for row in table.rows:
        tilde = '' if row.beta_tilde is None else f" beta_tilde={row.beta_tilde:g}"
        print(f"{row.agent:8s} beta={row.beta:g} kappa={row.kappa:g}{tilde}: "
              f"{row.mean_cumreg_T:.3f} +/- {row.stderr:.3f} (n={row.n_seeds}, {row.status})")
    return EXIT_OK


def _env_config(args: argparse.Namespace, kind_default: str = 'deep_sea') -> EnvConfig:
    values = {key: getattr(args, key) for key in ('M', 'slip', 'S', 'A', 'H', 'margin', 'env_seed', 'n_hypotheses')
              if getattr(args, key, None) is not None}
    values['kind'] = args.env or kind_default
    return EnvConfig(**values)


def cmd_gen_offline(args: argparse.Namespace) -> int:
    if args.env_json:
        mdp = TabularMDP.from_json(Path(args.env_json).read_text())
        label = f"json:{args.env_json}"
    else:
        env = _env_config(args)
        mdp = make_environment(env)
        label = env.describe()

    S, A, H = mdp.shape
    L = args.L if args.L is not None else episodes_for_ratio(args.kappa, S, A, H)
    rng = derive_stream(args.master_seed, 0, 0, DATA_STREAM)
    data = generate_offline(mdp, Competence(beta=args.beta, lambda_=args.expert_lambda), L, rng,
                            kappa=None if args.L is not None else args.kappa, seed=args.master_seed,
                            env_label=label)
    path = save_dataset(data, args.output)
    print(f"{path} ({data.num_episodes} episodes, {len(data)} transitions)")
    return EXIT_OK


def cmd_bound(args: argparse.Namespace) -> int:
    if args.S < 1 or args.H < 1 or args.L < 0 or not 0.0 < args.p <= 1.0:
        raise InvalidArgsError("bound needs S >= 1, H >= 1, L >= 0 and p in (0, 1]")
    print(f"{epsilon_bound(args.S, args.H, args.L, args.p):.4g}")
    if args.A is not None and args.delta is not None:
        print(f"beta_threshold {beta_threshold(args.delta, args.p, args.H, args.A):.4g}")
    return EXIT_OK


def cmd_estimate_eps(args: argparse.Namespace) -> int:
    try:
        grid = [int(v) for v in args.L.split(',') if v.strip()]
    except ValueError:
        raise InvalidArgsError(f"--L must be a comma list of integers, got {args.L!r}")

    env = _env_config(args, kind_default='random')
    members = make_certified_hypothesis_set(env.S, env.A, env.H, env.n_hypotheses, env.margin,
                                            np.random.default_rng(env.env_seed))
    hs = HypothesisSet(members)
    beta = args.beta
    if beta is None:
        beta = 2.0 * beta_threshold(hs.margin(), hs.p_underbar(), env.H, env.A)
        logger.info(f"Using beta = {beta:.4g} (twice the threshold)")

    reports = [
        estimate_epsilon_mc(hs, beta, L, args.trials, derive_stream(args.master_seed, i), threads=args.threads)
        for i, L in enumerate(grid)
    ]
    frame = pd.DataFrame([report.model_dump() for report in reports]).rename(columns=EPSILON_COLUMNS)
    frame = frame[list(EPSILON_COLUMNS.values())]
    print(frame.to_csv(index=False), end='')
    if args.output:
        frame.to_csv(args.output, index=False)
    return EXIT_OK


COMMANDS = {
    'gen-offline': cmd_gen_offline,
    'run': cmd_experiment,
    'sweep': cmd_experiment,
    'bound': cmd_bound,
    'estimate-eps': cmd_estimate_eps,
}


def cli_main(argv: Optional[List[str]] = None) -> int:
    """
    Parse argv and run a subcommand.

    Returns:
        0 on success, 2 on usage or configuration errors, 3 on runtime failures
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG

    configure_logging(args.log_level, args.solver_log)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InvalidArgsError, ValidationError) as e:
        logger.error(f"Configuration error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except RegretForgeError as e:
        logger.error(f"Run failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(cli_main())

"""
Bootstrapped randomized least-squares value iteration agents.
uRLSVI ignores the offline data, piRLSVI fits its transitions, iRLSVI also
imitates the expert actions through a softmax log-loss.
"""

import json
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp, softmax

from error_handler import InvalidArgsError, SolverDivergedError
from expert import OfflineDataset, estimate_beta_entropy
from models import AgentKind, BetaMode, RegretCurve, RlsviConfig
from seeding import RandomStream
from tabular_mdp import (
    QTable, TabularMDP, Trajectory, compute_regret, sample_initial_state, sample_next_state,
)

logger = logging.getLogger(__name__)
diagnostics = logging.getLogger("rlsvi.diagnostics")

MAX_HALVINGS = 30
# Accept a damped step whose objective rises by at most this relative amount.
ARMIJO_SLACK = 1e-12


class TransitionBuffer:
    """
    Append-only store of (h, s, a, s', r) entries for one agent.

    Every finished episode also contributes a period-H entry (s_H, r_H(s_H)),
    which fits Q_H(s_H, a) for all actions a.
    """

    def __init__(self, num_states: int, num_actions: int, horizon: int):
        self.num_states = num_states
        self.num_actions = num_actions
        self.horizon = horizon
        self._chunks: List[Tuple[np.ndarray, ...]] = []
        self._cache: Optional[Tuple[np.ndarray, ...]] = None

    def __len__(self) -> int:
        return sum(len(chunk[0]) for chunk in self._chunks)

    def _append(self, period, state, action, next_state, reward):
        self._chunks.append((
            np.asarray(period, dtype=np.int64), np.asarray(state, dtype=np.int64),
            np.asarray(action, dtype=np.int64), np.asarray(next_state, dtype=np.int64),
            np.asarray(reward, dtype=float),
        ))
        self._cache = None

    def add_trajectory(self, traj: Trajectory):
        H = self.horizon
        s_final = traj.states[H]
        self._append(
            np.arange(H + 1),
            traj.states,
            np.append(traj.actions, 0),
            np.append(traj.states[1:], s_final),
            np.append(traj.rewards, traj.terminal_reward),
        )

    def extend(self, data: OfflineDataset):
        """Add every offline transition and the terminal entry of every offline episode."""
        if not len(data):
            return
        final = data.final_states
        self._append(data.period, data.state, data.action, data.next_state, data.reward)
        self._append(np.full(len(final), self.horizon), final, np.zeros(len(final)), final, data.terminal_reward)

    def arrays(self) -> Tuple[np.ndarray, ...]:
        """(period, state, action, next_state, reward) columns in insertion order."""
        if self._cache is None:
            if self._chunks:
                self._cache = tuple(np.concatenate(cols) for cols in zip(*self._chunks))
            else:
                empty_int = np.empty(0, dtype=np.int64)
                self._cache = (empty_int, empty_int, empty_int, empty_int, np.empty(0))
        return self._cache


@dataclass(frozen=True)
class PerturbedBatch:
    """
    Randomness of one Q-hat resample.

    prior_draw: Q^prior, shape (H+1, S, A), entries N(0, sigma0^2)
    noise: one N(0, sigma^2) target perturbation per buffer entry
    il_index: offline transitions entering the imitation loss
    il_weights: weight of each of those entries (1, or Exp(1) in full MAP mode)
    """
    prior_draw: np.ndarray
    noise: np.ndarray
    il_index: np.ndarray
    il_weights: np.ndarray


def rlsvi_row_solve(targets: Sequence[float], prior: float, sigma0_sq: float, weight: float = 1.0) -> float:
    """
    Minimizer of (weight/2) sum_d (q - y_d)^2 + (q - prior)^2 / (2 sigma0^2).

    Closed form (weight * sum y + prior / sigma0^2) / (weight * n + 1 / sigma0^2).
    """
    targets = np.asarray(targets, dtype=float)
    return float((weight * sigma0_sq * targets.sum() + prior) / (weight * sigma0_sq * len(targets) + 1.0))


def il_loss(q_row: np.ndarray, counts: np.ndarray, beta: float) -> float:
    """sum_a counts[a] * [log sum_b exp(beta q[b]) - beta q[a]]."""
    if beta < 0:
        raise InvalidArgsError(f"beta must be non-negative, got {beta}")
    q_row = np.asarray(q_row, dtype=float)
    counts = np.asarray(counts, dtype=float)
    return float(counts.sum() * logsumexp(beta * q_row) - beta * counts @ q_row)


def il_loss_grad(q_row: np.ndarray, counts: np.ndarray, beta: float) -> np.ndarray:
    """Gradient beta * (C softmax(beta q) - counts) of il_loss in q."""
    counts = np.asarray(counts, dtype=float)
    return beta * (counts.sum() * softmax(beta * np.asarray(q_row, dtype=float)) - counts)


def combined_loss_alpha(rlsvi_part: float, il_part: float, alpha: float, lambda2: float, beta: float) -> float:
    """alpha * L_RLSVI + (1 - alpha) * L_IL + lambda2 * beta."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidArgsError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * rlsvi_part + (1.0 - alpha) * il_part + lambda2 * beta


def loss_weights(config: RlsviConfig) -> Tuple[float, float]:
    """
    (TD weight, IL weight) of the agent's row objective.

    alpha is rescaled so the larger weight is 1; the Gaussian prior term always
    has unit weight. Agents without an imitation term use TD weight 1.
    """
    if config.agent_kind != AgentKind.INFORMED:
        return 1.0, 0.0
    scale = max(config.alpha, 1.0 - config.alpha)
    return config.alpha / scale, (1.0 - config.alpha) / scale


def row_objective(q_row: np.ndarray, target_counts: np.ndarray, target_sums: np.ndarray,
                  il_counts: np.ndarray, beta: float, prior_row: np.ndarray, sigma0_sq: float,
                  td_weight: float = 1.0, il_weight: float = 1.0) -> float:
    """
    Row objective up to a constant:
    td_weight * sum_a (n_a q_a^2 / 2 - q_a sum y_a) + |q - prior|^2 / (2 sigma0^2) + il_weight * il_loss.
    """
    q_row = np.asarray(q_row, dtype=float)
    td = float(0.5 * target_counts @ q_row ** 2 - target_sums @ q_row)
    ridge = float(((q_row - prior_row) ** 2).sum()) / (2.0 * sigma0_sq)
    return td_weight * td + ridge + il_weight * il_loss(q_row, il_counts, beta)


def _ridge_rows(target_counts, target_sums, prior, sigma0_sq: float, td_weight: float) -> np.ndarray:
    return (td_weight * sigma0_sq * target_sums + prior) / (td_weight * sigma0_sq * target_counts + 1.0)


def _newton_row(target_counts: np.ndarray, target_sums: np.ndarray, il_counts: np.ndarray, beta: float,
                prior_row: np.ndarray, sigma0_sq: float, td_weight: float, il_weight: float,
                tol: float, max_iters: int) -> Tuple[np.ndarray, int, float]:
    q = _ridge_rows(target_counts, target_sums, prior_row, sigma0_sq, td_weight)
    total = float(il_counts.sum())
    curvature = td_weight * target_counts + 1.0 / sigma0_sq

    def objective(x):
        return row_objective(x, target_counts, target_sums, il_counts, beta, prior_row, sigma0_sq,
                             td_weight, il_weight)

    f = objective(q)
    grad_norm = float('inf')
    for iteration in range(1, max_iters + 1):
        pi = softmax(beta * q)
        grad = (td_weight * (target_counts * q - target_sums) + (q - prior_row) / sigma0_sq
                + il_weight * beta * (total * pi - il_counts))
        grad_norm = float(np.abs(grad).max())
        if grad_norm <= tol:
            return q, iteration, grad_norm

        hessian = np.diag(curvature) + il_weight * total * beta ** 2 * (np.diag(pi) - np.outer(pi, pi))
        step = np.linalg.solve(hessian, grad)
        if np.abs(step).max() <= tol:
            return q - step, iteration, grad_norm

        t = 1.0
        for _ in range(MAX_HALVINGS):
            candidate = q - t * step
            f_new = objective(candidate)
            if f_new <= f + ARMIJO_SLACK * (1.0 + abs(f)):
                q, f = candidate, f_new
                break
            t *= 0.5
        else:
            # no representable decrease left along the Newton direction
            if np.abs(step).max() <= np.sqrt(tol):
                return q, iteration, grad_norm
            break

    raise SolverDivergedError(period=-1, iterations=max_iters, grad_norm=grad_norm)


def irlsvi_row_solve(target_counts: np.ndarray, target_sums: np.ndarray, il_counts: np.ndarray, beta: float,
                     prior_row: np.ndarray, config: RlsviConfig, td_weight: float = 1.0,
                     il_weight: float = 1.0) -> np.ndarray:
    """
    Minimize the row objective over Q(s, .) by damped Newton.

    Quadratic data enters through per-action target counts and sums, since the
    TD term depends on the targets only through them. Starts from the ridge
    point and returns it unchanged when the imitation term is constant.

    Raises:
        SolverDivergedError: tolerance not met within config.solver_max_iters
    """
    if beta < 0:
        raise InvalidArgsError(f"beta must be non-negative, got {beta}")
    target_counts = np.asarray(target_counts, dtype=float)
    target_sums = np.asarray(target_sums, dtype=float)
    il_counts = np.asarray(il_counts, dtype=float)
    prior_row = np.asarray(prior_row, dtype=float)

    if beta == 0.0 or il_weight == 0.0 or not il_counts.any():
        return _ridge_rows(target_counts, target_sums, prior_row, config.sigma0_sq, td_weight)

    row, _, _ = _newton_row(target_counts, target_sums, il_counts, beta, prior_row, config.sigma0_sq,
                            td_weight, il_weight, config.solver_tol, config.solver_max_iters)
    return row


def draw_perturbations(buffer_size: int, offline_size: int, shape: Tuple[int, int, int],
                       config: RlsviConfig, rng: RandomStream) -> PerturbedBatch:
    """
    Fresh randomness for one resample, drawn in a fixed order.

    Q^prior, then target noise, then the B-subset of offline transitions
    (or Exp(1) weights over all of them in full MAP mode).
    """
    S, A, H = shape
    prior_draw = rng.normal(0.0, np.sqrt(config.sigma0_sq), size=(H + 1, S, A))
    noise = rng.normal(0.0, np.sqrt(config.sigma_sq), size=buffer_size)

    if config.use_full_map_loss:
        il_index = np.arange(offline_size)
        il_weights = rng.exponential(1.0, size=offline_size)
    elif offline_size:
        il_index = np.sort(rng.choice(offline_size, min(config.buffer_B, offline_size), replace=False))
        il_weights = np.ones(len(il_index))
    else:
        il_index = np.empty(0, dtype=np.int64)
        il_weights = np.empty(0)
    return PerturbedBatch(prior_draw, noise, il_index, il_weights)


def _il_counts(data: OfflineDataset, batch: PerturbedBatch, shape: Tuple[int, int, int]) -> np.ndarray:
    S, A, H = shape
    counts = np.zeros((H, S, A))
    idx = batch.il_index
    np.add.at(counts, (data.period[idx], data.state[idx], data.action[idx]), batch.il_weights)
    return counts


def solve_backward(columns: Tuple[np.ndarray, ...], batch: PerturbedBatch, il_counts: np.ndarray,
                   beta: float, config: RlsviConfig, shape: Tuple[int, int, int]) -> Tuple[QTable, float, float]:
    """
    One backward pass h = H..0 with Q-hat_{H+1} = 0.

    Returns the Q-hat table with the TD and imitation parts of the loss at it.
    """
    S, A, H = shape
    period, state, action, next_state, reward = columns
    td_weight, il_weight = loss_weights(config)
    imitate = il_weight > 0.0 and beta > 0.0

    q_hat = np.zeros((H + 1, S, A))
    next_max = np.zeros(S)
    td_part = il_part = 0.0
    for h in range(H, -1, -1):
        mask = period == h
        s = state[mask]
        y = reward[mask] + batch.noise[mask]
        if h == H:
            n = np.repeat(np.bincount(s, minlength=S)[:, None], A, axis=1).astype(float)
            sums = np.repeat(np.bincount(s, weights=y, minlength=S)[:, None], A, axis=1)
        else:
            y = y + next_max[next_state[mask]]
            cell = s * A + action[mask]
            n = np.bincount(cell, minlength=S * A).reshape(S, A).astype(float)
            sums = np.bincount(cell, weights=y, minlength=S * A).reshape(S, A)

        q_h = _ridge_rows(n, sums, batch.prior_draw[h], config.sigma0_sq, td_weight)
        if imitate and h < H:
            for row in np.flatnonzero(il_counts[h].sum(axis=1) > 0):
                try:
                    q_h[row], iterations, grad_norm = _newton_row(
                        n[row], sums[row], il_counts[h, row], beta, batch.prior_draw[h, row],
                        config.sigma0_sq, td_weight, il_weight, config.solver_tol, config.solver_max_iters,
                    )
                except SolverDivergedError as e:
                    raise SolverDivergedError(h, e.iterations, e.grad_norm) from e
                if diagnostics.isEnabledFor(logging.DEBUG):
                    diagnostics.debug(json.dumps({
                        'period': h, 'state': int(row), 'iterations': iterations, 'grad_norm': grad_norm,
                    }))
                il_part += il_loss(q_h[row], il_counts[h, row], beta)

        if h == H:
            td_part += 0.5 * float(((q_h[s] - y[:, None]) ** 2).sum())
        else:
            td_part += 0.5 * float(((q_h[s, action[mask]] - y) ** 2).sum())
        q_hat[h] = q_h
        next_max = q_h.max(axis=1)

    return q_hat, td_part, il_part


def optimize_beta(q_hat: QTable, il_counts: np.ndarray, config: RlsviConfig) -> float:
    """
    Minimize il_weight * IL(beta; Q-hat) + lambda2 * beta over [0, beta_search_upper] with Q-hat held fixed.
    """
    _, il_weight = loss_weights(config)
    q = q_hat[:il_counts.shape[0]]
    totals = il_counts.sum(axis=2)
    observed = float((il_counts * q).sum())

    def objective(beta: float) -> float:
        return il_weight * (float((totals * logsumexp(beta * q, axis=2)).sum()) - beta * observed) + config.lambda2 * beta

    result = minimize_scalar(objective, bounds=(0.0, config.beta_search_upper), method='bounded',
                             options={'xatol': 1e-6})
    return float(result.x)


def sample_q_hat(online_buffer: TransitionBuffer, offline_data: OfflineDataset, config: RlsviConfig,
                 beta: float, rng: RandomStream, offline_buffer: Optional[TransitionBuffer] = None) -> QTable:
    """
    Draw one randomized Q-hat table.

    The regression data is the online buffer, preceded by the offline
    transitions for piRLSVI and iRLSVI. iRLSVI adds the imitation loss on the
    sampled offline tuples of each period.

    Args:
        online_buffer: The agent's own transitions
        offline_data: Expert dataset D0
        config: Agent hyperparameters
        beta: Deliberateness plugged into the imitation loss
        rng: Stream consumed by this resample
        offline_buffer: Prebuilt buffer of offline_data (built here when omitted)

    Raises:
        SolverDivergedError: a row solve failed to converge
    """
    if beta < 0:
        raise InvalidArgsError(f"beta must be non-negative, got {beta}")
    shape = (online_buffer.num_states, online_buffer.num_actions, online_buffer.horizon)

    offline_size = len(offline_data)
    if config.agent_kind == AgentKind.UNINFORMED:
        columns = online_buffer.arrays()
        offline_size = 0
    else:
        if offline_buffer is None:
            offline_buffer = TransitionBuffer(*shape)
            offline_buffer.extend(offline_data)
        columns = tuple(np.concatenate(pair) for pair in zip(offline_buffer.arrays(), online_buffer.arrays()))

    batch = draw_perturbations(len(columns[0]), offline_size, shape, config, rng)
    il_counts = _il_counts(offline_data, batch, shape)
    q_hat, td_part, il_part = solve_backward(columns, batch, il_counts, beta, config, shape)

    if config.use_full_map_loss and config.agent_kind == AgentKind.INFORMED:
        for _ in range(config.map_rounds):
            beta = optimize_beta(q_hat, il_counts, config)
            q_hat, td_part, il_part = solve_backward(columns, batch, il_counts, beta, config, shape)
        lambda2 = config.lambda2
    else:
        lambda2 = 0.0

    if diagnostics.isEnabledFor(logging.DEBUG):
        diagnostics.debug(json.dumps({
            'beta': beta, 'buffer': len(columns[0]), 'td_loss': td_part, 'il_loss': il_part,
            'loss': combined_loss_alpha(td_part, il_part, config.alpha, lambda2, beta),
        }))
    return q_hat


def resolve_beta(offline_data: OfflineDataset, config: RlsviConfig) -> float:
    """The deliberateness the agent believes in, fixed for the whole run."""
    if config.beta_mode != BetaMode.ENTROPY:
        return float(config.beta_value)
    if not len(offline_data):
        logger.warning("Entropy beta mode with an empty offline dataset; using beta=0")
        return 0.0
    return estimate_beta_entropy(offline_data, config.c0, config.beta_max)


def greedy_action(q_row: np.ndarray, rng: RandomStream) -> int:
    """argmax with uniform tie-breaking; consumes rng only when a tie exists."""
    best = np.flatnonzero(q_row == q_row.max())
    if len(best) == 1:
        return int(best[0])
    return int(rng.choice(best))


def play_episode(env: TabularMDP, q_hat: QTable, rng: RandomStream) -> Trajectory:
    S, A, H = env.shape
    states = np.empty(H + 1, dtype=np.int64)
    actions = np.empty(H, dtype=np.int64)
    rewards = np.empty(H)

    states[0] = sample_initial_state(env, rng)
    for h in range(H):
        s = int(states[h])
        actions[h] = greedy_action(q_hat[h, s], rng)
        rewards[h] = env.rewards[h, s, actions[h]]
        states[h + 1] = sample_next_state(env, h, s, int(actions[h]), rng)
    return Trajectory(states, actions, rewards, env.terminal_reward(int(states[H])))


def run_agent(env: TabularMDP, offline_data: OfflineDataset, config: RlsviConfig, T: int,
              rng: RandomStream, seed: int = 0) -> RegretCurve:
    """
    Run an RLSVI agent for T episodes.

    Each episode resamples Q-hat from all data so far, acts greedily on it and
    appends the trajectory to the online buffer.

    Raises:
        SolverDivergedError: with the failing episode index attached
    """
    meta = offline_data.metadata
    if (meta.num_states, meta.num_actions, meta.horizon) != env.shape:
        raise InvalidArgsError(f"offline data shape {(meta.num_states, meta.num_actions, meta.horizon)} "
                               f"does not match environment {env.shape}")
    if T < 1:
        raise InvalidArgsError(f"T must be at least 1, got {T}")

    beta = resolve_beta(offline_data, config)
    online = TransitionBuffer(*env.shape)
    offline = TransitionBuffer(*env.shape)
    offline.extend(offline_data)

    logger.info(f"Starting {config.agent_kind.value} for {T} episodes "
                f"(beta={beta:.4g}, |D0|={len(offline_data)}, alpha={config.alpha})")

    returns = np.empty(T)
    for t in range(T):
        try:
            q_hat = sample_q_hat(online, offline_data, config, beta, rng, offline_buffer=offline)
        except SolverDivergedError as e:
            e.episode = t
            raise
        traj = play_episode(env, q_hat, rng)
        online.add_trajectory(traj)
        returns[t] = traj.total_return
        logger.debug(f"{config.agent_kind.value} episode {t}: return {returns[t]:.4f}")

    return compute_regret(
        env, returns, seed=seed, agent=config.agent_kind.value,
        config=config.model_dump(mode='json'),
    )

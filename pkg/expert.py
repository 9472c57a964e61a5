"""
Imperfect-expert model for regret-forge.
Softmax experts with competence (beta, lambda), offline demonstration datasets,
their JSON-lines persistence, and the entropy-based deliberateness estimator.
"""

import json
import logging
import math
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.special import softmax
from scipy.stats import entropy

from error_handler import EmptyDatasetError, InvalidArgsError
from models import Competence, DatasetMetadata
from seeding import RandomStream
from tabular_mdp import QTable, StochasticPolicy, TabularMDP, backward_induction, simulate_episode

logger = logging.getLogger(__name__)

BETA_MAX = 1e4


class OfflineDataset(BaseModel):
    """
    Expert trajectories D0: N = H*L transitions stored column-wise, plus the
    terminal reward of every episode and generation metadata.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    episode: np.ndarray = Field(..., description="Episode index l of each transition")
    period: np.ndarray = Field(..., description="Period h of each transition")
    state: np.ndarray = Field(..., description="State s")
    action: np.ndarray = Field(..., description="Expert action a")
    next_state: np.ndarray = Field(..., description="Next state s'")
    reward: np.ndarray = Field(..., description="Reward r_h(s, a)")
    terminal_reward: np.ndarray = Field(..., description="r_H(s_H) per episode")
    metadata: DatasetMetadata

    @field_validator('episode', 'period', 'state', 'action', 'next_state', mode='before')
    @classmethod
    def _int_column(cls, value):
        arr = np.array(value, dtype=np.int64).reshape(-1)
        arr.flags.writeable = False
        return arr

    @field_validator('reward', 'terminal_reward', mode='before')
    @classmethod
    def _float_column(cls, value):
        arr = np.array(value, dtype=float).reshape(-1)
        arr.flags.writeable = False
        return arr

    @model_validator(mode='after')
    def _check_episodes(self):
        H = self.metadata.horizon
        L = len(self.terminal_reward)
        n = len(self.period)
        for column in (self.episode, self.state, self.action, self.next_state, self.reward):
            if len(column) != n:
                raise InvalidArgsError("dataset columns differ in length")
        if n != H * L:
            raise InvalidArgsError(f"{n} transitions do not form {L} episodes of horizon {H}")
        if n and (not np.array_equal(self.period, np.tile(np.arange(H), L))
                  or not np.array_equal(self.episode, np.repeat(np.arange(L), H))):
            raise InvalidArgsError("each episode must list periods 0..H-1 in order")
        return self

    @property
    def num_episodes(self) -> int:
        return len(self.terminal_reward)

    @property
    def final_states(self) -> np.ndarray:
        """s_H of every episode."""
        return self.next_state[self.metadata.horizon - 1::self.metadata.horizon]

    def __len__(self) -> int:
        return len(self.period)

    def counts(self) -> np.ndarray:
        """N_h(s, a), shape (H, S, A)."""
        meta = self.metadata
        table = np.zeros((meta.horizon, meta.num_states, meta.num_actions), dtype=np.int64)
        np.add.at(table, (self.period, self.state, self.action), 1)
        return table

    def action_counts(self) -> np.ndarray:
        return np.bincount(self.action, minlength=self.metadata.num_actions)

    def records(self) -> Iterator[dict]:
        """One dict per transition; lines closing an episode also carry "rH"."""
        closing = iter(self.terminal_reward.tolist())
        columns = (self.episode, self.period, self.state, self.action, self.next_state, self.reward)
        for l, h, s, a, sn, r in zip(*(column.tolist() for column in columns)):
            record = {"l": l, "h": h, "s": s, "a": a, "sn": sn, "r": r}
            if h == self.metadata.horizon - 1:
                record["rH"] = next(closing)
            yield record

    @classmethod
    def empty(cls, metadata: DatasetMetadata) -> "OfflineDataset":
        none = np.empty(0)
        return cls(episode=none, period=none, state=none, action=none, next_state=none,
                   reward=none, terminal_reward=none, metadata=metadata)


def softmax_policy(q: QTable, beta: float) -> StochasticPolicy:
    """
    Expert policy pi^beta_h(a|s) proportional to exp(beta * Q_h(s, a)), for h < H.
    """
    if beta < 0:
        raise InvalidArgsError(f"beta must be non-negative, got {beta}")
    return StochasticPolicy(softmax(beta * q[:-1], axis=-1))


def perturb_q(q: QTable, lambda_: float, rng: RandomStream) -> QTable:
    """
    Expert's noisy knowledge Q~ ~ N(Q*, I / lambda^2); exact Q* when lambda is infinite.
    """
    if not lambda_ > 0:
        raise InvalidArgsError(f"lambda must be positive or infinite, got {lambda_}")
    if math.isinf(lambda_):
        return q
    return q + rng.standard_normal(q.shape) / lambda_


def episodes_for_ratio(kappa: float, num_states: int, num_actions: int, horizon: int) -> int:
    """L = round(kappa * |A| * |S| / H), halves rounded up."""
    return int(math.floor(kappa * num_actions * num_states / horizon + 0.5))


def generate_offline(mdp: TabularMDP, comp: Competence, L: int, rng: RandomStream,
                     kappa: Optional[float] = None, seed: Optional[int] = None,
                     env_label: str = "") -> OfflineDataset:
    """
    Simulate L expert episodes.

    One expert draws Q~ once, then plays softmax(beta * Q~) for every episode.
    """
    if L < 0:
        raise InvalidArgsError(f"L must be non-negative, got {L}")

    metadata = DatasetMetadata(
        env=env_label, beta=comp.beta, lambda_=comp.lambda_, kappa=kappa, seed=seed,
        num_states=mdp.num_states, num_actions=mdp.num_actions, horizon=mdp.horizon,
    )
    q_tilde = perturb_q(backward_induction(mdp), comp.lambda_, rng)
    policy = softmax_policy(q_tilde, comp.beta)

    H = mdp.horizon
    states = np.empty((L, H), dtype=np.int64)
    actions = np.empty((L, H), dtype=np.int64)
    next_states = np.empty((L, H), dtype=np.int64)
    rewards = np.empty((L, H))
    terminal = np.empty(L)
    for l in range(L):
        traj = simulate_episode(mdp, policy, rng)
        states[l] = traj.states[:-1]
        next_states[l] = traj.states[1:]
        actions[l] = traj.actions
        rewards[l] = traj.rewards
        terminal[l] = traj.terminal_reward

    logger.debug(f"Generated {L} expert episodes (beta={comp.beta}, lambda={comp.lambda_})")
    return OfflineDataset(
        episode=np.repeat(np.arange(L), H), period=np.tile(np.arange(H), L),
        state=states, action=actions, next_state=next_states, reward=rewards,
        terminal_reward=terminal, metadata=metadata,
    )


def estimate_beta_entropy(data: OfflineDataset, c0: float = 1.0, beta_max: float = BETA_MAX) -> float:
    """
    Deliberateness estimate c0 / H(mu_A) from the empirical action marginal.

    Uses natural-log entropy; a constant action record (zero entropy) is clamped to beta_max.

    Raises:
        EmptyDatasetError: no recorded actions
    """
    if len(data) == 0:
        raise EmptyDatasetError("cannot estimate beta from an empty dataset")
    if c0 <= 0:
        raise InvalidArgsError(f"c0 must be positive, got {c0}")

    h_mu = float(entropy(data.action_counts()))
    if h_mu <= 0.0:
        logger.warning(f"Offline actions are constant; clamping beta estimate to {beta_max}")
        return beta_max
    return min(c0 / h_mu, beta_max)


def _metadata_path(path: Path) -> Path:
    return path.with_name(path.stem + '.meta.json')


def save_dataset(data: OfflineDataset, path: Union[str, Path]) -> Path:
    """
    Write one JSON object per transition plus a metadata sidecar.

    Lines closing an episode (h = H-1) also carry the terminal reward as "rH".
    Floats are written with their shortest round-trip repr, so a reload is exact.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(record) + "\n" for record in data.records()))
    _metadata_path(path).write_text(data.metadata.model_dump_json(by_alias=True))

    logger.info(f"Wrote {data.num_episodes} episodes to {path}")
    return path


def load_dataset(path: Union[str, Path]) -> OfflineDataset:
    path = Path(path)
    metadata = DatasetMetadata.model_validate_json(_metadata_path(path).read_text())
    if path.stat().st_size == 0:
        return OfflineDataset.empty(metadata)

    frame = pd.read_json(path, orient='records', lines=True, precise_float=True)
    terminal = frame.loc[frame['h'] == metadata.horizon - 1, 'rH'].to_numpy(dtype=float)
    return OfflineDataset(
        episode=frame['l'], period=frame['h'], state=frame['s'], action=frame['a'],
        next_state=frame['sn'], reward=frame['r'], terminal_reward=terminal, metadata=metadata,
    )

"""
Finite-horizon tabular MDPs for regret-forge.
Exact dynamic programming, policy evaluation, simulation and the structural
quantities (action gap, minimum reachable probability) used by the theory.
"""

import json
import logging
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from error_handler import InvalidArgsError, InvalidMDPError, MarginZeroError
from models import RegretCurve
from seeding import RandomStream

logger = logging.getLogger(__name__)

PROB_TOL = 1e-12
# Occupancy below this is floating-point dust, not a reachable state.
REACH_TOL = 1e-15

QTable = np.ndarray  # shape (H+1, S, A); Q_H(s, .) = r_H(s), Q_{H+1} = 0 implicitly


def _frozen_array(value, dtype=float) -> np.ndarray:
    arr = np.array(value, dtype=dtype)
    arr.flags.writeable = False
    return arr


class TabularMDP(BaseModel):
    """
    Finite-horizon MDP (S, A, H, P, r, nu); an instance is one hypothesis theta.

    transitions[h, s, a, s'] = P_h(s'|s, a) for h < H.
    rewards[h, s, a] = r_h(s, a) for h <= H, with rewards[H] constant in a.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True, populate_by_name=True)

    num_states: int = Field(..., alias="S", ge=1, description="Number of states")
    num_actions: int = Field(..., alias="A", ge=1, description="Number of actions")
    horizon: int = Field(..., alias="H", ge=1, description="Decision periods per episode")
    transitions: np.ndarray = Field(..., alias="P", description="P_h(s'|s,a), shape (H, S, A, S)")
    rewards: np.ndarray = Field(..., alias="r", description="r_h(s,a), shape (H+1, S, A)")
    initial_dist: np.ndarray = Field(..., alias="nu", description="Initial state distribution, shape (S,)")

    @field_validator('transitions', 'rewards', 'initial_dist', mode='before')
    @classmethod
    def _as_float_array(cls, value):
        return _frozen_array(value)

    @model_validator(mode='after')
    def _check_probabilities(self):
        S, A, H = self.num_states, self.num_actions, self.horizon
        P, r, nu = self.transitions, self.rewards, self.initial_dist

        if P.shape != (H, S, A, S):
            raise InvalidMDPError(f"transitions have shape {P.shape}, expected {(H, S, A, S)}")
        if r.shape != (H + 1, S, A):
            raise InvalidMDPError(f"rewards have shape {r.shape}, expected {(H + 1, S, A)}")
        if nu.shape != (S,):
            raise InvalidMDPError(f"initial_dist has shape {nu.shape}, expected {(S,)}")

        bad = (P < 0).any(axis=-1) | (np.abs(P.sum(axis=-1) - 1.0) > PROB_TOL) | ~np.isfinite(P).all(axis=-1)
        if bad.any():
            h, s, a = (int(i) for i in np.argwhere(bad)[0])
            raise InvalidMDPError(
                f"P_{h}(.|s={s}, a={a}) is not a probability vector (sum={P[h, s, a].sum()!r})",
                index=(h, s, a),
            )
        if (nu < 0).any() or abs(nu.sum() - 1.0) > PROB_TOL:
            raise InvalidMDPError(f"initial_dist is not a probability vector (sum={nu.sum()!r})")
        if not np.isfinite(r).all():
            raise InvalidMDPError("rewards must be finite")
        if not np.all(r[H] == r[H][:, :1]):
            s = int(np.argwhere((r[H] != r[H][:, :1]).any(axis=1))[0, 0])
            raise InvalidMDPError(f"terminal reward r_H(s={s}, .) depends on the action", index=(H, s))
        return self

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.num_states, self.num_actions, self.horizon

    def terminal_reward(self, state: int) -> float:
        return float(self.rewards[self.horizon, state, 0])

    def to_json(self) -> str:
        """Serialize to the documented {"S","A","H","nu","r","P"} document."""
        return json.dumps({
            'S': self.num_states,
            'A': self.num_actions,
            'H': self.horizon,
            'nu': self.initial_dist.tolist(),
            'r': self.rewards.tolist(),
            'P': self.transitions.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "TabularMDP":
        doc = json.loads(text)
        return cls(S=doc['S'], A=doc['A'], H=doc['H'], nu=doc['nu'], r=doc['r'], P=doc['P'])


@dataclass(frozen=True)
class DeterministicPolicy:
    """actions[h, s] for h < H."""
    actions: np.ndarray

    def __post_init__(self):
        if self.actions.ndim != 2 or (self.actions < 0).any():
            raise InvalidArgsError("deterministic policy must be a non-negative (H, S) integer array")

    def to_stochastic(self, num_actions: int) -> "StochasticPolicy":
        if (self.actions >= num_actions).any():
            raise InvalidArgsError(f"policy uses an action index >= {num_actions}")
        probs = np.zeros(self.actions.shape + (num_actions,))
        np.put_along_axis(probs, self.actions[..., None], 1.0, axis=-1)
        return StochasticPolicy(probs)

    def __eq__(self, other) -> bool:
        return isinstance(other, DeterministicPolicy) and np.array_equal(self.actions, other.actions)

    def __hash__(self) -> int:
        return hash(self.actions.tobytes())


@dataclass(frozen=True)
class StochasticPolicy:
    """probs[h, s, a] = pi_h(a|s) for h < H."""
    probs: np.ndarray

    def __post_init__(self):
        if self.probs.ndim != 3:
            raise InvalidArgsError("stochastic policy must be an (H, S, A) array")
        if (self.probs < 0).any() or not np.allclose(self.probs.sum(axis=-1), 1.0, rtol=0.0, atol=1e-10):
            raise InvalidArgsError("stochastic policy rows must be probability vectors")


PolicyLike = Union[DeterministicPolicy, StochasticPolicy]


@dataclass(frozen=True)
class Trajectory:
    """
    One H-step episode: states s_0..s_H, actions a_0..a_{H-1}, rewards r_0..r_{H-1},
    and the terminal reward r_H(s_H) recorded separately.
    """
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminal_reward: float

    @property
    def horizon(self) -> int:
        return len(self.actions)

    @property
    def total_return(self) -> float:
        return float(self.rewards.sum()) + self.terminal_reward

    def steps(self) -> Iterator[Tuple[int, int, int, int, float]]:
        """(h, state, action, next_state, reward) in period order."""
        for h in range(self.horizon):
            yield h, int(self.states[h]), int(self.actions[h]), int(self.states[h + 1]), float(self.rewards[h])


def _as_stochastic(policy: PolicyLike, num_actions: int) -> StochasticPolicy:
    if isinstance(policy, DeterministicPolicy):
        return policy.to_stochastic(num_actions)
    return policy


def backward_induction(mdp: TabularMDP) -> QTable:
    """
    Solve the Bellman equation exactly.

    Q_H(s, a) = r_H(s); Q_h(s, a) = r_h(s, a) + sum_s' P_h(s'|s, a) max_b Q_{h+1}(s', b).
    """
    H = mdp.horizon
    q = np.empty_like(mdp.rewards)
    q[H] = mdp.rewards[H]
    for h in range(H - 1, -1, -1):
        v_next = q[h + 1].max(axis=1)
        q[h] = mdp.rewards[h] + mdp.transitions[h] @ v_next
    return q


def bellman_residual(mdp: TabularMDP, q: QTable) -> float:
    """Largest absolute violation of the Bellman equation over all (h, s, a)."""
    H = mdp.horizon
    worst = float(np.abs(q[H] - mdp.rewards[H]).max())
    for h in range(H):
        target = mdp.rewards[h] + mdp.transitions[h] @ q[h + 1].max(axis=1)
        worst = max(worst, float(np.abs(q[h] - target).max()))
    return worst


def optimal_value(mdp: TabularMDP, q: QTable = None) -> float:
    """sum_s nu(s) V*_0(s), including the terminal reward."""
    if q is None:
        q = backward_induction(mdp)
    return float(mdp.initial_dist @ q[0].max(axis=1))


def compute_regret(mdp: TabularMDP, returns: Sequence[float], seed: int = 0, agent: str = "",
                   config: Optional[Dict[str, Any]] = None, q: QTable = None) -> RegretCurve:
    """Per-episode regret sum_s nu(s) V*_0(s) - return, with its prefix sums."""
    return RegretCurve.from_returns(optimal_value(mdp, q), returns, seed=seed, agent=agent, config=config)


def greedy_policy(q: QTable, mdp: TabularMDP) -> DeterministicPolicy:
    """
    Canonical optimal policy pi*(theta).

    Built forward in h: argmax with lowest-index tiebreak where the partially
    built policy reaches s with positive probability, action 0 elsewhere.
    """
    S, A, H = mdp.shape
    if q.shape != (H + 1, S, A):
        raise InvalidArgsError(f"Q table has shape {q.shape}, expected {(H + 1, S, A)}")

    actions = np.zeros((H, S), dtype=np.int64)
    dist = mdp.initial_dist.copy()
    states = np.arange(S)
    for h in range(H):
        reachable = dist > REACH_TOL
        actions[h] = np.where(reachable, np.argmax(q[h], axis=1), 0)
        dist = dist @ mdp.transitions[h, states, actions[h]]
    return DeterministicPolicy(actions)


def _forward_occupancy(mdp: TabularMDP, policy: StochasticPolicy) -> np.ndarray:
    S, A, H = mdp.shape
    occupancy = np.empty((H + 1, S))
    occupancy[0] = mdp.initial_dist
    for h in range(H):
        # d_{h+1}(s') = sum_{s,a} d_h(s) pi_h(a|s) P_h(s'|s,a)
        joint = occupancy[h][:, None] * policy.probs[h]
        occupancy[h + 1] = np.einsum('sa,sat->t', joint, mdp.transitions[h])
    return occupancy


def state_visitation(mdp: TabularMDP, policy: PolicyLike) -> np.ndarray:
    """Exact occupancy p_h(s) for h = 0..H, shape (H+1, S)."""
    return _forward_occupancy(mdp, _as_stochastic(policy, mdp.num_actions))


def policy_value(mdp: TabularMDP, policy: PolicyLike) -> float:
    """Expected total reward E[sum_{h<H} r_h + r_H] by exact forward propagation."""
    pol = _as_stochastic(policy, mdp.num_actions)
    H = mdp.horizon
    occupancy = _forward_occupancy(mdp, pol)
    value = sum(float(occupancy[h] @ (pol.probs[h] * mdp.rewards[h]).sum(axis=1)) for h in range(H))
    return value + float(occupancy[H] @ mdp.rewards[H, :, 0])


def sample_initial_state(mdp: TabularMDP, rng: RandomStream) -> int:
    return int(rng.choice(mdp.num_states, p=mdp.initial_dist))


def sample_next_state(mdp: TabularMDP, h: int, state: int, action: int, rng: RandomStream) -> int:
    return int(rng.choice(mdp.num_states, p=mdp.transitions[h, state, action]))


def simulate_episode(mdp: TabularMDP, policy: PolicyLike, rng: RandomStream) -> Trajectory:
    """
    Sample one episode under the interaction protocol.

    Deterministic given the state of rng; only rng is mutated.
    """
    pol = _as_stochastic(policy, mdp.num_actions)
    S, A, H = mdp.shape
    states = np.empty(H + 1, dtype=np.int64)
    actions = np.empty(H, dtype=np.int64)
    rewards = np.empty(H)

    states[0] = sample_initial_state(mdp, rng)
    for h in range(H):
        s = states[h]
        a = int(rng.choice(A, p=pol.probs[h, s]))
        actions[h] = a
        rewards[h] = mdp.rewards[h, s, a]
        states[h + 1] = sample_next_state(mdp, h, s, a, rng)

    return Trajectory(states, actions, rewards, mdp.terminal_reward(int(states[H])))


def compute_margin(mdp: TabularMDP) -> float:
    """
    Action gap Delta: min over h < H and reachable s of best minus second-best Q_h(s, .).

    Raises:
        MarginZeroError: a reachable state has an exact tie
    """
    if mdp.num_actions == 1:
        return float('inf')

    q = backward_induction(mdp)
    occupancy = state_visitation(mdp, greedy_policy(q, mdp))
    top_two = np.sort(q[:mdp.horizon], axis=2)[:, :, -2:]
    gaps = top_two[:, :, 1] - top_two[:, :, 0]

    margin = float('inf')
    for h in range(mdp.horizon):
        for s in np.flatnonzero(occupancy[h] > REACH_TOL):
            if gaps[h, s] <= 0.0:
                raise MarginZeroError(h, int(s))
            margin = min(margin, float(gaps[h, s]))
    return margin


def compute_p_underbar(hypotheses: List[TabularMDP]) -> float:
    """Smallest positive p_h(s; theta) under pi*(theta), over h < H and all hypotheses."""
    if not hypotheses:
        raise InvalidArgsError("compute_p_underbar needs at least one hypothesis")

    p_min = 1.0
    for mdp in hypotheses:
        occupancy = state_visitation(mdp, greedy_policy(backward_induction(mdp), mdp))[:mdp.horizon]
        reachable = occupancy[occupancy > REACH_TOL]
        p_min = min(p_min, float(reachable.min()))
    return p_min

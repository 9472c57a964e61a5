"""
Environment constructors for regret-forge.
Deep Sea and random MDPs whose action gap and reachability are certified.
"""

import logging
from typing import List, Tuple

import numpy as np

from error_handler import GenerationFailedError, InvalidArgsError, MarginZeroError
from models import DeepSeaSpec, EnvConfig
from seeding import RandomStream
from tabular_mdp import TabularMDP, compute_margin, compute_p_underbar

logger = logging.getLogger(__name__)

LEFT, RIGHT = 0, 1
MAX_ATTEMPTS = 1000


def deep_sea_state(size: int, x: int, d: int) -> int:
    """Row-major state id x*(M+1) + d."""
    return x * (size + 1) + d


def deep_sea_coords(size: int, state: int) -> Tuple[int, int]:
    return divmod(state, size + 1)


def make_deep_sea(spec: DeepSeaSpec) -> TabularMDP:
    """
    Build Deep Sea as a tabular MDP.

    Depth always increments. Left moves x to max(x-1, 0); right moves x to
    min(x+1, M) with probability 1 - slip and leaves it otherwise, paying
    move_cost at every h < H. Reaching (M, M) at period H pays the bonus.
    States with x > d cannot be reached; they keep x and descend.
    """
    M = spec.size
    slip = spec.resolved_slip
    n = M + 1
    S, A, H = n * n, 2, M

    step = np.zeros((S, A, S))
    for x in range(n):
        for d in range(n):
            s = deep_sea_state(M, x, d)
            d_next = min(d + 1, M)
            if x > d:
                step[s, :, deep_sea_state(M, x, d_next)] = 1.0
                continue
            step[s, LEFT, deep_sea_state(M, max(x - 1, 0), d_next)] = 1.0
            step[s, RIGHT, deep_sea_state(M, min(x + 1, M), d_next)] += 1.0 - slip
            step[s, RIGHT, deep_sea_state(M, x, d_next)] += slip

    rewards = np.zeros((H + 1, S, A))
    rewards[:H, :, RIGHT] = spec.resolved_move_cost
    rewards[H, deep_sea_state(M, M, M), :] = spec.bonus

    nu = np.zeros(S)
    nu[deep_sea_state(M, 0, 0)] = 1.0

    logger.debug(f"Built Deep Sea M={M} (S={S}, slip={slip:.3f})")
    return TabularMDP(S=S, A=A, H=H, P=np.broadcast_to(step, (H, S, A, S)), r=rewards, nu=nu)


def _random_rewards(S: int, A: int, H: int, rng: RandomStream) -> np.ndarray:
    rewards = rng.uniform(-1.0, 1.0, size=(H + 1, S, A))
    rewards[H] = rewards[H][:, :1]
    return rewards


def _certified(mdp: TabularMDP, min_margin: float) -> bool:
    try:
        margin = compute_margin(mdp)
    except MarginZeroError:
        return False
    return margin >= min_margin and compute_p_underbar([mdp]) > 0.0


def make_random_margin_mdp(S: int, A: int, H: int, min_margin: float, rng: RandomStream,
                           max_attempts: int = MAX_ATTEMPTS) -> TabularMDP:
    """
    Rejection-sample an MDP whose action gap is at least min_margin.

    Rewards are uniform on [-1, 1], transition rows and the initial
    distribution are flat-Dirichlet draws.

    Raises:
        GenerationFailedError: no certified instance within max_attempts draws
    """
    if min_margin <= 0:
        raise InvalidArgsError(f"min_margin must be positive, got {min_margin}")

    for attempt in range(max_attempts):
        rewards = _random_rewards(S, A, H, rng)
        transitions = rng.dirichlet(np.ones(S), size=(H, S, A))
        nu = rng.dirichlet(np.ones(S))
        mdp = TabularMDP(S=S, A=A, H=H, P=transitions, r=rewards, nu=nu)
        if _certified(mdp, min_margin):
            logger.debug(f"Certified random MDP after {attempt + 1} attempts")
            return mdp

    raise GenerationFailedError(
        f"No MDP with margin >= {min_margin} after {max_attempts} attempts (S={S}, A={A}, H={H})"
    )


def make_certified_hypothesis_set(S: int, A: int, H: int, n: int, min_margin: float, rng: RandomStream,
                                  max_attempts: int = MAX_ATTEMPTS,
                                  tries_per_hypothesis: int = 50) -> List[TabularMDP]:
    """
    Draw n MDPs sharing rewards and initial distribution, each with a certified gap.

    Raises:
        GenerationFailedError: no certified set within max_attempts reward draws
    """
    if min_margin <= 0:
        raise InvalidArgsError(f"min_margin must be positive, got {min_margin}")

    for attempt in range(max_attempts):
        rewards = _random_rewards(S, A, H, rng)
        nu = rng.dirichlet(np.ones(S))
        hypotheses = []
        for _ in range(n):
            for _ in range(tries_per_hypothesis):
                transitions = rng.dirichlet(np.ones(S), size=(H, S, A))
                mdp = TabularMDP(S=S, A=A, H=H, P=transitions, r=rewards, nu=nu)
                if _certified(mdp, min_margin):
                    hypotheses.append(mdp)
                    break
            else:
                break
        if len(hypotheses) == n:
            logger.info(f"Certified {n} hypotheses (S={S}, A={A}, H={H}) after {attempt + 1} reward draws")
            return hypotheses

    raise GenerationFailedError(f"No certified set of {n} hypotheses after {max_attempts} attempts")


def make_environment(env: EnvConfig, rng: RandomStream = None) -> TabularMDP:
    """Environment described by an experiment config."""
    if env.kind == "deep_sea":
        return make_deep_sea(DeepSeaSpec(M=env.M, slip=env.slip))
    if rng is None:
        rng = np.random.default_rng(env.env_seed)
    return make_random_margin_mdp(env.S, env.A, env.H, env.margin, rng)

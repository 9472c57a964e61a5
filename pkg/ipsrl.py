"""
Informed posterior sampling over a finite hypothesis set.
Exact Bayes updates from expert demonstrations and online play, the count-based
estimator of the optimal policy, and Monte-Carlo checks of its error bounds.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, logsumexp

from error_handler import ImpossibleDataError, InvalidArgsError
from expert import OfflineDataset, generate_offline
from models import Competence, EpsilonReport, PolicyErrorReport, RegretCurve
from seeding import RandomStream, derive_stream, draw_seed
from tabular_mdp import (
    DeterministicPolicy, TabularMDP, Trajectory, backward_induction, compute_margin,
    compute_p_underbar, compute_regret, greedy_policy, simulate_episode,
)

logger = logging.getLogger(__name__)


class HypothesisSet:
    """
    Finite set of MDPs sharing S, A, H, r and nu, with a prior over them.

    Optimal Q tables, canonical optimal policies and log transition tensors are
    computed once at construction.
    """

    def __init__(self, hypotheses: Sequence[TabularMDP], prior: Optional[Sequence[float]] = None):
        """
        Initialize the hypothesis set.

        Args:
            hypotheses: Candidate environments (differ only in transitions)
            prior: Probability vector over hypotheses; uniform when omitted
        """
        if not hypotheses:
            raise InvalidArgsError("hypothesis set must be nonempty")
        first = hypotheses[0]
        for mdp in hypotheses[1:]:
            if mdp.shape != first.shape:
                raise InvalidArgsError("hypotheses must share S, A and H")
            if not (np.array_equal(mdp.rewards, first.rewards) and np.array_equal(mdp.initial_dist, first.initial_dist)):
                raise InvalidArgsError("hypotheses must share rewards and initial distribution")

        n = len(hypotheses)
        prior = np.full(n, 1.0 / n) if prior is None else np.asarray(prior, dtype=float)
        if prior.shape != (n,) or (prior < 0).any() or abs(prior.sum() - 1.0) > 1e-10:
            raise InvalidArgsError("prior must be a probability vector over the hypotheses")

        self.hypotheses: List[TabularMDP] = list(hypotheses)
        self.prior = prior
        self.q_tables = [backward_induction(mdp) for mdp in self.hypotheses]
        self.policies: List[DeterministicPolicy] = [
            greedy_policy(q, mdp) for q, mdp in zip(self.q_tables, self.hypotheses)
        ]
        with np.errstate(divide='ignore'):
            self.log_transitions = np.log(np.stack([mdp.transitions for mdp in self.hypotheses]))
        self._log_expert: Dict[float, np.ndarray] = {}

        logger.debug(f"HypothesisSet with {n} hypotheses (S={first.num_states}, A={first.num_actions}, H={first.horizon})")

    def __len__(self) -> int:
        return len(self.hypotheses)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.hypotheses[0].shape

    def log_expert_policy(self, beta: float) -> np.ndarray:
        """log pi^beta_h(a|s; Q*(theta)) for every hypothesis, shape (n, H, S, A)."""
        if beta not in self._log_expert:
            q = np.stack([q[:-1] for q in self.q_tables])
            self._log_expert[beta] = log_softmax(beta * q, axis=-1)
        return self._log_expert[beta]

    def p_underbar(self) -> float:
        return compute_p_underbar(self.hypotheses)

    def margin(self) -> float:
        return min(compute_margin(mdp) for mdp in self.hypotheses)


@dataclass(frozen=True)
class PosteriorBelief:
    """Normalized log-weights over the hypotheses of a HypothesisSet."""
    log_weights: np.ndarray

    @classmethod
    def from_unnormalized(cls, log_weights: np.ndarray) -> "PosteriorBelief":
        if not np.isfinite(log_weights).any():
            raise ImpossibleDataError("every hypothesis assigns zero likelihood to the data")
        return cls(log_weights - logsumexp(log_weights))

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def sample(self, rng: RandomStream) -> int:
        w = self.weights
        return int(rng.choice(len(w), p=w / w.sum()))


def _transition_log_likelihood(hs: HypothesisSet, h, s, a, sn) -> np.ndarray:
    return hs.log_transitions[:, h, s, a, sn].sum(axis=1)


def informed_posterior(hs: HypothesisSet, data: OfflineDataset, beta: float) -> PosteriorBelief:
    """
    Posterior over hypotheses given expert demonstrations.

    Each transition contributes log P^theta_h(s'|s, a) + log pi^beta_h(a|s; Q*(theta)).
    The initial-state terms are common to all hypotheses and cancel.
    """
    if beta < 0:
        raise InvalidArgsError(f"beta must be non-negative, got {beta}")

    with np.errstate(divide='ignore'):
        log_w = np.log(hs.prior)
    if len(data):
        h, s, a, sn = data.period, data.state, data.action, data.next_state
        log_w = log_w + _transition_log_likelihood(hs, h, s, a, sn)
        log_w = log_w + hs.log_expert_policy(beta)[:, h, s, a].sum(axis=1)
    return PosteriorBelief.from_unnormalized(log_w)


def online_update(belief: PosteriorBelief, hs: HypothesisSet, traj: Trajectory) -> PosteriorBelief:
    """Bayes update on the agent's own trajectory (transition likelihoods only)."""
    H = traj.horizon
    log_w = belief.log_weights + _transition_log_likelihood(
        hs, np.arange(H), traj.states[:-1], traj.actions, traj.states[1:]
    )
    return PosteriorBelief.from_unnormalized(log_w)


def ipsrl_run(hs: HypothesisSet, data: OfflineDataset, beta: float, true_theta_index: int, T: int,
              rng: RandomStream, seed: int = 0) -> RegretCurve:
    """
    Informed PSRL on hypothesis true_theta_index for T episodes.

    Every episode samples theta~ from the current belief, plays its canonical
    optimal policy on the true MDP and updates the belief.
    """
    if not 0 <= true_theta_index < len(hs):
        raise InvalidArgsError(f"true_theta_index {true_theta_index} out of range")

    true_mdp = hs.hypotheses[true_theta_index]
    belief = informed_posterior(hs, data, beta)
    returns = np.empty(T)
    for t in range(T):
        sampled = belief.sample(rng)
        traj = simulate_episode(true_mdp, hs.policies[sampled], rng)
        returns[t] = traj.total_return
        belief = online_update(belief, hs, traj)

    logger.debug(f"iPSRL finished {T} episodes on hypothesis {true_theta_index} (L={data.num_episodes})")
    return compute_regret(
        true_mdp, returns, seed=seed, agent="ipsrl", q=hs.q_tables[true_theta_index],
        config={'beta': beta, 'L': data.num_episodes, 'theta_index': true_theta_index},
    )


def construct_pi_hat(data: OfflineDataset, delta: float, S: int, A: int, H: int) -> DeterministicPolicy:
    """
    Count-based estimate of pi*: argmax_a N_h(s, a) where N_h(s) >= delta * L, action 0 elsewhere.
    """
    if not 0.0 < delta < 1.0:
        raise InvalidArgsError(f"delta must lie in (0, 1), got {delta}")

    counts = np.zeros((H, S, A), dtype=np.int64)
    np.add.at(counts, (data.period, data.state, data.action), 1)
    visits = counts.sum(axis=2)
    actions = np.where(visits >= delta * data.num_episodes, np.argmax(counts, axis=2), 0)
    return DeterministicPolicy(actions.astype(np.int64))


def beta_threshold(delta_margin: float, p_underbar: float, H: int, A: int) -> float:
    """Deliberateness above which the count estimator is reliable: [log 3 - log p + log(H-1) + log(A-1)] / Delta."""
    if H < 2 or A < 2:
        raise InvalidArgsError(f"beta threshold needs H >= 2 and A >= 2, got H={H}, A={A}")
    if delta_margin <= 0 or not 0.0 < p_underbar <= 1.0:
        raise InvalidArgsError("need delta_margin > 0 and p_underbar in (0, 1]")
    return (math.log(3) - math.log(p_underbar) + math.log(H - 1) + math.log(A - 1)) / delta_margin


def epsilon_bound(S: int, H: int, L: int, p_underbar: float) -> float:
    """epsilon_L = min{1, 2SH [exp(-L p^2 / 18) + exp(-L p / 36)]}."""
    tail = math.exp(-L * p_underbar ** 2 / 18.0) + math.exp(-L * p_underbar / 36.0)
    return min(1.0, 2.0 * S * H * tail)


def _standard_error(p: float, n: int) -> float:
    return math.sqrt(p * (1.0 - p) / n)


def _epsilon_trial(hs: HypothesisSet, beta: float, L: int, delta: float, lambda_: float,
                   rng: RandomStream) -> Tuple[bool, bool]:
    S, A, H = hs.shape
    truth = int(rng.choice(len(hs), p=hs.prior))
    data = generate_offline(hs.hypotheses[truth], Competence(beta=beta, lambda_=lambda_), L, rng)
    sampled = informed_posterior(hs, data, beta).sample(rng)
    pi_star = hs.policies[truth]
    pi_hat = construct_pi_hat(data, delta, S, A, H)
    return hs.policies[sampled] != pi_star, pi_hat != pi_star


def estimate_epsilon_mc(hs: HypothesisSet, beta: float, L: int, n_trials: int, rng: RandomStream,
                        delta: Optional[float] = None, lambda_: float = math.inf,
                        threads: int = 1) -> EpsilonReport:
    """
    Monte-Carlo frequencies of first-episode and count-estimator policy errors.

    Each trial draws theta* from the prior, generates L expert episodes, samples
    theta~ from the informed posterior and compares canonical optimal policies.
    Trial i uses a child stream of (seed drawn from rng, i), so the report does
    not depend on the thread count.

    Args:
        hs: Hypothesis set with prior
        beta: Expert deliberateness (known to the agent)
        L: Offline episodes per trial
        n_trials: Number of trials
        rng: Stream providing the trial seed
        delta: Visit threshold of the count estimator (default p_underbar / 2)
        lambda_: Expert knowledgeability
        threads: Worker threads

    Returns:
        EpsilonReport with both frequencies, standard errors and epsilon_L
    """
    if n_trials < 1:
        raise InvalidArgsError("n_trials must be at least 1")

    p_underbar = hs.p_underbar()
    if delta is None:
        delta = p_underbar / 2.0
    base_seed = draw_seed(rng)

    def trial(i: int) -> Tuple[bool, bool]:
        return _epsilon_trial(hs, beta, L, delta, lambda_, derive_stream(base_seed, i))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(trial, range(n_trials)))
    else:
        outcomes = [trial(i) for i in range(n_trials)]

    tilde_rate = sum(o[0] for o in outcomes) / n_trials
    hat_rate = sum(o[1] for o in outcomes) / n_trials
    S, _, H = hs.shape
    report = EpsilonReport(
        L=L,
        mc_estimate_pi_tilde=tilde_rate,
        mc_estimate_pi_hat=hat_rate,
        bound_eps_L=epsilon_bound(S, H, L, p_underbar),
        n_trials=n_trials,
        se_pi_tilde=_standard_error(tilde_rate, n_trials),
        se_pi_hat=_standard_error(hat_rate, n_trials),
    )
    logger.info(f"epsilon MC at L={L}: pi_tilde={tilde_rate:.4f}, pi_hat={hat_rate:.4f}, bound={report.bound_eps_L:.4f}")
    return report


def policy_error_by_episode(hs: HypothesisSet, beta: float, L: int, K: int, n_trials: int,
                            rng: RandomStream) -> PolicyErrorReport:
    """
    Frequency of pi~^k != pi* over the first K iPSRL episodes.
    """
    if K < 1 or n_trials < 1:
        raise InvalidArgsError("K and n_trials must be at least 1")

    base_seed = draw_seed(rng)
    mistakes = np.zeros(K)
    for i in range(n_trials):
        trial_rng = derive_stream(base_seed, i)
        truth = int(trial_rng.choice(len(hs), p=hs.prior))
        true_mdp = hs.hypotheses[truth]
        data = generate_offline(true_mdp, Competence(beta=beta), L, trial_rng)
        belief = informed_posterior(hs, data, beta)
        for k in range(K):
            sampled = belief.sample(trial_rng)
            mistakes[k] += hs.policies[sampled] != hs.policies[truth]
            traj = simulate_episode(true_mdp, hs.policies[sampled], trial_rng)
            belief = online_update(belief, hs, traj)

    frequencies = mistakes / n_trials
    return PolicyErrorReport(
        L=L,
        frequencies=frequencies.tolist(),
        standard_errors=[_standard_error(p, n_trials) for p in frequencies],
        n_trials=n_trials,
    )

"""
Tests for informed posterior sampling, the count-based policy estimator and the error bounds.
"""

import math

import numpy as np
import pytest

from environments import make_certified_hypothesis_set, make_random_margin_mdp
from error_handler import ImpossibleDataError, InvalidArgsError
from expert import OfflineDataset, generate_offline
from ipsrl import (
    HypothesisSet, PosteriorBelief, beta_threshold, construct_pi_hat, epsilon_bound,
    estimate_epsilon_mc, informed_posterior, ipsrl_run, online_update, policy_error_by_episode,
)
from models import Competence, DatasetMetadata
from tabular_mdp import TabularMDP, Trajectory


def one_step_dataset(states, actions, next_states, S=2, A=2) -> OfflineDataset:
    """H=1 dataset: one transition per episode."""
    L = len(states)
    meta = DatasetMetadata(beta=1.0, num_states=S, num_actions=A, horizon=1)
    return OfflineDataset(episode=np.arange(L), period=np.zeros(L), state=states, action=actions,
                          next_state=next_states, reward=np.zeros(L), terminal_reward=np.zeros(L), metadata=meta)


def stay_probability_mdp(p_stay: float, H: int = 1) -> TabularMDP:
    """S=2, A=1: the state persists with probability p_stay; zero rewards."""
    P = np.zeros((H, 2, 1, 2))
    P[:, 0, 0] = [p_stay, 1 - p_stay]
    P[:, 1, 0] = [1 - p_stay, p_stay]
    return TabularMDP(S=2, A=1, H=H, P=P, r=np.zeros((H + 1, 2, 1)), nu=[1.0, 0.0])


def mirrored_pair() -> HypothesisSet:
    """Two H=1 hypotheses whose optimal first actions differ; the goal state pays 1 at the end."""
    r = np.zeros((2, 2, 2))
    r[1, 1] = 1.0
    members = []
    for good in (0, 1):
        P = np.zeros((1, 2, 2, 2))
        P[0, :, good] = [0.1, 0.9]
        P[0, :, 1 - good] = [0.9, 0.1]
        members.append(TabularMDP(S=2, A=2, H=1, P=P, r=r, nu=[1.0, 0.0]))
    return HypothesisSet(members)


class TestHypothesisSet:
    """Construction checks."""

    def test_uniform_prior_by_default(self):
        hs = mirrored_pair()
        assert np.allclose(hs.prior, 0.5)
        assert hs.policies[0] != hs.policies[1]

    def test_rejects_empty(self):
        with pytest.raises(InvalidArgsError):
            HypothesisSet([])

    def test_rejects_bad_prior(self):
        with pytest.raises(InvalidArgsError):
            HypothesisSet(mirrored_pair().hypotheses, prior=[0.7, 0.7])

    def test_rejects_different_rewards(self):
        a = make_random_margin_mdp(2, 2, 2, 0.05, np.random.default_rng(0))
        b = make_random_margin_mdp(2, 2, 2, 0.05, np.random.default_rng(1))
        with pytest.raises(InvalidArgsError):
            HypothesisSet([a, b])


class TestInformedPosterior:
    """Bayes update on expert demonstrations."""

    def test_empty_dataset_returns_prior(self):
        hs = HypothesisSet(mirrored_pair().hypotheses, prior=[0.25, 0.75])
        empty = OfflineDataset.empty(DatasetMetadata(beta=1.0, num_states=2, num_actions=2, horizon=1))
        assert np.allclose(informed_posterior(hs, empty, 3.0).weights, [0.25, 0.75], rtol=0, atol=1e-14)

    def test_transition_likelihood_ratio(self):
        # identical Q* rows: only transitions separate the hypotheses
        hs = HypothesisSet([stay_probability_mdp(0.8), stay_probability_mdp(0.2)])
        data = one_step_dataset([0], [0], [0], A=1)
        assert np.allclose(informed_posterior(hs, data, 5.0).weights, [0.8, 0.2], atol=1e-12)

    def test_beta_zero_ignores_actions(self):
        hs = mirrored_pair()
        data = one_step_dataset([0, 0, 0], [0, 0, 1], [1, 1, 0])
        transition_only = np.array([0.9 * 0.9 * 0.9, 0.1 * 0.1 * 0.1])
        expected = transition_only / transition_only.sum()
        assert np.allclose(informed_posterior(hs, data, 0.0).weights, expected, atol=1e-12)

    def test_expert_actions_shift_posterior(self):
        hs = mirrored_pair()
        # balanced evidence: each hypothesis explains one transition well and one action well
        data = one_step_dataset([0, 0], [0, 1], [1, 1])
        assert informed_posterior(hs, data, 0.0).weights[0] == pytest.approx(0.5)
        assert informed_posterior(hs, data, 5.0).weights[0] == pytest.approx(0.5)
        favourable = one_step_dataset([0, 0], [0, 0], [1, 0])
        assert informed_posterior(hs, favourable, 5.0).weights[0] > informed_posterior(hs, favourable, 0.0).weights[0]

    def test_impossible_data_raises(self):
        hs = HypothesisSet([stay_probability_mdp(1.0), stay_probability_mdp(1.0)])
        with pytest.raises(ImpossibleDataError):
            informed_posterior(hs, one_step_dataset([0], [0], [1], A=1), 1.0)

    def test_weights_normalized_for_long_datasets(self):
        members = make_certified_hypothesis_set(2, 2, 2, 3, 0.1, np.random.default_rng(2))
        hs = HypothesisSet(members)
        data = generate_offline(members[1], Competence(beta=2.0), 10000, np.random.default_rng(3))
        belief = informed_posterior(hs, data, 2.0)
        assert not np.isnan(belief.log_weights).any()
        assert belief.weights.sum() == pytest.approx(1.0, abs=1e-10)


class TestOnlineUpdate:
    """Bayes update on the agent's own trajectories."""

    def test_shared_transitions_leave_belief_unchanged(self):
        hs = HypothesisSet([stay_probability_mdp(0.5), stay_probability_mdp(0.5)], prior=[0.3, 0.7])
        belief = PosteriorBelief.from_unnormalized(np.log(hs.prior))
        traj = Trajectory(np.array([0, 1]), np.array([0]), np.zeros(1), 0.0)
        assert np.allclose(online_update(belief, hs, traj).weights, [0.3, 0.7], atol=1e-14)

    def test_odds_multiply_per_step(self):
        hs = HypothesisSet([stay_probability_mdp(0.9, H=3), stay_probability_mdp(0.1, H=3)])
        belief = PosteriorBelief.from_unnormalized(np.log(hs.prior))
        traj = Trajectory(np.zeros(4, dtype=np.int64), np.zeros(3, dtype=np.int64), np.zeros(3), 0.0)
        weights = online_update(belief, hs, traj).weights
        assert weights[0] / weights[1] == pytest.approx(729.0)

    def test_sequential_equals_batch(self):
        members = make_certified_hypothesis_set(2, 2, 3, 3, 0.1, np.random.default_rng(5))
        hs = HypothesisSet(members)
        rng = np.random.default_rng(6)
        data = generate_offline(members[0], Competence(beta=1.0), 5, rng)
        extra = generate_offline(members[0], Competence(beta=1.0), 2, rng)

        belief = informed_posterior(hs, data, 1.0)
        batch_log = belief.log_weights.copy()
        H = 3
        for l in range(2):
            rows = slice(l * H, (l + 1) * H)
            states = np.append(extra.state[rows], extra.next_state[rows][-1])
            traj = Trajectory(states, extra.action[rows], extra.reward[rows], float(extra.terminal_reward[l]))
            belief = online_update(belief, hs, traj)
            batch_log = batch_log + np.log(np.stack([m.transitions for m in members]))[
                :, np.arange(H), traj.states[:-1], traj.actions, traj.states[1:]].sum(axis=1)
        batch = PosteriorBelief.from_unnormalized(batch_log)
        assert np.allclose(belief.log_weights, batch.log_weights, atol=1e-10)


class TestIpsrlRun:
    """Informed PSRL episodes."""

    def test_single_hypothesis_has_zero_mean_regret(self):
        mdp = make_random_margin_mdp(3, 2, 3, 0.1, np.random.default_rng(7))
        hs = HypothesisSet([mdp])
        empty = OfflineDataset.empty(DatasetMetadata(beta=1.0, num_states=3, num_actions=2, horizon=3))
        curve = ipsrl_run(hs, empty, 1.0, 0, 2000, np.random.default_rng(8))
        se = curve.per_episode.std(ddof=1) / math.sqrt(2000)
        assert abs(curve.per_episode.mean()) <= 3 * se
        assert curve.cumulative[-1] == pytest.approx(curve.per_episode.sum(), abs=1e-9)

    def test_concentrated_posterior_matches_single_hypothesis(self):
        hs = mirrored_pair()
        data = one_step_dataset([0] * 40, [0] * 40, [1] * 40)
        assert informed_posterior(hs, data, 1.0).weights[0] >= 1 - 1e-12
        curve = ipsrl_run(hs, data, 1.0, 0, 50, np.random.default_rng(9))
        single = ipsrl_run(HypothesisSet([hs.hypotheses[0]]),
                           one_step_dataset([0] * 40, [0] * 40, [1] * 40), 1.0, 0, 50, np.random.default_rng(9))
        # both runs draw one uniform per posterior sample and always pick hypothesis 0
        assert np.array_equal(curve.per_episode, single.per_episode)

    def test_invalid_truth_index(self):
        empty = OfflineDataset.empty(DatasetMetadata(beta=1.0, num_states=2, num_actions=2, horizon=1))
        with pytest.raises(InvalidArgsError):
            ipsrl_run(mirrored_pair(), empty, 1.0, 5, 10, np.random.default_rng(0))

    @pytest.mark.slow
    def test_regret_nonincreasing_in_offline_episodes(self):
        members = make_certified_hypothesis_set(2, 2, 2, 4, 0.3, np.random.default_rng(10))
        hs = HypothesisSet(members)
        S, A, H = hs.shape
        beta = 2 * beta_threshold(hs.margin(), hs.p_underbar(), H, A)
        means, ses = [], []
        for L in (0, 8, 64):
            totals = []
            for seed in range(500):
                rng = np.random.default_rng([seed, L])
                truth = int(rng.choice(len(hs)))
                data = generate_offline(members[truth], Competence(beta=beta), L, rng)
                totals.append(ipsrl_run(hs, data, beta, truth, 500, rng).total)
            means.append(np.mean(totals))
            ses.append(np.std(totals, ddof=1) / math.sqrt(len(totals)))
        for (m0, s0), (m1, s1) in zip(zip(means, ses), zip(means[1:], ses[1:])):
            assert m1 <= m0 + 2 * math.hypot(s0, s1)


class TestPiHat:
    """Count-based estimator of the optimal policy."""

    def test_majority_action_above_threshold(self):
        data = one_step_dataset([0] * 10, [0] * 7 + [1] * 3, [0] * 10)
        assert construct_pi_hat(data, 0.5, 2, 2, 1).actions[0, 0] == 0

    def test_fallback_below_threshold(self):
        data = one_step_dataset([0] * 8 + [1] * 2, [1] * 10, [0] * 10)
        pi_hat = construct_pi_hat(data, 0.5, 2, 2, 1)
        assert pi_hat.actions[0, 0] == 1
        assert pi_hat.actions[0, 1] == 0

    def test_tie_goes_to_lowest_index(self):
        data = one_step_dataset([0] * 8, [0, 1] * 4, [0] * 8)
        assert construct_pi_hat(data, 0.5, 2, 2, 1).actions[0, 0] == 0

    def test_empty_data_gives_fallback_everywhere(self):
        empty = OfflineDataset.empty(DatasetMetadata(beta=1.0, num_states=3, num_actions=2, horizon=2))
        assert not construct_pi_hat(empty, 0.5, 3, 2, 2).actions.any()

    def test_delta_out_of_range(self):
        with pytest.raises(InvalidArgsError):
            construct_pi_hat(one_step_dataset([0], [0], [0]), 1.0, 2, 2, 1)


class TestClosedFormBounds:
    """beta threshold and epsilon_L."""

    def test_beta_threshold_examples(self):
        assert beta_threshold(1.0, 0.5, 2, 2) == pytest.approx(math.log(6))
        assert beta_threshold(2.0, 0.5, 2, 2) == pytest.approx(0.8959, abs=1e-4)
        assert beta_threshold(math.log(3), 1.0, 2, 2) == pytest.approx(1.0)

    def test_beta_threshold_needs_two_periods_and_actions(self):
        with pytest.raises(InvalidArgsError):
            beta_threshold(1.0, 0.5, 1, 2)
        with pytest.raises(InvalidArgsError):
            beta_threshold(1.0, 0.5, 2, 1)

    def test_epsilon_without_data_is_one(self):
        assert epsilon_bound(3, 4, 0, 0.2) == 1.0

    def test_epsilon_example(self):
        assert epsilon_bound(2, 2, 400, 0.5) == pytest.approx(16 * math.exp(-400 / 72), rel=1e-12)
        assert epsilon_bound(2, 2, 400, 0.5) == pytest.approx(0.0617, abs=5e-4)

    def test_epsilon_decays(self):
        assert epsilon_bound(2, 2, 800, 0.5) < epsilon_bound(2, 2, 400, 0.5)


class TestMonteCarloChecks:
    """Monte-Carlo policy-error reports."""

    def test_no_data_symmetric_prior(self):
        report = estimate_epsilon_mc(mirrored_pair(), 1.0, 0, 2000, np.random.default_rng(11))
        se = math.sqrt(0.25 / 2000)
        assert abs(report.mc_estimate_pi_tilde - 0.5) <= 3 * se
        assert report.bound_eps_L == 1.0
        assert report.se_pi_tilde == pytest.approx(
            math.sqrt(report.mc_estimate_pi_tilde * (1 - report.mc_estimate_pi_tilde) / 2000))

    def test_thread_count_does_not_change_report(self):
        hs = mirrored_pair()
        serial = estimate_epsilon_mc(hs, 2.0, 5, 100, np.random.default_rng(12))
        parallel = estimate_epsilon_mc(hs, 2.0, 5, 100, np.random.default_rng(12), threads=4)
        assert serial == parallel

    def test_sampled_policy_error_at_most_twice_estimator_error(self):
        members = make_certified_hypothesis_set(2, 2, 2, 4, 0.3, np.random.default_rng(13))
        hs = HypothesisSet(members)
        beta = 2 * beta_threshold(hs.margin(), hs.p_underbar(), 2, 2)
        for L in (0, 25):
            report = estimate_epsilon_mc(hs, beta, L, 300, np.random.default_rng(L))
            slack = 3 * math.hypot(report.se_pi_tilde, 2 * report.se_pi_hat)
            assert report.mc_estimate_pi_tilde <= 2 * report.mc_estimate_pi_hat + slack

    def test_mistakes_do_not_grow_over_episodes(self):
        report = policy_error_by_episode(mirrored_pair(), 1.0, 0, 5, 400, np.random.default_rng(14))
        assert len(report.frequencies) == 5
        assert report.frequencies[4] <= report.frequencies[0] + 3 * report.standard_errors[0]

    @pytest.mark.slow
    def test_count_estimator_error_decays_within_bound(self):
        members = make_certified_hypothesis_set(2, 2, 2, 4, 0.3, np.random.default_rng(15))
        hs = HypothesisSet(members)
        beta = 2 * beta_threshold(hs.margin(), hs.p_underbar(), 2, 2)
        reports = [estimate_epsilon_mc(hs, beta, L, 2000, np.random.default_rng(100 + L))
                   for L in (0, 25, 50, 100, 200)]
        for report in reports:
            assert report.mc_estimate_pi_hat <= report.bound_eps_L + 3 * report.se_pi_hat
            slack = 3 * math.hypot(report.se_pi_tilde, 2 * report.se_pi_hat)
            assert report.mc_estimate_pi_tilde <= 2 * report.mc_estimate_pi_hat + slack
        for earlier, later in zip(reports, reports[1:]):
            slack = 3 * math.hypot(earlier.se_pi_hat, later.se_pi_hat)
            assert later.mc_estimate_pi_hat <= earlier.mc_estimate_pi_hat + slack

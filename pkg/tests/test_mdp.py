import numpy as np
import pytest

from psilearn.errors import ConfigError, NonConvergenceError
from psilearn.mdp import (
    FiniteMdp,
    TabularPolicy,
    Trajectory,
    TransitionSample,
    expected_cost,
    posterior_log_weight,
    task_log_likelihood,
    trajectory_log_density,
)

from _oracles import expected_cost_enumeration, monte_carlo_cost, rand_mdp, rand_positive_policy


def two_state_chain(T=3):
    """State 0 moves to goal state 1 under control 0; control 1 stays. Goal absorbs."""
    P = np.zeros((2, 2, 2))
    P[0, 0, 1] = 1.0
    P[0, 1, 0] = 1.0
    P[1, :, 1] = 1.0
    C = np.array([[1.0, 1.0], [0.0, 0.0]])
    return FiniteMdp(2, 2, P, C, horizon=T, absorbing={1})


def test_task_log_likelihood_values():
    mdp = two_state_chain()
    assert task_log_likelihood(mdp, 0, 1, 0) == 0.0
    assert task_log_likelihood(mdp, 2, 0, 1) == -1.0
    with pytest.raises(IndexError):
        task_log_likelihood(mdp, 0, 5, 0)


def test_transition_sample_rejects_negative_cost():
    with pytest.raises(ConfigError):
        TransitionSample(0, 0, -0.5, 1)


def test_invalid_rows_rejected():
    P = np.zeros((2, 1, 2))
    P[0, 0, 0] = 0.9  # does not sum to 1
    P[1, 0, 1] = 1.0
    with pytest.raises(ConfigError, match=r"\(x=0, u=0\)"):
        FiniteMdp(2, 1, P, np.zeros((2, 1)), horizon=1)


def test_absorbing_must_self_loop():
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = 1.0
    P[1, 0, 0] = 1.0
    with pytest.raises(ConfigError, match="absorbing"):
        FiniteMdp(2, 1, P, np.zeros((2, 1)), horizon=1, absorbing={1})


def test_gamma1_infinite_requires_absorbing():
    P = np.ones((1, 1, 1))
    with pytest.raises(ConfigError, match="absorbing"):
        FiniteMdp(1, 1, P, np.ones((1, 1)), discount=1.0)


def test_sit_in_absorbing_zero_cost_state():
    mdp = two_state_chain()
    pi = TabularPolicy.deterministic(mdp, np.zeros(2, dtype=int))
    assert expected_cost(mdp, pi, 1) == 0.0


def test_chain_cost_matches_enumeration_frozen():
    # deterministic move to the goal in one step: only the t=0 stage costs 1
    mdp = two_state_chain(T=3)
    pi = TabularPolicy.deterministic(mdp, np.zeros(2, dtype=int))
    assert expected_cost(mdp, pi, 0) == pytest.approx(1.0, abs=1e-15)
    assert expected_cost_enumeration(mdp, pi, 0) == pytest.approx(1.0, abs=1e-15)


def test_expected_cost_matches_enumeration_exhaustive():
    rng = np.random.default_rng(7)
    for _ in range(25):
        S = int(rng.integers(2, 5))
        U = int(rng.integers(2, 4))
        T = int(rng.integers(0, 5))
        mdp = rand_mdp(rng, S, U, T, time_varying_cost=bool(rng.integers(2)))
        pi = rand_positive_policy(rng, mdp, stages=T + 1)
        got = expected_cost(mdp, pi, 0)
        want = expected_cost_enumeration(mdp, pi, 0)
        assert got == pytest.approx(want, abs=1e-12)


def test_expected_cost_matches_monte_carlo():
    rng = np.random.default_rng(11)
    mdp = rand_mdp(rng, 4, 2, 6)
    pi = rand_positive_policy(rng, mdp, stages=7)
    exact = expected_cost(mdp, pi, 0)
    mc, se = monte_carlo_cost(mdp, pi, 0, n_rollouts=10 ** 5, seed=3)
    assert abs(mc - exact) < 3 * se


def test_discounted_infinite_horizon_truncation():
    # single state, C = 1, gamma = 0.9: cost = 1 / (1 - 0.9) = 10
    P = np.ones((1, 1, 1))
    mdp = FiniteMdp(1, 1, P, np.ones((1, 1)), discount=0.9)
    pi = TabularPolicy(np.ones((1, 1)))
    assert expected_cost(mdp, pi, 0) == pytest.approx(10.0, abs=1e-9)


def test_gamma1_proper_policy_evaluates_and_improper_raises():
    mdp = two_state_chain(T=None)
    mdp = FiniteMdp(2, 2, mdp.transition, mdp.cost, discount=1.0, absorbing={1})
    go = TabularPolicy.deterministic(mdp, np.zeros(2, dtype=int))
    assert expected_cost(mdp, go, 0) == pytest.approx(1.0, abs=1e-10)
    stay = TabularPolicy.deterministic(mdp, np.array([1, 0]))
    with pytest.raises(NonConvergenceError):
        expected_cost(mdp, stay, 0)


def test_trajectory_log_density():
    mdp = two_state_chain(T=1)
    pi = TabularPolicy.deterministic(mdp, np.zeros(2, dtype=int))
    traj = Trajectory([0, 1], [0, 0])
    assert trajectory_log_density(mdp, pi, traj) == 0.0
    # mismatched deterministic control
    bad = Trajectory([0, 1], [1, 0])
    assert trajectory_log_density(mdp, pi, bad) == -np.inf


def test_trajectory_log_density_stochastic_step():
    # one stochastic step that succeeds with probability 0.8
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = 0.8
    P[0, 0, 0] = 0.2
    P[1, 0, 1] = 1.0
    mdp = FiniteMdp(2, 1, P, np.zeros((2, 1)), horizon=1)
    pi = TabularPolicy(np.ones((2, 1)))
    traj = Trajectory([0, 1], [0, 0])
    assert trajectory_log_density(mdp, pi, traj) == pytest.approx(np.log(0.8))


def test_posterior_log_weight():
    mdp = two_state_chain(T=4)
    assert posterior_log_weight(mdp, Trajectory([1] * 5, [0] * 5)) == 0.0
    # total cost 5 across a 5-stage stay-at-0 trajectory
    assert posterior_log_weight(mdp, Trajectory([0] * 5, [1] * 5)) == -5.0


def test_posterior_log_weight_equals_minus_total_cost():
    rng = np.random.default_rng(5)
    mdp = rand_mdp(rng, 3, 2, 4, time_varying_cost=True)
    xs = rng.integers(0, 3, size=5)
    us = rng.integers(0, 2, size=5)
    total = sum(mdp.cost_at(t)[xs[t], us[t]] for t in range(5))
    assert posterior_log_weight(mdp, Trajectory(xs, us)) == pytest.approx(-total, abs=1e-12)


def test_grid_style_posterior_weight_counts_nontarget_steps():
    # 10-stage trajectory reaching the zero-cost target at step 7
    mdp = two_state_chain(T=9)
    xs = [0] * 7 + [1] * 3
    us = [1] * 6 + [0] + [0] * 3
    assert posterior_log_weight(mdp, Trajectory(xs, us)) == -7.0


def test_policy_rows_validated():
    with pytest.raises(Exception):
        TabularPolicy(np.array([[0.5, 0.4]]))


def test_uniform_policy_respects_mask():
    P = np.zeros((2, 3, 2))
    P[:, :, 0] = 1.0
    P[1, :, :] = 0.0
    P[1, :, 1] = 1.0
    allowed = np.array([[True, True, False], [True, True, True]])
    mdp = FiniteMdp(2, 3, P, np.zeros((2, 3)), horizon=1, allowed=allowed)
    pi = TabularPolicy.uniform(mdp)
    assert np.allclose(pi.table[0], [0.5, 0.5, 0.0])
    assert np.allclose(pi.table[1], [1 / 3] * 3)


def test_start_distribution_vector():
    mdp = two_state_chain(T=1)
    pi = TabularPolicy.deterministic(mdp, np.zeros(2, dtype=int))
    mixed = expected_cost(mdp, pi, np.array([0.5, 0.5]))
    assert mixed == pytest.approx(0.5 * expected_cost(mdp, pi, 0), abs=1e-15)

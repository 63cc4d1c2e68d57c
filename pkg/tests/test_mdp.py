import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oampi_lab.mdp import (
    DOWN, LEFT, RIGHT, UP, GridSpec, TabularMdp, build_gridworld, check_policy, deterministic_policy,
    discounted_visitation, down_left_policy, exact_q, j_value, mix_policies, optimal_policy, random_mdp,
    random_policy, state_values, uniform_policy,
)


def one_state_mdp(r=1.0, gamma=0.9):
    return TabularMdp(np.ones((1, 1, 1)), np.array([[r]]), np.array([1.0]), gamma)


@pytest.fixture(scope="module")
def grid():
    spec = GridSpec(15, 15)
    return spec, build_gridworld(spec, 0.9)


def mc_rollouts(mdp, policy, rng, n, horizon):
    """Vectorized Monte Carlo returns and discounted occupancies, independent of the DP code."""
    S = mdp.n_states
    s = rng.choice(S, size=n, p=mdp.initial_dist)
    returns = np.zeros(n)
    occupancy = np.zeros((n, S))
    for t in range(horizon):
        occupancy[np.arange(n), s] += (1 - mdp.discount) * mdp.discount ** t
        u = rng.random(n)
        a = (u[:, None] > np.cumsum(policy[s], axis=1)).sum(axis=1)
        returns += mdp.discount ** t * mdp.reward_mean[s, a]
        u = rng.random(n)
        s = np.minimum((u[:, None] > np.cumsum(mdp.transition[s, a], axis=1)).sum(axis=1), S - 1)
    return returns, occupancy


class TestConstruction:
    def test_rejects_bad_rows(self):
        P = np.ones((2, 1, 2))
        with pytest.raises(ValueError):
            TabularMdp(P, np.zeros((2, 1)), np.array([0.5, 0.5]), 0.9)

    def test_rejects_discount_one(self):
        with pytest.raises(ValueError):
            one_state_mdp(gamma=1.0)

    def test_rejects_bad_initial(self):
        with pytest.raises(ValueError):
            TabularMdp(np.ones((1, 1, 1)), np.zeros((1, 1)), np.array([0.9]), 0.5)

    def test_arrays_are_read_only(self):
        mdp = one_state_mdp()
        with pytest.raises(ValueError):
            mdp.reward_mean[0, 0] = 3.0


class TestGridworld:
    def test_default_grid_shape(self, grid):
        spec, mdp = grid
        assert (mdp.n_states, mdp.n_actions) == (225, 4)
        assert np.allclose(mdp.initial_dist, 1 / 225)
        assert mdp.discount == 0.9

    def test_rewards_and_noise(self, grid):
        spec, mdp = grid
        good = spec.state(14, 14)
        assert np.all(mdp.reward_mean[good] == 1.0)
        assert np.all(mdp.reward_std[good] == 0.0)
        for x, y in [(0, 0), (0, 7), (7, 0), (0, 14), (14, 0)]:
            s = spec.state(x, y)
            assert np.all(mdp.reward_mean[s] == -0.5)
            assert np.all(mdp.reward_std[s] == 1.0)
        assert np.all(mdp.reward_mean[spec.state(5, 5)] == 0.0)
        assert len(spec.noisy_cells) == 29

    def test_deterministic_transitions(self, grid):
        _, mdp = grid
        assert np.all(mdp.transition.max(axis=2) == 1.0)

    def test_one_by_one(self):
        spec = GridSpec(1, 1)
        mdp = build_gridworld(spec)
        assert np.all(mdp.transition[0, :, 0] == 1.0)
        assert np.all(mdp.reward_mean == 1.0)
        assert not spec.noisy_cells

    def test_wall_clamp(self):
        spec = GridSpec(2, 2)
        mdp = build_gridworld(spec)
        assert mdp.transition[spec.state(0, 0), RIGHT, spec.state(1, 0)] == 1.0
        assert mdp.transition[spec.state(1, 0), RIGHT, spec.state(1, 0)] == 1.0
        assert mdp.transition[spec.state(0, 0), UP, spec.state(0, 1)] == 1.0
        assert mdp.transition[spec.state(0, 0), DOWN, spec.state(0, 0)] == 1.0

    @pytest.mark.parametrize("kwargs", [dict(width=0), dict(height=-1), dict(width=2.5),
                                        dict(good_state=(5, 5)),
                                        dict(width=3, height=3, noisy_cells={(2, 2)})])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(ValueError):
            GridSpec(**{"width": 3, "height": 3, **kwargs})


class TestExactQ:
    def test_geometric_series(self):
        assert exact_q(one_state_mdp(), np.ones((1, 1)), tol=1e-12)[0, 0] == pytest.approx(10.0, abs=1e-10)

    def test_zero_reward(self):
        mdp = random_mdp(5, 3, np.random.default_rng(0))
        mdp = TabularMdp(mdp.transition, np.zeros((5, 3)), mdp.initial_dist, 0.9)
        assert np.all(exact_q(mdp, uniform_policy(5, 3)) == 0.0)

    def test_bellman_fixed_point(self):
        rng = np.random.default_rng(1)
        mdp = random_mdp(6, 3, rng)
        pi = random_policy(6, 3, rng)
        tol = 1e-9
        q = exact_q(mdp, pi, tol)
        resid = q - (mdp.reward_mean + mdp.discount * mdp.expected_next(state_values(q, pi)))
        assert np.max(np.abs(resid)) <= tol

    def test_matches_linear_solve(self):
        rng = np.random.default_rng(2)
        mdp = random_mdp(7, 2, rng, discount=0.95)
        pi = random_policy(7, 2, rng)
        S, A = 7, 2
        M = np.eye(S * A) - mdp.discount * (mdp.transition.reshape(S * A, S)[:, :, None] * pi[None]).reshape(S * A, S * A)
        q = np.linalg.solve(M, mdp.reward_mean.ravel()).reshape(S, A)
        assert np.allclose(exact_q(mdp, pi, 1e-13), q, atol=1e-10)

    def test_monte_carlo(self):
        rng = np.random.default_rng(3)
        mdp = random_mdp(3, 2, rng, discount=0.5)
        pi = uniform_policy(3, 2)
        returns, _ = mc_rollouts(mdp, pi, np.random.default_rng(4), 10**6, 40)
        se = returns.std() / np.sqrt(len(returns))
        assert abs(returns.mean() - j_value(mdp, pi)) < 3 * se

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            exact_q(one_state_mdp(), np.ones((2, 1)))


class TestJValue:
    def test_single_state(self):
        assert j_value(one_state_mdp(), np.ones((1, 1))) == pytest.approx(10.0, abs=1e-9)

    @pytest.mark.parametrize("c", [-2.0, 0.5, 3.0])
    def test_constant_reward(self, c):
        rng = np.random.default_rng(5)
        base = random_mdp(5, 3, rng, discount=0.8)
        mdp = TabularMdp(base.transition, np.full((5, 3), c), base.initial_dist, 0.8)
        for _ in range(3):
            assert j_value(mdp, random_policy(5, 3, rng)) == pytest.approx(c / 0.2, abs=1e-8)

    def test_occupancy_identity(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            mdp = random_mdp(int(rng.integers(1, 9)), int(rng.integers(1, 5)), rng, discount=float(rng.uniform(0, 0.95)))
            pi = random_policy(mdp.n_states, mdp.n_actions, rng)
            d = discounted_visitation(mdp, pi)
            via_occupancy = d @ state_values(mdp.reward_mean, pi) / (1 - mdp.discount)
            assert j_value(mdp, pi) == pytest.approx(via_occupancy, abs=1e-6)

    def test_optimal_beats_uniform_on_grid(self, grid):
        _, mdp = grid
        pi_star = optimal_policy(mdp)
        assert j_value(mdp, pi_star) > j_value(mdp, uniform_policy(225, 4))

    def test_optimal_dominates_random_policies(self, grid):
        _, mdp = grid
        rng = np.random.default_rng(7)
        j_star = j_value(mdp, optimal_policy(mdp))
        for _ in range(100):
            assert j_star >= j_value(mdp, random_policy(225, 4, rng)) - 1e-9


class TestVisitation:
    def test_single_state(self):
        assert discounted_visitation(one_state_mdp(), np.ones((1, 1)))[0] == pytest.approx(1.0)

    def test_tiny_discount_is_initial(self):
        rng = np.random.default_rng(8)
        base = random_mdp(4, 2, rng)
        mdp = TabularMdp(base.transition, base.reward_mean, base.initial_dist, 1e-9)
        assert np.allclose(discounted_visitation(mdp, uniform_policy(4, 2)), mdp.initial_dist, atol=1e-8)

    def test_monte_carlo(self):
        rng = np.random.default_rng(9)
        mdp = random_mdp(3, 2, rng, discount=0.5)
        pi = random_policy(3, 2, rng)
        _, occ = mc_rollouts(mdp, pi, np.random.default_rng(10), 10**6, 40)
        se = occ.std(axis=0) / np.sqrt(len(occ))
        assert np.all(np.abs(occ.mean(axis=0) - discounted_visitation(mdp, pi)) < 3 * se)

    def test_sums_to_one(self, grid):
        _, mdp = grid
        assert discounted_visitation(mdp, uniform_policy(225, 4)).sum() == pytest.approx(1.0, abs=1e-12)


class TestOptimalPolicy:
    def test_moves_toward_good_state(self, grid):
        spec, mdp = grid
        pi = optimal_policy(mdp)
        assert pi[spec.state(13, 14), RIGHT] == 1.0
        assert pi[spec.state(14, 13), UP] == 1.0

    def test_matches_value_iteration_oracle(self, grid):
        spec, mdp = grid
        # no single-step deviation from the returned policy helps anywhere
        pi = optimal_policy(mdp)
        q = exact_q(mdp, pi, 1e-12)
        assert np.all(state_values(q, pi) >= q.max(axis=1) - 1e-8)

    def test_single_action(self):
        assert np.array_equal(optimal_policy(one_state_mdp()), np.ones((1, 1)))

    def test_zero_reward_lowest_index(self):
        rng = np.random.default_rng(11)
        base = random_mdp(4, 3, rng)
        mdp = TabularMdp(base.transition, np.zeros((4, 3)), base.initial_dist, 0.9)
        assert np.array_equal(optimal_policy(mdp), deterministic_policy(np.zeros(4, dtype=int), 3))


class TestPolicies:
    def test_down_left(self):
        spec = GridSpec(15, 15)
        pi = down_left_policy(spec)
        for s in (spec.state(7, 7), spec.state(0, 0)):
            assert pi[s, DOWN] == 0.5 and pi[s, LEFT] == 0.5
            assert pi[s, UP] == 0.0 and pi[s, RIGHT] == 0.0

    def test_down_left_modes(self):
        spec = GridSpec(3, 3)
        assert np.all(down_left_policy(spec, "all_down")[:, DOWN] == 1.0)
        assert np.all(down_left_policy(spec, "all_left")[:, LEFT] == 1.0)
        with pytest.raises(ValueError):
            down_left_policy(spec, "sideways")

    def test_bottom_left_self_loops(self):
        spec = GridSpec(4, 4)
        mdp = build_gridworld(spec)
        s = spec.state(0, 0)
        assert mdp.transition[s, DOWN, s] == 1.0 and mdp.transition[s, LEFT, s] == 1.0

    def test_appendix_behavior(self):
        spec = GridSpec(15, 15)
        beta = mix_policies(down_left_policy(spec), uniform_policy(225, 4), 0.2)
        assert np.allclose(beta[0], [0.2, 0.3, 0.3, 0.2])

    def test_mix_endpoints(self):
        rng = np.random.default_rng(12)
        a, b = random_policy(5, 3, rng), random_policy(5, 3, rng)
        assert np.array_equal(mix_policies(a, b, 0.0), b)
        assert np.array_equal(mix_policies(a, b, 1.0), a)

    def test_fig4_behavior(self, grid):
        _, mdp = grid
        pi_star = optimal_policy(mdp)
        beta = mix_policies(pi_star, uniform_policy(225, 4), 0.2)
        assert np.allclose(beta, 0.2 * pi_star + 0.2, atol=1e-15)

    def test_mix_rejects_weight(self):
        with pytest.raises(ValueError):
            mix_policies(np.ones((1, 1)), np.ones((1, 1)), 1.5)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 1), st.integers(0, 2**32 - 1))
    def test_mix_rows_normalized(self, w, seed):
        rng = np.random.default_rng(seed)
        mixed = mix_policies(random_policy(6, 4, rng), random_policy(6, 4, rng), w)
        check_policy(mixed)
        assert np.max(np.abs(mixed.sum(axis=1) - 1)) <= 1e-12

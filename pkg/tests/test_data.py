import numpy as np
import pytest

from oampi_lab.data import (
    CSV_HEADER, Dataset, EstimationError, Trajectory, child_rng, collect, fit_empirical, mix_datasets,
    read_dataset_csv, write_dataset_csv,
)
from oampi_lab.mdp import (
    GridSpec, TabularMdp, build_gridworld, mix_policies, optimal_policy, random_mdp, uniform_policy,
)


@pytest.fixture(scope="module")
def fig4():
    spec = GridSpec(15, 15)
    mdp = build_gridworld(spec, 0.9)
    beta = mix_policies(optimal_policy(mdp), uniform_policy(225, 4), 0.2)
    return mdp, beta


def counting_oracle(steps, S, A):
    """Plain-Python tallies, kept separate from the vectorized estimator."""
    n = [[0] * A for _ in range(S)]
    tot = [[0.0] * A for _ in range(S)]
    for s, a, r, _ in steps:
        n[s][a] += 1
        tot[s][a] += r
    return n, tot


class TestCollect:
    def test_full_size_collection(self, fig4):
        mdp, beta = fig4
        ds = collect(mdp, beta, 100, 100, child_rng(0, 0))
        assert len(ds) == 100 and ds.n_steps == 10_000
        assert all(len(t) == 100 for t in ds.trajectories)

    def test_empty(self, fig4):
        mdp, beta = fig4
        ds = collect(mdp, beta, 0, 10, child_rng(0))
        assert len(ds) == 0 and ds.n_steps == 0

    def test_noise_free_rewards_exact(self):
        mdp = TabularMdp(np.ones((1, 1, 1)), np.array([[1.0]]), np.array([1.0]), 0.9)
        ds = collect(mdp, np.ones((1, 1)), 3, 20, child_rng(1))
        assert np.all(ds.flat.rewards == 1.0)

    def test_trajectories_are_chained(self, fig4):
        mdp, beta = fig4
        ds = collect(mdp, beta, 5, 50, child_rng(2))
        for t in ds.trajectories:
            assert np.array_equal(t.states[1:], t.next_states[:-1])
            assert np.all(mdp.transition[t.states, t.actions, t.next_states] == 1.0)

    def test_rejects_zero_horizon(self, fig4):
        mdp, beta = fig4
        with pytest.raises(ValueError):
            collect(mdp, beta, 1, 0, child_rng(0))

    def test_reproducible(self, fig4):
        mdp, beta = fig4
        a = collect(mdp, beta, 10, 10, child_rng(5, 0)).flat
        b = collect(mdp, beta, 10, 10, child_rng(5, 0)).flat
        assert np.array_equal(a.states, b.states) and np.array_equal(a.rewards, b.rewards)

    def test_initial_states_follow_rho(self):
        rng = np.random.default_rng(3)
        mdp = random_mdp(4, 2, rng)
        ds = collect(mdp, uniform_policy(4, 2), 20_000, 1, child_rng(4))
        freq = np.bincount(ds.flat.states, minlength=4) / 20_000
        se = np.sqrt(mdp.initial_dist * (1 - mdp.initial_dist) / 20_000)
        assert np.all(np.abs(freq - mdp.initial_dist) < 3 * se + 1e-12)


class TestMix:
    def setup_method(self):
        mdp = random_mdp(3, 2, np.random.default_rng(0))
        self.a = collect(mdp, uniform_policy(3, 2), 5, 4, child_rng(1), provenance="a")
        self.b = collect(mdp, uniform_policy(3, 2), 5, 4, child_rng(2), provenance="b")

    def _origins(self, mixed):
        ids_a = {id(t) for t in self.a.trajectories}
        return np.array([id(t) in ids_a for t in mixed.trajectories])

    def test_endpoints(self):
        assert not self._origins(mix_datasets(self.a, self.b, 0.0, 50, child_rng(3))).any()
        assert self._origins(mix_datasets(self.a, self.b, 1.0, 50, child_rng(3))).all()

    def test_fixed_size(self):
        for p in (0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0):
            assert len(mix_datasets(self.a, self.b, p, 100, child_rng(4))) == 100

    def test_half_mixture_fraction(self):
        frac = self._origins(mix_datasets(self.a, self.b, 0.5, 10_000, child_rng(5))).mean()
        assert abs(frac - 0.5) < 3 * np.sqrt(0.25 / 10_000)

    def test_bad_probability(self):
        with pytest.raises(ValueError):
            mix_datasets(self.a, self.b, 1.2, 10, child_rng(0))

    def test_empty_source_with_weight(self):
        with pytest.raises(ValueError):
            mix_datasets(Dataset(), self.b, 0.5, 10, child_rng(0))
        assert len(mix_datasets(Dataset(), self.b, 0.0, 10, child_rng(0))) == 10


class TestFitEmpirical:
    def test_full_coverage_noise_free(self):
        rng = np.random.default_rng(6)
        mdp = random_mdp(4, 3, rng)
        ds = collect(mdp, uniform_policy(4, 3), 50, 50, child_rng(7))
        model = fit_empirical(ds, 4, 3)
        assert np.all(model.count_sa > 0)
        assert np.allclose(model.reward_hat, mdp.reward_mean, rtol=0, atol=1e-13)

    def test_fallbacks(self):
        traj = Trajectory(np.array([0, 1]), np.array([1, 0]), np.array([2.0, 4.0]), np.array([1, 0]))
        model = fit_empirical(Dataset((traj,)), 3, 2)
        assert model.reward_hat[0, 0] == 0.0 and model.reward_hat[0, 1] == 2.0
        assert model.transition_hat[0, 0, 0] == 1.0
        assert np.allclose(model.behavior_hat[2], [0.5, 0.5])
        assert np.allclose(model.behavior_hat[0], [0.0, 1.0])
        assert np.all(model.transition_hat[2, :, 2] == 1.0)

    def test_rows_normalized(self, fig4):
        mdp, beta = fig4
        model = fit_empirical(collect(mdp, beta, 20, 20, child_rng(8)), 225, 4)
        assert np.max(np.abs(model.transition_hat.sum(axis=2) - 1)) <= 1e-12
        assert np.max(np.abs(model.behavior_hat.sum(axis=1) - 1)) <= 1e-12

    def test_empty_rejected(self):
        with pytest.raises(EstimationError):
            fit_empirical(Dataset(), 2, 2)

    def test_against_counting_oracle(self, fig4):
        mdp, beta = fig4
        ds = collect(mdp, beta, 100, 100, child_rng(0, 0))
        first = Dataset((Trajectory(*(getattr(ds.trajectories[0], f) for f in
                                      ("states", "actions", "rewards", "next_states"))),))
        model = fit_empirical(first, 225, 4)
        n, tot = counting_oracle(list(first.steps()), 225, 4)
        assert np.array_equal(model.count_sa, np.array(n))
        visited = model.count_sa > 0
        assert np.allclose(model.reward_hat[visited], (np.array(tot) / np.maximum(np.array(n), 1))[visited],
                           rtol=0, atol=1e-14)

    def test_noisy_cell_error_scale(self, fig4):
        mdp, beta = fig4
        model = fit_empirical(collect(mdp, beta, 100, 100, child_rng(0, 0)), 225, 4)
        noisy = (mdp.reward_std > 0) & (model.count_sa >= 5)
        z = (model.reward_hat[noisy] - mdp.reward_mean[noisy]) * np.sqrt(model.count_sa[noisy])
        # standardized errors should look standard normal
        assert abs(z.mean()) < 3 / np.sqrt(z.size)
        assert 0.8 < z.std() < 1.2

    def test_deterministic(self, fig4):
        mdp, beta = fig4
        ds = collect(mdp, beta, 10, 10, child_rng(9))
        a, b = fit_empirical(ds, 225, 4), fit_empirical(ds, 225, 4)
        assert np.array_equal(a.reward_hat, b.reward_hat) and np.array_equal(a.behavior_hat, b.behavior_hat)

    def test_consistency_large_sample(self, fig4):
        mdp, beta = fig4
        model = fit_empirical(collect(mdp, beta, 10_000, 100, child_rng(10)), 225, 4)
        well = model.count_sa >= 100
        se = np.where(well, mdp.reward_std / np.sqrt(np.maximum(model.count_sa, 1)), 0)
        err = np.abs(model.reward_hat - mdp.reward_mean)
        # per-pair 3 sigma, allowing the expected handful of 3-sigma exceedances
        frac_out = (err[well] > 3 * se[well] + 1e-12).mean()
        assert frac_out < 0.01
        visited = model.count_sa.sum(axis=1) >= 1000
        n_s = model.count_sa.sum(axis=1)[visited]
        tv = 0.5 * np.abs(model.behavior_hat[visited] - beta[visited]).sum(axis=1)
        # TV of a multinomial MLE concentrates at order sqrt(A / n)
        assert np.all(tv < 3 * np.sqrt(4 / n_s))


class TestCsv:
    def test_round_trip(self, tmp_path, fig4):
        mdp, beta = fig4
        ds = collect(mdp, beta, 3, 7, child_rng(11))
        path = tmp_path / "d.csv"
        write_dataset_csv(ds, path)
        back = read_dataset_csv(path)
        for f in ("states", "actions", "rewards", "next_states"):
            assert np.array_equal(getattr(ds.flat, f), getattr(back.flat, f))
        assert path.read_text().splitlines()[0] == ",".join(CSV_HEADER)

    def test_seventeen_digits(self, tmp_path):
        traj = Trajectory(np.array([0]), np.array([0]), np.array([0.1 + 0.2]), np.array([0]))
        path = tmp_path / "d.csv"
        write_dataset_csv(Dataset((traj,)), path)
        assert path.read_text().splitlines()[1] == "0,0,0,0,0.30000000000000004,0"

    def test_missing_header(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("0,0,0,0,1.0,0\n")
        with pytest.raises(ValueError):
            read_dataset_csv(path)

import math

import numpy as np
import pytest

from banditlp.environments import (
    EmptyRegion,
    LoggedDataset,
    NoInteractions,
    ReplayConfig,
    ReplayEnvironment,
    SyntheticConfig,
    SyntheticEnvironment,
    impute_reward_matrix,
    make_logged_dataset,
    mu_cost,
    mu_reward,
    nearest_observers,
    top_fraction_items,
)

SMALL = SyntheticConfig(users=40, items=10, providers=5, seed=3)


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


class TestShapes:
    def test_cost_at_zero(self):
        assert mu_cost(0.0) == 1.0

    def test_reward_at_zero(self):
        assert mu_reward(0.0) == pytest.approx(6 * sigmoid(5.0), rel=1e-14)
        assert mu_reward(0.0) == pytest.approx(5.9598, abs=1e-4)

    def test_golden_recomputation(self):
        env = SyntheticEnvironment(SMALL)
        rnd = env.gen_round(0)
        for u in range(0, 40, 7):
            for i in range(10):
                v = rnd.user_features[u] @ env.beta_u + rnd.item_features[i] @ env.beta_i
                ref = sigmoid(-4 * v + 5) + 5 * sigmoid(5 * v + 5) + 0.1 * math.sin(2 * v)
                assert rnd.mean_reward[u, i] == pytest.approx(ref, abs=1e-12)
                v1 = rnd.user_features[u] @ env.beta_u1 + rnd.item_features[i] @ env.beta_i1
                assert rnd.mean_cost1[u, i] == pytest.approx(1 + 0.1 * math.tanh(v1 / 2), abs=1e-12)
                v2 = rnd.user_features[u] @ env.beta_u2 + rnd.item_features[i] @ env.beta_i2
                assert rnd.mean_cost2[u, i] == pytest.approx(1 + 0.1 * math.tanh(v2 / 2), abs=1e-12)


class TestSynthetic:
    def test_defaults(self):
        cfg = SyntheticConfig()
        assert (cfg.users, cfg.items, cfg.providers, cfg.user_dim, cfg.item_dim) == (500, 100, 5, 10, 10)
        assert cfg.reward_noise == cfg.cost_noise == 0.1 and cfg.weight_scale == 0.6
        assert (cfg.global_multiplier, cfg.provider_multiplier, cfg.user_cap) == (0.8, 1.5, 2)

    def test_items_must_split(self):
        with pytest.raises(ValueError):
            SyntheticConfig(items=12, providers=5)

    def test_determinism(self):
        a, b = SyntheticEnvironment(SMALL), SyntheticEnvironment(SMALL)
        np.testing.assert_array_equal(a.beta_u, b.beta_u)
        np.testing.assert_array_equal(a.item_features, b.item_features)
        ra, rb = a.gen_round(4), b.gen_round(4)
        np.testing.assert_array_equal(ra.reward, rb.reward)
        np.testing.assert_array_equal(ra.cost2, rb.cost2)

    def test_items_fixed_users_fresh(self):
        env = SyntheticEnvironment(SMALL)
        r0, r1 = env.gen_round(0), env.gen_round(1)
        np.testing.assert_array_equal(r0.item_features, r1.item_features)
        assert not np.array_equal(r0.user_features, r1.user_features)

    def test_provider_partition(self):
        env = SyntheticEnvironment(SMALL)
        sets = [set(np.flatnonzero(env.providers == l)) for l in range(5)]
        assert set().union(*sets) == set(range(10))
        assert sum(len(s) for s in sets) == 10
        assert {len(s) for s in sets} == {2}

    def test_pair_features_layout(self):
        rnd = SyntheticEnvironment(SMALL).gen_round(0)
        F = rnd.features()
        np.testing.assert_array_equal(F[3 * 10 + 7], np.r_[rnd.user_features[3], rnd.item_features[7]])

    def test_biased_log_region(self):
        env = SyntheticEnvironment(SyntheticConfig(users=100, items=20, seed=1))
        log = env.biased_logging_data(rounds=2)
        d = env.config.user_dim
        score = log.features[:, :d] @ env.beta_u + log.features[:, d:] @ env.beta_i
        assert len(log) > 0 and np.all(score < 0)
        counts = np.bincount(log.users * 1000 + 0)  # per (round, user) counts bounded by the cap
        assert counts.max() <= 2 * 2

    def test_biased_log_empty_region(self):
        env = SyntheticEnvironment(SMALL)
        env.beta_u = np.zeros_like(env.beta_u)
        env.item_features = np.ones_like(env.item_features)
        env.beta_i = np.abs(env.beta_i) + 1.0
        with pytest.raises(EmptyRegion):
            env.biased_logging_data()

    def test_forced_unit_costs(self):
        env = SyntheticEnvironment(SyntheticConfig(users=500, items=10, providers=5))
        env.draw_costs = lambda zu, rng: (np.ones((len(zu), 10)), np.ones((len(zu), 10)))
        t = env.compute_constraint_targets()
        assert t.global_budget == pytest.approx(0.8 * 5000 * 2 * 500 / 5000)
        assert t.global_budget == pytest.approx(0.8 * 2 * 500)

    def test_provider_targets_symmetric(self):
        t = SyntheticEnvironment(SyntheticConfig(seed=2)).compute_constraint_targets()
        b = t.provider_budgets
        assert np.all(np.abs(b - b.mean()) <= 0.1 * b.mean())

    def test_self_calibrated_random_policy(self):
        cfg = SyntheticConfig(users=200, items=20, providers=5, global_multiplier=1.0,
                              provider_multiplier=1.0, seed=5)
        env = SyntheticEnvironment(cfg)
        t = env.compute_constraint_targets()
        rng = np.random.default_rng(0)
        excess = []
        for r in range(100):
            rnd = env.gen_round(r)
            keys = rng.random((cfg.users, cfg.items))
            chosen = np.zeros_like(keys, bool)
            chosen[np.arange(cfg.users)[:, None], np.argsort(keys, axis=1)[:, :2]] = True
            excess.append(rnd.cost1[chosen].sum() - t.global_budget)
        m, se = np.mean(excess), np.std(excess, ddof=1) / 10
        assert abs(m) <= 1.96 * se + 0.01 * t.global_budget


class TestImputation:
    def _fixture(self):
        # three users on a line; every user saw item 0, only user 0 and 2 saw item 1
        feats = np.array([[0.0], [1.0], [3.0]])
        users = np.array([0, 1, 2, 0, 2])
        items = np.array([0, 0, 0, 1, 1])
        rewards = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
        return LoggedDataset(users, items, rewards, feats, 2)

    def test_neighbor_sets_match_brute_force(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(3, 2))
        observers = np.array([0, 1, 2])
        got = nearest_observers(feats, observers, np.arange(3), k=2)
        for q in range(3):
            d = np.linalg.norm(feats - feats[q], axis=1)
            assert set(got[q]) == set(np.argsort(d)[:2])

    def test_fixture_probabilities(self):
        ds = self._fixture()
        orc = impute_reward_matrix(ds, k=2, rng=np.random.default_rng(0))
        # user 1 did not see item 1; its two nearest observers are users 0 and 2
        assert orc.probabilities[1, 1] == pytest.approx(0.5)
        np.testing.assert_array_equal(orc.rewards[:, 0], [1, 0, 1])
        assert orc.observed.sum() == 5

    def test_all_neighbours_clicked(self):
        ds = LoggedDataset(np.arange(11), np.zeros(11, int), np.r_[np.ones(10), 1.0],
                           np.arange(12.0)[:, None], 1)
        orc = impute_reward_matrix(ds, k=10)
        assert orc.probabilities[11, 0] == 1.0 and orc.rewards[11, 0] == 1.0

    def test_zero_column(self):
        ds = LoggedDataset(np.arange(12), np.r_[np.zeros(11, int), 1], np.zeros(12),
                           np.random.default_rng(1).normal(size=(20, 2)), 2)
        orc = impute_reward_matrix(ds, k=10)
        assert np.all(orc.rewards == 0)
        assert orc.fallback_items == (1,)

    def test_item_without_rows(self):
        ds = LoggedDataset(np.arange(3), np.zeros(3, int), np.ones(3), np.zeros((3, 1)), 2)
        with pytest.raises(NoInteractions):
            impute_reward_matrix(ds, k=2)

    def test_deterministic(self):
        ds = make_logged_dataset(300, 6, seed=2)
        a = impute_reward_matrix(ds, 10, np.random.default_rng(5))
        b = impute_reward_matrix(ds, 10, np.random.default_rng(5))
        np.testing.assert_array_equal(a.rewards, b.rewards)


class TestReplay:
    def test_top_thirty_percent(self):
        ctr = 0.1 * np.arange(1, 11) / 10
        np.testing.assert_array_equal(top_fraction_items(ctr, 0.3) + 1, [8, 9, 10])

    def test_csv_round_trip(self, tmp_path):
        ds = make_logged_dataset(50, 4, dim=3, seed=1)
        path = tmp_path / "log.csv"
        ds.to_csv(path)
        back = LoggedDataset.from_csv(path)
        assert back.num_users == 50 and back.num_items == 4
        np.testing.assert_array_equal(back.rewards, ds.rewards)
        np.testing.assert_allclose(back.user_features, ds.user_features)

    def test_csv_user_subsample(self, tmp_path):
        path = tmp_path / "log.csv"
        make_logged_dataset(80, 4, dim=2).to_csv(path)
        assert LoggedDataset.from_csv(path, max_users=30, rng=0).num_users == 30

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError):
            LoggedDataset.from_csv(path)

    def test_biased_log_uses_top_items(self):
        env = ReplayEnvironment(make_logged_dataset(400, 10, seed=3), ReplayConfig(users_per_round=100))
        log = env.biased_logging_data()
        assert set(np.unique(log.items)) <= set(env.eligible_items())
        assert len(env.eligible_items()) == 3

    def test_round_rewards_come_from_oracle(self):
        env = ReplayEnvironment(make_logged_dataset(400, 10, seed=3), ReplayConfig(users_per_round=100))
        rnd = env.gen_round(0)
        np.testing.assert_array_equal(rnd.reward, env.oracle.rewards[rnd.user_ids])
        assert set(np.unique(rnd.reward)) <= {0.0, 1.0}

    def test_deterministic(self):
        ds = make_logged_dataset(300, 10, seed=4)
        a = ReplayEnvironment(ds, ReplayConfig(seed=2)).gen_round(3)
        b = ReplayEnvironment(ds, ReplayConfig(seed=2)).gen_round(3)
        np.testing.assert_array_equal(a.cost1, b.cost1)
        np.testing.assert_array_equal(a.reward, b.reward)

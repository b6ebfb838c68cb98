import numpy as np
import pytest

from banditlp.bayes_models import (
    ACTIVATIONS,
    HEADS,
    DivergenceDetected,
    LaplaceState,
    Mlp,
    MlpSpec,
    PosteriorModel,
    TrainSchedule,
    fit_laplace,
    gradient_check,
    train_map,
)
from fixtures import PRIOR_VARIANCE, logistic_1d
from oracles import logistic_weight_posterior

XOR_Z = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
XOR_Y = np.array([0.0, 1.0, 1.0, 0.0])


class TestSpec:
    def test_defaults(self):
        spec = MlpSpec(4)
        assert spec.hidden_layer_sizes == (32, 32)
        assert spec.feature_dim == 33

    @pytest.mark.parametrize("kwargs", [
        {"input_dim": 0},
        {"input_dim": 2, "prior_variance": 0.0},
        {"input_dim": 2, "head": "gaussian", "noise_variance": 0.0},
        {"input_dim": 2, "activation": "relu"},
        {"input_dim": 2, "laplace_layers": 2},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            MlpSpec(**kwargs)


class TestTraining:
    @pytest.mark.parametrize("head", HEADS)
    @pytest.mark.parametrize("activation", ACTIVATIONS)
    def test_gradient_matches_finite_differences(self, head, activation):
        rng = np.random.default_rng(hash((head, activation)) % 2**32)
        spec = MlpSpec(3, (5, 4), activation, head, prior_variance=0.5, noise_variance=0.3)
        Z = rng.normal(size=(9, 3))
        y = (rng.random(9) < 0.5).astype(float) if head == "binary" else rng.normal(size=9)
        for seed in range(3):
            assert gradient_check(Mlp.init(spec, seed), Z, y, step=1e-5) < 1e-4

    def test_gradient_without_output_bias(self):
        rng = np.random.default_rng(1)
        spec = MlpSpec(2, (), use_bias=False)
        Z = rng.normal(size=(6, 2))
        y = (rng.random(6) < 0.5).astype(float)
        assert gradient_check(Mlp.init(spec, 0), Z, y) < 1e-4

    def test_memorizes_repeated_example(self):
        spec = MlpSpec(2)
        Z = np.tile([[0.3, -1.0]], (50, 1))
        model = train_map(spec, Z, np.ones(50), TrainSchedule(epochs=100, batch_size=10))
        assert fit_laplace(model).predict_mean([[0.3, -1.0]])[0] > 0.9

    def test_loss_decreases_on_separable_blobs(self):
        rng = np.random.default_rng(0)
        Z = np.vstack([rng.normal(-2, 0.5, (40, 2)), rng.normal(2, 0.5, (40, 2))])
        y = np.r_[np.zeros(40), np.ones(40)]
        _, hist = train_map(MlpSpec(2, (8,)), Z, y,
                            TrainSchedule(epochs=10, batch_size=80, learning_rate=0.01),
                            return_history=True)
        assert len(hist) == 10
        assert np.all(np.diff(hist) < 0)

    def test_xor_needs_hidden_layers(self):
        sched = TrainSchedule(epochs=2000, batch_size=4, learning_rate=0.05)
        deep = train_map(MlpSpec(2, (8, 8), prior_variance=100.0), XOR_Z, XOR_Y, sched)
        flat = train_map(MlpSpec(2, (), prior_variance=100.0), XOR_Z, XOR_Y, sched)
        assert np.mean((deep.predict(XOR_Z) > 0) == XOR_Y) == 1.0
        assert np.mean((flat.predict(XOR_Z) > 0) == XOR_Y) < 1.0

    def test_deterministic_given_seed(self):
        a = train_map(MlpSpec(2, (4,)), XOR_Z, XOR_Y, TrainSchedule(epochs=5), seed=3)
        b = train_map(MlpSpec(2, (4,)), XOR_Z, XOR_Y, TrainSchedule(epochs=5), seed=3)
        np.testing.assert_array_equal(a.get_flat(), b.get_flat())

    def test_divergence_detected(self):
        spec = MlpSpec(1, (), head="gaussian")
        with pytest.raises(DivergenceDetected):
            train_map(spec, [[1e200]], [1e200], TrainSchedule(epochs=3, learning_rate=1.0))

    def test_rejects_non_binary_labels(self):
        with pytest.raises(ValueError):
            train_map(MlpSpec(2), XOR_Z, XOR_Y + 0.5)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            train_map(MlpSpec(2), np.zeros((0, 2)), np.zeros(0))


class TestLaplace:
    def test_prior_only_posterior(self):
        spec = MlpSpec(3, (4,), prior_variance=2.0)
        state = fit_laplace(Mlp.init(spec, 0))
        np.testing.assert_allclose(state.omega, np.eye(5) / 2.0)
        Z = np.random.default_rng(0).normal(size=(5, 3))
        g = state.model.features(Z)
        np.testing.assert_allclose(state.variance(Z), 2.0 + 2.0 * np.sum(g * g, axis=1))

    def test_curvature_at_zero_logit(self):
        spec = MlpSpec(1, (), use_bias=False, prior_variance=1.0)
        model = Mlp(spec, [np.zeros((1, 1))], [np.zeros(1)])
        state = fit_laplace(model, [[2.0]])
        # f = 0 so h'' = 1/4, times g g^T = 4
        np.testing.assert_allclose(state.omega, [[1.0 + 0.25 * 4.0]])

    def test_gaussian_head_curvature(self):
        spec = MlpSpec(1, (), head="gaussian", use_bias=False, prior_variance=1.0, noise_variance=0.5)
        model = Mlp(spec, [np.ones((1, 1))], [np.zeros(1)])
        np.testing.assert_allclose(fit_laplace(model, [[3.0]]).omega, [[1.0 + 9.0 / 0.5]])

    def test_matches_quadrature_posterior(self):
        z, y, state = logistic_1d()
        _, var_w = logistic_weight_posterior(z, y, PRIOR_VARIANCE)
        for zs in (0.5, 1.0, 2.0, 10 * np.abs(z).max()):
            lla = state.variance([[zs]])[0] - PRIOR_VARIANCE
            assert lla == pytest.approx(zs * zs * var_w, rel=0.25)

    def test_far_point_has_larger_variance(self):
        z, y, state = logistic_1d()
        far = 10 * np.abs(z).max()
        near = z.mean()
        assert state.variance([[far]])[0] > state.variance([[near]])[0]
        _, var_w = logistic_weight_posterior(z, y, PRIOR_VARIANCE)
        assert far ** 2 * var_w > near ** 2 * var_w

    def test_variance_floor_and_order_invariance(self):
        rng = np.random.default_rng(4)
        Z = rng.normal(size=(30, 2))
        y = (rng.random(30) < 0.5).astype(float)
        model = train_map(MlpSpec(2, (6,)), Z, y, TrainSchedule(epochs=5))
        perm = rng.permutation(30)
        a, b = fit_laplace(model, Z), fit_laplace(model, Z[perm])
        Zs = rng.normal(size=(50, 2)) * 5
        np.testing.assert_allclose(a.variance(Zs), b.variance(Zs), rtol=1e-12)
        assert np.all(a.variance(Zs) >= model.spec.prior_variance)

    def test_adding_data_never_increases_variance(self):
        rng = np.random.default_rng(5)
        Z = rng.normal(size=(40, 2))
        model = Mlp.init(MlpSpec(2, (6,)), 1)
        Zs = rng.normal(size=(100, 2)) * 3
        prev = fit_laplace(model).variance(Zs)
        for n in range(1, 41, 5):
            cur = fit_laplace(model, Z[:n]).variance(Zs)
            assert np.all(cur <= prev + 1e-12)
            prev = cur


class TestSampling:
    def test_zero_temperature_returns_mean(self):
        _, _, state = logistic_1d()
        Zs = np.linspace(-3, 3, 11)[:, None]
        draw = state.predictive_sample(Zs, 0, tau=0.0)
        np.testing.assert_array_equal(draw.sample, draw.mean)
        np.testing.assert_array_equal(draw.output, state.predict_mean(Zs))

    def test_same_seed_same_draw(self):
        _, _, state = logistic_1d()
        Zs = np.linspace(-3, 3, 11)[:, None]
        a = state.predictive_sample(Zs, 42)
        b = state.predictive_sample(Zs, 42)
        np.testing.assert_array_equal(a.sample, b.sample)

    def test_binary_output_in_unit_interval(self):
        _, _, state = logistic_1d()
        out = state.predictive_sample(np.linspace(-30, 30, 101)[:, None], 1, tau=3.0).output
        assert np.all((out >= 0) & (out <= 1))

    def test_variance_scales_linearly_with_temperature(self):
        _, _, state = logistic_1d()
        z = np.full((1000, 1), 1.3)
        V = state.variance(z[:1])[0]
        taus = np.array([0.25, 0.5, 1.0, 2.0])
        rng = np.random.default_rng(0)
        for _ in range(3):
            emp = np.array([np.var(state.predictive_sample(z, rng, tau=t).sample) for t in taus])
            slope = np.polyfit(taus, emp, 1)[0]
            assert slope == pytest.approx(V, rel=0.10)

    def test_predict_mean_is_temperature_free(self):
        _, _, state = logistic_1d()
        Zs = np.linspace(-2, 2, 5)[:, None]
        np.testing.assert_array_equal(state.with_temperature(5.0).predict_mean(Zs), state.predict_mean(Zs))

    def test_checkpoint_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        Z = rng.normal(size=(20, 3))
        y = rng.normal(size=20)
        model = train_map(MlpSpec(3, (5,), head="gaussian"), Z, y, TrainSchedule(epochs=3))
        state = fit_laplace(model, Z, temperature=0.7)
        path = tmp_path / "model.npz"
        state.save(path)
        back = LaplaceState.load(path)
        assert back.spec == state.spec and back.temperature == 0.7
        np.testing.assert_array_equal(back.omega, state.omega)
        np.testing.assert_array_equal(back.model.get_flat(), model.get_flat())
        np.testing.assert_array_equal(back.predictive_sample(Z, 9).sample,
                                      state.predictive_sample(Z, 9).sample)


class TestPosteriorModel:
    def test_update_shrinks_variance_at_observed_context(self):
        rng = np.random.default_rng(6)
        Z = rng.normal(size=(50, 2))
        y = (rng.random(50) < 0.5).astype(float)
        pm = PosteriorModel(MlpSpec(2, (6,)), TrainSchedule(epochs=5),
                            TrainSchedule(steps=0)).fit(Z, y)
        z_new = np.array([[2.5, -2.5]])
        before = pm.state.variance(z_new)[0]
        pm.update(np.repeat(z_new, 5, axis=0), np.ones(5))
        assert pm.state.variance(z_new)[0] < before

    def test_empty_update_keeps_state(self):
        rng = np.random.default_rng(7)
        Z = rng.normal(size=(20, 2))
        pm = PosteriorModel(MlpSpec(2, (4,)), TrainSchedule(epochs=2)).fit(Z, (Z[:, 0] > 0).astype(float))
        before = pm.state
        pm.update(np.zeros((0, 2)), np.zeros(0))
        assert pm.state is before and len(pm.y) == 20

    def test_centering_shrinks_towards_target_mean(self):
        rng = np.random.default_rng(8)
        Z = rng.normal(size=(40, 2))
        y = 5.0 + 0.1 * rng.normal(size=40)
        spec = MlpSpec(2, (4,), head="gaussian", prior_variance=1e-4)
        plain = PosteriorModel(spec, TrainSchedule(epochs=20)).fit(Z, y)
        centred = PosteriorModel(spec, TrainSchedule(epochs=20), center=True).fit(Z, y)
        assert centred.offset == pytest.approx(y.mean())
        assert abs(centred.predict_mean(Z).mean() - 5.0) < 0.05
        assert plain.predict_mean(Z).mean() < 1.0

    def test_centering_shifts_draws_consistently(self):
        rng = np.random.default_rng(9)
        Z = rng.normal(size=(30, 2))
        pm = PosteriorModel(MlpSpec(2, (4,), head="gaussian"), TrainSchedule(epochs=3),
                            center=True).fit(Z, 3.0 + Z[:, 0])
        draw = pm.predictive_sample(Z, 1, tau=0.0)
        np.testing.assert_allclose(draw.output, pm.predict_mean(Z))
        np.testing.assert_allclose(draw.mean, pm.state.predict_mean(Z) + pm.offset)

    def test_binary_head_never_centred(self):
        Z = np.random.default_rng(10).normal(size=(20, 2))
        pm = PosteriorModel(MlpSpec(2, (4,)), TrainSchedule(epochs=2), center=True)
        pm.fit(Z, (Z[:, 0] > 0).astype(float))
        assert pm.offset == 0.0

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.datasim import LabeledDataset
from fedsim.params import (
    BCE,
    LINEAR,
    MLP,
    MSE,
    ModelSpec,
    ParameterVector,
    SgdConfig,
    evaluate,
    init_model,
    local_train,
    per_sample_gradients,
    per_sample_losses,
    predict,
    sgd_step,
    train_steps,
)
from fedsim.rng import substream


def linear_spec(d=1, bias=False):
    return ModelSpec(kind=LINEAR, input_dim=d, include_bias=bias)


def make_dataset(rng, n, d, spec=None):
    X = rng.normal(size=(n, d))
    beta = rng.normal(size=d)
    y = X @ beta + 0.1 * rng.normal(size=n)
    return LabeledDataset(X, y)


class TestParameterVector:
    def test_length_must_match_layout(self):
        with pytest.raises(ValueError):
            ParameterVector(np.zeros(3), (("weights", (2,)),))

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            ParameterVector(np.array([1.0, np.nan]), (("weights", (2,)),))

    def test_num_params(self):
        assert ModelSpec(kind=LINEAR, input_dim=4).num_params == 5
        assert ModelSpec(kind=LINEAR, input_dim=4, include_bias=False).num_params == 4
        spec = ModelSpec(kind=MLP, input_dim=3, hidden_dim=5)
        assert spec.num_params == 3 * 5 + 5 + 5 + 1

    def test_invalid_specs(self):
        with pytest.raises(ValueError):
            ModelSpec(kind="conv")
        with pytest.raises(ValueError):
            ModelSpec(loss="hinge")
        with pytest.raises(ValueError):
            ModelSpec(input_dim=0)


class TestGradients:
    def test_zero_residual_gives_zero_gradient(self):
        spec = linear_spec()
        model = ParameterVector(np.array([0.0]), spec.layout)
        (g,) = per_sample_gradients(model, spec, np.array([[1.0]]), np.array([0.0]))
        assert g.values == pytest.approx([0.0])

    def test_hand_differentiated_value(self):
        # d/dw 0.5*(w*x - y)^2 = (w*x - y) * x = (1*2 - 0) * 2 = 4
        spec = linear_spec()
        model = ParameterVector(np.array([1.0]), spec.layout)
        (g,) = per_sample_gradients(model, spec, np.array([[2.0]]), np.array([0.0]))
        assert g.values == pytest.approx([4.0])

    def test_one_gradient_per_sample(self):
        rng = np.random.default_rng(0)
        spec = ModelSpec(kind=MLP, input_dim=4, hidden_dim=3)
        model = init_model(spec, rng)
        for k in (1, 3, 7):
            grads = per_sample_gradients(
                model, spec, rng.normal(size=(k, 4)), rng.normal(size=k)
            )
            assert len(grads) == k
            assert all(g.layout == model.layout for g in grads)

    def test_dimension_mismatch_raises(self):
        spec = linear_spec(d=3)
        model = ParameterVector(np.zeros(3), spec.layout)
        with pytest.raises(ValueError):
            per_sample_gradients(model, spec, np.zeros((2, 4)), np.zeros(2))

    def test_empty_batch_raises(self):
        spec = linear_spec(d=2)
        model = ParameterVector(np.zeros(2), spec.layout)
        with pytest.raises(ValueError):
            per_sample_gradients(model, spec, np.zeros((0, 2)), np.zeros(0))

    @settings(max_examples=40, deadline=None)
    @given(
        seed=st.integers(0, 2**32 - 1),
        kind=st.sampled_from([LINEAR, MLP]),
        loss=st.sampled_from([MSE, BCE]),
        d=st.integers(1, 5),
        h=st.integers(1, 4),
        batch=st.integers(1, 4),
    )
    def test_matches_central_finite_differences(self, seed, kind, loss, d, h, batch):
        rng = np.random.default_rng(seed)
        spec = ModelSpec(kind=kind, input_dim=d, hidden_dim=h, loss=loss)
        assert spec.num_params <= 50
        model = ParameterVector(rng.normal(0, 0.5, spec.num_params), spec.layout)
        X = rng.normal(size=(batch, d))
        y = (rng.uniform(size=batch) < 0.5).astype(float) if loss == BCE else rng.normal(size=batch)
        grads = per_sample_gradients(model, spec, X, y)
        eps = 1e-6
        for i in range(batch):
            numeric = np.zeros(spec.num_params)
            for j in range(spec.num_params):
                up, down = model.values.copy(), model.values.copy()
                up[j] += eps
                down[j] -= eps
                lu = per_sample_losses(ParameterVector(up, spec.layout), spec, X[i], y[i])[0]
                ld = per_sample_losses(ParameterVector(down, spec.layout), spec, X[i], y[i])[0]
                numeric[j] = (lu - ld) / (2 * eps)
            scale = max(1.0, np.max(np.abs(numeric)))
            assert np.max(np.abs(grads[i].values - numeric)) / scale < 1e-5


class TestSgdStep:
    def test_basic_arithmetic(self):
        spec = linear_spec()
        model = ParameterVector(np.array([1.0]), spec.layout)
        g = ParameterVector(np.array([1.0]), spec.layout)
        out = sgd_step(model, [g], SgdConfig(learning_rate=0.1))
        assert out.values == pytest.approx([0.9])

    def test_zero_gradient_identity(self):
        spec = linear_spec(d=3)
        model = ParameterVector(np.arange(3.0), spec.layout)
        g = ParameterVector(np.zeros(3), spec.layout)
        out = sgd_step(model, [g, g], SgdConfig(learning_rate=0.5))
        assert np.array_equal(out.values, model.values)

    def test_zero_learning_rate_identity(self):
        spec = linear_spec(d=2)
        model = ParameterVector(np.array([1.0, -2.0]), spec.layout)
        g = ParameterVector(np.array([5.0, 5.0]), spec.layout)
        out = sgd_step(model, [g], SgdConfig(learning_rate=0.0))
        assert np.array_equal(out.values, model.values)

    def test_empty_gradients_raise(self):
        spec = linear_spec()
        model = ParameterVector(np.zeros(1), spec.layout)
        with pytest.raises(ValueError):
            sgd_step(model, [], SgdConfig())

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 8))
    def test_linearity_in_the_gradient(self, seed, d):
        rng = np.random.default_rng(seed)
        spec = linear_spec(d=d)
        model = ParameterVector(rng.normal(size=d), spec.layout)
        g1 = ParameterVector(rng.normal(size=d), spec.layout)
        g2 = ParameterVector(rng.normal(size=d), spec.layout)
        cfg = SgdConfig(learning_rate=0.3)
        joint = sgd_step(model, [g1, g2], cfg)
        s1 = sgd_step(model, [g1], cfg)
        s2 = sgd_step(model, [g2], cfg)
        averaged = 0.5 * (s1.values + s2.values)
        assert np.allclose(joint.values, averaged, rtol=1e-12, atol=1e-12)


class TestLocalTrain:
    def test_zero_epochs_identity(self):
        rng = np.random.default_rng(1)
        spec = linear_spec(d=4, bias=True)
        model = init_model(spec)
        ds = make_dataset(rng, 30, 4)
        out, losses = local_train(
            model, spec, ds, SgdConfig(epochs_per_round=0), shuffle_rng=substream(0, "s")
        )
        assert np.array_equal(out.values, model.values)
        assert losses == []

    def test_training_reduces_mse_on_linear_data(self):
        rng = np.random.default_rng(2)
        spec = linear_spec(d=3, bias=True)
        model = init_model(spec)
        ds = make_dataset(rng, 60, 3)
        loss0 = float(np.mean(per_sample_losses(model, spec, ds.features, ds.targets)))
        out, losses = local_train(
            model, spec, ds,
            SgdConfig(learning_rate=0.05, batch_size=8, epochs_per_round=50),
            shuffle_rng=substream(0, "s"),
        )
        loss_end = float(np.mean(per_sample_losses(out, spec, ds.features, ds.targets)))
        assert loss_end < loss0
        assert losses[-1] < losses[0]

    def test_deterministic_replay(self):
        rng = np.random.default_rng(3)
        spec = ModelSpec(kind=MLP, input_dim=4, hidden_dim=3)
        model = init_model(spec, np.random.default_rng(0))
        ds = make_dataset(rng, 40, 4)
        cfg = SgdConfig(learning_rate=0.01, batch_size=8, epochs_per_round=3)
        a, _ = local_train(model, spec, ds, cfg, shuffle_rng=substream(9, "t"))
        b, _ = local_train(model, spec, ds, cfg, shuffle_rng=substream(9, "t"))
        assert np.array_equal(a.values, b.values)

    def test_train_steps_matches_whole_epochs(self):
        rng = np.random.default_rng(4)
        spec = linear_spec(d=4, bias=True)
        model = init_model(spec)
        ds = make_dataset(rng, 32, 4)
        cfg = SgdConfig(learning_rate=0.02, batch_size=8, epochs_per_round=2)
        by_epochs, _ = local_train(model, spec, ds, cfg, shuffle_rng=substream(5, "u"))
        n_steps = 2 * (32 // 8)
        by_steps = train_steps(model, spec, ds, n_steps, cfg, shuffle_rng=substream(5, "u"))
        assert np.array_equal(by_epochs.values, by_steps.values)


class TestEvaluate:
    def test_perfect_predictor_zero_mae(self):
        rng = np.random.default_rng(5)
        spec = linear_spec(d=3, bias=True)
        beta = rng.normal(size=3)
        model = ParameterVector(np.concatenate([beta, [0.5]]), spec.layout)
        X = rng.normal(size=(20, 3))
        ds = LabeledDataset(X, X @ beta + 0.5)
        assert evaluate(model, spec, ds)["mae"] == pytest.approx(0.0, abs=1e-12)

    def test_constant_zero_predictor(self):
        spec = linear_spec(d=2, bias=True)
        model = init_model(spec)  # all zeros
        ds = LabeledDataset(np.zeros((10, 2)), np.full(10, 2.0))
        assert evaluate(model, spec, ds)["mae"] == pytest.approx(2.0)

    def test_always_positive_classifier_on_balanced_labels(self):
        spec = ModelSpec(kind=LINEAR, input_dim=2, loss=BCE, include_bias=True)
        values = np.array([0.0, 0.0, 50.0])  # huge bias: sigmoid ~ 1 everywhere
        model = ParameterVector(values, spec.layout)
        X = np.random.default_rng(6).normal(size=(40, 2))
        y = np.array([0.0, 1.0] * 20)
        out = evaluate(model, spec, ds := LabeledDataset(X, y, "binary"))
        assert out["accuracy"] == pytest.approx(0.5)

    def test_empty_dataset_rejected_at_construction(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((0, 2)), np.zeros(0))

    def test_auc_of_perfect_ranking(self):
        spec = ModelSpec(kind=LINEAR, input_dim=1, loss=BCE, include_bias=False)
        model = ParameterVector(np.array([5.0]), spec.layout)
        X = np.array([[-2.0], [-1.0], [1.0], [2.0]])
        y = np.array([0.0, 0.0, 1.0, 1.0])
        out = evaluate(model, spec, LabeledDataset(X, y, "binary"))
        assert out["auc"] == pytest.approx(1.0)


def test_predict_mlp_shapes():
    spec = ModelSpec(kind=MLP, input_dim=6, hidden_dim=4)
    model = init_model(spec, np.random.default_rng(0))
    X = np.random.default_rng(1).normal(size=(9, 6))
    assert predict(model, spec, X).shape == (9,)

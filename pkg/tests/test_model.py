import json

import numpy as np
import numpy.testing as npt
import pytest

from errors import ModelStateError, RejectedInputError
from losses import LOSS_PRESETS, LossGrads, Regularizer, Temperature, combined_loss, numerical_gradient, relative_error
from model import (
    ModelParams,
    ProjectionHead,
    assign_parameters,
    backward,
    embed,
    forward,
    init_model,
    load_checkpoint,
    named_parameters,
    parameter_checksum,
    save_checkpoint,
)
from optim import AdamWState
from scoring import predicted_similarities


class TestInit:
    def test_same_seed_is_bit_identical(self):
        a = init_model(6, 5, 4, [7], seed=3)
        b = init_model(6, 5, 4, [7], seed=3)
        assert parameter_checksum(a) == parameter_checksum(b)
        for name, value in named_parameters(a).items():
            npt.assert_array_equal(value, named_parameters(b)[name])

    def test_different_seed_differs(self):
        assert parameter_checksum(init_model(6, 5, 4, [], 1)) != parameter_checksum(init_model(6, 5, 4, [], 2))

    def test_no_hidden_layers_is_single_affine(self):
        m = init_model(8, 6, 4, [], seed=0)
        assert m.text_head.n_layers == 1
        assert m.text_head.weights[0].shape == (4, 8)
        assert m.audio_head.weights[0].shape == (4, 6)

    def test_shape_chaining(self):
        m = init_model(8, 8, 4, [16], seed=0)
        assert [w.shape for w in m.text_head.weights] == [(16, 8), (4, 16)]
        assert [b.shape for b in m.text_head.biases] == [(16,), (4,)]

    def test_biases_zero_and_temperature_default(self):
        m = init_model(3, 3, 2, [4], seed=0)
        for b in m.text_head.biases + m.audio_head.biases:
            npt.assert_array_equal(b, 0.0)
        assert m.temperature.tau == pytest.approx(0.07)

    def test_weight_scale(self):
        m = init_model(400, 400, 300, [], seed=0)
        w = m.text_head.weights[0]
        assert abs(w.mean()) < 0.01
        assert w.std() == pytest.approx(1 / np.sqrt(400), rel=0.02)

    @pytest.mark.parametrize("dims", [(0, 3, 2, []), (3, 3, 0, []), (3, 3, 2, [0])])
    def test_invalid_dims(self, dims):
        with pytest.raises(RejectedInputError):
            init_model(*dims, seed=0)

    def test_heads_must_share_output(self):
        with pytest.raises(RejectedInputError):
            ModelParams(ProjectionHead([np.ones((2, 3))], [np.zeros(2)]), ProjectionHead([np.ones((3, 3))], [np.zeros(3)]))


class TestForward:
    def test_zero_parameters_give_zero_embeddings(self, rng):
        head = ProjectionHead([np.zeros((3, 4))], [np.zeros(3)])
        m = ModelParams(head, ProjectionHead([np.zeros((3, 2))], [np.zeros(3)]))
        emb = forward(m, rng.standard_normal((5, 4)), rng.standard_normal((5, 2)))
        npt.assert_array_equal(emb.text, 0.0)
        npt.assert_array_equal(emb.audio, 0.0)

    def test_single_layer_is_affine(self, rng):
        m = init_model(4, 3, 2, [], seed=5)
        m = assign_parameters(m, {**named_parameters(m), "text.layers.0.bias": np.array([0.5, -1.0])})
        x = rng.standard_normal((6, 4))
        emb = forward(m, x, rng.standard_normal((6, 3)))
        npt.assert_allclose(emb.text, x @ m.text_head.weights[0].T + np.array([0.5, -1.0]), atol=1e-14)

    def test_two_layer_matches_hand_oracle(self, rng):
        m = init_model(3, 3, 2, [4], seed=9)
        params = named_parameters(m)
        params["audio.layers.0.bias"] = rng.standard_normal(4)
        params["audio.layers.1.bias"] = rng.standard_normal(2)
        m = assign_parameters(m, params)
        x = rng.standard_normal((3, 3))
        emb = forward(m, rng.standard_normal((3, 3)), x)

        w1, w2 = m.audio_head.weights
        b1, b2 = m.audio_head.biases
        for row in range(3):
            hidden = [np.tanh(sum(w1[j, k] * x[row, k] for k in range(3)) + b1[j]) for j in range(4)]
            for out in range(2):
                expected = sum(w2[out, j] * hidden[j] for j in range(4)) + b2[out]
                assert emb.audio[row, out] == pytest.approx(expected, abs=1e-13)

    def test_deterministic(self, rng):
        m = init_model(4, 4, 3, [5], seed=2)
        x, z = rng.standard_normal((2, 7, 4))
        npt.assert_array_equal(forward(m, x, z).text, forward(m, x, z).text)
        npt.assert_array_equal(forward(m, x, z).audio, embed(m, x, z).audio)

    def test_feature_width_mismatch(self, rng):
        m = init_model(4, 4, 3, [], seed=2)
        with pytest.raises(RejectedInputError):
            forward(m, rng.standard_normal((2, 5)), rng.standard_normal((2, 4)))
        with pytest.raises(RejectedInputError):
            forward(m, rng.standard_normal((2, 4)), rng.standard_normal((3, 4)))

    def test_embed_leaves_cache_alone(self, rng):
        m = init_model(4, 4, 3, [], seed=2)
        embed(m, rng.standard_normal((2, 4)), rng.standard_normal((2, 4)))
        with pytest.raises(ModelStateError):
            backward(m, LossGrads(np.zeros((2, 3)), np.zeros((2, 3))))


class TestBackward:
    def test_requires_forward(self):
        m = init_model(4, 4, 3, [], seed=0)
        with pytest.raises(ModelStateError):
            backward(m, LossGrads(np.zeros((1, 3)), np.zeros((1, 3))))

    def test_zero_upstream(self, rng):
        m = init_model(4, 3, 2, [5], seed=0)
        forward(m, rng.standard_normal((6, 4)), rng.standard_normal((6, 3)))
        grads = backward(m, LossGrads(np.zeros((6, 2)), np.zeros((6, 2)), 0.0))
        for g in grads.values():
            npt.assert_array_equal(g, 0.0)

    def test_single_affine_layer(self, rng):
        m = init_model(4, 3, 2, [], seed=0)
        x = rng.standard_normal((6, 4))
        forward(m, x, rng.standard_normal((6, 3)))
        g = rng.standard_normal((6, 2))
        grads = backward(m, LossGrads(g, np.zeros((6, 2)), 0.25))
        expected = sum(np.outer(g[i], x[i]) for i in range(6))
        npt.assert_allclose(grads["text.layers.0.weight"], expected, atol=1e-13)
        npt.assert_allclose(grads["text.layers.0.bias"], g.sum(axis=0), atol=1e-14)
        assert float(grads["log_tau"]) == 0.25

    def test_upstream_shape_mismatch(self, rng):
        m = init_model(4, 3, 2, [], seed=0)
        forward(m, rng.standard_normal((6, 4)), rng.standard_normal((6, 3)))
        with pytest.raises(RejectedInputError):
            backward(m, LossGrads(np.zeros((5, 2)), np.zeros((5, 2))))

    def test_gradient_names_follow_parameters(self, rng):
        m = init_model(4, 3, 2, [5], seed=0)
        forward(m, rng.standard_normal((2, 4)), rng.standard_normal((2, 3)))
        grads = backward(m, LossGrads(np.ones((2, 2)), np.ones((2, 2))))
        assert list(grads) == list(named_parameters(m))


def _loss_of_params(m, params, text_x, audio_x, targets, preset):
    lambda1, lambda2, reg = LOSS_PRESETS[preset]
    model = assign_parameters(m, params)
    emb = embed(model, text_x, audio_x).with_targets(targets)
    return combined_loss(emb, model.temperature, lambda1, lambda2, reg).value


def _numeric_model_grads(m, text_x, audio_x, targets, preset, h=1e-5):
    base = {k: np.array(v, copy=True) for k, v in named_parameters(m).items()}
    numeric = {}
    for name in base:
        def f(value, name=name):
            params = dict(base)
            params[name] = value
            return _loss_of_params(m, params, text_x, audio_x, targets, preset)
        numeric[name] = numerical_gradient(f, base[name], h)
    return numeric


class TestEndToEndGradient:
    @pytest.mark.parametrize("preset", sorted(LOSS_PRESETS))
    def test_matches_finite_differences(self, preset):
        reg = LOSS_PRESETS[preset][2]
        rng = np.random.default_rng(7)
        checked = 0
        for seed in range(200):
            if checked == 20:
                break
            m = init_model(4, 3, 3, [5], seed=seed)
            m.temperature = Temperature(rng.uniform(-1.5, 0.0))
            n = int(rng.integers(2, 6))
            text_x = rng.standard_normal((n, 4))
            audio_x = rng.standard_normal((n, 3))
            targets = rng.uniform(0.0, 1.0, size=n)

            emb = embed(m, text_x, audio_x)
            y, cos, _, _ = predicted_similarities(emb.text, emb.audio)
            if np.min(np.abs(cos)) < 1e-3:
                continue
            if reg is Regularizer.MAE and np.min(np.abs(targets - y)) < 1e-3:
                continue

            lambda1, lambda2, _ = LOSS_PRESETS[preset]
            batch = forward(m, text_x, audio_x).with_targets(targets)
            loss = combined_loss(batch, m.temperature, lambda1, lambda2, reg)
            analytic = backward(m, loss.grads)
            numeric = _numeric_model_grads(m, text_x, audio_x, targets, preset)

            a = np.concatenate([np.ravel(analytic[k]) for k in analytic])
            b = np.concatenate([np.ravel(numeric[k]) for k in analytic])
            assert relative_error(a, b) < 1e-4, f"seed {seed}"
            checked += 1
        assert checked == 20


class TestParameters:
    def test_assign_rejects_bad_names_and_shapes(self):
        m = init_model(3, 3, 2, [], seed=0)
        params = named_parameters(m)
        with pytest.raises(RejectedInputError):
            assign_parameters(m, {k: v for k, v in params.items() if k != "log_tau"})
        params["text.layers.0.weight"] = np.zeros((3, 3))
        with pytest.raises(RejectedInputError):
            assign_parameters(m, params)

    def test_assign_copies(self):
        m = init_model(3, 3, 2, [], seed=0)
        params = named_parameters(m)
        other = assign_parameters(m, params)
        params["text.layers.0.weight"][0, 0] += 1.0
        assert other.text_head.weights[0][0, 0] != params["text.layers.0.weight"][0, 0]

    def test_log_tau_round_trips(self):
        m = init_model(3, 3, 2, [], seed=0)
        params = named_parameters(m)
        params["log_tau"] = np.array(-1.25)
        assert assign_parameters(m, params).temperature.log_tau == -1.25


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path, rng):
        m = init_model(5, 4, 3, [6], seed=11)
        params = {k: v + rng.standard_normal(np.shape(v)) * 1e-3 for k, v in named_parameters(m).items()}
        m = assign_parameters(m, params)
        state = AdamWState.create(named_parameters(m), lr=1e-3)
        state.first_moment["log_tau"] = np.array(0.123456789)

        save_checkpoint(tmp_path / "ckpt.json", m, state, {"train": {"epochs": 3}})
        loaded = load_checkpoint(tmp_path / "ckpt.json")

        assert parameter_checksum(loaded.model) == parameter_checksum(m)
        assert loaded.model.seed == 11
        assert loaded.config == {"train": {"epochs": 3}}
        assert loaded.optimizer.step_count == 0
        assert float(loaded.optimizer.first_moment["log_tau"]) == 0.123456789
        npt.assert_array_equal(loaded.optimizer.second_moment["text.layers.1.weight"], 0.0)

    def test_save_is_deterministic(self, tmp_path):
        m = init_model(5, 4, 3, [6], seed=11)
        save_checkpoint(tmp_path / "a.json", m)
        save_checkpoint(tmp_path / "b.json", m)
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_rejects_foreign_json(self, tmp_path):
        path = tmp_path / "other.json"
        path.write_text(json.dumps({"hello": "world"}))
        with pytest.raises(ModelStateError):
            load_checkpoint(path)
        path.write_text("not json")
        with pytest.raises(ModelStateError):
            load_checkpoint(path)

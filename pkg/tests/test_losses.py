import math

import numpy as np
import numpy.testing as npt
import pytest

import losses
from conftest import random_batch
from embedding_core import cosine
from errors import DegenerateInputError, RejectedInputError
from losses import (
    LOSS_PRESETS,
    BatchEmbeddings,
    LossGrads,
    Regularizer,
    Temperature,
    combined_loss,
    finite_diff_grad,
    mae_loss,
    mse_loss,
    numerical_gradient,
    preset_loss,
    relative_error,
    sce_loss,
    wsce_loss,
)
from scoring import predicted_similarities

KINK_MARGIN = 1e-3
GRAD_TOLERANCE = 1e-4


def _near_kink(b: BatchEmbeddings, reg: Regularizer) -> bool:
    y, cos, _, _ = predicted_similarities(b.text, b.audio)
    if np.min(np.abs(cos)) < KINK_MARGIN:
        return True
    return reg is Regularizer.MAE and np.min(np.abs(b.targets - y)) < KINK_MARGIN


def _assert_grads_close(analytic: LossGrads, numeric: LossGrads):
    assert relative_error(analytic.flatten(), numeric.flatten()) < GRAD_TOLERANCE


def _scalar_regression_oracle(b, power):
    total = 0.0
    for i in range(b.n):
        y = max(cosine(b.text[i], b.audio[i]), 0.0)
        total += abs(b.targets[i] - y) ** power
    return total / b.n


def _brute_sce(b, tau, weights):
    u = [row / math.sqrt(sum(x * x for x in row)) for row in b.text]
    v = [row / math.sqrt(sum(x * x for x in row)) for row in b.audio]
    n = b.n
    logit = [[float(np.dot(u[i], v[j])) / tau for j in range(n)] for i in range(n)]
    total = 0.0
    for i in range(n):
        text_to_audio = logit[i][i] - math.log(sum(math.exp(logit[i][j]) for j in range(n)))
        audio_to_text = logit[i][i] - math.log(sum(math.exp(logit[j][i]) for j in range(n)))
        total += weights[i] * (text_to_audio + audio_to_text)
    return -total / (2 * n)


class TestBatchEmbeddings:
    def test_shape_mismatch(self, rng):
        with pytest.raises(RejectedInputError):
            BatchEmbeddings(rng.standard_normal((3, 2)), rng.standard_normal((3, 4)), np.zeros(3))

    def test_targets_must_be_in_unit_interval(self, rng):
        with pytest.raises(RejectedInputError):
            BatchEmbeddings(rng.standard_normal((2, 2)), rng.standard_normal((2, 2)), [0.5, 1.2])

    def test_target_count(self, rng):
        with pytest.raises(RejectedInputError):
            BatchEmbeddings(rng.standard_normal((2, 2)), rng.standard_normal((2, 2)), [0.5])

    def test_losses_needing_targets(self, rng):
        b = random_batch(rng, 3, 2, targets=False)
        with pytest.raises(RejectedInputError):
            mse_loss(b)
        with pytest.raises(RejectedInputError):
            wsce_loss(b, Temperature())
        assert sce_loss(b, Temperature()).value > 0.0


class TestTemperature:
    def test_tau_is_positive(self):
        assert Temperature(-50.0).tau > 0.0
        assert Temperature().tau == pytest.approx(0.07)

    def test_from_tau(self):
        assert Temperature.from_tau(2.0).log_tau == pytest.approx(math.log(2.0))
        with pytest.raises(RejectedInputError):
            Temperature.from_tau(0.0)


class TestRegressionLosses:
    def test_mse_perfect_fit(self, rng):
        b = random_batch(rng, 5, 3)
        y, _, _, _ = predicted_similarities(b.text, b.audio)
        assert mse_loss(b.with_targets(y)).value == 0.0

    def test_mse_half(self):
        b = BatchEmbeddings([[1.0, 0.0], [1.0, 0.0]], [[0.0, 1.0], [0.0, 1.0]], [1.0, 0.0])
        assert mse_loss(b).value == 0.5

    def test_mse_matches_scalar_oracle(self, rng):
        b = random_batch(rng, 4, 3)
        assert mse_loss(b).value == pytest.approx(_scalar_regression_oracle(b, 2), abs=1e-14)

    def test_mae_perfect_fit(self, rng):
        b = random_batch(rng, 5, 3)
        y, _, _, _ = predicted_similarities(b.text, b.audio)
        assert mae_loss(b.with_targets(y)).value == 0.0

    def test_mae_max_error(self):
        b = BatchEmbeddings([[1.0, 0.0], [1.0, 0.0]], [[0.0, 1.0], [1.0, 0.0]], [1.0, 0.0])
        assert mae_loss(b).value == 1.0

    def test_mae_matches_scalar_oracle(self, rng):
        b = random_batch(rng, 4, 3)
        assert mae_loss(b).value == pytest.approx(_scalar_regression_oracle(b, 1), abs=1e-14)

    def test_values_lie_in_unit_interval(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 9))
            b = random_batch(rng, n, int(rng.integers(2, 6)))
            b = b.with_targets(rng.choice([0.0, 1.0, rng.uniform()], size=n))
            for fn in (mse_loss, mae_loss):
                assert 0.0 <= fn(b).value <= 1.0

    def test_no_gradient_through_negative_cosines(self):
        b = BatchEmbeddings([[1.0, 0.2]], [[-1.0, 0.1]], [0.8])
        grads = mse_loss(b).grads
        npt.assert_array_equal(grads.text, 0.0)
        npt.assert_array_equal(grads.audio, 0.0)
        assert grads.log_tau == 0.0

    def test_zero_norm_row(self):
        b = BatchEmbeddings([[0.0, 0.0]], [[1.0, 0.0]], [0.5])
        with pytest.raises(DegenerateInputError):
            mse_loss(b)


class TestContrastiveLosses:
    def test_single_pair_is_zero(self, rng):
        b = random_batch(rng, 1, 4)
        assert sce_loss(b, Temperature()).value == 0.0
        assert wsce_loss(b, Temperature()).value == 0.0

    def test_uniform_logits_give_log_n(self):
        m = np.array([[1.0, 0.0], [0.0, 1.0]])
        b = BatchEmbeddings(m, m.copy())
        assert sce_loss(b, Temperature.from_tau(1e6)).value == pytest.approx(math.log(2), abs=1e-5)

    def test_sce_matches_brute_force(self, rng):
        b = random_batch(rng, 3, 4)
        t = Temperature.from_tau(0.3)
        assert sce_loss(b, t).value == pytest.approx(_brute_sce(b, t.tau, [1.0] * 3), abs=1e-12)

    def test_wsce_matches_brute_force(self, rng):
        b = random_batch(rng, 5, 3)
        t = Temperature()
        assert wsce_loss(b, t).value == pytest.approx(_brute_sce(b, t.tau, b.targets), rel=1e-12)

    def test_raw_dot_products_when_not_normalized(self, rng):
        b = random_batch(rng, 4, 3)
        t = Temperature.from_tau(2.0)
        scaled = BatchEmbeddings(3.0 * b.text, b.audio, b.targets)
        assert wsce_loss(scaled, t).value == pytest.approx(wsce_loss(b, t).value, abs=1e-12)
        assert wsce_loss(scaled, t, normalize=False).value != pytest.approx(wsce_loss(b, t, normalize=False).value)

    def test_zero_weights_zero_gradient(self, rng):
        b = random_batch(rng, 4, 3).with_targets(np.zeros(4))
        loss = wsce_loss(b, Temperature())
        assert loss.value == 0.0
        npt.assert_array_equal(loss.grads.text, 0.0)
        npt.assert_array_equal(loss.grads.audio, 0.0)
        assert loss.grads.log_tau == 0.0

    def test_wsce_is_non_negative(self, rng):
        for _ in range(50):
            b = random_batch(rng, int(rng.integers(1, 9)), 3)
            assert wsce_loss(b, Temperature(rng.uniform(-4, 1))).value >= 0.0


class TestEquivalences:
    def test_wsce_with_unit_weights_equals_sce(self, rng):
        for _ in range(200):
            n = int(rng.choice([1, 2, 4, 8]))
            d = int(rng.choice([2, 8, 32]))
            b = random_batch(rng, n, d).with_targets(np.ones(n))
            t = Temperature(rng.uniform(-4.0, 1.0))
            assert abs(wsce_loss(b, t).value - sce_loss(b, t).value) <= 1e-12

    @pytest.mark.parametrize("reg,reference", [(Regularizer.MSE, mse_loss), (Regularizer.MAE, mae_loss)])
    def test_pure_regression_configuration(self, rng, reg, reference):
        for _ in range(200):
            n = int(rng.choice([1, 2, 4, 8]))
            d = int(rng.choice([2, 8, 32]))
            b = random_batch(rng, n, d)
            combined = combined_loss(b, Temperature(), 0.0, 1.0, reg)
            expected = reference(b)
            assert abs(combined.value - expected.value) <= 1e-12
            npt.assert_allclose(combined.grads.text, expected.grads.text, rtol=0, atol=1e-12)

    def test_pure_wsce_configuration(self, rng):
        b = random_batch(rng, 6, 4)
        t = Temperature()
        assert combined_loss(b, t, 1.0, 0.0, "mse").value == wsce_loss(b, t).value
        assert combined_loss(b, t, 1.0, 5.0, "none").value == wsce_loss(b, t).value

    def test_linear_in_lambdas(self, rng):
        b = random_batch(rng, 6, 4)
        t = Temperature()
        once = combined_loss(b, t, 0.1, 1.0, "mae")
        twice = combined_loss(b, t, 0.2, 2.0, "mae")
        assert twice.value == pytest.approx(2.0 * once.value, rel=1e-14)
        npt.assert_allclose(twice.grads.text, 2.0 * once.grads.text, rtol=1e-13, atol=1e-14)

    def test_rejects_negative_lambda(self, rng):
        with pytest.raises(RejectedInputError):
            combined_loss(random_batch(rng, 2, 2), Temperature(), -0.1, 1.0, "mse")

    def test_unknown_regularizer(self):
        with pytest.raises(RejectedInputError):
            Regularizer.parse("huber")


class TestPermutation:
    @pytest.mark.parametrize("name", ["wsce", "mse", "mae", "sce"])
    def test_permuting_pairs_permutes_gradients(self, rng, name):
        loss_fn = sce_loss if name == "sce" else preset_loss(name)
        for _ in range(50):
            n = int(rng.integers(2, 9))
            b = random_batch(rng, n, int(rng.integers(2, 6)))
            t = Temperature(rng.uniform(-1.5, 0.5))
            perm = rng.permutation(n)

            original = loss_fn(b, t)
            shuffled = loss_fn(b.permuted(perm), t)
            expected = original.grads.permuted(perm)
            assert abs(shuffled.value - original.value) <= 1e-12
            npt.assert_allclose(shuffled.grads.text, expected.text, rtol=1e-12, atol=1e-12)
            npt.assert_allclose(shuffled.grads.audio, expected.audio, rtol=1e-12, atol=1e-12)
            assert shuffled.grads.log_tau == pytest.approx(expected.log_tau, rel=1e-12, abs=1e-12)

    def test_permuted_batch_keeps_rows_aligned(self, rng):
        b = random_batch(rng, 4, 3)
        perm = np.array([2, 0, 3, 1])
        shuffled = b.permuted(perm)
        npt.assert_array_equal(shuffled.text[1], b.text[0])
        npt.assert_array_equal(shuffled.audio[1], b.audio[0])
        assert shuffled.targets[1] == b.targets[0]


class TestGradients:
    @pytest.mark.parametrize("normalize", [True, False])
    def test_sce_and_wsce(self, rng, normalize):
        for _ in range(10):
            b = random_batch(rng, int(rng.integers(1, 6)), int(rng.integers(2, 5)))
            t = Temperature(rng.uniform(-1.5, 0.5) if normalize else rng.uniform(-0.5, 1.0))
            for fn in (sce_loss, wsce_loss):
                loss_fn = lambda bb, tt: fn(bb, tt, normalize=normalize)
                _assert_grads_close(loss_fn(b, t).grads, finite_diff_grad(loss_fn, b, t))

    @pytest.mark.parametrize("preset", sorted(LOSS_PRESETS))
    def test_presets(self, rng, preset):
        reg = LOSS_PRESETS[preset][2]
        loss_fn = preset_loss(preset)
        checked = 0
        while checked < 20:
            b = random_batch(rng, int(rng.integers(2, 6)), int(rng.integers(2, 5)))
            if _near_kink(b, reg):
                continue
            t = Temperature(rng.uniform(-1.5, 0.5))
            _assert_grads_close(loss_fn(b, t).grads, finite_diff_grad(loss_fn, b, t))
            checked += 1

    def test_regression_log_tau_gradient_is_zero(self, rng):
        b = random_batch(rng, 3, 3)
        assert mse_loss(b).grads.log_tau == 0.0
        assert mae_loss(b).grads.log_tau == 0.0

    def test_wsce_log_tau_entry(self, rng):
        checked = 0
        while checked < 30:
            b = random_batch(rng, int(rng.integers(2, 7)), int(rng.integers(2, 5)))
            t = Temperature(rng.uniform(-1.5, 0.5))
            analytic = wsce_loss(b, t).grads.log_tau
            if abs(analytic) < 1e-4:
                continue
            numeric = finite_diff_grad(wsce_loss, b, t).log_tau
            assert abs(analytic - numeric) / abs(analytic) < GRAD_TOLERANCE
            checked += 1

    def test_regression_similarities_computed_once(self, rng, monkeypatch):
        calls = {"n": 0}
        real = losses.predicted_similarities

        def counting(text, audio):
            calls["n"] += 1
            return real(text, audio)

        monkeypatch.setattr(losses, "predicted_similarities", counting)
        b = random_batch(rng, 5, 3)
        with_shared = combined_loss(b, Temperature(), 0.1, 1.0, "mse")
        assert calls["n"] == 1
        monkeypatch.undo()
        assert with_shared.value == pytest.approx(
            0.1 * wsce_loss(b, Temperature()).value + mse_loss(b).value, rel=1e-14
        )


class TestGradientHelpers:
    def test_numerical_gradient_of_square(self):
        x = np.array([1.0, -2.0, 3.0])
        npt.assert_allclose(numerical_gradient(lambda v: np.sum(v**2), x), 2 * x, rtol=1e-8)

    def test_numerical_gradient_leaves_input_untouched(self):
        x = np.array([1.0, 2.0])
        numerical_gradient(lambda v: np.sum(v**3), x)
        npt.assert_array_equal(x, [1.0, 2.0])

    def test_scalar_input(self):
        assert float(numerical_gradient(lambda v: float(v) ** 2, np.array(3.0))) == pytest.approx(6.0)

    def test_relative_error_floor(self):
        assert relative_error([0.0], [1e-9]) == pytest.approx(1e-3)
        assert relative_error([2.0], [1.0]) == pytest.approx(0.5)

    def test_rejects_bad_step(self):
        with pytest.raises(RejectedInputError):
            numerical_gradient(lambda v: 0.0, np.zeros(2), h=0.0)

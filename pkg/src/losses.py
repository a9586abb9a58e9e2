"""
Earmark - Training Objectives

Every loss returns its value together with analytic gradients with respect
to both embedding matrices and the log-temperature:

- mse_loss       (1/N) sum (a_i - y_i)^2
- mae_loss       (1/N) sum |a_i - y_i|
- sce_loss       symmetric cross entropy over in-batch negatives
- wsce_loss      SCE with pair i weighted by its listener score a_i
- combined_loss  lambda1 * wSCE + lambda2 * (MSE | MAE)

y_i = ReLU(cos(e_i_text, e_i_audio)) comes from scoring.predicted_similarities.
Inside SCE/wSCE rows are L2-normalized before the dot products unless
normalize=False, in which case raw dot products are used.

Subgradients at kinks are 0: ReLU at cos == 0 and |.| at a_i == y_i.

finite_diff_grad is the central-difference oracle the tests hold the
analytic gradients to.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np
from scipy.special import log_softmax

try:
    from config import INITIAL_LOG_TAU
    from embedding_core import as_matrix, normalize_rows, row_norms
    from errors import NonFiniteError, RejectedInputError
    from scoring import predicted_similarities, relu_grad
except ModuleNotFoundError:
    from src.config import INITIAL_LOG_TAU
    from src.embedding_core import as_matrix, normalize_rows, row_norms
    from src.errors import NonFiniteError, RejectedInputError
    from src.scoring import predicted_similarities, relu_grad


class Regularizer(str, Enum):
    MSE = "mse"
    MAE = "mae"
    NONE = "none"

    @classmethod
    def parse(cls, value) -> "Regularizer":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise RejectedInputError(f"unknown regularizer {value!r}; expected mse, mae or none") from None


# (lambda1, lambda2, regularizer) for the five loss configurations compared
# in the ablation
LOSS_PRESETS = {
    "wsce+mse": (0.1, 1.0, Regularizer.MSE),
    "wsce+mae": (0.1, 1.0, Regularizer.MAE),
    "wsce": (1.0, 0.0, Regularizer.NONE),
    "mse": (0.0, 1.0, Regularizer.MSE),
    "mae": (0.0, 1.0, Regularizer.MAE),
}


# =============================================================================
# DOMAIN TYPES
# =============================================================================

@dataclass
class BatchEmbeddings:
    """
    N aligned text/audio embedding rows with optional listener targets.

    targets may be None for batches produced by the model before the
    training loop attaches scores.
    """

    text: np.ndarray
    audio: np.ndarray
    targets: Optional[np.ndarray] = None

    def __post_init__(self):
        self.text = as_matrix(self.text, "text")
        self.audio = as_matrix(self.audio, "audio")
        if self.text.shape != self.audio.shape:
            raise RejectedInputError(
                f"text and audio embeddings must share a shape, got {self.text.shape} vs {self.audio.shape}"
            )
        if self.targets is not None:
            targets = np.asarray(self.targets, dtype=np.float64)
            if targets.shape != (self.n,):
                raise RejectedInputError(f"expected {self.n} targets, got shape {targets.shape}")
            if not np.all(np.isfinite(targets)):
                raise NonFiniteError("targets contain non-finite entries")
            if np.any(targets < 0.0) or np.any(targets > 1.0):
                raise RejectedInputError("targets must lie in [0, 1]")
            self.targets = targets

    @property
    def n(self) -> int:
        return self.text.shape[0]

    @property
    def dim(self) -> int:
        return self.text.shape[1]

    def with_targets(self, targets) -> "BatchEmbeddings":
        return BatchEmbeddings(self.text, self.audio, targets)

    def permuted(self, perm) -> "BatchEmbeddings":
        targets = None if self.targets is None else self.targets[perm]
        return BatchEmbeddings(self.text[perm], self.audio[perm], targets)

    def require_targets(self) -> np.ndarray:
        if self.targets is None:
            raise RejectedInputError("this loss needs listener targets; the batch has none")
        return self.targets


@dataclass
class Temperature:
    """Learnable temperature stored as log(tau) so tau stays positive."""

    log_tau: float = INITIAL_LOG_TAU

    def __post_init__(self):
        self.log_tau = float(self.log_tau)
        if not math.isfinite(self.log_tau):
            raise NonFiniteError(f"log_tau must be finite, got {self.log_tau}")

    @property
    def tau(self) -> float:
        return math.exp(self.log_tau)

    @classmethod
    def from_tau(cls, tau: float) -> "Temperature":
        if not tau > 0:
            raise RejectedInputError(f"temperature must be positive, got {tau}")
        return cls(math.log(tau))


@dataclass
class LossGrads:
    """Gradients w.r.t. the text rows, the audio rows and log_tau."""

    text: np.ndarray
    audio: np.ndarray
    log_tau: float = 0.0

    @classmethod
    def zeros_like(cls, b: BatchEmbeddings) -> "LossGrads":
        return cls(np.zeros_like(b.text), np.zeros_like(b.audio), 0.0)

    def __add__(self, other: "LossGrads") -> "LossGrads":
        return LossGrads(self.text + other.text, self.audio + other.audio, self.log_tau + other.log_tau)

    def scaled(self, c: float) -> "LossGrads":
        return LossGrads(c * self.text, c * self.audio, c * self.log_tau)

    def permuted(self, perm) -> "LossGrads":
        return LossGrads(self.text[perm], self.audio[perm], self.log_tau)

    def flatten(self) -> np.ndarray:
        """All gradient entries as one vector (text, audio, log_tau)."""
        return np.concatenate([np.ravel(self.text), np.ravel(self.audio), [self.log_tau]])


@dataclass
class LossValue:
    value: float
    grads: LossGrads = field(repr=False)

    def __add__(self, other: "LossValue") -> "LossValue":
        return LossValue(self.value + other.value, self.grads + other.grads)

    def scaled(self, c: float) -> "LossValue":
        return LossValue(c * self.value, self.grads.scaled(c))


# =============================================================================
# REGRESSION LOSSES
# =============================================================================

def _similarity_backward(b: BatchEmbeddings, cos, text_norms, audio_norms, d_cos) -> LossGrads:
    """Chain d(loss)/d(cos_i) back onto the text and audio rows."""
    inv_both = 1.0 / (text_norms * audio_norms)
    g_text = d_cos[:, None] * (
        b.audio * inv_both[:, None] - (cos / text_norms**2)[:, None] * b.text
    )
    g_audio = d_cos[:, None] * (
        b.text * inv_both[:, None] - (cos / audio_norms**2)[:, None] * b.audio
    )
    return LossGrads(g_text, g_audio, 0.0)


def _regression(b: BatchEmbeddings, kind: Regularizer, similarities=None) -> LossValue:
    targets = b.require_targets()
    if similarities is None:
        similarities = predicted_similarities(b.text, b.audio)
    y, cos, text_norms, audio_norms = similarities

    residual = targets - y
    n = b.n
    if kind is Regularizer.MSE:
        value = float(np.mean(residual**2))
        d_y = -2.0 * residual / n
    elif kind is Regularizer.MAE:
        value = float(np.mean(np.abs(residual)))
        d_y = -np.sign(residual) / n
    else:
        raise RejectedInputError(f"not a regression loss: {kind}")

    d_cos = d_y * relu_grad(cos)
    return LossValue(value, _similarity_backward(b, cos, text_norms, audio_norms, d_cos))


def mse_loss(b: BatchEmbeddings, t: Optional[Temperature] = None) -> LossValue:
    """
    Mean squared error between targets a_i and predicted similarities y_i.

    The temperature argument is accepted and ignored so every loss shares
    the (batch, temperature) calling convention; the log_tau gradient is 0.
    """
    return _regression(b, Regularizer.MSE)


def mae_loss(b: BatchEmbeddings, t: Optional[Temperature] = None) -> LossValue:
    """Mean absolute error between a_i and y_i. See mse_loss."""
    return _regression(b, Regularizer.MAE)


# =============================================================================
# CONTRASTIVE LOSSES
# =============================================================================

def _contrastive(b: BatchEmbeddings, t: Temperature, weights: np.ndarray, normalize: bool) -> LossValue:
    n = b.n
    if normalize:
        u, text_norms = normalize_rows(b.text, "text")
        v, audio_norms = normalize_rows(b.audio, "audio")
    else:
        row_norms(b.text, "text")
        row_norms(b.audio, "audio")
        u, v = b.text, b.audio

    tau = t.tau
    z = (u @ v.T) / tau  # z[i, j] = text i . audio j / tau

    # text i against every audio j (rows); audio j against every text i (columns)
    log_p_text = log_softmax(z, axis=1)
    log_p_audio = log_softmax(z, axis=0)
    per_pair = np.diag(log_p_text) + np.diag(log_p_audio)
    value = -float(weights @ per_pair) / (2 * n)

    p_text = np.exp(log_p_text)
    p_audio = np.exp(log_p_audio)
    w_diag = np.diag(weights)
    g_z = -((w_diag - weights[:, None] * p_text) + (w_diag - p_audio * weights[None, :])) / (2 * n)

    g_s = g_z / tau
    d_log_tau = -float(np.sum(g_z * z))
    g_u = g_s @ v
    g_v = g_s.T @ u

    if normalize:
        g_text = (g_u - np.sum(g_u * u, axis=1)[:, None] * u) / text_norms[:, None]
        g_audio = (g_v - np.sum(g_v * v, axis=1)[:, None] * v) / audio_norms[:, None]
    else:
        g_text, g_audio = g_u, g_v

    return LossValue(value, LossGrads(g_text, g_audio, d_log_tau))


def sce_loss(b: BatchEmbeddings, t: Temperature, normalize: bool = True) -> LossValue:
    """
    Symmetric cross entropy over in-batch negatives (every pair weighted 1).

    Targets are not needed; a batch without them is accepted.
    """
    return _contrastive(b, t, np.ones(b.n), normalize)


def wsce_loss(b: BatchEmbeddings, t: Temperature, normalize: bool = True) -> LossValue:
    """
    Listener-weighted symmetric cross entropy.

    Both directional log-softmax terms of pair i are scaled by a_i; a_i are
    constants (no gradient flows into the targets).
    """
    return _contrastive(b, t, b.require_targets(), normalize)


def combined_loss(
    b: BatchEmbeddings,
    t: Temperature,
    lambda1: float,
    lambda2: float,
    reg,
    normalize: bool = True,
) -> LossValue:
    """
    lambda1 * wSCE + lambda2 * L_reg.

    With reg == NONE, lambda2 is ignored. A term whose weight is 0 is not
    evaluated, so lambda1 = 0 reproduces the pure regression loss exactly
    and lambda2 = 0 reproduces wSCE exactly.

    Args:
        b: Batch with targets
        t: Temperature
        lambda1: Weight of wSCE (>= 0)
        lambda2: Weight of the regression loss (>= 0)
        reg: Regularizer or one of "mse", "mae", "none"
        normalize: L2-normalize rows inside wSCE

    Returns:
        LossValue: Combined value and the same combination of gradients
    """
    reg = Regularizer.parse(reg)
    if lambda1 < 0 or lambda2 < 0:
        raise RejectedInputError(f"loss weights must be >= 0, got [{lambda1}, {lambda2}]")
    b.require_targets()

    total = LossValue(0.0, LossGrads.zeros_like(b))
    if lambda1 != 0:
        total = total + wsce_loss(b, t, normalize).scaled(lambda1)
    if reg is not Regularizer.NONE and lambda2 != 0:
        # y_i, cos_i and the row norms, computed once for the whole batch
        similarities = predicted_similarities(b.text, b.audio)
        total = total + _regression(b, reg, similarities).scaled(lambda2)
    return total


def preset_loss(name: str) -> Callable:
    """Return loss_fn(b, t) for one of the LOSS_PRESETS keys."""
    try:
        lambda1, lambda2, reg = LOSS_PRESETS[name]
    except KeyError:
        raise RejectedInputError(f"unknown loss preset {name!r}; choose from {sorted(LOSS_PRESETS)}") from None
    return lambda b, t: combined_loss(b, t, lambda1, lambda2, reg)


# =============================================================================
# GRADIENT VERIFICATION
# =============================================================================

def numerical_gradient(func: Callable, x, h: float = 1e-5) -> np.ndarray:
    """
    Central-difference gradient of a scalar function at x.

    (f(x + h e_i) - f(x - h e_i)) / 2h for every entry i of x.
    """
    if not h > 0:
        raise RejectedInputError(f"step h must be > 0, got {h}")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    for i in range(x.size):
        original = x.flat[i]
        x.flat[i] = original + h
        f_plus = float(func(x))
        x.flat[i] = original - h
        f_minus = float(func(x))
        x.flat[i] = original
        grad.flat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def finite_diff_grad(loss_fn: Callable, b: BatchEmbeddings, t: Temperature, h: float = 1e-5) -> LossGrads:
    """
    Central-difference gradients of loss_fn(b, t).value for every entry of
    both embedding matrices and for log_tau.
    """
    g_text = numerical_gradient(
        lambda m: loss_fn(BatchEmbeddings(m, b.audio, b.targets), t).value, b.text, h
    )
    g_audio = numerical_gradient(
        lambda m: loss_fn(BatchEmbeddings(b.text, m, b.targets), t).value, b.audio, h
    )
    g_tau = numerical_gradient(
        lambda lt: loss_fn(b, Temperature(float(lt))).value, np.array(t.log_tau), h
    )
    return LossGrads(g_text, g_audio, float(g_tau))


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """
    ||analytic - numeric|| / max(||analytic||, ||numeric||, floor), L2 norms
    over all entries.

    The floor keeps an all-zero true gradient from dividing rounding noise
    by rounding noise.
    """
    analytic = np.ravel(np.asarray(analytic, dtype=np.float64))
    numeric = np.ravel(np.asarray(numeric, dtype=np.float64))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)

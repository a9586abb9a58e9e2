"""
Earmark - CLAPScore

CLAPScore = max(cos(e_audio, e_text), 0)

The same clamp serves as the predicted similarity y_i that the regression
losses compare against listener targets, so there is exactly one
implementation of it (`relu`). Its subgradient at 0 is 0.
"""

from dataclasses import dataclass

import numpy as np

try:
    from embedding_core import as_matrix, cosine, row_cosines
    from errors import RejectedInputError
except ModuleNotFoundError:
    from src.embedding_core import as_matrix, cosine, row_cosines
    from src.errors import RejectedInputError


@dataclass(frozen=True)
class ClapScore:
    """Relevance score in [0, 1]."""

    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise RejectedInputError(f"CLAPScore must lie in [0, 1], got {self.value}")

    def __float__(self):
        return self.value


def relu(x):
    """Clamp negatives to zero (scalar or array)."""
    return np.maximum(x, 0.0)


def relu_grad(x):
    """1 where x > 0, else 0 (including exactly 0)."""
    return (np.asarray(x) > 0.0).astype(np.float64)


def clap_score(audio, text) -> ClapScore:
    """
    CLAPScore of one audio/text embedding pair.

    Raises:
        RejectedInputError: Dimension mismatch
        DegenerateInputError: Zero-norm embedding
    """
    # cos can overshoot 1 by an ulp
    return ClapScore(min(float(relu(cosine(audio, text))), 1.0))


def predicted_similarity(audio, text) -> float:
    """Predicted similarity y of one pair; numerically identical to clap_score."""
    return clap_score(audio, text).value


def predicted_similarities(text: np.ndarray, audio: np.ndarray):
    """
    Batch y_i over aligned rows.

    Returns:
        tuple: (y, cosines, text_norms, audio_norms)
    """
    cos, text_norms, audio_norms = row_cosines(text, audio)
    return relu(cos), cos, text_norms, audio_norms


def clap_scores(audio_matrix, text_matrix) -> np.ndarray:
    """CLAPScore for every aligned row of two N x D matrices, clipped to [0, 1]."""
    audio = as_matrix(audio_matrix, "audio")
    text = as_matrix(text_matrix, "text")
    y, _, _, _ = predicted_similarities(text, audio)
    return np.minimum(y, 1.0)

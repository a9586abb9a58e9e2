"""
Earmark - Embedding Core

Vector primitives every score and loss is built from:
- dot product, L2 norm, L2 normalization, cosine similarity
- row-wise batch forms used by the losses and the scorer

All arithmetic is float64. Zero-norm vectors are rejected with
DegenerateInputError instead of producing a silent 0 similarity.
"""

from dataclasses import dataclass

import numpy as np

try:
    from errors import DegenerateInputError, NonFiniteError, RejectedInputError
except ModuleNotFoundError:
    from src.errors import DegenerateInputError, NonFiniteError, RejectedInputError


@dataclass(frozen=True)
class Embedding:
    """A single embedding vector with an opaque identifier."""

    values: np.ndarray
    id: str = ""

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size < 1:
            raise RejectedInputError(f"embedding must be a non-empty 1-D vector, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise NonFiniteError(f"embedding {self.id!r} contains non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.size

    def __neg__(self):
        return Embedding(-self.values, self.id)

    def scaled(self, c: float) -> "Embedding":
        return Embedding(c * self.values, self.id)


def as_vector(a) -> np.ndarray:
    """Return the float64 vector behind an Embedding or array-like."""
    if isinstance(a, Embedding):
        return a.values
    return Embedding(a).values


def _check_same_dim(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise RejectedInputError(f"dimension mismatch: {a.size} vs {b.size}")


def dot(a, b) -> float:
    """Sum of elementwise products of two equal-length vectors."""
    va, vb = as_vector(a), as_vector(b)
    _check_same_dim(va, vb)
    return float(np.dot(va, vb))


def norm(a) -> float:
    return float(np.linalg.norm(as_vector(a)))


def l2_normalize(a) -> Embedding:
    """
    Scale a vector to unit length.

    Raises:
        DegenerateInputError: If the vector is all zeros
    """
    va = as_vector(a)
    n = np.linalg.norm(va)
    if n == 0.0:
        raise DegenerateInputError("cannot normalize a zero-norm vector")
    return Embedding(va / n, a.id if isinstance(a, Embedding) else "")


def cosine(a, b) -> float:
    """
    Cosine similarity dot(a, b) / (|a| |b|).

    Symmetric by construction: the product of norms is formed in a fixed
    order regardless of argument order.

    Raises:
        RejectedInputError: Dimension mismatch
        DegenerateInputError: Either vector has zero norm
    """
    va, vb = as_vector(a), as_vector(b)
    _check_same_dim(va, vb)
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity is undefined for a zero-norm vector")
    lo, hi = sorted((na, nb))
    return float(np.dot(va, vb) / (lo * hi))


# =============================================================================
# BATCH (ROW-WISE) FORMS
# =============================================================================

def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Validate a 2-D finite float64 matrix with at least one row and column."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise RejectedInputError(f"{name} must be a non-empty 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def row_norms(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    """
    L2 norm of every row.

    Raises:
        DegenerateInputError: If any row has zero norm (the row index is named)
    """
    norms = np.linalg.norm(m, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateInputError(f"{name} row {int(zero[0])} has zero norm")
    return norms


def normalize_rows(m: np.ndarray, name: str = "matrix"):
    """Return (unit-row matrix, row norms)."""
    norms = row_norms(m, name)
    return m / norms[:, None], norms


def row_cosines(text: np.ndarray, audio: np.ndarray):
    """
    Cosine similarity of aligned rows.

    Returns:
        tuple: (cosines, text_norms, audio_norms), each of length N
    """
    if text.shape != audio.shape:
        raise RejectedInputError(f"text and audio shapes differ: {text.shape} vs {audio.shape}")
    text_norms = row_norms(text, "text")
    audio_norms = row_norms(audio, "audio")
    dots = np.einsum("ij,ij->i", text, audio)
    return dots / (text_norms * audio_norms), text_norms, audio_norms

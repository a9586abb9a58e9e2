"""
Earmark - Toy Dual Encoder

Two independent projection stacks map precomputed feature vectors into a
shared embedding space:

    text features  (N x F_t) --text_head-->  N x D
    audio features (N x F_a) --audio_head--> N x D

Each head is a chain of affine maps with tanh between layers and a linear
final layer. The learnable temperature rides along as log_tau.

Parameters are addressed by dotted names ("text.layers.0.weight",
"audio.layers.1.bias", "log_tau") so the optimizer and the gradient checks
can treat the model as a flat dict of arrays.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

try:
    from config import INITIAL_LOG_TAU
    from errors import ModelStateError, NonFiniteError, RejectedInputError
    from losses import BatchEmbeddings, LossGrads, Temperature
    from optim import AdamWState
except ModuleNotFoundError:
    from src.config import INITIAL_LOG_TAU
    from src.errors import ModelStateError, NonFiniteError, RejectedInputError
    from src.losses import BatchEmbeddings, LossGrads, Temperature
    from src.optim import AdamWState

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "earmark-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ProjectionHead:
    """
    Affine layers W x + b with tanh between them.

    weights[l] has shape (out, in); biases[l] has shape (out,).
    """

    weights: list
    biases: list

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if not self.weights or len(self.weights) != len(self.biases):
            raise RejectedInputError("a projection head needs one bias per weight and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise RejectedInputError(f"layer {i}: weight {w.shape} and bias {b.shape} do not form an affine map")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise RejectedInputError(
                    f"layer {i} expects {w.shape[1]} inputs but layer {i - 1} produces {self.weights[i - 1].shape[0]}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NonFiniteError(f"layer {i} has non-finite parameters")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def named_parameters(self, prefix: str) -> dict:
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"{prefix}.layers.{i}.weight"] = w
            params[f"{prefix}.layers.{i}.bias"] = b
        return params

    def apply(self, x: np.ndarray):
        """
        Run the head on an N x F matrix.

        Returns:
            tuple: (output, layer_inputs) where layer_inputs[l] is what layer l saw
        """
        layer_inputs = []
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            layer_inputs.append(h)
            h = h @ w.T + b
            if i < self.n_layers - 1:
                h = np.tanh(h)
        return h, layer_inputs

    def backprop(self, layer_inputs: list, upstream: np.ndarray, prefix: str) -> dict:
        grads = {}
        g = upstream
        for i in reversed(range(self.n_layers)):
            h_in = layer_inputs[i]
            grads[f"{prefix}.layers.{i}.weight"] = g.T @ h_in
            grads[f"{prefix}.layers.{i}.bias"] = g.sum(axis=0)
            if i > 0:
                # h_in = tanh(z) of the previous layer
                g = (g @ self.weights[i]) * (1.0 - h_in**2)
        return grads

    def to_dict(self) -> dict:
        return {
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ProjectionHead":
        return cls(
            [np.array(w, dtype=np.float64).reshape(len(w), -1) for w in data["weights"]],
            [np.array(b, dtype=np.float64) for b in data["biases"]],
        )


@dataclass
class ModelParams:
    """Both heads, the temperature, and the cache of the last forward pass."""

    text_head: ProjectionHead
    audio_head: ProjectionHead
    temperature: Temperature = field(default_factory=Temperature)
    seed: Optional[int] = None
    _cache: Optional[dict] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.text_head.output_dim != self.audio_head.output_dim:
            raise RejectedInputError(
                f"heads must share an output dimension, got text {self.text_head.output_dim} "
                f"vs audio {self.audio_head.output_dim}"
            )

    @property
    def embed_dim(self) -> int:
        return self.text_head.output_dim

    @property
    def text_dim(self) -> int:
        return self.text_head.input_dim

    @property
    def audio_dim(self) -> int:
        return self.audio_head.input_dim


def _build_head(rng: np.random.Generator, sizes: list) -> ProjectionHead:
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    return ProjectionHead(weights, biases)


def init_model(
    feature_dim_text: int,
    feature_dim_audio: int,
    embed_dim: int,
    hidden=(),
    seed: int = 0,
) -> ModelParams:
    """
    Build a freshly initialized dual encoder.

    Weights ~ N(0, 1) / sqrt(fan_in), biases zero, log_tau = ln 0.07.
    The text head is drawn before the audio head from one seeded stream,
    so the same seed always yields bit-identical parameters.

    Raises:
        RejectedInputError: Any dimension < 1
    """
    hidden = list(hidden)
    dims = [feature_dim_text, feature_dim_audio, embed_dim, *hidden]
    if any(int(d) != d or d < 1 for d in dims):
        raise RejectedInputError(f"all layer sizes must be integers >= 1, got {dims}")

    rng = np.random.default_rng(seed)
    text_head = _build_head(rng, [feature_dim_text, *hidden, embed_dim])
    audio_head = _build_head(rng, [feature_dim_audio, *hidden, embed_dim])
    return ModelParams(text_head, audio_head, Temperature(INITIAL_LOG_TAU), seed)


def _check_features(m: ModelParams, text_features, audio_features):
    text = np.asarray(text_features, dtype=np.float64)
    audio = np.asarray(audio_features, dtype=np.float64)
    if text.ndim != 2 or audio.ndim != 2:
        raise RejectedInputError("features must be 2-D (N x F) matrices")
    if text.shape[0] != audio.shape[0] or text.shape[0] < 1:
        raise RejectedInputError(f"text and audio rows must match and be >= 1, got {text.shape[0]} vs {audio.shape[0]}")
    if text.shape[1] != m.text_dim:
        raise RejectedInputError(f"text features have {text.shape[1]} columns, the text head expects {m.text_dim}")
    if audio.shape[1] != m.audio_dim:
        raise RejectedInputError(f"audio features have {audio.shape[1]} columns, the audio head expects {m.audio_dim}")
    if not (np.all(np.isfinite(text)) and np.all(np.isfinite(audio))):
        raise NonFiniteError("features contain non-finite entries")
    return text, audio


def forward(m: ModelParams, text_features, audio_features) -> BatchEmbeddings:
    """
    Project both feature matrices and cache activations for backward.

    Returns:
        BatchEmbeddings: Targets unset
    """
    text, audio = _check_features(m, text_features, audio_features)
    text_out, text_inputs = m.text_head.apply(text)
    audio_out, audio_inputs = m.audio_head.apply(audio)
    m._cache = {"text": text_inputs, "audio": audio_inputs, "n": text.shape[0]}
    return BatchEmbeddings(text_out, audio_out)


def embed(m: ModelParams, text_features, audio_features) -> BatchEmbeddings:
    """Forward pass without touching the cache (evaluation path)."""
    text, audio = _check_features(m, text_features, audio_features)
    return BatchEmbeddings(m.text_head.apply(text)[0], m.audio_head.apply(audio)[0])


def backward(m: ModelParams, upstream: LossGrads) -> dict:
    """
    Chain-rule gradients for every parameter, given d(loss)/d(embeddings).

    The log_tau gradient is passed through from upstream unchanged.

    Returns:
        dict: Parameter name -> gradient, in named_parameters order

    Raises:
        ModelStateError: forward was not called first
        RejectedInputError: Upstream shapes do not match the cached batch
    """
    if m._cache is None:
        raise ModelStateError("backward called without a preceding forward pass")
    n = m._cache["n"]
    expected = (n, m.embed_dim)
    for name, g in (("text", upstream.text), ("audio", upstream.audio)):
        if np.shape(g) != expected:
            raise RejectedInputError(f"upstream {name} gradient has shape {np.shape(g)}, expected {expected}")

    grads = {}
    grads.update(m.text_head.backprop(m._cache["text"], np.asarray(upstream.text, dtype=np.float64), "text"))
    grads.update(m.audio_head.backprop(m._cache["audio"], np.asarray(upstream.audio, dtype=np.float64), "audio"))
    grads["log_tau"] = np.array(float(upstream.log_tau))
    return {name: grads[name] for name in named_parameters(m)}


# =============================================================================
# PARAMETER ACCESS
# =============================================================================

def named_parameters(m: ModelParams) -> dict:
    """Ordered name -> array view of every trainable parameter."""
    params = {}
    params.update(m.text_head.named_parameters("text"))
    params.update(m.audio_head.named_parameters("audio"))
    params["log_tau"] = np.array(m.temperature.log_tau)
    return params


def assign_parameters(m: ModelParams, params: dict) -> ModelParams:
    """
    Return a new ModelParams holding copies of the given arrays.

    Raises:
        RejectedInputError: Missing/extra names or a shape change
    """
    current = named_parameters(m)
    if set(params) != set(current):
        missing = sorted(set(current) - set(params))
        extra = sorted(set(params) - set(current))
        raise RejectedInputError(f"parameter names differ (missing {missing}, unexpected {extra})")
    for name, value in current.items():
        if np.shape(params[name]) != value.shape:
            raise RejectedInputError(f"{name}: shape {np.shape(params[name])} != {value.shape}")

    def head(prefix: str, n_layers: int) -> ProjectionHead:
        return ProjectionHead(
            [np.array(params[f"{prefix}.layers.{i}.weight"], dtype=np.float64) for i in range(n_layers)],
            [np.array(params[f"{prefix}.layers.{i}.bias"], dtype=np.float64) for i in range(n_layers)],
        )

    return ModelParams(
        head("text", m.text_head.n_layers),
        head("audio", m.audio_head.n_layers),
        Temperature(float(params["log_tau"])),
        m.seed,
    )


def copy_model(m: ModelParams) -> ModelParams:
    return assign_parameters(m, named_parameters(m))


def parameter_checksum(m: ModelParams) -> str:
    """SHA-256 over parameter names, shapes and float64 bytes."""
    digest = hashlib.sha256()
    for name, value in named_parameters(m).items():
        digest.update(name.encode("utf-8"))
        digest.update(str(value.shape).encode("utf-8"))
        digest.update(np.ascontiguousarray(value, dtype=np.float64).tobytes())
    return digest.hexdigest()


# =============================================================================
# CHECKPOINTS
# =============================================================================

@dataclass
class Checkpoint:
    model: ModelParams
    optimizer: Optional[AdamWState] = None
    config: dict = field(default_factory=dict)


def save_checkpoint(path, m: ModelParams, optimizer_state: Optional[AdamWState] = None, config: Optional[dict] = None):
    """
    Write the model (and optionally optimizer state and run config) as JSON.

    Floats are written with their shortest round-trip representation, so
    loading gives back bit-identical arrays.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": m.seed,
        "embed_dim": m.embed_dim,
        "text_head": m.text_head.to_dict(),
        "audio_head": m.audio_head.to_dict(),
        "log_tau": m.temperature.log_tau,
        "optimizer": optimizer_state.to_dict() if optimizer_state is not None else None,
        "config": config or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        text = json.dumps(payload, sort_keys=True, allow_nan=False, indent=1)
    except ValueError as e:
        raise NonFiniteError(f"refusing to write a checkpoint with non-finite values: {e}") from e
    path.write_text(text + "\n", encoding="utf-8")
    logger.debug("wrote checkpoint %s", path)


def load_checkpoint(path) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        FileNotFoundError: Path does not exist
        ModelStateError: The file is not an Earmark checkpoint or is inconsistent
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ModelStateError(f"{path} is not valid JSON: {e}") from e

    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ModelStateError(f"{path} does not describe a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ModelStateError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")

    try:
        model = ModelParams(
            ProjectionHead.from_dict(payload["text_head"]),
            ProjectionHead.from_dict(payload["audio_head"]),
            Temperature(payload["log_tau"]),
            payload.get("seed"),
        )
        optimizer = None
        if payload.get("optimizer") is not None:
            optimizer = AdamWState.from_dict(payload["optimizer"])
    except (KeyError, TypeError, ValueError) as e:
        raise ModelStateError(f"{path}: malformed checkpoint ({e})") from e

    return Checkpoint(model, optimizer, payload.get("config") or {})

"""
Earmark - AdamW

Adam with decoupled weight decay, over a flat dict of named numpy arrays:

    m <- b1 m + (1 - b1) g
    v <- b2 v + (1 - b2) g^2
    m_hat = m / (1 - b1^t),  v_hat = v / (1 - b2^t)
    p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)

Decay is skipped for biases and log_tau. adamw_step is functional: it
returns new parameter and state objects and never mutates its inputs.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

try:
    from config import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, DESK_SCALE_LEARNING_RATE, WEIGHT_DECAY
    from errors import NonFiniteError, RejectedInputError
except ModuleNotFoundError:
    from src.config import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, DESK_SCALE_LEARNING_RATE, WEIGHT_DECAY
    from src.errors import NonFiniteError, RejectedInputError

logger = logging.getLogger(__name__)


def default_decay_filter(name: str) -> bool:
    """True if weight decay applies to this parameter."""
    return not (name.endswith(".bias") or name == "log_tau")


@dataclass
class AdamWState:
    """Hyperparameters, step count and per-parameter moments."""

    lr: float = DESK_SCALE_LEARNING_RATE
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    weight_decay: float = WEIGHT_DECAY
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    decay: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.lr > 0:
            raise RejectedInputError(f"Invalid learning rate: {self.lr}")
        if not 0.0 <= self.beta1 < 1.0:
            raise RejectedInputError(f"Invalid beta1: {self.beta1}")
        if not 0.0 <= self.beta2 < 1.0:
            raise RejectedInputError(f"Invalid beta2: {self.beta2}")
        if not self.eps > 0:
            raise RejectedInputError(f"Invalid epsilon: {self.eps}")
        if not self.weight_decay >= 0:
            raise RejectedInputError(f"Invalid weight decay: {self.weight_decay}")
        if self.step_count < 0:
            raise RejectedInputError(f"Invalid step count: {self.step_count}")
        for name, m in self.first_moment.items():
            v = self.second_moment.get(name)
            if v is None or np.shape(v) != np.shape(m):
                raise RejectedInputError(f"moments for {name} are missing or misshapen")

    @classmethod
    def create(
        cls,
        params: dict,
        lr: float = DESK_SCALE_LEARNING_RATE,
        beta1: float = ADAM_BETA1,
        beta2: float = ADAM_BETA2,
        eps: float = ADAM_EPS,
        weight_decay: float = WEIGHT_DECAY,
        decay_filter: Callable[[str], bool] = default_decay_filter,
    ) -> "AdamWState":
        """Zeroed moments for every entry of params."""
        state = cls(
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            weight_decay=weight_decay,
            step_count=0,
            first_moment={name: np.zeros_like(np.asarray(p, dtype=np.float64)) for name, p in params.items()},
            second_moment={name: np.zeros_like(np.asarray(p, dtype=np.float64)) for name, p in params.items()},
            decay={name: bool(decay_filter(name)) for name in params},
        )
        logger.debug(
            "AdamW over %d tensors (%d decayed), lr=%g wd=%g",
            len(state.decay),
            sum(state.decay.values()),
            lr,
            weight_decay,
        )
        return state

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step_count": self.step_count,
            "first_moment": {k: np.asarray(v).tolist() for k, v in self.first_moment.items()},
            "second_moment": {k: np.asarray(v).tolist() for k, v in self.second_moment.items()},
            "decay": dict(self.decay),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AdamWState":
        return cls(
            lr=data["lr"],
            beta1=data["beta1"],
            beta2=data["beta2"],
            eps=data["eps"],
            weight_decay=data["weight_decay"],
            step_count=int(data["step_count"]),
            first_moment={k: np.array(v, dtype=np.float64) for k, v in data["first_moment"].items()},
            second_moment={k: np.array(v, dtype=np.float64) for k, v in data["second_moment"].items()},
            decay={k: bool(v) for k, v in data["decay"].items()},
        )


def adamw_step(params: dict, grads: dict, state: AdamWState):
    """
    Apply one AdamW update.

    Args:
        params: Name -> array
        grads: Name -> gradient array, same names and shapes as params
        state: Current optimizer state (moments for every name)

    Returns:
        tuple: (new params dict, new AdamWState)

    Raises:
        RejectedInputError: Names or shapes do not line up
        NonFiniteError: A gradient contains NaN/Inf (the parameter is named)
    """
    if set(grads) != set(params):
        raise RejectedInputError(
            f"gradient names do not match parameters: missing {sorted(set(params) - set(grads))}, "
            f"unexpected {sorted(set(grads) - set(params))}"
        )
    if set(state.first_moment) != set(params):
        raise RejectedInputError("optimizer state was created for a different parameter set")

    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p):
            raise RejectedInputError(f"{name}: gradient shape {g.shape} != parameter shape {np.shape(p)}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")

    t = state.step_count + 1
    bias_correction1 = 1.0 - state.beta1**t
    bias_correction2 = 1.0 - state.beta2**t

    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.beta1 * state.first_moment[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.second_moment[name] + (1.0 - state.beta2) * g**2
        m_hat = m / bias_correction1
        v_hat = v / bias_correction2
        update = m_hat / (np.sqrt(v_hat) + state.eps)
        if state.decay.get(name, default_decay_filter(name)):
            update = update + state.weight_decay * p
        new_params[name] = p - state.lr * update
        new_m[name] = m
        new_v[name] = v

    new_state = replace(state, step_count=t, first_moment=new_m, second_moment=new_v, decay=dict(state.decay))
    return new_params, new_state

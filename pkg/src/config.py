"""
Earmark - Configuration

Defaults for every tunable in the pipeline, plus RunConfig, the merged view
of command-line flags and an optional KEY=value config file.

Precedence (highest first):
1. Command-line flags
2. Config file (parsed with python-dotenv, never exported to os.environ)
3. The defaults below

Values marked "full scale" are the settings used for pretrained encoders;
the toy encoder overrides the ones it has to.
"""

import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from dotenv import dotenv_values

try:
    from errors import RejectedInputError
except ModuleNotFoundError:
    from src.errors import RejectedInputError


# =============================================================================
# TRAINING DEFAULTS
# =============================================================================

LEARNING_RATE = 1e-5          # full scale
DESK_SCALE_LEARNING_RATE = 1e-3  # toy encoder needs a larger step to move in 50 epochs
BATCH_SIZE = 8                # full scale
EPOCHS = 50                   # full scale
LAMBDA1 = 0.1                 # weight of wSCE
LAMBDA2 = 1.0                 # weight of the regression term
REGULARIZER = "mae"

# AdamW moments and decay (PyTorch defaults)
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.01

INITIAL_TEMPERATURE = 0.07
INITIAL_LOG_TAU = math.log(INITIAL_TEMPERATURE)

# =============================================================================
# DATA DEFAULTS
# =============================================================================

ANCHOR_THRESHOLD = 2.0        # listeners averaging > 2 on anchors are removed
SCORE_SCALE_MAX = 10          # 11-point scale, 0..10
N_TRAIN = 1925                # full-scale split of the screened training pairs
N_VAL = 458

SYNTH_ITEMS = 2000
SYNTH_NOISE_SIGMA = 1.0
SYNTH_TEXT_DIM = 16
SYNTH_AUDIO_DIM = 16
SYNTH_LATENT_DIM = 8
SYNTH_LISTENERS_PER_ITEM = 4  # "four listeners on average"

DESK_SPLIT = (1500, 250, 250)

# =============================================================================
# MODEL DEFAULTS
# =============================================================================

EMBED_DIM = 8
HIDDEN = (32,)
SEED = 1

SCHEMES = ("all", "natural_vs_synth", "per_system", "score_split_at_5")
REGULARIZERS = ("mse", "mae", "none")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def load_config_file(path) -> dict:
    """
    Read a KEY=value config file.

    Keys are case-insensitive and returned lower-cased. Empty values are
    dropped so they fall through to the defaults.

    Raises:
        RejectedInputError: If the file does not exist
    """
    path = Path(path)
    if not path.is_file():
        raise RejectedInputError(f"config file not found: {path}")
    raw = dotenv_values(path)
    return {key.lower(): value for key, value in raw.items() if value not in (None, "")}


def _parse_hidden(value) -> tuple:
    if isinstance(value, (tuple, list)):
        return tuple(int(v) for v in value)
    text = str(value).strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


@dataclass
class RunConfig:
    """
    Everything a CLI command needs, after merging flags, file and defaults.

    Only the fields relevant to a given command are used by it; the rest
    keep their defaults.
    """

    # training
    lr: float = DESK_SCALE_LEARNING_RATE
    batch_size: int = BATCH_SIZE
    epochs: int = EPOCHS
    lambda1: float = LAMBDA1
    lambda2: float = LAMBDA2
    reg: str = REGULARIZER
    seed: int = SEED
    shuffle: bool = True
    weight_decay: float = WEIGHT_DECAY
    embed_dim: int = EMBED_DIM
    hidden: tuple = HIDDEN
    normalize: bool = True

    # screening
    anchor_threshold: float = ANCHOR_THRESHOLD

    # evaluation
    scheme: str = "all"

    # paths
    dataset: Optional[Path] = None
    out: Optional[Path] = None

    log_level: str = "INFO"

    # per-field converters used when values arrive as strings from a file
    _CONVERTERS = {
        "lr": float,
        "batch_size": int,
        "epochs": int,
        "lambda1": float,
        "lambda2": float,
        "reg": lambda v: str(v).lower(),
        "seed": int,
        "shuffle": lambda v: v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes", "on"),
        "weight_decay": float,
        "embed_dim": int,
        "hidden": _parse_hidden,
        "normalize": lambda v: v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes", "on"),
        "anchor_threshold": float,
        "scheme": lambda v: str(v).lower(),
        "dataset": Path,
        "out": Path,
        "log_level": lambda v: str(v).upper(),
    }

    @classmethod
    def from_sources(cls, flags: dict, file_values: Optional[dict] = None) -> "RunConfig":
        """
        Merge flag values over file values over defaults.

        Args:
            flags: Values from the command line; None means "not given"
            file_values: Lower-cased KEY=value pairs from load_config_file

        Raises:
            RejectedInputError: Unknown config key or unparseable value
        """
        known = {f.name for f in fields(cls)}
        merged = {}
        for key, value in (file_values or {}).items():
            if key not in known:
                raise RejectedInputError(f"unknown config key: {key.upper()}")
            merged[key] = value
        for key, value in flags.items():
            if value is not None and key in known:
                merged[key] = value

        kwargs = {}
        for key, value in merged.items():
            try:
                kwargs[key] = cls._CONVERTERS[key](value)
            except (TypeError, ValueError) as e:
                raise RejectedInputError(f"invalid value for {key.upper()}: {value!r} ({e})") from e
        return cls(**kwargs)

    def validate(self) -> "RunConfig":
        """Check ranges and enums. Returns self for chaining."""
        if self.batch_size < 1:
            raise RejectedInputError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise RejectedInputError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise RejectedInputError(f"learning rate must be > 0, got {self.lr}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise RejectedInputError(f"lambdas must be >= 0, got [{self.lambda1}, {self.lambda2}]")
        if self.reg not in REGULARIZERS:
            raise RejectedInputError(f"reg must be one of {REGULARIZERS}, got {self.reg!r}")
        if self.scheme not in SCHEMES:
            raise RejectedInputError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.anchor_threshold < 0:
            raise RejectedInputError(f"anchor threshold must be >= 0, got {self.anchor_threshold}")
        if self.embed_dim < 1 or any(h < 1 for h in self.hidden):
            raise RejectedInputError(f"layer sizes must be >= 1, got embed_dim={self.embed_dim}, hidden={self.hidden}")
        if self.log_level not in LOG_LEVELS:
            raise RejectedInputError(f"log level must be one of {LOG_LEVELS}, got {self.log_level!r}")
        return self

"""
Earmark - Subjective Score Dataset

Everything between raw listener ratings and training-ready records:

1. screen_listeners       drop raters whose anchor mean is above the threshold
2. aggregate_and_rescale  mean of surviving raw scores, divided by 10
3. split_train_val(_test) seeded, disjoint, exact-size splits
4. generate_synthetic     desk-scale substitute for real listening tests
5. generate_listener_pool synthetic ratings sidecar so screening runs end to end

Record file (one record per line, UTF-8, tab-separated key=value fields):

    item_id=syn-00001<TAB>text_features=0.1,-0.3<TAB>audio_features=...<TAB>
    raw_scores=4,5,6<TAB>source=Tango<TAB>split=train[<TAB>relevance=0.48]

Ratings sidecar: CSV with header listener_id,item_id,raw_score,is_anchor.
"""

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from faker import Faker

try:
    from config import (
        ANCHOR_THRESHOLD,
        SCORE_SCALE_MAX,
        SYNTH_AUDIO_DIM,
        SYNTH_LATENT_DIM,
        SYNTH_LISTENERS_PER_ITEM,
        SYNTH_NOISE_SIGMA,
        SYNTH_TEXT_DIM,
    )
    from errors import DatasetFormatError, RejectedInputError
except ModuleNotFoundError:
    from src.config import (
        ANCHOR_THRESHOLD,
        SCORE_SCALE_MAX,
        SYNTH_AUDIO_DIM,
        SYNTH_LATENT_DIM,
        SYNTH_LISTENERS_PER_ITEM,
        SYNTH_NOISE_SIGMA,
        SYNTH_TEXT_DIM,
    )
    from src.errors import DatasetFormatError, RejectedInputError

logger = logging.getLogger(__name__)

DEFAULT_ANCHOR_THRESHOLD = ANCHOR_THRESHOLD
ANCHORS_PER_TEST = 3

REQUIRED_FIELDS = ("item_id", "text_features", "audio_features", "raw_scores", "source", "split")
OPTIONAL_FIELDS = ("relevance",)
RATINGS_HEADER = ("listener_id", "item_id", "raw_score", "is_anchor")


class Source(str, Enum):
    NATURAL = "natural"
    AUDIOLDM = "AudioLDM"
    AUDIOLDM2 = "AudioLDM2"
    TANGO = "Tango"
    TANGO2 = "Tango2"
    SYNTHETIC_OTHER = "synthetic_other"


# order used by the synthetic generator and the per-system report
TTA_SYSTEMS = (Source.AUDIOLDM, Source.AUDIOLDM2, Source.TANGO, Source.TANGO2)
SYNTH_SOURCE_CYCLE = (Source.NATURAL, *TTA_SYSTEMS)


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


def _parse_enum(enum_cls, value: str):
    for member in enum_cls:
        if member.value == value or member.name == value.upper():
            return member
    raise ValueError(f"unknown {enum_cls.__name__.lower()} {value!r}")


# =============================================================================
# DOMAIN TYPES
# =============================================================================

def _check_raw_score(score) -> int:
    if isinstance(score, bool) or int(score) != score or not 0 <= score <= SCORE_SCALE_MAX:
        raise RejectedInputError(f"raw score must be an integer in 0..{SCORE_SCALE_MAX}, got {score!r}")
    return int(score)


@dataclass(frozen=True)
class ListenerRating:
    listener_id: str
    item_id: str
    raw_score: int
    is_anchor: bool = False

    def __post_init__(self):
        object.__setattr__(self, "raw_score", _check_raw_score(self.raw_score))
        if not self.listener_id or not self.item_id:
            raise RejectedInputError("listener_id and item_id must be non-empty")


@dataclass(frozen=True)
class ScreeningPolicy:
    anchor_threshold: float = DEFAULT_ANCHOR_THRESHOLD

    def __post_init__(self):
        if not self.anchor_threshold >= 0:
            raise RejectedInputError(f"anchor threshold must be >= 0, got {self.anchor_threshold}")


@dataclass(frozen=True, eq=False)
class SubjectiveRecord:
    """
    One rated audio-text pair.

    raw_scores may be empty only for catalog entries that have not been
    rated yet; mean_raw and target require at least one score.
    """

    item_id: str
    text_features: np.ndarray
    audio_features: np.ndarray
    raw_scores: tuple = ()
    source: Source = Source.NATURAL
    split: Split = Split.TRAIN
    relevance: Optional[float] = None

    def __post_init__(self):
        if not self.item_id or any(c in self.item_id for c in "\t\n="):
            raise RejectedInputError(f"invalid item_id {self.item_id!r}")
        for name in ("text_features", "audio_features"):
            values = np.array(getattr(self, name), dtype=np.float64)
            if values.ndim != 1 or values.size < 1:
                raise RejectedInputError(f"{self.item_id}: {name} must be a non-empty vector")
            if not np.all(np.isfinite(values)):
                raise RejectedInputError(f"{self.item_id}: {name} contains non-finite entries")
            values.setflags(write=False)
            object.__setattr__(self, name, values)
        object.__setattr__(self, "raw_scores", tuple(_check_raw_score(s) for s in self.raw_scores))
        object.__setattr__(self, "source", Source(self.source))
        object.__setattr__(self, "split", Split(self.split))
        if self.relevance is not None:
            object.__setattr__(self, "relevance", float(self.relevance))

    @property
    def mean_raw(self) -> float:
        if not self.raw_scores:
            raise RejectedInputError(f"{self.item_id} has no surviving listener scores")
        return sum(self.raw_scores) / len(self.raw_scores)

    @property
    def target(self) -> float:
        """Rescaled score a in [0, 1]."""
        return self.mean_raw / SCORE_SCALE_MAX

    def with_split(self, split: Split) -> "SubjectiveRecord":
        return replace(self, split=Split(split))

    def with_scores(self, raw_scores) -> "SubjectiveRecord":
        return replace(self, raw_scores=tuple(raw_scores))

    def __eq__(self, other):
        if not isinstance(other, SubjectiveRecord):
            return NotImplemented
        return (
            self.item_id == other.item_id
            and np.array_equal(self.text_features, other.text_features)
            and np.array_equal(self.audio_features, other.audio_features)
            and self.raw_scores == other.raw_scores
            and self.source == other.source
            and self.split == other.split
            and self.relevance == other.relevance
        )

    __hash__ = None


@dataclass
class ScreeningResult:
    kept: list = field(default_factory=list)
    removed: list = field(default_factory=list)
    unscreenable: list = field(default_factory=list)


@dataclass
class AggregationResult:
    records: list = field(default_factory=list)
    dropped_item_ids: list = field(default_factory=list)


# =============================================================================
# SCREENING AND AGGREGATION
# =============================================================================

def screen_listeners(ratings: Iterable[ListenerRating], policy: ScreeningPolicy = ScreeningPolicy()) -> ScreeningResult:
    """
    Partition listeners by their mean anchor score.

    A listener is removed iff their anchor mean is strictly greater than
    policy.anchor_threshold. Listeners with no anchor ratings cannot be
    screened; they land in `unscreenable` (and in neither other list) and
    a warning is logged.

    Returns:
        ScreeningResult: Sorted listener id lists
    """
    anchors = defaultdict(list)
    seen = set()
    for rating in ratings:
        seen.add(rating.listener_id)
        if rating.is_anchor:
            anchors[rating.listener_id].append(rating.raw_score)

    result = ScreeningResult()
    for listener_id in sorted(seen):
        scores = anchors.get(listener_id)
        if not scores:
            result.unscreenable.append(listener_id)
            continue
        if sum(scores) / len(scores) > policy.anchor_threshold:
            result.removed.append(listener_id)
        else:
            result.kept.append(listener_id)

    if result.unscreenable:
        logger.warning(
            "%d listener(s) rated no anchor samples and were excluded: %s",
            len(result.unscreenable),
            ", ".join(result.unscreenable),
        )
    logger.info("screening kept %d, removed %d listener(s)", len(result.kept), len(result.removed))
    return result


def aggregate_and_rescale(ratings: Iterable[ListenerRating], kept_listeners, catalog) -> AggregationResult:
    """
    Attach surviving listener scores to catalog items.

    Anchor ratings never count toward an item. Each item keeps its surviving
    raw scores in rating order; its target is their mean divided by 10.
    Catalog items left without any surviving score are dropped and reported.

    Args:
        ratings: All ratings from the sidecar
        kept_listeners: Listener ids that passed screening
        catalog: SubjectiveRecord list supplying features, source and split

    Raises:
        RejectedInputError: A rating refers to an item not in the catalog,
            or the catalog repeats an item_id
    """
    kept = set(kept_listeners)
    by_id = {}
    for record in catalog:
        if record.item_id in by_id:
            raise RejectedInputError(f"catalog lists item {record.item_id!r} twice")
        by_id[record.item_id] = record

    surviving = defaultdict(list)
    for rating in ratings:
        if rating.is_anchor:
            continue
        if rating.item_id not in by_id:
            raise RejectedInputError(f"rating for unknown item {rating.item_id!r} (listener {rating.listener_id})")
        if rating.listener_id in kept:
            surviving[rating.item_id].append(rating.raw_score)

    result = AggregationResult()
    for item_id, record in by_id.items():
        scores = surviving.get(item_id)
        if scores:
            result.records.append(record.with_scores(scores))
        else:
            result.dropped_item_ids.append(item_id)

    if result.dropped_item_ids:
        logger.info("dropped %d item(s) with no surviving ratings", len(result.dropped_item_ids))
    return result


# =============================================================================
# SPLITS
# =============================================================================

def _check_sizes(records, sizes):
    if any(int(s) != s or s < 0 for s in sizes):
        raise RejectedInputError(f"split sizes must be non-negative integers, got {sizes}")
    if sum(sizes) > len(records):
        raise RejectedInputError(f"need {sum(sizes)} records for a {'/'.join(map(str, sizes))} split, have {len(records)}")


def _seeded_split(records, sizes, splits, seed):
    records = list(records)
    _check_sizes(records, sizes)
    order = np.random.default_rng(seed).permutation(len(records))
    parts = []
    start = 0
    for size, split in zip(sizes, splits):
        parts.append([records[i].with_split(split) for i in order[start:start + size]])
        start += size
    return parts


def split_train_val(records, n_train: int, n_val: int, seed: int):
    """
    Seeded shuffle, then the first n_train records become TRAIN and the next
    n_val become VAL. Records beyond n_train + n_val are left out.

    Returns:
        tuple: (train, val)
    """
    train, val = _seeded_split(records, (n_train, n_val), (Split.TRAIN, Split.VAL), seed)
    return train, val


def split_train_val_test(records, n_train: int, n_val: int, n_test: int, seed: int):
    """Three-way version of split_train_val."""
    train, val, test = _seeded_split(
        records, (n_train, n_val, n_test), (Split.TRAIN, Split.VAL, Split.TEST), seed
    )
    return train, val, test


def filter_split(records, split) -> list:
    split = Split(split)
    return [r for r in records if r.split is split]


# =============================================================================
# SYNTHETIC DATA
# =============================================================================

def generate_synthetic(
    n: int,
    text_dim: int = SYNTH_TEXT_DIM,
    audio_dim: int = SYNTH_AUDIO_DIM,
    noise_sigma: float = SYNTH_NOISE_SIGMA,
    seed: int = 0,
    latent_dim: int = SYNTH_LATENT_DIM,
    listeners_per_item: int = SYNTH_LISTENERS_PER_ITEM,
) -> list:
    """
    Build n records whose features encode a hidden relevance r_i.

    Each item draws r_i ~ U[0, 1] and a unit latent direction s_i. The text
    latent is s_i; the audio latent is r_i s_i + sqrt(1 - r_i^2) o_i with o_i
    a unit vector orthogonal to s_i, so the latents have cosine exactly r_i.
    Fixed random mixing maps (drawn once per seed) take the latents to the
    text and audio feature spaces.

    Listener scores are clip(rint(10 r_i + sigma * noise), 0, 10). Sources
    cycle natural, AudioLDM, AudioLDM2, Tango, Tango2. r_i is stored as
    `relevance`.

    Raises:
        RejectedInputError: n < 1, sigma < 0, latent_dim < 2 or bad dims
    """
    if n < 1:
        raise RejectedInputError(f"n must be >= 1, got {n}")
    if not noise_sigma >= 0:
        raise RejectedInputError(f"noise sigma must be >= 0, got {noise_sigma}")
    if latent_dim < 2:
        raise RejectedInputError(f"latent_dim must be >= 2, got {latent_dim}")
    if text_dim < 1 or audio_dim < 1 or listeners_per_item < 1:
        raise RejectedInputError(
            f"dims and listener count must be >= 1, got text={text_dim}, audio={audio_dim}, listeners={listeners_per_item}"
        )

    rng = np.random.default_rng(seed)
    mix_text = rng.standard_normal((latent_dim, text_dim)) / np.sqrt(latent_dim)
    mix_audio = rng.standard_normal((latent_dim, audio_dim)) / np.sqrt(latent_dim)

    relevance = rng.uniform(0.0, 1.0, size=n)
    s = rng.standard_normal((n, latent_dim))
    s /= np.linalg.norm(s, axis=1, keepdims=True)
    o = rng.standard_normal((n, latent_dim))
    o -= np.sum(o * s, axis=1, keepdims=True) * s
    o /= np.linalg.norm(o, axis=1, keepdims=True)
    audio_latent = relevance[:, None] * s + np.sqrt(1.0 - relevance**2)[:, None] * o

    text_features = s @ mix_text
    audio_features = audio_latent @ mix_audio

    noise = rng.standard_normal((n, listeners_per_item))
    scores = np.clip(np.rint(SCORE_SCALE_MAX * relevance[:, None] + noise_sigma * noise), 0, SCORE_SCALE_MAX)
    scores = scores.astype(int)

    records = []
    for i in range(n):
        records.append(
            SubjectiveRecord(
                item_id=f"syn-{i + 1:05d}",
                text_features=text_features[i],
                audio_features=audio_features[i],
                raw_scores=tuple(int(v) for v in scores[i]),
                source=SYNTH_SOURCE_CYCLE[i % len(SYNTH_SOURCE_CYCLE)],
                split=Split.TRAIN,
                relevance=float(relevance[i]),
            )
        )
    logger.info("generated %d synthetic records (sigma=%g, seed=%d)", n, noise_sigma, seed)
    return records


def generate_listener_pool(
    records,
    n_listeners: int = 40,
    n_inattentive: int = 8,
    seed: int = 0,
    inattentive_per_item: int = 1,
) -> list:
    """
    Invent the listening-test ratings behind a set of scored records.

    Every listener rates ANCHORS_PER_TEST mismatched anchor pairs. Attentive
    listeners score anchors 0..2 (mean <= 2, kept by screening); inattentive
    listeners score them 3..10 (mean > 2, removed). Each record's raw scores
    are assigned to distinct attentive listeners, and inattentive_per_item
    extra random scores from inattentive listeners are mixed in, so
    screening followed by aggregation recovers the original scores.

    Listener ids are drawn from a seeded Faker instance.

    Returns:
        list: ListenerRating entries, anchors first per listener, then items
    """
    records = list(records)
    n_attentive = n_listeners - n_inattentive
    if n_inattentive < 0 or n_attentive < 1:
        raise RejectedInputError(f"need at least one attentive listener, got {n_listeners} total / {n_inattentive} inattentive")
    widest = max((len(r.raw_scores) for r in records), default=0)
    if widest > n_attentive:
        raise RejectedInputError(f"an item has {widest} scores but only {n_attentive} attentive listeners exist")
    if inattentive_per_item < 0 or (inattentive_per_item > 0 and inattentive_per_item > n_inattentive):
        raise RejectedInputError(f"cannot draw {inattentive_per_item} inattentive raters per item from {n_inattentive}")

    fake = Faker()
    fake.seed_instance(seed)
    listener_ids = [f"{fake.user_name()}-{i + 1:03d}" for i in range(n_listeners)]

    rng = np.random.default_rng(seed)
    inattentive_idx = set(rng.permutation(n_listeners)[:n_inattentive].tolist())
    attentive = [lid for i, lid in enumerate(listener_ids) if i not in inattentive_idx]
    inattentive = [lid for i, lid in enumerate(listener_ids) if i in inattentive_idx]

    ratings = []
    for i, listener_id in enumerate(listener_ids):
        low, high = (3, SCORE_SCALE_MAX + 1) if i in inattentive_idx else (0, 3)
        for k in range(ANCHORS_PER_TEST):
            ratings.append(ListenerRating(listener_id, f"anchor-{k + 1:02d}", int(rng.integers(low, high)), True))

    for record in records:
        raters = rng.choice(len(attentive), size=len(record.raw_scores), replace=False)
        for rater, score in zip(raters, record.raw_scores):
            ratings.append(ListenerRating(attentive[int(rater)], record.item_id, score, False))
        if inattentive_per_item:
            extra = rng.choice(len(inattentive), size=inattentive_per_item, replace=False)
            for rater in extra:
                score = int(rng.integers(0, SCORE_SCALE_MAX + 1))
                ratings.append(ListenerRating(inattentive[int(rater)], record.item_id, score, False))
    return ratings


# =============================================================================
# FILE I/O
# =============================================================================

def _format_reals(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def format_record(record: SubjectiveRecord) -> str:
    fields_out = [
        f"item_id={record.item_id}",
        f"text_features={_format_reals(record.text_features)}",
        f"audio_features={_format_reals(record.audio_features)}",
        f"raw_scores={','.join(str(s) for s in record.raw_scores)}",
        f"source={record.source.value}",
        f"split={record.split.value}",
    ]
    if record.relevance is not None:
        fields_out.append(f"relevance={record.relevance!r}")
    return "\t".join(fields_out)


def _parse_reals(text: str, path, line_number, name) -> np.ndarray:
    try:
        values = np.array([float(part) for part in text.split(",")], dtype=np.float64)
    except ValueError as e:
        raise DatasetFormatError(f"not a list of reals ({e})", path, line_number, name) from None
    if not np.all(np.isfinite(values)):
        raise DatasetFormatError("non-finite value", path, line_number, name)
    return values


def parse_record(line: str, path=None, line_number=None, allow_unscored: bool = False) -> SubjectiveRecord:
    """
    Parse one record line.

    Raises:
        DatasetFormatError: Naming the line and the offending field
    """
    values = {}
    for part in line.rstrip("\r\n").split("\t"):
        key, sep, value = part.partition("=")
        if not sep:
            raise DatasetFormatError(f"expected key=value, got {part!r}", path, line_number)
        if key not in REQUIRED_FIELDS and key not in OPTIONAL_FIELDS:
            raise DatasetFormatError("unknown field", path, line_number, key)
        if key in values:
            raise DatasetFormatError("field repeated", path, line_number, key)
        values[key] = value

    for key in REQUIRED_FIELDS:
        if key not in values:
            raise DatasetFormatError("missing required field", path, line_number, key)

    text = _parse_reals(values["text_features"], path, line_number, "text_features")
    audio = _parse_reals(values["audio_features"], path, line_number, "audio_features")

    raw = values["raw_scores"]
    if raw == "":
        if not allow_unscored:
            raise DatasetFormatError("no listener scores", path, line_number, "raw_scores")
        scores = ()
    else:
        try:
            scores = tuple(_check_raw_score(int(part)) for part in raw.split(","))
        except (ValueError, RejectedInputError) as e:
            raise DatasetFormatError(f"bad score ({e})", path, line_number, "raw_scores") from None

    try:
        source = _parse_enum(Source, values["source"])
    except ValueError as e:
        raise DatasetFormatError(str(e), path, line_number, "source") from None
    try:
        split = _parse_enum(Split, values["split"])
    except ValueError as e:
        raise DatasetFormatError(str(e), path, line_number, "split") from None

    relevance = None
    if "relevance" in values:
        try:
            relevance = float(values["relevance"])
        except ValueError:
            raise DatasetFormatError("not a real number", path, line_number, "relevance") from None

    try:
        return SubjectiveRecord(values["item_id"], text, audio, scores, source, split, relevance)
    except RejectedInputError as e:
        raise DatasetFormatError(str(e), path, line_number, "item_id") from None


def _decoded_lines(path: Path):
    """Yield the lines of a file as text; a line that is not UTF-8 is named."""
    with path.open("rb") as handle:
        for line_number, raw in enumerate(handle, start=1):
            try:
                yield raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise DatasetFormatError(f"not valid UTF-8 (byte {e.start})", path, line_number) from None


def load_dataset(path, allow_unscored: bool = False) -> list:
    """
    Read a record file. Blank lines are skipped; an empty file gives [].

    Args:
        path: Record file
        allow_unscored: Accept empty raw_scores (item catalogs for screening)

    Raises:
        FileNotFoundError: Missing file
        DatasetFormatError: Malformed line, duplicate item_id, or feature
            dimensions that differ from the first record
    """
    path = Path(path)
    records = []
    seen = set()
    dims = None
    for line_number, line in enumerate(_decoded_lines(path), start=1):
        if not line.strip():
            continue
        record = parse_record(line, path, line_number, allow_unscored)
        if record.item_id in seen:
            raise DatasetFormatError(f"duplicate item_id {record.item_id!r}", path, line_number, "item_id")
        seen.add(record.item_id)
        record_dims = (record.text_features.size, record.audio_features.size)
        if dims is None:
            dims = record_dims
        elif record_dims != dims:
            field_name = "text_features" if record_dims[0] != dims[0] else "audio_features"
            raise DatasetFormatError(
                f"dimension {record_dims} differs from earlier records {dims}", path, line_number, field_name
            )
        records.append(record)
    logger.debug("loaded %d records from %s", len(records), path)
    return records


def save_dataset(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as handle:
        for record in records:
            handle.write(format_record(record) + "\n")


def load_ratings(path) -> list:
    """
    Read the listener-ratings CSV sidecar.

    Raises:
        DatasetFormatError: Bad header or a malformed row (line number named)
    """
    path = Path(path)
    ratings = []
    reader = csv.reader(_decoded_lines(path))
    header = next(reader, None)
    if header is None:
        return ratings
    if tuple(h.strip() for h in header) != RATINGS_HEADER:
        raise DatasetFormatError(f"expected header {','.join(RATINGS_HEADER)}", path, 1)
    for row in reader:
        line_number = reader.line_num
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(RATINGS_HEADER):
            raise DatasetFormatError(f"expected {len(RATINGS_HEADER)} columns, got {len(row)}", path, line_number)
        listener_id, item_id, raw_score, is_anchor = (cell.strip() for cell in row)
        try:
            score = int(raw_score)
        except ValueError:
            raise DatasetFormatError("not an integer", path, line_number, "raw_score") from None
        flag = is_anchor.lower()
        if flag not in ("0", "1", "true", "false"):
            raise DatasetFormatError("expected 0/1 or true/false", path, line_number, "is_anchor")
        try:
            ratings.append(ListenerRating(listener_id, item_id, score, flag in ("1", "true")))
        except RejectedInputError as e:
            raise DatasetFormatError(str(e), path, line_number, "raw_score") from None
    return ratings


def save_ratings(ratings, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(RATINGS_HEADER)
        for rating in ratings:
            writer.writerow([rating.listener_id, rating.item_id, rating.raw_score, int(rating.is_anchor)])

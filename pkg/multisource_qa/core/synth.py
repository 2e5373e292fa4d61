"""
Synthetic multi-source QA data with known answer provenance.

Every sample asks for the value of one attribute. The value is written into
the context as an ``attribute value`` token pair, painted into the image as a
patch code, or both; the sample's source label records which. Generation is a
pure function of ``(seed, sample id)``.
"""
import base64
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import numpy as np

from multisource_qa.core.encoders import ImageGrid, pad_ids

logger = logging.getLogger("multisource_qa.core.synth")

FORMAT_VERSION = "moemoe-ds/1"
SOURCES = ("context", "image", "both")
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>")
SPLITS = ("train", "val", "test")


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed; ``index`` names the failing record."""

    def __init__(self, index, message):
        self.index = index
        super().__init__(f"record {index}: {message}")


@dataclass
class SynthConfig:
    n_attributes: int = 8
    n_values: int = 8
    n_distractor_words: int = 24
    n_distractor_pairs: int = 3
    max_distractor_words: int = 10
    k: int = 32
    image_channels: int = 3
    image_size: int = 16
    patch_size: int = 4
    image_noise: float = 0.02
    source_mix: Tuple[float, float, float] = (0.4, 0.4, 0.2)
    attribute_affinity: float = 0.9
    n_train: int = 5000
    n_val: int = 1000
    n_test: int = 1000
    seed: int = 0

    def validate(self, vocab_limit=None):
        for name in ("n_attributes", "n_values", "k", "image_channels", "image_size", "patch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"SynthConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ValueError(f"patch size {self.patch_size} does not divide image size {self.image_size}")
        mix = np.asarray(self.source_mix, dtype=np.float64)
        if mix.shape != (3,) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
            raise ValueError(f"source_mix must be three non-negative proportions summing to 1, got {self.source_mix}")
        if not 0.0 <= self.attribute_affinity <= 1.0:
            raise ValueError(f"attribute_affinity must lie in [0, 1], got {self.attribute_affinity}")
        if self.n_distractor_pairs > self.n_attributes - 1:
            raise ValueError(f"{self.n_distractor_pairs} distractor pairs need more than {self.n_attributes} attributes")
        longest = 1 + 2 * (self.n_distractor_pairs + 1) + self.max_distractor_words
        if longest > self.k:
            raise ValueError(f"contexts of up to {longest} tokens do not fit in k={self.k}")
        if self.code_levels ** self.image_channels < self.n_values:
            raise ValueError("image code cannot represent every value")
        size = Vocabulary(self).size
        if vocab_limit is not None and size > vocab_limit:
            raise ValueError(f"vocabulary of {size} tokens overflows the model vocabulary of {vocab_limit}")
        return self

    @property
    def code_levels(self):
        """Intensity levels per channel: the smallest L with L**channels >= n_values."""
        levels = 2
        while levels ** self.image_channels < self.n_values:
            levels += 1
        return levels

    def to_dict(self):
        data = asdict(self)
        data["source_mix"] = list(self.source_mix)
        return data

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown SynthConfig field(s): {', '.join(unknown)}")
        data = dict(data)
        if "source_mix" in data:
            data["source_mix"] = tuple(data["source_mix"])
        return cls(**data)


class Vocabulary:
    """PAD/BOS/EOS, one token per attribute, one per (attribute, value), then distractor words."""

    def __init__(self, cfg):
        self.n_attributes = cfg.n_attributes
        self.n_values = cfg.n_values
        tokens = list(SPECIAL_TOKENS)
        tokens += [f"attr{a}" for a in range(cfg.n_attributes)]
        tokens += [f"attr{a}:val{v}" for a in range(cfg.n_attributes) for v in range(cfg.n_values)]
        tokens += [f"word{j}" for j in range(cfg.n_distractor_words)]
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        self.first_value = len(SPECIAL_TOKENS) + cfg.n_attributes
        self.first_word = self.first_value + cfg.n_attributes * cfg.n_values

    @property
    def size(self):
        return len(self.tokens)

    def attribute_token(self, a):
        return len(SPECIAL_TOKENS) + a

    def value_token(self, a, v):
        return self.first_value + a * self.n_values + v

    def word_token(self, j):
        return self.first_word + j

    def value_of(self, token_id):
        """``(attribute, value)`` for a value token, else None."""
        offset = int(token_id) - self.first_value
        if 0 <= offset < self.n_attributes * self.n_values:
            return divmod(offset, self.n_values)
        return None


def tokenize(tokens, vocab, length=None):
    """Map token strings to ids; pads or truncates to ``length`` when given."""
    ids = []
    for t in tokens:
        if t not in vocab.index:
            raise ValueError(f"unknown token {t!r}")
        ids.append(vocab.index[t])
    return pad_ids(ids, length) if length is not None else ids


def detokenize(ids, vocab):
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < vocab.size:
            raise ValueError(f"token id {i} is outside the vocabulary of size {vocab.size}")
        out.append(vocab.tokens[i])
    return out


@dataclass(eq=False)
class Sample:
    id: int
    question_ids: List[int]
    context_ids: List[int]
    image: ImageGrid
    answer_ids: List[int]
    source_label: str
    attribute_id: int

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.id == other.id
            and list(self.question_ids) == list(other.question_ids)
            and list(self.context_ids) == list(other.context_ids)
            and list(self.answer_ids) == list(other.answer_ids)
            and self.source_label == other.source_label
            and self.attribute_id == other.attribute_id
            and self.image.patch_size == other.image.patch_size
            and np.array_equal(self.image.pixels, other.image.pixels)
        )


@dataclass
class Dataset:
    config: SynthConfig
    samples: List[Sample] = field(default_factory=list)
    split: str = "all"

    def __len__(self):
        return len(self.samples)

    def source_counts(self):
        counts = dict.fromkeys(SOURCES, 0)
        for s in self.samples:
            counts[s.source_label] += 1
        return counts


def home_sources(cfg):
    """Assign each attribute a home source by largest-remainder apportionment of the mix."""
    quotas = np.asarray(cfg.source_mix, dtype=np.float64) * cfg.n_attributes
    seats = np.floor(quotas).astype(int)
    remainders = quotas - seats
    for idx in sorted(range(len(SOURCES)), key=lambda i: (-remainders[i], i))[:cfg.n_attributes - seats.sum()]:
        seats[idx] += 1
    homes = []
    for source, count in zip(SOURCES, seats):
        homes += [source] * int(count)
    return homes


def _value_code(cfg, v):
    """Per-channel digits of ``v`` in base ``code_levels``."""
    levels = cfg.code_levels
    return [(v // levels ** c) % levels for c in range(cfg.image_channels)]


def render_image(cfg, code_value, rng):
    """Top row of patches carries the value code; everything below is uniform clutter."""
    c, size, p = cfg.image_channels, cfg.image_size, cfg.patch_size
    pixels = rng.uniform(0.0, 1.0, size=(c, size, size))
    levels = cfg.code_levels
    for channel, digit in enumerate(_value_code(cfg, code_value)):
        level = (digit + 0.5) / levels
        pixels[channel, :p, :] = level + rng.normal(0.0, cfg.image_noise, size=(p, size))
    return ImageGrid(np.clip(pixels, 0.0, 1.0), p)


def decode_from_image(sample, cfg):
    """Read the value code back out of the image's top patch row."""
    levels = cfg.code_levels
    p = cfg.patch_size
    value = 0
    for channel in range(cfg.image_channels):
        mean = sample.image.pixels[channel, :p, :].mean()
        digit = int(np.clip(np.floor(mean * levels), 0, levels - 1))
        value += digit * levels ** channel
    return value


def decode_from_context(sample, vocab):
    """The value written next to the queried attribute in the context, else None."""
    for token in sample.context_ids:
        parsed = vocab.value_of(token)
        if parsed is not None and parsed[0] == sample.attribute_id:
            return parsed[1]
    return None


def generate_sample(cfg, sample_id, vocab=None, homes=None):
    vocab = vocab or Vocabulary(cfg)
    homes = homes or home_sources(cfg)
    rng = np.random.default_rng([cfg.seed, sample_id])

    attribute = int(rng.integers(cfg.n_attributes))
    if rng.uniform() < cfg.attribute_affinity:
        source = homes[attribute]
    else:
        source = SOURCES[int(rng.choice(len(SOURCES), p=np.asarray(cfg.source_mix, dtype=np.float64)))]
    value = int(rng.integers(cfg.n_values))

    others = [a for a in range(cfg.n_attributes) if a != attribute]
    units = []
    if source in ("context", "both"):
        units.append([vocab.attribute_token(attribute), vocab.value_token(attribute, value)])
    for a in rng.choice(others, size=cfg.n_distractor_pairs, replace=False):
        units.append([vocab.attribute_token(int(a)), vocab.value_token(int(a), int(rng.integers(cfg.n_values)))])
    n_words = int(rng.integers(0, cfg.max_distractor_words + 1)) if cfg.n_distractor_words else 0
    for j in rng.integers(0, max(cfg.n_distractor_words, 1), size=n_words):
        units.append([vocab.word_token(int(j))])
    order = rng.permutation(len(units))
    context = [vocab.attribute_token(attribute)] + [t for i in order for t in units[i]]

    code = value if source in ("image", "both") else int(rng.integers(cfg.n_values))
    image = render_image(cfg, code, rng)

    return Sample(
        id=int(sample_id),
        question_ids=[vocab.attribute_token(attribute)],
        context_ids=context,
        image=image,
        answer_ids=[vocab.value_token(attribute, value)],
        source_label=source,
        attribute_id=attribute,
    )


def split_ranges(cfg):
    """Disjoint id ranges for train / val / test."""
    bounds = np.cumsum([0, cfg.n_train, cfg.n_val, cfg.n_test])
    return {name: range(int(bounds[i]), int(bounds[i + 1])) for i, name in enumerate(SPLITS)}


def generate_samples(cfg, ids, workers=1):
    """Generate the samples for ``ids``; sharded generation equals serial generation."""
    vocab, homes = Vocabulary(cfg), home_sources(cfg)
    ids = list(ids)
    if workers <= 1 or len(ids) < 2 * workers:
        return [generate_sample(cfg, i, vocab, homes) for i in ids]
    shards = [ids[w::workers] for w in range(workers)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda shard: [generate_sample(cfg, i, vocab, homes) for i in shard], shards))
    by_id = {s.id: s for part in parts for s in part}
    return [by_id[i] for i in ids]


def generate_dataset(cfg, split=None, workers=1, vocab_limit=None):
    """Every split (``split=None``) or one named split of the synthetic task."""
    cfg.validate(vocab_limit)
    ranges = split_ranges(cfg)
    if split is None:
        ids = range(0, ranges["test"].stop)
    elif split in ranges:
        ids = ranges[split]
    else:
        raise ValueError(f"unknown split {split!r}; expected one of: {', '.join(SPLITS)}")
    samples = generate_samples(cfg, ids, workers)
    logger.debug(f"Generated {len(samples)} samples for split {split or 'all'}")
    return Dataset(config=cfg, samples=samples, split=split or "all")


def split_dataset(ds):
    """Partition a full dataset into train / val / test by id range."""
    out = {}
    for name, ids in split_ranges(ds.config).items():
        out[name] = Dataset(ds.config, [s for s in ds.samples if s.id in ids], name)
    return out


# ---------------------------------------------------------------------- #
# File format
# ---------------------------------------------------------------------- #
def _encode_image(pixels):
    return base64.b64encode(np.ascontiguousarray(pixels, dtype="<f8").tobytes()).decode("ascii")


def _decode_image(text, cfg):
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    shape = (cfg.image_channels, cfg.image_size, cfg.image_size)
    pixels = np.frombuffer(raw, dtype="<f8")
    if pixels.size != int(np.prod(shape)):
        raise ValueError(f"image holds {pixels.size} values, expected {int(np.prod(shape))}")
    return ImageGrid(pixels.reshape(shape).astype(np.float64), cfg.patch_size)


def sample_to_record(sample):
    return {
        "id": sample.id,
        "question_ids": [int(t) for t in sample.question_ids],
        "context_ids": [int(t) for t in sample.context_ids],
        "image": _encode_image(sample.image.pixels),
        "answer_ids": [int(t) for t in sample.answer_ids],
        "source_label": sample.source_label,
        "attribute_id": int(sample.attribute_id),
    }


def record_to_sample(record, cfg):
    if record["source_label"] not in SOURCES:
        raise ValueError(f"unknown source label {record['source_label']!r}")
    return Sample(
        id=int(record["id"]),
        question_ids=[int(t) for t in record["question_ids"]],
        context_ids=[int(t) for t in record["context_ids"]],
        image=_decode_image(record["image"], cfg),
        answer_ids=[int(t) for t in record["answer_ids"]],
        source_label=record["source_label"],
        attribute_id=int(record["attribute_id"]),
    )


def save_dataset(ds, path):
    header = {"format": FORMAT_VERSION, "config": ds.config.to_dict(), "split": ds.split, "count": len(ds)}
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for sample in ds.samples:
            f.write(json.dumps(sample_to_record(sample), sort_keys=True) + "\n")
    logger.debug(f"Saved {len(ds)} samples to {path}")


def load_dataset(path):
    """
    Read a dataset file written by save_dataset.

    Raises:
        DatasetFormatError: bad header, malformed record or record count mismatch
    """
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError("header", "file is empty")
    try:
        header = json.loads(lines[0])
        if header.get("format") != FORMAT_VERSION:
            raise ValueError(f"format {header.get('format')!r} is not {FORMAT_VERSION}")
        cfg = SynthConfig.from_dict(header["config"])
        count = int(header["count"])
    except (ValueError, KeyError, TypeError) as e:
        raise DatasetFormatError("header", str(e)) from e

    samples = []
    for index, line in enumerate(lines[1:]):
        try:
            samples.append(record_to_sample(json.loads(line), cfg))
        except (ValueError, KeyError, TypeError) as e:
            raise DatasetFormatError(index, str(e)) from e
    if len(samples) != count:
        raise DatasetFormatError(len(samples), f"header promises {count} records, file holds {len(samples)}")
    return Dataset(config=cfg, samples=samples, split=header.get("split", "all"))


def dataset_checksum(ds):
    """SHA-256 over the canonical JSON of every record, in order."""
    digest = hashlib.sha256()
    digest.update(json.dumps(ds.config.to_dict(), sort_keys=True).encode("utf-8"))
    for sample in ds.samples:
        digest.update(json.dumps(sample_to_record(sample), sort_keys=True).encode("utf-8"))
    return digest.hexdigest()


"""Relevance classifier for mined documents.

Hashed word n-gram features into a fixed bucket space, logistic regression
trained by plain SGD. Everything is deterministic for a given seed: feature
hashing uses blake2b, shuffling uses `random.Random(seed)`, and weights are
float64 throughout. Documents scoring at or above the threshold (0.90 by
default) survive filtering.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .jsonl import JsonlReader, write_jsonl
from .model import RawDocument, SchemaError, normalize

DEFAULT_THRESHOLD = 0.90
DEFAULT_BUCKETS = 1 << 20
MIN_BUCKETS = 1 << 10
MODEL_FORMAT_VERSION = 1


def _bucket(token: str, bucket_count: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % bucket_count


def featurize(
    text: str,
    bucket_count: int = DEFAULT_BUCKETS,
    ngram_orders: tuple[int, ...] = (1, 2),
) -> dict[int, float]:
    """Sparse L2-normalized bag of hashed word n-grams.

    Tokens come from `normalize(text).split()`; an n-gram is n consecutive
    tokens joined by single spaces. Empty text gives an empty vector.
    """
    if bucket_count < MIN_BUCKETS:
        raise ValueError(f"bucket_count must be >= {MIN_BUCKETS}")
    tokens = normalize(text).split()
    counts: dict[int, float] = {}
    for order in ngram_orders:
        for i in range(len(tokens) - order + 1):
            gram = " ".join(tokens[i : i + order])
            idx = _bucket(gram, bucket_count)
            counts[idx] = counts.get(idx, 0.0) + 1.0
    norm = math.sqrt(sum(v * v for v in counts.values()))
    if norm > 0:
        counts = {k: v / norm for k, v in counts.items()}
    return counts


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


@dataclass
class RelevanceModel:
    """Trained weights plus the featurization settings they assume."""

    bucket_count: int
    ngram_orders: tuple[int, ...]
    weights: np.ndarray
    bias: float
    # per-epoch mean log loss on the training set, not serialized
    epoch_losses: list[float] = field(default_factory=list, repr=False)

    def score(self, text: str) -> float:
        features = featurize(text, self.bucket_count, self.ngram_orders)
        z = self.bias + sum(self.weights[i] * v for i, v in features.items())
        return _sigmoid(z)

    def save(self, path: str) -> None:
        nonzero = np.nonzero(self.weights)[0]
        payload = {
            "format_version": MODEL_FORMAT_VERSION,
            "bucket_count": self.bucket_count,
            "ngram_orders": list(self.ngram_orders),
            "bias": self.bias,
            "weights": {str(int(i)): float(self.weights[i]) for i in nonzero},
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "RelevanceModel":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        version = payload.get("format_version")
        if version != MODEL_FORMAT_VERSION:
            raise SchemaError(f"model file: unsupported format_version {version!r}")
        weights = np.zeros(payload["bucket_count"], dtype=np.float64)
        for key, value in payload["weights"].items():
            weights[int(key)] = value
        return cls(
            bucket_count=payload["bucket_count"],
            ngram_orders=tuple(payload["ngram_orders"]),
            weights=weights,
            bias=payload["bias"],
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    learning_rate: float = 0.1
    seed: int = 0
    bucket_count: int = DEFAULT_BUCKETS
    ngram_orders: tuple[int, ...] = (1, 2)

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.bucket_count < MIN_BUCKETS:
            raise ValueError(f"bucket_count must be >= {MIN_BUCKETS}")


def train(
    positives: list[str],
    negatives: list[str],
    config: TrainConfig = TrainConfig(),
) -> RelevanceModel:
    """SGD logistic regression over the two labeled text lists.

    The learning rate decays linearly to zero over the epoch schedule;
    example order is reshuffled each epoch from a seeded generator, so
    retraining with the same inputs is bit-identical.
    """
    if not positives or not negatives:
        raise ValueError("both positives and negatives must be non-empty")

    texts = list(positives) + list(negatives)
    labels = [1] * len(positives) + [0] * len(negatives)
    featurized = [featurize(t, config.bucket_count, config.ngram_orders) for t in texts]
    weights = np.zeros(config.bucket_count, dtype=np.float64)
    bias = 0.0
    order = list(range(len(texts)))
    rng = random.Random(config.seed)
    total_steps = config.epochs * len(texts)
    step = 0
    epoch_losses: list[float] = []

    for _ in range(config.epochs):
        rng.shuffle(order)
        loss_sum = 0.0
        for idx in order:
            features = featurized[idx]
            y = labels[idx]
            z = bias + sum(weights[i] * v for i, v in features.items())
            p = _sigmoid(z)
            # clamp to keep the log finite on confident mistakes
            p_safe = min(max(p, 1e-12), 1.0 - 1e-12)
            loss_sum += -(y * math.log(p_safe) + (1 - y) * math.log(1.0 - p_safe))
            lr = config.learning_rate * (1.0 - step / total_steps)
            grad = p - y
            for i, v in features.items():
                weights[i] -= lr * grad * v
            bias -= lr * grad
            step += 1
        epoch_losses.append(loss_sum / len(texts))

    return RelevanceModel(
        bucket_count=config.bucket_count,
        ngram_orders=config.ngram_orders,
        weights=weights,
        bias=bias,
        epoch_losses=epoch_losses,
    )


def score(model: RelevanceModel, doc: RawDocument) -> float:
    """Probability that the document is coding-relevant."""
    return model.score(doc.text)


@dataclass
class FilterStats:
    read: int = 0
    malformed: int = 0
    kept: int = 0
    dropped: int = 0


def filter_corpus(
    model: RelevanceModel,
    in_path: str,
    out_path: str,
    threshold: float = DEFAULT_THRESHOLD,
) -> FilterStats:
    """Score every document and keep those with score >= threshold.

    Input order is preserved. Records that fail to parse are skipped and
    counted, never fatal. Each kept record carries its relevance_score.
    """
    stats = FilterStats()
    kept: list[dict] = []
    reader = JsonlReader(in_path)
    for data in reader:
        stats.read += 1
        try:
            doc = RawDocument.from_dict(data)
        except SchemaError:
            stats.malformed += 1
            continue
        score = model.score(doc.text)
        if score >= threshold:
            scored = RawDocument.create(
                text=doc.text, origin=doc.origin, relevance_score=score
            )
            kept.append(scored.to_dict())
            stats.kept += 1
        else:
            stats.dropped += 1
    stats.malformed += reader.malformed
    write_jsonl(out_path, kept)
    return stats

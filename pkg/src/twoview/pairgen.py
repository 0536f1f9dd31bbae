"""Positive/negative pair sampling for Siamese training."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .dataset import LeafSample, Taxonomy
from .errors import FormatError, MissingFileError, ValidationError

log = logging.getLogger(__name__)

# Default positive:negative proportion, as in the reference training subsets (e.g. 800/1200).
DEFAULT_RATIO = (2, 3)


@dataclass(frozen=True)
class PairSpec:
    grouping: str = "species"
    view: str = "local"
    positive_count: int = 400
    negative_count: int = 600
    seed: int = 0
    allow_replacement: bool = True

    def __post_init__(self):
        if self.grouping not in ("species", "genus", "family"):
            raise ValidationError(f"unknown grouping {self.grouping!r}")
        if self.view not in ("global", "local"):
            raise ValidationError(f"unknown view {self.view!r}")
        if self.positive_count < 0 or self.negative_count < 0:
            raise ValidationError("pair counts must be >= 0")
        if self.negative_count < self.positive_count:
            raise ValidationError("negative_count must be >= positive_count")

    @classmethod
    def with_default_ratio(cls, positive_count, **kw):
        neg = positive_count * DEFAULT_RATIO[1] // DEFAULT_RATIO[0]
        return cls(positive_count=positive_count, negative_count=neg, **kw)


@dataclass(frozen=True)
class TrainingPair:
    left: str
    right: str
    label: int


@dataclass
class PairSet:
    pairs: list[TrainingPair]
    spec: PairSpec
    positive_pool: int
    negative_pool: int
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


def _pool_indices(labels: np.ndarray):
    i, j = np.triu_indices(len(labels), k=1)
    same = labels[i] == labels[j]
    return (i[same], j[same]), (i[~same], j[~same])


def _draw(pool, count, rng, kind, spec, warnings):
    left, right = pool
    size = len(left)
    if count == 0:
        return np.empty(0, dtype=np.int64)
    if size == 0:
        raise ValidationError(f"{kind} pool is empty; cannot draw {count} pairs")
    if count > size:
        if not spec.allow_replacement:
            raise ValidationError(f"requested {count} {kind} pairs but pool has only {size}")
        msg = f"{kind} pool has {size} pairs < {count} requested; sampling with replacement"
        warnings.append(msg)
        log.warning(msg)
        return rng.integers(0, size, size=count)
    return rng.choice(size, size=count, replace=False)


def generate_pairs(samples: Sequence[LeafSample], taxonomy, spec: PairSpec) -> PairSet:
    if not samples:
        raise ValidationError("no samples to pair")
    tax = taxonomy if isinstance(taxonomy, Taxonomy) else Taxonomy(taxonomy)
    samples = sorted(samples, key=lambda s: s.sample_id)
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate sample ids")
    groups = []
    for s in samples:
        if s.species_id is None:
            raise ValidationError(f"sample {s.sample_id} is unlabeled")
        groups.append(tax.label(s.species_id, spec.grouping))
    codes = np.unique(np.asarray(groups), return_inverse=True)[1]
    if codes.max() == 0 and spec.negative_count > 0:
        raise ValidationError("only one group present; negative pairs impossible")
    pos, neg = _pool_indices(codes)
    rng = np.random.default_rng(spec.seed)
    warnings: list[str] = []
    pos_pick = _draw(pos, spec.positive_count, rng, "positive", spec, warnings)
    neg_pick = _draw(neg, spec.negative_count, rng, "negative", spec, warnings)
    pairs = [TrainingPair(ids[pos[0][k]], ids[pos[1][k]], 1) for k in pos_pick]
    pairs += [TrainingPair(ids[neg[0][k]], ids[neg[1][k]], 0) for k in neg_pick]
    return PairSet(pairs, spec, len(pos[0]), len(neg[0]), warnings)


def batch_iterator(pairs: Sequence, batch_size: int, seed: int = 0, epoch: int = 0) -> Iterator[list]:
    """One epoch of shuffled batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
    for start in range(0, len(order), batch_size):
        yield [pairs[k] for k in order[start:start + batch_size]]


def save_pairs(pairset: PairSet, path) -> None:
    """CSV ``left_id,right_id,label`` preceded by a ``#``-prefixed JSON header line."""
    header = {"spec": asdict(pairset.spec), "positive_pool": pairset.positive_pool,
              "negative_pool": pairset.negative_pool, "warnings": pairset.warnings}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["left_id", "right_id", "label"])
        for p in pairset.pairs:
            w.writerow([p.left, p.right, p.label])


def load_pairs(path) -> PairSet:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"pair manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise FormatError(f"{path}: missing JSON header line")
        try:
            header = json.loads(first[1:])
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: bad JSON header: {exc}") from exc
        reader = csv.reader(fh)
        if next(reader, None) != ["left_id", "right_id", "label"]:
            raise FormatError(f"{path}: expected CSV header left_id,right_id,label")
        pairs = []
        for lineno, row in enumerate(reader, start=3):
            if len(row) != 3 or row[2] not in ("0", "1"):
                raise FormatError(f"{path}: line {lineno}: malformed pair row")
            pairs.append(TrainingPair(row[0], row[1], int(row[2])))
    return PairSet(pairs, PairSpec(**header["spec"]), header["positive_pool"],
                   header["negative_pool"], list(header.get("warnings", [])))

"""Taxonomy tables, leaf image corpora and train/test splits.

Corpus layout on disk::

    <root>/<species_id>/<sample_id>.png      8-bit RGB
    taxonomy.csv                             species_id,genus_id,family_id,display_name
    test_manifest.txt (optional)             one test sample_id per line
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import MissingFileError, ParseError, ValidationError

log = logging.getLogger(__name__)

TAXONOMY_HEADER = ("species_id", "genus_id", "family_id", "display_name")


@dataclass(frozen=True)
class TaxonRecord:
    species_id: str
    genus_id: str
    family_id: str
    display_name: str = ""


@dataclass(frozen=True, eq=False)
class LeafSample:
    """One leaf image. ``species_id`` is None for unlabeled queries."""

    sample_id: str
    image: np.ndarray
    species_id: str | None = None

    def __post_init__(self):
        img = self.image
        if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
            raise ValidationError(
                f"sample {self.sample_id}: expected HxWx3 image, got shape {img.shape}")
        if img.dtype != np.uint8:
            raise ValidationError(f"sample {self.sample_id}: expected uint8, got {img.dtype}")


class Taxonomy:
    """Validated species -> genus -> family lookup."""

    def __init__(self, records: Iterable[TaxonRecord]):
        self.records: tuple[TaxonRecord, ...] = tuple(records)
        validate_taxonomy(self.records)
        self._by_species = {r.species_id: r for r in self.records}

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __contains__(self, species_id):
        return species_id in self._by_species

    def __getitem__(self, species_id) -> TaxonRecord:
        try:
            return self._by_species[species_id]
        except KeyError:
            raise ValidationError(f"species {species_id!r} not in taxonomy") from None

    def genus_of(self, species_id: str) -> str:
        return self[species_id].genus_id

    def family_of(self, species_id: str) -> str:
        return self[species_id].family_id

    def label(self, species_id: str, level: str) -> str:
        if level == "species":
            return self[species_id].species_id
        if level == "genus":
            return self.genus_of(species_id)
        if level == "family":
            return self.family_of(species_id)
        raise ValidationError(f"unknown taxonomic level {level!r}")

    def species_of_genus(self, genus_id: str) -> list[str]:
        return sorted(r.species_id for r in self.records if r.genus_id == genus_id)

    @property
    def genera(self) -> list[str]:
        return sorted({r.genus_id for r in self.records})

    def extended(self, records: Iterable[TaxonRecord]) -> "Taxonomy":
        return Taxonomy(list(self.records) + [r for r in records if r.species_id not in self])


def validate_taxonomy(records: Sequence[TaxonRecord]) -> None:
    seen: dict[str, TaxonRecord] = {}
    genus_family: dict[str, str] = {}
    for r in records:
        if r.species_id in seen:
            other = seen[r.species_id]
            if other.genus_id != r.genus_id:
                raise ValidationError(
                    f"species {r.species_id!r} listed under two genera "
                    f"({other.genus_id!r}, {r.genus_id!r})")
            raise ValidationError(f"duplicate species_id {r.species_id!r}")
        seen[r.species_id] = r
        fam = genus_family.setdefault(r.genus_id, r.family_id)
        if fam != r.family_id:
            raise ValidationError(
                f"genus {r.genus_id!r} mapped to two families ({fam!r}, {r.family_id!r})")


def load_taxonomy(path) -> list[TaxonRecord]:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"taxonomy file not found: {path}")
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(h.strip() for h in header) != TAXONOMY_HEADER:
            raise ParseError(f"expected header {','.join(TAXONOMY_HEADER)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", line=lineno)
            sid, gid, fid, name = (c.strip() for c in row)
            if not sid or not gid or not fid:
                raise ParseError("empty id field", line=lineno)
            records.append(TaxonRecord(sid, gid, fid, name))
    validate_taxonomy(records)
    return records


def write_taxonomy(records: Iterable[TaxonRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TAXONOMY_HEADER)
        for r in records:
            w.writerow([r.species_id, r.genus_id, r.family_id, r.display_name])


@dataclass(frozen=True)
class DatasetSplit:
    train: list[LeafSample]
    test: list[LeafSample]
    taxonomy: list[TaxonRecord]
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        tax = Taxonomy(self.taxonomy)
        for s in list(self.train) + list(self.test):
            if s.species_id is not None and s.species_id not in tax:
                raise ValidationError(f"sample {s.sample_id}: species {s.species_id!r} not in taxonomy")
        overlap = {s.sample_id for s in self.train} & {s.sample_id for s in self.test}
        if overlap:
            raise ValidationError(f"train/test overlap: {sorted(overlap)[:5]}")

    @property
    def tax(self) -> Taxonomy:
        return Taxonomy(self.taxonomy)


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise ValidationError(f"unreadable image {path}: {exc}") from exc


def write_image(image: np.ndarray, path) -> None:
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def scan_corpus(root, taxonomy: Sequence[TaxonRecord] | None = None) -> list[LeafSample]:
    """Read every ``<root>/<species>/<sample>.png`` in sorted order."""
    root = Path(root)
    if not root.is_dir():
        raise MissingFileError(f"corpus root not found: {root}")
    known = {r.species_id for r in taxonomy} if taxonomy is not None else None
    samples = []
    for sp_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if known is not None and sp_dir.name not in known:
            raise ValidationError(f"species directory {sp_dir.name!r} not in taxonomy")
        for img_path in sorted(sp_dir.glob("*.png")):
            samples.append(LeafSample(img_path.stem, read_image(img_path), sp_dir.name))
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate sample_id across species directories")
    return samples


def load_split(root, taxonomy: Sequence[TaxonRecord], *, test_per_class: int | None = None,
               test_fraction: float | None = None, manifest=None, seed: int = 0) -> DatasetSplit:
    """Load a corpus and split it into train/test.

    Exactly one of ``test_per_class``, ``test_fraction`` or ``manifest`` selects the
    policy. Per-class policies need at least one remaining training image per species.
    """
    chosen = [x is not None for x in (test_per_class, test_fraction, manifest)]
    if sum(chosen) != 1:
        raise ValueError("give exactly one of test_per_class, test_fraction, manifest")
    samples = scan_corpus(root, taxonomy)
    if manifest is not None:
        test_ids = read_manifest(manifest)
        known = {s.sample_id for s in samples}
        missing = sorted(test_ids - known)
        if missing:
            raise ValidationError(f"manifest lists unknown sample ids: {missing[:5]}")
        return DatasetSplit([s for s in samples if s.sample_id not in test_ids],
                            [s for s in samples if s.sample_id in test_ids], list(taxonomy))
    return split_samples(samples, taxonomy, test_per_class=test_per_class,
                         test_fraction=test_fraction, seed=seed)


def split_samples(samples: Sequence[LeafSample], taxonomy: Sequence[TaxonRecord], *,
                  test_per_class: int | None = None, test_fraction: float | None = None,
                  seed: int = 0) -> DatasetSplit:
    by_species = group_by_species(samples)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for sid in sorted(by_species):
        group = by_species[sid]
        if test_per_class is not None:
            n_test = test_per_class
        else:
            if not 0.0 <= test_fraction < 1.0:
                raise ValueError("test_fraction must lie in [0, 1)")
            n_test = int(round(test_fraction * len(group)))
        if len(group) < n_test + 1:
            raise ValidationError(
                f"species {sid!r} has {len(group)} images; need {n_test} test + at least 1 train")
        order = rng.permutation(len(group))
        test_idx = set(order[:n_test].tolist())
        for i, s in enumerate(group):
            (test if i in test_idx else train).append(s)
    return DatasetSplit(train, test, list(taxonomy))


def group_by_species(samples: Iterable[LeafSample]) -> dict[str, list[LeafSample]]:
    out: dict[str, list[LeafSample]] = {}
    for s in samples:
        if s.species_id is None:
            continue
        out.setdefault(s.species_id, []).append(s)
    for group in out.values():
        group.sort(key=lambda s: s.sample_id)
    return out


def read_manifest(path) -> set[str]:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}")
    lines = (line.strip() for line in path.read_text(encoding="utf-8").splitlines())
    return {line for line in lines if line and not line.startswith("#")}


def write_corpus(samples: Iterable[LeafSample], root) -> None:
    root = Path(root)
    for s in samples:
        if s.species_id is None:
            raise ValidationError(f"cannot write unlabeled sample {s.sample_id} into a corpus")
        d = root / s.species_id
        d.mkdir(parents=True, exist_ok=True)
        write_image(s.image, d / f"{s.sample_id}.png")


def write_split(split: DatasetSplit, root) -> None:
    """Write corpus, ``taxonomy.csv`` and ``test_manifest.txt`` under ``root``."""
    root = Path(root)
    write_corpus(list(split.train) + list(split.test), root / "images")
    write_taxonomy(split.taxonomy, root / "taxonomy.csv")
    (root / "test_manifest.txt").write_text(
        "".join(f"{s.sample_id}\n" for s in sorted(split.test, key=lambda s: s.sample_id)),
        encoding="utf-8")


def sample_lookup(samples: Iterable[LeafSample]) -> Mapping[str, LeafSample]:
    return {s.sample_id: s for s in samples}

"""Reference gallery: a few labeled exemplars per species with cached embeddings.

Genus references are the union of the references of its species. Extending the
gallery with new species only embeds their references; models are never touched.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import metricnet
from .dataset import LeafSample, TaxonRecord, Taxonomy, group_by_species
from .errors import FingerprintMismatch, FormatError, MissingFileError, ValidationError
from .preprocess import PreprocessConfig, ViewPair, make_views

log = logging.getLogger(__name__)

CACHE_MAGIC = b"REFS"
CACHE_VERSION = 1
MANIFEST_NAME = "references.json"
CACHE_NAME = "references.bin"


@dataclass(frozen=True)
class ReferenceEntry:
    sample_id: str
    species_id: str
    genus_id: str


@dataclass(frozen=True)
class ReferenceSelection:
    sample_ids: list[str]
    warnings: list[str] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class ReferenceSet:
    entries: tuple[ReferenceEntry, ...]
    global_embeddings: np.ndarray
    local_embeddings: np.ndarray
    n_r: int
    fingerprint_a: str
    fingerprint_b: str

    def __post_init__(self):
        n = len(self.entries)
        if self.global_embeddings.shape[0] != n or self.local_embeddings.shape[0] != n:
            raise ValidationError("embedding rows do not match entry count")
        for arr in (self.global_embeddings, self.local_embeddings):
            arr.setflags(write=False)

    def __len__(self):
        return len(self.entries)

    @property
    def species(self) -> list[str]:
        return sorted({e.species_id for e in self.entries})

    @property
    def genera(self) -> list[str]:
        return sorted({e.genus_id for e in self.entries})

    def genus_of(self, species_id: str) -> str:
        for e in self.entries:
            if e.species_id == species_id:
                return e.genus_id
        raise ValidationError(f"species {species_id!r} not in reference set")

    def check_models(self, model_a=None, model_b=None) -> None:
        if model_a is not None and model_a.fingerprint() != self.fingerprint_a:
            raise FingerprintMismatch("model A does not match the reference set fingerprint")
        if model_b is not None and model_b.fingerprint() != self.fingerprint_b:
            raise FingerprintMismatch("model B does not match the reference set fingerprint")

    def equals(self, other: "ReferenceSet") -> bool:
        return (self.entries == other.entries and self.n_r == other.n_r
                and self.fingerprint_a == other.fingerprint_a
                and self.fingerprint_b == other.fingerprint_b
                and np.array_equal(self.global_embeddings, other.global_embeddings)
                and np.array_equal(self.local_embeddings, other.local_embeddings))


def select_references(train: Sequence[LeafSample], taxonomy, n_r: int, seed: int = 0,
                      species: Sequence[str] | None = None) -> ReferenceSelection:
    """Pick ``n_r`` random references per species, covering every species of each genus.

    A species with fewer than ``n_r`` samples gives all it has; the genus shortfall is
    filled round-robin (species id order) from sibling species' unused samples.
    """
    if n_r < 1:
        raise ValidationError("n_r must be >= 1")
    tax = taxonomy if isinstance(taxonomy, Taxonomy) else Taxonomy(taxonomy)
    by_species = group_by_species(train)
    wanted = sorted(species) if species is not None else sorted(by_species)
    for sid in wanted:
        if not by_species.get(sid):
            raise ValidationError(f"species {sid!r} has no training samples for references")
    rng = np.random.default_rng(seed)
    pools = {sid: [by_species[sid][k].sample_id for k in rng.permutation(len(by_species[sid]))]
             for sid in wanted}
    genera: dict[str, list[str]] = {}
    for sid in wanted:
        genera.setdefault(tax.genus_of(sid), []).append(sid)
    chosen, warnings = [], []
    for gid in sorted(genera):
        members = genera[gid]
        taken = {sid: pools[sid][:n_r] for sid in members}
        shortfall = sum(n_r - len(v) for v in taken.values())
        if shortfall:
            short = [sid for sid in members if len(taken[sid]) < n_r]
            filled = 0
            while filled < shortfall:
                progressed = False
                for sid in members:
                    if filled == shortfall:
                        break
                    if len(taken[sid]) < len(pools[sid]):
                        taken[sid].append(pools[sid][len(taken[sid])])
                        filled += 1
                        progressed = True
                if not progressed:
                    break
            msg = (f"genus {gid}: species {short} have fewer than {n_r} samples; "
                   f"filled {filled} of {shortfall} from siblings")
            warnings.append(msg)
            log.warning(msg)
        for sid in members:
            chosen.extend(taken[sid])
    return ReferenceSelection(chosen, warnings)


def _embed_views(views: Sequence[ViewPair], model_a, model_b):
    g = metricnet.embed_many(model_a, [v.global_view for v in views]) if views else \
        np.empty((0, model_a.embedding_dim), np.float32)
    l = metricnet.embed_many(model_b, [v.local_view for v in views]) if views else \
        np.empty((0, model_b.embedding_dim), np.float32)
    return g, l


def build(reference_ids: Sequence[str], samples: Mapping[str, LeafSample] | Sequence[LeafSample],
          taxonomy, model_a, model_b, preprocess: PreprocessConfig = PreprocessConfig(),
          n_r: int = 6, views: Mapping[str, ViewPair] | None = None) -> ReferenceSet:
    """Embed each reference's global view with model A and local view with model B."""
    tax = taxonomy if isinstance(taxonomy, Taxonomy) else Taxonomy(taxonomy)
    lookup = samples if isinstance(samples, Mapping) else {s.sample_id: s for s in samples}
    entries, vps = [], []
    for rid in reference_ids:
        if rid not in lookup:
            raise ValidationError(f"reference id {rid!r} not found among samples")
        s = lookup[rid]
        if s.species_id is None:
            raise ValidationError(f"reference {rid!r} is unlabeled")
        entries.append(ReferenceEntry(rid, s.species_id, tax.genus_of(s.species_id)))
        vps.append(views[rid] if views is not None and rid in views else make_views(s, preprocess))
    if len({e.sample_id for e in entries}) != len(entries):
        raise ValidationError("duplicate reference ids")
    g, l = _embed_views(vps, model_a, model_b)
    return ReferenceSet(tuple(entries), g, l, n_r, model_a.fingerprint(), model_b.fingerprint())


def add_species(refset: ReferenceSet, samples: Sequence[LeafSample], taxonomy_rows: Sequence[TaxonRecord],
                model_a, model_b, preprocess: PreprocessConfig = PreprocessConfig(),
                seed: int = 0, views: Mapping[str, ViewPair] | None = None) -> ReferenceSet:
    """New gallery with references for unseen species appended; ``refset`` is untouched."""
    refset.check_models(model_a, model_b)
    present = set(refset.species)
    new_species = sorted({s.species_id for s in samples if s.species_id is not None})
    dup = [sid for sid in new_species if sid in present]
    if dup:
        raise ValidationError(f"species already in reference set: {dup}")
    if not new_species:
        return ReferenceSet(refset.entries, refset.global_embeddings.copy(),
                            refset.local_embeddings.copy(), refset.n_r,
                            refset.fingerprint_a, refset.fingerprint_b)
    tax = Taxonomy(taxonomy_rows)
    sel = select_references(samples, tax, refset.n_r, seed=seed, species=new_species)
    extra = build(sel.sample_ids, samples, tax, model_a, model_b, preprocess, refset.n_r, views)
    return ReferenceSet(refset.entries + extra.entries,
                        np.concatenate([refset.global_embeddings, extra.global_embeddings]),
                        np.concatenate([refset.local_embeddings, extra.local_embeddings]),
                        refset.n_r, refset.fingerprint_a, refset.fingerprint_b)


def save(refset: ReferenceSet, directory) -> None:
    """``references.json`` manifest plus ``references.bin`` embedding cache."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    m_a = refset.global_embeddings.shape[1]
    m_b = refset.local_embeddings.shape[1]
    header = CACHE_MAGIC + struct.pack("<III", CACHE_VERSION, m_a, m_b)
    block = 4 * (m_a + m_b)
    parts = [header]
    manifest_entries = []
    for i, e in enumerate(refset.entries):
        parts.append(refset.global_embeddings[i].astype("<f4").tobytes())
        parts.append(refset.local_embeddings[i].astype("<f4").tobytes())
        manifest_entries.append({"sample_id": e.sample_id, "species_id": e.species_id,
                                 "genus_id": e.genus_id, "offset": len(header) + i * block})
    (d / CACHE_NAME).write_bytes(b"".join(parts))
    manifest = {"version": CACHE_VERSION, "n_r": refset.n_r,
                "fingerprints": {"model_a": refset.fingerprint_a, "model_b": refset.fingerprint_b},
                "M_A": m_a, "M_B": m_b, "cache": CACHE_NAME, "entries": manifest_entries}
    (d / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load(directory) -> ReferenceSet:
    d = Path(directory)
    mpath = d / MANIFEST_NAME
    if not mpath.is_file():
        raise MissingFileError(f"reference manifest not found: {mpath}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt reference manifest: {exc}") from exc
    if manifest.get("version") != CACHE_VERSION:
        raise FormatError(f"unsupported reference manifest version {manifest.get('version')}")
    cpath = d / manifest.get("cache", CACHE_NAME)
    if not cpath.is_file():
        raise MissingFileError(f"embedding cache missing: {cpath}")
    blob = cpath.read_bytes()
    if len(blob) < 16 or blob[:4] != CACHE_MAGIC:
        raise FormatError("embedding cache has bad magic")
    version, m_a, m_b = struct.unpack("<III", blob[4:16])
    if version != CACHE_VERSION:
        raise FormatError(f"unsupported embedding cache version {version}")
    if (m_a, m_b) != (manifest["M_A"], manifest["M_B"]):
        raise FormatError("embedding dimensions disagree between manifest and cache")
    entries_meta = manifest["entries"]
    block = 4 * (m_a + m_b)
    if len(blob) != 16 + block * len(entries_meta):
        raise FormatError(f"embedding cache length {len(blob)} does not match "
                          f"{len(entries_meta)} entries of {block} bytes")
    g = np.empty((len(entries_meta), m_a), np.float32)
    l = np.empty((len(entries_meta), m_b), np.float32)
    entries = []
    for i, em in enumerate(entries_meta):
        off = em["offset"]
        if off != 16 + i * block:
            raise FormatError(f"entry {i} has inconsistent cache offset {off}")
        g[i] = np.frombuffer(blob, "<f4", m_a, off)
        l[i] = np.frombuffer(blob, "<f4", m_b, off + 4 * m_a)
        entries.append(ReferenceEntry(em["sample_id"], em["species_id"], em["genus_id"]))
    fp = manifest["fingerprints"]
    return ReferenceSet(tuple(entries), g, l, int(manifest["n_r"]), fp["model_a"], fp["model_b"])

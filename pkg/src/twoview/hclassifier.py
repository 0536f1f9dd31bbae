"""Coarse-to-fine classification: genus by global view, species by local view.

Stage 1 ranks every reference by global-view similarity and keeps the top k
(genera may repeat). Each genus gets weight w = its count in that list. Stage 2
scores only the species of those genera on the local view, and the final score is

    zeta(species) = w_genus * S_species / sum(w)

Ordering is total everywhere: score descending, then species_id, then sample_id.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import metricnet
from .errors import ValidationError
from .preprocess import PreprocessConfig, ViewPair, make_views
from .refstore import ReferenceSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RankedReference:
    index: int
    sample_id: str
    species_id: str
    genus_id: str
    score: float


@dataclass
class Classification:
    ranking: list[tuple[str, float]]
    r_k: list[RankedReference] = field(default_factory=list)
    weights: dict[str, int] = field(default_factory=dict)
    species_scores: dict[str, float] = field(default_factory=dict)
    query_id: str | None = None

    @property
    def species(self) -> list[str]:
        return [sid for sid, _ in self.ranking]

    def top(self, n: int) -> "Classification":
        return Classification(self.ranking[:n], self.r_k, self.weights, self.species_scores, self.query_id)

    def report(self, diagnostics: bool = True) -> dict:
        out = {"query_id": self.query_id,
               "ranking": [{"species_id": s, "zeta": z} for s, z in self.ranking]}
        if diagnostics:
            out["r_k"] = [{"sample_id": r.sample_id, "species_id": r.species_id,
                           "genus_id": r.genus_id, "score": r.score} for r in self.r_k]
            out["genus_weights"] = dict(sorted(self.weights.items()))
            out["species_scores"] = dict(sorted(self.species_scores.items()))
        return out


def rank_by_score(scores: np.ndarray, refset: ReferenceSet, k: int) -> list[RankedReference]:
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], refset.entries[i].species_id,
                                                      refset.entries[i].sample_id))
    out = []
    for i in order[:k]:
        e = refset.entries[i]
        out.append(RankedReference(i, e.sample_id, e.species_id, e.genus_id, float(scores[i])))
    return out


def rank_genus_embedded(query_global: np.ndarray, model_a, refset: ReferenceSet, k: int):
    if k < 1:
        raise ValidationError("k must be >= 1")
    if len(refset) == 0:
        raise ValidationError("empty reference set")
    scores = metricnet.head_scores(model_a, query_global, refset.global_embeddings)
    return rank_by_score(scores, refset, k)


def rank_genus(global_view: np.ndarray, model_a, refset: ReferenceSet, k: int,
               check: bool = True) -> list[RankedReference]:
    if check:
        refset.check_models(model_a=model_a)
    return rank_genus_embedded(metricnet.embed(model_a, global_view), model_a, refset, k)


def genus_frequencies(r_k) -> dict[str, int]:
    if not r_k:
        raise ValidationError("empty ranked list")
    return dict(Counter(r.genus_id for r in r_k))


def score_species_embedded(query_local: np.ndarray, model_b, refset: ReferenceSet,
                           candidate_genera, aggregate: str = "max") -> dict[str, float]:
    candidates = set(candidate_genera)
    if not candidates:
        raise ValidationError("no candidate genera")
    if aggregate not in ("max", "mean"):
        raise ValidationError(f"aggregate must be 'max' or 'mean', got {aggregate!r}")
    rows = [i for i, e in enumerate(refset.entries) if e.genus_id in candidates]
    for g in sorted(candidates - {refset.entries[i].genus_id for i in rows}):
        log.warning("genus %s has no species references; skipped", g)
    if not rows:
        return {}
    sims = metricnet.head_scores(model_b, query_local, refset.local_embeddings[rows])
    per_species: dict[str, list[float]] = {}
    for i, s in zip(rows, sims):
        per_species.setdefault(refset.entries[i].species_id, []).append(float(s))
    reduce = max if aggregate == "max" else (lambda v: float(np.mean(v)))
    return {sid: reduce(v) for sid, v in sorted(per_species.items())}


def score_species(local_view: np.ndarray, model_b, refset: ReferenceSet, candidate_genera,
                  aggregate: str = "max", check: bool = True) -> dict[str, float]:
    if check:
        refset.check_models(model_b=model_b)
    return score_species_embedded(metricnet.embed(model_b, local_view), model_b, refset,
                                  candidate_genera, aggregate)


def fuse(weights: Mapping[str, int], scores: Mapping[str, float],
         genus_of: Mapping[str, str]) -> list[tuple[str, float]]:
    """Weight each species score by its genus frequency; sorted, ties by species id."""
    total = sum(weights.values())
    if total <= 0:
        raise ValidationError("genus weights must sum to a positive value")
    fused = []
    for sid, s in scores.items():
        g = genus_of.get(sid)
        if g is None or g not in weights:
            raise ValidationError(f"no genus weight for species {sid!r} (genus {g!r})")
        fused.append((sid, weights[g] * s / total))
    fused.sort(key=lambda t: (-t[1], t[0]))
    return fused


def species_genus_map(refset: ReferenceSet) -> dict[str, str]:
    return {e.species_id: e.genus_id for e in refset.entries}


def classify_embedded(query_global, query_local, model_a, model_b, refset: ReferenceSet,
                      k: int = 30, top_n: int | None = 5, aggregate: str = "max",
                      genus_of: Mapping[str, str] | None = None, query_id=None) -> Classification:
    r_k = rank_genus_embedded(query_global, model_a, refset, k)
    weights = genus_frequencies(r_k)
    scores = score_species_embedded(query_local, model_b, refset, weights, aggregate)
    ranking = fuse(weights, scores, genus_of or species_genus_map(refset))
    if top_n is not None:
        ranking = ranking[:top_n]
    return Classification(ranking, r_k, weights, scores, query_id)


def classify(sample, model_a, model_b, refset: ReferenceSet, k: int = 30, top_n: int | None = 5,
             preprocess: PreprocessConfig = PreprocessConfig(), aggregate: str = "max",
             views: ViewPair | None = None) -> Classification:
    """Full pipeline for one leaf: views, stage 1, weights, stage 2, fusion."""
    refset.check_models(model_a, model_b)
    vp = views if views is not None else make_views(sample, preprocess)
    qg = metricnet.embed(model_a, vp.global_view)
    ql = metricnet.embed(model_b, vp.local_view)
    return classify_embedded(qg, ql, model_a, model_b, refset, k, top_n, aggregate,
                             query_id=getattr(sample, "sample_id", None))


def classify_flat_embedded(query_emb, model, refset: ReferenceSet, view: str = "global",
                           top_n: int | None = 5) -> list[tuple[str, float]]:
    """Single-view baseline: every gallery species scored by its best reference."""
    embs = refset.global_embeddings if view == "global" else refset.local_embeddings
    sims = metricnet.head_scores(model, query_emb, embs)
    best: dict[str, float] = {}
    for e, s in zip(refset.entries, sims):
        best[e.species_id] = max(best.get(e.species_id, -1.0), float(s))
    ranking = sorted(best.items(), key=lambda t: (-t[1], t[0]))
    return ranking[:top_n] if top_n is not None else ranking

"""Metrics and experiment protocols.

Metrics: the user/plant/picture averaged reciprocal-rank score, top-k accuracy and
confusion matrices. Protocols: reference-count / list-size sweeps, stability over
reference draws, scalability by gallery extension, and per-class training caps.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import metricnet, refstore
from .dataset import LeafSample, TaxonRecord, Taxonomy, group_by_species
from .errors import TwoViewError, ValidationError
from .hclassifier import classify, classify_embedded, classify_flat_embedded, species_genus_map
from .pipeline import StageConfig, compute_views, train_stage
from .preprocess import PreprocessConfig, augment_rotations

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- metrics

@dataclass(frozen=True)
class Picture:
    true_species: str
    ranking: Sequence[str] | None  # None records a failed classification


# users -> plants -> pictures
ObservationTree = Mapping[str, Mapping[str, Sequence[Picture]]]


def reciprocal_rank(true_species: str, ranking: Sequence[str] | None) -> float:
    if not ranking:
        return 0.0
    for pos, sid in enumerate(ranking, start=1):
        if sid == true_species:
            return 1.0 / pos
    return 0.0


def s_metric(tree: ObservationTree) -> float:
    """Mean over users of mean over plants of mean over pictures of 1/rank."""
    if not tree:
        raise ValidationError("empty observation tree")
    user_scores = []
    for user, plants in tree.items():
        if not plants:
            raise ValidationError(f"user {user!r} has no plants")
        plant_scores = []
        for plant, pictures in plants.items():
            if not pictures:
                raise ValidationError(f"user {user!r}, plant {plant!r} has no pictures")
            plant_scores.append(sum(reciprocal_rank(p.true_species, p.ranking) for p in pictures)
                                / len(pictures))
        user_scores.append(sum(plant_scores) / len(plant_scores))
    return sum(user_scores) / len(user_scores)


def flat_tree(results: Sequence[tuple[str, Sequence[str]]]) -> dict:
    """One user, one picture per plant: the score collapses to mean reciprocal rank."""
    return {"user": {f"plant{i}": [Picture(t, r)] for i, (t, r) in enumerate(results)}}


def accuracy(results: Sequence[tuple[str, Sequence[str]]], top_k: int = 1) -> float:
    if not results:
        raise ValidationError("no results")
    hits = sum(1 for true, ranking in results if ranking and true in list(ranking)[:top_k])
    return hits / len(results)


def confusion_matrix(results: Sequence[tuple[str, Sequence[str]]], level: str = "species",
                     taxonomy=None) -> tuple[list[str], np.ndarray]:
    """Rows true label, columns top-1 prediction. Unpredicted results go to a ``<none>`` column."""
    if level != "species" and taxonomy is None:
        raise ValidationError("taxonomy required for genus/family confusion matrices")
    tax = None if taxonomy is None else (taxonomy if isinstance(taxonomy, Taxonomy) else Taxonomy(taxonomy))

    def lab(sid):
        if tax is None:
            return sid
        return tax.label(sid, level)

    pairs = [(lab(t), lab(r[0]) if r else "<none>") for t, r in results]
    labels = sorted({p for pair in pairs for p in pair})
    index = {l: i for i, l in enumerate(labels)}
    m = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for t, p in pairs:
        m[index[t], index[p]] += 1
    return labels, m


# --------------------------------------------------------------------------- reports

@dataclass
class ExperimentReport:
    name: str
    config: dict
    metrics: dict = field(default_factory=dict)
    tables: dict[str, list[dict]] = field(default_factory=dict)
    per_species_hits: dict[str, dict] = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "config": self.config, "metrics": self.metrics,
                "tables": self.tables, "per_species_hits": self.per_species_hits,
                "timing": self.timing}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, default=_jsonable)

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / f"{self.name}.json"]
        written[0].write_text(self.to_json() + "\n", encoding="utf-8")
        for tname, rows in self.tables.items():
            if rows:
                written.append(_write_csv(out / f"{self.name}_{tname}.csv", rows))
        if self.per_species_hits:
            rows = [{"species_id": s, **v} for s, v in sorted(self.per_species_hits.items())]
            written.append(_write_csv(out / f"{self.name}_hits.csv", rows))
        return written


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def _write_csv(path, rows):
    keys = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


# --------------------------------------------------------------------------- evaluation context

class EvalContext:
    """Trained models plus cached views and query embeddings for a split."""

    def __init__(self, train: Sequence[LeafSample], test: Sequence[LeafSample], taxonomy,
                 model_a, model_b, preprocess: PreprocessConfig = PreprocessConfig(), views=None):
        self.train = list(train)
        self.test = list(test)
        self.taxonomy = taxonomy if isinstance(taxonomy, Taxonomy) else Taxonomy(taxonomy)
        self.model_a = model_a
        self.model_b = model_b
        self.preprocess = preprocess
        self.views = compute_views(self.train + self.test, preprocess, dict(views or {}))
        self._emb: dict[tuple[int, str], np.ndarray] = {}

    def embedding(self, model, sample_id: str) -> np.ndarray:
        key = (id(model), sample_id)
        if key not in self._emb:
            self._emb[key] = metricnet.embed(model, self.views[sample_id].view(model.view_tag))
        return self._emb[key]

    def add_samples(self, samples: Sequence[LeafSample]) -> None:
        compute_views(samples, self.preprocess, self.views)

    def build_refs(self, n_r: int, seed: int, model_a=None, model_b=None) -> refstore.ReferenceSet:
        sel = refstore.select_references(self.train, self.taxonomy, n_r, seed=seed)
        return refstore.build(sel.sample_ids, self.train, self.taxonomy, model_a or self.model_a,
                              model_b or self.model_b, self.preprocess, n_r, views=self.views)

    def run(self, refset: refstore.ReferenceSet, samples: Sequence[LeafSample], k: int,
            aggregate: str = "max"):
        refset.check_models(self.model_a, self.model_b)
        gmap = species_genus_map(refset)
        out = []
        for s in samples:
            c = classify_embedded(self.embedding(self.model_a, s.sample_id),
                                  self.embedding(self.model_b, s.sample_id),
                                  self.model_a, self.model_b, refset, k, None, aggregate,
                                  genus_of=gmap, query_id=s.sample_id)
            out.append((s, c))
        return out


def summarize(ctx: EvalContext, classified, top_ks=(1, 3, 5)) -> dict:
    results = [(s.species_id, c.species) for s, c in classified]
    out = {f"acc_top{k}": accuracy(results, k) for k in top_ks}
    out["s_metric"] = s_metric(flat_tree(results))
    out["stage1_hit"] = float(np.mean([ctx.taxonomy.genus_of(s.species_id) in c.weights
                                       for s, c in classified]))
    out["mean_candidates"] = float(np.mean([len(c.species_scores) for _, c in classified]))
    return out


def species_hits(classified) -> dict[str, dict]:
    hits: dict[str, dict] = {}
    for s, c in classified:
        h = hits.setdefault(s.species_id, {"tests": 0, "hits": 0})
        h["tests"] += 1
        h["hits"] += int(bool(c.ranking) and c.ranking[0][0] == s.species_id)
    return hits


def evaluate(ctx: EvalContext, refset: refstore.ReferenceSet, k: int = 30, top_ks=(1, 3, 5),
             aggregate: str = "max") -> ExperimentReport:
    classified = ctx.run(refset, ctx.test, k, aggregate)
    rep = ExperimentReport("evaluate", {"k": k, "n_r": refset.n_r, "aggregate": aggregate,
                                        "fingerprint_a": refset.fingerprint_a,
                                        "fingerprint_b": refset.fingerprint_b,
                                        "references": len(refset), "test_samples": len(ctx.test)})
    rep.metrics = summarize(ctx, classified, top_ks)
    rep.per_species_hits = species_hits(classified)
    labels, m = confusion_matrix([(s.species_id, c.species) for s, c in classified])
    rep.tables["confusion"] = [{"true": labels[i], **{labels[j]: int(m[i, j]) for j in range(len(labels))}}
                               for i in range(len(labels))]
    return rep


def flat_accuracy(ctx: EvalContext, model, refset: refstore.ReferenceSet, view: str = "global",
                  top_k: int = 1) -> float:
    """Single-view baseline accuracy; ``refset`` must hold embeddings from ``model`` for ``view``."""
    results = []
    for s in ctx.test:
        q = metricnet.embed(model, ctx.views[s.sample_id].view(view))
        results.append((s.species_id, [sid for sid, _ in classify_flat_embedded(q, model, refset, view, None)]))
    return accuracy(results, top_k)


# --------------------------------------------------------------------------- protocols

def sweep_references(ctx: EvalContext, n_r_values=(1, 2, 3, 4, 5, 6), k_values=(5, 15, 30, 50),
                     seed: int = 0) -> ExperimentReport:
    rows = []
    for n_r in n_r_values:
        refset = ctx.build_refs(n_r, seed)
        for k in k_values:
            m = summarize(ctx, ctx.run(refset, ctx.test, k), top_ks=(1,))
            rows.append({"n_r": n_r, "k": k, "references": len(refset),
                         "stage1_hit": m["stage1_hit"], "acc_top1": m["acc_top1"],
                         "mean_candidates": m["mean_candidates"]})
    rep = ExperimentReport("sweep", {"n_r_values": list(n_r_values), "k_values": list(k_values),
                                     "seed": seed, "fingerprint_a": ctx.model_a.fingerprint(),
                                     "fingerprint_b": ctx.model_b.fingerprint()})
    rep.tables["grid"] = rows
    best = max(rows, key=lambda r: (r["acc_top1"], -r["k"], -r["n_r"]))
    rep.metrics = {"best_acc_top1": best["acc_top1"], "best_n_r": best["n_r"], "best_k": best["k"]}
    return rep


def stability_run(ctx: EvalContext, repetitions: int = 5, base_seed: int = 0, n_r: int = 6,
                  k: int = 30) -> ExperimentReport:
    if repetitions < 1:
        raise ValidationError("repetitions must be >= 1")
    rows = []
    for i in range(repetitions):
        refset = ctx.build_refs(n_r, base_seed + i)
        m = summarize(ctx, ctx.run(refset, ctx.test, k), top_ks=(1,))
        rows.append({"run": i + 1, "seed": base_seed + i, "acc_top1": m["acc_top1"],
                     "s_metric": m["s_metric"]})
    accs = [r["acc_top1"] for r in rows]
    rep = ExperimentReport("stability", {"repetitions": repetitions, "base_seed": base_seed,
                                         "n_r": n_r, "k": k})
    rep.tables["runs"] = rows
    rep.metrics = {"mean_acc": float(np.mean(accs)), "spread": float(max(accs) - min(accs)),
                   "min_acc": min(accs), "max_acc": max(accs)}
    return rep


@dataclass
class SpeciesBatch:
    """Unseen species to add: reference pool, held-out queries, taxonomy rows."""

    train: list[LeafSample]
    test: list[LeafSample]
    taxonomy: list[TaxonRecord]


def _time_block(fn, samples):
    t0 = time.perf_counter()
    for s in samples:
        fn(s)
    return (time.perf_counter() - t0) / max(1, len(samples))


def time_galleries(ctx: EvalContext, refsets: Sequence[refstore.ReferenceSet], k: int,
                   samples: Sequence[LeafSample], repeats: int = 3) -> tuple[list[float], list[float]]:
    """Per-query seconds for each gallery: full classify, and the gallery scoring part alone.

    Galleries are timed interleaved after one warm-up pass and the minimum over
    ``repeats`` rounds is kept, so drift does not masquerade as a size effect.
    """
    full = [float("inf")] * len(refsets)
    scoring = [float("inf")] * len(refsets)
    for rnd in range(repeats + 1):
        for i, ref in enumerate(refsets):
            gmap = species_genus_map(ref)
            t_full = _time_block(lambda s: classify(s, ctx.model_a, ctx.model_b, ref, k, None,
                                                    ctx.preprocess), samples)
            t_score = _time_block(lambda s: classify_embedded(
                ctx.embedding(ctx.model_a, s.sample_id), ctx.embedding(ctx.model_b, s.sample_id),
                ctx.model_a, ctx.model_b, ref, k, None, genus_of=gmap), samples)
            if rnd > 0:
                full[i] = min(full[i], t_full)
                scoring[i] = min(scoring[i], t_score)
    return full, scoring


def scalability_run(ctx: EvalContext, batches: Sequence[SpeciesBatch], n_r: int = 6, k: int = 30,
                    seed: int = 0, timing_queries: int = 20, timing_repeats: int = 3,
                    model_paths: Sequence | None = None) -> ExperimentReport:
    """Grow the gallery batch by batch without retraining, tracking accuracy and query time."""
    fp_before = (ctx.model_a.fingerprint(), ctx.model_b.fingerprint())
    file_fp_before = [metricnet.file_fingerprint(p) for p in model_paths or []]
    refset = ctx.build_refs(n_r, seed)
    taxonomy = ctx.taxonomy
    rows = []
    refsets = [refset]
    new_test: list[LeafSample] = []

    def record(step, refset):
        orig = summarize(ctx, ctx.run(refset, ctx.test, k), top_ks=(1,))
        row = {"step": step, "species": len(refset.species), "references": len(refset),
               "acc_original": orig["acc_top1"], "acc_new": None}
        if new_test:
            row["acc_new"] = summarize(ctx, ctx.run(refset, new_test, k), top_ks=(1,))["acc_top1"]
        rows.append(row)

    record(0, refset)
    original_taxonomy = ctx.taxonomy
    try:
        for step, batch in enumerate(batches, start=1):
            taxonomy = taxonomy.extended(batch.taxonomy)
            ctx.taxonomy = taxonomy
            ctx.add_samples(batch.train + batch.test)
            refset = refstore.add_species(refset, batch.train, taxonomy.records, ctx.model_a,
                                          ctx.model_b, ctx.preprocess, seed=seed + step, views=ctx.views)
            refsets.append(refset)
            new_test.extend(batch.test)
            record(step, refset)
    finally:
        ctx.taxonomy = original_taxonomy
    full, scoring = time_galleries(ctx, refsets, k, ctx.test[:timing_queries], timing_repeats)
    for row, tf, ts in zip(rows, full, scoring):
        row["seconds_per_query"] = tf
        row["scoring_seconds_per_query"] = ts
    unchanged = fp_before == (ctx.model_a.fingerprint(), ctx.model_b.fingerprint())
    files_unchanged = file_fp_before == [metricnet.file_fingerprint(p) for p in model_paths or []]
    rep = ExperimentReport("scalability", {"n_r": n_r, "k": k, "seed": seed,
                                           "batches": [len({s.species_id for s in b.train}) for b in batches]})
    rep.tables["steps"] = rows
    rep.metrics = {"models_unchanged": unchanged and files_unchanged,
                   "acc_drop_original": rows[0]["acc_original"] - rows[-1]["acc_original"],
                   "final_acc_new": rows[-1]["acc_new"]}
    rep.timing = {"seconds_per_query": full, "scoring_seconds_per_query": scoring,
                  "references": [r["references"] for r in rows]}
    return rep


def cap_per_class(samples: Sequence[LeafSample], cap: int) -> list[LeafSample]:
    out = []
    for sid, group in sorted(group_by_species(samples).items()):
        out.extend(group[:cap])
    return out


def unbalanced_run(train: Sequence[LeafSample], test: Sequence[LeafSample], taxonomy,
                   caps=(1, 3, 6), stage_a: StageConfig | None = None,
                   stage_b: StageConfig | None = None, n_r: int = 6, k: int = 30,
                   preprocess: PreprocessConfig = PreprocessConfig(), seed: int = 0,
                   augment_to: int | None = None) -> ExperimentReport:
    """Retrain both stages with at most ``cap`` training images per species.

    With ``augment_to`` set, species below that count get rotated copies first;
    otherwise a cap that leaves no positive pairs aborts that row (recorded, not raised).
    """
    stage_a = stage_a or StageConfig.for_stage("genus")
    stage_b = stage_b or StageConfig.for_stage("species")
    tax = taxonomy if isinstance(taxonomy, Taxonomy) else Taxonomy(taxonomy)
    views = compute_views(test, preprocess)
    rows = []
    for cap in caps:
        capped = cap_per_class(train, cap)
        pool = list(capped)
        if augment_to is not None:
            for sid, group in sorted(group_by_species(capped).items()):
                need = max(0, augment_to - len(group))
                for i, src in enumerate(group):
                    count = need // len(group) + (1 if i < need % len(group) else 0)
                    pool.extend(augment_rotations(src, count, seed=seed))
        row = {"cap": cap, "train_images": len(pool), "test_ids": len(test), "status": "ok",
               "acc_top1": None, "warnings": ""}
        try:
            compute_views(pool, preprocess, views)
            a = train_stage(pool, tax, stage_a, preprocess, views, seed)
            b = train_stage(pool, tax, stage_b, preprocess, views, seed)
            row["warnings"] = "; ".join(a.pairs.warnings + b.pairs.warnings)
            ctx = EvalContext(pool, test, tax, a.model, b.model, preprocess, views)
            refset = ctx.build_refs(n_r, seed)
            row["acc_top1"] = summarize(ctx, ctx.run(refset, ctx.test, k), top_ks=(1,))["acc_top1"]
        except TwoViewError as exc:
            row["status"] = "aborted"
            row["warnings"] = str(exc)
            log.warning("cap %d aborted: %s", cap, exc)
        rows.append(row)
    rep = ExperimentReport("unbalanced", {"caps": list(caps), "n_r": n_r, "k": k, "seed": seed,
                                          "augment_to": augment_to,
                                          "test_ids": sorted(s.sample_id for s in test)})
    rep.tables["caps"] = rows
    rep.metrics = {f"acc_cap{r['cap']}": r["acc_top1"] for r in rows}
    return rep


# --------------------------------------------------------------------------- plots

def plot_sweep(report: ExperimentReport, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = report.tables["grid"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for n_r in sorted({r["n_r"] for r in rows}):
        sel = [r for r in rows if r["n_r"] == n_r]
        ax.plot([r["k"] for r in sel], [r["acc_top1"] for r in sel], marker="o", label=f"N_r={n_r}")
    ax.set_xlabel("ranked list size k")
    ax.set_ylabel("top-1 accuracy")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_scalability(report: ExperimentReport, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = report.tables["steps"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([r["species"] for r in rows], [r["acc_original"] for r in rows], marker="o", label="original species")
    new = [r for r in rows if r["acc_new"] is not None]
    if new:
        ax.plot([r["species"] for r in new], [r["acc_new"] for r in new], marker="s", label="added species")
    ax.set_xlabel("species in gallery")
    ax.set_ylabel("top-1 accuracy")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# --------------------------------------------------------------------------- benchmark

def train_benchmark(train: Sequence[LeafSample], test: Sequence[LeafSample], taxonomy,
                    stage_a: StageConfig, stage_b: StageConfig,
                    preprocess: PreprocessConfig = PreprocessConfig(), seed: int = 0) -> EvalContext:
    """Train both stage models on ``train`` and wrap them with the split for evaluation."""
    views = compute_views(list(train) + list(test), preprocess)
    a = train_stage(train, taxonomy, stage_a, preprocess, views, seed)
    b = train_stage(train, taxonomy, stage_b, preprocess, views, seed)
    ctx = EvalContext(train, test, taxonomy, a.model, b.model, preprocess, views)
    ctx.loss_traces = {"a": a.loss_trace, "b": b.loss_trace}
    return ctx

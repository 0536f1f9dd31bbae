"""
Classifying one leaf, genus first
=================================

Stage 1 ranks every reference by global-view similarity and keeps the top k.
Genera are weighted by how often they appear there. Stage 2 scores only the
species of those genera on the local view, and the two are fused.
"""

from twoview.hclassifier import classify

from _shared import benchmark_context

ctx = benchmark_context()
refs = ctx.build_refs(n_r=6, seed=0)
print(f"gallery: {len(refs)} references for {len(refs.species)} species")

query = ctx.test[40]
result = classify(query, ctx.model_a, ctx.model_b, refs, k=30, top_n=5)
print("true species:", query.species_id)
print("genus weights from the top-30 list:", result.weights)
print("species scored in stage 2:", len(result.species_scores), "of", len(refs.species))
for rank, (sid, zeta) in enumerate(result.ranking, start=1):
    print(f"  {rank}. {sid}  zeta={zeta:.4f}")

# The full JSON-ready report keeps every intermediate value.
report = result.report(diagnostics=True)
print("first stage-1 hits:", [r["sample_id"] for r in report["r_k"][:5]])

"""
Training the two Siamese models
===============================

Model A learns whether two global views share a genus. Model B learns whether
two local views share a species. Both see labeled pairs at a 2:3 ratio of
positives to negatives.
"""

from twoview.metricnet import pair_loss, logistic
from twoview.pairgen import PairSpec, generate_pairs
from twoview.synthbench import SynthSpec, generate

from _shared import OUT, benchmark_context

split, tax = generate(SynthSpec())
for stage, (grouping, view, pos, neg) in {"A": ("genus", "global", 400, 600),
                                          "B": ("species", "local", 270, 405)}.items():
    pairs = generate_pairs(split.train, tax, PairSpec(grouping, view, pos, neg))
    print(f"model {stage}: {len(pairs)} pairs from pools of {pairs.positive_pool} positive "
          f"and {pairs.negative_pool} negative candidates")

# The loss is binary cross-entropy on the similarity score.
print("loss at d=0.5 for either label:", pair_loss(0.5, 0), pair_loss(0.5, 1))

# Train (or load the cached) benchmark models and look at their calibration heads.
ctx = benchmark_context()
for name, model in (("A", ctx.model_a), ("B", ctx.model_b)):
    w, b = model.calibration()
    print(f"model {name}: M={w.size}, self-similarity logistic(b)={float(logistic(b)):.4f}, "
          f"fingerprint {model.fingerprint()[:12]}")
if hasattr(ctx, "loss_traces"):
    for name, trace in ctx.loss_traces.items():
        print(f"loss trace {name}: {trace[0]:.3f} -> {trace[-1]:.3f}")
print("models cached in", OUT)

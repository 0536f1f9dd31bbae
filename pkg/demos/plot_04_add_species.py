"""
Growing the gallery without retraining
======================================

New species join by adding reference embeddings. The trained models stay
untouched, so the saved model files keep their exact bytes.
"""

from twoview import evalkit, metricnet
from twoview.synthbench import SynthSpec, generate

from _shared import OUT, benchmark_context

ctx = benchmark_context()
paths = [OUT / "model_a.scnn", OUT / "model_b.scnn"]
before = [metricnet.file_fingerprint(p) for p in paths]

# Two batches of 18 unseen species, each from genera the models never saw.
batches = []
for first in (6, 12):
    split, tax = generate(SynthSpec(first_genus=first))
    batches.append(evalkit.SpeciesBatch(split.train, split.test, tax))

report = evalkit.scalability_run(ctx, batches, n_r=6, k=30, model_paths=paths)
for row in report.tables["steps"]:
    new = "-" if row["acc_new"] is None else f"{row['acc_new']:.3f}"
    print(f"{row['species']:3d} species, {row['references']:3d} refs: original acc "
          f"{row['acc_original']:.3f}, new acc {new}, {1000 * row['seconds_per_query']:.1f} ms/query")
print("model files unchanged:", before == [metricnet.file_fingerprint(p) for p in paths])
evalkit.plot_scalability(report, OUT / "scalability.png")

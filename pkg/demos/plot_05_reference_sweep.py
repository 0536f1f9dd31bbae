"""
How many references, how deep a list
=====================================

Sweep the number of references per species and the stage-1 list length k,
then repeat the default setting with five different reference draws.
"""

from twoview import evalkit

from _shared import OUT, benchmark_context

ctx = benchmark_context()
sweep = evalkit.sweep_references(ctx, n_r_values=(1, 3, 6), k_values=(5, 15, 30, 50, 108))
for row in sweep.tables["grid"]:
    print(f"N_r={row['n_r']} k={row['k']:3d}: genus hit {row['stage1_hit']:.3f}, "
          f"candidates {row['mean_candidates']:.1f}, top-1 {row['acc_top1']:.3f}")
sweep.write(OUT)
evalkit.plot_sweep(sweep, OUT / "sweep.png")

stability = evalkit.stability_run(ctx, repetitions=5, n_r=6, k=30)
print("accuracy per draw:", [round(r["acc_top1"], 3) for r in stability.tables["runs"]])
print("spread:", stability.metrics["spread"])

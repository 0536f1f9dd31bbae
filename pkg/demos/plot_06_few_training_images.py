"""
Training with very few images per species
=========================================

Cap the training images per species and retrain both models. With one image
per species no positive pair exists, so that row aborts unless rotated copies
top the species up first.
"""

from twoview import evalkit
from twoview.pipeline import BENCH_STAGE_A, BENCH_STAGE_B
from twoview.synthbench import SynthSpec, generate

from _shared import OUT

split, tax = generate(SynthSpec())
plain = evalkit.unbalanced_run(split.train, split.test, tax, caps=(1, 3), stage_a=BENCH_STAGE_A,
                               stage_b=BENCH_STAGE_B)
augmented = evalkit.unbalanced_run(split.train, split.test, tax, caps=(1,), stage_a=BENCH_STAGE_A,
                                   stage_b=BENCH_STAGE_B, augment_to=3)
for label, rep in (("plain", plain), ("rotations", augmented)):
    for row in rep.tables["caps"]:
        acc = "-" if row["acc_top1"] is None else f"{row['acc_top1']:.3f}"
        print(f"{label:9s} cap={row['cap']}: {row['status']}, {row['train_images']} images, top-1 {acc}")
plain.write(OUT)

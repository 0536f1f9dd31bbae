"""
From a scanned leaf to its two views
====================================

A leaf photo becomes two model inputs: a whole-leaf global view and a central
texture patch. This script walks through each step on one synthetic leaf.
"""

import numpy as np

from twoview.dataset import write_image
from twoview.preprocess import (PreprocessConfig, bounding_box, make_views, otsu_threshold,
                                to_grayscale, tophat_filter)
from twoview.synthbench import SynthSpec, generate

from _shared import OUT

# One leaf from the synthetic benchmark: a dark leaf with a thin stem on a pale page.
split, _ = generate(SynthSpec(num_genera=1, species_per_genus=1, samples_per_species=2, test_per_species=1))
leaf = split.train[0]
print("raw image:", leaf.image.shape)

# Otsu picks the gray level that best separates leaf from background.
gray = to_grayscale(leaf.image)
t, bright = otsu_threshold(gray)
mask = ~bright
print(f"threshold {t}, leaf pixels {mask.sum()}")

# Opening with a small disk removes the stem and other thin structures.
opened = tophat_filter(mask, 3)
print("pixels removed by opening:", int(mask.sum() - opened.sum()))
print("leaf bounding box (r0, r1, c0, c1):", bounding_box(opened))

# make_views chains all of it: whiten background, crop to the leaf, resize to 224,
# then cut the local view out of the center.
for c in (32, 64, 128):
    views = make_views(leaf, PreprocessConfig(crop_size=c))
    print(f"crop {c}: global {views.global_view.shape}, local {views.local_view.shape}")

OUT.mkdir(parents=True, exist_ok=True)
views = make_views(leaf)
write_image(leaf.image, OUT / "leaf_raw.png")
write_image(views.global_view, OUT / "leaf_global.png")
write_image(views.local_view, OUT / "leaf_local.png")
write_image(np.dstack([opened.astype(np.uint8) * 255] * 3), OUT / "leaf_mask.png")
print("images written to", OUT)

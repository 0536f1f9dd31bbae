"""Procedural two-factor leaf dataset.

Genus identity lives in the silhouette (aspect, lobes, serration, ovate taper);
species identity lives in the vein/micro-texture pattern painted inside it. Two
species of one genus share the silhouette distribution exactly, so only the local
texture separates them.

Every image is seeded from ``(seed, genus, species, sample)``, so a larger spec
reproduces a smaller one as a prefix, and ``first_genus`` generates unseen genera.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .dataset import DatasetSplit, LeafSample, TaxonRecord
from .errors import ValidationError

LEAF_RGB = np.array([52.0, 102.0, 46.0])
VEIN_RGB = np.array([112.0, 160.0, 96.0])
BACKGROUND_LEVEL = 246.0

_ASPECTS = (0.34, 0.52, 0.72, 0.95)
_LOBES = (0, 3, 5, 7)
_SERRATION = (0.0, 0.06)
_OVATE = (0.0, 0.35)
SILHOUETTES = [dict(aspect=a, lobes=n, serration=s, ovate=o)
               for a, n, s, o in itertools.product(_ASPECTS, _LOBES, _SERRATION, _OVATE)]
_SILHOUETTE_ORDER = np.random.default_rng(20211).permutation(len(SILHOUETTES))

_VEIN_ANGLES = (25.0, 45.0, 65.0)
_VEIN_SPACINGS = (0.055, 0.085, 0.125)
_MICRO = ((0.0, 22.0), (90.0, 22.0), (45.0, 34.0), (135.0, 34.0))


def _texture_bank():
    bank = []
    for p in range(len(_VEIN_ANGLES) * len(_VEIN_SPACINGS) * len(_MICRO)):
        a = p % 3
        s = (a + p // 3) % 3
        m = (p // 9) % 4
        bank.append(dict(vein_angle=_VEIN_ANGLES[a], vein_spacing=_VEIN_SPACINGS[s],
                         micro_orient=_MICRO[m][0], micro_freq=_MICRO[m][1]))
    return bank


TEXTURES = _texture_bank()


@dataclass(frozen=True)
class SynthSpec:
    num_genera: int = 6
    species_per_genus: int = 3
    samples_per_species: int = 21
    test_per_species: int = 15
    image_size: int = 192
    shape_noise: float = 1.0
    texture_noise: float = 1.0
    seed: int = 0
    first_genus: int = 0
    genera_per_family: int = 2

    def __post_init__(self):
        for name in ("num_genera", "species_per_genus", "samples_per_species", "genera_per_family"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if not 0 <= self.test_per_species < self.samples_per_species:
            raise ValidationError("need 0 <= test_per_species < samples_per_species")
        if self.shape_noise < 0 or self.texture_noise < 0:
            raise ValidationError("noise levels must be >= 0")
        if self.image_size < 32:
            raise ValidationError("image_size must be >= 32")
        if self.species_per_genus > len(TEXTURES):
            raise ValidationError(
                f"species_per_genus={self.species_per_genus} exceeds the {len(TEXTURES)} texture patterns")
        if self.first_genus < 0 or self.first_genus + self.num_genera > len(SILHOUETTES):
            raise ValidationError(f"at most {len(SILHOUETTES)} distinct genus silhouettes available")


def genus_id(g: int) -> str:
    return f"G{g:02d}"


def species_id(g: int, j: int) -> str:
    return f"G{g:02d}S{j:02d}"


def silhouette_params(g: int) -> dict:
    return SILHOUETTES[_SILHOUETTE_ORDER[g]]


def texture_params(g: int, j: int, species_per_genus: int) -> dict:
    return TEXTURES[(g * species_per_genus + j) % len(TEXTURES)]


def _radius_limit(un, vn, aspect, lobes, lobe_amp, serration, ovate):
    """Normalized leaf boundary test: returns rho / boundary (<= 1 inside)."""
    vt = np.where(vn >= 0, vn / (1.0 - ovate * 0.5), vn / (1.0 + ovate * 0.5))
    rho = np.sqrt((un / aspect) ** 2 + vt ** 2)
    phi = np.arctan2(un, vn)
    bound = np.ones_like(rho)
    if lobes:
        bound = bound + lobe_amp * np.cos(lobes * phi)
    if serration:
        teeth = (24 * phi / (2 * np.pi)) % 1.0
        bound = bound + serration * (2.0 * teeth - 1.0)
    return rho / bound


def render_leaf(size: int, shape: dict, texture: dict, rng: np.random.Generator,
                shape_noise: float, texture_noise: float, with_stem: bool = True):
    """Render one leaf; returns (RGB uint8 image, boolean leaf mask without stem)."""
    u1 = lambda: rng.uniform(-1.0, 1.0)  # noqa: E731
    angle = np.deg2rad(15.0 * shape_noise * u1())
    scale = 1.0 + 0.10 * shape_noise * u1()
    aspect = shape["aspect"] * (1.0 + 0.08 * shape_noise * u1())
    lobe_amp = 0.16 + 0.03 * shape_noise * u1()
    cx = size / 2 + 0.04 * size * shape_noise * u1()
    cy = size / 2 + 0.04 * size * shape_noise * u1()
    vein_angle = np.deg2rad(texture["vein_angle"] + 4.0 * texture_noise * u1())
    spacing = texture["vein_spacing"] * (1.0 + 0.08 * texture_noise * u1())
    vein_phase = texture_noise * rng.uniform(0.0, 1.0)
    micro_phase = texture_noise * rng.uniform(0.0, 2 * np.pi)
    brightness = 8.0 * texture_noise * u1()

    radius = 0.36 * size * scale
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, cy - yy
    u = dx * np.cos(angle) - dy * np.sin(angle)
    v = dx * np.sin(angle) + dy * np.cos(angle)
    un, vn = u / radius, v / radius

    inside = _radius_limit(un, vn, aspect, shape["lobes"], lobe_amp, shape["serration"], shape["ovate"]) <= 1.0
    stem = np.zeros_like(inside)
    if with_stem:
        stem = (np.abs(u) <= 1.0) & (vn <= -0.5) & (vn >= -1.45) & ~inside

    # lateral veins run at vein_angle to the midrib, mirrored across it
    q = np.abs(un) * np.cos(vein_angle) - vn * np.sin(vein_angle)
    frac = (q / spacing + vein_phase) % 1.0
    dist = np.minimum(frac, 1.0 - frac) * spacing
    vein = np.clip(1.0 - dist / 0.012, 0.0, 1.0)
    vein = np.maximum(vein, np.clip(1.0 - np.abs(un) / 0.02, 0.0, 1.0))
    mo = np.deg2rad(texture["micro_orient"])
    micro = 10.0 * np.sin(2 * np.pi * texture["micro_freq"] * (un * np.cos(mo) + vn * np.sin(mo)) + micro_phase)

    leaf = LEAF_RGB[None, None, :] * (1 - vein[..., None]) + VEIN_RGB[None, None, :] * vein[..., None]
    leaf = leaf + (micro + brightness)[..., None]
    img = np.full((size, size, 3), BACKGROUND_LEVEL)
    img[inside] = leaf[inside]
    img[stem] = LEAF_RGB
    if texture_noise > 0:
        img = img + rng.normal(0.0, 5.0 * texture_noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), inside


def generate(spec: SynthSpec = SynthSpec()) -> tuple[DatasetSplit, list[TaxonRecord]]:
    taxonomy = []
    train, test = [], []
    n_train = spec.samples_per_species - spec.test_per_species
    for g in range(spec.first_genus, spec.first_genus + spec.num_genera):
        shape = silhouette_params(g)
        fam = f"F{g // spec.genera_per_family:02d}"
        for j in range(spec.species_per_genus):
            sid = species_id(g, j)
            taxonomy.append(TaxonRecord(sid, genus_id(g), fam, f"Synthetica {g}-{j}"))
            tex = texture_params(g, j, spec.species_per_genus)
            for n in range(spec.samples_per_species):
                rng = np.random.default_rng([spec.seed, g, j, n])
                img, _ = render_leaf(spec.image_size, shape, tex, rng, spec.shape_noise, spec.texture_noise)
                sample = LeafSample(f"{sid}_{n:03d}", img, sid)
                (train if n < n_train else test).append(sample)
    return DatasetSplit(train, test, taxonomy), taxonomy


def silhouette_mask(spec: SynthSpec, g: int, j: int, n: int) -> np.ndarray:
    """Ground-truth leaf mask (no stem) of one generated sample."""
    rng = np.random.default_rng([spec.seed, g, j, n])
    _, mask = render_leaf(spec.image_size, silhouette_params(g),
                          texture_params(g, j, spec.species_per_genus), rng,
                          spec.shape_noise, spec.texture_noise)
    return mask


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0

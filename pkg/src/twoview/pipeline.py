"""Glue for training the two stage models from labeled samples."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

from . import metricnet
from .dataset import LeafSample, Taxonomy
from .pairgen import PairSet, PairSpec, generate_pairs
from .preprocess import PreprocessConfig, ViewPair, make_views

log = logging.getLogger(__name__)

# (grouping, view) of the two stage models
STAGES = {"genus": ("genus", "global"), "species": ("species", "local")}


@dataclass(frozen=True)
class StageConfig:
    grouping: str = "genus"
    view: str = "global"
    positive_count: int = 400
    negative_count: int = 600
    train: metricnet.TrainConfig = field(default_factory=metricnet.TrainConfig)
    embedding_dim: int | None = None
    backbone_kwargs: dict | None = None

    @classmethod
    def for_stage(cls, stage: str, **kw) -> "StageConfig":
        grouping, view = STAGES[stage]
        return cls(grouping=grouping, view=view, **kw)


# Settings used for the desk-scale synthetic benchmark. Training from scratch needs a
# larger learning rate than the fine-tuning default of TrainConfig.
BENCH_TRAIN = metricnet.TrainConfig(num_epochs=20, batch_size=32, learning_rate=0.05, momentum=0.9)
BENCH_STAGE_A = StageConfig("genus", "global", 400, 600, BENCH_TRAIN)
BENCH_STAGE_B = StageConfig("species", "local", 270, 405, BENCH_TRAIN)


@dataclass
class StageResult:
    model: metricnet.SiameseModel
    loss_trace: list[float]
    pairs: PairSet


def compute_views(samples: Sequence[LeafSample], preprocess: PreprocessConfig = PreprocessConfig(),
                  cache: dict[str, ViewPair] | None = None) -> dict[str, ViewPair]:
    out = cache if cache is not None else {}
    for s in samples:
        if s.sample_id not in out:
            out[s.sample_id] = make_views(s, preprocess)
    return out


def train_stage(train: Sequence[LeafSample], taxonomy, config: StageConfig,
                preprocess: PreprocessConfig = PreprocessConfig(),
                views: Mapping[str, ViewPair] | None = None, seed: int = 0) -> StageResult:
    tax = taxonomy if isinstance(taxonomy, Taxonomy) else Taxonomy(taxonomy)
    views = compute_views(train, preprocess, dict(views) if views is not None else None)
    spec = PairSpec(grouping=config.grouping, view=config.view, positive_count=config.positive_count,
                    negative_count=config.negative_count, seed=seed)
    pairs = generate_pairs(train, tax, spec)
    images = {s.sample_id: views[s.sample_id].view(config.view) for s in train}
    mean = metricnet.fit_channel_mean(list(images.values()))
    shape = next(iter(images.values())).shape
    model = metricnet.SiameseModel(shape, config.view, config.grouping,
                                   config.train.backbone_id, embedding_dim=config.embedding_dim,
                                   seed=seed, channel_mean=mean, backbone_kwargs=config.backbone_kwargs)
    tcfg = replace(config.train, seed=seed)
    model, trace = metricnet.train(model, pairs.pairs, images, tcfg)
    return StageResult(model, trace, pairs)

"""Siamese similarity model.

Two weight-shared embedding towers (one backbone instance used twice), merged by
the component-wise L1 vector, then a learned linear layer and a logistic squash:

    d_w = logistic(w . |f_l - f_r| + b)

trained with binary cross-entropy on labeled pairs.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .errors import FormatError, MissingFileError, TrainingDiverged, ValidationError
from .pairgen import TrainingPair, batch_iterator

log = logging.getLogger(__name__)

MAGIC = b"SCNN"
HEAD_INIT_GAIN = 8.0
FORMAT_VERSION = 1
_EPS_HI = np.nextafter(1.0, 0.0)
_EPS_LO = np.nextafter(0.0, 1.0)


# --------------------------------------------------------------------------- backbones

class SmallConvBackbone(nn.Module):
    """Four conv/ReLU/max-pool blocks, spatial mean pool, linear projection to M.

    Inputs larger than 64 px are average-pooled down to <= 64 px first.
    """

    first_layer = "blocks.0.weight"

    def __init__(self, input_shape, embedding_dim=256, channels=(16, 32, 64, 64), pool=1):
        super().__init__()
        h = input_shape[0]
        self.stem_factor = max(1, math.ceil(h / 64))
        self.stem = nn.AvgPool2d(self.stem_factor) if self.stem_factor > 1 else nn.Identity()
        layers = []
        c_in = 3
        for c_out in channels:
            layers += [nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            c_in = c_out
        self.blocks = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(pool)
        self.fc = nn.Linear(c_in * pool * pool, embedding_dim)
        self.embedding_dim = embedding_dim

    def forward(self, x):
        x = self.blocks(self.stem(x))
        return self.fc(torch.flatten(self.pool(x), 1))


class ToyBackbone(nn.Module):
    """Flatten -> Linear -> tanh -> Linear. Smooth, for gradient checks."""

    first_layer = "layer1.weight"

    def __init__(self, input_shape, embedding_dim=8, hidden=16):
        super().__init__()
        d = int(np.prod(input_shape))
        self.layer1 = nn.Linear(d, hidden)
        self.layer2 = nn.Linear(hidden, embedding_dim)
        self.embedding_dim = embedding_dim

    def forward(self, x):
        return self.layer2(torch.tanh(self.layer1(torch.flatten(x, 1))))


class VGG16Backbone(nn.Module):
    """torchvision VGG16 up to fc7 (M = 4096); blocks 1-3 frozen."""

    first_layer = "net.features.0.weight"
    frozen_prefixes = tuple(f"net.features.{i}." for i in range(17))

    def __init__(self, input_shape, embedding_dim=4096, pretrained=False):
        super().__init__()
        import torchvision

        weights = torchvision.models.VGG16_Weights.IMAGENET1K_V1 if pretrained else None
        net = torchvision.models.vgg16(weights=weights)
        net.classifier = net.classifier[:-1]
        self.net = net
        self.embedding_dim = 4096
        for name, p in self.named_parameters():
            if name.startswith(self.frozen_prefixes):
                p.requires_grad_(False)

    def forward(self, x):
        return self.net(x)


BACKBONES = {"small4": SmallConvBackbone, "toy2": ToyBackbone, "vgg16": VGG16Backbone}


# --------------------------------------------------------------------------- model

class SiameseModel(nn.Module):
    def __init__(self, input_shape, view_tag="global", grouping_tag="genus", backbone_id="small4",
                 embedding_dim=None, seed=0, channel_mean=(0.0, 0.0, 0.0), backbone_kwargs=None):
        super().__init__()
        if view_tag not in ("global", "local"):
            raise ValidationError(f"view_tag must be global/local, got {view_tag!r}")
        if grouping_tag not in ("genus", "species", "family"):
            raise ValidationError(f"unknown grouping_tag {grouping_tag!r}")
        if backbone_id not in BACKBONES:
            raise ValidationError(f"unknown backbone {backbone_id!r}; known: {sorted(BACKBONES)}")
        self.input_shape = tuple(int(v) for v in input_shape)
        if len(self.input_shape) != 3 or self.input_shape[2] != 3:
            raise ValidationError(f"input_shape must be (H, W, 3), got {input_shape}")
        self.view_tag = view_tag
        self.grouping_tag = grouping_tag
        self.backbone_id = backbone_id
        self.backbone_kwargs = dict(backbone_kwargs or {})
        kwargs = dict(self.backbone_kwargs)
        if embedding_dim is not None:
            kwargs["embedding_dim"] = int(embedding_dim)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.backbone = BACKBONES[backbone_id](self.input_shape, **kwargs)
            self.head = nn.Linear(self.backbone.embedding_dim, 1)
            with torch.no_grad():
                # negative weights: similarity starts out decreasing in distance; the
                # gain avoids a long flat start of training at near-zero logits
                self.head.weight.copy_(-HEAD_INIT_GAIN * self.head.weight.abs())
                self.head.bias.zero_()
        self.backbone_kwargs = kwargs
        self.register_buffer("channel_mean", torch.tensor(channel_mean, dtype=torch.float32))
        self.eval()

    @property
    def embedding_dim(self) -> int:
        return self.backbone.embedding_dim

    def _prepare(self, images) -> torch.Tensor:
        arr = np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        if tuple(arr.shape[1:]) != self.input_shape:
            raise ValidationError(f"image shape {arr.shape[1:]} != model input_shape {self.input_shape}")
        dtype = self.channel_mean.dtype
        x = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).to(dtype) / 255.0
        return x - self.channel_mean.view(1, 3, 1, 1)

    def embed_tensor(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def logits(self, emb_l: torch.Tensor, emb_r: torch.Tensor) -> torch.Tensor:
        return self.head(torch.abs(emb_l - emb_r)).squeeze(-1)

    def forward(self, left, right):
        return torch.sigmoid(self.logits(self.embed_tensor(left), self.embed_tensor(right)))

    def calibration(self) -> tuple[np.ndarray, float]:
        w = self.head.weight.detach().to(torch.float64).numpy().ravel().copy()
        return w, float(self.head.bias.detach().to(torch.float64).item())

    def metadata(self) -> dict:
        return {"view_tag": self.view_tag, "grouping_tag": self.grouping_tag,
                "input_shape": list(self.input_shape), "M": self.embedding_dim,
                "backbone_id": self.backbone_id, "backbone_kwargs": self.backbone_kwargs}

    def fingerprint(self) -> str:
        return hashlib.sha256(to_bytes(self)).hexdigest()


def fit_channel_mean(images: Sequence[np.ndarray]) -> tuple[float, float, float]:
    """Per-channel mean in [0, 1] over a set of uint8 images."""
    acc = np.zeros(3)
    n = 0
    for img in images:
        acc += np.asarray(img, dtype=np.float64).reshape(-1, 3).sum(axis=0) / 255.0
        n += img.shape[0] * img.shape[1]
    if n == 0:
        raise ValidationError("no images to compute channel mean from")
    return tuple(float(v) for v in acc / n)


# --------------------------------------------------------------------------- inference

@torch.no_grad()
def embed(model: SiameseModel, image: np.ndarray) -> np.ndarray:
    model.eval()
    return model.embed_tensor(model._prepare(image))[0].numpy().astype(np.float32)


@torch.no_grad()
def embed_many(model: SiameseModel, images: Sequence[np.ndarray]) -> np.ndarray:
    """Embeddings of many images; each is computed alone so results match ``embed`` bit for bit."""
    out = np.empty((len(images), model.embedding_dim), dtype=np.float32)
    for i, img in enumerate(images):
        out[i] = embed(model, img)
    return out


def l1_vector(f_l, f_r) -> np.ndarray:
    f_l = np.asarray(f_l, dtype=np.float64)
    f_r = np.asarray(f_r, dtype=np.float64)
    if f_l.shape != f_r.shape:
        raise ValidationError(f"length mismatch: {f_l.shape} vs {f_r.shape}")
    return np.abs(f_l - f_r)


def l1_distance(f_l, f_r) -> float:
    """Scalar L1 distance (sum of the L1 vector); diagnostic only."""
    return float(l1_vector(f_l, f_r).sum())


def logistic(z):
    z = np.asarray(z, dtype=np.float64)
    with np.errstate(over="ignore"):
        d = 1.0 / (1.0 + np.exp(-z))
    return np.clip(d, _EPS_LO, _EPS_HI)


def head_scores(model: SiameseModel, query: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Similarity of one embedding against each row of ``refs`` (float64)."""
    w, b = model.calibration()
    refs = np.atleast_2d(np.asarray(refs, dtype=np.float64))
    q = np.asarray(query, dtype=np.float64)
    if refs.shape[1] != w.size or q.shape != (w.size,):
        raise ValidationError(f"embedding length mismatch: model M={w.size}")
    z = (np.abs(refs - q) * w).sum(axis=1) + b
    return logistic(z)


def similarity(model: SiameseModel, image_a: np.ndarray, image_b: np.ndarray) -> float:
    return float(head_scores(model, embed(model, image_a), embed(model, image_b)[None])[0])


def pair_loss(d_w: float, y: int) -> float:
    if not 0.0 < d_w < 1.0:
        raise ValidationError(f"d_w must lie in (0, 1), got {d_w}")
    if y not in (0, 1):
        raise ValidationError(f"label must be 0 or 1, got {y}")
    return -(y * math.log(d_w) + (1 - y) * math.log(1.0 - d_w))


# --------------------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    num_epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.001
    momentum: float = 0.9
    seed: int = 0
    backbone_id: str = "small4"
    lr_decay: float = 0.5
    decay_every: int = 512

    def __post_init__(self):
        if self.num_epochs < 0 or self.batch_size < 1 or self.decay_every < 1:
            raise ValidationError("num_epochs >= 0, batch_size >= 1, decay_every >= 1 required")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ValidationError("learning_rate >= 0 and momentum in [0, 1) required")


def train(model: SiameseModel, pairs: Sequence[TrainingPair], images: Mapping[str, np.ndarray],
          config: TrainConfig = TrainConfig()) -> tuple[SiameseModel, list[float]]:
    """Return a trained copy of ``model`` and the per-epoch mean loss."""
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("no training pairs")
    ids = sorted({p.left for p in pairs} | {p.right for p in pairs})
    missing = [i for i in ids if i not in images]
    if missing:
        raise ValidationError(f"no image for sample ids {missing[:5]}")
    model = copy.deepcopy(model)
    if config.num_epochs == 0:
        return model, []
    row = {sid: k for k, sid in enumerate(ids)}
    data = model._prepare(np.stack([images[i] for i in ids]))
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
    bce = nn.BCEWithLogitsLoss(reduction="sum")
    trace = []
    step = 0
    model.train()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        for epoch in range(config.num_epochs):
            total = 0.0
            for bi, batch in enumerate(batch_iterator(pairs, config.batch_size, config.seed, epoch)):
                lr = config.learning_rate * config.lr_decay ** (step // config.decay_every)
                for g in opt.param_groups:
                    g["lr"] = lr
                used = sorted({row[p.left] for p in batch} | {row[p.right] for p in batch})
                local = {r: k for k, r in enumerate(used)}
                emb = model.embed_tensor(data[used])
                li = torch.tensor([local[row[p.left]] for p in batch])
                ri = torch.tensor([local[row[p.right]] for p in batch])
                y = torch.tensor([float(p.label) for p in batch], dtype=emb.dtype)
                loss = bce(model.logits(emb[li], emb[ri]), y)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, batch {bi + 1}")
                opt.zero_grad()
                (loss / len(batch)).backward()
                opt.step()
                total += loss.item()
                step += 1
            trace.append(total / len(pairs))
            log.info("epoch %d/%d mean loss %.5f", epoch + 1, config.num_epochs, trace[-1])
    model.eval()
    return model, trace


def write_loss_trace(trace: Sequence[float], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(trace, start=1):
            w.writerow([i, repr(float(v))])


# --------------------------------------------------------------------------- gradient check

def _explicit_loss(model, left, right, y):
    emb = model.embed_tensor(torch.cat([left, right]))
    d = torch.sigmoid(model.logits(emb[:1], emb[1:]))[0]
    return -(y * torch.log(d) + (1 - y) * torch.log(1 - d))


def gradient_check(model: SiameseModel, pair: tuple[np.ndarray, np.ndarray, int],
                   epsilon: float = 1e-4, target: str = "head_w", max_entries: int = 64,
                   seed: int = 0) -> float:
    """Max relative deviation between autograd and central finite differences.

    ``target`` is ``head_w``, ``head_b`` or ``backbone_first``. Runs on a float64
    copy; at most ``max_entries`` entries of the target tensor are probed.
    Relative error per entry is |a - n| / max(|a|, |n|, 1e-6 * scale), with scale the
    largest gradient magnitude in the tensor.
    """
    m = copy.deepcopy(model).double()
    m.eval()
    left, right, y = pair
    xl, xr = m._prepare(left), m._prepare(right)
    names = {"head_w": "head.weight", "head_b": "head.bias",
             "backbone_first": "backbone." + m.backbone.first_layer}
    if target not in names:
        raise ValueError(f"unknown target {target!r}")
    p = dict(m.named_parameters())[names[target]]
    p.requires_grad_(True)
    m.zero_grad()
    _explicit_loss(m, xl, xr, float(y)).backward()
    analytic = p.grad.detach().clone().ravel()
    flat = p.data.view(-1)
    n = flat.numel()
    rng = np.random.default_rng(seed)
    probe = np.arange(n) if n <= max_entries else np.sort(rng.choice(n, max_entries, replace=False))
    numeric = torch.empty(len(probe), dtype=torch.float64)
    with torch.no_grad():
        for k, idx in enumerate(probe):
            orig = flat[idx].item()
            flat[idx] = orig + epsilon
            up = _explicit_loss(m, xl, xr, float(y)).item()
            flat[idx] = orig - epsilon
            down = _explicit_loss(m, xl, xr, float(y)).item()
            flat[idx] = orig
            numeric[k] = (up - down) / (2 * epsilon)
    a = analytic[torch.as_tensor(probe)]
    scale = max(a.abs().max().item(), numeric.abs().max().item())
    denom = torch.maximum(torch.maximum(a.abs(), numeric.abs()), torch.tensor(1e-6 * scale + 1e-300))
    return float(((a - numeric).abs() / denom).max().item())


# --------------------------------------------------------------------------- persistence

def _tensors(model):
    return list(model.state_dict().items())


def to_bytes(model: SiameseModel) -> bytes:
    """``SCNN`` | u32 version | u32 meta length | meta JSON | float32 LE tensors in meta order."""
    tensors = _tensors(model)
    meta = model.metadata()
    meta["tensors"] = [[name, list(t.shape)] for name, t in tensors]
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta_bytes)), meta_bytes]
    for _, t in tensors:
        parts.append(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return b"".join(parts)


def from_bytes(blob: bytes) -> SiameseModel:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise FormatError("not a model file (bad magic)")
    version, meta_len = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {version}")
    if len(blob) < 12 + meta_len:
        raise FormatError("truncated model file (metadata)")
    try:
        meta = json.loads(blob[12:12 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt model metadata: {exc}") from exc
    kwargs = dict(meta.get("backbone_kwargs", {}))
    kwargs.pop("embedding_dim", None)
    model = SiameseModel(meta["input_shape"], meta["view_tag"], meta["grouping_tag"],
                         meta["backbone_id"], embedding_dim=meta["M"], backbone_kwargs=kwargs)
    offset = 12 + meta_len
    state = {}
    for name, shape in meta["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob):
            raise FormatError(f"truncated model file at tensor {name}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32))
        offset = end
    if offset != len(blob):
        raise FormatError("trailing bytes in model file")
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise FormatError(f"model tensors do not match architecture: {exc}") from exc
    model.eval()
    return model


def save(model: SiameseModel, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load(path) -> SiameseModel:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"model file not found: {path}")
    return from_bytes(path.read_bytes())


def file_fingerprint(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

"""Dual encoder that scores region proposals against a command.

Each proposal is cropped from the image, resized and fed through a
convolutional backbone; the command goes through a bidirectional GRU. Both are
projected into a shared space, L2-normalized, and their cosine is mapped
affinely from [-1, 1] onto [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn
from torchvision.ops import roi_align

from c4av.dataset import Sample, Vocabulary
from c4av.geometry import Box

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
PARAMS_FILE = "params.pt"
META_FILE = "meta.json"


class CheckpointError(Exception):
    pass


@dataclass
class ModelConfig:
    embed_dim: int = 512
    word_embed_dim: int = 128
    rnn_hidden: int = 256
    vocab_size: int = 2
    k: int = 16
    max_len: int = 40
    crop_size: int = 224
    backbone: str = "resnet18"
    pretrained: bool = True
    freeze_backbone: bool = False
    tiny_width: int = 16
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self) -> None:
        if self.embed_dim <= 0 or self.k < 1 or self.crop_size <= 0 or self.vocab_size < 2:
            raise ValueError(f"invalid model config: {self}")
        self.mean = tuple(float(m) for m in self.mean)
        self.std = tuple(float(s) for s in self.std)

    @classmethod
    def tiny(cls, vocab_size: int, **overrides) -> "ModelConfig":
        """CPU-sized config used for synthetic data and tests."""
        base = dict(embed_dim=64, word_embed_dim=32, rnn_hidden=64, vocab_size=vocab_size,
                    crop_size=32, backbone="tiny", pretrained=False, tiny_width=32)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class ScoredRegion:
    box: Box
    score: float


class TinyBackbone(nn.Module):
    """Three conv blocks, then a 4x4 average pool flattened so layout survives."""

    def __init__(self, width: int = 16, grid: int = 4):
        super().__init__()

        def block(cin, cout):
            return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False),
                                 nn.BatchNorm2d(cout), nn.ReLU(inplace=True))

        self.features = nn.Sequential(
            block(3, width), nn.MaxPool2d(2),
            block(width, 2 * width), nn.MaxPool2d(2),
            block(2 * width, 4 * width),
        )
        self.pool = nn.AdaptiveAvgPool2d(grid)
        self.out_features = 4 * width * grid * grid

    def forward(self, x):
        return self.pool(self.features(x)).flatten(1)


class ResNetBackbone(nn.Module):
    def __init__(self, pretrained: bool):
        super().__init__()
        from torchvision.models import ResNet18_Weights, resnet18

        net = resnet18(weights=ResNet18_Weights.IMAGENET1K_V1 if pretrained else None)
        net.fc = nn.Identity()
        self.net = net
        self.out_features = 512

    def forward(self, x):
        return self.net(x)


def build_backbone(config: ModelConfig) -> nn.Module:
    if config.backbone == "tiny":
        return TinyBackbone(config.tiny_width)
    if config.backbone == "resnet18":
        return ResNetBackbone(config.pretrained)
    raise ValueError(f"unknown backbone {config.backbone!r}")


def cosine_to_score(cosine: torch.Tensor) -> torch.Tensor:
    return ((cosine + 1.0) / 2.0).clamp(0.0, 1.0)


def score(regions: torch.Tensor, command: torch.Tensor) -> torch.Tensor:
    """Scores in [0, 1] for unit rows ``regions`` (..., k, D) against ``command`` (..., D)."""
    if regions.shape[-1] != command.shape[-1]:
        raise ValueError(f"dimension mismatch: regions {tuple(regions.shape)} vs command {tuple(command.shape)}")
    return cosine_to_score(torch.einsum("...kd,...d->...k", regions, command))


class GroundingModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = build_backbone(config)
        if config.freeze_backbone:
            for p in self.backbone.parameters():
                p.requires_grad_(False)
        self.region_proj = nn.Linear(self.backbone.out_features, config.embed_dim)
        self.embedding = nn.Embedding(config.vocab_size, config.word_embed_dim, padding_idx=0)
        self.gru = nn.GRU(config.word_embed_dim, config.rnn_hidden, batch_first=True, bidirectional=True)
        self.command_proj = nn.Linear(2 * config.rnn_hidden, config.embed_dim)

    def encode_regions(self, crops: torch.Tensor) -> torch.Tensor:
        """(N, 3, c, c) normalized crops -> (N, D) unit embeddings."""
        return F.normalize(self.region_proj(self.backbone(crops)), dim=-1)

    def encode_command(self, token_ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """(B, L) ids with (B,) valid lengths -> (B, D) unit embeddings.

        Positions at or beyond ``lengths`` never reach the GRU.
        """
        lengths = torch.as_tensor(lengths, dtype=torch.long).cpu()
        if (lengths < 1).any():
            raise ValueError("command length must be >= 1")
        if (lengths > token_ids.shape[1]).any():
            raise ValueError("command length exceeds token sequence")
        emb = self.embedding(token_ids)
        packed = nn.utils.rnn.pack_padded_sequence(emb, lengths, batch_first=True, enforce_sorted=False)
        _, h_n = self.gru(packed)
        summary = torch.cat([h_n[0], h_n[1]], dim=-1)
        return F.normalize(self.command_proj(summary), dim=-1)

    def forward(self, crops: torch.Tensor, mask: torch.Tensor, token_ids: torch.Tensor,
                lengths: torch.Tensor) -> torch.Tensor:
        """Scores (B, k); padded slots (``mask`` False) score 0.5 and must be masked by the caller."""
        b, k = mask.shape
        regions = crops.new_zeros(b, k, self.config.embed_dim)
        regions[mask] = self.encode_regions(crops[mask])
        command = self.encode_command(token_ids, lengths)
        return score(regions, command)


@lru_cache(maxsize=256)
def load_image(path: str) -> torch.Tensor:
    """RGB image as float (3, H, W) in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def crop_regions(image: torch.Tensor, boxes: Sequence[Box], config: ModelConfig) -> torch.Tensor:
    """Clamp, crop and bilinearly resize each box; returns normalized (n, 3, c, c)."""
    _, h, w = image.shape
    coords = []
    for i, box in enumerate(boxes):
        clamped = box.clamp(w, h)
        if clamped.w <= 0 or clamped.h <= 0:
            raise ValueError(f"box {i} has zero area after clamping: {box}")
        coords.append([0.0, *clamped.to_xyxy()])
    rois = torch.tensor(coords, dtype=image.dtype).reshape(-1, 5)
    crops = roi_align(image[None], rois, output_size=config.crop_size, spatial_scale=1.0,
                      sampling_ratio=2, aligned=True)
    mean = torch.tensor(config.mean, dtype=image.dtype).view(1, 3, 1, 1)
    std = torch.tensor(config.std, dtype=image.dtype).view(1, 3, 1, 1)
    return (crops - mean) / std


def sample_crops(sample: Sample, config: ModelConfig) -> torch.Tensor:
    if sample.image_path is None:
        raise ValueError(f"sample {sample.command.id} has no image path")
    return crop_regions(load_image(str(sample.image_path)), sample.boxes, config)


def collate(samples: Sequence[Sample], config: ModelConfig, crops: Sequence[torch.Tensor] | None = None):
    """Pad a list of samples into (crops, mask, token_ids, lengths) tensors."""
    if crops is None:
        crops = [sample_crops(s, config) for s in samples]
    k = max(max(len(s.proposals) for s in samples), 1)
    c = config.crop_size
    batch = torch.zeros(len(samples), k, 3, c, c)
    mask = torch.zeros(len(samples), k, dtype=torch.bool)
    for i, (s, cr) in enumerate(zip(samples, crops)):
        n = len(s.proposals)
        if n == 0:
            raise ValueError(f"sample {s.command.id} has no proposals")
        batch[i, :n] = cr
        mask[i, :n] = True
    ids = torch.tensor([s.token_ids for s in samples], dtype=torch.long)
    lengths = torch.tensor([s.token_length for s in samples], dtype=torch.long)
    return batch, mask, ids, lengths


@torch.no_grad()
def forward(model: GroundingModel, sample: Sample) -> list[ScoredRegion]:
    """Score every proposal of one sample, in proposal order."""
    if not sample.proposals:
        raise ValueError(f"sample {sample.command.id} has no proposals")
    device = next(model.parameters()).device
    was_training = model.training
    model.eval()
    try:
        batch, mask, ids, lengths = collate([sample], model.config)
        scores = model(batch.to(device), mask.to(device), ids.to(device), lengths)[0].cpu()
    finally:
        model.train(was_training)
    return [ScoredRegion(p.box, float(s)) for p, s in zip(sample.proposals, scores)]


def save_checkpoint(directory: str | Path, model: GroundingModel, vocab: Vocabulary,
                    epoch: int, metrics: dict | None = None) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out / PARAMS_FILE)
    cfg = asdict(model.config)
    meta = {
        "config": cfg,
        "vocab_size": len(vocab),
        "epoch": epoch,
        "metrics": metrics or {},
        "vocab": vocab.tokens(),
        "normalization": {"mean": list(cfg["mean"]), "std": list(cfg["std"])},
    }
    with (out / META_FILE).open("w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
    return out


def load_checkpoint(directory: str | Path) -> tuple[GroundingModel, Vocabulary, dict]:
    path = Path(directory)
    meta_path = path / META_FILE
    if not meta_path.is_file():
        raise CheckpointError(f"missing checkpoint metadata: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed {meta_path}: {exc}") from exc
    for key in ("config", "vocab_size", "epoch", "metrics", "vocab"):
        if key not in meta:
            raise CheckpointError(f"checkpoint meta.json missing field {key!r}")
    cfg = dict(meta["config"])
    cfg["pretrained"] = False
    try:
        config = ModelConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"bad config in {meta_path}: {exc}") from exc
    vocab = Vocabulary.from_tokens(meta["vocab"])
    if len(vocab) != meta["vocab_size"] or config.vocab_size != len(vocab):
        raise CheckpointError(f"vocab_size mismatch in {meta_path}")
    model = GroundingModel(config)
    params = path / PARAMS_FILE
    if not params.is_file():
        raise CheckpointError(f"missing checkpoint parameters: {params}")
    model.load_state_dict(torch.load(params, map_location="cpu", weights_only=True))
    model.config = ModelConfig.from_dict(meta["config"])
    model.eval()
    return model, vocab, meta

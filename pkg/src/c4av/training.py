"""Balanced binary cross-entropy, step schedule, SGD loop and checkpointing."""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from c4av.dataset import Sample, Vocabulary
from c4av.evaluation import evaluate, predict_all
from c4av.model import GroundingModel, ModelConfig, collate, sample_crops, save_checkpoint

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 18
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 4
    seed: int = 0
    clamp_eps: float = 1e-7
    literal_entropy: bool = False
    cache_crops: bool = True
    deterministic: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("base_lr", "batch_size", "lr_decay_factor", "lr_decay_every", "clamp_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")


@dataclass
class LossBreakdown:
    total: float
    positive_term: float
    negative_term: float
    num_pos: int
    num_neg: int


def balanced_bce_terms(scores: torch.Tensor, positive: torch.Tensor, valid: torch.Tensor | None = None,
                       clamp_eps: float = 1e-7, literal_entropy: bool = False):
    """Per-sample positive and negative terms for (..., k) scores.

    Each term is averaged over its own set; an empty set contributes 0.
    ``literal_entropy`` swaps in the ``x log x`` form for auditing.
    """
    if valid is None:
        valid = torch.ones_like(positive, dtype=torch.bool)
    pos = (positive & valid).to(scores.dtype)
    neg = (~positive & valid).to(scores.dtype)
    p = scores.clamp_min(clamp_eps)
    q = (1.0 - scores).clamp_min(clamp_eps)
    if literal_entropy:
        pos_elem, neg_elem = -scores * torch.log(p), -(1.0 - scores) * torch.log(q)
    else:
        pos_elem, neg_elem = -torch.log(p), -torch.log(q)
    n_pos = pos.sum(-1)
    n_neg = neg.sum(-1)
    pos_term = (pos_elem * pos).sum(-1) / n_pos.clamp_min(1)
    neg_term = (neg_elem * neg).sum(-1) / n_neg.clamp_min(1)
    return pos_term, neg_term, n_pos, n_neg


def balanced_bce(scores: Sequence[float], labels: Sequence[bool], clamp_eps: float = 1e-7,
                 literal_entropy: bool = False) -> LossBreakdown:
    if len(scores) != len(labels):
        raise ValueError(f"{len(scores)} scores but {len(labels)} labels")
    s = torch.tensor(list(scores), dtype=torch.float64)
    lab = torch.tensor(list(labels), dtype=torch.bool)
    pt, nt, npos, nneg = balanced_bce_terms(s, lab, clamp_eps=clamp_eps, literal_entropy=literal_entropy)
    return LossBreakdown(float(pt + nt), float(pt), float(nt), int(npos), int(nneg))


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    return config.base_lr / config.lr_decay_factor ** (epoch // config.lr_decay_every)


def make_optimizer(params, config: TrainConfig) -> torch.optim.SGD:
    """SGD with the gradient-coupled L2 penalty: g <- g + weight_decay * p.

    Nesterov is used whenever momentum is non-zero (torch rejects it otherwise).
    """
    return torch.optim.SGD(params, lr=config.base_lr, momentum=config.momentum,
                           weight_decay=config.weight_decay, nesterov=config.momentum > 0)


def set_seed(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic, warn_only=True)


def gradient_check(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], step: float = 1e-4,
                   analytic: Sequence[torch.Tensor] | None = None, max_checks: int | None = None) -> float:
    """Max elementwise relative error between analytic and central-difference gradients.

    The relative error uses ``max(|a|, |b|, 1e-8)`` as denominator. ``analytic``
    overrides the autograd gradients, which lets callers feed a gradient they
    computed some other way. ``max_checks`` limits each parameter to that many
    evenly strided elements.
    """
    params = list(params)
    if analytic is None:
        analytic = torch.autograd.grad(loss_fn(), params, allow_unused=True)
        analytic = [torch.zeros_like(p) if g is None else g for g, p in zip(analytic, params)]
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            g = g.reshape(-1)
            stride = 1 if max_checks is None else max(1, flat.numel() // max_checks)
            for i in range(0, flat.numel(), stride):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                fd = (up - down) / (2 * step)
                a = g[i].item()
                rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
                worst = max(worst, rel)
    return worst


@dataclass
class TrainResult:
    model: GroundingModel
    history: list[dict] = field(default_factory=list)
    best_ap50: float = float("nan")
    best_epoch: int = -1


def batch_loss(model: GroundingModel, samples: Sequence[Sample], config: TrainConfig, crops=None) -> torch.Tensor:
    """Unweighted mean over samples of each sample's balanced BCE."""
    device = next(model.parameters()).device
    batch, mask, ids, lengths = collate(samples, model.config, crops)
    positive = torch.zeros_like(mask)
    for i, s in enumerate(samples):
        positive[i, : len(s.labels)] = torch.tensor(s.labels, dtype=torch.bool)
    mask, positive = mask.to(device), positive.to(device)
    scores = model(batch.to(device), mask, ids.to(device), lengths)
    pt, nt, _, _ = balanced_bce_terms(scores, positive, mask, config.clamp_eps, config.literal_entropy)
    return (pt + nt).mean()


def validate(model: GroundingModel, samples: Sequence[Sample], crops=None) -> float:
    return evaluate(predict_all(model, samples, crops=crops), samples).ap50


def train(
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    model_config: ModelConfig,
    train_config: TrainConfig,
    vocab: Vocabulary,
    out_dir: str | Path | None = None,
    model: GroundingModel | None = None,
) -> TrainResult:
    """Train with per-epoch validation; writes ``best/``, ``last/`` and ``metrics.jsonl``.

    With ``epochs == 0`` only a single validation pass is logged.
    """
    if not train_samples:
        raise ValueError("training set is empty")
    for s in train_samples:
        if s.labels is None:
            raise ValueError(f"training sample {s.command.id} has no labels")
    set_seed(train_config.seed, train_config.deterministic)
    if model is None:
        model = GroundingModel(model_config)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("", encoding="utf-8")

    train_crops = val_crops = None
    if train_config.cache_crops:
        train_crops = [sample_crops(s, model_config) for s in train_samples]
        val_crops = [sample_crops(s, model_config) for s in val_samples]

    no_pos = sum(not any(s.labels) for s in train_samples)
    if no_pos:
        log.info("%d training samples have no positive proposal", no_pos)

    result = TrainResult(model)

    def record(entry: dict, epoch: int) -> None:
        result.history.append(entry)
        log.info(json.dumps(entry))
        if out is not None:
            with (out / "metrics.jsonl").open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")
            save_checkpoint(out / "last", model, vocab, epoch, entry)
        ap = entry["val_ap50"]
        if not math.isnan(ap) and (math.isnan(result.best_ap50) or ap > result.best_ap50):
            result.best_ap50, result.best_epoch = ap, epoch
            if out is not None:
                save_checkpoint(out / "best", model, vocab, epoch, entry)

    def val_ap() -> float:
        return validate(model, val_samples, val_crops) if val_samples else float("nan")

    if train_config.epochs == 0:
        record({"epoch": 0, "lr": 0.0, "train_loss": float("nan"), "val_ap50": val_ap()}, 0)
        return result

    optimizer = make_optimizer([p for p in model.parameters() if p.requires_grad], train_config)
    gen = torch.Generator().manual_seed(train_config.seed)
    n = len(train_samples)
    for epoch in range(train_config.epochs):
        lr = lr_at_epoch(train_config, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        order = torch.randperm(n, generator=gen).tolist()
        total, steps = 0.0, 0
        for start in range(0, n, train_config.batch_size):
            idx = order[start:start + train_config.batch_size]
            batch = [train_samples[i] for i in idx]
            crops = None if train_crops is None else [train_crops[i] for i in idx]
            loss = batch_loss(model, batch, train_config, crops)
            if not torch.isfinite(loss):
                ids = [s.command.id for s in batch]
                log.error("non-finite loss at epoch %d, batch %s", epoch, ids)
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch} for batch {ids}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item()
            steps += 1
        entry = {"epoch": epoch, "lr": lr, "train_loss": total / steps, "val_ap50": val_ap()}
        record(entry, epoch)
    return result

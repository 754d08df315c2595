"""Argmax prediction, AP50 scoring and the submission file format."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import torch

from c4av.dataset import Sample
from c4av.geometry import Box, iou


class EvaluationError(Exception):
    pass


class SubmissionError(ValueError):
    pass


@dataclass(frozen=True)
class Prediction:
    command_id: str
    box: Box


@dataclass
class CommandResult:
    command_id: str
    iou: float
    correct: bool


@dataclass
class EvalReport:
    ap50: float
    num_commands: int
    oracle_rate: float | None = None
    per_command: list[CommandResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def argmax_index(scores: Sequence[float]) -> int:
    """Index of the highest score; the lowest index wins ties."""
    if len(scores) == 0:
        raise ValueError("cannot pick from an empty score list")
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best


def predict_from_scores(sample: Sample, scores: Sequence[float]) -> Prediction:
    if not sample.proposals:
        raise ValueError(f"sample {sample.command.id} has no proposals")
    return Prediction(sample.command.id, sample.proposals[argmax_index(list(scores))].box)


def predict(model, sample: Sample) -> Prediction:
    from c4av.model import forward

    return predict_from_scores(sample, [r.score for r in forward(model, sample)])


@torch.no_grad()
def predict_all(model, samples: Sequence[Sample], batch_size: int = 32, crops=None) -> list[Prediction]:
    """Batched :func:`predict` over many samples, in input order."""
    from c4av.model import collate

    for s in samples:
        if not s.proposals:
            raise ValueError(f"sample {s.command.id} has no proposals")
    device = next(model.parameters()).device
    was_training = model.training
    model.eval()
    preds = []
    try:
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            chunk_crops = None if crops is None else crops[start:start + batch_size]
            batch, mask, ids, lengths = collate(chunk, model.config, chunk_crops)
            scores = model(batch.to(device), mask.to(device), ids.to(device), lengths).cpu()
            for s, row in zip(chunk, scores):
                preds.append(predict_from_scores(s, row[: len(s.proposals)].tolist()))
    finally:
        model.train(was_training)
    return preds


def ap50(predictions: Sequence[Prediction], gts: Mapping[str, Box], threshold: float = 0.5) -> EvalReport:
    """Fraction of commands whose predicted box reaches IoU >= threshold."""
    pred_ids = [p.command_id for p in predictions]
    seen = set()
    dupes = sorted({c for c in pred_ids if c in seen or seen.add(c)})
    missing = sorted(set(gts) - seen)
    extra = sorted(seen - set(gts))
    if dupes or missing or extra:
        parts = []
        if missing:
            parts.append(f"missing predictions for {missing}")
        if extra:
            parts.append(f"unknown command ids {extra}")
        if dupes:
            parts.append(f"duplicate predictions for {dupes}")
        raise EvaluationError("; ".join(parts))
    if not predictions:
        raise EvaluationError("no commands to evaluate")
    results = []
    for p in predictions:
        overlap = iou(p.box, gts[p.command_id])
        results.append(CommandResult(p.command_id, overlap, overlap >= threshold))
    correct = sum(r.correct for r in results)
    return EvalReport(correct / len(results), len(results), per_command=results)


def proposal_oracle(samples: Sequence[Sample], threshold: float = 0.5) -> float:
    """Fraction of samples with at least one proposal at IoU >= threshold."""
    if not samples:
        raise EvaluationError("no samples")
    hits = 0
    for s in samples:
        if s.gt_box is None:
            raise EvaluationError(f"sample {s.command.id} has no ground-truth box")
        hits += any(iou(p.box, s.gt_box) >= threshold for p in s.proposals)
    return hits / len(samples)


def ground_truths(samples: Sequence[Sample]) -> dict[str, Box]:
    out = {}
    for s in samples:
        if s.gt_box is None:
            raise EvaluationError(f"sample {s.command.id} has no ground-truth box")
        out[s.command.id] = s.gt_box
    return out


def evaluate(predictions: Sequence[Prediction], samples: Sequence[Sample], threshold: float = 0.5) -> EvalReport:
    report = ap50(predictions, ground_truths(samples), threshold)
    report.oracle_rate = proposal_oracle(samples, threshold)
    return report


def dumps_submission(predictions: Sequence[Prediction]) -> str:
    payload = {}
    for p in predictions:
        if p.command_id in payload:
            raise SubmissionError(f"duplicate command id {p.command_id!r}")
        payload[p.command_id] = [float(v) for v in p.box.to_list()]
    return json.dumps(payload)


def write_submission(predictions: Sequence[Prediction], path: str | Path) -> None:
    Path(path).write_text(dumps_submission(predictions), encoding="utf-8")


def _no_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise SubmissionError(f"duplicate command id {key!r}")
        out[key] = value
    return out


def loads_submission(text: str) -> list[Prediction]:
    try:
        raw = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise SubmissionError(f"malformed submission JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise SubmissionError("submission must be a JSON object")
    preds = []
    for key, values in raw.items():
        if not isinstance(values, list) or len(values) != 4:
            raise SubmissionError(f"prediction {key!r} must be a 4-element array")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) for v in values):
            raise SubmissionError(f"prediction {key!r} has non-finite or non-numeric values")
        try:
            preds.append(Prediction(key, Box.from_list(values)))
        except ValueError as exc:
            raise SubmissionError(f"prediction {key!r}: {exc}") from exc
    return preds


def read_submission(path: str | Path) -> list[Prediction]:
    return loads_submission(Path(path).read_text(encoding="utf-8"))

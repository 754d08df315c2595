"""Seeded generator of a small grounding benchmark made of colored shapes.

Every image holds a few non-overlapping shapes with distinct (color, shape)
pairs, so a command such as "stop next to the red triangle" names exactly one
target. Proposals are the jittered true boxes of all shapes plus random
distractor boxes, written in the same layout the challenge distributes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from c4av.geometry import Box

log = logging.getLogger(__name__)

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (50, 80, 230),
    "yellow": (235, 220, 40),
    "purple": (150, 60, 200),
    "orange": (245, 140, 30),
}
SHAPES = ("square", "circle", "triangle", "diamond")
VERB_PHRASES = (
    "stop next to",
    "park behind",
    "follow",
    "pull up near",
    "turn towards",
    "drive around",
    "slow down for",
)


@dataclass
class SyntheticConfig:
    num_images: int = 500
    image_size: int = 128
    shapes_per_image: tuple[int, int] = (3, 7)
    colors: list[str] = field(default_factory=lambda: list(COLORS))
    shapes: list[str] = field(default_factory=lambda: list(SHAPES))
    proposal_jitter: float = 0.1
    distractor_proposals: int = 8
    background_clutter: int = 40
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_sizes: dict[str, int] | None = None

    def __post_init__(self) -> None:
        lo, hi = self.shapes_per_image
        if self.num_images < 1 or self.image_size < 16:
            raise ValueError("num_images must be >= 1 and image_size >= 16")
        if not 1 <= lo <= hi:
            raise ValueError(f"bad shapes_per_image range {self.shapes_per_image}")
        if hi > len(self.colors) * len(self.shapes):
            raise ValueError("not enough (color, shape) pairs for shapes_per_image")
        if not 0.0 <= self.proposal_jitter <= 0.5:
            raise ValueError(f"proposal_jitter must lie in [0, 0.5], got {self.proposal_jitter}")
        if self.distractor_proposals < 0 or self.background_clutter < 0:
            raise ValueError("distractor_proposals and background_clutter must be >= 0")
        unknown = set(self.colors) - set(COLORS)
        if unknown:
            raise ValueError(f"unknown colors {sorted(unknown)}")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown shapes {sorted(unknown)}")

    def sizes(self) -> dict[str, int]:
        if self.split_sizes is not None:
            return dict(self.split_sizes)
        n_val = int(round(self.num_images * self.split_fractions[1]))
        n_test = int(round(self.num_images * self.split_fractions[2]))
        return {"train": self.num_images - n_val - n_test, "val": n_val, "test": n_test}


def _draw_shape(draw: ImageDraw.ImageDraw, kind: str, box: Box, color) -> None:
    x1, y1, x2, y2 = box.x, box.y, box.x2 - 1, box.y2 - 1
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    if kind == "square":
        draw.rectangle([x1, y1, x2, y2], fill=color)
    elif kind == "circle":
        draw.ellipse([x1, y1, x2, y2], fill=color)
    elif kind == "triangle":
        draw.polygon([(cx, y1), (x2, y2), (x1, y2)], fill=color)
    elif kind == "diamond":
        draw.polygon([(cx, y1), (x2, cy), (cx, y2), (x1, cy)], fill=color)
    else:
        raise ValueError(f"unknown shape {kind!r}")


def _place_shapes(rng: np.random.Generator, n: int, size: int) -> list[Box]:
    boxes: list[Box] = []
    lo, hi = max(6, int(0.12 * size)), max(8, int(0.25 * size))
    for _ in range(200 * n):
        if len(boxes) == n:
            break
        s = int(rng.integers(lo, hi + 1))
        x = int(rng.integers(0, size - s + 1))
        y = int(rng.integers(0, size - s + 1))
        cand = Box(x, y, s, s)
        gap = 2
        if all(
            cand.x2 + gap <= b.x or b.x2 + gap <= cand.x or cand.y2 + gap <= b.y or b.y2 + gap <= cand.y
            for b in boxes
        ):
            boxes.append(cand)
    return boxes


def _draw_clutter(rng: np.random.Generator, draw: ImageDraw.ImageDraw, n: int, size: int) -> None:
    """Random colored strokes so background crops look as varied as shape crops."""
    for _ in range(n):
        x1, y1 = rng.uniform(0, size, size=2)
        length = rng.uniform(0.03, 0.15) * size
        angle = rng.uniform(0, 2 * np.pi)
        x2, y2 = x1 + length * np.cos(angle), y1 + length * np.sin(angle)
        color = tuple(int(c) for c in rng.integers(40, 256, size=3))
        draw.line([(float(x1), float(y1)), (float(x2), float(y2))], fill=color,
                  width=int(rng.integers(1, 4)))


def _relation(target: Box, size: int) -> str | None:
    cx = target.x + target.w / 2
    if cx < size / 3:
        return "on the left"
    if cx > 2 * size / 3:
        return "on the right"
    return None


def _jitter(rng: np.random.Generator, box: Box, jitter: float, size: int) -> Box:
    if jitter == 0:
        return box
    dx, dy, dw, dh = rng.uniform(-jitter, jitter, size=4)
    out = Box(box.x + dx * box.w, box.y + dy * box.h, box.w * (1 + dw), box.h * (1 + dh))
    return out.clamp(size, size)


def _random_box(rng: np.random.Generator, size: int) -> Box:
    w, h = rng.uniform(0.1, 0.5, size=2) * size
    x = rng.uniform(0, size - w)
    y = rng.uniform(0, size - h)
    return Box(x, y, w, h)


def _round_box(b: Box) -> list[float]:
    return [round(v, 3) for v in b.to_list()]


def _generate_split(cfg: SyntheticConfig, split: str, split_index: int, count: int, out: Path) -> None:
    rng = np.random.default_rng([cfg.seed, split_index])
    split_dir = out / split
    image_dir = split_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    size = cfg.image_size
    combos = [(c, s) for c in cfg.colors for s in cfg.shapes]

    images, commands, proposals = [], [], {}
    for i in range(count):
        image_id = f"{split}-{i:05d}"
        n = int(rng.integers(cfg.shapes_per_image[0], cfg.shapes_per_image[1] + 1))
        boxes = _place_shapes(rng, n, size)
        picks = rng.choice(len(combos), size=len(boxes), replace=False)

        noise = rng.integers(0, 24, size=(size, size, 1), dtype=np.uint8)
        canvas = Image.fromarray(np.repeat(noise + 50, 3, axis=2), "RGB")
        draw = ImageDraw.Draw(canvas)
        _draw_clutter(rng, draw, cfg.background_clutter, size)
        for box, p in zip(boxes, picks):
            color, kind = combos[p]
            _draw_shape(draw, kind, box, COLORS[color])
        file = f"{image_id}.png"
        canvas.save(image_dir / file, format="PNG")
        images.append({"id": image_id, "file": file, "width": size, "height": size})

        t = int(rng.integers(len(boxes)))
        color, kind = combos[picks[t]]
        verb = VERB_PHRASES[int(rng.integers(len(VERB_PHRASES)))]
        text = f"{verb} the {color} {kind}"
        rel = _relation(boxes[t], size)
        if rel is not None and rng.random() < 0.5:
            text = f"{text} {rel}"
        cmd = {"id": f"{split}-cmd-{i:05d}", "image_id": image_id, "text": text}
        if split != "test":
            cmd["gt_box"] = _round_box(boxes[t])
        commands.append(cmd)

        props = []
        for box in boxes:
            props.append({"box": _round_box(_jitter(rng, box, cfg.proposal_jitter, size)),
                          "score": round(float(rng.uniform(0.5, 1.0)), 4)})
        for _ in range(cfg.distractor_proposals):
            props.append({"box": _round_box(_random_box(rng, size)),
                          "score": round(float(rng.uniform(0.05, 0.7)), 4)})
        order = rng.permutation(len(props))
        proposals[image_id] = [props[j] for j in order]

    for name, payload in (("images.json", images), ("commands.json", commands), ("proposals.json", proposals)):
        with (split_dir / name).open("w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)
            fh.write("\n")


def generate_synthetic(config: SyntheticConfig, out_dir: str | Path) -> dict[str, int]:
    """Write train/val/test splits under ``out_dir``; returns commands per split."""
    out = Path(out_dir)
    sizes = config.sizes()
    for index, split in enumerate(("train", "val", "test")):
        count = sizes.get(split, 0)
        if count > 0:
            _generate_split(config, split, index, count, out)
            log.info("wrote %d %s samples to %s", count, split, out / split)
    return sizes

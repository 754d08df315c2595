"""Render a prediction, the ground truth and the command text onto an image."""

from __future__ import annotations

import textwrap
from pathlib import Path

from PIL import Image, ImageDraw, ImageFont

from c4av.dataset import Sample
from c4av.geometry import Box

PRED_COLOR = (230, 30, 30)
GT_COLOR = (30, 200, 60)
MIN_WIDTH = 384


def render_prediction(sample: Sample, predicted: Box, path: str | Path) -> Path:
    if sample.image_path is None:
        raise ValueError(f"sample {sample.command.id} has no image path")
    with Image.open(sample.image_path) as img:
        img = img.convert("RGB")
    scale = max(1.0, MIN_WIDTH / img.width)
    img = img.resize((round(img.width * scale), round(img.height * scale)), Image.NEAREST)

    font = ImageFont.load_default()
    lines = textwrap.wrap(sample.command.text, width=max(20, img.width // 7)) or [""]
    margin = 14 * len(lines) + 10
    canvas = Image.new("RGB", (img.width, img.height + margin), (255, 255, 255))
    canvas.paste(img, (0, 0))
    draw = ImageDraw.Draw(canvas)

    def rect(box: Box, color):
        x1, y1, x2, y2 = (v * scale for v in box.to_xyxy())
        draw.rectangle([x1, y1, x2, y2], outline=color, width=3)

    if sample.gt_box is not None:
        rect(sample.gt_box, GT_COLOR)
    rect(predicted, PRED_COLOR)
    for i, line in enumerate(lines):
        draw.text((5, img.height + 5 + 14 * i), line, fill=(0, 0, 0), font=font)

    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(out, format="PNG")
    return out

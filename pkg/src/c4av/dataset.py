"""Records, tokenization, vocabulary and loading of the on-disk split layout.

Layout of one split directory::

    <root>/<split>/images/<file>
    <root>/<split>/images.json      [{"id", "file", "width", "height"}]
    <root>/<split>/commands.json    [{"id", "image_id", "text", "gt_box"?}]
    <root>/<split>/proposals.json   {image_id: [{"box": [x, y, w, h], "score"}]}
"""

from __future__ import annotations

import json
import logging
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from c4av.geometry import Box, ScoredBox, assign_labels, confidence_order

log = logging.getLogger(__name__)

PAD = 0
UNK = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
DEFAULT_MAX_LEN = 40
DEFAULT_K = 16
SPLITS = ("train", "val", "test")


class DatasetError(Exception):
    """Raised when a split directory is missing files or holds invalid records."""


@dataclass(frozen=True)
class ImageRecord:
    id: str
    file: str
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image {self.id!r} has non-positive size {self.width}x{self.height}")


@dataclass(frozen=True)
class CommandRecord:
    id: str
    image_id: str
    text: str
    gt_box: Box | None = None


@dataclass
class Vocabulary:
    token_to_id: dict[str, int]
    id_to_token: list[str]

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "Vocabulary":
        """Build from an ordered token list; ids start at 2 after the specials."""
        itos = [PAD_TOKEN, UNK_TOKEN]
        for tok in tokens:
            if tok in (PAD_TOKEN, UNK_TOKEN):
                continue
            itos.append(tok)
        stoi = {tok: i for i, tok in enumerate(itos)}
        if len(stoi) != len(itos):
            raise ValueError("vocabulary tokens must be unique")
        return cls(stoi, itos)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def tokens(self) -> list[str]:
        """Non-special tokens in id order (the serialized form)."""
        return self.id_to_token[2:]


@dataclass(frozen=True)
class Sample:
    command: CommandRecord
    image: ImageRecord
    proposals: list[ScoredBox]
    token_ids: list[int]
    token_length: int
    labels: list[bool] | None = None
    image_path: Path | None = field(default=None, compare=False)

    @property
    def boxes(self) -> list[Box]:
        return [p.box for p in self.proposals]

    @property
    def gt_box(self) -> Box | None:
        return self.command.gt_box


_STRIP = string.punctuation + "‘’“”"


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip punctuation around each token."""
    out = []
    for raw in text.lower().split():
        tok = raw.strip(_STRIP)
        if tok:
            out.append(tok)
    return out


def build_vocabulary(corpus: Iterable[Sequence[str]], min_freq: int = 1) -> Vocabulary:
    if min_freq < 1:
        raise ValueError(f"min_freq must be >= 1, got {min_freq}")
    counts = Counter(tok for doc in corpus for tok in doc)
    kept = [tok for tok, n in counts.items() if n >= min_freq]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return Vocabulary.from_tokens(kept)


def encode_tokens(vocab: Vocabulary, tokens: Sequence[str], max_len: int = DEFAULT_MAX_LEN) -> tuple[list[int], int]:
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    ids = [vocab.lookup(t) for t in tokens[:max_len]]
    length = len(ids)
    return ids + [PAD] * (max_len - length), length


def select_top_k(proposals: Sequence[ScoredBox], k: int = DEFAULT_K) -> list[ScoredBox]:
    """The ``k`` most confident proposals, descending, ties kept in input order."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    order = confidence_order(p.confidence for p in proposals)
    return [proposals[i] for i in order[:k]]


def _read_json(path: Path):
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    try:
        with path.open(encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {path}: {exc}") from exc


def _parse_box(values, where: str) -> Box:
    try:
        return Box.from_list(values)
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"malformed box in {where}: {exc}") from exc


def read_images(split_dir: Path) -> dict[str, ImageRecord]:
    images: dict[str, ImageRecord] = {}
    for rec in _read_json(split_dir / "images.json"):
        try:
            img = ImageRecord(str(rec["id"]), str(rec["file"]), int(rec["width"]), int(rec["height"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"malformed image record {rec!r}: {exc}") from exc
        if img.id in images:
            raise DatasetError(f"duplicate image id {img.id!r}")
        images[img.id] = img
    return images


def read_commands(split_dir: Path) -> list[CommandRecord]:
    commands = []
    for rec in _read_json(split_dir / "commands.json"):
        try:
            cid = str(rec["id"])
            gt = rec.get("gt_box")
            box = _parse_box(gt, f"command {cid}") if gt is not None else None
            commands.append(CommandRecord(cid, str(rec["image_id"]), str(rec["text"]), box))
        except KeyError as exc:
            raise DatasetError(f"command record missing field {exc}: {rec!r}") from exc
    return commands


def read_proposals(split_dir: Path) -> dict[str, list[ScoredBox]]:
    raw = _read_json(split_dir / "proposals.json")
    out: dict[str, list[ScoredBox]] = {}
    for image_id, entries in raw.items():
        props = []
        for j, entry in enumerate(entries):
            where = f"proposal {j} of image {image_id}"
            box = _parse_box(entry.get("box"), where)
            try:
                props.append(ScoredBox(box, float(entry["score"])))
            except (KeyError, ValueError) as exc:
                raise DatasetError(f"malformed score in {where}: {exc}") from exc
        out[image_id] = props
    return out


def load_commands_corpus(root: str | Path, split: str = "train") -> list[list[str]]:
    """Tokenized commands of a split, for vocabulary construction."""
    return [tokenize(c.text) for c in read_commands(Path(root) / split)]


def load_dataset(
    root: str | Path,
    split: str,
    vocab: Vocabulary,
    k: int = DEFAULT_K,
    max_len: int = DEFAULT_MAX_LEN,
) -> list[Sample]:
    """Assemble one :class:`Sample` per command, in ``commands.json`` order."""
    split_dir = Path(root) / split
    images = read_images(split_dir)
    commands = read_commands(split_dir)
    proposals = read_proposals(split_dir)

    samples = []
    truncated = 0
    no_positive = 0
    for cmd in commands:
        image = images.get(cmd.image_id)
        if image is None:
            raise DatasetError(f"command {cmd.id!r} references unknown image {cmd.image_id!r}")
        tokens = tokenize(cmd.text)
        if not tokens:
            raise DatasetError(f"command {cmd.id!r} has no tokens")
        truncated += len(tokens) > max_len
        ids, length = encode_tokens(vocab, tokens, max_len)

        if cmd.gt_box is not None:
            cmd = CommandRecord(cmd.id, cmd.image_id, cmd.text, cmd.gt_box.clamp(image.width, image.height))
        props = select_top_k(proposals.get(cmd.image_id, []), k)
        labels = None
        if cmd.gt_box is not None:
            labels = assign_labels([p.box for p in props], cmd.gt_box)
            no_positive += not any(labels)
        samples.append(
            Sample(cmd, image, props, ids, length, labels, image_path=split_dir / "images" / image.file)
        )
    if truncated:
        log.info("%s: %d commands truncated to %d tokens", split, truncated, max_len)
    if no_positive:
        log.info("%s: %d samples without a positive proposal", split, no_positive)
    return samples

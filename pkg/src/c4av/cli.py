"""Command line entry point: ``c4av {synth,train,eval,predict,visualize}``.

Settings resolve as flags > ``--config`` JSON file > defaults. The config file
is a flat JSON object whose keys are :class:`RunConfig` field names.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

log = logging.getLogger("c4av")


class CliError(Exception):
    """Runtime failure; reported on stderr with exit code 1."""


@dataclass
class RunConfig:
    data: str | None = None
    out: str | None = None
    split: str | None = None
    # synthetic data
    images: int = 500
    image_size: int = 128
    jitter: float = 0.1
    distractors: int = 8
    shapes_min: int = 3
    shapes_max: int = 7
    # model
    tiny_backbone: bool = False
    pretrained: bool = True
    freeze_backbone: bool = False
    embed_dim: int | None = None
    word_embed_dim: int | None = None
    rnn_hidden: int | None = None
    crop_size: int | None = None
    k: int = 16
    max_len: int = 40
    min_freq: int = 1
    # optimisation
    epochs: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 18
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 4
    literal_entropy: bool = False
    seed: int = 0
    # mode
    deterministic: bool = True
    device: str = "cpu"
    # evaluation / prediction
    checkpoint: str | None = None
    submission: str | None = None
    report: str | None = None
    ids: str | None = None


FIELD_NAMES = [f.name for f in fields(RunConfig)]


def load_config_file(path: str) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"malformed config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise CliError(f"config {path} must be a JSON object")
    unknown = sorted(set(raw) - set(FIELD_NAMES))
    if unknown:
        raise CliError(f"unknown config keys in {path}: {unknown}")
    return raw


def resolve(args: argparse.Namespace) -> RunConfig:
    values = {}
    env_data = os.environ.get("C4AV_DATA")
    if env_data:
        values["data"] = env_data
    if args.config:
        values.update(load_config_file(args.config))
    for name in FIELD_NAMES:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    return RunConfig(**values)


def echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(asdict(cfg), indent=2) + "\n", encoding="utf-8")


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _require(parser, cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) in (None, "")]
    if missing:
        parser.error("missing required setting(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


# subcommands -------------------------------------------------------------


def cmd_synth(cfg: RunConfig, parser) -> int:
    from c4av.dataset import build_vocabulary, load_dataset
    from c4av.evaluation import proposal_oracle
    from c4av.synthetic import SyntheticConfig, generate_synthetic

    _require(parser, cfg, "out")
    try:
        synth = SyntheticConfig(
            num_images=cfg.images,
            image_size=cfg.image_size,
            shapes_per_image=(cfg.shapes_min, cfg.shapes_max),
            proposal_jitter=cfg.jitter,
            distractor_proposals=cfg.distractors,
            seed=cfg.seed,
        )
    except ValueError as exc:
        parser.error(str(exc))
    out = Path(cfg.out)
    sizes = generate_synthetic(synth, out)
    echo_config(cfg, out)
    vocab = build_vocabulary([])
    for split, count in sizes.items():
        line = f"{split}: {count} commands"
        if split != "test" and count:
            oracle = proposal_oracle(load_dataset(out, split, vocab, k=cfg.k, max_len=cfg.max_len))
            line += f", oracle {oracle:.4f}"
        print(line)
    return 0


def _model_config(cfg: RunConfig, vocab_size: int):
    from c4av.model import ModelConfig

    overrides = {
        name: getattr(cfg, name)
        for name in ("embed_dim", "word_embed_dim", "rnn_hidden", "crop_size")
        if getattr(cfg, name) is not None
    }
    common = dict(k=cfg.k, max_len=cfg.max_len, freeze_backbone=cfg.freeze_backbone)
    if cfg.tiny_backbone:
        return ModelConfig.tiny(vocab_size, **common, **overrides)
    return ModelConfig(vocab_size=vocab_size, pretrained=cfg.pretrained, **common, **overrides)


def cmd_train(cfg: RunConfig, parser) -> int:
    import torch

    from c4av.dataset import build_vocabulary, load_commands_corpus, load_dataset
    from c4av.training import TrainConfig, train

    _require(parser, cfg, "data", "out")
    data, out = Path(cfg.data), Path(cfg.out)
    echo_config(cfg, out)
    vocab = build_vocabulary(load_commands_corpus(data, "train"), cfg.min_freq)
    train_samples = load_dataset(data, "train", vocab, cfg.k, cfg.max_len)
    val_samples = []
    if (data / "val").is_dir():
        val_samples = load_dataset(data, "val", vocab, cfg.k, cfg.max_len)
    else:
        log.warning("no val split under %s; val_ap50 will be NaN", data)
    model_config = _model_config(cfg, len(vocab))
    train_config = TrainConfig(
        epochs=cfg.epochs, base_lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
        batch_size=cfg.batch_size, lr_decay_factor=cfg.lr_decay_factor, lr_decay_every=cfg.lr_decay_every,
        seed=cfg.seed, literal_entropy=cfg.literal_entropy, deterministic=cfg.deterministic,
        cache_crops=model_config.crop_size <= 64,
    )
    from c4av.model import GroundingModel

    torch.manual_seed(cfg.seed)
    model = GroundingModel(model_config).to(cfg.device)
    result = train(train_samples, val_samples, model_config, train_config, vocab, out_dir=out, model=model)
    print(f"best val AP50: {result.best_ap50:.4f} (epoch {result.best_epoch})")
    return 0


def _load_model(cfg: RunConfig):
    from c4av.model import load_checkpoint

    model, vocab, meta = load_checkpoint(cfg.checkpoint)
    return model.to(cfg.device), vocab


def _predictions_from_checkpoint(cfg: RunConfig, split: str):
    from c4av.dataset import load_dataset
    from c4av.evaluation import predict_all

    model, vocab = _load_model(cfg)
    samples = load_dataset(cfg.data, split, vocab, model.config.k, model.config.max_len)
    empty = [s.command.id for s in samples if not s.proposals]
    if empty:
        raise CliError(f"samples without proposals: {empty}")
    return samples, predict_all(model, samples)


def cmd_eval(cfg: RunConfig, parser) -> int:
    from c4av.dataset import build_vocabulary, load_dataset
    from c4av.evaluation import evaluate, read_submission

    _require(parser, cfg, "data")
    if (cfg.checkpoint is None) == (cfg.submission is None):
        parser.error("give exactly one of --checkpoint or --submission")
    split = cfg.split or "val"
    if cfg.checkpoint:
        samples, preds = _predictions_from_checkpoint(cfg, split)
    else:
        samples = load_dataset(cfg.data, split, build_vocabulary([]), cfg.k, cfg.max_len)
        preds = read_submission(cfg.submission)
    report = evaluate(preds, samples)
    print(f"AP50: {report.ap50:.4f}")
    print(f"Oracle: {report.oracle_rate:.4f}")
    if cfg.report:
        Path(cfg.report).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_predict(cfg: RunConfig, parser) -> int:
    from c4av.evaluation import write_submission

    _require(parser, cfg, "data", "checkpoint", "out")
    _, preds = _predictions_from_checkpoint(cfg, cfg.split or "test")
    write_submission(preds, cfg.out)
    print(f"wrote {len(preds)} predictions to {cfg.out}")
    return 0


def cmd_visualize(cfg: RunConfig, parser) -> int:
    from c4av.dataset import build_vocabulary, load_dataset
    from c4av.evaluation import read_submission
    from c4av.visualize import render_prediction

    _require(parser, cfg, "data", "submission", "out")
    samples = {s.command.id: s for s in load_dataset(cfg.data, cfg.split or "val", build_vocabulary([]),
                                                     cfg.k, cfg.max_len)}
    preds = {p.command_id: p for p in read_submission(cfg.submission)}
    wanted = [i for i in cfg.ids.split(",") if i] if cfg.ids else list(preds)
    unknown = [i for i in wanted if i not in samples or i not in preds]
    if unknown:
        raise CliError(f"unknown command id(s): {', '.join(unknown)}")
    out = Path(cfg.out)
    echo_config(cfg, out)
    for cid in wanted:
        path = render_prediction(samples[cid], preds[cid].box, out / f"{cid}.png")
        print(path)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "visualize": cmd_visualize,
}


def _bool_flag(p, name: str, help: str) -> None:
    p.add_argument(f"--{name}", dest=name.replace("-", "_"), action=argparse.BooleanOptionalAction,
                   default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c4av", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="flat JSON file of RunConfig fields")
        if data:
            p.add_argument("--data", help="dataset root (default: $C4AV_DATA)")
        p.add_argument("--k", type=positive_int, default=None, help="proposals kept per image")
        p.add_argument("--max-len", dest="max_len", type=positive_int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--device", default=None)
        _bool_flag(p, "deterministic", "deterministic torch kernels")

    p = sub.add_parser("synth", help="generate a synthetic shapes dataset")
    common(p, data=False)
    p.add_argument("--out", help="output dataset root")
    p.add_argument("--images", type=positive_int, default=None)
    p.add_argument("--image-size", dest="image_size", type=positive_int, default=None)
    p.add_argument("--jitter", type=float, default=None)
    p.add_argument("--distractors", type=non_negative_int, default=None)
    p.add_argument("--shapes-min", dest="shapes_min", type=positive_int, default=None)
    p.add_argument("--shapes-max", dest="shapes_max", type=positive_int, default=None)

    p = sub.add_parser("train", help="train the region/command matcher")
    common(p)
    p.add_argument("--out", help="run directory")
    p.add_argument("--epochs", type=non_negative_int, default=None)
    p.add_argument("--lr", type=positive_float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=positive_int, default=None)
    p.add_argument("--lr-decay-factor", dest="lr_decay_factor", type=positive_float, default=None)
    p.add_argument("--lr-decay-every", dest="lr_decay_every", type=positive_int, default=None)
    p.add_argument("--embed-dim", dest="embed_dim", type=positive_int, default=None)
    p.add_argument("--word-embed-dim", dest="word_embed_dim", type=positive_int, default=None)
    p.add_argument("--rnn-hidden", dest="rnn_hidden", type=positive_int, default=None)
    p.add_argument("--crop-size", dest="crop_size", type=positive_int, default=None)
    p.add_argument("--min-freq", dest="min_freq", type=positive_int, default=None)
    _bool_flag(p, "tiny-backbone", "small CNN instead of ResNet-18 (CPU runs)")
    _bool_flag(p, "pretrained", "load ImageNet weights for the ResNet backbone")
    _bool_flag(p, "freeze-backbone", "keep backbone weights fixed")
    _bool_flag(p, "literal-entropy", "use the x*log(x) variant of the loss")

    p = sub.add_parser("eval", help="AP50 of a checkpoint or a submission file")
    common(p)
    p.add_argument("--split", default=None, help="default: val")
    p.add_argument("--checkpoint")
    p.add_argument("--submission")
    p.add_argument("--report", help="write the full report as JSON here")

    p = sub.add_parser("predict", help="write a submission file")
    common(p)
    p.add_argument("--split", default=None, help="default: test")
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="submission JSON path")

    p = sub.add_parser("visualize", help="render predictions over images")
    common(p)
    p.add_argument("--split", default=None, help="default: val")
    p.add_argument("--submission")
    p.add_argument("--ids", help="comma-separated command ids (default: all)")
    p.add_argument("--out", help="output directory for PNGs")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    from c4av.dataset import DatasetError
    from c4av.evaluation import EvaluationError, SubmissionError
    from c4av.model import CheckpointError
    from c4av.training import NonFiniteLossError

    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg, parser)
    except (CliError, DatasetError, EvaluationError, SubmissionError, CheckpointError,
            NonFiniteLossError, OSError) as exc:
        print(f"c4av {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

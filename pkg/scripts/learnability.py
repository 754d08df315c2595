"""Desk-scale learnability run: synthetic 500/60 split, tiny backbone, <= 10 epochs.

Prints the untrained baseline (mean over random inits), the per-epoch curve and
the wall time. Usage: python scripts/learnability.py [--out runs/learn] [--seed 0]
"""

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from c4av.dataset import build_vocabulary, load_commands_corpus, load_dataset
from c4av.evaluation import evaluate, predict_all
from c4av.model import GroundingModel, ModelConfig
from c4av.synthetic import SyntheticConfig, generate_synthetic
from c4av.training import TrainConfig, train


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="runs/learnability")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--inits", type=int, default=10, help="random inits for the untrained baseline")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    start = time.perf_counter()
    generate_synthetic(SyntheticConfig(seed=7, split_sizes={"train": 500, "val": 60, "test": 0}), out / "data")
    vocab = build_vocabulary(load_commands_corpus(out / "data", "train"))
    tr = load_dataset(out / "data", "train", vocab)
    va = load_dataset(out / "data", "val", vocab)
    cfg = ModelConfig.tiny(len(vocab))

    baseline = []
    for seed in range(args.inits):
        torch.manual_seed(seed)
        baseline.append(evaluate(predict_all(GroundingModel(cfg), va), va).ap50)
    random_rank = float(np.mean([sum(s.labels) / len(s.labels) for s in va]))

    result = train(tr, va, cfg, TrainConfig(base_lr=0.1, batch_size=12, lr_decay_every=6, seed=args.seed),
                   vocab, out_dir=out / "run")
    summary = {
        "untrained_ap50": float(np.mean(baseline)),
        "uniform_random_ranking_ap50": random_rank,
        "best_val_ap50": result.best_ap50,
        "best_epoch": result.best_epoch,
        "seconds": time.perf_counter() - start,
    }
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()

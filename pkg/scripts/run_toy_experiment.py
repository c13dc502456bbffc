"""Train on the seed-7 toy suite and report held-out learning diagnostics.

    python3 scripts/run_toy_experiment.py [--config scripts/toy.toml] [--epochs N]
"""

import argparse
import json
import time
from dataclasses import replace
from pathlib import Path

from timeomni.cli import build_model
from timeomni.config import load_config
from timeomni.dataset import generate_toy_suite, split_holdout
from timeomni.evaluate import toy_scores
from timeomni.training import train

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(HERE / "toy.toml"))
    ap.add_argument("--seed", type=int, default=7, help="toy-suite seed")
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--lr", type=float)
    args = ap.parse_args()

    cfg = load_config(args.config)
    tc = cfg.train
    if args.epochs is not None:
        tc = replace(tc, epochs=args.epochs)
    if args.lr is not None:
        tc = replace(tc, lr=args.lr)

    train_ds, held_out = split_holdout(generate_toy_suite(args.seed))
    model = build_model(cfg.model, tc, cfg.seed)

    t0 = time.perf_counter()

    def progress(row):
        step, lr, lu, lg = row
        if step % 200 == 0:
            print(f"step {step:5d}  lr {lr:.2e}  loss_u {lu:.4f}  loss_g {lg:.4f}  {time.perf_counter() - t0:6.1f}s")

    result = train(train_ds, tc, model, on_step=progress)
    elapsed = time.perf_counter() - t0
    scores = toy_scores(model, held_out)
    scores.update(steps=len(result.history), train_seconds=round(elapsed, 1))
    print(json.dumps(scores, indent=2))


if __name__ == "__main__":
    main()

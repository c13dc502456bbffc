"""Command line: gen-toy, train, eval, report.

Exit codes: 0 success, 2 usage/config/I-O error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .dataset import (
    DEFAULT_TOY_SIZES,
    TOY_TASKS,
    DatasetError,
    TaskType,
    generate_toy_suite,
    load_dataset,
    manifest_json,
    split_holdout,
    write_dataset,
)
from .evaluate import run_model
from .metrics import EvalReport, TaskScore, rank_scores, render_text, report_from_json, score_run
from .model import ModelConfig, TimeOmni
from .numerics import CheckpointError, load_checkpoint, save_checkpoint
from .training import Adam, NonFiniteLoss, TrainConfig, dora_wrap, train

log = logging.getLogger("timeomni")

DATASET_FILE = "dataset.jsonl"
CHECKPOINT_FILE = "checkpoint.tok1"
LOSSES_FILE = "losses.csv"
EVAL_FILE = "eval.json"
REPORT_FILE = "report.txt"
MANIFEST_FILE = "manifest.json"
TRAIN_FILE = "train.jsonl"
HELD_OUT_FILE = "held_out.jsonl"


class UsageError(Exception):
    pass


def parse_sizes(items: list[str] | None) -> dict[str, int]:
    sizes = dict(DEFAULT_TOY_SIZES)
    for item in items or []:
        for part in item.split(","):
            if not part:
                continue
            key, _, val = part.partition("=")
            if key not in TOY_TASKS:
                raise UsageError(f"--sizes: unknown family {key!r} (known: {', '.join(TOY_TASKS)})")
            try:
                n = int(val)
            except ValueError:
                raise UsageError(f"--sizes: {part!r} is not family=count") from None
            if n < 1:
                raise UsageError(f"--sizes: {key} must be positive")
            sizes[key] = n
    return sizes


# ---------------------------------------------------------------------------
# model <-> checkpoint


def build_model(model_cfg: ModelConfig, train_cfg: TrainConfig, seed: int) -> TimeOmni:
    model = TimeOmni.init(model_cfg, seed=seed)
    if train_cfg.adapter == "dora":
        dora_wrap(model, train_cfg.dora_rank, train_cfg.dora_alpha, seed=seed)
    return model


def save_run_checkpoint(path, model: TimeOmni, opt: Adam, cfg: RunConfig, next_step: int, total: int):
    arrays = dict(model.state())
    arrays.update(opt.state())
    meta = {
        "config_text": cfg.text,
        "model_config": model.config.to_dict(),
        "train_config": cfg.train.to_dict(),
        "seed": cfg.seed,
        "next_step": next_step,
        "total_steps": total,
        "adam_t": opt.t,
    }
    save_checkpoint(path, arrays, meta)


def load_run_checkpoint(path) -> tuple[TimeOmni, Adam, dict]:
    arrays, meta = load_checkpoint(path)
    mcfg = ModelConfig(**meta["model_config"])
    tcfg = TrainConfig(**meta["train_config"])
    model = build_model(mcfg, tcfg, meta["seed"])
    model.load_state({k: v for k, v in arrays.items() if not k.startswith("opt.")})
    opt = Adam(tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    opt.load({k: v for k, v in arrays.items() if k.startswith("opt.")}, meta["adam_t"])
    return model, opt, meta


# ---------------------------------------------------------------------------
# commands


def cmd_gen_toy(args) -> int:
    sizes = parse_sizes(args.sizes)
    if args.holdout is not None and not 0.0 < args.holdout < 1.0:
        raise UsageError("--holdout must lie in (0, 1)")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        ds = generate_toy_suite(args.seed, sizes)
        write_dataset(ds, out / DATASET_FILE)
        if args.holdout:
            train_ds, held = split_holdout(ds, args.holdout)
            write_dataset(train_ds, out / TRAIN_FILE)
            write_dataset(held, out / HELD_OUT_FILE)
        (out / MANIFEST_FILE).write_text(json.dumps(manifest_json(ds), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for task_id, (n, tt) in ds.manifest.items():
        print(f"{task_id}\t{tt.value}\t{n}")
    print(f"wrote {len(ds)} instances to {out / DATASET_FILE}")
    return 0


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    data_path = cfg.require("data.train")
    out = _out_dir(args, cfg)
    dataset = load_dataset(data_path)
    if args.resume:
        model, opt, meta = load_run_checkpoint(args.resume)
        start = meta["next_step"]
    else:
        model = build_model(cfg.model, cfg.train, cfg.seed)
        opt, start = None, 0
    rows = []

    def on_step(rec):
        rows.append(rec)
        if rec[0] % 50 == 0:
            log.info("step %d lr %.3g loss_u %.4f loss_g %.4f", *rec)

    try:
        result = train(dataset, cfg.train, model, opt, start_step=start, stop_step=args.max_steps, on_step=on_step)
    except NonFiniteLoss as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        _write_losses(out / LOSSES_FILE, rows)
        return 3
    _write_losses(out / LOSSES_FILE, rows)
    save_run_checkpoint(out / CHECKPOINT_FILE, model, result.optimizer, cfg, result.next_step, result.total_steps)
    print(f"trained steps {start}..{result.next_step} of {result.total_steps}; wrote {out / CHECKPOINT_FILE}")
    return 0


def _write_losses(path: Path, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss_u", "loss_g"])
        for step, lr, lu, lg in rows:
            w.writerow([step, repr(lr), repr(lu), repr(lg)])


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError("--checkpoint", f"file not found: {ckpt}")
    data = Path(args.data) if args.data else cfg.require("data.eval")
    if not data.is_file():
        raise ConfigError("--data", f"file not found: {data}")
    out = _out_dir(args, cfg)
    model, _, _ = load_run_checkpoint(ckpt)
    dataset = load_dataset(data)
    records = run_model(model, dataset, workers=cfg.eval.workers)
    report = score_run(dataset, {cfg.eval.model_name: records})
    (out / EVAL_FILE).write_text(report.dumps())
    (out / REPORT_FILE).write_text(render_text(report.scores, report.rankings))
    (out / MANIFEST_FILE).write_text(json.dumps(manifest_json(dataset), indent=2, sort_keys=True) + "\n")
    n_ok = sum(r.ok for r in records)
    print(f"evaluated {len(records)} instances ({n_ok} succeeded); wrote {out / EVAL_FILE}")
    return 0


def merge_reports(run_dirs) -> EvalReport:
    scores = {}
    manifest = {}
    for d in run_dirs:
        p = Path(d) / EVAL_FILE
        if not p.is_file():
            raise UsageError(f"{d}: no {EVAL_FILE}")
        try:
            s, man = report_from_json(json.loads(p.read_text()))
        except (KeyError, ValueError, TypeError) as exc:
            raise UsageError(f"{d}: malformed {EVAL_FILE}: {exc}") from None
        for m in s:
            if m in scores:
                raise UsageError(f"{d}: model {m!r} appears in more than one run")
        scores.update(s)
        manifest.update(man)
    tasks = set(manifest)
    for m, ts in scores.items():
        for t in tasks - set(ts):
            # a run that never attempted a task is treated as failing it
            info = manifest[t]
            disc = next((s.discipline for sc in scores.values() for tid, s in sc.items() if tid == t), "")
            ts[t] = TaskScore(t, TaskType(info["task_type"]), disc, {"success_rate": 0.0}, info["count"], 0)
    return EvalReport(scores, rank_scores(scores), manifest)


def cmd_report(args) -> int:
    report = merge_reports(args.runs)
    text = render_text(report.scores, report.rankings)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / REPORT_FILE).write_text(text)
        (out / EVAL_FILE).write_text(report.dumps())
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="timeomni", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-toy", help="write the synthetic toy suite")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", required=True)
    g.add_argument("--sizes", action="append", help="family=count[,family=count...]")
    g.add_argument("--holdout", type=float, help="also write a train / held-out split with this fraction")
    g.set_defaults(func=cmd_gen_toy)

    t = sub.add_parser("train", help="train from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--max-steps", type=int, help="stop after this global step")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="merge eval runs into one ranked table")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

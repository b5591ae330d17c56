"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from collections import Counter
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DatasetFormatError, generate_dataset, load_dataset, save_dataset
from .experiments import (ABLATION_HEADER, MEDIAN_HEADER, SWEEP_HEADER, RunConfig, ablate, ablation_medians,
                          ablation_trend, encode_for, reference_config, run_training, split_dataset,
                          sweep_answer_dim, write_csv)
from .train import EpochRecord, evaluate

log = logging.getLogger("semiopen_vqa")

EVAL_HEADER = ("open_acc", "closed_acc", "overall_acc", "n_open", "n_closed", "correct_open", "correct_closed")


class CommandError(RuntimeError):
    """Runtime failure reported with exit code 1."""


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _existing_file(text: str) -> Path:
    p = Path(text)
    if not p.is_file():
        raise argparse.ArgumentTypeError(f"no such file: {text}")
    return p


def _load_run_config(path: Path | None) -> RunConfig:
    return RunConfig.load(path) if path is not None else reference_config()


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    over = {}
    for key in ("epochs", "batch_size", "lr", "seed", "dtype"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    if "seed" in over:
        over["shuffle_seed"] = over["seed"]
    for item in getattr(args, "set", None) or []:
        key, _, raw = item.partition("=")
        try:
            over[key] = json.loads(raw)
        except json.JSONDecodeError:
            over[key] = raw
    try:
        return cfg.with_overrides(**over)
    except (KeyError, ValueError, TypeError) as exc:
        raise CommandError(f"bad config override: {exc}") from None


def _load_data(path: Path, what: str = "dataset"):
    try:
        return load_dataset(path)
    except DatasetFormatError as exc:
        raise CommandError(f"cannot read {what}: {exc}") from None


def _grid_of(samples) -> int:
    return samples[0].image.grid_size


def _print_counts(samples, vocab) -> None:
    counts = Counter(s.answer for s in samples)
    print("answer\tcount")
    for ans in vocab.answers:
        print(f"{ans}\t{counts.get(ans, 0)}")
    q = Counter(s.qtype for s in samples)
    print(f"closed={q.get('closed', 0)} open={q.get('open', 0)} total={len(samples)}")


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    samples, vocab = generate_dataset(args.n, args.grid, args.seed, max_count=args.max_count)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        save_dataset(samples, vocab, out)
    except OSError as exc:
        raise CommandError(f"cannot write {out}: {exc}") from None
    print(f"wrote {len(samples)} samples to {out} (seed={args.seed}, grid={args.grid})")
    _print_counts(samples, vocab)
    return 0


def _prepare(args, cfg: RunConfig):
    samples, vocab = _load_data(args.data)
    cfg = cfg.fitted_to(vocab, _grid_of(samples))
    ds = encode_for(cfg, samples, vocab)
    if getattr(args, "val", None) is not None:
        val_samples, val_vocab = _load_data(args.val, "validation dataset")
        if val_vocab.answers != vocab.answers:
            raise CommandError("validation dataset vocabulary differs from training dataset")
        return cfg, vocab, ds, encode_for(cfg, val_samples, vocab)
    train_set, val_set = split_dataset(ds, cfg.val_fraction)
    return cfg, vocab, train_set, val_set


def cmd_train(args) -> int:
    cfg = _apply_overrides(_load_run_config(args.config), args)
    cfg, vocab, train_set, val_set = _prepare(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    print(f"training {cfg.model.fusion_kind}+{cfg.model.head_kind} on {len(train_set)} samples, "
          f"validating on {len(val_set)} (seed={cfg.model.seed}, shuffle_seed={cfg.shuffle_seed})")

    def progress(rec: EpochRecord) -> None:
        v = rec.val.row() if rec.val else {}
        print(f"epoch {rec.epoch:3d}  loss {rec.mean_loss:.6f}  val open {v.get('open_acc', '')} "
              f"closed {v.get('closed_acc', '')} overall {v.get('overall_acc', '')}", flush=True)

    t0 = time.perf_counter()
    try:
        model, state, result = run_training(cfg, train_set, val_set, progress=progress)
    except (ValueError, FloatingPointError) as exc:
        raise CommandError(f"training failed: {exc}") from None
    model.answer_vocab = vocab.answers
    with open(out / "history.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EpochRecord.HEADER)
        for rec in result.history:
            w.writerow(rec.row())
    save_checkpoint(out / "final.ckpt", model, state)
    save_checkpoint(out / "best.ckpt", model, state, result.best_params)
    final = result.history[-1].val if result.history else evaluate(model, val_set)
    print(f"done in {time.perf_counter() - t0:.1f}s; best epoch {state.best_epoch} "
          f"(val overall {state.best_val_acc:.4f}); final val overall {final.overall_acc:.4f}")
    return 0


def cmd_eval(args) -> int:
    try:
        model, _ = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise CommandError(f"cannot load checkpoint: {exc}") from None
    samples, vocab = _load_data(args.data)
    ckpt_vocab = getattr(model, "answer_vocab", None)
    if ckpt_vocab is not None and tuple(ckpt_vocab) != vocab.answers:
        raise CommandError("answer vocabulary mismatch: the dataset's answers differ from the checkpoint's "
                           f"({len(vocab)} vs {len(ckpt_vocab)} classes)")
    if len(vocab) != model.cfg.num_answer_classes or _grid_of(samples) ** 2 != model.cfg.num_image_tokens:
        raise CommandError(f"dataset does not fit the checkpoint: {len(vocab)} answers / "
                           f"{_grid_of(samples) ** 2} cells vs {model.cfg.num_answer_classes} / "
                           f"{model.cfg.num_image_tokens}")
    ds = encode_for(RunConfig(model=model.cfg), samples, vocab)
    rep = evaluate(model, ds)
    row = rep.row()
    print("open_acc\tclosed_acc\toverall_acc")
    print(f"{row['open_acc'] or 'n/a'}\t{row['closed_acc'] or 'n/a'}\t{row['overall_acc']}")
    if args.out is not None:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_csv(out, EVAL_HEADER, [{**row, "correct_open": rep.correct_open,
                                      "correct_closed": rep.correct_closed}])
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    if args.dims != "tiny":
        raise CommandError(f"only --dims tiny is supported, got {args.dims!r}")
    t0 = time.perf_counter()
    reports = run_suite(h=args.h, tol=args.tol)
    failed = [r for r in reports if not r.passed]
    for r in reports:
        print(r)
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed in {time.perf_counter() - t0:.1f}s")
    if failed:
        print("failed: " + ", ".join(r.name for r in failed))
        return 1
    return 0


def cmd_ablate(args) -> int:
    cfg = _apply_overrides(_load_run_config(args.config), args)
    cfg, _, train_set, val_set = _prepare(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    seeds = list(range(args.seed_base, args.seed_base + args.seeds))
    rows = ablate(cfg, train_set, val_set, seeds)
    medians = ablation_medians(rows)
    write_csv(out / "ablation.csv", ABLATION_HEADER, rows)
    write_csv(out / "ablation_medians.csv", MEDIAN_HEADER, medians)
    for m in medians:
        print(f"#{m['row']} {m['fusion']:>4}+{m['head']:<7} median overall {m['median_overall_acc']}")
    checks = ablation_trend(medians)
    for name, ok in checks:
        print(f"{'ok ' if ok else 'NO '} {name}")
    print(f"trend: {sum(ok for _, ok in checks)}/{len(checks)} comparisons hold (seeds {seeds})")
    return 0


def cmd_sweep_dim(args) -> int:
    cfg = _apply_overrides(_load_run_config(args.config), args)
    cfg, _, train_set, val_set = _prepare(args, cfg)
    try:
        dims = [int(d) for d in args.dims.split(",") if d.strip()]
    except ValueError:
        raise CommandError(f"--dims must be a comma-separated list of integers, got {args.dims!r}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    try:
        rows = sweep_answer_dim(dims, cfg, train_set, val_set)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    write_csv(out / "sweep.csv", SWEEP_HEADER, rows)
    for r in rows:
        print(f"D_a={r['answer_embed_dim']}: overall {r['overall_acc']}")
    return 0


# ------------------------------------------------------------------ parser

def _add_train_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=_existing_file, help="JSON run config (default: built-in reference)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=_positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, help="model init seed; also used as the shuffle seed")
    p.add_argument("--dtype", choices=("float64", "float32"))
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semiopen-vqa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=_positive_int, default=5000)
    p.add_argument("--grid", type=_positive_int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-count", dest="max_count", type=_positive_int, default=6)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model; writes checkpoints, history.csv and config.json")
    p.add_argument("--data", type=_existing_file, required=True)
    p.add_argument("--val", type=_existing_file, help="held-out dataset (default: split by val_fraction)")
    p.add_argument("--out", required=True)
    _add_train_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", type=_existing_file, required=True)
    p.add_argument("--data", type=_existing_file, required=True)
    p.add_argument("--out", help="CSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--dims", default="tiny")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="fusion x head ablation grid")
    p.add_argument("--data", type=_existing_file, required=True)
    p.add_argument("--val", type=_existing_file)
    p.add_argument("--seeds", type=_positive_int, default=5)
    p.add_argument("--seed-base", dest="seed_base", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_train_overrides(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-dim", help="answer-embedding dimension sweep")
    p.add_argument("--data", type=_existing_file, required=True)
    p.add_argument("--val", type=_existing_file)
    p.add_argument("--dims", required=True, help="comma-separated, e.g. 64,128,256")
    p.add_argument("--out", required=True)
    _add_train_overrides(p)
    p.set_defaults(func=cmd_sweep_dim)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

Exit codes: 0 ok, 1 check failure, 2 usage/config error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import gradcheck
from .config import ConfigError, RunConfig, resolve
from .data import ImageDecodeError, generate_synthetic, load_dataset
from .evaluator import NoEpisodesEvaluated, aggregate, evaluate, export_embeddings
from .optim import NonFiniteGradientError
from .serialization import CheckpointFormatError
from .trainer import NonFiniteLossError, TooManySkippedEpisodes, train, write_run_dir
from .vit import ViTModel

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("protovit")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _run_options(p: argparse.ArgumentParser, training: bool = True) -> None:
    """Flags that override RunConfig fields (all default to None = not given)."""
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", help="INI-style config file or a run.json")
    g.add_argument("--preset", choices=["small", "tiny", "micro"])
    g.add_argument("--precision", type=int, choices=[32, 64])
    if training:
        g.add_argument("--episodes", type=int)
    else:
        g.add_argument("--episodes", type=int, dest="eval_episodes", help="episodes per repeat (default 100)")
    g.add_argument("--ways", type=int)
    g.add_argument("--shots", type=int)
    g.add_argument("--queries", type=int)
    g.add_argument("--eval-freq", type=int)
    g.add_argument("--val-episodes", type=int)
    g.add_argument("--clip-max-norm", type=float)
    g.add_argument("--lr", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--optimizer", choices=["decoupled", "coupled"])
    g.add_argument("--distance", choices=["squared", "unsquared"])
    g.add_argument("--meta-batch", type=int)
    g.add_argument("--target-size", type=int)
    g.add_argument("--hflip-prob", type=float)
    g.add_argument("--max-rotation-degrees", type=float)
    g.add_argument("--data", help="dataset root containing <split>/<class>/*.ppm")
    g.add_argument("--train-split")
    g.add_argument("--val-split", help="validation split (default: the training split)")
    g.add_argument("--seed", type=int, help="random seed (fallback: $PROTOVIT_SEED, then 42)")
    g.add_argument("--workers", type=int)


_RUN_KEYS = [
    "preset", "precision", "episodes", "ways", "shots", "queries", "eval_freq", "val_episodes",
    "clip_max_norm", "lr", "weight_decay", "optimizer", "distance", "meta_batch", "target_size",
    "hflip_prob", "max_rotation_degrees", "data", "train_split", "val_split", "seed", "workers",
]


def _resolve(args, extra: Optional[dict] = None) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in _RUN_KEYS}
    overrides.update(extra or {})
    return resolve(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="protovit", description="ViT prototypical networks for few-shot classification")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic PPM dataset")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="episodic training; writes a run directory")
    _run_options(p)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over test episodes")
    _run_options(p, training=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", dest="eval_split")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out", help="directory for report.json / report.txt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    p.add_argument("--ops", help=f"comma-separated subset of: {','.join(gradcheck.CASE_NAMES)}")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-embeddings", help="CSV of eval-mode CLS embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.classes < 2:
        raise ConfigError("--classes must be >= 2")
    seed = args.seed if args.seed is not None else resolve(None, {}).seed
    generate_synthetic(args.out, args.classes, args.per_class, args.size, seed, split=args.split)
    print(Path(args.out) / args.split / "manifest.txt")
    return EXIT_OK


def _load_split(root: str, split: str):
    if not root:
        raise ConfigError("--data is required")
    try:
        return load_dataset(root, split)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(args) -> int:
    cfg = _resolve(args)
    tcfg = cfg.train_config()
    train_ds = _load_split(cfg.data, cfg.train_split)
    val_ds = _load_split(cfg.data, cfg.val_split) if cfg.val_split else train_ds
    model = ViTModel(cfg.vit_config(), seed=cfg.seed, dtype=cfg.dtype)
    started = time.time()
    result = train(model, train_ds, val_ds, tcfg)
    meta = {
        "config": cfg.to_dict(),
        "vit_config": model.config.to_dict(),
        "seed": cfg.seed,
        "distance_mode": cfg.distance,
        "optimizer_mode": cfg.optimizer,
        "meta_batch": cfg.meta_batch,
        "meta_batch_note": "episodes whose gradients are averaged per optimizer step (1 = one episode per step)",
        "dataset_manifest_hash": train_ds.manifest_hash(),
        "val_manifest_hash": val_ds.manifest_hash(),
        "wall_seconds": round(time.time() - started, 3),
    }
    run_dir = write_run_dir(args.out, result, meta)
    print(f"run written to {run_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    extra = {"eval_split": getattr(args, "eval_split", None),
             "eval_episodes": getattr(args, "eval_episodes", None)}
    cfg = _resolve(args, extra)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    if args.repeats < 1:
        raise ConfigError("--repeats must be >= 1")
    model = ViTModel.load(ckpt, dtype=cfg.dtype)
    dataset = _load_split(cfg.data, cfg.eval_split)
    augment = cfg.augment(model.config.image_size)
    reports = []
    for r in range(args.repeats):
        rep = evaluate(model, dataset, cfg.spec(), cfg.eval_episodes, seed=cfg.seed + r, augment=augment,
                       workers=cfg.workers, distance=cfg.distance)
        reports.append(rep)
    blocks = []
    for r, rep in enumerate(reports):
        head = f"[repeat {r + 1}/{len(reports)} seed {cfg.seed + r}]\n" if len(reports) > 1 else ""
        blocks.append(head + rep.text())
    text = "\n".join(blocks)
    agg = aggregate(reports) if len(reports) > 1 else None
    if agg:
        text += (f"\n[aggregate over {agg['repeats']} repeats]\n"
                 f"Mean of means: {agg['mean_of_means'] * 100:.2f}%, mean 95% CI: ±{agg['mean_of_ci95'] * 100:.2f}%\n"
                 f"Pooled ({agg['pooled_episodes']} episodes): {agg['pooled_mean'] * 100:.2f}% "
                 f"±{agg['pooled_ci95'] * 100:.2f}%")
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if len(reports) == 1:
            (out / "report.json").write_text(reports[0].to_json() + "\n")
        else:
            for r, rep in enumerate(reports):
                (out / f"report_{r + 1}.json").write_text(rep.to_json() + "\n")
            (out / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
        (out / "report.txt").write_text(text + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ops = [o.strip() for o in args.ops.split(",") if o.strip()] if args.ops else None
    try:
        results = gradcheck.run(ops, seed=args.seed)
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from None
    width = max(len(n) for n in results)
    failed = []
    print(f"{'op':<{width}}  max rel err  status")
    for name, err in results.items():
        ok = err <= gradcheck.TOLERANCE
        if not ok:
            failed.append(name)
        print(f"{name:<{width}}  {err:11.3e}  {'ok' if ok else 'FAIL'}")
    if failed:
        for name in failed:
            print(f"gradcheck failed: {name} (error {results[name]:.3e} > {gradcheck.TOLERANCE:g})",
                  file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_export(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    model = ViTModel.load(ckpt)
    dataset = _load_split(args.data, args.split)
    export_embeddings(model, dataset, args.out)
    print(args.out)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointFormatError, ImageDecodeError, TooManySkippedEpisodes) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, NonFiniteGradientError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NoEpisodesEvaluated as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())

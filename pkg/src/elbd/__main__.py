"""Command line: python -m elbd <subcommand> ...

Subcommands: train, score, optimize, gen-exp, cls-exp, report.
Every subcommand that takes ``--config`` also accepts ``--set key=value``
overrides, which win over the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .data import split
from .mathcore import Rng
from .models import load_model, save_model
from .optimize import optimized_eval
from .select import ScoreTable, build_mask


def _overrides(pairs):
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise SystemExit(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args) -> ex.ExperimentConfig:
    over = _overrides(args.set)
    if args.config:
        return ex.load_config(args.config, over)
    return ex.parse_config_text("", over)


def _data(cfg):
    ds = ex.load_dataset(cfg)
    return split(ds, cfg.split_ratio, Rng(cfg.data_seed).split("split"))


def cmd_train(args):
    cfg = _config(args)
    train_set, _ = _data(cfg)
    out = cfg.output_path()
    for seed in cfg.seeds:
        model = ex.train_seed(cfg, train_set, seed)
        path = out / f"seed_{seed}" / "model.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_model(model, path)
        print(path)


def cmd_score(args):
    cfg = _config(args)
    model = load_model(args.checkpoint)
    train_set, _ = _data(cfg)
    xs = train_set.images[: cfg.score_batch]
    y = train_set.labels[: cfg.score_batch] if train_set.labels is not None else None
    rng = Rng(args.seed).split("score", args.method)
    if args.method == "elbd":
        table = ex.score_latents("elbd", model, xs, y if model.kind == "cvae" else None, rng, cfg)
    else:
        z = ex.latent_samples(model, xs, y if model.kind == "cvae" else None, rng.split("z"))
        table = ex.baseline_scores(args.method, z, y, rng)
    table.to_csv(args.out)
    print(args.out)


def cmd_optimize(args):
    cfg = _config(args)
    model = load_model(args.checkpoint)
    _, test_set = _data(cfg)
    mask = build_mask(ScoreTable.from_csv(args.scores), cfg.fraction)
    y = test_set.labels if model.kind == "cvae" else None
    res = optimized_eval(model, test_set.images, mask, cfg.K, Rng(args.seed).split("opt"), y,
                         repeats=cfg.repeats)
    res["mask"] = mask.to_text()
    print(json.dumps(res, sort_keys=True))


def cmd_gen_exp(args):
    print(ex.run_generative(_config(args), overwrite=args.overwrite))


def cmd_cls_exp(args):
    print(ex.run_classification(_config(args), overwrite=args.overwrite))


def cmd_report(args):
    try:
        print(ex.report(args.run_dir, overwrite=args.overwrite), end="")
    except ex.ReportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elbd")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", type=Path)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE")
        return sp

    with_config(sub.add_parser("train")).set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("score"))
    sp.add_argument("--checkpoint", required=True, type=Path)
    sp.add_argument("--method", default="elbd")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, type=Path)
    sp.set_defaults(func=cmd_score)

    sp = with_config(sub.add_parser("optimize"))
    sp.add_argument("--checkpoint", required=True, type=Path)
    sp.add_argument("--scores", required=True, type=Path)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_optimize)

    for name, fn in (("gen-exp", cmd_gen_exp), ("cls-exp", cmd_cls_exp)):
        sp = with_config(sub.add_parser(name))
        sp.add_argument("--overwrite", action="store_true")
        sp.set_defaults(func=fn)

    sp = sub.add_parser("report")
    sp.add_argument("run_dir", type=Path)
    sp.add_argument("--overwrite", action="store_true")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except (ex.RunConflictError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

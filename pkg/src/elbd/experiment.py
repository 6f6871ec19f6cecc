"""Config-driven experiment pipelines.

Generative protocol: train -> score latents -> build pi-mask -> optimized
evaluation, per seed and method, aggregated as mean(std) over seeds.
Classification protocol: score input features, keep the top fraction,
retrain a classifier per seed, report accuracy.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classify import MlpClassifier
from .data import Dataset, SynthSpec, discretize_255, load_mnist_subset, split, synth_gen
from .mathcore import Rng, sample_rows
from .models import VaeModel, build_model, eval_losses, posterior_sample, save_model, train
from .optimize import optimized_eval, selected_mutual_info
from .select import (
    BASELINES,
    PiMask,
    ScoreTable,
    baseline_scores,
    build_mask,
    elbd,
    gelbd,
    selection_count,
    top_indices,
)

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "ELBD_OUTPUT_ROOT"
RESULT_COLUMNS = ["model", "posterior", "method", "loss_kind", "mean", "std", "seed_count"]
MODEL_LABELS = {"vae": "VAE", "cvae": "CVAE", "nf": "NF-VAE", "iaf": "IAF-VAE"}
POSTERIOR_LABELS = {"mean_field": "MF", "full_cov": "FC"}


class RunConflictError(RuntimeError):
    pass


class ReportError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = "synth"  # "synth" or "mnist"
    n_images: int = 1000
    split_ratio: tuple = (4, 1)
    data_seed: int = 0
    synth_side: int = 8
    synth_classes: int = 4
    synth_noise: float = 0.1
    synth_informative: int = 0  # > 0 selects the classification variant
    synth_separation: float = 1.0
    model_kind: str = "vae"
    posterior_kind: str = "mean_field"
    dim_z: int = 16
    hidden: tuple = (256, 256)
    flow_steps: int = -1  # -1: 2 for nf, 1 for iaf
    epochs: int = 20
    lr: float = 1e-3
    batch: int = 100
    score_batch: int = 2000
    score_samples: int = 1
    abs_inside: bool = True
    fraction: float = 0.6
    K: int = 15
    repeats: int = 1
    methods: tuple = ("elbd", "random")
    seeds: tuple = (0,)
    sweep_fractions: tuple = ()
    sweep_k: tuple = ()
    cls_hidden: tuple = (64,)
    cls_epochs: int = 30
    cls_lr: float = 1e-3
    cls_batch: int = 64
    output_dir: str = "runs/default"

    def __post_init__(self):
        for name in ("split_ratio", "hidden", "methods", "seeds", "sweep_fractions",
                     "sweep_k", "cls_hidden"):
            setattr(self, name, tuple(getattr(self, name)))
        if not 0.0 < self.fraction < 1.0:
            raise ValueError("fraction must lie in (0, 1)")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        known = set(BASELINES) | {"elbd", "gelbd"}
        bad = [m for m in self.methods if m not in known]
        if bad:
            raise ValueError(f"unknown methods: {bad}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def output_path(self) -> Path:
        p = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not p.is_absolute():
            p = Path(root) / p
        return p


def _coerce(default, text: str):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        out = []
        for t in items:
            for conv in (int, float):
                try:
                    out.append(conv(t))
                    break
                except ValueError:
                    continue
            else:
                out.append(t)
        return tuple(out)
    return text


def parse_config_text(text: str, overrides: dict | None = None) -> ExperimentConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment; lists are comma separated."""
    defaults = ExperimentConfig()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = val
    values.update(overrides or {})
    kwargs = {}
    for key, val in values.items():
        if not hasattr(defaults, key):
            raise ValueError(f"unknown config key {key!r}")
        default = getattr(defaults, key)
        kwargs[key] = _coerce(default, val) if isinstance(val, str) else val
    return ExperimentConfig(**kwargs)


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(), overrides)


# --- shared helpers -------------------------------------------------------

def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset == "mnist":
        return load_mnist_subset(cfg.n_images)
    if cfg.dataset == "synth":
        spec = SynthSpec(n=cfg.n_images, side=cfg.synth_side, classes=cfg.synth_classes,
                         noise=cfg.synth_noise,
                         informative=cfg.synth_informative or None,
                         separation=cfg.synth_separation)
        return synth_gen(spec, Rng(cfg.data_seed).split("synth"))
    raise ValueError(f"unknown dataset {cfg.dataset!r}")


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def _write_csv(path: Path, header, rows, config_hash: str) -> None:
    buf = io.StringIO()
    buf.write(f"# config_hash: {config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def _prepare_run_dir(cfg: ExperimentConfig, overwrite: bool) -> Path:
    out = cfg.output_path()
    manifest = out / "manifest.json"
    if manifest.exists() and not overwrite:
        old = json.loads(manifest.read_text()).get("config_hash")
        if old != cfg.hash():
            raise RunConflictError(
                f"{out} holds a run with config hash {old}; refusing to overwrite "
                f"with {cfg.hash()} (pass overwrite=True)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _mean_std(values):
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def latent_samples(model: VaeModel, x, y, rng: Rng) -> np.ndarray:
    """One reparameterized z per item (item k uses rng.split(k))."""
    post = model.encode(x, y)
    eps = sample_rows(rng, range(x.shape[0]), model.dim_z)
    return posterior_sample(model, post, eps)


def score_latents(method: str, model: VaeModel, x, y, rng: Rng, cfg: ExperimentConfig) -> ScoreTable:
    if method == "elbd":
        return elbd(model, x, y, rng, samples=cfg.score_samples, abs_inside=cfg.abs_inside)
    z = latent_samples(model, x, y, rng.split("z"))
    return baseline_scores(method, z, y, rng.split("baseline"))


# --- generative protocol --------------------------------------------------

def _model_from_config(cfg: ExperimentConfig, dim_x: int, label_count: int, rng: Rng):
    return build_model(cfg.model_kind, cfg.posterior_kind, dim_x, cfg.dim_z, rng,
                       hidden=cfg.hidden, label_count=label_count,
                       flow_steps=None if cfg.flow_steps < 0 else cfg.flow_steps)


def train_seed(cfg: ExperimentConfig, train_set: Dataset, seed: int) -> VaeModel:
    rng = Rng(seed)
    model = _model_from_config(cfg, train_set.dim_x, train_set.label_count, rng.split("init"))
    train(model, train_set, cfg.epochs, cfg.lr, cfg.batch, rng.split("train"))
    return model


def run_generative(cfg: ExperimentConfig, overwrite: bool = False) -> Path:
    """Run the full generative protocol; returns the run directory."""
    out = _prepare_run_dir(cfg, overwrite)
    chash = cfg.hash()
    ds = load_dataset(cfg)
    train_set, test_set = split(ds, cfg.split_ratio, Rng(cfg.data_seed).split("split"))
    use_labels = cfg.model_kind == "cvae"
    y_train = train_set.labels if use_labels else None
    y_test = test_set.labels if use_labels else None
    label_for_baselines = train_set.labels

    cells, sweep_rows, ksweep_rows, errors, manifest_cells = [], [], [], [], []
    for seed in cfg.seeds:
        rng = Rng(seed)
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(exist_ok=True)
        try:
            model = train_seed(cfg, train_set, seed)
        except Exception as exc:  # keep going with the other seeds
            errors.append({"seed": seed, "stage": "train", "error": repr(exc)})
            log.warning("seed %s: training failed: %s", seed, exc)
            continue
        ckpt = seed_dir / "model.json"
        save_model(model, ckpt, meta={"config_hash": chash, "seed": seed})
        origin = eval_losses(model, test_set.images, y_test, rng.split("eval"))
        cells.append((seed, "origin", "-ELBO", origin["neg_elbo"], ckpt))
        cells.append((seed, "origin", "L2", origin["l2"], ckpt))

        pick = rng.split("score_batch").permutation(len(train_set))[: cfg.score_batch]
        pick = np.sort(pick)
        xs = train_set.images[pick]
        ys = None if y_train is None else y_train[pick]
        yb = label_for_baselines[pick] if label_for_baselines is not None else None
        for method in cfg.methods:
            try:
                if method == "elbd":
                    table = score_latents(method, model, xs, ys, rng.split("score", method), cfg)
                else:
                    post_y = ys if use_labels else None
                    z = latent_samples(model, xs, post_y, rng.split("score", method, "z"))
                    table = baseline_scores(method, z, yb, rng.split("score", method))
                table.to_csv(seed_dir / f"scores_{method}.csv", comment=f"config_hash: {chash}")
                mask = build_mask(table, cfg.fraction)
                (seed_dir / f"mask_{method}.txt").write_text(
                    f"# config_hash: {chash}\n{mask.to_text()}\n")
                res = optimized_eval(model, test_set.images, mask, cfg.K, rng.split("opt"),
                                     y_test, repeats=cfg.repeats)
                cells.append((seed, method, "-ELBO", res["neg_elbo"], ckpt))
                cells.append((seed, method, "L2", res["l2"], ckpt))
                entry = {"seed": seed, "method": method, "checkpoint": str(ckpt.relative_to(out)),
                         "scores": f"seed_{seed}/scores_{method}.csv", "mask": mask.to_text(),
                         "neg_elbo": res["neg_elbo"], "l2": res["l2"], "kl": res["kl"]}
                if cfg.posterior_kind == "full_cov":
                    entry["selected_mi"] = selected_mutual_info(model, test_set.images, mask, y_test)
                manifest_cells.append(entry)
                for frac in cfg.sweep_fractions:
                    m_f = build_mask(table, frac)
                    r_f = optimized_eval(model, test_set.images, m_f, cfg.K, rng.split("opt"),
                                         y_test, repeats=cfg.repeats)
                    sweep_rows.append((method, frac, seed, r_f["neg_elbo"], r_f["l2"]))
                for k in cfg.sweep_k:
                    r_k = optimized_eval(model, test_set.images, mask, int(k), rng.split("opt"),
                                         y_test, repeats=cfg.repeats)
                    ksweep_rows.append((method, int(k), seed, r_k["neg_elbo"], r_k["l2"]))
            except Exception as exc:
                errors.append({"seed": seed, "method": method, "stage": "score/optimize",
                               "error": repr(exc)})
                log.warning("seed %s method %s failed: %s", seed, method, exc)

    _write_csv(out / "cells.csv", ["seed", "method", "loss_kind", "value", "checkpoint"],
               [(s, m, k, _fmt(v), str(c.relative_to(out))) for s, m, k, v, c in cells], chash)

    model_label = f"{MODEL_LABELS[cfg.model_kind]}({POSTERIOR_LABELS[cfg.posterior_kind]})"
    rows = []
    for method in ("origin", *cfg.methods):
        for kind in ("-ELBO", "L2"):
            vals = [v for s, m, k, v, _ in cells if m == method and k == kind]
            if not vals:
                continue
            mean, std = _mean_std(vals)
            rows.append((model_label, cfg.posterior_kind, method, kind, _fmt(mean), _fmt(std), len(vals)))
    _write_csv(out / "results.csv", RESULT_COLUMNS, rows, chash)

    if sweep_rows:
        _write_csv(out / "sweep.csv", ["method", "fraction", "seed", "neg_elbo", "l2"],
                   [(m, f"{f:.2f}", s, _fmt(a), _fmt(b)) for m, f, s, a, b in sweep_rows], chash)
    if ksweep_rows:
        _write_csv(out / "ksweep.csv", ["method", "K", "seed", "neg_elbo", "l2"],
                   [(m, k, s, _fmt(a), _fmt(b)) for m, k, s, a, b in ksweep_rows], chash)

    manifest = {"kind": "generative", "config": cfg.to_dict(), "config_hash": chash,
                "cells": manifest_cells, "errors": errors}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


# --- classification protocol ----------------------------------------------

def feature_scores(method: str, train_d: Dataset, reference: MlpClassifier, rng: Rng) -> ScoreTable:
    if method == "gelbd":
        return gelbd(train_d, reference)
    return baseline_scores(method, train_d.images, train_d.labels, rng)


def run_classification(cfg: ExperimentConfig, overwrite: bool = False) -> Path:
    out = _prepare_run_dir(cfg, overwrite)
    chash = cfg.hash()
    ds = load_dataset(cfg)
    if ds.labels is None:
        raise ValueError("classification needs a labelled dataset")
    disc = discretize_255(ds)
    train_d, test_d = split(disc, cfg.split_ratio, Rng(cfg.data_seed).split("split"))
    n_cls = ds.label_count
    n_feat = disc.dim_x
    k = selection_count(n_feat, cfg.fraction)

    ref_rng = Rng(cfg.seeds[0] if cfg.seeds else 0).split("reference")
    reference = MlpClassifier(n_feat, n_cls, ref_rng.split("init"), hidden=cfg.cls_hidden)
    reference.fit(train_d.images, train_d.labels, ref_rng.split("fit"),
                  epochs=cfg.cls_epochs, lr=cfg.cls_lr, batch=cfg.cls_batch)

    informative = set(ds.meta.get("informative", []))
    rows, errors, entries = [], [], []
    for method in cfg.methods:
        try:
            table = feature_scores(method, train_d, reference, Rng(cfg.data_seed).split("fs", method))
            table.to_csv(out / f"scores_{method}.csv", comment=f"config_hash: {chash}")
            chosen = top_indices(table.scores, k)
            accs = []
            for seed in cfg.seeds:
                r = Rng(seed).split("cls", method)
                clf = MlpClassifier(len(chosen), n_cls, r.split("init"), hidden=cfg.cls_hidden)
                clf.fit(train_d.images[:, chosen], train_d.labels, r.split("fit"),
                        epochs=cfg.cls_epochs, lr=cfg.cls_lr, batch=cfg.cls_batch)
                accs.append(clf.accuracy(test_d.images[:, chosen], test_d.labels))
            mean, std = _mean_std(accs)
            rows.append((ds.name, method, _fmt(mean), _fmt(std), len(accs)))
            entry = {"method": method, "selected": chosen.tolist(), "accuracy": accs}
            if informative:
                entry["informative_recall"] = len(informative & set(chosen.tolist())) / len(informative)
            entries.append(entry)
        except Exception as exc:
            errors.append({"method": method, "error": repr(exc)})
            log.warning("method %s failed: %s", method, exc)
    _write_csv(out / "results.csv", ["dataset", "method", "mean", "std", "seed_count"], rows, chash)
    manifest = {"kind": "classification", "config": cfg.to_dict(), "config_hash": chash,
                "reference_accuracy": reference.accuracy(test_d.images, test_d.labels),
                "cells": entries, "errors": errors}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


# --- reporting --------------------------------------------------------------

def _svg_lines(series: dict, x_label: str, y_label: str, title: str) -> str:
    """Minimal SVG line chart: one polyline per series {name: [(x, y), ...]}."""
    w, h, pad = 480, 320, 50
    pts = [p for s in series.values() for p in s]
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    sx = lambda x: pad + (x - x0) / (x1 - x0) * (w - 2 * pad)
    sy = lambda y: h - pad - (y - y0) / (y1 - y0) * (h - 2 * pad)
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
             f'<text x="{w / 2}" y="20" text-anchor="middle">{title}</text>',
             f'<text x="{w / 2}" y="{h - 10}" text-anchor="middle">{x_label}</text>',
             f'<text x="12" y="{h / 2}" transform="rotate(-90 12 {h / 2})" '
             f'text-anchor="middle">{y_label}</text>',
             f'<rect x="{pad}" y="{pad}" width="{w - 2 * pad}" height="{h - 2 * pad}" '
             f'fill="none" stroke="#999"/>']
    for n, (name, s) in enumerate(sorted(series.items())):
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in sorted(s))
        color = colors[n % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" points="{coords}"/>')
        parts.append(f'<text x="{w - pad + 4}" y="{pad + 14 * (n + 1)}" fill="{color}" '
                     f'font-size="10">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _sweep_series(rows, x_key):
    acc = {}
    for r in rows:
        acc.setdefault(r["method"], {}).setdefault(float(r[x_key]), []).append(float(r["neg_elbo"]))
    return {m: [(x, float(np.mean(v))) for x, v in d.items()] for m, d in acc.items()}


def report(run_dir, plots: bool = True, overwrite: bool = False) -> str:
    """Markdown summary of a run directory; also writes summary.md (and SVGs).

    Refuses to replace a summary.md written for a different config hash
    unless ``overwrite`` is set.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir() or not any(run_dir.iterdir()):
        raise ReportError(f"no runs found in {run_dir}")
    missing = [n for n in ("results.csv", "manifest.json") if not (run_dir / n).exists()]
    if missing:
        raise ReportError(f"no runs found in {run_dir}: missing {', '.join(missing)}")
    rows = read_csv(run_dir / "results.csv")
    if not rows:
        raise ReportError(f"no runs found in {run_dir}: results.csv has no rows")
    manifest = json.loads((run_dir / "manifest.json").read_text())
    chash = manifest.get("config_hash")
    summary = run_dir / "summary.md"
    if summary.exists() and not overwrite:
        first = summary.read_text().splitlines()[:1]
        if first and f"config {chash})" not in first[0]:
            raise RunConflictError(f"{summary} was written for another config; "
                                   f"refusing to overwrite (pass overwrite=True)")
    cols = list(rows[0].keys())
    lines = [f"# Run summary ({manifest.get('kind', '?')}, config {chash})", "",
             "| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        lines.append("| " + " | ".join(r[c] for c in cols) + " |")
    if manifest.get("errors"):
        lines += ["", "## Errors", ""] + [f"- {json.dumps(e, sort_keys=True)}" for e in manifest["errors"]]
    if plots:
        for name, x_key, label in (("sweep", "fraction", "fraction selected"), ("ksweep", "K", "K")):
            f = run_dir / f"{name}.csv"
            if f.exists():
                series = _sweep_series(read_csv(f), x_key)
                (run_dir / f"{name}.svg").write_text(_svg_lines(series, label, "-ELBO", name))
                lines += ["", f"![{name}]({name}.svg)"]
    text = "\n".join(lines) + "\n"
    summary.write_text(text)
    return text

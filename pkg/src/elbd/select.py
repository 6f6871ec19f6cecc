"""Scoring latent variables (ELBD) and input features (gELBD, baselines),
and turning scores into pi-masks."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mathcore import Rng, SingularMatrixError, sample_rows, spd_inverse
from .models import VaeModel, posterior_sample
from .posterior import FullCovPosterior, conditional_moments, gaussian_kl_1d, kl_mf_closed, mutual_info_terms

BASELINES = ("fisher", "variance", "info_gain", "random")


@dataclass
class ScoreTable:
    method: str
    scores: np.ndarray
    decoder_term: np.ndarray
    kl_term: np.ndarray
    mi_term: np.ndarray

    def __post_init__(self):
        for name in ("scores", "decoder_term", "kl_term", "mi_term"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            setattr(self, name, arr)

    @classmethod
    def plain(cls, method, scores):
        scores = np.asarray(scores, dtype=np.float64)
        zeros = np.zeros_like(scores)
        return cls(method, scores, zeros, zeros, zeros)

    def __len__(self):
        return self.scores.size

    def to_csv(self, path, comment: str | None = None) -> None:
        """Write the table; ``comment`` becomes a leading ``# ...`` line."""
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "score", "decoder_term", "kl_term", "mi_term"])
            for i in range(len(self)):
                w.writerow([i] + [repr(float(a[i])) for a in
                                  (self.scores, self.decoder_term, self.kl_term, self.mi_term)])

    @classmethod
    def from_csv(cls, path, method="") -> "ScoreTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
        col = lambda k: np.array([float(r[k]) for r in rows])
        return cls(method, col("score"), col("decoder_term"), col("kl_term"), col("mi_term"))


@dataclass(frozen=True)
class PiMask:
    """0 marks a selected variable (goes into u), 1 a kept one (stays in w)."""

    bits: tuple

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("mask entries must be 0 or 1")
        if 0 not in self.bits or 1 not in self.bits:
            raise ValueError("mask needs at least one selected and one kept variable")

    @classmethod
    def from_selected(cls, d: int, selected) -> "PiMask":
        bits = [1] * d
        for i in selected:
            bits[int(i)] = 0
        return cls(tuple(bits))

    @property
    def array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.float64)

    @property
    def selected(self) -> np.ndarray:
        return np.flatnonzero(np.array(self.bits) == 0)

    @property
    def kept(self) -> np.ndarray:
        return np.flatnonzero(np.array(self.bits) == 1)

    def __len__(self):
        return len(self.bits)

    def to_text(self) -> str:
        return "".join(str(b) for b in self.bits)

    @classmethod
    def from_text(cls, s: str) -> "PiMask":
        """Parse a bit string; lines starting with ``#`` are ignored."""
        body = "".join(l.strip() for l in s.splitlines() if not l.lstrip().startswith("#"))
        return cls(tuple(int(c) for c in body))


def top_indices(scores, count: int) -> np.ndarray:
    """Indices of the ``count`` largest scores; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(scores.size), -scores))
    return np.sort(order[:count])


def selection_count(d: int, fraction: float) -> int:
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    if d < 2:
        raise ValueError("need at least two variables to split into w and u")
    # round half up, then keep both w and u non-empty
    k = int(np.floor(fraction * d + 0.5))
    return min(max(k, 1), d - 1)


def build_mask(scores, fraction: float) -> PiMask:
    if isinstance(scores, ScoreTable):
        scores = scores.scores
    scores = np.asarray(scores, dtype=np.float64)
    d = scores.size
    return PiMask.from_selected(d, top_indices(scores, selection_count(d, fraction)))


# --- ELBD ------------------------------------------------------------------

def _draws(model: VaeModel, n: int, rng: Rng, samples: int) -> np.ndarray:
    # item k always uses rng.split(k); shape (samples, n, d)
    eps = sample_rows(rng, range(n), (samples, model.dim_z))
    return np.swapaxes(eps, 0, 1)


def _decoder_terms(model, x, y, z, abs_inside: bool) -> np.ndarray:
    """Per-item, per-latent decoder term; shape (n, d).

    abs_inside: 0.5 * sum_k |(x - x')^2 - (x - x~)^2|_k (pseudocode form).
    otherwise the signed 0.5 * sum_k [(x - x~)^2 - (x - x')^2]_k, whose mean
    is the log-ratio expectation before taking the absolute value.
    """
    n, d = z.shape
    base = (x - model.decode(z, y)) ** 2
    out = np.empty((n, d))
    for i in range(d):
        zi = z.copy()
        zi[:, i] = 0.0
        delta = (x - model.decode(zi, y)) ** 2 - base
        out[:, i] = 0.5 * (np.abs(delta).sum(axis=1) if abs_inside else delta.sum(axis=1))
    return out


def _finish_decoder(per_item: np.ndarray, abs_inside: bool) -> np.ndarray:
    m = per_item.mean(axis=0)
    return m if abs_inside else np.abs(m)


def elbd_mf(model: VaeModel, x, y=None, rng: Rng = None, samples: int = 1,
            abs_inside: bool = True) -> ScoreTable:
    """ELBD scores for a mean-field model on the scoring batch ``x``."""
    if model.posterior_kind != "mean_field":
        raise ValueError("elbd_mf needs a mean-field model")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    post = model.encode(x, y)
    eps = _draws(model, n, rng, samples)
    dec = np.zeros((n, model.dim_z))
    for s in range(samples):
        z = posterior_sample(model, post, eps[s])
        dec += _decoder_terms(model, x, y, z, abs_inside)
    dec_term = _finish_decoder(dec / samples, abs_inside)
    kl_term = kl_mf_closed(post)[1].mean(axis=0)
    return ScoreTable("elbd", dec_term + kl_term, dec_term, kl_term, np.zeros(model.dim_z))


def _precisions(post: FullCovPosterior) -> np.ndarray:
    L = post.chol
    out = np.empty_like(L)
    for k in range(L.shape[0]):
        try:
            out[k] = spd_inverse(L[k])
        except SingularMatrixError as exc:
            raise SingularMatrixError(f"item {k}: {exc}") from exc
    return out


def elbd_fc(model: VaeModel, x, y=None, rng: Rng = None, samples: int = 1,
            abs_inside: bool = True) -> ScoreTable:
    """ELBD scores for a full-covariance model: decoder term plus the
    conditional KL of z_i given z_-i, minus the mutual information of z_i
    with z_-i (both single-sample, averaged over items)."""
    if model.posterior_kind != "full_cov":
        raise ValueError("elbd_fc needs a full-covariance model")
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape[0], model.dim_z
    post = model.encode(x, y)
    prec = _precisions(post)
    cov = post.cov
    eps = _draws(model, n, rng, samples)
    dec = np.zeros((n, d))
    kl = np.zeros((n, d))
    mi = np.zeros((n, d))
    for s in range(samples):
        z = posterior_sample(model, post, eps[s])
        dec += _decoder_terms(model, x, y, z, abs_inside)
        for i in range(d):
            m, v = conditional_moments(post.mu, prec, i, z)
            kl[:, i] += gaussian_kl_1d(m, v)
            mi[:, i] += mutual_info_terms(z, post.mu, cov, prec, i)
    dec_term = _finish_decoder(dec / samples, abs_inside)
    kl_term = kl.mean(axis=0) / samples
    mi_term = mi.mean(axis=0) / samples
    return ScoreTable("elbd", dec_term + kl_term - mi_term, dec_term, kl_term, mi_term)


def elbd(model: VaeModel, x, y=None, rng: Rng = None, **kw) -> ScoreTable:
    fn = elbd_mf if model.posterior_kind == "mean_field" else elbd_fc
    return fn(model, x, y, rng, **kw)


# --- gELBD and baselines --------------------------------------------------

def information_gain(values, labels) -> np.ndarray:
    """sum_y P(y) sum_v P(v|y) log(P(v|y) / P(v)) per feature, from counts.

    ``values`` are non-negative integers; empty cells contribute 0.
    """
    values = np.asarray(values)
    labels = np.asarray(labels, dtype=np.int64)
    n, f = values.shape
    n_cls = labels.max() + 1
    n_val = int(values.max()) + 1
    p_y = np.bincount(labels, minlength=n_cls) / n
    out = np.empty(f)
    for j in range(f):
        joint = np.bincount(labels * n_val + values[:, j], minlength=n_cls * n_val)
        joint = joint.reshape(n_cls, n_val).astype(np.float64)
        p_v = joint.sum(axis=0) / n
        with np.errstate(divide="ignore", invalid="ignore"):
            p_v_given_y = joint / joint.sum(axis=1, keepdims=True)
            terms = np.where(joint > 0, p_v_given_y * np.log(p_v_given_y / p_v), 0.0)
        out[j] = np.sum(p_y * np.nansum(terms, axis=1))
    return out


def information_gain_itemwise(values, labels) -> np.ndarray:
    """The same quantity written as (1/N) sum_k sum_v P(v|y_k) log(P(v|y_k)/P(v))."""
    values = np.asarray(values)
    labels = np.asarray(labels, dtype=np.int64)
    n, f = values.shape
    out = np.zeros(f)
    for j in range(f):
        col = values[:, j]
        uniq, counts = np.unique(col, return_counts=True)
        p_v = dict(zip(uniq.tolist(), (counts / n).tolist()))
        per_class = {}
        for c in np.unique(labels):
            sel = col[labels == c]
            vals, cnt = np.unique(sel, return_counts=True)
            total = 0.0
            for v, k in zip(vals.tolist(), cnt.tolist()):
                q = k / sel.size
                total += q * np.log(q / p_v[v])
            per_class[int(c)] = total
        out[j] = sum(per_class[int(c)] for c in labels) / n
    return out


def cross_entropy(labels, probs) -> np.ndarray:
    """Per-item negative log-likelihood of the true label."""
    p = probs[np.arange(len(labels)), labels]
    return -np.log(np.maximum(p, 1e-300))


def gelbd(data, classifier, loss_fn=cross_entropy, labels=None) -> ScoreTable:
    """gELBD per input feature.

    ``data`` holds integer features in [0, 255] (a discretized Dataset or a
    plain array with ``labels``); ``classifier.predict_proba`` must already be
    trained on the unmasked features. Masking feature i sets it to 0.
    """
    if hasattr(data, "images"):
        x, labels = data.images, data.labels
    else:
        x = np.asarray(data)
    if labels is None:
        raise ValueError("gELBD needs labels")
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.integer) or x.min() < 0 or x.max() > 255:
        raise ValueError("gELBD expects integer features in [0, 255]")
    labels = np.asarray(labels, dtype=np.int64)
    base = loss_fn(labels, classifier.predict_proba(x))
    f = x.shape[1]
    pred_term = np.empty(f)
    for i in range(f):
        xm = x.copy()
        xm[:, i] = 0
        pred_term[i] = np.mean(np.abs(base - loss_fn(labels, classifier.predict_proba(xm))))
    ig = information_gain(x, labels)
    return ScoreTable("gelbd", pred_term + ig, pred_term, ig, np.zeros(f))


def _quantile_bins(x, bins=10):
    out = np.empty(x.shape, dtype=np.int64)
    for j in range(x.shape[1]):
        edges = np.quantile(x[:, j], np.linspace(0, 1, bins + 1)[1:-1])
        out[:, j] = np.searchsorted(edges, x[:, j], side="right")
    return out


def baseline_scores(method: str, data, labels=None, rng: Rng = None) -> ScoreTable:
    """Simple comparison scores: fisher, variance, info_gain, random."""
    x = np.asarray(data, dtype=np.float64)
    d = x.shape[1]
    if method in ("fisher", "info_gain") and labels is None:
        raise ValueError(f"{method} score needs labels")
    if method == "variance":
        return ScoreTable.plain(method, x.var(axis=0))
    if method == "random":
        if rng is None:
            raise ValueError("random score needs an Rng")
        return ScoreTable.plain(method, rng.uniform(d))
    labels = np.asarray(labels, dtype=np.int64)
    if method == "fisher":
        mean = x.mean(axis=0)
        num = np.zeros(d)
        den = np.zeros(d)
        for c in np.unique(labels):
            xc = x[labels == c]
            num += len(xc) * (xc.mean(axis=0) - mean) ** 2
            den += len(xc) * xc.var(axis=0)
        return ScoreTable.plain(method, num / (den + 1e-12))
    if method == "info_gain":
        raw = np.asarray(data)
        if np.issubdtype(raw.dtype, np.integer) or np.all(x == np.round(x)) and x.min() >= 0:
            vals = x.astype(np.int64)
        else:
            vals = _quantile_bins(x)
        return ScoreTable.plain(method, information_gain(vals, labels))
    raise ValueError(f"unknown baseline {method!r}")

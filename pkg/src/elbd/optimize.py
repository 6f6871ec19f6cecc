"""Raising the ELBO of a trained model with a pi-mask.

The encoder is marginalized over the selected variables u (their posterior is
replaced by the standard normal, independent of w), and the decoder is
replaced by the average of K decoder means over fresh posterior draws of u
with w held fixed.
"""
from __future__ import annotations

import numpy as np

from .mathcore import Rng, sample_rows
from .models import VaeModel, posterior_sample
from .posterior import (
    FullCovPosterior,
    block_mutual_info,
    kl_fc_estimate,
    kl_mf_closed,
    mask_full_cov,
    mask_mean_field,
    reparam_fc,
)
from .select import PiMask


def _rows(y, sl):
    return None if y is None else np.asarray(y)[sl]


def marginal_kl_mf(model: VaeModel, x, mask: PiMask, y=None) -> float:
    """Dataset mean of KL(Q(w|x) || P(w)), computed on the masked posterior."""
    if model.posterior_kind != "mean_field":
        raise ValueError("marginal_kl_mf needs a mean-field model")
    post = mask_mean_field(model.encode(x, y), mask.array)
    return float(np.mean(kl_mf_closed(post)[0]))


def marginal_kl_fc(model: VaeModel, x, mask: PiMask, rng: Rng, y=None) -> float:
    """Dataset mean of the single-sample KL estimate on the masked posterior.

    Item ``k`` draws from ``rng.split(k)``.
    """
    if model.posterior_kind != "full_cov":
        raise ValueError("marginal_kl_fc needs a full-covariance model")
    post = mask_full_cov(model.encode(x, y), mask.array)
    eps = sample_rows(rng, range(post.mu.shape[0]), model.dim_z)
    z, _, _ = reparam_fc(post, eps=eps)
    return float(np.mean(kl_fc_estimate(z, eps, post)))


def marginal_kl(model: VaeModel, x, mask: PiMask, rng: Rng, y=None) -> float:
    if model.posterior_kind == "mean_field":
        return marginal_kl_mf(model, x, mask, y)
    return marginal_kl_fc(model, x, mask, rng, y)


def weak_decode(model: VaeModel, x, mask: PiMask, K: int, rng: Rng, y=None,
                chunk: int = 500) -> np.ndarray:
    """Average of K decoder means f(w, u_j), u_j resampled from the posterior.

    Item ``k`` takes its base draw (which fixes w) from ``rng.split("base")``
    and its j-th fresh draw from ``rng.split("fresh", j)``, both via
    ``sample_rows``. The fresh draws are therefore nested in K: the run with
    K = 5 reuses the four draws of the run with K = 4.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    sel = mask.array == 0.0
    out = np.empty_like(x)
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        items = range(sl.start, sl.stop)
        yb = _rows(y, sl)
        post = model.encode(x[sl], yb)
        z = posterior_sample(model, post, sample_rows(rng.split("base"), items, model.dim_z))
        acc = np.zeros((sl.stop - sl.start, model.dim_x))
        for j in range(1, K + 1):
            fresh = posterior_sample(model, post, sample_rows(rng.split("fresh", j), items, model.dim_z))
            z[:, sel] = fresh[:, sel]
            acc = acc + model.decode(z, yb) / K
        out[sl] = acc
    return out


def optimized_eval(model: VaeModel, x, mask: PiMask, K: int, rng: Rng, y=None,
                   repeats: int = 1) -> dict:
    """-ELBO and L2 of the optimized model on a test set.

    -ELBO = mean 0.5||x_bar - x||^2 + marginalized KL; ``repeats`` averages
    the reconstruction over independent base draws.
    """
    x = np.asarray(x, dtype=np.float64)
    recon = 0.0
    for r in range(repeats):
        x_bar = weak_decode(model, x, mask, K, rng.split("decode", r), y)
        recon += float(np.mean(0.5 * np.sum((x_bar - x) ** 2, axis=1)))
    recon /= repeats
    kl = marginal_kl(model, x, mask, rng.split("kl"), y)
    return {"neg_elbo": recon + kl, "l2": recon, "kl": kl}


def selected_mutual_info(model: VaeModel, x, mask: PiMask, y=None) -> float:
    """Mean exact MI between the selected block u and the kept block w.

    Zero for mean-field posteriors. Reported alongside results; no correction
    is applied for it.
    """
    if model.posterior_kind == "mean_field":
        return 0.0
    post = model.encode(x, y)
    vals = [block_mutual_info(post[k], mask.selected) for k in range(post.mu.shape[0])]
    return float(np.mean(vals))

import numpy as np
import pytest

from conftest import fixed_posterior_model, tiny_mf_model
from elbd.mathcore import Rng, sample_standard_normal
from elbd.models import build_model, eval_losses, posterior_sample
from elbd.nn import DenseNet, Layer
from elbd.optimize import (
    marginal_kl,
    marginal_kl_fc,
    marginal_kl_mf,
    optimized_eval,
    selected_mutual_info,
    weak_decode,
)
from elbd.posterior import FullCovPosterior, kl_fc_closed, kl_mf_closed, mask_full_cov
from elbd.select import PiMask


def random_mf(seed, d=6, dim_x=4):
    return build_model("vae", "mean_field", dim_x, d, Rng(seed), hidden=(7,))


# --- marginal KL -----------------------------------------------------------------

def test_marginal_kl_mf_additivity():
    m = random_mf(0)
    x = np.random.default_rng(0).uniform(size=(11, 4))
    mask = PiMask.from_selected(6, [1, 4, 5])
    total, per = kl_mf_closed(m.encode(x))
    expect = np.mean(total - per[:, [1, 4, 5]].sum(axis=1))
    assert abs(marginal_kl_mf(m, x, mask) - expect) < 1e-12
    assert marginal_kl_mf(m, x, mask) <= np.mean(total)


def test_marginal_kl_mf_standard_cases():
    m = fixed_posterior_model("mean_field", [0.5, 0.0, -1.0], [0.2, 0.0, -0.3])
    x = np.zeros((3, 1))
    assert marginal_kl_mf(m, x, PiMask((1, 0, 1))) == np.mean(kl_mf_closed(m.encode(x))[0])
    std = fixed_posterior_model("mean_field", np.zeros(3), np.zeros(3))
    assert marginal_kl_mf(std, x, PiMask((0, 1, 0))) == 0.0


def test_marginal_kl_fc_matches_closed_masked():
    g = np.random.default_rng(1)
    mu, log_diag = g.normal(size=3), g.uniform(-0.5, 0.5, 3)
    l_entries = g.normal(scale=0.6, size=3)
    m = fixed_posterior_model("full_cov", mu, log_diag, l_entries)
    mask = PiMask((1, 0, 1))
    n = 10**5
    x = np.zeros((n, 1))
    got = marginal_kl_fc(m, x, mask, Rng(2))
    target = kl_fc_closed(mask_full_cov(m.encode(x[:1]), mask.array)[0])
    # per-item spread from an independent sampler
    post = mask_full_cov(m.encode(x[:1]), mask.array)[0]
    eps = sample_standard_normal(Rng(50), (n, 3))
    z = post.mu + eps @ post.chol.T
    vals = -0.5 * np.sum(eps ** 2, 1) - post.log_diag.sum() + 0.5 * np.sum(z ** 2, 1)
    assert abs(got - target) < 3 * vals.std(ddof=1) / np.sqrt(n)


def test_marginal_kl_fc_standard_posterior():
    m = fixed_posterior_model("full_cov", np.zeros(3), np.zeros(3))
    assert abs(marginal_kl_fc(m, np.zeros((1000, 1)), PiMask((0, 1, 1)), Rng(0))) < 1e-12


def test_marginal_kl_posterior_checks():
    mf = random_mf(1)
    with pytest.raises(ValueError):
        marginal_kl_fc(mf, np.zeros((1, 4)), PiMask.from_selected(6, [0]), Rng(0))
    fc = build_model("vae", "full_cov", 4, 3, Rng(0), hidden=(5,))
    with pytest.raises(ValueError):
        marginal_kl_mf(fc, np.zeros((1, 4)), PiMask((0, 1, 1)))
    assert np.isfinite(marginal_kl(fc, np.zeros((2, 4)), PiMask((0, 1, 1)), Rng(0)))


# --- weak decode ---------------------------------------------------------------------

@pytest.mark.parametrize("post", ["mean_field", "full_cov"])
def test_weak_decode_k1_is_one_decode(post):
    m = build_model("vae", post, 4, 3, Rng(3), hidden=(5,))
    x = np.random.default_rng(0).uniform(size=(5, 4))
    mask = PiMask((0, 1, 0))
    rng = Rng(7)
    got = weak_decode(m, x, mask, 1, rng)
    p = m.encode(x)
    for k in range(5):
        e_base = sample_standard_normal(rng.split("base", k), (1, 3))
        e_fresh = sample_standard_normal(rng.split("fresh", 1, k), (1, 3))
        base = posterior_sample(m, p[k:k + 1], e_base)[0]
        fresh = posterior_sample(m, p[k:k + 1], e_fresh)[0]
        z = base.copy()
        z[[0, 2]] = fresh[[0, 2]]
        np.testing.assert_allclose(got[k], m.decode(z[None])[0], rtol=0, atol=1e-14)


def test_weak_decode_dead_u_equals_plain_decode():
    m = random_mf(2, d=3)
    m.decoder.layers[0].weight[:, [0, 2]] = 0.0
    x = np.random.default_rng(1).uniform(size=(4, 4))
    mask = PiMask((0, 1, 0))
    a = weak_decode(m, x, mask, 1, Rng(0))
    for K in (2, 7):
        np.testing.assert_allclose(weak_decode(m, x, mask, K, Rng(0)), a, rtol=0, atol=1e-14)


@pytest.mark.parametrize("post", ["mean_field", "full_cov"])
def test_weak_decode_linear_decoder_limit(post):
    g = np.random.default_rng(4)
    A = g.normal(size=(3, 2))  # f(z) = z A
    mu = np.array([0.3, -0.5, 0.8])
    if post == "mean_field":
        m = fixed_posterior_model(post, mu, [0.1, -0.4, 0.3], dim_x=2)
    else:
        m = fixed_posterior_model(post, mu, [0.1, -0.4, 0.3], [0.5, -0.2, 0.4], dim_x=2)
    # swap in an unbounded linear decoder; the limit is a closed form only for it
    m.decoder = DenseNet([Layer(A.T.copy(), np.zeros(2), "identity")])
    mask = PiMask((1, 0, 0))
    K = 10**4
    x = np.zeros((1, 2))
    rng = Rng(9)
    got = weak_decode(m, x, mask, K, rng)[0]
    post_obj = m.encode(x)
    base = posterior_sample(m, post_obj, sample_standard_normal(rng.split("base", 0), (1, 3)))[0]
    target = np.concatenate([base[:1], mu[1:]]) @ A
    cov = post_obj.cov[0] if post == "full_cov" else np.diag(np.exp(post_obj.log_var[0]))
    sel = [1, 2]
    se = np.sqrt(np.diag(A[sel].T @ cov[np.ix_(sel, sel)] @ A[sel]) / K)
    assert np.all(np.abs(got - target) < 4 * se)


def test_weak_decode_bounded_and_deterministic():
    m = random_mf(5)
    x = np.random.default_rng(2).uniform(size=(9, 4))
    mask = PiMask.from_selected(6, [0, 3, 4])
    a = weak_decode(m, x, mask, 15, Rng(1), chunk=4)
    assert np.array_equal(a, weak_decode(m, x, mask, 15, Rng(1), chunk=4))
    # other chunkings agree up to BLAS summation order
    np.testing.assert_allclose(weak_decode(m, x, mask, 15, Rng(1), chunk=9), a, rtol=0, atol=1e-14)
    assert np.max(np.abs(a)) <= 1.0
    with pytest.raises(ValueError):
        weak_decode(m, x, mask, 0, Rng(1))


# --- optimized evaluation --------------------------------------------------------------

def test_optimized_eval_terms():
    m = random_mf(6)
    x = np.random.default_rng(3).uniform(size=(8, 4))
    mask = PiMask.from_selected(6, [2, 5])
    res = optimized_eval(m, x, mask, 4, Rng(2))
    x_bar = weak_decode(m, x, mask, 4, Rng(2).split("decode", 0))
    recon = np.mean(0.5 * np.sum((x_bar - x) ** 2, axis=1))
    assert abs(res["l2"] - recon) < 1e-12
    assert abs(res["neg_elbo"] - recon - marginal_kl_mf(m, x, mask)) < 1e-12


def test_optimized_eval_dead_dim_k1_matches_origin():
    m = tiny_mf_model()
    m.decoder.layers[0].weight[:, 1] = 0.0
    enc = m.encoder.layers[0]
    enc.weight[[1, 4]] = 0.0
    enc.bias[[1, 4]] = 0.0
    x = np.random.default_rng(4).uniform(size=(20000, 2))
    opt = optimized_eval(m, x, PiMask((1, 0, 1)), 1, Rng(0))
    base = eval_losses(m, x, rng=Rng(1))
    # per-item reconstruction spread for the tolerance
    p = m.encode(x)
    z = posterior_sample(m, p, sample_standard_normal(Rng(3), (20000, 3)))
    r = 0.5 * np.sum((m.decode(z) - x) ** 2, axis=1)
    se = np.sqrt(2) * r.std(ddof=1) / np.sqrt(r.size)
    assert abs(opt["neg_elbo"] - base["neg_elbo"]) < 4 * se
    assert abs(opt["l2"] - base["l2"]) < 4 * se


def test_optimized_eval_repeats_average():
    m = random_mf(7)
    x = np.random.default_rng(5).uniform(size=(6, 4))
    mask = PiMask.from_selected(6, [1])
    r2 = optimized_eval(m, x, mask, 3, Rng(0), repeats=2)
    parts = [np.mean(0.5 * np.sum((weak_decode(m, x, mask, 3, Rng(0).split("decode", r)) - x) ** 2, 1))
             for r in range(2)]
    assert abs(r2["l2"] - np.mean(parts)) < 1e-12


def test_selected_mutual_info():
    assert selected_mutual_info(random_mf(0), np.zeros((2, 4)), PiMask.from_selected(6, [0])) == 0.0
    rho = 0.6
    Lc = np.linalg.cholesky(np.array([[1.0, rho], [rho, 1.0]]))
    m = fixed_posterior_model("full_cov", np.zeros(2), np.log(np.diag(Lc)), [Lc[1, 0]])
    mi = selected_mutual_info(m, np.zeros((3, 1)), PiMask((0, 1)))
    assert abs(mi + 0.5 * np.log(1 - rho ** 2)) < 1e-12
    assert isinstance(m.encode(np.zeros((1, 1))), FullCovPosterior)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from elbd.mathcore import Rng, SingularMatrixError, sample_standard_normal
from elbd.posterior import (
    FullCovPosterior,
    MeanFieldPosterior,
    block_mutual_info,
    conditional_kl,
    conditional_kl_block,
    gaussian_kl_1d,
    kl_fc_closed,
    kl_fc_estimate,
    kl_mf_closed,
    m_projection_mean,
    mask_full_cov,
    mask_mean_field,
    mutual_info_estimate,
    mutual_info_terms,
    reparam_fc,
    reparam_mf,
)


def random_fc(g, d, spread=0.6):
    return FullCovPosterior(g.normal(size=d), g.uniform(-0.5, 0.5, d),
                            np.tril(spread * g.normal(size=(d, d)), -1))


def draws(p, n, seed):
    eps = sample_standard_normal(Rng(seed), (n, p.dim))
    batch = FullCovPosterior(np.broadcast_to(p.mu, (n, p.dim)), np.broadcast_to(p.log_diag, (n, p.dim)),
                             np.broadcast_to(p.l_strict, (n, p.dim, p.dim)))
    z, _, _ = reparam_fc(batch, eps=eps)
    return z, eps, batch


def within(values, target, k=3.0):
    se = values.std(ddof=1) / np.sqrt(values.size)
    return abs(values.mean() - target) <= k * se + 1e-12


# --- reparameterization ----------------------------------------------------

def test_reparam_mf_examples():
    assert np.allclose(reparam_mf(MeanFieldPosterior([0.3], [-40.0]), eps=np.array([1.0])), 0.3, atol=1e-8)
    assert reparam_mf(MeanFieldPosterior([5.0], [0.0]), eps=np.array([1.0]))[0] == 6.0


def test_reparam_mf_moments():
    n = 10**5
    p = MeanFieldPosterior(np.tile([1.0, -1.0], (n, 1)), np.tile(np.log([4.0, 0.25]), (n, 1)))
    z = reparam_mf(p, Rng(0))
    assert np.all(np.abs(z.mean(axis=0) - [1.0, -1.0]) < 4 * np.sqrt([4.0, 0.25] / np.float64(n)))
    # variance of the sample variance is 2 sigma^4 / n
    assert np.all(np.abs(z.var(axis=0) - [4.0, 0.25]) < 4 * np.sqrt(2 * np.array([16.0, 0.0625]) / n))


def test_reparam_fc_reduces_and_zero_noise():
    eps = np.array([0.3, -1.2, 0.5])
    p = FullCovPosterior(np.array([1.0, 2.0, 3.0]), np.zeros(3), np.zeros((3, 3)))
    z, e, L = reparam_fc(p, eps=eps)
    assert np.array_equal(z, reparam_mf(MeanFieldPosterior(p.mu, np.zeros(3)), eps=eps))
    assert np.array_equal(L, np.eye(3)) and e is eps
    q = random_fc(np.random.default_rng(0), 3)
    assert np.array_equal(reparam_fc(q, eps=np.zeros(3))[0], q.mu)


def test_reparam_fc_covariance():
    p = random_fc(np.random.default_rng(1), 3)
    z, _, _ = draws(p, 10**5, 2)
    emp = np.cov(z.T)
    sigma = p.cov
    # standard error of a sample covariance entry: sqrt((s_ij^2 + s_ii s_jj) / n)
    se = np.sqrt((sigma ** 2 + np.outer(np.diag(sigma), np.diag(sigma))) / 10**5)
    assert np.all(np.abs(emp - sigma) < 4 * se)
    assert np.all(np.abs(z.mean(axis=0) - p.mu) < 4 * np.sqrt(np.diag(sigma) / 10**5))


def test_fc_rejects_upper_entries():
    with pytest.raises(ValueError):
        FullCovPosterior(np.zeros(2), np.zeros(2), np.array([[0.0, 1.0], [0.0, 0.0]]))


# --- KL ----------------------------------------------------------------------

def test_kl_mf_closed_examples():
    total, per = kl_mf_closed(MeanFieldPosterior(np.zeros(4), np.zeros(4)))
    assert total == 0.0 and not per.any()
    total, _ = kl_mf_closed(MeanFieldPosterior([1.0], [0.0]))
    assert total == 0.5


def test_kl_mf_mc_cross_check():
    z = 1.0 + sample_standard_normal(Rng(4), 10**6)
    vals = stats.norm.logpdf(z, loc=1.0) - stats.norm.logpdf(z)
    assert within(vals, 0.5, k=4)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), d=st.integers(1, 10))
def test_kl_mf_additive_and_nonnegative(seed, d):
    g = np.random.default_rng(seed)
    total, per = kl_mf_closed(MeanFieldPosterior(g.normal(size=d), g.normal(size=d)))
    assert total == np.sum(per)
    assert np.all(per >= 0.0)


def test_kl_fc_estimate_standard_normal_is_zero():
    p = FullCovPosterior(np.zeros(3), np.zeros(3), np.zeros((3, 3)))
    assert kl_fc_estimate(np.zeros(3), np.zeros(3), p) == 0.0
    z, eps, batch = draws(p, 10**5, 0)
    assert np.allclose(kl_fc_estimate(z, eps, batch), 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_kl_fc_estimate_unbiased(seed):
    g = np.random.default_rng(seed)
    p = random_fc(g, int(g.integers(1, 9)))
    z, eps, batch = draws(p, 10**5, seed + 100)
    assert within(kl_fc_estimate(z, eps, batch), kl_fc_closed(p))


def test_kl_fc_closed_examples():
    assert kl_fc_closed(FullCovPosterior(np.zeros(3), np.zeros(3), np.zeros((3, 3)))) == 0.0
    assert abs(kl_fc_closed(FullCovPosterior([1.0], [0.0], [[0.0]])) - 0.5) < 1e-15


def test_kl_fc_closed_against_general_formula():
    g = np.random.default_rng(7)
    for _ in range(10):
        p = random_fc(g, 5)
        s = p.cov
        ref = 0.5 * (np.trace(s) + p.mu @ p.mu - 5 - np.log(np.linalg.det(s)))
        assert abs(kl_fc_closed(p) - ref) < 1e-10


# --- conditional KL -------------------------------------------------------

def schur_conditional(p, i, z_minus_i):
    """Conditional of z_i given the rest via the covariance Schur complement."""
    s = p.cov
    rest = np.delete(np.arange(p.dim), i)
    k = s[i, rest] @ np.linalg.inv(s[np.ix_(rest, rest)])
    mean = p.mu[i] + k @ (z_minus_i - p.mu[rest])
    var = s[i, i] - k @ s[rest, i]
    return mean, var


def quadrature_kl(mean, var):
    sd = np.sqrt(var)
    q = lambda t: stats.norm.pdf(t, mean, sd)
    f = lambda t: q(t) * (stats.norm.logpdf(t, mean, sd) - stats.norm.logpdf(t))
    val, _ = integrate.quad(f, mean - 12 * sd, mean + 12 * sd, epsabs=1e-12, epsrel=1e-12, limit=200)
    return val


def test_conditional_kl_diagonal_matches_mean_field():
    g = np.random.default_rng(0)
    mf = MeanFieldPosterior(g.normal(size=4), g.normal(size=4))
    fc = FullCovPosterior.from_mean_field(mf)
    per = kl_mf_closed(mf)[1]
    for i in range(4):
        for _ in range(3):
            assert abs(conditional_kl(fc, i, g.normal(size=3)) - per[i]) < 1e-12


def test_conditional_kl_standard_is_zero():
    p = FullCovPosterior(np.zeros(3), np.zeros(3), np.zeros((3, 3)))
    assert conditional_kl(p, 1, np.array([5.0, -2.0])) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_conditional_kl_quadrature(seed):
    g = np.random.default_rng(seed)
    p = random_fc(g, 3)
    i = int(g.integers(0, 3))
    zr = g.normal(size=2)
    assert abs(conditional_kl(p, i, zr) - quadrature_kl(*schur_conditional(p, i, zr))) < 1e-6


def test_conditional_kl_errors():
    p = random_fc(np.random.default_rng(0), 3)
    with pytest.raises(IndexError):
        conditional_kl(p, 3, np.zeros(2))
    with pytest.raises(ValueError):
        conditional_kl(p, 0, np.zeros(3))
    singular = FullCovPosterior(np.zeros(2), np.array([0.0, -800.0]), np.array([[0.0, 0.0], [1.0, 0.0]]))
    with pytest.raises(SingularMatrixError):
        conditional_kl(singular, 0, np.zeros(1))


def test_conditional_kl_block_reduces_to_scalar():
    g = np.random.default_rng(3)
    p = random_fc(g, 4)
    w = g.normal(size=3)
    assert abs(conditional_kl_block(p, [2], w) - conditional_kl(p, 2, w)) < 1e-10


def test_kl_difference_equals_expected_conditional_kl():
    # KL(full) - KL(with z_i replaced by N(0,1) independent) = E[KL(z_i | z_-i)]
    g = np.random.default_rng(5)
    p = random_fc(g, 3)
    i = 1
    rest = np.delete(np.arange(3), i)
    s_rest = p.cov[np.ix_(rest, rest)]
    kl_rest = 0.5 * (np.trace(s_rest) + p.mu[rest] @ p.mu[rest] - 2 - np.log(np.linalg.det(s_rest)))
    z, _, _ = draws(p, 20000, 9)
    vals = np.array([conditional_kl(p, i, zz[rest]) for zz in z])
    assert within(vals, kl_fc_closed(p) - kl_rest, k=4)


# --- mutual information ------------------------------------------------------

def test_mutual_info_diagonal_is_zero():
    g = np.random.default_rng(0)
    p = FullCovPosterior(g.normal(size=3), g.normal(size=3), np.zeros((3, 3)))
    for _ in range(20):
        assert abs(mutual_info_estimate(g.normal(size=3), p, 1)) < 1e-12


@pytest.mark.parametrize("rho", [0.3, -0.6, 0.9])
def test_mutual_info_bivariate(rho):
    L = np.linalg.cholesky(np.array([[1.0, rho], [rho, 1.0]]))
    p = FullCovPosterior(np.array([0.5, -0.2]), np.log(np.diag(L)), np.tril(L, -1))
    z, _, batch = draws(p, 10**5, 3)
    vals = mutual_info_terms(z, batch.mu, batch.cov, np.linalg.inv(batch.cov), 0)
    assert within(vals, -0.5 * np.log(1 - rho ** 2))
    assert abs(block_mutual_info(p, [0]) + 0.5 * np.log(1 - rho ** 2)) < 1e-12


def test_mutual_info_routes_agree_and_relabeling():
    g = np.random.default_rng(2)
    p = random_fc(g, 4)
    z = reparam_fc(p, eps=g.normal(size=4))[0]
    prec = np.linalg.inv(p.cov)
    for i in range(4):
        a = mutual_info_estimate(z, p, i)
        b = mutual_info_terms(z, p.mu, p.cov, prec, i)
        assert abs(a - b) < 1e-10
    # permute the coordinates other than i = 0 and rebuild the Cholesky factor
    perm = np.array([0, 3, 1, 2])
    cov_p = p.cov[np.ix_(perm, perm)]
    Lp = np.linalg.cholesky(cov_p)
    q = FullCovPosterior(p.mu[perm], np.log(np.diag(Lp)), np.tril(Lp, -1))
    assert abs(mutual_info_estimate(z[perm], q, 0) - mutual_info_estimate(z, p, 0)) < 1e-10


# --- M-projection --------------------------------------------------------------

def grid_kl(means, mu, half=7.0, n=701):
    t = np.linspace(-half, half, n)
    xx, yy = np.meshgrid(t, t, indexing="ij")
    pts = np.stack([xx, yy], axis=-1)
    mix = np.mean([np.exp(-0.5 * np.sum((pts - m) ** 2, axis=-1)) for m in means], axis=0) / (2 * np.pi)
    log_n = -0.5 * np.sum((pts - mu) ** 2, axis=-1) - np.log(2 * np.pi)
    integrand = mix * (np.log(mix) - log_n)
    return integrate.trapezoid(integrate.trapezoid(integrand, t, axis=1), t)


def test_m_projection_examples():
    assert np.array_equal(m_projection_mean([[0.3, -0.4]]), [0.3, -0.4])
    assert np.array_equal(m_projection_mean([[0.5, 0.2], [-0.5, -0.2]]), [0.0, 0.0])
    with pytest.raises(ValueError):
        m_projection_mean(np.zeros((0, 2)))


def test_m_projection_beats_perturbations():
    g = np.random.default_rng(0)
    means = g.uniform(-1, 1, (5, 2))
    mu = m_projection_mean(means)
    best = grid_kl(means, mu)
    for ang in g.uniform(0, 2 * np.pi, 20):
        delta = 0.1 * np.array([np.cos(ang), np.sin(ang)])
        assert best < grid_kl(means, mu + delta)


# --- masking -------------------------------------------------------------------

def test_mask_mean_field():
    p = MeanFieldPosterior(np.array([1.0, 2.0, 3.0]), np.array([0.5, 0.6, 0.7]))
    q = mask_mean_field(p, [1, 0, 1])
    assert np.array_equal(q.mu, [1.0, 0.0, 3.0]) and np.array_equal(q.log_var, [0.5, 0.0, 0.7])


def test_mask_full_cov_makes_block_standard_and_independent():
    p = random_fc(np.random.default_rng(4), 4)
    q = mask_full_cov(p, [1, 0, 1, 0])
    s = q.cov
    for i in (1, 3):
        expect = np.zeros(4)
        expect[i] = 1.0
        np.testing.assert_allclose(s[i], expect, atol=1e-15)
    assert np.all(q.mu[[1, 3]] == 0.0)
    assert not q.l_strict[[1, 3]].any() and not q.l_strict[:, [1, 3]].any()
    # kept rows keep their diagonal and their links to other kept coordinates
    assert np.array_equal(q.log_diag[[0, 2]], p.log_diag[[0, 2]])
    assert q.l_strict[2, 0] == p.l_strict[2, 0]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), mean=st.floats(-5, 5), log_var=st.floats(-10, 5))
def test_gaussian_kl_1d_nonnegative(seed, mean, log_var):
    assert gaussian_kl_1d(mean, np.exp(log_var)) >= 0.0

"""Gaussian posterior calculus for mean-field and full-covariance encoders.

Every function accepts a single posterior (vectors of length ``d``) and most
also accept a batch with leading dimension ``N``.

Full-covariance posteriors use the convention ``Sigma = L L^T`` with
``z = mu + L eps`` (column form), where ``L = l_strict + diag(exp(log_diag))``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mathcore import Rng, SingularMatrixError, sample_standard_normal, spd_inverse

LOG_2PI = np.log(2.0 * np.pi)
VAR_FLOOR = 1e-12


@dataclass
class MeanFieldPosterior:
    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        if self.mu.shape != self.log_var.shape:
            raise ValueError("mu and log_var shapes differ")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    def __getitem__(self, k) -> "MeanFieldPosterior":
        return MeanFieldPosterior(self.mu[k], self.log_var[k])


@dataclass
class FullCovPosterior:
    mu: np.ndarray
    log_diag: np.ndarray
    l_strict: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_diag = np.asarray(self.log_diag, dtype=np.float64)
        self.l_strict = np.asarray(self.l_strict, dtype=np.float64)
        d = self.mu.shape[-1]
        if self.log_diag.shape != self.mu.shape or self.l_strict.shape[-2:] != (d, d):
            raise ValueError("inconsistent full-covariance posterior shapes")
        if np.any(np.triu(self.l_strict) != 0.0):
            raise ValueError("l_strict must be zero on and above the diagonal")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @property
    def chol(self) -> np.ndarray:
        d = self.dim
        diag = np.exp(self.log_diag)[..., :, None] * np.eye(d)
        return self.l_strict + diag

    @property
    def cov(self) -> np.ndarray:
        L = self.chol
        return L @ np.swapaxes(L, -1, -2)

    def __getitem__(self, k) -> "FullCovPosterior":
        return FullCovPosterior(self.mu[k], self.log_diag[k], self.l_strict[k])

    @classmethod
    def from_mean_field(cls, p: MeanFieldPosterior) -> "FullCovPosterior":
        d = p.dim
        return cls(p.mu, 0.5 * p.log_var, np.zeros(p.mu.shape + (d,)))


def reparam_mf(p: MeanFieldPosterior, rng: Rng = None, eps=None) -> np.ndarray:
    if eps is None:
        eps = sample_standard_normal(rng, p.mu.shape)
    return eps * np.exp(0.5 * p.log_var) + p.mu


def reparam_fc(p: FullCovPosterior, rng: Rng = None, eps=None):
    """Return ``(z, eps, L)`` with ``z = mu + L eps``."""
    if eps is None:
        eps = sample_standard_normal(rng, p.mu.shape)
    L = p.chol
    z = p.mu + np.einsum("...jk,...k->...j", L, eps)
    return z, eps, L


def kl_mf_closed(p: MeanFieldPosterior):
    """KL(Q(z|x) || N(0, I)) and its per-dimension terms."""
    per_dim = 0.5 * (p.mu ** 2 + np.exp(p.log_var) - p.log_var - 1.0)
    return per_dim.sum(axis=-1), per_dim


def kl_fc_estimate(z, eps, p: FullCovPosterior):
    """Single-sample estimate log Q(z|x) - log P(z)."""
    log_q = -0.5 * np.sum(eps ** 2 + LOG_2PI, axis=-1) - np.sum(p.log_diag, axis=-1)
    log_p = -0.5 * np.sum(z ** 2 + LOG_2PI, axis=-1)
    return log_q - log_p


def kl_fc_closed(p: FullCovPosterior):
    L = p.chol
    trace = np.sum(L ** 2, axis=(-2, -1))
    logdet = 2.0 * np.sum(p.log_diag, axis=-1)
    return 0.5 * (trace + np.sum(p.mu ** 2, axis=-1) - p.dim - logdet)


def gaussian_kl_1d(mean, var):
    """KL(N(mean, var) || N(0, 1))."""
    var = np.maximum(var, VAR_FLOOR)
    return 0.5 * (mean ** 2 + var - 1.0 - np.log(var))


def _precision(p: FullCovPosterior) -> np.ndarray:
    L = p.chol
    if L.ndim == 2:
        return spd_inverse(L)
    return np.stack([spd_inverse(Lk) for Lk in L])


def conditional_moments(mu, prec, i, z):
    """Mean and variance of z_i given the other coordinates of ``z``.

    Works from the precision matrix: var = 1 / Lambda_ii and
    mean = mu_i - (z_-i - mu_-i) Lambda_{-i,i} var. ``z[..., i]`` is ignored.
    """
    lam_ii = prec[..., i, i]
    if np.any(lam_ii <= 0.0):
        raise SingularMatrixError("non-positive precision diagonal")
    var = 1.0 / lam_ii
    dz = z - mu
    col = prec[..., :, i]
    cross = np.sum(dz * col, axis=-1) - dz[..., i] * lam_ii
    return mu[..., i] - cross * var, var


def conditional_kl(p: FullCovPosterior, i: int, z_minus_i) -> float:
    """KL(Q(z_i | z_-i, x) || N(0, 1)) for one posterior."""
    d = p.dim
    if not 0 <= i < d:
        raise IndexError(f"latent index {i} out of range for d={d}")
    z_minus_i = np.asarray(z_minus_i, dtype=np.float64)
    if z_minus_i.shape != (d - 1,):
        raise ValueError(f"z_minus_i must have length {d - 1}")
    z = np.insert(z_minus_i, i, 0.0)
    m, v = conditional_moments(p.mu, _precision(p), i, z)
    return float(gaussian_kl_1d(m, v))


def conditional_kl_block(p: FullCovPosterior, u_idx, w) -> float:
    """KL(Q(u | w, x) || N(0, I)) for a block ``u`` given the values ``w``
    of the remaining coordinates (in increasing index order)."""
    d = p.dim
    u_idx = np.asarray(sorted(u_idx))
    w_idx = np.setdiff1d(np.arange(d), u_idx)
    lam = _precision(p)
    lam_uu = lam[np.ix_(u_idx, u_idx)]
    lam_wu = lam[np.ix_(w_idx, u_idx)]
    cov_c = np.linalg.inv(lam_uu)
    cov_c = 0.5 * (cov_c + cov_c.T)
    mean_c = p.mu[u_idx] - (np.asarray(w) - p.mu[w_idx]) @ lam_wu @ cov_c
    sign, logdet = np.linalg.slogdet(cov_c)
    if sign <= 0:
        raise SingularMatrixError("conditional covariance is not positive definite")
    k = len(u_idx)
    return float(0.5 * (mean_c @ mean_c + np.trace(cov_c) - k - logdet))


def mutual_info_terms(z, mu, cov, prec, i):
    """Single-sample MI estimate between z_i and z_-i, batched.

    The quadratic forms L1 - L2 - L3 plus the log-determinant constants,
    which reduce to 0.5 * log(Sigma_ii * Lambda_ii).
    """
    dz = z - mu
    q_full = np.einsum("...j,...jk,...k->...", dz, prec, dz)
    lam_ii = prec[..., i, i]
    # Sigma_{-i}^{-1} = Lambda_{-i,-i} - Lambda_{-i,i} Lambda_{i,-i} / Lambda_ii
    proj = np.einsum("...j,...j->...", dz, prec[..., :, i])
    q_minus = q_full - proj ** 2 / lam_ii
    s_ii = cov[..., i, i]
    l1 = -0.5 * q_full
    l2 = -0.5 * q_minus
    l3 = -0.5 * dz[..., i] ** 2 / s_ii
    const = 0.5 * np.log(s_ii * lam_ii)
    return l1 - l2 - l3 + const


def mutual_info_estimate(z, p: FullCovPosterior, i: int) -> float:
    """Single-sample estimate of KL(Q(z_-i, z_i|x) || Q(z_-i|x) Q(z_i|x)).

    Uses explicit inverses of Sigma and Sigma_{-i}, as written in the scoring
    pseudocode; :func:`mutual_info_terms` is the batched equivalent.
    """
    z = np.asarray(z, dtype=np.float64)
    d = p.dim
    cov = p.cov
    prec = spd_inverse(p.chol)
    keep = np.delete(np.arange(d), i)
    sub = cov[np.ix_(keep, keep)]
    try:
        sub_chol = np.linalg.cholesky(sub)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("Sigma_-i is singular") from exc
    sub_prec = spd_inverse(sub_chol)
    dz = z - p.mu
    l1 = -0.5 * dz @ prec @ dz
    l2 = -0.5 * dz[keep] @ sub_prec @ dz[keep]
    l3 = -0.5 * dz[i] ** 2 / cov[i, i]
    logdet_full = 2.0 * np.sum(p.log_diag)
    logdet_sub = 2.0 * np.sum(np.log(np.diag(sub_chol)))
    const = -0.5 * logdet_full + 0.5 * logdet_sub + 0.5 * np.log(cov[i, i])
    return float(l1 - l2 - l3 + const)


def block_mutual_info(p: FullCovPosterior, u_idx) -> float:
    """Exact KL(Q(w,u|x) || Q(w|x) Q(u|x)) for a Gaussian posterior."""
    d = p.dim
    u_idx = np.asarray(sorted(u_idx))
    w_idx = np.setdiff1d(np.arange(d), u_idx)
    cov = p.cov
    ld = lambda idx: np.linalg.slogdet(cov[np.ix_(idx, idx)])[1]
    return float(0.5 * (ld(w_idx) + ld(u_idx) - 2.0 * np.sum(p.log_diag)))


def m_projection_mean(means) -> np.ndarray:
    """Mean of the identity-covariance Gaussian closest (in KL[M || N]) to an
    evenly weighted mixture of N(mean_j, I)."""
    means = np.asarray(means, dtype=np.float64)
    if means.ndim == 1:
        means = means[None, :]
    if means.shape[0] == 0:
        raise ValueError("mixture needs at least one component")
    return means.mean(axis=0)


def mask_mean_field(p: MeanFieldPosterior, bits) -> MeanFieldPosterior:
    """Replace the coordinates where ``bits == 0`` by the standard normal."""
    bits = np.asarray(bits, dtype=np.float64)
    return MeanFieldPosterior(p.mu * bits, p.log_var * bits)


def mask_full_cov(p: FullCovPosterior, bits) -> FullCovPosterior:
    """Zero the masked rows/columns of ``l_strict`` and their log-diagonal, so
    the masked block is N(0, I) and independent of the rest."""
    bits = np.asarray(bits, dtype=np.float64)
    l_strict = p.l_strict * bits[:, None] * bits[None, :]
    return FullCovPosterior(p.mu * bits, p.log_diag * bits, l_strict)

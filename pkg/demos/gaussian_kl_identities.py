"""Numerical tour of the Gaussian identities behind the full-covariance
score: the single-sample KL estimate, the conditional KL of one latent and
the bound linking conditional KL, mutual information and the total KL.

    python3 demos/gaussian_kl_identities.py
"""
import numpy as np

from elbd.mathcore import Rng, sample_standard_normal
from elbd.posterior import (
    FullCovPosterior,
    block_mutual_info,
    conditional_kl_block,
    kl_fc_closed,
    kl_fc_estimate,
    reparam_fc,
)


def main():
    g = np.random.default_rng(3)
    d, n = 4, 20000
    p = FullCovPosterior(g.normal(size=d), g.uniform(-0.5, 0.5, d), np.tril(0.6 * g.normal(size=(d, d)), -1))
    batch = FullCovPosterior(np.broadcast_to(p.mu, (n, d)), np.broadcast_to(p.log_diag, (n, d)),
                             np.broadcast_to(p.l_strict, (n, d, d)))
    eps = sample_standard_normal(Rng(0), (n, d))
    z, _, _ = reparam_fc(batch, eps=eps)

    est = kl_fc_estimate(z, eps, batch)
    total = kl_fc_closed(p)
    print(f"KL closed form {total:.4f}, estimate {est.mean():.4f} +- {est.std(ddof=1) / np.sqrt(n):.4f}")

    u, w = [1, 3], [0, 2]
    cond = np.mean([conditional_kl_block(p, u, zz[w]) for zz in z])
    mi = block_mutual_info(p, u)
    print(f"E[KL(u|w)] {cond:.4f}, MI(u;w) {mi:.4f}")
    print(f"0 <= {cond - mi:.4f} <= {total:.4f}")


if __name__ == "__main__":
    main()

"""Independent reference computations shared by several test modules."""

from __future__ import annotations

import numpy as np
from scipy import special, stats


class NBToy:
    """Negative-binomial regression ``log mu_i = a + b x_i`` with fixed dispersion.

    The posterior is evaluated on a fine grid, so exact leave-one-out
    predictive densities are available by reweighting the grid.
    """

    def __init__(self, n=20, seed=3, phi=5.0, outlier=False):
        rng = np.random.default_rng(seed)
        self.phi = phi
        self.x = np.linspace(-1, 1, n)
        mu = np.exp(2.0 + 0.6 * self.x)
        self.y = rng.negative_binomial(phi, phi / (phi + mu))
        if outlier:
            self.y[n // 2] = 5 * self.y.max()
        a, b = np.meshgrid(np.linspace(0.5, 3.5, 301), np.linspace(-1.5, 2.5, 301), indexing="ij")
        self.grid = np.stack([a.ravel(), b.ravel()], axis=1)
        self.loglik = self._loglik(self.grid)
        log_prior = stats.norm(0, 5).logpdf(self.grid).sum(axis=1)
        log_post = log_prior + self.loglik.sum(axis=1)
        self.log_prior = log_prior
        self.post = np.exp(log_post - special.logsumexp(log_post))

    def _loglik(self, theta):
        mu = np.exp(theta[:, :1] + theta[:, 1:2] * self.x[None, :])
        return stats.nbinom(self.phi, self.phi / (self.phi + mu)).logpmf(self.y[None, :])

    def draws(self, n, seed=0):
        idx = np.random.default_rng(seed).choice(len(self.grid), size=n, p=self.post)
        return self.loglik[idx]

    def exact_loo(self) -> np.ndarray:
        """log p(y_i | y_-i) from the grid posterior refitted without point i."""
        out = np.empty(len(self.y))
        for i in range(len(self.y)):
            rest = self.log_prior + self.loglik.sum(axis=1) - self.loglik[:, i]
            w = rest - special.logsumexp(rest)
            out[i] = special.logsumexp(w + self.loglik[:, i])
        return out


def central_fd(f, z, h=1e-5):
    """Central finite-difference gradient with steps relative to ``|z_j|``."""
    out = np.empty_like(z)
    for j in range(len(z)):
        step = h * max(1.0, abs(z[j]))
        e = np.zeros_like(z)
        e[j] = step
        out[j] = (f(z + e) - f(z - e)) / (2 * step)
    return out

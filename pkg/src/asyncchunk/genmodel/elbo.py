"""Gaussian ELBO terms: reconstruction and KL to a standard normal prior."""
from __future__ import annotations

from typing import Tuple

import numpy as np


def gaussian_elbo_terms(x, mu_dec, sigma: float, mu_enc, logvar_enc) -> Tuple[float, float]:
    """Return (L_rec, L_reg) for an isotropic Gaussian decoder of scale ``sigma``.

    L_rec is the negative log-likelihood of ``x`` under N(mu_dec, sigma^2 I);
    L_reg is KL(N(mu_enc, diag(exp(logvar_enc))) || N(0, I)).
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x = np.asarray(x, dtype=float).ravel()
    mu_dec = np.asarray(mu_dec, dtype=float).ravel()
    mu_enc = np.asarray(mu_enc, dtype=float).ravel()
    logvar = np.asarray(logvar_enc, dtype=float).ravel()
    d = x.size
    l_rec = float(np.sum((x - mu_dec) ** 2) / (2 * sigma ** 2) + 0.5 * d * np.log(2 * np.pi * sigma ** 2))
    # expm1 keeps exp(v) - 1 - v non-negative for tiny v
    l_reg = float(0.5 * np.sum(np.expm1(logvar) - logvar + mu_enc ** 2))
    return l_rec, l_reg

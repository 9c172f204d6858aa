"""Relative squared errors of a fitted density and of its predicted counts."""

from __future__ import annotations

import numpy as np

from deltamix.errors import DomainError

__all__ = ["delta_g", "delta_nu", "error_grid"]


def error_grid(grid, h: float, pi0: float, pi0_hat: float) -> np.ndarray:
    """Grid ``x_i = i h`` for the density error.

    The point ``x_0 = 0`` is included only when neither the true nor the
    estimated density has mass at zero; otherwise the atom would dominate.
    """
    grid = np.asarray(grid, dtype=float)
    if pi0 == 0.0 and pi0_hat == 0.0:
        return np.concatenate([[0.0], grid])
    return grid


def delta_g(true_values, est_values) -> float:
    """``||g - g_hat||^2 / ||g||^2`` with both sampled on the same grid.

    The grid step cancels in the ratio.
    """
    g = np.asarray(true_values, dtype=float)
    gh = np.asarray(est_values, dtype=float)
    if g.shape != gh.shape:
        raise DomainError("density vectors differ in shape")
    denom = float(g @ g)
    if denom == 0.0:
        raise DomainError("true density vanishes on the grid")
    diff = g - gh
    return float(diff @ diff) / denom


def delta_nu(observed, predicted) -> float:
    """``||nu - nu_hat||^2 / ||nu||^2`` on a common range of counts."""
    nu = np.asarray(observed, dtype=float)
    nh = np.asarray(predicted, dtype=float)
    if nu.shape != nh.shape:
        raise DomainError("frequency vectors are not aligned")
    denom = float(nu @ nu)
    if denom == 0.0:
        raise DomainError("observed frequencies are all zero")
    diff = nu - nh
    return float(diff @ diff) / denom

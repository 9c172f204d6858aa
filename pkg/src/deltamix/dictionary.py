"""Gamma-pdf dictionary and its closed-form derived quantities.

Every gamma/factorial quantity goes through ``gammaln`` and is exponentiated
once; shapes up to a few hundred and counts up to several hundred would
otherwise overflow.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from deltamix.errors import ConfigurationError, DomainError

__all__ = [
    "DictionaryConfig",
    "GammaDictionary",
    "gamma_pdf",
    "log_gamma_pdf",
    "build_dictionary",
    "gram_matrix",
    "mixture_weights",
    "z_vector",
    "standard_config",
    "default_lambda_max",
    "default_truncation",
]


def log_gamma_pdf(lam, a, b):
    """Log of the gamma density with shape ``a`` and scale ``b``.

    Broadcasts over its arguments. Returns ``-inf`` at ``lam == 0`` for
    ``a > 1``, ``-log(b)`` for ``a == 1`` and ``+inf`` for ``a < 1``.
    """
    lam, a, b = np.broadcast_arrays(
        np.asarray(lam, dtype=float), np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    )
    if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise DomainError("gamma_pdf: non-finite input")
    if np.any(lam < 0) or np.any(a <= 0) or np.any(b <= 0):
        raise DomainError("gamma_pdf: need lam >= 0, a > 0, b > 0")
    with np.errstate(divide="ignore", invalid="ignore"):
        power = np.where(a == 1.0, 0.0, (a - 1.0) * np.log(lam))
        out = power - lam / b - a * np.log(b) - gammaln(a)
    return out


def gamma_pdf(lam, a, b):
    """Gamma density ``lam**(a-1) exp(-lam/b) / (b**a Gamma(a))``.

    Scalars in, float out; arrays broadcast.

    >>> round(float(gamma_pdf(1.0, 1.0, 1.0)), 6)
    0.367879
    """
    out = np.exp(log_gamma_pdf(lam, a, b))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class DictionaryConfig:
    """Shape/scale vectors whose Cartesian product indexes the dictionary,
    plus the evaluation grid ``x_i = i*h``, ``i = 1..floor(lambda_max/h)``."""

    a_values: tuple
    b_values: tuple
    lambda_max: float
    h: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "a_values", tuple(float(a) for a in self.a_values))
        object.__setattr__(self, "b_values", tuple(float(b) for b in self.b_values))
        if not self.a_values or not self.b_values:
            raise ConfigurationError("a_values and b_values must be non-empty")
        if any(not math.isfinite(a) or a <= 1.0 for a in self.a_values):
            raise ConfigurationError("every shape parameter must be > 1")
        if any(not math.isfinite(b) or b <= 0.0 for b in self.b_values):
            raise ConfigurationError("every scale parameter must be > 0")
        if not (self.h > 0):
            raise ConfigurationError("grid step h must be > 0")
        if not (self.lambda_max >= self.h):
            raise ConfigurationError("lambda_max must be >= h")

    @property
    def p(self) -> int:
        return len(self.a_values) * len(self.b_values)

    def grid(self) -> np.ndarray:
        # small epsilon so that lambda_max = m*h keeps its last point
        m = int(math.floor(self.lambda_max / self.h + 1e-9))
        return self.h * np.arange(1, m + 1, dtype=float)

    def with_lambda_max(self, lambda_max: float) -> "DictionaryConfig":
        return DictionaryConfig(self.a_values, self.b_values, float(lambda_max), self.h)


def standard_config(lambda_max: float, h: float = 0.5) -> DictionaryConfig:
    """The 149 x 18 = 2682 element gamma dictionary:
    a = 2, 3, ..., 150 and b = 0.10, 0.15, ..., 0.95."""
    a = tuple(float(v) for v in range(2, 151))
    b = tuple(round(0.1 + 0.05 * i, 10) for i in range(18))
    return DictionaryConfig(a, b, lambda_max, h)


def default_lambda_max(max_count: int) -> float:
    return float(max_count + 5.0 * math.sqrt(max_count)) if max_count > 0 else 1.0


def default_truncation(max_count: int) -> int:
    return int(max_count) + 30


@dataclass(frozen=True)
class GammaDictionary:
    """Dictionary elements ``phi_k = gamma(.; a_k, b_k)`` sampled on a grid.

    ``params`` is ``(p, 2)`` with rows ``(a_k, b_k)`` in row-major order over
    (a, b); ``values`` is ``(p, N)`` with ``values[k, i] = phi_k(grid[i])``.
    """

    params: np.ndarray
    grid: np.ndarray
    values: np.ndarray
    h: float
    config: DictionaryConfig | None = field(default=None, compare=False)

    @property
    def p(self) -> int:
        return self.params.shape[0]

    @property
    def a(self) -> np.ndarray:
        return self.params[:, 0]

    @property
    def b(self) -> np.ndarray:
        return self.params[:, 1]

    @classmethod
    def from_params(cls, params, grid, h: float) -> "GammaDictionary":
        """Build from explicit ``(a, b)`` rows, bypassing the a > 1 check."""
        params = np.atleast_2d(np.asarray(params, dtype=float))
        grid = np.asarray(grid, dtype=float)
        values = np.exp(log_gamma_pdf(grid[None, :], params[:, :1], params[:, 1:]))
        return cls(params=params, grid=grid, values=values, h=float(h))

    def evaluate(self, lam) -> np.ndarray:
        """Matrix ``phi_k(lam_j)`` of shape ``(p, len(lam))``."""
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        return np.exp(log_gamma_pdf(lam[None, :], self.a[:, None], self.b[:, None]))

    def quadrature_mass(self) -> np.ndarray:
        """``h * sum_i phi_k(x_i)`` for every element."""
        return self.h * self.values.sum(axis=1)

    def to_csv(self, path) -> None:
        """Debug dump: one row per element with its parameters and grid values."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "a", "b"] + [f"x={x:g}" for x in self.grid])
            for k in range(self.p):
                w.writerow([k, repr(self.a[k]), repr(self.b[k])] + [repr(v) for v in self.values[k]])


def build_dictionary(config: DictionaryConfig) -> GammaDictionary:
    a = np.asarray(config.a_values, dtype=float)
    b = np.asarray(config.b_values, dtype=float)
    aa, bb = np.meshgrid(a, b, indexing="ij")
    params = np.column_stack([aa.ravel(), bb.ravel()])
    grid = config.grid()
    values = np.exp(log_gamma_pdf(grid[None, :], params[:, :1], params[:, 1:]))
    params.setflags(write=False)
    values.setflags(write=False)
    grid.setflags(write=False)
    return GammaDictionary(params=params, grid=grid, values=values, h=config.h, config=config)


def _as_params(obj) -> np.ndarray:
    if isinstance(obj, GammaDictionary):
        return obj.params
    return np.atleast_2d(np.asarray(obj, dtype=float))


def gram_matrix(dictionary) -> np.ndarray:
    """Continuous L2 inner products ``<phi_k, phi_l>`` in closed form.

    For gamma densities::

        <g(.;a1,b1), g(.;a2,b2)> = Gamma(a1+a2-1) / (Gamma(a1) Gamma(a2) b1^a1 b2^a2)
                                   * (1/b1 + 1/b2)^-(a1+a2-1)
    """
    params = _as_params(dictionary)
    a, b = params[:, 0], params[:, 1]
    s = a[:, None] + a[None, :] - 1.0
    if np.any(s <= 0):
        raise DomainError("gram_matrix: a1 + a2 must exceed 1")
    log_g = (
        gammaln(s)
        - gammaln(a)[:, None]
        - gammaln(a)[None, :]
        - (a * np.log(b))[:, None]
        - (a * np.log(b))[None, :]
        - s * np.log(1.0 / b[:, None] + 1.0 / b[None, :])
    )
    gram = np.exp(log_g)
    # exact symmetry regardless of rounding in the two log terms
    return 0.5 * (gram + gram.T)


def mixture_weights(dictionary, L: int) -> np.ndarray:
    """Poisson mixture of each element: ``U[k, l] = int e^-x x^l / l! phi_k(x) dx``.

    Each row is a negative-binomial pmf truncated to ``l = 0..L-1``.
    """
    if L < 1:
        raise DomainError("mixture_weights: L must be >= 1")
    params = _as_params(dictionary)
    a, b = params[:, :1], params[:, 1:]
    l = np.arange(L, dtype=float)[None, :]
    log_u = gammaln(l + a) - gammaln(a) - gammaln(l + 1.0) + l * np.log(b) - (l + a) * np.log1p(b)
    return np.exp(log_u)


def z_vector(dictionary) -> np.ndarray:
    """Values ``phi_k(0)``; identically zero for a dictionary with all shapes > 1."""
    params = _as_params(dictionary)
    a, b = params[:, 0], params[:, 1]
    return np.where(a > 1.0, 0.0, np.where(a == 1.0, 1.0 / b, np.inf))


def nb_quantile(a: float, b: float, q: float) -> int:
    """Upper quantile of the negative binomial row ``U_k`` (used to size ``L``)."""
    from scipy.stats import nbinom

    return int(nbinom.ppf(q, a, 1.0 / (1.0 + b)))

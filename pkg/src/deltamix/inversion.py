"""Regularized inverse images of the dictionary under the Poisson mixing operator.

The mixing operator maps a density on ``[0, inf)`` to the count pmf,
``(Q f)(l) = int e^-x x^l / l! f(x) dx``. For each dictionary element we
look for a sequence ``psi_k`` with ``Q* psi_k ~ phi_k`` by solving the
Tikhonov system ``(QQ* + zeta I) psi = Q phi_k`` in closed form:

* ``(QQ*)[j, l] = C(j + l, l) 2^-(j+l+1)``
* ``(Q phi_k)(l) = U_k(l)`` (negative-binomial weights)

One eigendecomposition of ``QQ*`` serves every element and every ``zeta``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import gammaln
from scipy.stats import poisson

from deltamix.counts import CountSample
from deltamix.dictionary import GammaDictionary, mixture_weights
from deltamix.errors import ConfigurationError, DomainError, NumericalError

__all__ = [
    "OperatorKernels",
    "InverseImage",
    "InverseImageSet",
    "qqstar_matrix",
    "discrete_qqstar",
    "build_kernels",
    "tikhonov_solve",
    "tikhonov_solve_all",
    "zeta_grid",
    "select_zeta",
    "inverse_image_set",
    "balance_curve",
    "BIAS_METHODS",
]


def qqstar_matrix(L: int) -> np.ndarray:
    if L < 1:
        raise DomainError("L must be >= 1")
    j = np.arange(L, dtype=float)
    s = j[:, None] + j[None, :]
    lf = gammaln(j + 1.0)
    # one symmetric sum keeps the matrix exactly symmetric
    log_k = gammaln(s + 1.0) - (lf[:, None] + lf[None, :]) - (s + 1.0) * np.log(2.0)
    return np.exp(log_k)


def discrete_qqstar(grid, h: float, L: int) -> np.ndarray:
    """Grid version ``h Q Q^T`` with ``Q[l, i] = e^-x_i x_i^l / l!``."""
    x = np.asarray(grid, dtype=float)
    q = poisson.pmf(np.arange(L)[:, None], x[None, :])
    return h * q @ q.T


@dataclass(frozen=True)
class OperatorKernels:
    """Closed-form kernel, right-hand sides and the spectral factors.

    With ``pinned`` the system is solved on counts ``1..L-1`` only and
    every solution has ``psi(0) = 0``; ``eigvecs`` then carries a zero
    first row.
    """

    qqstar: np.ndarray
    rhs: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    coeffs: np.ndarray  # eigvecs.T @ rhs.T, shape (rank, p)
    pinned: bool = False

    @property
    def L(self) -> int:
        return self.qqstar.shape[0]

    @property
    def p(self) -> int:
        return self.rhs.shape[0]


def build_kernels(dictionary: GammaDictionary | np.ndarray, L: int, pin_zero: bool = False) -> OperatorKernels:
    """Kernel and right-hand sides for truncation ``L``.

    ``pin_zero`` imposes ``psi(0) = 0``. The exact inverse image of a
    density vanishing at zero has this property (``chi(0) = phi(0)``), and
    pinning it keeps a point mass at zero out of every ``xi_k``.
    """
    qq = qqstar_matrix(L)
    rhs = mixture_weights(dictionary, L)
    if pin_zero and L < 2:
        raise DomainError("pinning psi(0) needs L >= 2")
    lo = 1 if pin_zero else 0
    w, v = np.linalg.eigh(qq[lo:, lo:])
    # PSD by construction; negative eigenvalues are rounding noise
    w = np.clip(w, 0.0, None)
    coeffs = v.T @ rhs[:, lo:].T
    if pin_zero:
        v = np.vstack([np.zeros((1, L - 1)), v])
    for arr in (qq, rhs, w, v, coeffs):
        arr.setflags(write=False)
    return OperatorKernels(qqstar=qq, rhs=rhs, eigvals=w, eigvecs=v, coeffs=coeffs, pinned=pin_zero)


def tikhonov_solve(kernels: OperatorKernels, k: int, zeta: float) -> np.ndarray:
    """Solve ``(QQ* + zeta I) psi = U_k`` (on counts ``>= 1`` when pinned)."""
    if not zeta > 0:
        raise DomainError("zeta must be > 0")
    psi = kernels.eigvecs @ (kernels.coeffs[:, k] / (kernels.eigvals + zeta))
    if not np.all(np.isfinite(psi)):
        raise NumericalError(f"non-finite Tikhonov solution for k={k}, zeta={zeta!r}")
    return psi


def tikhonov_solve_all(kernels: OperatorKernels, zeta: float) -> np.ndarray:
    """All elements at once; column ``k`` of the ``(L, p)`` result is ``psi_k``."""
    if not zeta > 0:
        raise DomainError("zeta must be > 0")
    psi = kernels.eigvecs @ (kernels.coeffs / (kernels.eigvals + zeta)[:, None])
    if not np.all(np.isfinite(psi)):
        bad = int(np.argwhere(~np.isfinite(psi))[0, 1])
        raise NumericalError(f"non-finite Tikhonov solution for k={bad}, zeta={zeta!r}")
    return psi


def zeta_grid(lo: float = 1e-8, hi: float = 10.0, size: int = 40) -> np.ndarray:
    if not (0 < lo < hi) or size < 1:
        raise ConfigurationError("zeta grid needs 0 < lo < hi and size >= 1")
    if size == 1:
        return np.array([lo])
    return np.logspace(np.log10(lo), np.log10(hi), size)


def _check_grid(grid) -> np.ndarray:
    g = np.atleast_1d(np.asarray(grid, dtype=float))
    if g.size == 0:
        raise ConfigurationError("empty zeta grid")
    if np.any(~np.isfinite(g)) or np.any(g <= 0):
        raise ConfigurationError("zeta grid values must be finite and > 0")
    d = np.diff(g)
    if g.size > 1 and not (np.all(d > 0) or np.all(d < 0)):
        raise ConfigurationError("zeta grid must be strictly monotone")
    return np.sort(g)


BIAS_METHODS = ("lepski", "reference")


@dataclass(frozen=True)
class InverseImage:
    psi: np.ndarray
    zeta: float
    sigma: float
    xi: float
    weight: float
    bias: float = 0.0
    degenerate: bool = False


@dataclass(frozen=True)
class InverseImageSet:
    """Inverse images of all ``p`` elements, stored column-wise.

    ``psi`` is ``(L, p)``; the other arrays have length ``p``. ``sigma`` is
    the sample standard deviation of ``psi_k(Y)``, ``bias`` the estimated
    bias of ``xi_k`` and ``weight = sqrt(sigma^2 + n bias^2)`` the Lasso
    weight. ``n_clamped`` counts observations at or above ``L`` whose values
    were read from the last entry of ``psi``.
    """

    psi: np.ndarray
    zeta: np.ndarray
    sigma: np.ndarray
    xi: np.ndarray
    weight: np.ndarray
    bias: np.ndarray
    degenerate: np.ndarray
    n_clamped: int = 0

    def __len__(self) -> int:
        return self.zeta.size

    def __getitem__(self, k: int) -> InverseImage:
        return InverseImage(
            psi=self.psi[:, k],
            zeta=float(self.zeta[k]),
            sigma=float(self.sigma[k]),
            xi=float(self.xi[k]),
            weight=float(self.weight[k]),
            bias=float(self.bias[k]),
            degenerate=bool(self.degenerate[k]),
        )

    @property
    def psi0(self) -> np.ndarray:
        """``psi_k(0)``: the response of ``xi_k`` to a unit point mass at zero."""
        return self.psi[0]

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "zeta", "sigma", "bias", "weight", "xi"])
            for k in range(len(self)):
                w.writerow(
                    [k]
                    + [repr(float(v[k])) for v in (self.zeta, self.sigma, self.bias, self.weight, self.xi)]
                )


def _moments(psi: np.ndarray, nu: np.ndarray, n: int):
    """Sample mean and 1/(n-1) sample variance of ``psi(Y)`` from frequencies.

    A single observation carries no spread information; its variance is 0.
    """
    mean = nu @ psi
    dev = psi - mean if psi.ndim == 1 else psi - mean[None, :]
    var = nu @ (dev * dev)
    var = var * (n / (n - 1.0)) if n > 1 else var * 0.0
    return mean, var


def _as_sample(data) -> CountSample:
    return data if isinstance(data, CountSample) else CountSample.from_counts(data)


def _check_bias(bias: str, kappa: float) -> None:
    if bias not in BIAS_METHODS:
        raise ConfigurationError(f"unknown bias estimate {bias!r}; expected one of {BIAS_METHODS}")
    if not kappa >= 0:
        raise ConfigurationError("kappa must be >= 0")


def _grid_statistics(kernels, zetas, cols, nu, n, bias, kappa):
    """Means, variances and bias estimates over the grid for columns ``cols``.

    ``lepski``: the bias at ``zeta_j`` is the largest shift of the mean
    against any less regularized level that exceeds ``kappa`` standard
    errors of the difference. ``reference``: the plain shift against the
    smallest level.
    """
    coeffs = kernels.coeffs[:, cols]
    psis = [kernels.eigvecs @ (coeffs / (kernels.eigvals + z)[:, None]) for z in zetas]
    stats = [_moments(P, nu, n) for P in psis]
    means = np.array([s[0] for s in stats])
    variances = np.clip(np.array([s[1] for s in stats]), 0.0, None)
    if bias == "reference":
        return means, variances, np.abs(means - means[0])
    est = np.zeros_like(means)
    for j in range(1, len(zetas)):
        for i in range(j):
            _, vd = _moments(psis[j] - psis[i], nu, n)
            excess = np.abs(means[j] - means[i]) - kappa * np.sqrt(np.clip(vd, 0.0, None) / n)
            np.maximum(est[j], excess, out=est[j])
    return means, variances, est


def _choose(variances, bias_est, n):
    """Index of the balance point ``argmin |V/n - B^2|`` per column."""
    return np.argmin(np.abs(variances / n - bias_est**2), axis=0)


def select_zeta(kernels: OperatorKernels, k: int, grid, data, bias: str = "lepski", kappa: float = 1.0) -> InverseImage:
    """Pick the regularization level balancing variance and squared bias.

    The variance term is the sample variance of ``psi_zeta(Y_i)`` over
    ``n``. The squared bias is estimated from shifts of the sample mean
    relative to less regularized levels (see ``_grid_statistics``). The
    returned level minimizes the absolute difference of the two terms.
    """
    _check_bias(bias, kappa)
    sample = _as_sample(data)
    n = sample.n
    if n < 1:
        raise ConfigurationError("select_zeta needs at least one observation")
    if not 0 <= k < kernels.p:
        raise ConfigurationError(f"element index {k} out of range")
    zetas = _check_grid(grid)
    nu, _ = sample.truncated_frequencies(kernels.L)
    means, variances, est = _grid_statistics(kernels, zetas, [k], nu, n, bias, kappa)
    if np.all(variances == 0.0):
        psi = tikhonov_solve(kernels, k, zetas[-1])
        return InverseImage(psi=psi, zeta=float(zetas[-1]), sigma=0.0, xi=float(nu @ psi), weight=0.0, degenerate=True)
    i = int(_choose(variances, est, n)[0])
    var, b = float(variances[i, 0]), float(est[i, 0])
    return InverseImage(
        psi=tikhonov_solve(kernels, k, zetas[i]),
        zeta=float(zetas[i]),
        sigma=float(np.sqrt(var)),
        xi=float(means[i, 0]),
        weight=_weight(var, b, n, bias),
        bias=b,
    )


def _weight(var, b, n, bias):
    if bias == "reference":
        return np.sqrt(var)
    return np.sqrt(var + n * np.square(b))


def balance_curve(kernels: OperatorKernels, k: int, grid, data, bias: str = "lepski", kappa: float = 1.0):
    """``(zetas, variance/n, squared bias)`` for inspecting the selection."""
    _check_bias(bias, kappa)
    sample = _as_sample(data)
    zetas = _check_grid(grid)
    nu, _ = sample.truncated_frequencies(kernels.L)
    means, variances, est = _grid_statistics(kernels, zetas, [k], nu, sample.n, bias, kappa)
    return zetas, variances[:, 0] / sample.n, est[:, 0] ** 2


def inverse_image_set(
    dictionary,
    kernels: OperatorKernels,
    grid,
    data,
    bias: str = "lepski",
    kappa: float = 1.0,
    chunk: int = 512,
) -> InverseImageSet:
    """``select_zeta`` over every dictionary element, in column blocks."""
    _check_bias(bias, kappa)
    sample = _as_sample(data)
    n = sample.n
    if n < 1:
        raise ConfigurationError("inverse images need at least one observation")
    if dictionary is not None and getattr(dictionary, "p", kernels.p) != kernels.p:
        raise ConfigurationError("kernels were built for a different dictionary")
    zetas = _check_grid(grid)
    nu, n_clamped = sample.truncated_frequencies(kernels.L)
    p = kernels.p
    choice = np.empty(p, dtype=int)
    xi = np.empty(p)
    var = np.empty(p)
    est = np.empty(p)
    degenerate = np.empty(p, dtype=bool)
    for lo in range(0, p, chunk):
        cols = np.arange(lo, min(p, lo + chunk))
        m, v, b = _grid_statistics(kernels, zetas, cols, nu, n, bias, kappa)
        c = _choose(v, b, n)
        deg = np.all(v == 0.0, axis=0)
        c[deg] = zetas.size - 1
        j = np.arange(cols.size)
        choice[cols], xi[cols], var[cols], est[cols] = c, m[c, j], v[c, j], b[c, j]
        degenerate[cols] = deg
    var[degenerate] = 0.0
    est[degenerate] = 0.0

    psi = np.empty((kernels.L, p))
    for i in np.unique(choice):
        ks = np.flatnonzero(choice == i)
        psi[:, ks] = kernels.eigvecs @ (kernels.coeffs[:, ks] / (kernels.eigvals + zetas[i])[:, None])
    if not np.all(np.isfinite(psi)):
        raise NumericalError("non-finite inverse image")
    return InverseImageSet(
        psi=psi,
        zeta=zetas[choice],
        sigma=np.sqrt(var),
        xi=xi,
        weight=_weight(var, est, n, bias),
        bias=est,
        degenerate=degenerate,
        n_clamped=n_clamped,
    )

"""Penalty selection along a warm-started path of fits.

Three rules pick one fit from the path:

``opt``
    smallest density error against a known truth (simulation only);
``dd-l2``
    smallest relative error of the predicted count frequencies;
``dd-like``
    largest multinomial log-likelihood of the observed frequencies.

Ties go to the larger penalty. All three rules choose among the same
candidates: fits whose Lasso solve is certified and whose continuous part
is nearly nonnegative (see ``candidates``).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from deltamix.counts import CountSample
from deltamix.errors import ConfigurationError
from deltamix.estimator import (
    EstimatorConfig,
    FitInputs,
    MixingDensityEstimate,
    evaluate_density,
    fit,
    point_mass_response,
    predicted_frequencies,
)
from deltamix.lasso import LassoProblem, alpha_max
from deltamix.metrics import delta_g, delta_nu, error_grid

__all__ = [
    "METHODS",
    "PATH_SIZE",
    "PATH_MAX_ITER",
    "PATH_PATIENCE",
    "AlphaPath",
    "Selection",
    "alpha_grid",
    "initial_problem",
    "fit_path",
    "frequency_error",
    "log_likelihood",
    "density_error",
    "select_dd_l2",
    "select_dd_like",
    "select_opt",
    "select",
    "certified",
    "negative_mass",
    "candidates",
    "NEGATIVE_MASS_TOL",
    "write_trace",
]

log = logging.getLogger(__name__)

METHODS = ("opt", "dd-l2", "dd-like")
PATH_SIZE = 50
# Sweep budget per path point. At small penalties the coordinate descent
# crawls through the near null space of the Gram matrix; those fits are
# never selected, so spending the full single-fit budget there is wasted.
PATH_MAX_ITER = 1000
# Consecutive uncertified points after which the path is cut short.
PATH_PATIENCE = 3
# Largest share of negative mass a selectable fit may carry.
NEGATIVE_MASS_TOL = 0.05


def alpha_grid(problem: LassoProblem, size: int = PATH_SIZE, ratio: float = 1e-4) -> np.ndarray:
    """``size`` log-spaced penalties from ``alpha_max`` down to ``ratio * alpha_max``."""
    if size < 2:
        raise ConfigurationError("path size must be >= 2")
    if not 0 < ratio < 1:
        raise ConfigurationError("ratio must lie in (0, 1)")
    top = alpha_max(problem)
    if top == 0.0:
        return np.array([0.0])
    return np.geomspace(top, ratio * top, size)


def initial_problem(inputs: FitInputs, config: EstimatorConfig) -> LassoProblem:
    """The Lasso problem of the first round, where ``pi0 = nu_0``."""
    base = inputs.problem(config)
    z = point_mass_response(inputs, config)
    nu0 = float(inputs.sample.frequencies[0])
    return base.with_linear(base.linear - nu0 * z)


@dataclass(frozen=True)
class AlphaPath:
    values: np.ndarray
    fits: tuple

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or values.size == 0:
            raise ConfigurationError("empty penalty path")
        if np.any(values < 0) or np.any(np.diff(values) >= 0):
            raise ConfigurationError("penalties must be >= 0 and strictly decreasing")
        if len(self.fits) != values.size:
            raise ConfigurationError("one fit per penalty required")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "fits", tuple(self.fits))

    def __len__(self) -> int:
        return self.values.size


def fit_path(
    inputs: FitInputs,
    config: EstimatorConfig | None = None,
    size: int = PATH_SIZE,
    max_iter: int = PATH_MAX_ITER,
    alphas=None,
    patience: int | None = PATH_PATIENCE,
) -> AlphaPath:
    """Fit the penalty grid, warm-starting each point from the previous one.

    Once a certified point has been seen, the path stops after ``patience``
    consecutive uncertified points (``None`` fits the whole grid). Those
    points cannot be selected, and past them the iterates only degrade.
    """
    config = config or EstimatorConfig()
    if alphas is None:
        alphas = alpha_grid(initial_problem(inputs, config), size)
    alphas = np.asarray(alphas, dtype=float)
    cfg = EstimatorConfig(**{**config.__dict__, "lasso_max_iter": int(max_iter)})
    fits = []
    theta = None
    seen, misses = False, 0
    for a in alphas:
        est = fit(inputs, cfg.with_alpha(a), init=theta)
        theta = est.theta
        fits.append(est)
        if est.diagnostics.lasso_converged:
            seen, misses = True, 0
        else:
            misses += 1
            if seen and patience is not None and misses >= patience:
                break
    return AlphaPath(values=alphas[: len(fits)], fits=tuple(fits))


def frequency_error(est: MixingDensityEstimate, sample: CountSample) -> float:
    """Relative frequency error over the observed range ``0..max(Y)``."""
    nu = sample.frequencies
    return delta_nu(nu, predicted_frequencies(est, nu.size))


def log_likelihood(est: MixingDensityEstimate, sample: CountSample, normalize: bool = True) -> float:
    """``sum_{nu_l > 0} nu_l log nu_hat_l``; ``-inf`` if some observed ``nu_hat_l <= 0``.

    With ``normalize`` the predicted frequencies are divided by the total
    mass ``pi0 + sum(theta)`` first, so the score is a proper multinomial
    likelihood (all counts above ``max(Y)`` pooled into one unobserved
    cell). Without it, inflating every ``nu_hat_l`` raises the score.
    """
    nu = sample.frequencies
    nh = predicted_frequencies(est, nu.size)
    seen = nu > 0
    if np.any(nh[seen] <= 0):
        return -math.inf
    score = float(nu[seen] @ np.log(nh[seen]))
    if normalize:
        total = est.pi0 + float(est.theta.sum())
        if not total > 0:
            return -math.inf
        score -= math.log(total)
    return score


def density_error(true_density, est: MixingDensityEstimate) -> float:
    """Density error on the dictionary grid under the zero-point rule.

    ``true_density`` needs ``pi0`` and a vectorized ``pdf`` for the
    continuous part.
    """
    d = est.dictionary
    grid = error_grid(d.grid, d.h, true_density.pi0, est.pi0)
    _, gh = evaluate_density(est, grid)
    return delta_g(true_density.pdf(grid), gh)


@dataclass(frozen=True)
class Selection:
    method: str
    index: int
    alpha: float
    estimate: MixingDensityEstimate = field(repr=False)
    scores: np.ndarray = field(repr=False)
    warning: str | None = None


def certified(path: AlphaPath) -> np.ndarray:
    """Mask of path points whose Lasso solve converged with a KKT certificate.

    An unconverged iterate is not a solution of the penalized problem. On
    the small-penalty end of a path such iterates drift through the near
    null space of the operator, where they fit the frequencies as well as
    a solution would while the density itself is meaningless. If no point
    is certified, every point is kept.
    """
    mask = np.array([f.diagnostics.lasso_converged for f in path.fits], dtype=bool)
    return mask if mask.any() else np.ones(mask.size, dtype=bool)


def negative_mass(est: MixingDensityEstimate) -> float:
    """Share of the absolute mass of the continuous part that lies below zero."""
    if not np.any(est.theta):
        return 0.0
    _, vals = evaluate_density(est)
    total = float(np.abs(vals).sum())
    return float(np.clip(-vals, 0.0, None).sum()) / total if total > 0 else 0.0


def candidates(path: AlphaPath, certified_only: bool = True, negative_tol: float | None = NEGATIVE_MASS_TOL) -> np.ndarray:
    """Mask of path points the selection rules may choose.

    Besides the certificate, a candidate must look like a density: at small
    penalties the coefficients can oscillate with large alternating signs
    while the predicted frequencies barely change, because the Poisson
    transform smooths the oscillation away. Such fits have a sizeable
    negative part and are dropped when ``negative_mass`` exceeds
    ``negative_tol``. If that would leave nothing, the tolerance is ignored.
    """
    mask = certified(path) if certified_only else np.ones(len(path), dtype=bool)
    if negative_tol is not None:
        ok = mask & np.array([negative_mass(f) <= negative_tol for f in path.fits], dtype=bool)
        if ok.any():
            mask = ok
    return mask


def _argbest(scores: np.ndarray, maximize: bool, mask: np.ndarray) -> int:
    """First admissible index attaining the optimum, i.e. the largest penalty among ties."""
    s = -scores if maximize else scores
    s = np.where(mask, s, np.inf)
    return int(np.flatnonzero(s == s.min())[0])


def _pick(path: AlphaPath, method: str, scores, maximize: bool, mask: np.ndarray, warning=None) -> Selection:
    scores = np.asarray(scores, dtype=float)
    i = _argbest(scores, maximize, mask)
    return Selection(method, i, float(path.values[i]), path.fits[i], scores, warning)


def select_dd_l2(
    path: AlphaPath, data: CountSample, certified_only: bool = True, negative_tol: float | None = NEGATIVE_MASS_TOL
) -> Selection:
    mask = candidates(path, certified_only, negative_tol)
    return _pick(path, "dd-l2", [frequency_error(f, data) for f in path.fits], False, mask)


def select_dd_like(
    path: AlphaPath,
    data: CountSample,
    normalize: bool = True,
    certified_only: bool = True,
    negative_tol: float | None = NEGATIVE_MASS_TOL,
) -> Selection:
    scores = np.array([log_likelihood(f, data, normalize) for f in path.fits])
    mask = candidates(path, certified_only, negative_tol)
    if np.all(scores[mask] == -math.inf):
        msg = "every candidate has a non-positive predicted frequency at an observed count; using dd-l2"
        log.warning(msg)
        fallback = select_dd_l2(path, data, certified_only, negative_tol)
        return Selection("dd-like", fallback.index, fallback.alpha, fallback.estimate, scores, msg)
    return _pick(path, "dd-like", scores, True, mask)


def select_opt(
    path: AlphaPath, true_density, certified_only: bool = True, negative_tol: float | None = NEGATIVE_MASS_TOL
) -> Selection:
    mask = candidates(path, certified_only, negative_tol)
    return _pick(path, "opt", [density_error(true_density, f) for f in path.fits], False, mask)


def select(
    path: AlphaPath,
    data: CountSample,
    method: str,
    true_density=None,
    normalize: bool = True,
    certified_only: bool = True,
    negative_tol: float | None = NEGATIVE_MASS_TOL,
) -> Selection:
    if method == "dd-l2":
        return select_dd_l2(path, data, certified_only, negative_tol)
    if method == "dd-like":
        return select_dd_like(path, data, normalize, certified_only, negative_tol)
    if method == "opt":
        if true_density is None:
            raise ConfigurationError("opt selection needs the true density")
        return select_opt(path, true_density, certified_only, negative_tol)
    raise ConfigurationError(f"unknown selection method {method!r}; expected one of {METHODS}")


def trace_rows(path: AlphaPath, data: CountSample, true_density=None, normalize: bool = True):
    for a, f in zip(path.values, path.fits):
        row = {
            "alpha": float(a),
            "delta_nu": frequency_error(f, data),
            "log_likelihood": log_likelihood(f, data, normalize),
            "delta_g": density_error(true_density, f) if true_density is not None else "",
            "pi0": f.pi0,
            "total_mass": f.diagnostics.total_mass,
            "negative_mass": negative_mass(f),
            "nonzeros": int(f.support.size),
            "iterations": f.diagnostics.iterations,
            "stopping_reason": f.diagnostics.stopping_reason,
            "lasso_converged": int(f.diagnostics.lasso_converged),
        }
        yield row


TRACE_COLUMNS = (
    "alpha",
    "delta_nu",
    "log_likelihood",
    "delta_g",
    "pi0",
    "total_mass",
    "negative_mass",
    "nonzeros",
    "iterations",
    "stopping_reason",
    "lasso_converged",
)


def write_trace(fh, path: AlphaPath, data: CountSample, true_density=None, normalize: bool = True) -> None:
    """Selection trace as CSV, one row per penalty, written to an open text handle."""
    w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in trace_rows(path, data, true_density, normalize):
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

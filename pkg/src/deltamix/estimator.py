"""Two-step estimation of the point mass and the dictionary coefficients.

The estimate is ``g_hat = pi0 * delta_0 + sum_k theta_k phi_k``. Given
``pi0`` the coefficients solve a weighted Lasso whose linear term is
``xi - pi0 * z``; given ``theta`` the point mass is ``nu_0 - theta' u_0``
clipped to ``[0, 1]``. The two updates alternate until one of the stopping
rules fires. With ``z = 0`` a single Lasso solve suffices.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from deltamix.counts import CountSample
from deltamix.dictionary import (
    DictionaryConfig,
    GammaDictionary,
    build_dictionary,
    default_lambda_max,
    default_truncation,
    gram_matrix,
    mixture_weights,
    standard_config,
    z_vector,
)
from deltamix.errors import ConfigurationError, InputError
from deltamix.inversion import BIAS_METHODS, InverseImageSet, build_kernels, inverse_image_set, zeta_grid
from deltamix.lasso import GramFactor, LassoProblem, floor_weights, solve

__all__ = [
    "EstimatorConfig",
    "FitDiagnostics",
    "MixingDensityEstimate",
    "FitInputs",
    "StoppingReason",
    "estimate_pi0",
    "prepare",
    "fit",
    "evaluate_density",
    "predicted_frequencies",
    "theory_diagnostics",
    "TheoryDiagnostics",
    "to_json",
    "point_mass_response",
    "gram_and_factor",
    "from_json",
    "SCHEMA_VERSION",
]

SCHEMA_VERSION = 1
SCHEMA_NAME = "deltamix-estimate"
POINT_MASS_MODES = ("none", "pinned", "psi0")


class StoppingReason:
    SHORTCUT = "shortcut"  # z = 0: one solve, no iteration
    PI0_ZERO = "pi0_zero"  # (i)
    THETA_STABLE = "theta_stable"  # (ii)
    MAX_ITERATIONS = "max_iterations"  # (iii)
    LASSO_NOT_CONVERGED = "lasso_not_converged"


@dataclass(frozen=True)
class EstimatorConfig:
    """Settings of one fit.

    ``point_mass`` controls how mass at zero enters ``xi``:

    ``none``
        plain regularized inverse images and ``z_k = phi_k(0)``;
    ``pinned``
        inverse images constrained to ``psi_k(0) = 0``, so ``xi`` does not
        see the point mass and ``z = 0`` is exact;
    ``psi0``
        plain inverse images with ``z_k = psi_k(0)``, their response to a
        unit mass at zero (iterative path).

    ``bias``/``kappa`` choose the bias estimate used when picking each
    element's regularization level.
    """

    alpha: float = 0.0
    tol: float = 1e-8
    J_max: int = 50
    zeta_grid: tuple = field(default_factory=lambda: tuple(zeta_grid()))
    L: int | None = None
    force_iterative: bool = False
    point_mass: str = "pinned"
    bias: str = "lepski"
    kappa: float = 1.0
    lasso_tol: float = 1e-8
    lasso_max_iter: int = 10_000

    def __post_init__(self):
        object.__setattr__(self, "zeta_grid", tuple(float(z) for z in self.zeta_grid))
        if not (self.alpha >= 0 and math.isfinite(self.alpha)):
            raise ConfigurationError("alpha must be finite and >= 0")
        if not self.tol > 0:
            raise ConfigurationError("tol must be > 0")
        if int(self.J_max) != self.J_max or self.J_max < 1:
            raise ConfigurationError("J_max must be an integer >= 1")
        if self.L is not None and (int(self.L) != self.L or self.L < 1):
            raise ConfigurationError("L must be an integer >= 1")
        if not self.zeta_grid or any(not (z > 0 and math.isfinite(z)) for z in self.zeta_grid):
            raise ConfigurationError("zeta grid values must be finite and > 0")
        if self.point_mass not in POINT_MASS_MODES:
            raise ConfigurationError(f"point_mass must be one of {POINT_MASS_MODES}")
        if self.bias not in BIAS_METHODS:
            raise ConfigurationError(f"bias must be one of {BIAS_METHODS}")
        if not self.kappa >= 0:
            raise ConfigurationError("kappa must be >= 0")
        if not self.lasso_tol > 0 or self.lasso_max_iter < 1:
            raise ConfigurationError("lasso_tol must be > 0 and lasso_max_iter >= 1")

    def with_alpha(self, alpha: float) -> "EstimatorConfig":
        return replace(self, alpha=float(alpha))


@dataclass(frozen=True)
class FitDiagnostics:
    alpha: float
    total_mass: float
    negativity: float
    iterations: int
    stopping_reason: str
    lasso_converged: bool
    kkt_residual: float
    lasso_sweeps: int


@dataclass(frozen=True)
class MixingDensityEstimate:
    """``pi0`` and the coefficient vector; ``theta`` is not renormalized."""

    pi0: float
    theta: np.ndarray
    dictionary: GammaDictionary = field(repr=False)
    diagnostics: FitDiagnostics

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.theta)


def estimate_pi0(theta, nu0: float, u0) -> float:
    """``min(1, max(0, nu0 - theta' u0))``."""
    theta = np.asarray(theta, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    if theta.shape != u0.shape:
        raise ConfigurationError("theta and u0 differ in length")
    return float(min(1.0, max(0.0, nu0 - float(theta @ u0))))


# The Gram matrix and its factor depend only on the (a, b) pairs, which are
# shared by every run of a study; the eigendecomposition is the costly part.
_GRAM_CACHE: OrderedDict = OrderedDict()
_GRAM_CACHE_SIZE = 4


def gram_and_factor(dictionary) -> tuple[np.ndarray, GramFactor]:
    key = np.ascontiguousarray(dictionary.params).tobytes()
    hit = _GRAM_CACHE.get(key)
    if hit is None:
        gram = gram_matrix(dictionary)
        hit = (gram, GramFactor(gram))
        _GRAM_CACHE[key] = hit
        while len(_GRAM_CACHE) > _GRAM_CACHE_SIZE:
            _GRAM_CACHE.popitem(last=False)
    else:
        _GRAM_CACHE.move_to_end(key)
    return hit


@dataclass(frozen=True)
class FitInputs:
    """Everything a fit needs that does not depend on ``alpha``."""

    sample: CountSample
    dictionary: GammaDictionary
    images: InverseImageSet
    gram: np.ndarray = field(repr=False)
    factor: GramFactor = field(repr=False)
    L: int

    def problem(self, config: EstimatorConfig) -> LassoProblem:
        return LassoProblem(
            self.gram, self.images.xi, floor_weights(self.images.weight), config.alpha, factor=self.factor
        )


def prepare(data, config: EstimatorConfig | None = None, dictionary_config: DictionaryConfig | None = None) -> FitInputs:
    """Build the dictionary, inverse images and Gram factor for ``data``.

    Without ``dictionary_config`` the standard 2682-element dictionary is
    used on a grid reaching ``max(Y) + 5 sqrt(max(Y))``.
    """
    config = config or EstimatorConfig()
    sample = data if isinstance(data, CountSample) else CountSample.from_counts(data)
    if dictionary_config is None:
        dictionary_config = standard_config(default_lambda_max(sample.max_count))
    dictionary = build_dictionary(dictionary_config)
    L = config.L or default_truncation(sample.max_count)
    kernels = build_kernels(dictionary, L, pin_zero=config.point_mass == "pinned")
    images = inverse_image_set(dictionary, kernels, config.zeta_grid, sample, bias=config.bias, kappa=config.kappa)
    gram, factor = gram_and_factor(dictionary)
    return FitInputs(sample=sample, dictionary=dictionary, images=images, gram=gram, factor=factor, L=L)


def point_mass_response(inputs: FitInputs, config: EstimatorConfig) -> np.ndarray:
    if config.point_mass == "psi0":
        return np.asarray(inputs.images.psi0, dtype=float)
    return z_vector(inputs.dictionary)


def _negativity(dictionary: GammaDictionary, theta: np.ndarray) -> float:
    if not np.any(theta):
        return 0.0
    vals = theta @ dictionary.values
    return float(np.mean(vals < 0)) if vals.size else 0.0


def fit(inputs: FitInputs, config: EstimatorConfig, init=None) -> MixingDensityEstimate:
    """Alternate Lasso solves and point-mass updates.

    Stopping rules, checked in this order after each Lasso solve ``j``:
    the point mass reaches zero; ``d' Phi d < tol`` for the change ``d`` in
    ``theta`` (from ``j = 2`` on); the Lasso solve did not converge (further
    rounds would only repeat an unconverged solve); ``j = J_max``.
    """
    nu0 = float(inputs.sample.frequencies[0])
    u0 = mixture_weights(inputs.dictionary, 1)[:, 0]
    z = point_mass_response(inputs, config)
    base = inputs.problem(config)
    xi = base.linear

    def lasso(linear, start):
        return solve(base.with_linear(linear), init=start, tol=config.lasso_tol, max_iter=config.lasso_max_iter)

    if not np.any(z) and not config.force_iterative:
        sol = lasso(xi, init)
        theta = sol.theta
        pi0 = estimate_pi0(theta, nu0, u0)
        iterations, reason = 1, StoppingReason.SHORTCUT
    else:
        pi0 = nu0
        theta = None if init is None else np.array(init, dtype=float)
        sol = None
        last_linear = None
        iterations = 0
        while True:
            iterations += 1
            linear = xi - pi0 * z
            if sol is not None and np.array_equal(linear, last_linear):
                new_theta = theta  # same problem as the previous round
            else:
                sol = lasso(linear, theta)
                new_theta = sol.theta
            last_linear = linear
            prev, theta = theta, new_theta
            pi0 = estimate_pi0(theta, nu0, u0)
            if pi0 == 0.0:
                reason = StoppingReason.PI0_ZERO
                break
            if iterations >= 2:
                d = theta - prev
                if float(d @ inputs.gram @ d) < config.tol:
                    reason = StoppingReason.THETA_STABLE
                    break
            if not sol.converged:
                reason = StoppingReason.LASSO_NOT_CONVERGED
                break
            if iterations >= config.J_max:
                reason = StoppingReason.MAX_ITERATIONS
                break

    theta = np.asarray(theta, dtype=float)
    diag = FitDiagnostics(
        alpha=float(config.alpha),
        total_mass=float(theta.sum()),
        negativity=_negativity(inputs.dictionary, theta),
        iterations=iterations,
        stopping_reason=reason,
        lasso_converged=bool(sol.converged),
        kkt_residual=float(sol.kkt_residual),
        lasso_sweeps=int(sol.iterations),
    )
    return MixingDensityEstimate(pi0=pi0, theta=theta, dictionary=inputs.dictionary, diagnostics=diag)


def evaluate_density(est: MixingDensityEstimate, grid=None) -> tuple[float, np.ndarray]:
    """``(pi0, continuous part on grid)``; the point mass is never folded in."""
    if grid is None:
        values = est.theta @ est.dictionary.values
    else:
        idx = est.support
        grid = np.atleast_1d(np.asarray(grid, dtype=float))
        if idx.size == 0:
            values = np.zeros(grid.size)
        else:
            sub = GammaDictionary.from_params(est.dictionary.params[idx], grid, est.dictionary.h)
            values = est.theta[idx] @ sub.values
    return est.pi0, values


def predicted_frequencies(est: MixingDensityEstimate, L: int) -> np.ndarray:
    """``nu_hat_l = pi0 [l = 0] + sum_k theta_k U_k(l)`` for ``l < L``."""
    if L < 1:
        raise ConfigurationError("L must be >= 1")
    idx = est.support
    out = np.zeros(L)
    if idx.size:
        out += est.theta[idx] @ mixture_weights(est.dictionary.params[idx], L)
    out[0] += est.pi0
    return out


@dataclass(frozen=True)
class TheoryDiagnostics:
    alpha0: float
    N0: float | None
    n: int
    sufficient_n: bool | None


def theory_diagnostics(n: int, p: int, tau: float, images: InverseImageSet | None = None) -> TheoryDiagnostics:
    """Theoretical penalty level and minimum sample size.

    ``alpha0 = (2 sqrt((tau+1) log p) + 1) / sqrt(n)`` and
    ``N0 = 16/9 (tau+1) log p max_k ||psi_k||_inf^2 / sigma_k^2``. ``N0``
    needs the inverse images; elements with zero ``sigma`` are skipped.
    """
    if n < 1 or p < 1 or not tau > 0:
        raise ConfigurationError("need n >= 1, p >= 1, tau > 0")
    logp = math.log(p)
    alpha0 = (2.0 * math.sqrt((tau + 1.0) * logp) + 1.0) / math.sqrt(n)
    if images is None:
        return TheoryDiagnostics(alpha0=alpha0, N0=None, n=n, sufficient_n=None)
    sup = np.max(np.abs(images.psi), axis=0)
    ok = images.sigma > 0
    ratio = float(np.max(sup[ok] ** 2 / images.sigma[ok] ** 2)) if np.any(ok) else math.inf
    N0 = 16.0 / 9.0 * (tau + 1.0) * logp * ratio
    return TheoryDiagnostics(alpha0=alpha0, N0=N0, n=n, sufficient_n=bool(n >= N0))


def to_json(est: MixingDensityEstimate, extra: dict | None = None) -> str:
    """Versioned JSON with sparse ``theta`` and the dictionary parameters."""
    d = est.dictionary
    idx = est.support
    doc = {
        "format": SCHEMA_NAME,
        "version": SCHEMA_VERSION,
        "pi0": est.pi0,
        "params": d.params.tolist(),
        "theta": {"p": int(est.theta.size), "index": idx.tolist(), "value": est.theta[idx].tolist()},
        "grid": {"h": d.h, "points": int(d.grid.size), "lambda_max": float(d.grid[-1]) if d.grid.size else 0.0},
        "diagnostics": asdict(est.diagnostics),
    }
    if extra:
        doc["extra"] = extra
    return json.dumps(doc, indent=1)


def from_json(text: str) -> MixingDensityEstimate:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"not a JSON document: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != SCHEMA_NAME:
        raise InputError("not a serialized estimate")
    if doc.get("version") != SCHEMA_VERSION:
        raise InputError(f"unsupported schema version {doc.get('version')!r}; expected {SCHEMA_VERSION}")
    try:
        params = np.asarray(doc["params"], dtype=float).reshape(-1, 2)
        th = doc["theta"]
        theta = np.zeros(int(th["p"]))
        theta[np.asarray(th["index"], dtype=int)] = np.asarray(th["value"], dtype=float)
        h = float(doc["grid"]["h"])
        grid = h * np.arange(1, int(doc["grid"]["points"]) + 1)
        diag = FitDiagnostics(**doc["diagnostics"])
        pi0 = float(doc["pi0"])
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise InputError(f"malformed estimate: {exc}") from exc
    if theta.size != params.shape[0]:
        raise InputError("theta length does not match the parameter list")
    dictionary = GammaDictionary.from_params(params, grid, h)
    return MixingDensityEstimate(pi0=pi0, theta=theta, dictionary=dictionary, diagnostics=diag)

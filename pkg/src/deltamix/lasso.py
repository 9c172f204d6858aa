"""Weighted Lasso in quadratic form, solved by cyclic coordinate descent.

Minimizes::

    F(theta) = theta' G theta - 2 theta' r + alpha * sum_k w_k |theta_k|

with ``G`` a symmetric PSD Gram matrix. A gamma dictionary has a Gram matrix
of very low numerical rank (a few dozen out of thousands), so ``G`` is
replaced by a truncated eigen-factorization ``B'B`` whose error is at the
rounding level of ``G`` itself. A coordinate update then costs ``O(rank)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from deltamix.errors import ConfigurationError

__all__ = [
    "GramFactor",
    "LassoProblem",
    "LassoSolution",
    "soft_threshold",
    "objective",
    "alpha_max",
    "kkt_residual",
    "kkt_tolerance",
    "floor_weights",
    "solve",
]

WEIGHT_FLOOR = 1e-12


def soft_threshold(x, t):
    """``sign(x) * max(|x| - t, 0)``."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("threshold must be nonnegative")
    out = np.sign(x) * np.maximum(np.abs(x) - t, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def floor_weights(weights) -> np.ndarray:
    """Replace near-zero weights by the median of the positive ones.

    A zero weight would leave that coordinate unpenalized.
    """
    w = np.array(weights, dtype=float)
    small = w < WEIGHT_FLOOR
    if np.any(small):
        pos = w[~small]
        w[small] = np.median(pos) if pos.size else 1.0
    return w


class GramFactor:
    """Truncated eigen-factorization ``G ~ B'B`` of a PSD Gram matrix.

    Eigenvalues below ``rcond * max_eigenvalue`` are dropped. The default
    cut ``p * eps`` is the usual pseudo-inverse convention: anything smaller
    is indistinguishable from rounding in ``G`` itself.
    """

    def __init__(self, gram: np.ndarray, rcond: float | None = None):
        gram = np.asarray(gram, dtype=float)
        p = gram.shape[0]
        if rcond is None:
            rcond = max(p, 1) * np.finfo(float).eps
        w, v = np.linalg.eigh(gram)
        top = w[-1] if w.size else 0.0
        keep = w > rcond * top if top > 0 else np.zeros(w.shape, dtype=bool)
        self.rank = int(keep.sum())
        self.rcond = float(rcond)
        self._sqrt = np.sqrt(w[keep])
        self._vecs = np.ascontiguousarray(v[:, keep])
        # B'B reproduces the retained part of the spectrum
        self.B = np.ascontiguousarray((self._vecs * self._sqrt).T)
        self.diag = np.einsum("ij,ij->j", self.B, self.B)


@dataclass(frozen=True)
class LassoProblem:
    gram: np.ndarray
    linear: np.ndarray
    weights: np.ndarray
    alpha: float
    factor: GramFactor | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        gram = np.ascontiguousarray(self.gram, dtype=float)
        linear = np.ascontiguousarray(self.linear, dtype=float).ravel()
        weights = np.ascontiguousarray(self.weights, dtype=float).ravel()
        p = linear.size
        if gram.shape != (p, p) or weights.size != p:
            raise ConfigurationError(f"dimension mismatch: gram {gram.shape}, linear {p}, weights {weights.size}")
        if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
            raise ConfigurationError("weights must be finite and > 0 (use floor_weights)")
        if not self.alpha >= 0:
            raise ConfigurationError("alpha must be >= 0")
        if np.any(np.diag(gram) <= 0):
            raise ConfigurationError("Gram matrix has a non-positive diagonal entry")
        object.__setattr__(self, "gram", gram)
        object.__setattr__(self, "linear", linear)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "alpha", float(self.alpha))
        if self.factor is None:
            object.__setattr__(self, "factor", GramFactor(gram))
        elif self.factor.B.shape[1] != p:
            raise ConfigurationError("factor does not match the Gram matrix")

    @property
    def p(self) -> int:
        return self.linear.size

    def with_alpha(self, alpha: float) -> "LassoProblem":
        return LassoProblem(self.gram, self.linear, self.weights, alpha, factor=self.factor)

    def with_linear(self, linear) -> "LassoProblem":
        return LassoProblem(self.gram, linear, self.weights, self.alpha, factor=self.factor)


@dataclass(frozen=True)
class LassoSolution:
    theta: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    converged: bool
    trace: np.ndarray | None = None


def objective(problem: LassoProblem, theta) -> float:
    """``theta' G theta - 2 theta' r + alpha sum w |theta|``."""
    theta = np.asarray(theta, dtype=float)
    return float(
        theta @ problem.gram @ theta
        - 2.0 * theta @ problem.linear
        + problem.alpha * np.sum(problem.weights * np.abs(theta))
    )


def alpha_max(problem: LassoProblem) -> float:
    """Smallest penalty at which ``theta = 0`` is optimal."""
    return float(np.max(2.0 * np.abs(problem.linear) / problem.weights))


def kkt_tolerance(problem: LassoProblem) -> float:
    return 1e-6 * (1.0 + float(np.max(np.abs(problem.linear))))


def _kkt_violation(grad, theta, alpha, weights) -> float:
    aw = alpha * weights
    v = np.where(theta != 0, np.abs(grad + aw * np.sign(theta)), np.maximum(np.abs(grad) - aw, 0.0))
    return float(v.max()) if v.size else 0.0


def kkt_residual(problem: LassoProblem, theta) -> float:
    """Largest violation of the subgradient optimality conditions.

    With ``g = 2 (G theta - r)``: ``|g_k + alpha w_k sign(theta_k)|`` on the
    support and ``max(|g_k| - alpha w_k, 0)`` off it.
    """
    theta = np.asarray(theta, dtype=float)
    grad = 2.0 * (problem.gram @ theta - problem.linear)
    return _kkt_violation(grad, theta, problem.alpha, problem.weights)


@numba.njit(cache=True)
def _sweep(B, diag, linear, thr, theta, s, idx):
    """One cyclic pass over ``idx``; keeps ``s = B theta`` current."""
    m = s.size
    max_change = 0.0
    for k in idx:
        dkk = diag[k]
        if dkk <= 0.0:
            continue
        gk = 0.0
        for i in range(m):
            gk += B[i, k] * s[i]
        old = theta[k]
        rho = linear[k] - gk + dkk * old
        if rho > thr[k]:
            new = (rho - thr[k]) / dkk
        elif rho < -thr[k]:
            new = (rho + thr[k]) / dkk
        else:
            new = 0.0
        delta = new - old
        if delta != 0.0:
            theta[k] = new
            for i in range(m):
                s[i] += B[i, k] * delta
            ad = abs(delta)
            if ad > max_change:
                max_change = ad
    return max_change


@numba.njit(cache=True)
def _factor_kkt(B, s, linear, thr, theta):
    """KKT violation with ``G theta`` evaluated as ``B' s``.

    In units of the half-gradient, so it compares with ``kkt_tol / 2``.
    """
    m = s.size
    worst = 0.0
    for k in range(theta.size):
        gk = 0.0
        for i in range(m):
            gk += B[i, k] * s[i]
        half = gk - linear[k]
        if theta[k] > 0.0:
            v = abs(half + thr[k])
        elif theta[k] < 0.0:
            v = abs(half - thr[k])
        else:
            v = abs(half) - thr[k]
        if v > worst:
            worst = v
    return worst


@numba.njit(cache=True)
def _cd(B, diag, linear, thr, theta, tol, max_iter, inner_max, kkt_half):
    """Full sweeps alternating with sweeps restricted to the support.

    Stops when a full sweep moves no coordinate by more than ``tol`` or
    when the KKT conditions already hold to ``kkt_half`` after a full
    sweep. Returns (sweeps, stopped_early).
    """
    p = theta.size
    s = B @ theta
    full = np.arange(p)
    sweeps = 0
    while sweeps < max_iter:
        change = _sweep(B, diag, linear, thr, theta, s, full)
        sweeps += 1
        if change <= tol:
            return sweeps, True
        if _factor_kkt(B, s, linear, thr, theta) <= kkt_half:
            return sweeps, True
        active = np.flatnonzero(theta != 0.0)
        inner = 0
        while active.size > 0 and sweeps < max_iter and inner < inner_max:
            change = _sweep(B, diag, linear, thr, theta, s, active)
            sweeps += 1
            inner += 1
            if change <= tol:
                break
        # rounding drift in the running product
        s = B @ theta
    return sweeps, False


FACE_EVERY = 100
FACE_MAX = 400


def _face_step(problem: LassoProblem, theta, thr, rounds: int = 300):
    """Feature-sign active-set refinement of ``theta``, or None.

    With the support ``A`` and its signs fixed, the objective is a quadratic
    minimized by ``G_AA theta_A = r_A - thr_A sign_A``. Each round moves
    toward that point, stopping at whichever zero crossing on the segment
    has the lowest objective, so the objective never increases. Once the
    support is optimal, the worst violator among the zero coordinates joins
    it. The result is only a candidate: the caller accepts it under the KKT
    certificate.
    """
    G, r = problem.gram, problem.linear
    x = np.array(theta, dtype=float)
    eps = 1e-12 * (1.0 + float(np.max(np.abs(r))))

    for _ in range(rounds):
        act = np.flatnonzero(x)
        sign = np.sign(x[act])
        grad = G[:, act] @ x[act] - r
        if act.size == 0 or np.max(np.abs(grad[act] + thr[act] * sign)) <= eps:
            viol = np.abs(grad) - thr
            viol[act] = -np.inf
            k = int(np.argmax(viol))
            if viol[k] <= 0:
                return x
            act = np.append(act, k)
            sign = np.append(sign, -np.sign(grad[k]))
        if act.size > FACE_MAX:
            return None
        Gaa = G[np.ix_(act, act)]
        try:
            target = np.linalg.solve(Gaa, r[act] - thr[act] * sign)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(target)):
            return None
        cur = x[act]
        step = target - cur
        with np.errstate(divide="ignore", invalid="ignore"):
            cross = -cur / step
        ts = np.append(cross[(cross > 0) & (cross < 1) & (cur != 0)], 1.0)
        # the smooth part along the segment is a quadratic in t
        Gs = Gaa @ step
        c0 = 0.5 * cur @ Gaa @ cur - r[act] @ cur
        c1 = cur @ Gs - r[act] @ step
        c2 = 0.5 * step @ Gs
        best, best_t = np.inf, 1.0
        for t in np.unique(ts):
            v = c0 + t * (c1 + t * c2) + thr[act] @ np.abs(cur + t * step)
            if v < best:
                best, best_t = v, t
        new = cur + best_t * step
        new[np.isclose(cross, best_t, rtol=0, atol=1e-15) & (cur != 0)] = 0.0
        new[np.sign(new) != sign] = 0.0
        x[act] = new
    return None


def solve(
    problem: LassoProblem,
    init=None,
    tol: float = 1e-8,
    max_iter: int = 10_000,
    kkt_tol: float | None = None,
    record_trace: bool = False,
) -> LassoSolution:
    """Cyclic coordinate descent.

    Each coordinate update is
    ``theta_k <- S(r_k - sum_{j != k} G_kj theta_j, alpha w_k / 2) / G_kk``,
    evaluated through the factor ``B`` so a coordinate costs ``O(rank)``
    instead of ``O(p)``. Full sweeps alternate with sweeps over the current
    support. Iteration stops once a full sweep moves no coordinate by more
    than ``tol``, once the KKT conditions hold to ``kkt_tol`` (checked after
    each full sweep), or after ``max_iter`` sweeps. Every ``FACE_EVERY`` sweeps the
    exact minimizer on the current support with fixed signs is tried and
    kept if it passes the certificate. ``converged`` means the
    KKT certificate, recomputed with the exact Gram matrix, is within
    ``kkt_tol``; near-collinear columns can keep creeping by more than
    ``tol`` long after that holds.

    ``record_trace`` runs plain full sweeps and records the objective after
    each one (slow; meant for checking monotonicity).
    """
    if tol <= 0 or max_iter < 1:
        raise ConfigurationError("tol must be > 0 and max_iter >= 1")
    if kkt_tol is None:
        kkt_tol = kkt_tolerance(problem)
    theta = np.zeros(problem.p) if init is None else np.array(init, dtype=float)
    if theta.shape != (problem.p,):
        raise ConfigurationError("init has the wrong length")

    if problem.alpha >= alpha_max(problem):
        # zero is optimal; rounding in alpha w / 2 could otherwise leave a
        # coordinate at the boundary a hair above its threshold
        zero = np.zeros(problem.p)
        return LassoSolution(
            theta=zero,
            objective=0.0,
            kkt_residual=kkt_residual(problem, zero),
            iterations=0,
            converged=True,
            trace=np.zeros(1) if record_trace else None,
        )

    fac = problem.factor
    thr = 0.5 * problem.alpha * problem.weights
    trace = None
    if record_trace:
        trace = [objective(problem, theta)]
        sweeps, settled = 0, False
        s = fac.B @ theta
        full = np.arange(problem.p)
        while sweeps < max_iter and not settled:
            settled = _sweep(fac.B, fac.diag, problem.linear, thr, theta, s, full) <= tol
            sweeps += 1
            trace.append(objective(problem, theta))
    else:
        # a margin so the exact-Gram check below agrees with the factor check
        kkt_half = 0.25 * kkt_tol
        sweeps, done = 0, False
        if init is not None:
            # a warm start often already has the right support
            cand = _face_step(problem, theta, thr)
            if cand is not None and kkt_residual(problem, cand) <= kkt_tol:
                theta, done = cand, True
        while not done and sweeps < max_iter:
            chunk = min(FACE_EVERY, max_iter - sweeps)
            used, stopped = _cd(fac.B, fac.diag, problem.linear, thr, theta, float(tol), chunk, 50, kkt_half)
            sweeps += int(used)
            if kkt_residual(problem, theta) <= kkt_tol:
                break
            cand = _face_step(problem, theta, thr, rounds=30)
            if cand is not None and kkt_residual(problem, cand) <= kkt_tol:
                theta = cand
                break
            if stopped:
                break

    kkt = kkt_residual(problem, theta)
    return LassoSolution(
        theta=theta,
        objective=objective(problem, theta),
        kkt_residual=kkt,
        iterations=int(sweeps),
        converged=bool(kkt <= kkt_tol),
        trace=None if trace is None else np.asarray(trace),
    )

"""Test densities, samplers and the Monte-Carlo study.

Random streams: run ``r`` of case ``c`` in a study with master seed ``s``
uses ``SeedSequence(s, spawn_key=(c, r))``; its two children drive the
intensities and the Poisson counts. Any single run can therefore be
reproduced without replaying the others.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from deltamix.counts import CountSample
from deltamix.errors import ConfigurationError, DeltamixError
from deltamix.estimator import EstimatorConfig, evaluate_density, predicted_frequencies, prepare
from deltamix.metrics import delta_g, delta_nu
from deltamix.selection import (
    METHODS,
    NEGATIVE_MASS_TOL,
    PATH_MAX_ITER,
    PATH_SIZE,
    density_error,
    fit_path,
    select,
)

__all__ = [
    "Component",
    "TestDensity",
    "CASES",
    "get_case",
    "parse_cases",
    "sample_lambda",
    "sample_counts",
    "simulate_counts",
    "run_seed",
    "RunRecord",
    "CellSummary",
    "SimulationReport",
    "run_study",
    "delta_g",
    "delta_nu",
]

log = logging.getLogger(__name__)

DESK_RUNS = 20
FULL_RUNS = 100
FULL_N = 10_000


@dataclass(frozen=True)
class Component:
    """One continuous mixture component.

    ``gamma``: (shape, scale); ``normal``: (mean, sd), restricted to
    ``[0, inf)`` and renormalized; ``weibull``: (shape, scale).
    """

    weight: float
    kind: str
    params: tuple

    def __post_init__(self):
        if self.kind not in ("gamma", "normal", "weibull"):
            raise ConfigurationError(f"unknown component kind {self.kind!r}")
        if len(self.params) != 2 or not all(math.isfinite(v) for v in self.params):
            raise ConfigurationError("a component needs two finite parameters")
        if self.kind == "normal":
            if not self.params[1] > 0:
                raise ConfigurationError("normal sd must be > 0")
        elif not (self.params[0] > 0 and self.params[1] > 0):
            raise ConfigurationError(f"{self.kind} parameters must be > 0")
        if not self.weight >= 0:
            raise ConfigurationError("component weights must be >= 0")

    def _dist(self):
        a, b = self.params
        if self.kind == "gamma":
            return stats.gamma(a, scale=b)
        if self.kind == "weibull":
            return stats.weibull_min(a, scale=b)
        return stats.norm(a, b)

    def pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        d = self._dist()
        if self.kind == "normal":
            keep = d.sf(0.0)
            return np.where(x >= 0, d.pdf(x) / keep, 0.0)
        return d.pdf(x)

    def mean(self) -> float:
        if self.kind == "normal":
            a, b = self.params
            return float(stats.truncnorm(-a / b, np.inf, loc=a, scale=b).mean())
        return float(self._dist().mean())

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        a, b = self.params
        if self.kind == "gamma":
            return rng.gamma(a, b, size)
        if self.kind == "weibull":
            return b * rng.weibull(a, size)
        out = rng.normal(a, b, size)
        bad = out < 0
        while np.any(bad):
            out[bad] = rng.normal(a, b, int(bad.sum()))
            bad = out < 0
        return out


@dataclass(frozen=True)
class TestDensity:
    """``pi0 * delta_0 + sum_j w_j f_j``; the weights sum to ``1 - pi0``."""

    __test__ = False  # not a pytest class

    name: str
    components: tuple
    pi0: float = 0.0
    label: str = ""

    def __post_init__(self):
        if not 0 <= self.pi0 < 1:
            raise ConfigurationError("pi0 must lie in [0, 1)")
        total = self.pi0 + sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-12:
            raise ConfigurationError(f"weights and pi0 sum to {total}, not 1")

    def pdf(self, x) -> np.ndarray:
        """Continuous part (weights included, point mass excluded)."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        for c in self.components:
            out = out + c.weight * c.pdf(x)
        return out

    def mean(self) -> float:
        return sum(c.weight * c.mean() for c in self.components)


def _g(shape, scale, w=1.0):
    return Component(w, "gamma", (shape, scale))


def _n(mean, sd, w=1.0):
    return Component(w, "normal", (mean, sd))


CASES = {
    "1": TestDensity("1", (_g(3, 1),), label="Gamma(3, 1)"),
    "2": TestDensity("2", (_g(3, 0.25, 0.3), _g(10, 0.6, 0.7)), label="0.3 Gamma(3, 0.25) + 0.7 Gamma(10, 0.6)"),
    "3": TestDensity("3", (_g(1, 2),), label="Gamma(1, 2)"),
    "4": TestDensity("4", (Component(1.0, "weibull", (2.0, 3.0)),), label="Weibull(shape 2, scale 3)"),
    "5": TestDensity("5", (_n(80, 1),), label="N(80, 1)"),
    "6": TestDensity("6", (_g(2, 0.3, 0.3), _g(40, 1, 0.7)), label="0.3 Gamma(2, 0.3) + 0.7 Gamma(40, 1)"),
    "7": TestDensity("7", (_g(40, 1, 0.7),), pi0=0.3, label="0.3 delta + 0.7 Gamma(40, 1)"),
    "8": TestDensity("8", (_n(80, 8, 0.8),), pi0=0.2, label="0.2 delta + 0.8 N(80, 8^2)"),
    "9": TestDensity("9", (_n(20, 4, 0.8),), pi0=0.2, label="0.2 delta + 0.8 N(20, 4^2)"),
}


def get_case(name) -> TestDensity:
    key = str(name)
    if key not in CASES:
        raise ConfigurationError(f"unknown case {name!r}; valid cases: {', '.join(CASES)} or 'all'")
    return CASES[key]


def parse_cases(cases) -> list[str]:
    """``'all'``, ``'1,3,5'`` or an iterable of names."""
    if isinstance(cases, str):
        items = list(CASES) if cases.strip().lower() == "all" else [s.strip() for s in cases.split(",") if s.strip()]
    else:
        items = [str(s) for s in cases]
    if not items:
        raise ConfigurationError("no cases given")
    for s in items:
        get_case(s)
    return items


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_lambda(density: TestDensity, n: int, seed) -> np.ndarray:
    """Intensities: zero with probability ``pi0``, else a component draw."""
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    rng = _rng(seed)
    probs = np.array([density.pi0] + [c.weight for c in density.components])
    labels = rng.choice(probs.size, size=n, p=probs / probs.sum())
    lam = np.zeros(n)
    for j, c in enumerate(density.components, start=1):
        idx = np.flatnonzero(labels == j)
        if idx.size:
            lam[idx] = c.draw(rng, idx.size)
    return lam


def sample_counts(lambdas, seed) -> np.ndarray:
    lam = np.asarray(lambdas, dtype=float)
    if np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise ConfigurationError("intensities must be finite and >= 0")
    return _rng(seed).poisson(lam).astype(np.int64)


def run_seed(master: int, case_index: int, run: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master, spawn_key=(case_index, run))


def simulate_counts(density: TestDensity, n: int, seq: np.random.SeedSequence) -> np.ndarray:
    s_lam, s_counts = seq.spawn(2)
    return sample_counts(sample_lambda(density, n, np.random.default_rng(s_lam)), np.random.default_rng(s_counts))


@dataclass(frozen=True)
class RunRecord:
    case: str
    run: int
    method: str
    alpha: float
    delta_g: float
    delta_nu: float
    pi0_hat: float
    pi0: float


@dataclass(frozen=True)
class CellSummary:
    case: str
    method: str
    runs: int
    failures: int
    mean_dg: float
    sd_dg: float
    mean_dnu: float
    sd_dnu: float
    mean_pi0_error: float


def _mean_sd(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return math.nan, math.nan
    sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    return float(np.mean(x)), sd


@dataclass(frozen=True)
class SimulationReport:
    cases: tuple
    methods: tuple
    n: int
    runs: int
    seed: int
    records: tuple = field(repr=False)
    failures: dict = field(default_factory=dict)
    densities: dict = field(default_factory=dict, repr=False)

    def cell(self, case: str, method: str) -> CellSummary:
        rec = [r for r in self.records if r.case == case and r.method == method]
        mdg, sdg = _mean_sd([r.delta_g for r in rec])
        mdn, sdn = _mean_sd([r.delta_nu for r in rec])
        perr = float(np.mean([abs(r.pi0_hat - r.pi0) for r in rec])) if rec else math.nan
        return CellSummary(case, method, len(rec), self.failures.get(case, 0), mdg, sdg, mdn, sdn, perr)

    def cells(self):
        return [self.cell(c, m) for c in self.cases for m in self.methods]

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case", "method", "n", "runs", "failures", "mean_dg", "sd_dg", "mean_dnu", "sd_dnu", "mean_abs_pi0_error"])
        for c in self.cells():
            w.writerow(
                [c.case, c.method, self.n, c.runs, c.failures]
                + [repr(v) for v in (c.mean_dg, c.sd_dg, c.mean_dnu, c.sd_dnu, c.mean_pi0_error)]
            )
        return buf.getvalue()

    def runs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case", "run", "method", "alpha", "delta_g", "delta_nu", "pi0_hat", "pi0"])
        for r in self.records:
            w.writerow([r.case, r.run, r.method] + [repr(v) for v in (r.alpha, r.delta_g, r.delta_nu, r.pi0_hat, r.pi0)])
        return buf.getvalue()

    def densities_csv(self) -> str:
        """True and estimated densities of run 0 of every case, long format."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case", "curve", "lambda", "density", "pi0"])
        for case in self.cases:
            if case not in self.densities:
                continue
            grid, curves = self.densities[case]
            for name, (pi0, values) in curves.items():
                for x, v in zip(grid, values):
                    w.writerow([case, name, repr(float(x)), repr(float(v)), repr(float(pi0))])
        return buf.getvalue()

    def text_table(self) -> str:
        """Mean (sd) of both errors, cases as rows and methods as columns."""
        lines = [f"n = {self.n}, runs = {self.runs}, seed = {self.seed}", ""]
        for title, key in (("Average density error (delta_g)", "dg"), ("Average frequency error (delta_nu)", "dnu")):
            lines.append(title)
            header = "case".ljust(6) + "".join(m.rjust(22) for m in self.methods)
            lines.append(header)
            for case in self.cases:
                row = case.ljust(6)
                for m in self.methods:
                    c = self.cell(case, m)
                    mean, sd = (c.mean_dg, c.sd_dg) if key == "dg" else (c.mean_dnu, c.sd_dnu)
                    row += f"{mean:.4f} ({sd:.4f})".rjust(22)
                lines.append(row)
            lines.append("")
        failed = {c: k for c, k in self.failures.items() if k}
        if failed:
            lines.append("failed runs: " + ", ".join(f"case {c}: {k}" for c, k in failed.items()))
        return "\n".join(lines).rstrip() + "\n"


def run_study(
    cases,
    n: int,
    runs: int,
    methods=METHODS,
    seed: int = 0,
    config: EstimatorConfig | None = None,
    path_size: int = PATH_SIZE,
    path_max_iter: int = PATH_MAX_ITER,
    normalize_likelihood: bool = True,
    negative_tol: float | None = NEGATIVE_MASS_TOL,
    progress=None,
) -> SimulationReport:
    """Sample, fit along the penalty path and score every selection rule.

    A run that raises a package or numerical error is logged, counted in
    ``failures`` and left out of the averages.
    """
    cases = parse_cases(cases)
    methods = tuple(methods)
    for m in methods:
        if m not in METHODS:
            raise ConfigurationError(f"unknown method {m!r}; expected one of {METHODS}")
    if int(runs) != runs or runs < 1:
        raise ConfigurationError("runs must be an integer >= 1")
    if int(n) != n or n < 2:
        raise ConfigurationError("n must be an integer >= 2")
    config = config or EstimatorConfig()
    records = []
    failures = {}
    densities = {}
    case_index = {name: i for i, name in enumerate(CASES)}
    for case in cases:
        truth = get_case(case)
        failures[case] = 0
        for r in range(runs):
            try:
                y = simulate_counts(truth, n, run_seed(seed, case_index[case], r))
                sample = CountSample.from_counts(y)
                inputs = prepare(sample, config)
                path = fit_path(inputs, config, size=path_size, max_iter=path_max_iter)
                chosen = {m: select(path, sample, m, truth, normalize_likelihood, negative_tol=negative_tol) for m in methods}
            except (DeltamixError, ArithmeticError, np.linalg.LinAlgError) as exc:
                failures[case] += 1
                log.warning("case %s run %d failed: %s", case, r, exc)
                continue
            for m, s in chosen.items():
                est = s.estimate
                records.append(
                    RunRecord(
                        case=case,
                        run=r,
                        method=m,
                        alpha=s.alpha,
                        delta_g=density_error(truth, est),
                        delta_nu=delta_nu(sample.frequencies, predicted_frequencies(est, sample.frequencies.size)),
                        pi0_hat=est.pi0,
                        pi0=truth.pi0,
                    )
                )
            if case not in densities:
                grid = inputs.dictionary.grid
                curves = {"true": (truth.pi0, truth.pdf(grid))}
                curves.update({m: evaluate_density(s.estimate) for m, s in chosen.items()})
                densities[case] = (grid, curves)
            if progress is not None:
                progress(case, r)
    return SimulationReport(
        cases=tuple(cases),
        methods=methods,
        n=int(n),
        runs=int(runs),
        seed=int(seed),
        records=tuple(records),
        failures=failures,
        densities=densities,
    )

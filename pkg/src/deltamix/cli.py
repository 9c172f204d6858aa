"""Command-line front end: ``deltamix fit | simulate | predict``.

Settings come from an optional YAML or JSON config file; command-line flags
override it. Exit status is 0 on success, 1 for bad input or configuration
and 2 for numerical failures.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import logging
import os
import platform
import sys
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import yaml

from deltamix import __version__
from deltamix.counts import read_counts
from deltamix.dictionary import DictionaryConfig, default_lambda_max, standard_config
from deltamix.errors import DeltamixError, InputError, NumericalError
from deltamix.estimator import (
    EstimatorConfig,
    evaluate_density,
    fit,
    from_json,
    predicted_frequencies,
    prepare,
    to_json,
)
from deltamix.inversion import zeta_grid
from deltamix.selection import (
    METHODS,
    NEGATIVE_MASS_TOL,
    PATH_MAX_ITER,
    PATH_SIZE,
    AlphaPath,
    fit_path,
    frequency_error,
    select,
    write_trace,
)
from deltamix.simulation import CASES, DESK_RUNS, FULL_N, FULL_RUNS, parse_cases, run_study

log = logging.getLogger("deltamix")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


@dataclass
class RunConfig:
    """Every recognised setting; config files may only use these keys."""

    # data / study
    cases: str = "all"
    n: int = 5000
    runs: int = DESK_RUNS
    seed: int = 0
    full_scale: bool = False
    # selection
    method: str | None = None
    alpha: float | None = None
    path_size: int = PATH_SIZE
    path_max_iter: int = PATH_MAX_ITER
    normalize_likelihood: bool = True
    negative_mass_tol: float | None = NEGATIVE_MASS_TOL
    # estimator
    L: int | None = None
    tol: float = 1e-8
    J_max: int = 50
    zeta_min: float = 1e-8
    zeta_max: float = 10.0
    zeta_size: int = 40
    force_iterative: bool = False
    point_mass: str = "pinned"
    bias: str = "lepski"
    kappa: float = 1.0
    lasso_tol: float = 1e-8
    lasso_max_iter: int = 10_000
    # dictionary (defaults: the standard 2682-element dictionary)
    a_values: list | None = None
    b_values: list | None = None
    lambda_max: float | None = None
    h: float = 0.5
    # output
    out: str = "deltamix-out"

    def validate(self) -> None:
        if self.method is not None and self.method not in METHODS:
            raise InputError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if int(self.runs) != self.runs or self.runs < 1:
            raise InputError("runs must be a positive integer")
        if int(self.n) != self.n or self.n < 2:
            raise InputError("n must be an integer >= 2")
        if self.path_size < 2 or self.path_max_iter < 1:
            raise InputError("path_size must be >= 2 and path_max_iter >= 1")
        if self.alpha is not None and not self.alpha >= 0:
            raise InputError("alpha must be >= 0")
        if self.negative_mass_tol is not None and not 0 <= self.negative_mass_tol <= 1:
            raise InputError("negative_mass_tol must lie in [0, 1] or be null")
        if (self.a_values is None) != (self.b_values is None):
            raise InputError("a_values and b_values must be given together")
        parse_cases(self.cases)
        self.estimator()
        self.dictionary(1)

    def estimator(self) -> EstimatorConfig:
        return EstimatorConfig(
            alpha=0.0 if self.alpha is None else float(self.alpha),
            tol=self.tol,
            J_max=self.J_max,
            zeta_grid=tuple(zeta_grid(self.zeta_min, self.zeta_max, self.zeta_size)),
            L=self.L,
            force_iterative=self.force_iterative,
            point_mass=self.point_mass,
            bias=self.bias,
            kappa=self.kappa,
            lasso_tol=self.lasso_tol,
            lasso_max_iter=self.lasso_max_iter,
        )

    def dictionary(self, max_count: int) -> DictionaryConfig:
        lam = self.lambda_max if self.lambda_max is not None else default_lambda_max(max_count)
        if self.a_values is None:
            return standard_config(lam, self.h)
        return DictionaryConfig(tuple(self.a_values), tuple(self.b_values), lam, self.h)


CONFIG_KEYS = {f.name for f in fields(RunConfig)}


def load_config(path) -> dict:
    """Read a YAML/JSON mapping and reject unknown keys."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise InputError(f"config {path} is not valid YAML/JSON: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise InputError(f"config {path} must be a mapping")
    unknown = sorted(set(doc) - CONFIG_KEYS)
    if unknown:
        raise InputError(f"unknown config keys in {path}: {', '.join(unknown)}")
    return doc


def resolve(args: argparse.Namespace) -> RunConfig:
    settings = load_config(args.config) if args.config else {}
    for key in ("cases", "n", "runs", "seed", "method", "out", "alpha", "L"):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if getattr(args, "full_scale", False):
        settings["full_scale"] = True
    cfg = RunConfig(**settings)
    if cfg.full_scale:
        # flags given explicitly still win
        if getattr(args, "runs", None) is None and "runs" not in settings:
            cfg.runs = FULL_RUNS
        if getattr(args, "n", None) is None and "n" not in settings:
            cfg.n = FULL_N
    try:
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    return cfg


def write_atomic(path: Path, text: str) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _versions() -> dict:
    import numba
    import scipy

    return {
        "deltamix": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


def _manifest(command: str, cfg: RunConfig, extra: dict | None = None) -> str:
    doc = {"command": command, "config": asdict(cfg), "versions": _versions()}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def _csv(rows, header) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(v if isinstance(v, str) else repr(v) for v in row) + "\n")
    return buf.getvalue()


def frequency_table(est, nu_full, L: int) -> str:
    nu = np.zeros(L)
    m = min(L, nu_full.size)
    nu[:m] = nu_full[:m]
    nh = predicted_frequencies(est, L)
    return _csv(((str(l), float(nu[l]), float(nh[l])) for l in range(L)), ("l", "nu", "nu_hat"))


def cmd_fit(args) -> int:
    cfg = resolve(args)
    if cfg.method == "opt":
        raise InputError("opt selection needs the true density; use dd-l2 or dd-like")
    method = cfg.method or "dd-like"
    data_path = Path(args.input)
    sample = read_counts(data_path)
    est_cfg = cfg.estimator()
    inputs = prepare(sample, est_cfg, cfg.dictionary(sample.max_count))
    if cfg.alpha is not None:
        est = fit(inputs, est_cfg)
        path = AlphaPath(values=np.array([cfg.alpha]), fits=(est,))
        chosen_alpha, method = cfg.alpha, "fixed"
    else:
        path = fit_path(inputs, est_cfg, size=cfg.path_size, max_iter=cfg.path_max_iter)
        sel = select(path, sample, method, normalize=cfg.normalize_likelihood, negative_tol=cfg.negative_mass_tol)
        est, chosen_alpha = sel.estimate, sel.alpha
        if sel.warning:
            print(f"warning: {sel.warning}", file=sys.stderr)

    out = Path(cfg.out)
    L = inputs.L
    extra = {"L": L, "method": method, "alpha": float(chosen_alpha), "n": sample.n}
    write_atomic(out / "estimate.json", to_json(est, extra) + "\n")
    pi0, values = evaluate_density(est)
    density = f"# pi0 = {pi0!r}\n" + _csv(
        ((float(x), float(v)) for x, v in zip(inputs.dictionary.grid, values)), ("lambda", "density")
    )
    write_atomic(out / "density.csv", density)
    write_atomic(out / "frequencies.csv", frequency_table(est, sample.frequencies, L))
    buf = io.StringIO()
    write_trace(buf, path, sample, normalize=cfg.normalize_likelihood)
    write_atomic(out / "trace.csv", buf.getvalue())
    digest = hashlib.sha256(data_path.read_bytes()).hexdigest()
    write_atomic(out / "manifest.json", _manifest("fit", cfg, {"input": str(data_path), "input_sha256": digest}))

    d = est.diagnostics
    print(f"pi0_hat       {est.pi0:.6f}")
    print(f"delta_nu      {frequency_error(est, sample):.6g}")
    print(f"total mass    {d.total_mass:.6f}")
    print(f"alpha         {chosen_alpha:.6g} ({method})")
    print(f"stopping      {d.stopping_reason} after {d.iterations} iteration(s)")
    print(f"outputs in    {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = resolve(args)
    methods = (cfg.method,) if cfg.method else METHODS

    def progress(case, run):
        log.info("case %s run %d done", case, run)

    report = run_study(
        cfg.cases,
        cfg.n,
        cfg.runs,
        methods=methods,
        seed=cfg.seed,
        config=cfg.estimator(),
        path_size=cfg.path_size,
        path_max_iter=cfg.path_max_iter,
        normalize_likelihood=cfg.normalize_likelihood,
        negative_tol=cfg.negative_mass_tol,
        progress=progress,
    )
    out = Path(cfg.out)
    write_atomic(out / "report.csv", report.summary_csv())
    write_atomic(out / "runs.csv", report.runs_csv())
    write_atomic(out / "report.txt", report.text_table())
    write_atomic(out / "densities.csv", report.densities_csv())
    write_atomic(out / "manifest.json", _manifest("simulate", cfg))
    print(report.text_table(), end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    path = Path(args.input)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    est = from_json(text)
    L = args.L
    if L is None:
        L = json.loads(text).get("extra", {}).get("L")
        if L is None:
            raise InputError("--L is required: the estimate does not record a truncation level")
    if L < 1:
        raise InputError("L must be >= 1")
    nh = predicted_frequencies(est, L)
    table = _csv(((str(l), float(nh[l])) for l in range(L)), ("l", "nu_hat"))
    if args.out:
        write_atomic(Path(args.out), table)
    else:
        sys.stdout.write(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deltamix", description="Delta-contaminated Poisson mixing density estimation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML or JSON settings file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--L", type=int, help="count truncation level")
        sp.add_argument("--alpha", type=float, help="fixed penalty instead of a selection rule")

    f = sub.add_parser("fit", help="estimate the mixing density of a count file")
    f.add_argument("--input", required=True, help="one count per line, or a single-column CSV")
    f.add_argument("--method", choices=("dd-l2", "dd-like"), help="penalty selection rule (default dd-like)")
    common(f)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="Monte-Carlo study over the test densities")
    s.add_argument("--cases", help=f"comma list of {', '.join(CASES)} or 'all'")
    s.add_argument("--n", type=int, help="sample size per run")
    s.add_argument("--runs", type=int, help="runs per case")
    s.add_argument("--seed", type=int, help="master seed")
    s.add_argument("--method", choices=METHODS, help="score only this rule (default: all)")
    s.add_argument("--full-scale", action="store_true", help=f"{FULL_RUNS} runs at n = {FULL_N}")
    common(s)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("predict", help="predicted count frequencies of a saved estimate")
    r.add_argument("--input", required=True, help="estimate JSON written by fit")
    r.add_argument("--L", type=int, help="number of counts 0..L-1 (default: the fit's level)")
    r.add_argument("--out", help="CSV path (default: stdout)")
    r.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DeltamixError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

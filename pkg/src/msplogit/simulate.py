"""Monte-Carlo replication engine for estimator comparisons.

A study fixes a design (the template's response values are ignored), a
true parameter, a replication count and a master seed.  Each
replication draws new responses, fits every configured method on the
same sample, computes Wald standard errors, and records the result.
Fits that failed to converge or carry a boundary flag (estimate or
standard error atypically large) are discarded from the summaries,
per method: a replication can be retained for one method and discarded
for another.

Randomness comes from the counter-based Philox generator.  Replication
r uses the stream seeded by ``SeedSequence(seed, spawn_key=(r,))``, so
results do not depend on execution order and replicate across
platforms.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .inference import attach_se, normal_quantile
from .likelihood import ModeFindingError, env_threads
from .model import ClusteredDataset, Theta, psi_to_chol
from .optimize import FitError, FitOptions, fit

__all__ = [
    "SimulationDesign",
    "MethodSummary",
    "SimulationSummary",
    "simulate_responses",
    "run_replication",
    "run_study",
    "percentile_table",
    "DEFAULT_PERCENTILES",
]

DEFAULT_PERCENTILES = (5.0, 10.0, 25.0, 50.0, 75.0, 90.0, 95.0)

COVERAGE_LEVEL = 0.95


@dataclass(frozen=True)
class SimulationDesign:
    """A Monte-Carlo study: design template, truth, size, seed, methods."""

    template: ClusteredDataset
    theta_true: Theta
    replications: int
    seed: int
    methods: tuple[FitOptions, ...]
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("need at least one replication")
        if not self.methods:
            raise ValueError("need at least one method")
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.labels is None:
            labels = []
            for i, m in enumerate(self.methods):
                label = m.method
                if label in labels:
                    label = f"{label}{i}"
                labels.append(label)
            object.__setattr__(self, "labels", tuple(labels))
        elif len(self.labels) != len(self.methods):
            raise ValueError("one label per method required")
        if self.theta_true.p != self.template.p or self.theta_true.q != self.template.q:
            raise ValueError("theta_true does not match the template dimensions")


def simulate_responses(
    template: ClusteredDataset, theta_true: Theta, rng: np.random.Generator
) -> ClusteredDataset:
    """Draw a new response vector from the model at theta_true.

    Per cluster, in order: u = L z with z standard normal, then one
    uniform per row compared against logistic(X beta + Z u).
    """
    L = psi_to_chol(theta_true.psi, theta_true.q)
    xb = template.X @ theta_true.beta
    offs = template.row_offsets
    y = np.empty(template.n)
    for i, cluster in enumerate(template.clusters):
        u = L @ rng.standard_normal(theta_true.q)
        mu = expit(xb[offs[i]:offs[i + 1]] + cluster.Z @ u)
        y[offs[i]:offs[i + 1]] = (rng.random(cluster.n) < mu).astype(float)
    return template.with_responses(y)


def _replication_rng(seed: int, r: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(r,))))


def run_replication(design: SimulationDesign, r: int):
    """Simulate replication r and fit every method on the same sample.

    Returns one record per method: (estimates, ses, se_available,
    converged, any_flag).  A failed fit is recorded as NaN estimates
    with a flag, never raised.
    """
    rng = _replication_rng(design.seed, r)
    sample = simulate_responses(design.template, design.theta_true, rng)
    d = design.theta_true.dim
    records = []
    for opts in design.methods:
        try:
            result = fit(sample, opts)
            result, _ = attach_se(sample, result)
            records.append((
                result.theta.as_vector(),
                np.where(result.se_available, result.se, np.nan),
                result.se_available.copy(),
                result.converged,
                bool(result.boundary_flags.any()),
            ))
        except (FitError, ModeFindingError):
            records.append((
                np.full(d, np.nan), np.full(d, np.nan),
                np.zeros(d, dtype=bool), False, True,
            ))
    return records


@dataclass(frozen=True)
class MethodSummary:
    """Per-parameter summaries for one method, over its retained fits."""

    label: str
    retained: int
    estimates: np.ndarray  # (retained, d)
    ses: np.ndarray  # (retained, d), NaN where unavailable
    bias: np.ndarray
    variance: np.ndarray
    mse: np.ndarray
    pu: np.ndarray
    coverage: np.ndarray
    coverage_n: np.ndarray

    def centered(self, truth: np.ndarray) -> np.ndarray:
        return self.estimates - truth[None, :]


@dataclass(frozen=True)
class SimulationSummary:
    """Study-level results: summaries per method plus the study settings."""

    replications: int
    seed: int
    truth: np.ndarray
    param_names: tuple[str, ...]
    methods: dict[str, MethodSummary]


def _summarize(label, truth, estimates, ses, retained_mask):
    est = estimates[retained_mask]
    se = ses[retained_mask]
    retained = int(retained_mask.sum())
    d = truth.size
    if retained == 0:
        nanvec = np.full(d, np.nan)
        return MethodSummary(
            label, 0, est, se, nanvec, nanvec, nanvec, nanvec, nanvec,
            np.zeros(d, dtype=int),
        )
    mean = est.mean(axis=0)
    bias = mean - truth
    variance = ((est - mean[None, :]) ** 2).mean(axis=0)
    mse = ((est - truth[None, :]) ** 2).mean(axis=0)
    pu = (est < truth[None, :]).mean(axis=0)
    z = normal_quantile((1.0 + COVERAGE_LEVEL) / 2.0)
    has_se = np.isfinite(se)
    lo = est - z * se
    hi = est + z * se
    covered = (lo <= truth[None, :]) & (truth[None, :] <= hi) & has_se
    coverage_n = has_se.sum(axis=0)
    with np.errstate(invalid="ignore"):
        coverage = np.where(
            coverage_n > 0, covered.sum(axis=0) / np.maximum(coverage_n, 1), np.nan
        )
    return MethodSummary(
        label, retained, est, se, bias, variance, mse, pu, coverage, coverage_n
    )


def run_study(
    design: SimulationDesign,
    workers: int | None = None,
    param_names: tuple[str, ...] | None = None,
) -> SimulationSummary:
    """Run all replications and summarize per method.

    ``workers`` defaults to the MSPLOGIT_THREADS environment setting
    (or 1).  Replications are independent and may run in any order on a
    process pool; records are reduced by replication index, so the
    summary is identical for any worker count.
    """
    if workers is None:
        workers = env_threads()
    R = design.replications
    if workers > 1 and R > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunk = max(1, R // (8 * workers))
            all_records = list(
                pool.map(_study_worker, [(design, r) for r in range(R)], chunksize=chunk)
            )
    else:
        all_records = [run_replication(design, r) for r in range(R)]

    truth = design.theta_true.as_vector()
    d = truth.size
    if param_names is None:
        from .optimize import parameter_names

        param_names = tuple(parameter_names(design.template))
    methods = {}
    for m, label in enumerate(design.labels):
        estimates = np.array([rec[m][0] for rec in all_records]).reshape(R, d)
        ses = np.array([rec[m][1] for rec in all_records]).reshape(R, d)
        converged = np.array([rec[m][3] for rec in all_records], dtype=bool)
        flagged = np.array([rec[m][4] for rec in all_records], dtype=bool)
        retained_mask = converged & ~flagged
        methods[label] = _summarize(label, truth, estimates, ses, retained_mask)
    return SimulationSummary(
        replications=R,
        seed=design.seed,
        truth=truth,
        param_names=tuple(param_names),
        methods=methods,
    )


def _study_worker(args):
    return run_replication(*args)


def percentile_table(
    centered: np.ndarray, probs: tuple[float, ...] = DEFAULT_PERCENTILES
) -> np.ndarray:
    """Linear-interpolation empirical percentiles of centered estimates.

    Returns one value per requested percentile; an empty input yields
    NaN markers (rendered as unavailable by the result writer).
    """
    centered = np.asarray(centered, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if centered.size == 0:
        return np.full(probs.shape, np.nan)
    return np.percentile(centered, probs, method="linear")

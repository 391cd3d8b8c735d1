"""Quasi-Newton maximization of the (penalized) approximate log-likelihood.

The objective is the approximate marginal log-likelihood, optionally
plus the scaled composite penalty.  The likelihood part is
differentiated numerically (central differences); the penalty gradient
is analytic.  Maximization is BFGS with a Wolfe line search; if the
line search stagnates before the gradient tolerance is met, a single
Nelder-Mead polish is run and BFGS restarted from its result.

The log-Cholesky encoding of the covariance makes the parameter space
all of R^d, so the optimization is unconstrained.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.special import expit

from .likelihood import (
    LoglikEvaluator,
    ModeFindingError,
    QuadratureRule,
    gauss_hermite_rule,
)
from .model import ClusteredDataset, Theta, n_psi
from .penalties import (
    SingularInformationError,
    composite_penalty,
    jeffreys_penalty,
    scale_factor,
)

__all__ = [
    "FitOptions",
    "FitResult",
    "FitError",
    "GradientError",
    "objective",
    "numeric_gradient",
    "fit",
    "parameter_names",
]

FD_STEP_SCALE = float(np.finfo(float).eps) ** (1.0 / 3.0)

START_NEWTON_STEPS = 25


class FitError(RuntimeError):
    """Likelihood evaluation failed irrecoverably during a fit."""


class GradientError(RuntimeError):
    """A finite-difference probe produced a non-finite value."""


@dataclass(frozen=True)
class FitOptions:
    """Configuration of a single fit.

    method: "ml" for plain maximum likelihood, "mspl" for maximum
        softly-penalized likelihood.
    approx: "agq" (adaptive quadrature, q = 1 only), "laplace", or
        "auto" (quadrature when q = 1, Laplace otherwise).
    quadrature: node count of the adaptive rule.
    start: optional starting point; the default is the penalized
        fixed-effects-only logistic fit with psi = 0.
    boundary thresholds flag estimates that are atypically large in
        absolute value; they are diagnostics, not constraints.
    """

    method: str = "mspl"
    approx: str = "auto"
    quadrature: int = 100
    start: Theta | None = None
    grad_tol: float = 1e-6
    max_iter: int = 500
    fd_step_scale: float = FD_STEP_SCALE
    beta_max: float = 15.0
    psi_max: float = 10.0
    se_max: float = 50.0
    threads: int = 1

    def __post_init__(self):
        if self.method not in ("ml", "mspl"):
            raise ValueError(f"method must be 'ml' or 'mspl', got {self.method!r}")
        if self.approx not in ("agq", "laplace", "auto"):
            raise ValueError(f"approx must be 'agq', 'laplace' or 'auto', got {self.approx!r}")
        if self.quadrature < 1:
            raise ValueError("quadrature size must be >= 1")
        if self.grad_tol <= 0 or self.fd_step_scale <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")

    def resolve_approx(self, q: int) -> str:
        if self.approx == "auto":
            return "agq" if q == 1 else "laplace"
        return self.approx


@dataclass(frozen=True)
class FitResult:
    """Outcome of a fit.

    ``loglik`` is the unpenalized approximate log-likelihood at the
    estimate; ``penalized`` is the maximized objective (identical to
    ``loglik`` for ML).  ``boundary_flags`` marks parameters whose
    estimates exceed the configured thresholds; standard-error based
    flags are added when SEs are attached by the inference module.
    ``objective_trace`` records the objective at each accepted iterate.
    """

    theta: Theta
    loglik: float
    penalized: float
    converged: bool
    iterations: int
    grad_norm: float
    boundary_flags: np.ndarray
    method: str
    options: FitOptions
    se: np.ndarray | None = None
    se_available: np.ndarray | None = None
    objective_trace: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def flagged(self) -> bool:
        return bool(self.boundary_flags.any())


def parameter_names(data: ClusteredDataset, fixed_names=None) -> list[str]:
    """Names of the joint parameter vector, beta block then psi block."""
    from .model import psi_names

    if fixed_names is None:
        fixed_names = [f"b{j}" for j in range(data.p)]
    return [f"beta:{name}" for name in fixed_names] + [
        f"psi:{name}" for name in psi_names(data.q)
    ]


def _make_rule(options: FitOptions, q: int) -> QuadratureRule | None:
    if options.resolve_approx(q) == "agq":
        return gauss_hermite_rule(options.quadrature)
    return None


def objective(
    data: ClusteredDataset,
    theta: Theta,
    options: FitOptions,
    evaluator: LoglikEvaluator | None = None,
) -> float:
    """ML objective: approximate loglik; MSPL: loglik plus scaled penalty."""
    if evaluator is None:
        evaluator = LoglikEvaluator(
            data, options.resolve_approx(data.q), _make_rule(options, data.q),
            threads=options.threads,
        )
    value = evaluator.loglik(theta)
    if options.method == "mspl":
        try:
            value += composite_penalty(data, theta).value
        except SingularInformationError:
            # Weights underflowed at an extreme probe point; the penalty
            # limit there is -infinity, which the line search backs away from.
            return -np.inf
    return value


def numeric_gradient(f, x: np.ndarray, step_scale: float = FD_STEP_SCALE) -> np.ndarray:
    """Central-difference gradient with per-coordinate relative steps.

    Step in coordinate j is ``step_scale * max(1, |x_j|)``.  A
    non-finite probe value raises ``GradientError`` naming the
    coordinate.
    """
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for j in range(x.size):
        h = step_scale * max(1.0, abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        fp = f(xp)
        fm = f(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradientError(
                f"non-finite objective while probing coordinate {j} "
                f"(f+ = {fp}, f- = {fm})"
            )
        grad[j] = (fp - fm) / (2.0 * h)
    return grad


HESS_STEP_SCALE = float(np.finfo(float).eps) ** 0.25


def hessian_fd(f, x: np.ndarray, step_scale: float = HESS_STEP_SCALE) -> np.ndarray:
    """Central-difference Hessian with per-coordinate relative steps."""
    x = np.asarray(x, dtype=float)
    d = x.size
    h = step_scale * np.maximum(1.0, np.abs(x))
    H = np.empty((d, d))
    f0 = f(x)

    def at(*pairs):
        xp = x.copy()
        for j, s in pairs:
            xp[j] += s
        return f(xp)

    for i in range(d):
        H[i, i] = (at((i, h[i])) - 2.0 * f0 + at((i, -h[i]))) / h[i] ** 2
    for i in range(d):
        for j in range(i + 1, d):
            H[i, j] = H[j, i] = (
                at((i, h[i]), (j, h[j]))
                - at((i, h[i]), (j, -h[j]))
                - at((i, -h[i]), (j, h[j]))
                + at((i, -h[i]), (j, -h[j]))
            ) / (4.0 * h[i] * h[j])
    return H


def _penalized_logistic_start(X: np.ndarray, y: np.ndarray, c: float) -> np.ndarray:
    """Newton steps on the Jeffreys-penalized fixed-effects logistic fit.

    The adjusted score is X'(y - mu) + c/2 X'(h (1 - 2 mu)) with h the
    weighted hat values; the penalty keeps the iterates finite even
    under complete separation.  Runs a fixed number of damped steps.
    """

    def pll(b):
        eta = X @ b
        ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
        return ll + c * jeffreys_penalty(X, b).value

    beta = np.zeros(X.shape[1])
    value = pll(beta)
    for _ in range(START_NEWTON_STEPS):
        mu = expit(X @ beta)
        w = mu * (1.0 - mu)
        K = X.T @ (w[:, None] * X)
        score = X.T @ (y - mu) + c * jeffreys_penalty(X, beta).gradient
        if np.linalg.norm(score) < 1e-10:
            break
        step = cho_solve(cho_factor(K, lower=True), score)
        t = 1.0
        for _ in range(30):
            cand = pll(beta + t * step)
            if cand >= value - 1e-12 * (1.0 + abs(value)):
                beta = beta + t * step
                value = cand
                break
            t /= 2.0
    return beta


def _start_theta(data: ClusteredDataset, options: FitOptions) -> Theta:
    if options.start is not None:
        start = options.start
        if start.p != data.p or start.q != data.q:
            raise ValueError(
                f"start has dimensions (p={start.p}, q={start.q}), "
                f"data needs (p={data.p}, q={data.q})"
            )
        return start
    c = scale_factor(data.p, data.n)
    beta0 = _penalized_logistic_start(data.X, data.y, c)
    return Theta(beta0, np.zeros(n_psi(data.q)))


class _Memo:
    """Remembers the most recent evaluation so callbacks are free."""

    def __init__(self, fn):
        self.fn = fn
        self._x = None
        self._f = None

    def __call__(self, x):
        if self._x is not None and np.array_equal(x, self._x):
            return self._f
        self._f = self.fn(x)
        self._x = np.array(x, copy=True)
        return self._f


def _boundary_flags(theta: Theta, options: FitOptions) -> np.ndarray:
    return np.concatenate([
        np.abs(theta.beta) > options.beta_max,
        np.abs(theta.psi) > options.psi_max,
    ])


def _newton_polish(objective_vec, gradient_vec, x, grad_norm, tol, max_steps=8):
    """Gradient-polishing Newton steps on the finite-difference Hessian.

    Accepts a step only when it reduces the gradient norm; leaves the
    point untouched when the Hessian is unusable (for example on the
    flat ridge of an unpenalized fit with separated data).
    """
    grad = gradient_vec(x)
    steps = 0
    for _ in range(max_steps):
        if grad_norm <= tol:
            break
        H = hessian_fd(objective_vec, x)
        try:
            delta = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            break
        improved = False
        t = 1.0
        for _ in range(6):
            x_new = x - t * delta
            try:
                g_new = gradient_vec(x_new)
            except GradientError:
                t /= 4.0
                continue
            gn_new = float(np.linalg.norm(g_new))
            if gn_new < grad_norm:
                x, grad, grad_norm = x_new, g_new, gn_new
                improved = True
                break
            t /= 4.0
        steps += 1
        if not improved:
            break
    return x, grad_norm, steps


def fit(data: ClusteredDataset, options: FitOptions = FitOptions()) -> FitResult:
    """Maximize the (penalized) approximate log-likelihood.

    Returns a ``FitResult`` in all non-exceptional cases; failure to
    converge is reported through ``converged``, never as an exception.
    A breakdown of the likelihood evaluation itself raises ``FitError``.
    """
    evaluator = LoglikEvaluator(
        data, options.resolve_approx(data.q), _make_rule(options, data.q),
        threads=options.threads,
    )
    p = data.p
    mspl = options.method == "mspl"

    def loglik_vec(v):
        return evaluator.loglik(Theta.from_vector(v, p))

    def objective_vec(v):
        value = loglik_vec(v)
        if mspl:
            try:
                value += composite_penalty(data, Theta.from_vector(v, p)).value
            except SingularInformationError:
                return -np.inf
        return value

    def gradient_vec(v):
        grad = numeric_gradient(loglik_vec, v, options.fd_step_scale)
        if mspl:
            grad = grad + composite_penalty(data, Theta.from_vector(v, p)).gradient
        return grad

    memo = _Memo(lambda v: -objective_vec(v))
    neg_grad = lambda v: -gradient_vec(v)

    trace = []

    def record(xk):
        trace.append(-memo(xk))

    x0 = _start_theta(data, options).as_vector()
    bfgs_opts = {"gtol": options.grad_tol, "norm": 2, "maxiter": options.max_iter}

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(
                memo, x0, jac=neg_grad, method="BFGS", options=bfgs_opts,
                callback=record,
            )
            iterations = res.nit
            x_best, f_best = res.x, res.fun
            stagnated = (not res.success) and res.status == 2
            if stagnated and iterations < options.max_iter:
                # One restart: simplex polish, then resume BFGS from there.
                polish = minimize(
                    memo, x_best, method="Nelder-Mead",
                    options={
                        "maxiter": 200 * x_best.size,
                        "xatol": 1e-9,
                        "fatol": 1e-12,
                    },
                )
                if polish.fun <= f_best:
                    x_best, f_best = polish.x, polish.fun
                res = minimize(
                    memo, x_best, jac=neg_grad, method="BFGS",
                    options={**bfgs_opts, "maxiter": options.max_iter - iterations},
                    callback=record,
                )
                iterations += res.nit
                if res.fun <= f_best:
                    x_best, f_best = res.x, res.fun
        grad_norm = float(np.linalg.norm(gradient_vec(x_best)))
        if grad_norm > options.grad_tol:
            # Near the optimum the line search stalls once objective
            # gains shrink below float rounding; a Newton step on the
            # finite-difference Hessian still reduces the gradient.
            x_best, grad_norm, polish_steps = _newton_polish(
                objective_vec, gradient_vec, x_best, grad_norm, options.grad_tol
            )
            iterations += polish_steps
            f_best = -objective_vec(x_best)
    except ModeFindingError as err:
        raise FitError(f"likelihood evaluation failed: {err}") from err

    theta_hat = Theta.from_vector(x_best, p)
    loglik_hat = evaluator.loglik(theta_hat)
    penalized = float(-f_best)
    converged = bool(grad_norm <= options.grad_tol)
    return FitResult(
        theta=theta_hat,
        loglik=float(loglik_hat),
        penalized=penalized,
        converged=converged,
        iterations=int(iterations),
        grad_norm=grad_norm,
        boundary_flags=_boundary_flags(theta_hat, options),
        method=options.method,
        options=options,
        objective_trace=np.array(trace),
    )


def with_se(fit_result: FitResult, se: np.ndarray, available: np.ndarray) -> FitResult:
    """Attach standard errors and fold SE-size flags into the boundary flags."""
    se = np.asarray(se, dtype=float)
    available = np.asarray(available, dtype=bool)
    se_flags = available & (se > fit_result.options.se_max)
    return replace(
        fit_result,
        se=se,
        se_available=available,
        boundary_flags=fit_result.boundary_flags | se_flags,
    )

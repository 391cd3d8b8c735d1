"""Approximate marginal log-likelihood for the clustered logistic model.

The marginal likelihood integrates each cluster's Bernoulli likelihood
against the Gaussian random-effect density.  Writing

    g_i(u) = sum_j [y_ij eta_ij - log(1 + exp(eta_ij))] - u' Sigma^{-1} u / 2,

the exact per-cluster contribution to the log-likelihood is

    log p_i = -q/2 log(2 pi) - 1/2 log det Sigma + log int exp(g_i(u)) du.

Two approximations are provided:

* adaptive Gauss-Hermite quadrature for one-dimensional random effects:
  the integral is approximated by shifting and scaling a fixed rule to
  the mode u_hat_i and curvature of g_i,

      int exp(g_i) du ~= sqrt(2) tau_i sum_m w_m exp(x_m^2)
                         exp(g_i(u_hat_i + sqrt(2) tau_i x_m)),

  with tau_i^2 the inverse of the negative Hessian of g_i at the mode;
* the Laplace approximation for any dimension, which replaces the
  integral by exp(g_i(u_hat)) (2 pi)^{q/2} det(H_i)^{-1/2} with
  H_i = Z_i' W_i Z_i + Sigma^{-1}, so that

      log p_i = g_i(u_hat) - 1/2 log det H_i - 1/2 log det Sigma

  (the (2 pi)^{q/2} from the Laplace integral cancels the
  (2 pi)^{-q/2} normalization exactly, which is why one-node adaptive
  quadrature coincides with the Laplace value when q = 1).

Internally both approximations are evaluated in the standardized scale
u = L v (so the Gaussian exponent is -||v||^2/2 and the curvature is
L' Z' W Z L + I >= I).  The change of variables maps modes to modes and
quadrature points to the identical evaluation points, so the computed
values equal the formulas above to rounding while staying
well-conditioned even when Sigma is nearly singular - exactly the
regime an unpenalized fit wanders into.  All reductions are log-space
log-sum-exp with exponent values taken relative to the mode.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh_tridiagonal
from scipy.special import expit, logsumexp

from .model import Cluster, ClusteredDataset, Theta, psi_to_chol, psi_to_sigma

__all__ = [
    "QuadratureRule",
    "ClusterMode",
    "ModeFindingError",
    "gauss_hermite_rule",
    "cluster_mode",
    "agq_loglik",
    "agq_cluster_logprobs",
    "laplace_loglik",
    "laplace_cluster_logprobs",
    "LoglikEvaluator",
    "env_threads",
]

MODE_GRAD_TOL = 1e-10  # u-space tolerance of the public mode finder
MODE_GRAD_TOL_V = 1e-11  # standardized-scale tolerance of the inner solvers
# A stalled inner solver is accepted when its gradient is below this; the
# remaining mode error is O(gradient / curvature) and the curvature is huge
# precisely in the regimes where the stall can happen.
MODE_GRAD_ESCAPE = 1e-6
MODE_MAX_ITER = 200
# The standardized mode is O(sqrt(cluster size)); capping the Newton step
# keeps a single iteration from jumping to an overflow-prone scale when
# the curvature has underflown.
MODE_MAX_STEP = 100.0

THREADS_ENV_VAR = "MSPLOGIT_THREADS"


def env_threads() -> int:
    """Worker count requested through the environment (default 1)."""
    raw = os.environ.get(THREADS_ENV_VAR, "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


class ModeFindingError(RuntimeError):
    """Newton iteration for a cluster mode failed to converge.

    Carries the last iterate and its gradient norm for diagnosis.
    """

    def __init__(self, message, last_iterate=None, grad_norm=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Hermite nodes and weights for the weight function exp(-x^2)."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return self.nodes.shape[0]


def gauss_hermite_rule(Q: int) -> QuadratureRule:
    """Gauss-Hermite rule with Q nodes via the Golub-Welsch eigenproblem.

    The nodes are the eigenvalues of the symmetric tridiagonal Jacobi
    matrix with off-diagonal entries sqrt(i/2).  The weights follow
    from the same construction through the orthonormal-polynomial
    identity w_m = 1 / sum_j p_j(x_m)^2, evaluated by the three-term
    recurrence (the squared-first-eigenvector-component form underflows
    for the extreme nodes of large rules).  Symmetry about zero is
    enforced exactly by averaging each node with its mirror image.
    """
    if not (1 <= Q <= 200):
        raise ValueError(f"quadrature size must be in [1, 200], got {Q}")
    if Q == 1:
        return QuadratureRule(np.zeros(1), np.array([np.sqrt(np.pi)]))
    nodes = eigh_tridiagonal(
        np.zeros(Q), np.sqrt(np.arange(1, Q) / 2.0), eigvals_only=True
    )
    nodes = 0.5 * (nodes - nodes[::-1])
    if Q % 2 == 1:
        nodes[Q // 2] = 0.0
    p_prev = np.zeros(Q)
    p = np.full(Q, np.pi ** -0.25)
    total = p * p
    for j in range(1, Q):
        p, p_prev = (nodes * p - np.sqrt((j - 1) / 2.0) * p_prev) / np.sqrt(j / 2.0), p
        total += p * p
    weights = 1.0 / total
    weights = 0.5 * (weights + weights[::-1])
    rule = QuadratureRule(nodes, weights)
    rule.nodes.setflags(write=False)
    rule.weights.setflags(write=False)
    return rule


@dataclass(frozen=True)
class ClusterMode:
    """Mode and curvature of a cluster's integrand exponent.

    ``u_hat`` maximizes g_i; ``neg_hessian`` is Z' W Z + Sigma^{-1}
    evaluated there, positive definite by construction.
    """

    u_hat: np.ndarray
    neg_hessian: np.ndarray


def _exponent(cluster: Cluster, xb: np.ndarray, sigma_inv: np.ndarray, u: np.ndarray) -> float:
    eta = xb + cluster.Z @ u
    return float(np.sum(cluster.y * eta - np.logaddexp(0.0, eta)) - 0.5 * u @ sigma_inv @ u)


def cluster_mode(cluster: Cluster, theta: Theta) -> ClusterMode:
    """Mode of g_i and the negative Hessian of g_i there.

    Damped (Levenberg-style) Newton ascent from u = 0; g_i is strictly
    concave, so the damping only guards the early steps.  Raises
    ``ModeFindingError`` if the gradient norm does not fall below
    ``MODE_GRAD_TOL`` within the iteration budget.
    """
    sigma = psi_to_sigma(theta.psi, theta.q)
    sigma_inv = cho_solve(cho_factor(sigma, lower=True), np.eye(theta.q))
    xb = cluster.X @ theta.beta
    q = theta.q
    u = np.zeros(q)
    g = _exponent(cluster, xb, sigma_inv, u)
    lam = 0.0
    for _ in range(MODE_MAX_ITER):
        eta = xb + cluster.Z @ u
        mu = expit(eta)
        grad = cluster.Z.T @ (cluster.y - mu) - sigma_inv @ u
        w = mu * (1.0 - mu)
        H = cluster.Z.T @ (w[:, None] * cluster.Z) + sigma_inv
        if np.linalg.norm(grad) < MODE_GRAD_TOL:
            return ClusterMode(u_hat=u, neg_hessian=H)
        for _ in range(60):
            step = np.linalg.solve(H + lam * np.eye(q), grad)
            g_new = _exponent(cluster, xb, sigma_inv, u + step)
            if g_new >= g - 1e-12 * (1.0 + abs(g)):
                u = u + step
                g = g_new
                lam = lam / 10.0 if lam > 1e-12 else 0.0
                break
            lam = max(lam * 10.0, 1e-4)
        else:  # pragma: no cover - damping exhausted
            break
    eta = xb + cluster.Z @ u
    grad = cluster.Z.T @ (cluster.y - expit(eta)) - sigma_inv @ u
    raise ModeFindingError(
        f"cluster mode did not reach gradient norm {MODE_GRAD_TOL}",
        last_iterate=u,
        grad_norm=float(np.linalg.norm(grad)),
    )


# ---------------------------------------------------------------------------
# Inner solvers in the standardized scale u = L v
# ---------------------------------------------------------------------------


def _segsum(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    return np.add.reduceat(values, offsets[:-1], axis=0)


def _q1_scale(sigma: float):
    """Integration scale for the scalar random effect.

    The substitution u = s t with s = min(sigma, 1) keeps the inner
    problem conditioned at both extremes: for small sigma the prior
    curvature is exactly one, for huge sigma the gradient is evaluated
    at unit scale instead of being amplified by sigma.  ``ratio`` is
    (s/sigma)^2, the prior curvature in the t scale.
    """
    s = min(sigma, 1.0)
    ratio = 1.0 if sigma <= 1.0 else np.exp(-2.0 * np.log(sigma))
    return s, ratio


def _modes_q1(data: ClusteredDataset, xb: np.ndarray, sigma: float, v0=None):
    """All cluster modes at once for q = 1, in the t = u / min(sigma, 1) scale.

    Maximizes gt_i(t) = condloglik(xb + s z t) - ratio t^2 / 2 per
    cluster by vectorized damped Newton.  Returns (t_hat, curvature)
    with curvature = s^2 Z'WZ + ratio per cluster.
    """
    offs = data.row_offsets
    idx = data.row_cluster
    y = data.y
    s, ratio = _q1_scale(sigma)
    sz = s * data.Z[:, 0]

    def g_all(v_vec):
        eta = xb + sz * v_vec[idx]
        return _segsum(y * eta - np.logaddexp(0.0, eta), offs) - 0.5 * ratio * v_vec**2

    if v0 is None:
        v = np.zeros(data.k)
        g = g_all(v)
    else:
        # A warm start from a parameter point at a very different scale
        # can be worse than a cold start; keep whichever is better per
        # cluster.
        v = np.array(v0, dtype=float)
        g = g_all(v)
        g0 = g_all(np.zeros(data.k))
        worse = ~(g >= g0)
        v[worse] = 0.0
        g[worse] = g0[worse]
    lam = np.zeros(data.k)
    grad = None
    for _ in range(MODE_MAX_ITER):
        eta = xb + sz * v[idx]
        mu = expit(eta)
        grad = _segsum(sz * (y - mu), offs) - ratio * v
        hess = _segsum(sz * sz * mu * (1.0 - mu), offs) + ratio
        if np.abs(grad).max() < MODE_GRAD_TOL_V:
            return v, hess
        pending = np.ones(data.k, dtype=bool)
        v_new = v.copy()
        g_new = g.copy()
        for _ in range(60):
            step = np.clip(grad / (hess + lam), -MODE_MAX_STEP, MODE_MAX_STEP)
            cand = np.where(pending, v + step, v_new)
            g_cand = g_all(cand)
            ok = pending & (g_cand >= g - 1e-12 * (1.0 + np.abs(g)))
            v_new[ok] = cand[ok]
            g_new[ok] = g_cand[ok]
            lam[ok] = np.where(lam[ok] > 1e-12, lam[ok] / 10.0, 0.0)
            pending &= ~ok
            if not pending.any():
                break
            lam[pending] = np.maximum(lam[pending] * 10.0, 1e-4)
        else:
            break  # some cluster is stuck at machine precision
        v, g = v_new, g_new
    eta = xb + sz * v[idx]
    mu = expit(eta)
    grad = _segsum(sz * (y - mu), offs) - ratio * v
    hess = _segsum(sz * sz * mu * (1.0 - mu), offs) + ratio
    if np.abs(grad).max() < MODE_GRAD_ESCAPE:
        return v, hess
    raise ModeFindingError(
        f"cluster modes did not reach gradient norm {MODE_GRAD_TOL_V}",
        last_iterate=v,
        grad_norm=float(np.abs(grad).max()),
    )


def _mode_v_general(cluster: Cluster, xb: np.ndarray, A: np.ndarray, v0=None):
    """Mode of gt(v) = condloglik(xb + A v) - ||v||^2/2 for one cluster.

    A = Z L; the curvature A'WA + I is at least the identity, so the
    solve stays well-conditioned for any covariance, including nearly
    singular ones.
    """
    q = A.shape[1]

    def g_of(v_vec):
        eta = xb + A @ v_vec
        return float(np.sum(cluster.y * eta - np.logaddexp(0.0, eta)) - 0.5 * v_vec @ v_vec)

    v = np.zeros(q) if v0 is None else np.array(v0, dtype=float)
    g = g_of(v)
    if v0 is not None:
        g0 = g_of(np.zeros(q))
        if not g >= g0:
            v = np.zeros(q)
            g = g0
    lam = 0.0
    grad = None
    for _ in range(MODE_MAX_ITER):
        eta = xb + A @ v
        mu = expit(eta)
        grad = A.T @ (cluster.y - mu) - v
        w = mu * (1.0 - mu)
        H = A.T @ (w[:, None] * A) + np.eye(q)
        if np.linalg.norm(grad) < MODE_GRAD_TOL_V:
            return v, H
        accepted = False
        for _ in range(60):
            step = np.linalg.solve(H + lam * np.eye(q), grad)
            norm = np.linalg.norm(step)
            if norm > MODE_MAX_STEP:
                step = step * (MODE_MAX_STEP / norm)
            g_new = g_of(v + step)
            if g_new >= g - 1e-12 * (1.0 + abs(g)):
                v = v + step
                g = g_new
                lam = lam / 10.0 if lam > 1e-12 else 0.0
                accepted = True
                break
            lam = max(lam * 10.0, 1e-4)
        if not accepted:
            break
    eta = xb + A @ v
    mu = expit(eta)
    grad = A.T @ (cluster.y - mu) - v
    H = A.T @ ((mu * (1.0 - mu))[:, None] * A) + np.eye(q)
    if np.linalg.norm(grad) < MODE_GRAD_ESCAPE:
        return v, H
    raise ModeFindingError(
        f"cluster mode did not reach gradient norm {MODE_GRAD_TOL_V}",
        last_iterate=v,
        grad_norm=float(np.linalg.norm(grad)),
    )


# ---------------------------------------------------------------------------
# Adaptive Gauss-Hermite quadrature (q = 1)
# ---------------------------------------------------------------------------


def agq_cluster_logprobs(
    data: ClusteredDataset,
    theta: Theta,
    rule: QuadratureRule,
    warm=None,
):
    """Per-cluster log probability masses under adaptive quadrature (q = 1).

    Returns (logprobs, warm_state); the sum of logprobs is the
    approximate log-likelihood and each entry is the log of a
    probability mass in (0, 1].
    """
    if data.q != 1:
        raise ValueError(f"adaptive quadrature supports q = 1 only, got q = {data.q}")
    sigma = float(np.exp(theta.psi[0]))
    s, ratio = _q1_scale(sigma)
    log_s_over_sigma = 0.0 if sigma <= 1.0 else -float(theta.psi[0])
    xb = data.X @ theta.beta
    v, hess = _modes_q1(data, xb, sigma, warm)
    log_tau = -0.5 * np.log(hess)
    tau = np.exp(log_tau)

    offs = data.row_offsets
    idx = data.row_cluster
    y = data.y
    sz = s * data.Z[:, 0]
    x = rule.nodes
    logw = np.log(rule.weights)

    base = xb + sz * v[idx]
    scale = sz * (np.sqrt(2.0) * tau)[idx]
    eta = base[:, None] + scale[:, None] * x[None, :]
    cond = _segsum(y[:, None] * eta - np.logaddexp(0.0, eta), offs)
    v_nodes = v[:, None] + (np.sqrt(2.0) * tau)[:, None] * x[None, :]
    g_nodes = cond - 0.5 * ratio * v_nodes**2
    g_mode = _segsum(y * base - np.logaddexp(0.0, base), offs) - 0.5 * ratio * v**2
    log_int_rel = logsumexp(logw[None, :] + x[None, :] ** 2 + (g_nodes - g_mode[:, None]), axis=1)
    logprobs = g_mode + log_tau + log_int_rel + log_s_over_sigma - 0.5 * np.log(np.pi)
    return logprobs, v


def agq_loglik(data: ClusteredDataset, theta: Theta, rule: QuadratureRule) -> float:
    """Adaptive Gauss-Hermite approximation of the marginal log-likelihood."""
    logprobs, _ = agq_cluster_logprobs(data, theta, rule)
    return float(logprobs.sum())


# ---------------------------------------------------------------------------
# Laplace approximation (any q)
# ---------------------------------------------------------------------------


def _laplace_q1(data: ClusteredDataset, theta: Theta, warm=None):
    # Shares the inner solver with the quadrature path, which makes
    # laplace == one-node adaptive quadrature an identity up to rounding.
    sigma = float(np.exp(theta.psi[0]))
    s, ratio = _q1_scale(sigma)
    log_s_over_sigma = 0.0 if sigma <= 1.0 else -float(theta.psi[0])
    xb = data.X @ theta.beta
    v, hess = _modes_q1(data, xb, sigma, warm)
    eta = xb + s * data.Z[:, 0] * v[data.row_cluster]
    g_mode = (
        _segsum(data.y * eta - np.logaddexp(0.0, eta), data.row_offsets)
        - 0.5 * ratio * v**2
    )
    return g_mode - 0.5 * np.log(hess) + log_s_over_sigma, v


def laplace_cluster_logprobs(
    data: ClusteredDataset,
    theta: Theta,
    warm=None,
    threads: int = 1,
):
    """Per-cluster log probability masses under the Laplace approximation.

    Returns (logprobs, warm_state).  Cluster evaluations are
    independent and may run on a thread pool; the reduction is always
    in cluster order.
    """
    if data.q == 1:
        return _laplace_q1(data, theta, warm)
    L = psi_to_chol(theta.psi, theta.q)
    xb_all = data.X @ theta.beta
    offs = data.row_offsets
    starts = warm if warm is not None else [None] * data.k

    def one(i):
        cluster = data.clusters[i]
        xb = xb_all[offs[i]:offs[i + 1]]
        A = cluster.Z @ L
        v, H = _mode_v_general(cluster, xb, A, starts[i])
        eta = xb + A @ v
        g = float(np.sum(cluster.y * eta - np.logaddexp(0.0, eta)) - 0.5 * v @ v)
        # log det(Z'WZ + Sigma^{-1}) + log det(Sigma) telescopes to
        # log det(A'WA + I), so the -k/2 log det Sigma term is already
        # absorbed here.
        half_logdet = float(np.sum(np.log(np.diag(np.linalg.cholesky(H)))))
        return g - half_logdet, v

    if threads > 1 and data.k > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(data.k)))
    else:
        results = [one(i) for i in range(data.k)]
    logprobs = np.array([r[0] for r in results])
    modes = [r[1] for r in results]
    return logprobs, modes


def laplace_loglik(data: ClusteredDataset, theta: Theta, threads: int = 1) -> float:
    """Laplace approximation of the marginal log-likelihood (any q >= 1)."""
    logprobs, _ = laplace_cluster_logprobs(data, theta, threads=threads)
    return float(logprobs.sum())


class LoglikEvaluator:
    """Reusable evaluator with warm-started cluster modes.

    The dominant cost of an objective evaluation is the inner Newton
    solve for the cluster modes; consecutive evaluations during an
    optimization differ by small parameter steps, so the previous modes
    are excellent starting points.  The evaluator is not thread safe,
    but distinct instances may run concurrently.
    """

    def __init__(
        self,
        data: ClusteredDataset,
        approx: str = "auto",
        rule: QuadratureRule | None = None,
        threads: int = 1,
    ):
        if approx == "auto":
            approx = "agq" if data.q == 1 else "laplace"
        if approx == "agq" and data.q != 1:
            raise ValueError(f"adaptive quadrature supports q = 1 only, got q = {data.q}")
        if approx == "agq" and rule is None:
            rule = gauss_hermite_rule(100)
        if approx not in ("agq", "laplace"):
            raise ValueError(f"unknown approximation '{approx}'")
        self.data = data
        self.approx = approx
        self.rule = rule
        self.threads = threads
        self._warm = None

    def cluster_logprobs(self, theta: Theta) -> np.ndarray:
        if self.approx == "agq":
            logprobs, warm = agq_cluster_logprobs(self.data, theta, self.rule, self._warm)
        else:
            logprobs, warm = laplace_cluster_logprobs(
                self.data, theta, self._warm, threads=self.threads
            )
        self._warm = warm
        return logprobs

    def loglik(self, theta: Theta) -> float:
        return float(self.cluster_logprobs(theta).sum())

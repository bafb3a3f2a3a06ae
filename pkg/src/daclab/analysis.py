"""Consensus-error diagnostics, closed-form mode predictions and Lanczos.

Conventions: ``X`` is ``d x n`` (one column per worker), ``Delta = X P`` with
``P = I - 11^T/n``.  Laplacian bases come from
:func:`daclab.graph.laplacian_spectrum` (column 0 is the consensus mode);
Hessian bases are ordered by ascending eigenvalue, so the "top" modes are the
last columns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, InvalidArgumentError, UnstableModeError


def consensus_error(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X - X.mean(axis=1, keepdims=True)


def radius_sq(delta) -> float:
    return float(np.sum(np.square(delta)))


def laplacian_modes(delta, U_L):
    """``Z = Delta U_L`` and the energy of each graph mode (column norms squared)."""
    Z = np.asarray(delta) @ np.asarray(U_L)
    return Z, np.sum(Z * Z, axis=0)


def hessian_projection(delta, U_H) -> np.ndarray:
    """Energy ``|u_k^T Delta|^2`` along each basis column ``u_k``."""
    proj = np.asarray(U_H).T @ np.asarray(delta)
    return np.sum(proj * proj, axis=1)


def alignment_score(energies, k: int, eigenvalues=None) -> float:
    """Fraction of total energy carried by the ``k`` highest-curvature modes.

    Without ``eigenvalues`` the energies are assumed ordered by ascending
    curvature (the convention of every basis in this package).
    """
    e = np.asarray(energies, dtype=float)
    if not 1 <= k <= e.size:
        raise InvalidArgumentError(f"k must lie in [1, {e.size}]")
    if eigenvalues is not None:
        e = e[np.argsort(np.asarray(eigenvalues), kind="stable")]
    total = e.sum()
    if total <= 0:
        return 0.0
    return float(min(1.0, max(0.0, e[-k:].sum() / total)))


@dataclass
class SurrogateTerms:
    deployed: float
    sharpness: float
    regularizer: float

    @property
    def total(self) -> float:
        return self.deployed + self.sharpness + self.regularizer


def surrogate_terms(X, alpha, W, problem) -> SurrogateTerms:
    """Split the per-step surrogate into deployed loss, sharpness and consensus penalty.

    All sums run over workers (not averaged), matching the surrogate whose
    gradient step is one DSGD round.
    """
    if not alpha > 0:
        raise InvalidArgumentError("alpha must be positive")
    X = np.asarray(X, dtype=float)
    W = np.asarray(getattr(W, "W", W), dtype=float)
    n = X.shape[1]
    xbar = X.mean(axis=1)
    f_bar = problem.loss(xbar)
    local = problem.losses(X)
    sq = np.sum(X * X, axis=0)
    pair = sq[:, None] + sq[None, :] - 2.0 * (X.T @ X)
    pair = np.maximum(pair, 0.0)
    reg = float(np.sum(W * pair)) / (2.0 * alpha)
    return SurrogateTerms(n * f_bar, float(np.sum(local)) - n * f_bar, reg)


@dataclass
class EnvelopeTerms:
    center_loss: float
    mean_worker_loss: float
    quad_term: float
    residual: float
    trace_sigma: float
    center_point: np.ndarray
    approximate: bool = False


def envelope_terms(X, problem) -> EnvelopeTerms:
    """Mean worker loss = F(xbar) + 1/2 tr(H Sigma) + residual, with H taken at xbar.

    Problems without an explicit Hessian get the quadratic term from one
    Hessian-vector product per disagreement vector (flagged approximate).
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[1]
    xbar = X.mean(axis=1)
    E = X - xbar[:, None]
    center = problem.loss(xbar)
    mean_loss = float(np.mean(problem.losses(X)))
    H = problem.hessian(xbar)
    approximate = H is None
    if H is not None:
        quad = 0.5 * float(np.sum(E * (H @ E))) / n
    else:
        acc = 0.0
        for i in range(n):
            e = E[:, i]
            if np.any(e):
                acc += float(e @ problem.hvp(xbar, e))
        quad = 0.5 * acc / n
    tr = float(np.sum(E * E)) / n
    return EnvelopeTerms(center, mean_loss, quad, mean_loss - center - quad, tr, xbar, approximate)


def stationary_moments(alpha, gamma, lam, mu, sigma2):
    """Stationary mean and variance of ``z <- (1 - gamma*lam) z - alpha*g``.

    ``g`` has mean ``mu`` and variance ``sigma2``.
    """
    s = gamma * lam
    if not lam > 0 or not 0 < s < 2:
        raise UnstableModeError(f"gamma*lambda = {s} outside (0, 2)")
    m = -(alpha / gamma) * mu / lam
    V = alpha**2 * sigma2 / (2.0 * lam * gamma - lam**2 * gamma**2)
    return m, V


def variance_bounds(alpha, gamma, lam, sigma2):
    """Bracket for the stationary variance valid when ``gamma*lam <= 1``."""
    base = alpha**2 * sigma2 / (lam * gamma)
    return 0.5 * base, base


def stability_threshold(lambda_min_w, gamma, lam_h) -> float:
    """Largest stable step size for Hessian mode ``lam_h``; 0 when no step is stable."""
    if not lam_h > 0:
        raise InvalidArgumentError("Hessian eigenvalue must be positive")
    num = 2.0 + (lambda_min_w - 1.0) * gamma
    return max(0.0, num / lam_h)


def mode_matrix(W, gamma, alpha, lam_h) -> np.ndarray:
    W = np.asarray(getattr(W, "W", W), dtype=float)
    n = W.shape[0]
    return (1.0 - gamma - alpha * lam_h) * np.eye(n) + gamma * W


def mode_spectral_radius(W, gamma, alpha, lam_h, disagreement_only=True) -> float:
    """Spectral radius of the mode matrix, optionally restricted to the disagreement subspace."""
    A = mode_matrix(W, gamma, alpha, lam_h)
    n = A.shape[0]
    if disagreement_only and n > 1:
        P = np.eye(n) - np.full((n, n), 1.0 / n)
        A = P @ A @ P
    return float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (A + A.T)))))


def tilt_weight(lam, gamma, lam_l, alpha):
    return lam / (gamma * lam_l + alpha * lam)


@dataclass
class TiltPrediction:
    value: float
    max_step_sum: float  # max over modes of gamma*lam_L + alpha*lam_H
    exact_value: float  # same sum without the small-step approximation

    @property
    def small_stepsize(self) -> bool:
        return self.max_step_sum <= 0.2


def tilt_prediction(alpha, gamma, lam_L, lam_H, q) -> TiltPrediction:
    """Leading-order ``1/2 E tr(H Sigma)`` from graph/Hessian mode variances.

    ``q`` is ``d x n`` with rows indexed by Hessian mode and columns by
    Laplacian mode; column 0 (consensus) is ignored.
    """
    lam_L = np.asarray(lam_L, dtype=float)
    lam_H = np.asarray(lam_H, dtype=float)
    q = np.asarray(q, dtype=float)
    n = lam_L.size
    if q.shape != (lam_H.size, n):
        raise InvalidArgumentError(f"q must have shape ({lam_H.size}, {n})")
    s = gamma * lam_L[None, 1:] + alpha * lam_H[:, None]
    w = lam_H[:, None] / s
    value = alpha**2 / (4.0 * n) * float(np.sum(w * q[:, 1:]))
    with np.errstate(divide="ignore"):
        exact = 0.5 / n * float(np.sum(lam_H[:, None] * alpha**2 * q[:, 1:] / (s * (2.0 - s))))
    return TiltPrediction(value, float(s.max()) if s.size else 0.0, exact)


def estimate_innovation_variances(noise_samples, U_H, U_L, min_samples: int = 100) -> np.ndarray:
    """Sample variance of each entry of ``U_H^T Xi P U_L`` over recorded noise matrices."""
    S = np.asarray(noise_samples, dtype=float)
    if S.ndim != 3 or S.shape[0] < min_samples:
        raise InsufficientDataError(f"need at least {min_samples} noise samples, got {S.shape[0] if S.ndim else 0}")
    zeta = np.einsum("dk,sdn,nj->skj", np.asarray(U_H), S - S.mean(axis=2, keepdims=True), np.asarray(U_L))
    return zeta.var(axis=0, ddof=1)


@dataclass
class LanczosResult:
    eigenvalue: float
    ritz_values: np.ndarray  # descending; ascending when ritz vectors are requested
    ritz_vectors: np.ndarray | None  # d x k, matching ritz_values
    iterations: int
    early_stop: bool


def lanczos_top_eigenvalue(hvp, d: int, iters: int = 15, seed: int = 0, ritz_vectors: int = 0,
                           breakdown: float = 1e-14) -> LanczosResult:
    """Largest Ritz value after ``iters`` Lanczos steps with full reorthogonalization."""
    if iters < 1:
        raise InvalidArgumentError("iters must be >= 1")
    m = min(iters, d)
    rng = np.random.default_rng([seed, 104729])
    q = rng.standard_normal(d)
    q /= np.linalg.norm(q)
    Q = np.zeros((d, m))
    alphas, betas = [], []
    early = False
    for j in range(m):
        Q[:, j] = q
        w = np.asarray(hvp(q), dtype=float)
        a = float(q @ w)
        alphas.append(a)
        basis = Q[:, : j + 1]
        for _ in range(2):
            w = w - basis @ (basis.T @ w)
        if j == m - 1:
            break
        b = float(np.linalg.norm(w))
        if b < breakdown:
            early = True
            break
        betas.append(b)
        q = w / b
    k = len(alphas)
    T = np.diag(alphas) + np.diag(betas[: k - 1], 1) + np.diag(betas[: k - 1], -1)
    vals, vecs = np.linalg.eigh(T)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    vectors = None
    if ritz_vectors:
        r = min(ritz_vectors, k)
        vectors = Q[:, :k] @ vecs[:, :r]
        vals_out = vals[:r]
        # ascending order to match the package's basis convention
        vectors, vals_out = vectors[:, ::-1], vals_out[::-1]
    else:
        vals_out = vals
    return LanczosResult(float(vals[0]), vals_out, vectors, k, early)


def simulate_mode_ar1(alpha, gamma, lam, mu, sigma2, n_samples: int, rng: np.random.Generator,
                      tol: float = 1e-8) -> np.ndarray:
    """Stationary draws of ``z <- (1 - gamma*lam) z - alpha*g`` with Gaussian ``g``.

    Runs ``n_samples`` independent chains from ``z = 0`` until the start-up
    transient ``|1 - gamma*lam|**K`` drops below ``tol``, so the returned
    samples are independent and the usual ``sqrt(V / N)`` error bars apply.
    """
    a = 1.0 - gamma * lam
    if not abs(a) < 1:
        raise UnstableModeError(f"gamma*lambda = {gamma * lam} outside (0, 2)")
    steps = 1 if a == 0 else int(math.ceil(math.log(tol) / math.log(abs(a))))
    sd = math.sqrt(sigma2)
    z = np.zeros(n_samples)
    for _ in range(steps):
        g = mu + sd * rng.standard_normal(n_samples)
        z *= a
        z -= alpha * g
    return z

"""Probability core for the logistic concept model.

Gaussian-prior MAP estimation, Laplace-approximated log marginal likelihoods,
partial Bayes factors, and the posterior-predictive ensemble. Everything here
is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .concepts import ConceptSet


class OptimizationError(RuntimeError):
    """Newton solver failed to converge; carries the last iterate."""

    def __init__(self, message: str, theta: np.ndarray):
        super().__init__(message)
        self.theta = theta


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Prior scale and model size.

    gamma is the standard deviation of the N(0, gamma^2 I) prior on all
    coefficients, intercept included.
    """

    gamma: float
    k: int
    include_intercept: bool = True

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")


@dataclass
class AnnotationMatrix:
    """n x (K+1) design of concept extraction values plus an intercept column.

    Concept columns follow the concept-set order; the intercept column is last.
    """

    values: np.ndarray
    row_ids: tuple[str, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("annotation matrix must be 2-D")
        if self.values.shape[0] != len(self.row_ids):
            raise ValueError("row_ids must align with matrix rows")
        concept_cols = self.values[:, :-1]
        if concept_cols.size and (concept_cols.min() < 0 or concept_cols.max() > 1):
            raise ValueError("concept annotation values must lie in [0, 1]")
        if self.values.size and not np.all(self.values[:, -1] == 1.0):
            raise ValueError("intercept column must be all ones")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @staticmethod
    def build(concept_values: np.ndarray, row_ids: Sequence[str],
              include_intercept: bool = True) -> "AnnotationMatrix":
        concept_values = np.atleast_2d(np.asarray(concept_values, dtype=float))
        if include_intercept:
            ones = np.ones((concept_values.shape[0], 1))
            values = np.hstack([concept_values, ones])
        else:
            values = concept_values
        return AnnotationMatrix(values=values, row_ids=tuple(row_ids))


@dataclass
class LogMarginal:
    """Laplace-approximated log marginal likelihood together with its MAP fit."""

    value: float
    theta_map: np.ndarray
    log_det_hessian: float


def log1pexp(z: np.ndarray) -> np.ndarray:
    """Overflow-safe log(1 + exp(z))."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z > 0
    out[pos] = z[pos] + np.log1p(np.exp(-z[pos]))
    out[~pos] = np.log1p(np.exp(z[~pos]))
    return out


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_predict(theta: np.ndarray, phi_row: np.ndarray) -> float:
    """Probability sigma(theta . phi_row) for one annotated observation."""
    theta = np.asarray(theta, dtype=float)
    phi_row = np.asarray(phi_row, dtype=float)
    if theta.shape != phi_row.shape:
        raise ValueError(
            f"dimension mismatch: theta has shape {theta.shape}, row has {phi_row.shape}")
    return float(sigmoid(theta @ phi_row))


def _objective(theta: np.ndarray, phi: np.ndarray, y: np.ndarray, gamma: float) -> float:
    z = phi @ theta
    return float(np.sum(-y * z + log1pexp(z)) + 0.5 * theta @ theta / gamma**2)


def map_estimate(phi: AnnotationMatrix, y: np.ndarray, cfg: ModelConfig,
                 tol: float = 1e-8, max_iter: int = 100) -> np.ndarray:
    """Ridge-logistic MAP coefficients via damped Newton.

    Minimizes sum_i [-y_i z_i + log(1+exp(z_i))] + ||theta||^2 / (2 gamma^2)
    starting from 0, to gradient infinity-norm <= tol. The objective is
    strongly convex so Newton with backtracking always converges in a handful
    of steps at this dimension.
    """
    X = phi.values
    y = np.asarray(y, dtype=float)
    if X.shape[0] != y.shape[0]:
        raise ValueError("rows of phi must align with labels")
    d = X.shape[1]
    gamma = cfg.gamma
    theta = np.zeros(d)
    if X.shape[0] == 0:
        return theta  # prior mode
    g = _objective(theta, X, y, gamma)
    for _ in range(max_iter):
        z = X @ theta
        p = sigmoid(z)
        grad = X.T @ (p - y) + theta / gamma**2
        if np.max(np.abs(grad)) <= tol:
            return theta
        w = p * (1.0 - p)
        H = (X * w[:, None]).T @ X + np.eye(d) / gamma**2
        step = np.linalg.solve(H, grad)
        # backtracking line search; the epsilon term absorbs floating-point
        # noise once the decrement falls below machine precision
        t = 1.0
        for _ in range(50):
            cand = theta - t * step
            g_cand = _objective(cand, X, y, gamma)
            if g_cand <= g - 1e-4 * t * (grad @ step) + 1e-12 * max(1.0, abs(g)):
                theta, g = cand, g_cand
                break
            t *= 0.5
        else:
            raise OptimizationError("line search failed to make progress", theta)
    z = X @ theta
    grad = X.T @ (sigmoid(z) - y) + theta / gamma**2
    if np.max(np.abs(grad)) <= tol:
        return theta
    raise OptimizationError(
        f"Newton did not converge in {max_iter} iterations "
        f"(grad inf-norm {np.max(np.abs(grad)):.3e})", theta)


def log_marginal_likelihood(phi: AnnotationMatrix, y: np.ndarray,
                            cfg: ModelConfig) -> LogMarginal:
    """Laplace approximation of the log marginal likelihood.

    log p(y | c, X) ~= -g(theta_MAP) - (d/2) log(gamma^2) - 1/2 log det H,
    where H = sum_i sigma_i (1-sigma_i) phi_i phi_i^T + gamma^-2 I. The two
    (2 pi)^{d/2} factors from the prior normalization and the Gaussian
    integral cancel exactly. For empty data this is identically 0.
    """
    X = phi.values
    y = np.asarray(y, dtype=float)
    d = X.shape[1]
    gamma = cfg.gamma
    theta = map_estimate(phi, y, cfg)
    g = _objective(theta, X, y, gamma)
    p = sigmoid(X @ theta)
    w = p * (1.0 - p)
    H = (X * w[:, None]).T @ X + np.eye(d) / gamma**2
    try:
        chol = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:  # H >= gamma^-2 I, so this is diagnostic only
        raise NumericalError(
            f"Hessian factorization failed (cond ~ {np.linalg.cond(H):.3e})") from exc
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    value = -g - 0.5 * d * np.log(gamma**2) - 0.5 * log_det
    if not np.isfinite(value):
        raise NumericalError("non-finite log marginal likelihood")
    return LogMarginal(value=float(value), theta_map=theta, log_det_hessian=log_det)


def log_partial_bayes(phi: AnnotationMatrix, y: np.ndarray, subset_s: np.ndarray,
                      cfg: ModelConfig) -> float:
    """log p(y_{S^c} | y_S, c, X) as a difference of two Laplace marginals."""
    subset_s = np.asarray(subset_s, dtype=int)
    if subset_s.size and (subset_s.min() < 0 or subset_s.max() >= phi.n):
        raise ValueError("subset indices out of range")
    full = log_marginal_likelihood(phi, y, cfg)
    phi_s = AnnotationMatrix(values=phi.values[subset_s],
                             row_ids=tuple(phi.row_ids[i] for i in subset_s))
    part = log_marginal_likelihood(phi_s, np.asarray(y)[subset_s], cfg)
    return full.value - part.value


@dataclass
class PosteriorSample:
    """One recorded chain state with its full-data MAP fit."""

    concept_set: ConceptSet
    theta: np.ndarray
    log_marginal_full: float
    epoch: int
    slot: int
    accepted: bool
    burn_in: bool = False
    phase: str = "sample"  # "warm_start" or "sample"

    def to_dict(self) -> dict:
        return {
            "concepts": [{"question": c.question, "id": c.id} for c in self.concept_set],
            "theta": [float(t) for t in self.theta],
            "log_marginal_full": self.log_marginal_full,
            "epoch": self.epoch,
            "slot": self.slot,
            "accepted": self.accepted,
            "burn_in": self.burn_in,
            "phase": self.phase,
        }

    @staticmethod
    def from_dict(d: dict) -> "PosteriorSample":
        from .concepts import Concept
        return PosteriorSample(
            concept_set=ConceptSet(Concept(c["question"]) for c in d["concepts"]),
            theta=np.asarray(d["theta"], dtype=float),
            log_marginal_full=d["log_marginal_full"],
            epoch=d["epoch"],
            slot=d["slot"],
            accepted=d["accepted"],
            burn_in=d.get("burn_in", False),
            phase=d.get("phase", "sample"),
        )


def posterior_predictive(samples: Sequence[PosteriorSample],
                         phi_rows: Sequence[np.ndarray]) -> float:
    """Ensemble probability: mean of per-sample plug-in predictions.

    phi_rows[i] must be the observation annotated under samples[i]'s concept
    set (intercept included), since each sample sees its own design.
    """
    if not samples:
        raise ValueError("posterior predictive requires at least one sample")
    if len(phi_rows) != len(samples):
        raise ValueError("need one annotated row per posterior sample")
    preds = [sigmoid_predict(s.theta, row) for s, row in zip(samples, phi_rows)]
    return float(np.mean(preds))

"""Keyphrase residual model: bag-of-words design, ridge-penalized logistic fit
with cross-validated penalty, and the ranked top-keyphrase summary used to
prompt concept proposals.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.optimize
import scipy.sparse as sp

from .model import log1pexp, sigmoid
from .oracle import KeyphraseBag

CONCEPT_RIDGE = 1e-6  # tiny fixed ridge on concept columns, conditioning only
DEFAULT_LAMBDA_GRID = tuple(np.logspace(-3, 3, 10))


@dataclass
class Vocabulary:
    """Dense phrase -> column mapping built from the active data subset only."""

    index: dict[str, int]
    doc_freq: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.index)

    def phrases(self) -> list[str]:
        return sorted(self.index, key=self.index.get)


def build_bow(bags: Sequence[KeyphraseBag], min_df: int = 2) -> tuple[Vocabulary, sp.csr_matrix]:
    """Binary presence matrix over phrases with document frequency >= min_df."""
    df: dict[str, int] = {}
    for bag in bags:
        for phrase in bag.phrases:
            df[phrase] = df.get(phrase, 0) + 1
    kept = sorted(p for p, c in df.items() if c >= min_df)
    if not kept:
        raise ValueError(f"empty vocabulary: no phrase appears in at least {min_df} documents")
    index = {p: i for i, p in enumerate(kept)}
    rows, cols = [], []
    for i, bag in enumerate(bags):
        for phrase in bag.phrases:
            j = index.get(phrase)
            if j is not None:
                rows.append(i)
                cols.append(j)
    matrix = sp.csr_matrix((np.ones(len(rows)), (rows, cols)),
                           shape=(len(bags), len(kept)))
    return Vocabulary(index=index, doc_freq={p: df[p] for p in kept}), matrix


@dataclass
class KeyphraseModelFit:
    beta_w: np.ndarray          # (V,) binary or (R, V) multinomial
    beta_c: np.ndarray          # (C,) or (R, C)
    intercept: np.ndarray       # scalar array or (R,)
    lambda_: float
    cv_scores: list[tuple[float, float]]
    vocabulary: Optional[Vocabulary]
    classes: np.ndarray


@dataclass
class KeyphraseSummary:
    """Ranked (phrase, coefficient, sign) triples, strongest first."""

    entries: list[tuple[str, float, int]]
    residual_signal: bool = True


def _design(bow, concepts: Optional[np.ndarray]) -> tuple[np.ndarray, int, int]:
    X_w = np.asarray(bow.todense()) if sp.issparse(bow) else np.asarray(bow, dtype=float)
    n = X_w.shape[0]
    X_c = np.zeros((n, 0)) if concepts is None else np.atleast_2d(np.asarray(concepts, dtype=float))
    if X_c.shape[0] != n:
        raise ValueError("concept rows must align with bag-of-words rows")
    X = np.hstack([X_c, X_w, np.ones((n, 1))])
    return X, X_c.shape[1], X_w.shape[1]


def _penalties(n_concepts: int, n_words: int, lam: float) -> np.ndarray:
    return np.concatenate([
        np.full(n_concepts, CONCEPT_RIDGE),
        np.full(n_words, lam),
        [0.0],  # unpenalized intercept
    ])


def _fit_binary(X: np.ndarray, y: np.ndarray, pen: np.ndarray,
                max_iter: int = 200, tol: float = 1e-8) -> np.ndarray:
    d = X.shape[1]
    beta = np.zeros(d)

    def obj(b):
        z = X @ b
        return float(np.sum(-y * z + log1pexp(z)) + 0.5 * np.sum(pen * b * b))

    g = obj(beta)
    for _ in range(max_iter):
        z = X @ beta
        p = sigmoid(z)
        grad = X.T @ (p - y) + pen * beta
        if np.max(np.abs(grad)) <= tol:
            break
        w = np.maximum(p * (1 - p), 1e-10)
        H = (X * w[:, None]).T @ X + np.diag(pen + 1e-10)
        step = np.linalg.solve(H, grad)
        t = 1.0
        for _ in range(50):
            cand = beta - t * step
            gc = obj(cand)
            if gc <= g - 1e-4 * t * (grad @ step) + 1e-12 * max(1.0, abs(g)):
                beta, g = cand, gc
                break
            t *= 0.5
        else:
            break
    return beta


def _fit_multinomial(X: np.ndarray, onehot: np.ndarray, pen: np.ndarray) -> np.ndarray:
    n, d = X.shape
    r = onehot.shape[1]

    def obj_grad(flat):
        B = flat.reshape(r, d)
        Z = X @ B.T
        Z -= Z.max(axis=1, keepdims=True)
        expZ = np.exp(Z)
        P = expZ / expZ.sum(axis=1, keepdims=True)
        loss = -np.sum(onehot * np.log(np.maximum(P, 1e-300)))
        loss += 0.5 * np.sum(pen[None, :] * B * B)
        grad = (P - onehot).T @ X + pen[None, :] * B
        return loss, grad.ravel()

    res = scipy.optimize.minimize(obj_grad, np.zeros(r * d), jac=True, method="L-BFGS-B",
                                  options={"maxiter": 1000, "ftol": 1e-14, "gtol": 1e-9})
    return res.x.reshape(r, d)


def _heldout_loss(X_tr, y_tr, X_te, y_te, pen, classes) -> float:
    if len(classes) == 2:
        beta = _fit_binary(X_tr, (y_tr == classes[1]).astype(float), pen)
        z = X_te @ beta
        y_bin = (y_te == classes[1]).astype(float)
        return float(np.mean(-y_bin * z + log1pexp(z)))
    onehot_tr = (y_tr[:, None] == classes[None, :]).astype(float)
    B = _fit_multinomial(X_tr, onehot_tr, pen)
    Z = X_te @ B.T
    Z -= Z.max(axis=1, keepdims=True)
    logP = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
    idx = np.searchsorted(classes, y_te)
    return float(-np.mean(logP[np.arange(len(y_te)), idx]))


def fit_keyphrase_model(bow, concepts: Optional[np.ndarray], y: np.ndarray,
                        lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
                        folds: int = 5, seed: int = 0, family: str = "auto",
                        vocabulary: Optional[Vocabulary] = None) -> KeyphraseModelFit:
    """Fit the keyphrase model with lambda chosen by k-fold cross-validation.

    Only the bag-of-words block is penalized by lambda; concept columns carry
    a tiny fixed ridge for conditioning and the intercept is unpenalized.
    The argmin lambda is the first occurrence in grid order.
    """
    y = np.asarray(y)
    classes = np.unique(y)
    if folds < 2:
        raise ValueError("cross-validation requires folds >= 2")
    if family == "auto":
        family = "binary" if len(classes) == 2 else "multinomial"
    X, n_c, n_w = _design(bow, concepts)
    n = X.shape[0]
    multiclass = family == "multinomial"

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    fold_of = np.empty(n, dtype=int)
    fold_of[order] = np.arange(n) % folds

    cv_scores: list[tuple[float, float]] = []
    for lam in lambda_grid:
        pen = _penalties(n_c, n_w, lam)
        losses = []
        for f in range(folds):
            te = fold_of == f
            tr = ~te
            if len(np.unique(y[tr])) < len(classes):
                continue  # degenerate fold; skip
            if multiclass and len(classes) == 2:
                losses.append(_heldout_multinomial_binary(X[tr], y[tr], X[te], y[te], pen, classes))
            else:
                losses.append(_heldout_loss(X[tr], y[tr], X[te], y[te], pen, classes))
        cv_scores.append((float(lam), float(np.mean(losses))))
    best_lambda = min(cv_scores, key=lambda t: t[1])[0]

    pen = _penalties(n_c, n_w, best_lambda)
    if multiclass:
        onehot = (y[:, None] == classes[None, :]).astype(float)
        B = _fit_multinomial(X, onehot, pen)
        beta_c, beta_w, intercept = B[:, :n_c], B[:, n_c:n_c + n_w], B[:, -1]
    else:
        beta = _fit_binary(X, (y == classes[1]).astype(float), pen)
        beta_c, beta_w, intercept = beta[:n_c], beta[n_c:n_c + n_w], beta[-1:]
    return KeyphraseModelFit(beta_w=beta_w, beta_c=beta_c, intercept=intercept,
                             lambda_=best_lambda, cv_scores=cv_scores,
                             vocabulary=vocabulary, classes=classes)


def _heldout_multinomial_binary(X_tr, y_tr, X_te, y_te, pen, classes) -> float:
    onehot_tr = (y_tr[:, None] == classes[None, :]).astype(float)
    B = _fit_multinomial(X_tr, onehot_tr, pen)
    Z = X_te @ B.T
    Z -= Z.max(axis=1, keepdims=True)
    logP = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
    idx = np.searchsorted(classes, y_te)
    return float(-np.mean(logP[np.arange(len(y_te)), idx]))


def summarize_top_keyphrases(fit: KeyphraseModelFit, top_n: int = 50,
                             class_index: Optional[int] = None) -> KeyphraseSummary:
    """Top phrases by absolute coefficient, descending; ties break lexicographically."""
    vocabulary = fit.vocabulary
    if vocabulary is None:
        raise ValueError("fit carries no vocabulary; pass one to fit_keyphrase_model")
    beta_w = fit.beta_w
    if beta_w.ndim == 2:
        beta_w = beta_w[class_index if class_index is not None else -1]
    phrases = vocabulary.phrases()
    if len(phrases) != len(beta_w):
        raise ValueError("vocabulary does not match the fitted coefficients")
    order = sorted(range(len(phrases)), key=lambda j: (-abs(beta_w[j]), phrases[j]))
    entries = [(phrases[j], float(beta_w[j]), int(np.sign(beta_w[j])))
               for j in order[:top_n] if beta_w[j] != 0.0]
    return KeyphraseSummary(entries=entries, residual_signal=bool(entries))

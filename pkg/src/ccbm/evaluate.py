"""Metrics, concept matching, recovery reports, and the brute-force posterior
enumeration oracle."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import rankdata

from .concepts import Concept, ConceptSet
from .model import AnnotationMatrix, ModelConfig, log_marginal_likelihood


class MetricUndefinedError(ValueError):
    pass


class InconclusiveMatchError(RuntimeError):
    """The shared annotation panel is too small to decide a concept match."""


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC with midrank tie handling."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels == 1
    neg = labels == 0
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC requires both classes present")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def brier(scores: np.ndarray, labels: np.ndarray) -> float:
    scores = np.asarray(scores, dtype=float)
    if scores.size and (scores.min() < 0 or scores.max() > 1):
        raise ValueError("scores must lie in [0, 1]")
    return float(np.mean((scores - np.asarray(labels, dtype=float)) ** 2))


def predictive_entropy(class_probs: Sequence[float]) -> float:
    p = np.asarray(class_probs, dtype=float)
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"class probabilities must sum to 1, got {p.sum()!r}")
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


@dataclass(frozen=True)
class ConceptMatchRule:
    """Two concepts match when |Pearson corr| of their annotations exceeds threshold."""

    threshold: float = 0.5
    borderline: tuple[float, float] = (0.45, 0.55)
    min_panel: int = 10

    def __post_init__(self):
        if not 0 < self.threshold <= 1:
            raise ValueError("threshold must lie in (0, 1]")


def _panel_corr(a: np.ndarray, b: np.ndarray) -> float | None:
    """|Pearson correlation|, or None when either column is constant."""
    if np.std(a) == 0 or np.std(b) == 0:
        return None
    return abs(float(np.corrcoef(a, b)[0, 1]))


def concepts_match(a: Concept, b: Concept, rule: ConceptMatchRule,
                   annotations: Mapping[str, np.ndarray]) -> bool:
    """True iff the two concepts' annotation columns correlate past the cutoff.

    Constant columns never match anything (their correlation is undefined).
    Raises InconclusiveMatchError when the shared panel is too small, which is
    deliberately distinct from returning False.
    """
    if a.id not in annotations or b.id not in annotations:
        raise KeyError("both concepts must be annotated on the shared panel")
    col_a = np.asarray(annotations[a.id], dtype=float)
    col_b = np.asarray(annotations[b.id], dtype=float)
    if col_a.shape != col_b.shape or col_a.ndim != 1:
        raise ValueError("annotation columns must be aligned 1-D vectors")
    if col_a.size < rule.min_panel:
        raise InconclusiveMatchError(
            f"shared panel has {col_a.size} observations; need >= {rule.min_panel}")
    corr = _panel_corr(col_a, col_b)
    return corr is not None and corr > rule.threshold


@dataclass
class RecoveryReport:
    concept_precision: float
    concept_recall: float
    per_concept_frequency: dict[str, float]     # concept question -> posterior frequency
    matched_pairs: list[tuple[str, str, float]]  # (sampled question, true question, |corr|)
    borderline_pairs: list[tuple[str, str, float]]
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "concept_precision": self.concept_precision,
            "concept_recall": self.concept_recall,
            "per_concept_frequency": self.per_concept_frequency,
            "matched_pairs": self.matched_pairs,
            "borderline_pairs": self.borderline_pairs,
            "warnings": self.warnings,
        }


def recovery_report(samples: Sequence[ConceptSet], truth: ConceptSet,
                    rule: ConceptMatchRule,
                    annotations: Mapping[str, np.ndarray]) -> RecoveryReport:
    """Posterior-averaged concept precision and recall under the matching rule.

    Precision: fraction, over all (sample, slot) pairs, of sampled concepts
    matching some true concept. Recall: mean over true concepts of the
    fraction of samples containing a match for it.
    """
    if not samples:
        raise ValueError("recovery report requires at least one posterior sample")
    warnings: list[str] = []
    seen: dict[tuple[str, str], bool] = {}
    corr_of: dict[tuple[str, str], float | None] = {}

    def match(sampled: Concept, true: Concept) -> bool:
        key = (sampled.id, true.id)
        if key not in seen:
            try:
                seen[key] = concepts_match(sampled, true, rule, annotations)
                a = np.asarray(annotations[sampled.id], dtype=float)
                b = np.asarray(annotations[true.id], dtype=float)
                corr_of[key] = _panel_corr(a, b)
            except InconclusiveMatchError as exc:
                warnings.append(f"{sampled.question!r} vs {true.question!r}: {exc}")
                seen[key] = False
                corr_of[key] = None
        return seen[key]

    total_slots = 0
    matched_slots = 0
    recall_hits = {c.id: 0 for c in truth}
    freq: dict[str, int] = {}
    for cs in samples:
        sample_matches = {c.id: False for c in truth}
        for concept in cs:
            freq[concept.question] = freq.get(concept.question, 0) + 1
            total_slots += 1
            hit = False
            for true in truth:
                if match(concept, true):
                    hit = True
                    sample_matches[true.id] = True
            matched_slots += int(hit)
        for true in truth:
            recall_hits[true.id] += int(sample_matches[true.id])

    n_samples = len(samples)
    matched_pairs = [(a, b, c) for (a, b, c) in _pairs_with_corr(seen, corr_of, samples, truth, True)]
    borderline = [(a, b, c) for (a, b, c) in _pairs_with_corr(seen, corr_of, samples, truth, None)
                  if c is not None and rule.borderline[0] <= c <= rule.borderline[1]]
    return RecoveryReport(
        concept_precision=matched_slots / total_slots,
        concept_recall=float(np.mean([recall_hits[c.id] / n_samples for c in truth])),
        per_concept_frequency={q: n / n_samples for q, n in sorted(freq.items())},
        matched_pairs=matched_pairs,
        borderline_pairs=borderline,
        warnings=warnings,
    )


def _pairs_with_corr(seen, corr_of, samples, truth, only_matched):
    questions = {}
    for cs in samples:
        for c in cs:
            questions[c.id] = c.question
    truth_q = {c.id: c.question for c in truth}
    out = []
    for (sid, tid), matched in sorted(seen.items()):
        if only_matched is True and not matched:
            continue
        out.append((questions.get(sid, sid), truth_q.get(tid, tid), corr_of.get((sid, tid))))
    return out


def tv_distance(p: Mapping, q: Mapping) -> float:
    """Total variation distance between two distributions over hashable states."""
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def enumerate_posterior(pool: Sequence[Concept], k: int, y: np.ndarray,
                        annotations: np.ndarray, gamma: float,
                        budget: int = 100_000) -> dict[frozenset[str], float]:
    """Exact posterior over unordered k-subsets of the pool, uniform prior.

    Uses the Laplace log marginal likelihood for each support and normalizes
    in log space. Refuses when the number of supports exceeds the budget.
    """
    n_support = math.comb(len(pool), k)
    if n_support > budget:
        raise ValueError(
            f"enumeration would visit {n_support} supports, over the budget of {budget}")
    annotations = np.asarray(annotations, dtype=float)
    y = np.asarray(y, dtype=float)
    row_ids = tuple(str(i) for i in range(annotations.shape[0]))
    cfg = ModelConfig(gamma=gamma, k=k)
    supports = []
    log_probs = []
    for combo in itertools.combinations(range(len(pool)), k):
        phi = AnnotationMatrix.build(annotations[:, combo], row_ids)
        log_probs.append(log_marginal_likelihood(phi, y, cfg).value)
        supports.append(frozenset(pool[j].id for j in combo))
    log_probs = np.asarray(log_probs)
    log_z = logsumexp(log_probs)
    return {s: float(np.exp(lp - log_z)) for s, lp in zip(supports, log_probs)}


def support_frequencies(samples: Sequence[ConceptSet]) -> dict[frozenset[str], float]:
    """Empirical distribution over unordered supports in a sample list."""
    counts: dict[frozenset[str], int] = {}
    for cs in samples:
        key = cs.id_set()
        counts[key] = counts.get(key, 0) + 1
    total = len(samples)
    return {k: v / total for k, v in counts.items()}

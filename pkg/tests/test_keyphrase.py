import numpy as np
import pytest

from ccbm.keyphrase import (KeyphraseModelFit, KeyphraseSummary, Vocabulary,
                            build_bow, fit_keyphrase_model,
                            summarize_top_keyphrases)
from ccbm.model import sigmoid
from ccbm.oracle import KeyphraseBag


def bags_from_lists(word_lists):
    return [KeyphraseBag(f"o{i}", frozenset(words))
            for i, words in enumerate(word_lists)]


def planted_corpus(n=150, seed=0, flip=0.05):
    """One phrase tracks the label, the rest are independent noise."""
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < 0.5).astype(int)
    word_lists = []
    for i in range(n):
        words = []
        signal = y[i] if rng.random() > flip else 1 - y[i]
        if signal:
            words.append("alpha")
        for noise in ("beta", "gamma", "delta", "epsilon"):
            if rng.random() < 0.4:
                words.append(noise)
        words.append("filler")
        word_lists.append(words)
    return bags_from_lists(word_lists), y


class TestBuildBow:
    def test_min_df_filters_rare_phrases(self):
        bags = bags_from_lists([["a", "b"], ["a"], ["a", "c"]])
        vocab, matrix = build_bow(bags, min_df=2)
        assert vocab.phrases() == ["a"]
        assert matrix.shape == (3, 1)
        assert matrix.toarray().ravel().tolist() == [1.0, 1.0, 1.0]

    def test_binary_presence_matrix(self):
        bags = bags_from_lists([["a", "b"], ["b"], []])
        vocab, matrix = build_bow(bags, min_df=1)
        dense = matrix.toarray()
        cols = vocab.phrases()
        assert cols == ["a", "b"]
        assert dense[0].tolist() == [1.0, 1.0]
        assert dense[1].tolist() == [0.0, 1.0]
        assert dense[2].tolist() == [0.0, 0.0]

    def test_empty_vocabulary_rejected(self):
        bags = bags_from_lists([["a"], ["b"]])
        with pytest.raises(ValueError):
            build_bow(bags, min_df=2)

    def test_doc_freq_recorded(self):
        bags = bags_from_lists([["a", "b"], ["a"]])
        vocab, _ = build_bow(bags, min_df=1)
        assert vocab.doc_freq == {"a": 2, "b": 1}


class TestFitKeyphraseModel:
    def test_planted_signal_ranks_first(self):
        bags, y = planted_corpus()
        vocab, bow = build_bow(bags, min_df=2)
        fit = fit_keyphrase_model(bow, None, y, vocabulary=vocab)
        summary = summarize_top_keyphrases(fit)
        assert summary.entries[0][0] == "alpha"
        assert summary.entries[0][2] == 1  # positive association

    def test_binary_and_multinomial_agree_on_top_phrase(self):
        bags, y = planted_corpus(seed=1)
        vocab, bow = build_bow(bags, min_df=2)
        fit_b = fit_keyphrase_model(bow, None, y, vocabulary=vocab,
                                    family="binary")
        fit_m = fit_keyphrase_model(bow, None, y, vocabulary=vocab,
                                    family="multinomial")
        top_b = summarize_top_keyphrases(fit_b).entries[0][0]
        top_m = summarize_top_keyphrases(fit_m).entries[0][0]
        assert top_b == top_m == "alpha"

    def test_concept_column_absorbs_the_signal(self):
        # conditioning on a concept equal to the signal phrase shrinks that
        # phrase's residual coefficient
        bags, y = planted_corpus(seed=2)
        vocab, bow = build_bow(bags, min_df=2)
        j = vocab.index["alpha"]
        concept_col = bow.toarray()[:, j:j + 1]
        plain = fit_keyphrase_model(bow, None, y, vocabulary=vocab)
        conditioned = fit_keyphrase_model(bow, concept_col, y, vocabulary=vocab)
        assert abs(conditioned.beta_w[j]) < abs(plain.beta_w[j]) / 2

    def test_lambda_is_first_occurrence_argmin(self):
        bags, y = planted_corpus(seed=3)
        vocab, bow = build_bow(bags, min_df=2)
        fit = fit_keyphrase_model(bow, None, y, vocabulary=vocab)
        best = min(score for _, score in fit.cv_scores)
        expected = next(lam for lam, score in fit.cv_scores if score == best)
        assert fit.lambda_ == expected

    def test_intercept_is_unpenalized(self):
        # with an overwhelming phrase penalty the fit reduces to the base rate
        rng = np.random.default_rng(4)
        y = (rng.random(200) < 0.9).astype(int)
        bags = bags_from_lists([["x"] if rng.random() < 0.5 else ["z"]
                                for _ in range(200)])
        vocab, bow = build_bow(bags, min_df=1)
        fit = fit_keyphrase_model(bow, None, y, vocabulary=vocab,
                                  lambda_grid=(1e8,), folds=2)
        assert np.max(np.abs(fit.beta_w)) < 1e-3
        assert sigmoid(fit.intercept)[0] == pytest.approx(np.mean(y), abs=0.01)

    def test_folds_validated(self):
        bags, y = planted_corpus()
        vocab, bow = build_bow(bags, min_df=2)
        with pytest.raises(ValueError):
            fit_keyphrase_model(bow, None, y, vocabulary=vocab, folds=1)

    def test_misaligned_concepts_rejected(self):
        bags, y = planted_corpus()
        vocab, bow = build_bow(bags, min_df=2)
        with pytest.raises(ValueError):
            fit_keyphrase_model(bow, np.ones((3, 1)), y, vocabulary=vocab)


class TestSummarize:
    def _fit(self, phrases, beta_w):
        vocab = Vocabulary(index={p: i for i, p in enumerate(phrases)},
                           doc_freq={p: 1 for p in phrases})
        return KeyphraseModelFit(beta_w=np.asarray(beta_w, dtype=float),
                                 beta_c=np.zeros(0), intercept=np.zeros(1),
                                 lambda_=1.0, cv_scores=[], vocabulary=vocab,
                                 classes=np.array([0, 1]))

    def test_absolute_magnitude_ordering(self):
        fit = self._fit(["p", "q", "r"], [0.2, -0.9, 0.5])
        entries = summarize_top_keyphrases(fit).entries
        assert [e[0] for e in entries] == ["q", "r", "p"]
        assert entries[0][2] == -1

    def test_ties_break_lexicographically(self):
        fit = self._fit(["b", "a", "c"], [0.5, -0.5, 0.3])
        entries = summarize_top_keyphrases(fit).entries
        assert [e[0] for e in entries] == ["a", "b", "c"]

    def test_zero_coefficients_dropped(self):
        fit = self._fit(["p", "q"], [0.0, 0.4])
        summary = summarize_top_keyphrases(fit)
        assert [e[0] for e in summary.entries] == ["q"]
        assert summary.residual_signal

    def test_all_zero_flags_no_residual_signal(self):
        fit = self._fit(["p", "q"], [0.0, 0.0])
        summary = summarize_top_keyphrases(fit)
        assert summary.entries == []
        assert not summary.residual_signal

    def test_top_n_truncates(self):
        fit = self._fit(["p", "q", "r"], [0.3, 0.2, 0.1])
        assert len(summarize_top_keyphrases(fit, top_n=2).entries) == 2

    def test_missing_vocabulary_rejected(self):
        fit = self._fit(["p"], [0.1])
        fit.vocabulary = None
        with pytest.raises(ValueError):
            summarize_top_keyphrases(fit)

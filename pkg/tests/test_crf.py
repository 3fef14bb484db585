import itertools
import math

import numpy as np
import pytest

from metaforge.core import Document, Label, Page, SectionLabel
from metaforge.crf import (
    CrfModel,
    TrainConfig,
    TwoLayerPipeline,
    encode_sequence,
    forward_backward_from_scores,
    load_crf,
    log_partition_from_scores,
    loglik_and_grad,
    save_crf,
    save_two_layer,
    sequence_score_from_scores,
    train_crf,
    train_two_layer,
    viterbi_from_scores,
)
from metaforge.errors import TrainingFailure
from metaforge.features import FeatureIndex, fit_index

from conftest import make_token


# ---------------------------------------------------------------------------
# Enumeration oracles
# ---------------------------------------------------------------------------


def enum_all_scores(unary, trans):
    n, L = unary.shape
    scores = {}
    for seq in itertools.product(range(L), repeat=n):
        s = sum(unary[i, y] for i, y in enumerate(seq))
        s += sum(trans[a, b] for a, b in zip(seq, seq[1:]))
        scores[seq] = s
    return scores


def enum_log_partition(unary, trans):
    scores = enum_all_scores(unary, trans)
    m = max(scores.values())
    return m + math.log(sum(math.exp(s - m) for s in scores.values()))


def enum_marginals(unary, trans):
    scores = enum_all_scores(unary, trans)
    log_z = enum_log_partition(unary, trans)
    n, L = unary.shape
    node = np.zeros((n, L))
    pair = np.zeros((max(n - 1, 0), L, L))
    for seq, s in scores.items():
        p = math.exp(s - log_z)
        for i, y in enumerate(seq):
            node[i, y] += p
        for i, (a, b) in enumerate(zip(seq, seq[1:])):
            pair[i, a, b] += p
    return node, pair


def enum_viterbi(unary, trans):
    """Argmax sequence; ties resolve to the lowest label index per backtrack
    step, i.e. the reversed sequence is lexicographically smallest."""
    scores = enum_all_scores(unary, trans)
    best = max(scores.values())
    candidates = [seq for seq, s in scores.items() if abs(s - best) < 1e-12]
    return list(min(candidates, key=lambda seq: tuple(reversed(seq))))


def random_instance(rng, n, L, scale=1.0):
    return rng.normal(0, scale, (n, L)), rng.normal(0, scale, (L, L))


# ---------------------------------------------------------------------------
# Score-level inference against enumeration
# ---------------------------------------------------------------------------


class TestScoreInference:
    def test_log_partition_zero_weights(self):
        assert log_partition_from_scores(np.zeros((1, 2)), np.zeros((2, 2))) == pytest.approx(
            math.log(2)
        )
        assert log_partition_from_scores(np.zeros((2, 2)), np.zeros((2, 2))) == pytest.approx(
            math.log(4)
        )

    def test_log_partition_matches_enumeration(self, rng):
        unary, trans = random_instance(rng, 5, 4)
        assert log_partition_from_scores(unary, trans) == pytest.approx(
            enum_log_partition(unary, trans), abs=1e-9
        )

    def test_marginals_uniform_at_zero(self):
        node, pair, _ = forward_backward_from_scores(np.zeros((3, 4)), np.zeros((4, 4)))
        assert np.allclose(node, 0.25)
        assert np.allclose(pair, 1 / 16)

    def test_marginals_match_enumeration(self, rng):
        unary, trans = random_instance(rng, 4, 3)
        node, pair, log_z = forward_backward_from_scores(unary, trans)
        e_node, e_pair = enum_marginals(unary, trans)
        np.testing.assert_allclose(node, e_node, atol=1e-9)
        np.testing.assert_allclose(pair, e_pair, atol=1e-9)
        assert log_z == pytest.approx(enum_log_partition(unary, trans), abs=1e-9)

    def test_node_marginals_sum_to_one(self, rng):
        unary, trans = random_instance(rng, 6, 3, scale=3.0)
        node, _, _ = forward_backward_from_scores(unary, trans)
        np.testing.assert_allclose(node.sum(axis=1), 1.0, atol=1e-9)

    def test_pair_marginals_consistent_with_node(self, rng):
        unary, trans = random_instance(rng, 5, 3)
        node, pair, _ = forward_backward_from_scores(unary, trans)
        np.testing.assert_allclose(pair.sum(axis=2), node[:-1], atol=1e-9)
        np.testing.assert_allclose(pair.sum(axis=1), node[1:], atol=1e-9)

    def test_viterbi_all_zero_ties_to_first_label(self):
        assert viterbi_from_scores(np.zeros((4, 3)), np.zeros((3, 3))) == [0, 0, 0, 0]

    def test_viterbi_dominant_unary(self):
        unary = np.zeros((3, 3))
        unary[0, 2] = unary[1, 0] = unary[2, 1] = 10.0
        assert viterbi_from_scores(unary, np.zeros((3, 3))) == [2, 0, 1]

    def test_viterbi_matches_enumeration(self, rng):
        for _ in range(20):
            unary, trans = random_instance(rng, 6, 3)
            assert viterbi_from_scores(unary, trans) == enum_viterbi(unary, trans)

    def test_viterbi_tie_rule_matches_enumeration(self, rng):
        # quantized scores force plenty of exact ties
        for _ in range(50):
            unary = rng.integers(0, 2, (4, 3)).astype(float)
            trans = rng.integers(0, 2, (3, 3)).astype(float)
            assert viterbi_from_scores(unary, trans) == enum_viterbi(unary, trans)

    def test_unary_shift_invariance(self, rng):
        unary, trans = random_instance(rng, 5, 3)
        shifted = unary.copy()
        shifted[2] += 7.5
        assert log_partition_from_scores(shifted, trans) == pytest.approx(
            log_partition_from_scores(unary, trans) + 7.5, abs=1e-9
        )
        n0, p0, _ = forward_backward_from_scores(unary, trans)
        n1, p1, _ = forward_backward_from_scores(shifted, trans)
        np.testing.assert_allclose(n0, n1, atol=1e-9)
        np.testing.assert_allclose(p0, p1, atol=1e-9)
        assert viterbi_from_scores(unary, trans) == viterbi_from_scores(shifted, trans)


# ---------------------------------------------------------------------------
# Feature-based model
# ---------------------------------------------------------------------------


def tiny_model(feature_names, labels, sigma2=10.0):
    idx = FeatureIndex(list(feature_names))
    return CrfModel.zeros(labels, idx, sigma2=sigma2)


LABELS3 = [Label.TITLE, Label.AUTHORS, Label.OTHER]


class TestFeatureModel:
    def test_zero_weights_zero_score(self):
        m = tiny_model(["a", "b"], LABELS3)
        seq = m.encode([{"a": 1.0}, {"b": 1.0}])
        assert m.sequence_score(seq, [0, 1]) == 0.0

    def test_single_unary_weight(self):
        m = tiny_model(["a"], LABELS3)
        m.w_unary[m.index.id_of("a"), 1] = 2.5
        seq = m.encode([{"a": 1.0}])
        assert m.sequence_score(seq, [1]) == pytest.approx(2.5)
        assert m.sequence_score(seq, [0]) == 0.0

    def test_score_matches_hand_summation(self, rng):
        # independent term-by-term summation over feature names
        names = ["f1", "f2", "f3"]
        m = tiny_model(names, LABELS3)
        m.w_unary = rng.normal(0, 1, m.w_unary.shape)
        m.w_trans = rng.normal(0, 1, m.w_trans.shape)
        dicts = [
            {"f1": 1.0, "f3": 0.5},
            {"f2": 1.0},
            {"f1": 0.25, "f2": 1.0},
            {"f3": 1.0},
        ]
        y = [2, 0, 1, 1]
        expected = 0.0
        for i, feats in enumerate(dicts):
            for name, val in feats.items():
                expected += m.w_unary[m.index.id_of(name), y[i]] * val
        for a, b in zip(y, y[1:]):
            expected += m.w_trans[a, b]
        seq = m.encode(dicts)
        assert m.sequence_score(seq, y) == pytest.approx(expected, abs=1e-12)

    def test_length_mismatch(self):
        m = tiny_model(["a"], LABELS3)
        seq = m.encode([{"a": 1.0}])
        with pytest.raises(ValueError):
            m.sequence_score(seq, [0, 1])

    def test_log_prob_zero_weights(self):
        m = tiny_model(["a"], [Label.TITLE, Label.OTHER])
        seq = m.encode([{"a": 1.0}])
        assert m.sequence_log_prob(seq, [0]) == pytest.approx(math.log(0.5))

    def test_probs_sum_to_one(self, rng):
        m = tiny_model(["a", "b"], LABELS3)
        m.w_unary = rng.normal(0, 1, m.w_unary.shape)
        m.w_trans = rng.normal(0, 1, m.w_trans.shape)
        dicts = [{"a": 1.0}, {"b": 0.5}, {"a": 1.0, "b": 1.0}]
        seq = m.encode(dicts)
        total = sum(
            math.exp(m.sequence_log_prob(seq, list(y)))
            for y in itertools.product(range(3), repeat=3)
        )
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_raising_gold_weight_raises_log_prob(self):
        m = tiny_model(["a"], LABELS3)
        seq = m.encode([{"a": 1.0}, {"a": 1.0}])
        y = [1, 1]
        before = m.sequence_log_prob(seq, y)
        m.w_unary[m.index.id_of("a"), 1] += 0.5
        assert m.sequence_log_prob(seq, y) > before


class TestLoglikGrad:
    def _batch(self, rng, model):
        batch = []
        for n in (3, 4, 2):
            dicts = []
            for _ in range(n):
                feats = {}
                for name in ("f1", "f2", "f3"):
                    if rng.random() < 0.6:
                        feats[name] = float(rng.uniform(0.2, 1.0))
                dicts.append(feats or {"f1": 1.0})
            labels = [model.labels[i] for i in rng.integers(0, len(model.labels), n)]
            batch.append(model.encode(dicts, labels=labels))
        return batch

    def test_gradient_matches_finite_differences(self, rng):
        model = tiny_model(["f1", "f2", "f3"], LABELS3, sigma2=2.0)
        model.w_unary = rng.normal(0, 0.5, model.w_unary.shape)
        model.w_trans = rng.normal(0, 0.5, model.w_trans.shape)
        batch = self._batch(rng, model)

        _, g_unary, g_trans = loglik_and_grad(model, batch)
        analytic = np.concatenate([g_unary.ravel(), g_trans.ravel()])

        w0 = model.get_weights()
        h = 1e-5
        fd = np.zeros_like(w0)
        for k in range(len(w0)):
            wp = w0.copy()
            wp[k] += h
            model.set_weights(wp)
            lp, _, _ = loglik_and_grad(model, batch)
            wm = w0.copy()
            wm[k] -= h
            model.set_weights(wm)
            lm, _, _ = loglik_and_grad(model, batch)
            fd[k] = (lp - lm) / (2 * h)
        model.set_weights(w0)
        rel = np.linalg.norm(analytic - fd) / max(1.0, np.linalg.norm(analytic))
        assert rel < 1e-6

    def test_zero_weights_zero_penalty(self):
        model = tiny_model(["f1"], LABELS3, sigma2=1.0)
        seq = model.encode([{"f1": 1.0}], labels=[Label.TITLE])
        ll, gu, gt = loglik_and_grad(model, [seq])
        # data term only: log(1/3); penalty and its gradient vanish at zero
        assert ll == pytest.approx(math.log(1 / 3))

    def test_huge_sigma_equals_unpenalized(self, rng):
        model = tiny_model(["f1", "f2"], LABELS3, sigma2=1e12)
        model.w_unary = rng.normal(0, 0.5, model.w_unary.shape)
        batch = self._batch(rng, model)
        ll_big, gu_big, gt_big = loglik_and_grad(model, batch)

        data_ll = sum(model.sequence_log_prob(s, s.labels) for s in batch)
        assert abs(ll_big - data_ll) < 1e-9
        model.sigma2 = 1e18
        _, gu_inf, gt_inf = loglik_and_grad(model, batch)
        assert np.abs(gu_big - gu_inf).max() < 1e-9

    def test_empty_batch_rejected(self):
        model = tiny_model(["f1"], LABELS3)
        with pytest.raises(ValueError):
            loglik_and_grad(model, [])


class TestTraining:
    def _separable_corpus(self, model):
        # one indicator feature per label identifies it uniquely
        batch = []
        cases = [
            ([{"isA": 1.0}, {"isB": 1.0}, {"isC": 1.0}], [0, 1, 2]),
            ([{"isB": 1.0}, {"isB": 1.0}], [1, 1]),
            ([{"isC": 1.0}, {"isA": 1.0}], [2, 0]),
            ([{"isA": 1.0}], [0]),
        ]
        for dicts, y in cases:
            batch.append(model.encode(dicts, labels=[model.labels[i] for i in y]))
        return batch

    def test_separable_corpus_reaches_full_accuracy(self):
        model = tiny_model(["isA", "isB", "isC"], LABELS3, sigma2=10.0)
        batch = self._separable_corpus(model)
        train_crf(model, batch, TrainConfig(sigma2=10.0, max_iters=200, tol=1e-8))
        for seq in batch:
            assert model.viterbi(seq) == list(seq.labels)

    def test_loglik_nondecreasing(self):
        model = tiny_model(["isA", "isB", "isC"], LABELS3)
        batch = self._separable_corpus(model)
        history = []
        train_crf(model, batch, TrainConfig(max_iters=50), log=lambda it, ll: history.append(ll))
        assert all(b >= a - 1e-12 for a, b in zip(history, history[1:]))

    def test_strong_penalty_shrinks_weights(self):
        model = tiny_model(["isA", "isB", "isC"], LABELS3)
        batch = self._separable_corpus(model)
        train_crf(model, batch, TrainConfig(sigma2=1e-6, max_iters=100, tol=1e-12))
        assert np.abs(model.get_weights()).max() < 0.01

    def test_unlabeled_batch_rejected(self):
        model = tiny_model(["isA"], LABELS3)
        seq = model.encode([{"isA": 1.0}])
        with pytest.raises(ValueError):
            train_crf(model, [seq])


# ---------------------------------------------------------------------------
# Two-layer pipeline
# ---------------------------------------------------------------------------


def _pipeline_with_constant_section(section):
    """Layer 1 decodes every line to ``section``; layer 2 favors TITLE."""
    idx1 = FeatureIndex(["relsize"])
    layer1 = CrfModel.zeros(list(SectionLabel), idx1)
    layer1.w_unary[idx1.id_of("relsize"), list(SectionLabel).index(section)] = 10.0
    idx2 = FeatureIndex(["cap:init"])
    layer2 = CrfModel.zeros(list(Label), idx2)
    layer2.w_unary[idx2.id_of("cap:init"), 0] = 5.0
    return TwoLayerPipeline(layer1=layer1, layer2=layer2)


def _small_doc():
    from metaforge.core import group_into_blocks, group_into_lines

    toks = group_into_blocks(group_into_lines([
        make_token("Alpha", 10, 50),
        make_token("Beta", 60, 50),
        make_token("gamma", 10, 120),
    ]))
    return Document(id="d", page=Page(width=600, height=800, tokens=tuple(toks)))


class TestTwoLayer:
    def test_all_footnote_lines_force_other(self):
        pipe = _pipeline_with_constant_section(SectionLabel.FOOTNOTE)
        doc = _small_doc()
        assert pipe.extract(doc) == [Label.OTHER] * 3

    def test_retained_sections_decoded_by_layer2(self):
        pipe = _pipeline_with_constant_section(SectionLabel.BODY)
        doc = _small_doc()
        out = pipe.extract(doc)
        assert out[0] is Label.TITLE and out[1] is Label.TITLE  # init-caps
        # lowercase token emits no cap:init; all labels tie and the first wins
        assert out[2] is Label.TITLE

    def test_oracle_sections_match_standalone_word_crf(self):
        from metaforge.crf import word_feature_sequence

        pipe = _pipeline_with_constant_section(SectionLabel.BODY)
        doc = _small_doc()
        sections = [SectionLabel.BODY, SectionLabel.FOOTNOTE]  # two lines
        out = pipe.extract(doc, oracle_sections=sections)
        # line 2 excluded; line 1 decoded standalone
        feats = word_feature_sequence(doc, [0, 1])
        standalone = pipe.layer2.viterbi_labels(feats)
        assert out[:2] == standalone
        assert out[2] is Label.OTHER

    def test_empty_document(self):
        pipe = _pipeline_with_constant_section(SectionLabel.BODY)
        doc = Document(id="e", page=Page(width=100, height=100))
        assert pipe.extract(doc) == []


class TestPersistence:
    def test_single_model_round_trip(self, tmp_path, rng):
        model = tiny_model(["f1", "f2"], LABELS3, sigma2=3.5)
        model.w_unary = rng.normal(0, 1, model.w_unary.shape)
        model.w_trans = rng.normal(0, 1, model.w_trans.shape)
        path = str(tmp_path / "m.json")
        save_crf(path, model)
        back = load_crf(path)
        np.testing.assert_array_equal(back.w_unary, model.w_unary)
        np.testing.assert_array_equal(back.w_trans, model.w_trans)
        assert back.labels == model.labels
        assert back.sigma2 == model.sigma2

    def test_two_layer_round_trip(self, tmp_path):
        pipe = _pipeline_with_constant_section(SectionLabel.BODY)
        path = str(tmp_path / "p.json")
        save_two_layer(path, pipe)
        back = load_crf(path)
        assert isinstance(back, TwoLayerPipeline)
        np.testing.assert_array_equal(back.layer1.w_unary, pipe.layer1.w_unary)
        np.testing.assert_array_equal(back.layer2.w_unary, pipe.layer2.w_unary)
        assert back.excluded_sections == pipe.excluded_sections

    def test_deterministic_bytes(self, tmp_path, rng):
        model = tiny_model(["f1", "f2"], LABELS3)
        model.w_unary = rng.normal(0, 1, model.w_unary.shape)
        p1, p2 = str(tmp_path / "a.json"), str(tmp_path / "b.json")
        save_crf(p1, model)
        save_crf(p2, model)
        assert open(p1, "rb").read() == open(p2, "rb").read()

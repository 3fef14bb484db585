"""Linear-chain CRF with exact inference and L2-regularized training.

Scores decompose into unary feature weights (feature x label) plus a
label-to-label transition table. Position 0 hangs off a fixed START state
that contributes no transition weight. The same score-level routines back
both the handcrafted-feature models here and the neural unary scores of the
BiLSTM-CRF.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import (
    Document,
    Label,
    LABEL_BY_NAME,
    SECTION_BY_NAME,
    SectionLabel,
)
from .errors import TrainingFailure
from .features import FeatureIndex, Scaler, line_features, vectorize, word_features
from .parallel import make_chunks, run_tasks

# ---------------------------------------------------------------------------
# Score-level inference on (unary, trans) matrices
# ---------------------------------------------------------------------------


def _logsumexp(a: np.ndarray, axis: int | None = None) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


def sequence_score_from_scores(unary: np.ndarray, trans: np.ndarray, y) -> float:
    y = np.asarray(y, dtype=np.int64)
    s = float(unary[np.arange(len(y)), y].sum())
    if len(y) > 1:
        s += float(trans[y[:-1], y[1:]].sum())
    return s


#: Fast-path products below this fall back to the jointly shifted recursion.
_LSE_UNDERFLOW = 1e-280


def _lse_step(prev: np.ndarray, trans: np.ndarray, exp_t: np.ndarray, t_max: float,
              transpose: bool = False) -> np.ndarray:
    """log-sum-exp of prev[j] + trans[j, k] over j (or over k if transposed).

    The common case factors exp(trans - max) out of the loop as a matvec; the
    exact per-column shift is only needed when the factored products underflow
    (extreme weights during line-search probing).
    """
    m = prev.max()
    v = np.exp(prev - m) @ exp_t if not transpose else exp_t @ np.exp(prev - m)
    if np.isfinite(m) and v.min() > _LSE_UNDERFLOW:
        return (m + t_max) + np.log(v)
    joint = prev[:, None] + trans if not transpose else trans + prev[None, :]
    return _logsumexp(joint, axis=0 if not transpose else 1)


def log_partition_from_scores(unary: np.ndarray, trans: np.ndarray) -> float:
    """Forward recursion in log space, stabilized by per-position max shifts."""
    t_max = float(trans.max())
    exp_t = np.exp(trans - t_max)
    alpha = unary[0].astype(np.float64)
    for i in range(1, unary.shape[0]):
        alpha = unary[i] + _lse_step(alpha, trans, exp_t, t_max)
    return float(_logsumexp(alpha))


def forward_backward_from_scores(unary: np.ndarray, trans: np.ndarray):
    """Node marginals (n, L), pair marginals (n-1, L, L) and log Z."""
    n, L = unary.shape
    t_max = float(trans.max())
    exp_t = np.exp(trans - t_max)
    alpha = np.empty((n, L))
    alpha[0] = unary[0]
    for i in range(1, n):
        alpha[i] = unary[i] + _lse_step(alpha[i - 1], trans, exp_t, t_max)
    log_z = float(_logsumexp(alpha[-1]))

    beta = np.empty((n, L))
    beta[-1] = 0.0
    for i in range(n - 2, -1, -1):
        beta[i] = _lse_step(unary[i + 1] + beta[i + 1], trans, exp_t, t_max, transpose=True)

    node = np.exp(alpha + beta - log_z)
    if n > 1:
        pair = np.exp(
            alpha[:-1, :, None] + trans[None, :, :]
            + (unary[1:] + beta[1:])[:, None, :] - log_z
        )
    else:
        pair = np.zeros((0, L, L))
    return node, pair, log_z


def viterbi_from_scores(unary: np.ndarray, trans: np.ndarray) -> list[int]:
    """Max-score path; ties resolve to the lowest label index at each backtrack step."""
    n, L = unary.shape
    delta = unary[0].copy()
    back = np.zeros((n, L), dtype=np.int64)
    for i in range(1, n):
        scores = delta[:, None] + trans
        back[i] = np.argmax(scores, axis=0)  # first maximum = lowest index
        delta = unary[i] + scores[back[i], np.arange(L)]
    path = [int(np.argmax(delta))]
    for i in range(n - 1, 0, -1):
        path.append(int(back[i, path[-1]]))
    path.reverse()
    return path


# ---------------------------------------------------------------------------
# Feature-based model
# ---------------------------------------------------------------------------


@dataclass
class EncodedSeq:
    """Sparse feature activations for one sequence.

    ``pos``, ``fid`` and ``val`` are parallel arrays: feature ``fid[k]`` fires
    at position ``pos[k]`` with value ``val[k]``.
    """

    n: int
    pos: np.ndarray
    fid: np.ndarray
    val: np.ndarray
    labels: np.ndarray | None = None


def encode_sequence(
    feature_dicts, index: FeatureIndex, scaler: Scaler | None = None, labels=None
) -> EncodedSeq:
    pos_l, fid_l, val_l = [], [], []
    for i, feats in enumerate(feature_dicts):
        ids, vals = vectorize(feats, index, scaler)
        pos_l.extend([i] * len(ids))
        fid_l.extend(ids.tolist())
        val_l.extend(vals.tolist())
    return EncodedSeq(
        n=len(feature_dicts),
        pos=np.asarray(pos_l, dtype=np.int64),
        fid=np.asarray(fid_l, dtype=np.int64),
        val=np.asarray(val_l, dtype=np.float64),
        labels=None if labels is None else np.asarray(labels, dtype=np.int64),
    )


@dataclass
class CrfModel:
    """Weights over unary (feature x label) and transition (label x label) functions."""

    labels: list
    index: FeatureIndex
    w_unary: np.ndarray  # (len(index), L)
    w_trans: np.ndarray  # (L, L)
    sigma2: float = 10.0
    scaler: Scaler = field(default_factory=Scaler)

    def __post_init__(self):
        L = len(self.labels)
        if self.w_unary.shape != (len(self.index), L) or self.w_trans.shape != (L, L):
            raise ValueError("weight shapes inconsistent with label/feature alphabets")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")

    @staticmethod
    def zeros(labels, index: FeatureIndex, sigma2: float = 10.0, scaler: Scaler | None = None):
        L = len(labels)
        return CrfModel(
            labels=list(labels),
            index=index,
            w_unary=np.zeros((len(index), L)),
            w_trans=np.zeros((L, L)),
            sigma2=sigma2,
            scaler=scaler or Scaler(),
        )

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    def label_index(self, label) -> int:
        return self.labels.index(label)

    def encode(self, feature_dicts, labels=None) -> EncodedSeq:
        lab = None if labels is None else [self.label_index(l) for l in labels]
        return encode_sequence(feature_dicts, self.index, self.scaler, labels=lab)

    def unary_matrix(self, seq: EncodedSeq) -> np.ndarray:
        unary = np.zeros((seq.n, self.n_labels))
        if len(seq.pos):
            np.add.at(unary, seq.pos, self.w_unary[seq.fid] * seq.val[:, None])
        return unary

    # -- spec operations ----------------------------------------------------

    def sequence_score(self, seq: EncodedSeq, y) -> float:
        y = np.asarray(y, dtype=np.int64)
        if seq.n != len(y):
            raise ValueError(f"feature/label length mismatch: {seq.n} vs {len(y)}")
        if seq.n < 1:
            raise ValueError("empty sequence")
        return sequence_score_from_scores(self.unary_matrix(seq), self.w_trans, y)

    def log_partition(self, seq: EncodedSeq) -> float:
        if seq.n < 1:
            raise ValueError("empty sequence")
        return log_partition_from_scores(self.unary_matrix(seq), self.w_trans)

    def sequence_log_prob(self, seq: EncodedSeq, y) -> float:
        return self.sequence_score(seq, y) - self.log_partition(seq)

    def marginals(self, seq: EncodedSeq):
        if seq.n < 1:
            raise ValueError("empty sequence")
        node, pair, _ = forward_backward_from_scores(self.unary_matrix(seq), self.w_trans)
        return node, pair

    def viterbi(self, seq: EncodedSeq) -> list[int]:
        if seq.n < 1:
            raise ValueError("empty sequence")
        return viterbi_from_scores(self.unary_matrix(seq), self.w_trans)

    def viterbi_labels(self, feature_dicts) -> list:
        return [self.labels[i] for i in self.viterbi(self.encode(feature_dicts))]

    # -- training -----------------------------------------------------------

    def get_weights(self) -> np.ndarray:
        return np.concatenate([self.w_unary.ravel(), self.w_trans.ravel()])

    def set_weights(self, w: np.ndarray) -> None:
        m = self.w_unary.size
        self.w_unary = w[:m].reshape(self.w_unary.shape).copy()
        self.w_trans = w[m:].reshape(self.w_trans.shape).copy()


def _seq_loglik_grad(model: CrfModel, seq: EncodedSeq):
    """Per-sequence log P(y|x) and its gradient in (unary, trans) weights."""
    y = seq.labels
    unary = model.unary_matrix(seq)
    node, pair, log_z = forward_backward_from_scores(unary, model.w_trans)
    ll = sequence_score_from_scores(unary, model.w_trans, y) - log_z

    g_unary = np.zeros_like(model.w_unary)
    if len(seq.pos):
        # empirical counts minus expected counts, routed through feature values
        np.add.at(g_unary, (seq.fid, y[seq.pos]), seq.val)
        np.add.at(g_unary, seq.fid, -seq.val[:, None] * node[seq.pos])
    g_trans = np.zeros_like(model.w_trans)
    if seq.n > 1:
        np.add.at(g_trans, (y[:-1], y[1:]), 1.0)
        g_trans -= pair.sum(axis=0)
    return ll, g_unary, g_trans


def _grad_chunk_worker(task):
    model, seqs = task
    ll = 0.0
    gu = np.zeros_like(model.w_unary)
    gt = np.zeros_like(model.w_trans)
    for s in seqs:
        l, u, t = _seq_loglik_grad(model, s)
        ll += l
        gu += u
        gt += t
    return ll, gu, gt


def _loglik_chunk_worker(task):
    model, seqs = task
    total = 0.0
    for s in seqs:
        unary = model.unary_matrix(s)
        total += sequence_score_from_scores(unary, model.w_trans, s.labels)
        total -= log_partition_from_scores(unary, model.w_trans)
    return total


def loglik_and_grad(model: CrfModel, batch: list[EncodedSeq], jobs: int = 1):
    """Penalized log-likelihood of a batch and its gradient.

    The L2 penalty sum(w^2)/(2 sigma2) applies to every weight. Per-sequence
    terms are summed in fixed chunks so the result is bitwise identical for
    any worker count.
    """
    if not batch:
        raise ValueError("empty batch")
    tasks = [(model, c) for c in make_chunks(batch)]
    ll = 0.0
    g_unary = np.zeros_like(model.w_unary)
    g_trans = np.zeros_like(model.w_trans)
    for cll, cgu, cgt in run_tasks(_grad_chunk_worker, tasks, jobs):
        ll += cll
        g_unary += cgu
        g_trans += cgt

    ll -= float((model.w_unary**2).sum() + (model.w_trans**2).sum()) / (2.0 * model.sigma2)
    g_unary -= model.w_unary / model.sigma2
    g_trans -= model.w_trans / model.sigma2
    return ll, g_unary, g_trans


def _batch_loglik(model: CrfModel, batch, jobs: int = 1) -> float:
    tasks = [(model, c) for c in make_chunks(batch)]
    ll = sum(run_tasks(_loglik_chunk_worker, tasks, jobs))
    ll -= float((model.w_unary**2).sum() + (model.w_trans**2).sum()) / (2.0 * model.sigma2)
    return ll


@dataclass
class TrainConfig:
    sigma2: float = 10.0
    max_iters: int = 200
    tol: float = 1e-5
    initial_step: float = 0.5
    max_backtracks: int = 20


def train_crf(
    model: CrfModel,
    batch: list[EncodedSeq],
    config: TrainConfig | None = None,
    jobs: int = 1,
    log=None,
) -> CrfModel:
    """Full-batch gradient ascent with backtracking line search.

    Accepts a step only if it improves the penalized log-likelihood by the
    Armijo margin; halves the step otherwise. Twenty consecutive rejections
    abort with a TrainingFailure.
    """
    if not batch:
        raise ValueError("empty training batch")
    if any(s.labels is None for s in batch):
        raise ValueError("training sequences must carry labels")
    config = config or TrainConfig()
    model.sigma2 = config.sigma2

    step = config.initial_step
    ll, g_unary, g_trans = loglik_and_grad(model, batch, jobs=jobs)
    for it in range(config.max_iters):
        gnorm2 = float((g_unary**2).sum() + (g_trans**2).sum())
        if gnorm2 == 0.0:
            break
        base_u, base_t = model.w_unary, model.w_trans
        accepted = False
        for _ in range(config.max_backtracks):
            model.w_unary = base_u + step * g_unary
            model.w_trans = base_t + step * g_trans
            trial = _batch_loglik(model, batch, jobs=jobs)
            if trial > ll + 1e-4 * step * gnorm2:
                accepted = True
                break
            step /= 2.0
        if not accepted:
            model.w_unary, model.w_trans = base_u, base_t
            raise TrainingFailure(
                "line search failed to find an ascent step",
                diagnostics={"iteration": it, "loglik": ll, "step": step},
            )
        new_ll, g_unary, g_trans = loglik_and_grad(model, batch, jobs=jobs)
        if log is not None:
            log(it, new_ll)
        improved = new_ll - ll
        ll = new_ll
        step = min(step * 2.0, 16.0)
        if abs(improved) < config.tol:
            break
    return model


# ---------------------------------------------------------------------------
# Two-layer pipeline
# ---------------------------------------------------------------------------

#: Page zone implied by a token-level label; used to derive line-layer gold.
SECTION_FOR_LABEL = {
    Label.TITLE: SectionLabel.TITLE,
    Label.AUTHORS: SectionLabel.AUTHOR_INFORMATION,
    Label.EMAIL: SectionLabel.AUTHOR_INFORMATION,
    Label.ADDRESS: SectionLabel.AUTHOR_INFORMATION,
    Label.AFFILIATION: SectionLabel.AUTHOR_INFORMATION,
    Label.JOURNAL: SectionLabel.HEADER,
    Label.DATE: SectionLabel.HEADER,
    Label.DOI: SectionLabel.HEADER,
    Label.ABSTRACT: SectionLabel.BODY,
    Label.OTHER: SectionLabel.BODY,
}


def doc_line_token_indices(doc: Document) -> list[list[int]]:
    """Token indices grouped by line id, in line order."""
    lines: dict[int, list[int]] = {}
    for i, t in enumerate(doc.page.tokens):
        if t.line_id < 0:
            raise ValueError(f"document {doc.id} has tokens without line ids")
        lines.setdefault(t.line_id, []).append(i)
    return [lines[lid] for lid in sorted(lines)]


def line_feature_sequence(doc: Document) -> list[dict[str, float]]:
    lines = doc_line_token_indices(doc)
    toks = doc.page.tokens
    out = []
    for i, idx in enumerate(lines):
        prev_line = [toks[j] for j in lines[i - 1]] if i > 0 else None
        next_line = [toks[j] for j in lines[i + 1]] if i + 1 < len(lines) else None
        out.append(line_features([toks[j] for j in idx], doc.page, prev_line, next_line))
    return out


def gold_line_sections(doc: Document) -> list[SectionLabel]:
    """Majority token label per line, mapped to its page zone."""
    labels = doc.token_labels()
    sections = []
    for idx in doc_line_token_indices(doc):
        counts: dict[Label, int] = {}
        for i in idx:
            counts[labels[i]] = counts.get(labels[i], 0) + 1
        best = max(counts.items(), key=lambda kv: (kv[1], -list(Label).index(kv[0])))[0]
        sections.append(SECTION_FOR_LABEL[best])
    return sections


def word_feature_sequence(doc: Document, token_indices: list[int]) -> list[dict[str, float]]:
    toks = doc.page.tokens
    out = []
    for j, i in enumerate(token_indices):
        prev_t = toks[token_indices[j - 1]] if j > 0 else None
        next_t = toks[token_indices[j + 1]] if j + 1 < len(token_indices) else None
        out.append(word_features(toks[i], prev_t, next_t, doc.page))
    return out


def section_runs(sections: list[SectionLabel]) -> list[tuple[SectionLabel, list[int]]]:
    """Maximal runs of consecutive lines sharing a section."""
    runs: list[tuple[SectionLabel, list[int]]] = []
    for i, s in enumerate(sections):
        if runs and runs[-1][0] is s:
            runs[-1][1].append(i)
        else:
            runs.append((s, [i]))
    return runs


@dataclass
class TwoLayerPipeline:
    """Line-layer section CRF feeding a word-layer metadata CRF."""

    layer1: CrfModel
    layer2: CrfModel
    excluded_sections: frozenset = frozenset({SectionLabel.FOOTNOTE})

    def __post_init__(self):
        if not set(self.excluded_sections) <= set(SectionLabel):
            raise ValueError("excluded_sections must be section labels")

    def extract(self, doc: Document, oracle_sections: list[SectionLabel] | None = None):
        """Label every token; tokens in excluded sections are forced to OTHER."""
        n = len(doc.page.tokens)
        out = [Label.OTHER] * n
        if n == 0:
            return out
        lines = doc_line_token_indices(doc)
        if oracle_sections is None:
            feats1 = line_feature_sequence(doc)
            sections = [
                self.layer1.labels[i] for i in self.layer1.viterbi(self.layer1.encode(feats1))
            ]
        else:
            sections = list(oracle_sections)
        for section, line_ids in section_runs(sections):
            if section in self.excluded_sections:
                continue
            token_idx = [i for lid in line_ids for i in lines[lid]]
            if not token_idx:
                continue
            feats2 = word_feature_sequence(doc, token_idx)
            decoded = self.layer2.viterbi(self.layer2.encode(feats2))
            for i, lab in zip(token_idx, decoded):
                out[i] = self.layer2.labels[lab]
        return out


def train_two_layer(
    docs: list[Document],
    config: TrainConfig | None = None,
    excluded_sections=frozenset({SectionLabel.FOOTNOTE}),
    jobs: int = 1,
    log=None,
) -> TwoLayerPipeline:
    """Fit both layers from annotated documents (gold sections teacher-force layer 2)."""
    if not docs:
        raise ValueError("empty corpus")
    config = config or TrainConfig()

    line_feat_docs = [line_feature_sequence(d) for d in docs]
    line_gold = [gold_line_sections(d) for d in docs]
    from .features import fit_index

    scaler1 = Scaler().fit(f for feats in line_feat_docs for f in feats)
    index1 = fit_index(f for feats in line_feat_docs for f in feats)
    layer1 = CrfModel.zeros(list(SectionLabel), index1, sigma2=config.sigma2, scaler=scaler1)
    batch1 = [
        layer1.encode(feats, labels=gold) for feats, gold in zip(line_feat_docs, line_gold)
    ]
    train_crf(layer1, batch1, config, jobs=jobs, log=None if log is None else log)

    word_seqs: list[list[dict[str, float]]] = []
    word_gold: list[list[Label]] = []
    for doc, sections in zip(docs, line_gold):
        lines = doc_line_token_indices(doc)
        labels = doc.token_labels()
        for section, line_ids in section_runs(sections):
            if section in excluded_sections:
                continue
            token_idx = [i for lid in line_ids for i in lines[lid]]
            if token_idx:
                word_seqs.append(word_feature_sequence(doc, token_idx))
                word_gold.append([labels[i] for i in token_idx])
    scaler2 = Scaler().fit(f for feats in word_seqs for f in feats)
    index2 = fit_index(f for feats in word_seqs for f in feats)
    layer2 = CrfModel.zeros(list(Label), index2, sigma2=config.sigma2, scaler=scaler2)
    batch2 = [layer2.encode(feats, labels=gold) for feats, gold in zip(word_seqs, word_gold)]
    train_crf(layer2, batch2, config, jobs=jobs, log=None if log is None else log)

    return TwoLayerPipeline(layer1=layer1, layer2=layer2, excluded_sections=excluded_sections)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

CRF_FORMAT = "metaforge-crf/1"


def _model_to_dict(model: CrfModel) -> dict:
    kind = "section" if isinstance(model.labels[0], SectionLabel) else "metadata"
    weights = {}
    for fid, name in enumerate(model.index.names):
        for li, lab in enumerate(model.labels):
            w = model.w_unary[fid, li]
            if w != 0.0:
                weights[f"u|{name}|{lab.value}"] = w
    for a in model.labels:
        for b in model.labels:
            w = model.w_trans[model.label_index(a), model.label_index(b)]
            if w != 0.0:
                weights[f"t|{a.value}|{b.value}"] = w
    return {
        "labels": [l.value for l in model.labels],
        "label_kind": kind,
        "feature_index": {name: i for i, name in enumerate(model.index.names[:-1])},
        "scaler": model.scaler.to_dict(),
        "weights": weights,
        "sigma2": model.sigma2,
    }


def _model_from_dict(d: dict) -> CrfModel:
    by_name = SECTION_BY_NAME if d["label_kind"] == "section" else LABEL_BY_NAME
    labels = [by_name[v] for v in d["labels"]]
    names = [name for name, _ in sorted(d["feature_index"].items(), key=lambda kv: kv[1])]
    index = FeatureIndex(names)
    model = CrfModel.zeros(labels, index, sigma2=d["sigma2"], scaler=Scaler.from_dict(d["scaler"]))
    lab_idx = {l.value: i for i, l in enumerate(labels)}
    for key, w in d["weights"].items():
        kind, a, b = key.split("|", 2)
        if kind == "u":
            model.w_unary[index.id_of(a), lab_idx[b]] = w
        else:
            model.w_trans[lab_idx[a], lab_idx[b]] = w
    return model


def save_crf(path: str, model: CrfModel) -> None:
    payload = {"format": CRF_FORMAT, "kind": "single", **_model_to_dict(model)}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, ensure_ascii=False, sort_keys=True)


def save_two_layer(path: str, pipeline: TwoLayerPipeline) -> None:
    payload = {
        "format": CRF_FORMAT,
        "kind": "two-layer",
        "layer1": _model_to_dict(pipeline.layer1),
        "layer2": _model_to_dict(pipeline.layer2),
        "excluded_sections": sorted(s.value for s in pipeline.excluded_sections),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, ensure_ascii=False, sort_keys=True)


def load_crf(path: str):
    """Returns a CrfModel or a TwoLayerPipeline depending on the file's kind."""
    with open(path, "r", encoding="utf-8") as f:
        d = json.load(f)
    if d.get("format") != CRF_FORMAT:
        raise ValueError(f"{path}: not a {CRF_FORMAT} file")
    if d["kind"] == "single":
        return _model_from_dict(d)
    return TwoLayerPipeline(
        layer1=_model_from_dict(d["layer1"]),
        layer2=_model_from_dict(d["layer2"]),
        excluded_sections=frozenset(SECTION_BY_NAME[s] for s in d["excluded_sections"]),
    )

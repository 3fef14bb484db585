"""Token and block embedding providers.

Three interchangeable sources: an in-repo skip-gram model with negative
sampling, a character-trigram variant of it, and a loader for precomputed
per-block vectors (the file-based stand-in for contextual block encoders).
Every provider declares a dimension and a mode (per-token or per-block).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import MissingEmbedding
from .tensorio import load_bundle, save_bundle

EMB_FORMAT = "metaforge-emb/1"

MIN_CORPUS_TOKENS = 1000


def _stable_hash(text: str) -> int:
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class SkipGramConfig:
    d: int = 64
    window: int = 5
    negatives: int = 5
    epochs: int = 3
    lr: float = 0.05
    seed: int = 0
    unk_buckets: int = 16
    min_count: int = 1


class Word2VecModel:
    """Skip-gram embeddings; unknown words hash into stable UNK buckets."""

    mode = "per-token"

    def __init__(self, vocab, counts, w_in, w_out, config: SkipGramConfig, epoch_loss=None):
        self.vocab = vocab  # word -> row
        self.counts = counts
        self.w_in = w_in  # (V + unk_buckets, d)
        self.w_out = w_out  # (V, d)
        self.config = config
        self.epoch_loss = list(epoch_loss or [])
        if config.unk_buckets < 1:
            raise ValueError("need at least one UNK bucket")

    @property
    def d(self) -> int:
        return self.w_in.shape[1]

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def embed_token(self, text: str) -> np.ndarray:
        idx = self.vocab.get(text)
        if idx is None:
            idx = self.vocab_size + _stable_hash(text) % self.config.unk_buckets
        return self.w_in[idx]


class Char2VecModel:
    """Token embedding = mean of its boundary-padded character trigram vectors."""

    mode = "per-token"

    def __init__(self, inner: Word2VecModel):
        self.inner = inner

    @property
    def d(self) -> int:
        return self.inner.d

    @property
    def config(self) -> SkipGramConfig:
        return self.inner.config

    def embed_token(self, text: str) -> np.ndarray:
        grams = trigrams(text)
        return np.mean([self.inner.embed_token(g) for g in grams], axis=0)


class PrecomputedBlockProvider:
    """Block vectors keyed by (document id, block id), loaded from file."""

    mode = "per-block"

    def __init__(self, keys: dict[str, int], matrix: np.ndarray):
        self.keys = keys
        self.matrix = matrix

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    @staticmethod
    def key(doc_id: str, block_id: int) -> str:
        return f"{doc_id}|{block_id}"

    def embed_block_by_key(self, doc_id: str, block_id: int) -> np.ndarray:
        k = self.key(doc_id, block_id)
        if k not in self.keys:
            raise MissingEmbedding(k)
        return self.matrix[self.keys[k]]


def trigrams(text: str) -> list[str]:
    padded = f"^{text}$"
    return [padded[i : i + 3] for i in range(len(padded) - 2)]


# ---------------------------------------------------------------------------
# Provider-level operations
# ---------------------------------------------------------------------------


def embed_token(provider, text: str) -> np.ndarray:
    if provider.mode != "per-token":
        raise ValueError("provider does not embed individual tokens")
    return provider.embed_token(text)


def embed_block(provider, tokens, doc_id: str | None = None, block_id: int | None = None):
    """Per-token providers average their token vectors; precomputed providers
    look the block up by (doc id, block id)."""
    if provider.mode == "per-block":
        return provider.embed_block_by_key(doc_id, block_id)
    tokens = list(tokens)
    if not tokens:
        raise ValueError("empty block")
    return np.mean([provider.embed_token(t) for t in tokens], axis=0)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _build_vocab(streams, min_count: int, unk_buckets: int):
    """Vocabulary plus per-row counts; sub-min_count tokens pool into their
    stable UNK bucket so the bucket vectors train on rare-token contexts."""
    counts: dict[str, int] = {}
    total = 0
    for stream in streams:
        for tok in stream:
            total += 1
            counts[tok] = counts.get(tok, 0) + 1
    if total < MIN_CORPUS_TOKENS:
        raise ValueError(f"corpus too small: {total} tokens < {MIN_CORPUS_TOKENS}")
    vocab = {}
    kept_counts = []
    bucket_counts = np.zeros(unk_buckets)
    for stream in streams:  # first-seen order keeps ids deterministic
        for tok in stream:
            if counts[tok] >= min_count:
                if tok not in vocab:
                    vocab[tok] = len(vocab)
                    kept_counts.append(counts[tok])
            else:
                bucket_counts[_stable_hash(tok) % unk_buckets] += 1
    if not vocab:
        raise ValueError("vocabulary empty after min_count filtering")
    return vocab, np.asarray(kept_counts, dtype=np.float64), bucket_counts


def train_word2vec(streams, config: SkipGramConfig | None = None) -> Word2VecModel:
    """Skip-gram with negative sampling over token streams.

    Deterministic for a given config seed; records the mean pair loss per
    epoch in ``epoch_loss``.
    """
    config = config or SkipGramConfig()
    streams = [list(s) for s in streams]
    vocab, counts, bucket_counts = _build_vocab(streams, config.min_count, config.unk_buckets)
    V, d = len(vocab), config.d
    rng = np.random.default_rng(config.seed)

    rows = V + config.unk_buckets
    w_in = rng.uniform(-0.5 / d, 0.5 / d, (rows, d))
    w_out = np.zeros((rows, d))

    noise = np.concatenate([counts, bucket_counts]) ** 0.75
    noise_cum = np.cumsum(noise / noise.sum())

    def encode(tok):
        idx = vocab.get(tok)
        if idx is None:
            idx = V + _stable_hash(tok) % config.unk_buckets
        return idx

    encoded = [np.asarray([encode(t) for t in s], dtype=np.int64) for s in streams]
    encoded = [e for e in encoded if len(e) >= 2]

    window, k_neg, lr = config.window, config.negatives, config.lr
    epoch_loss = []
    for _ in range(config.epochs):
        order = rng.permutation(len(encoded))
        total_loss = 0.0
        total_pairs = 0
        for si in order:
            seq = encoded[si]
            n = len(seq)
            for i in range(n):
                c = seq[i]
                lo, hi = max(0, i - window), min(n, i + window + 1)
                ctx = np.concatenate([seq[lo:i], seq[i + 1 : hi]])
                if len(ctx) == 0:
                    continue
                negs = np.searchsorted(noise_cum, rng.random((len(ctx), k_neg)))
                v = w_in[c]
                pos_dot = w_out[ctx] @ v
                neg_dot = np.einsum("kjd,d->kj", w_out[negs], v)
                s_pos = _sigmoid(pos_dot)
                s_neg = _sigmoid(neg_dot)
                total_loss += float(
                    -np.log(np.maximum(s_pos, 1e-12)).sum()
                    - np.log(np.maximum(1.0 - s_neg, 1e-12)).sum()
                )
                total_pairs += len(ctx)
                # gradients of the negative-sampling objective
                g_pos = s_pos - 1.0  # (k,)
                dv = g_pos @ w_out[ctx] + np.einsum("kj,kjd->d", s_neg, w_out[negs])
                np.add.at(w_out, ctx, -lr * g_pos[:, None] * v)
                np.add.at(w_out, negs.ravel(), -lr * (s_neg[:, :, None] * v).reshape(-1, d))
                w_in[c] -= lr * dv
        epoch_loss.append(total_loss / max(total_pairs, 1))
    return Word2VecModel(vocab, counts, w_in, w_out, config, epoch_loss)


def train_char2vec(streams, config: SkipGramConfig | None = None) -> Char2VecModel:
    """Skip-gram over the corpus rewritten as character-trigram streams."""
    config = config or SkipGramConfig()
    gram_streams = [[g for tok in stream for g in trigrams(tok)] for stream in streams]
    return Char2VecModel(train_word2vec(gram_streams, config))


def token_streams(docs) -> list[list[str]]:
    return [[t.text for t in d.page.tokens] for d in docs]


def embed_tokens(provider, texts) -> np.ndarray:
    """(n, d) matrix of per-token vectors."""
    return np.stack([embed_token(provider, t) for t in texts])


def build_block_embeddings(docs, provider) -> PrecomputedBlockProvider:
    """Freeze per-block mean vectors of a per-token provider into a lookup."""
    keys: dict[str, int] = {}
    rows = []
    for doc in docs:
        blocks: dict[int, list[str]] = {}
        for t in doc.page.tokens:
            blocks.setdefault(t.block_id, []).append(t.text)
        for block_id in sorted(blocks):
            keys[PrecomputedBlockProvider.key(doc.id, block_id)] = len(rows)
            rows.append(embed_block(provider, blocks[block_id]))
    return PrecomputedBlockProvider(keys, np.asarray(rows))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_provider(path: str, provider) -> None:
    if isinstance(provider, Word2VecModel):
        _save_skipgram(path, provider, kind="word2vec")
    elif isinstance(provider, Char2VecModel):
        _save_skipgram(path, provider.inner, kind="char2vec")
    elif isinstance(provider, PrecomputedBlockProvider):
        ordered = sorted(provider.keys.items(), key=lambda kv: kv[1])
        save_bundle(
            path,
            {
                "format": EMB_FORMAT,
                "kind": "precomputed",
                "mode": "per-block",
                "d": provider.d,
                "keys": [k for k, _ in ordered],
                "vocab_size": len(ordered),
            },
            {"matrix": provider.matrix},
        )
    else:
        raise TypeError(f"unknown provider type {type(provider)!r}")


def _save_skipgram(path: str, model: Word2VecModel, kind: str) -> None:
    cfg = model.config
    ordered = sorted(model.vocab.items(), key=lambda kv: kv[1])
    save_bundle(
        path,
        {
            "format": EMB_FORMAT,
            "kind": kind,
            "mode": "per-token",
            "d": model.d,
            "vocab_size": model.vocab_size,
            "vocab": [w for w, _ in ordered],
            "counts": model.counts.astype(int).tolist(),
            "config": vars(cfg),
            "epoch_loss": model.epoch_loss,
        },
        {"w_in": model.w_in, "w_out": model.w_out},
    )


def load_provider(path: str):
    manifest, tensors = load_bundle(path)
    if manifest.get("format") != EMB_FORMAT:
        raise ValueError(f"{path}: not a {EMB_FORMAT} file")
    kind = manifest["kind"]
    if kind == "precomputed":
        keys = {k: i for i, k in enumerate(manifest["keys"])}
        return PrecomputedBlockProvider(keys, tensors["matrix"])
    config = SkipGramConfig(**manifest["config"])
    vocab = {w: i for i, w in enumerate(manifest["vocab"])}
    model = Word2VecModel(
        vocab,
        np.asarray(manifest["counts"], dtype=np.float64),
        tensors["w_in"],
        tensors["w_out"],
        config,
        manifest.get("epoch_loss"),
    )
    return Char2VecModel(model) if kind == "char2vec" else model

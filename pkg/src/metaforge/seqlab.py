"""BiLSTM token classifier and BiLSTM-CRF labeler with hand-derived backprop.

Inputs are per-token embedding sequences. The classifier stacks bidirectional
LSTM layers (forward and backward streams concatenated per layer), a two-layer
ReLU head and a softmax; the CRF variant projects the final states to unary
scores and reuses the chain inference routines from the crf module.

Full-size configurations are 3 layers x 112 hidden units (classifier) and
4 layers x 115 (CRF variant); miniature configs are first-class citizens for
testing and desk-scale runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Label
from .crf import (
    forward_backward_from_scores,
    sequence_score_from_scores,
    viterbi_from_scores,
)
from .errors import TrainingFailure
from .tensorio import load_bundle, save_bundle

SEQLAB_FORMAT = "metaforge-seqlab/1"

GATES = ("i", "f", "o", "g")


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def softmax_rows(o: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by per-row max subtraction."""
    m = o.max(axis=1, keepdims=True)
    e = np.exp(o - m)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class LstmCell:
    """One direction's parameters: per-gate input, recurrent and bias terms."""

    w: dict  # gate -> (h, d_in)
    u: dict  # gate -> (h, h)
    b: dict  # gate -> (h,)

    @property
    def hidden(self) -> int:
        return self.w["i"].shape[0]

    @staticmethod
    def init(rng, d_in: int, hidden: int) -> "LstmCell":
        def mat(rows, cols, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, (rows, cols))

        w = {g: mat(hidden, d_in, d_in) for g in GATES}
        u = {g: mat(hidden, hidden, hidden) for g in GATES}
        b = {g: rng.uniform(-1, 1, hidden) / np.sqrt(hidden) for g in GATES}
        b["f"] = b["f"] + 1.0  # keep the forget gate open early in training
        return LstmCell(w, u, b)


def lstm_step(cell: LstmCell, x, h_prev, c_prev):
    """One LSTM update; returns (h, c, cache) with the cache kept for backprop."""
    z = {g: cell.w[g] @ x + cell.u[g] @ h_prev + cell.b[g] for g in GATES}
    i = _sigmoid(z["i"])
    f = _sigmoid(z["f"])
    o = _sigmoid(z["o"])
    g = np.tanh(z["g"])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = (x, h_prev, c_prev, i, f, o, g, tc)
    return h, c, cache


def lstm_step_backward(cell: LstmCell, cache, dh, dc, grads, prefix: str):
    """Backprop one step; accumulates into grads and returns (dx, dh_prev, dc_prev)."""
    x, h_prev, c_prev, i, f, o, g, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc**2)
    df = dc * c_prev
    di = dc * g
    dg = dc * i
    dc_prev = dc * f

    dz = {
        "i": di * i * (1.0 - i),
        "f": df * f * (1.0 - f),
        "o": do * o * (1.0 - o),
        "g": dg * (1.0 - g**2),
    }
    dx = np.zeros_like(x)
    dh_prev = np.zeros_like(h_prev)
    for gate in GATES:
        grads[f"{prefix}.w{gate}"] += np.outer(dz[gate], x)
        grads[f"{prefix}.u{gate}"] += np.outer(dz[gate], h_prev)
        grads[f"{prefix}.b{gate}"] += dz[gate]
        dx += cell.w[gate].T @ dz[gate]
        dh_prev += cell.u[gate].T @ dz[gate]
    return dx, dh_prev, dc_prev


def _run_direction(cell: LstmCell, xs):
    """Left-to-right pass over xs (n, d_in); returns (H (n, h), caches)."""
    n = len(xs)
    h = np.zeros(cell.hidden)
    c = np.zeros(cell.hidden)
    H = np.zeros((n, cell.hidden))
    caches = []
    for t in range(n):
        h, c, cache = lstm_step(cell, xs[t], h, c)
        H[t] = h
        caches.append(cache)
    return H, caches


def _run_direction_backward(cell: LstmCell, caches, dH, grads, prefix):
    n = len(caches)
    dX = np.zeros((n, caches[0][0].shape[0]))
    dh = np.zeros(cell.hidden)
    dc = np.zeros(cell.hidden)
    for t in range(n - 1, -1, -1):
        dx, dh, dc = lstm_step_backward(cell, caches[t], dH[t] + dh, dc, grads, prefix)
        dX[t] = dx
    return dX


class BiLstmStack:
    """Stacked bidirectional layers; the backward stream is a forward LSTM run
    on the reversed sequence, reversed back."""

    def __init__(self, layers: list[tuple[LstmCell, LstmCell]]):
        self.layers = layers

    @staticmethod
    def init(rng, d_in: int, hidden: int, n_layers: int) -> "BiLstmStack":
        layers = []
        for i in range(n_layers):
            in_dim = d_in if i == 0 else 2 * hidden
            layers.append((LstmCell.init(rng, in_dim, hidden), LstmCell.init(rng, in_dim, hidden)))
        return BiLstmStack(layers)

    @property
    def hidden(self) -> int:
        return self.layers[0][0].hidden

    def forward(self, xs):
        """(n, 2h) final-layer states plus caches for backprop."""
        xs = np.asarray(xs, dtype=np.float64)
        caches = []
        cur = xs
        for fwd, bwd in self.layers:
            Hf, cf = _run_direction(fwd, cur)
            Hb_rev, cb = _run_direction(bwd, cur[::-1])
            Hb = Hb_rev[::-1]
            caches.append((cf, cb))
            cur = np.concatenate([Hf, Hb], axis=1)
        return cur, caches

    def backward(self, caches, dOut, grads):
        h = self.hidden
        d = dOut
        for li in range(len(self.layers) - 1, -1, -1):
            fwd, bwd = self.layers[li]
            cf, cb = caches[li]
            dHf = d[:, :h]
            dHb = d[:, h:]
            dX_f = _run_direction_backward(fwd, cf, dHf, grads, f"layer{li}.fwd")
            dX_b_rev = _run_direction_backward(bwd, cb, dHb[::-1], grads, f"layer{li}.bwd")
            d = dX_f + dX_b_rev[::-1]
        return d

    def named_params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for li, (fwd, bwd) in enumerate(self.layers):
            for name, cell in (("fwd", fwd), ("bwd", bwd)):
                for gate in GATES:
                    out[f"layer{li}.{name}.w{gate}"] = cell.w[gate]
                    out[f"layer{li}.{name}.u{gate}"] = cell.u[gate]
                    out[f"layer{li}.{name}.b{gate}"] = cell.b[gate]
        return out


def bilstm_forward(stack: BiLstmStack, xs) -> np.ndarray:
    """Per-position hidden states of the final layer (n, 2h)."""
    states, _ = stack.forward(xs)
    return states


# ---------------------------------------------------------------------------
# Token classifier
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.1
    epochs: int = 10
    batch: int = 8
    seed: int = 0
    clip: float = 5.0


class BiLstmClassifier:
    """Stack + two fully connected ReLU layers + softmax over the labels."""

    def __init__(self, stack: BiLstmStack, w1, b1, w2, b2, labels=None):
        self.stack = stack
        self.w1, self.b1 = w1, b1
        self.w2, self.b2 = w2, b2
        self.labels = list(labels) if labels is not None else list(Label)

    @staticmethod
    def init(d_in: int, hidden: int = 112, n_layers: int = 3, head: int | None = None,
             labels=None, seed: int = 0) -> "BiLstmClassifier":
        rng = np.random.default_rng(seed)
        labels = list(labels) if labels is not None else list(Label)
        stack = BiLstmStack.init(rng, d_in, hidden, n_layers)
        head = head or hidden
        L = len(labels)

        def mat(rows, cols):
            bound = 1.0 / np.sqrt(cols)
            return rng.uniform(-bound, bound, (rows, cols))

        w1 = mat(head, 2 * hidden)
        b1 = rng.uniform(-1, 1, head) / np.sqrt(2 * hidden)
        w2 = mat(L, head)
        # the output layer feeds a ReLU before the softmax; a positive bias
        # keeps every class's logit initially active instead of frozen at zero
        b2 = rng.uniform(-1, 1, L) / np.sqrt(head) + 0.5
        return BiLstmClassifier(stack, w1, b1, w2, b2, labels)

    def named_params(self) -> dict[str, np.ndarray]:
        out = self.stack.named_params()
        out.update({"head.w1": self.w1, "head.b1": self.b1,
                    "head.w2": self.w2, "head.b2": self.b2})
        return out

    def _head_forward(self, states):
        z1 = states @ self.w1.T + self.b1
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ self.w2.T + self.b2
        o = np.maximum(z2, 0.0)
        probs = softmax_rows(o)
        return probs, (states, z1, a1, z2, o)

    def forward(self, xs):
        states, caches = self.stack.forward(xs)
        probs, head_cache = self._head_forward(states)
        return probs, (caches, head_cache)

    def classify_tokens(self, xs) -> np.ndarray:
        """Per-token probability rows (n, |labels|)."""
        probs, _ = self.forward(xs)
        return probs

    def predict(self, xs) -> list:
        probs = self.classify_tokens(xs)
        return [self.labels[i] for i in np.argmax(probs, axis=1)]

    def loss_and_grads(self, xs, y):
        """Summed token cross-entropy and gradients for every parameter."""
        y = np.asarray(y, dtype=np.int64)
        probs, (caches, head_cache) = self.forward(xs)
        states, z1, a1, z2, o = head_cache
        n = len(y)
        loss = float(-np.log(np.maximum(probs[np.arange(n), y], 1e-300)).sum())

        grads = {k: np.zeros_like(v) for k, v in self.named_params().items()}
        d_o = probs.copy()
        d_o[np.arange(n), y] -= 1.0
        dz2 = d_o * (z2 > 0)
        grads["head.w2"] += dz2.T @ a1
        grads["head.b2"] += dz2.sum(axis=0)
        da1 = dz2 @ self.w2
        dz1 = da1 * (z1 > 0)
        grads["head.w1"] += dz1.T @ states
        grads["head.b1"] += dz1.sum(axis=0)
        d_states = dz1 @ self.w1
        self.stack.backward(caches, d_states, grads)
        return loss, grads


# ---------------------------------------------------------------------------
# BiLSTM-CRF
# ---------------------------------------------------------------------------


class BiLstmCrf:
    """Stack + linear projection to unary scores + learned label transitions."""

    def __init__(self, stack: BiLstmStack, w_proj, b_proj, trans, labels=None):
        self.stack = stack
        self.w_proj, self.b_proj = w_proj, b_proj
        self.trans = trans
        self.labels = list(labels) if labels is not None else list(Label)

    @staticmethod
    def init(d_in: int, hidden: int = 115, n_layers: int = 4, labels=None,
             seed: int = 0) -> "BiLstmCrf":
        rng = np.random.default_rng(seed)
        labels = list(labels) if labels is not None else list(Label)
        stack = BiLstmStack.init(rng, d_in, hidden, n_layers)
        L = len(labels)
        bound = 1.0 / np.sqrt(2 * hidden)
        w_proj = rng.uniform(-bound, bound, (L, 2 * hidden))
        b_proj = rng.uniform(-1, 1, L) * bound
        trans = np.zeros((L, L))
        return BiLstmCrf(stack, w_proj, b_proj, trans, labels)

    def named_params(self) -> dict[str, np.ndarray]:
        out = self.stack.named_params()
        out.update({"crf.w_proj": self.w_proj, "crf.b_proj": self.b_proj,
                    "crf.trans": self.trans})
        return out

    def unary_scores(self, xs):
        states, caches = self.stack.forward(xs)
        return states @ self.w_proj.T + self.b_proj, (states, caches)

    def neg_log_lik(self, xs, y):
        """- log P(y | x) plus gradients flowing through the unary scores."""
        y = np.asarray(y, dtype=np.int64)
        unary, (states, caches) = self.unary_scores(xs)
        node, pair, log_z = forward_backward_from_scores(unary, self.trans)
        score = sequence_score_from_scores(unary, self.trans, y)
        loss = log_z - score

        grads = {k: np.zeros_like(v) for k, v in self.named_params().items()}
        n = len(y)
        d_unary = node.copy()
        d_unary[np.arange(n), y] -= 1.0
        if n > 1:
            d_trans = pair.sum(axis=0)
            np.add.at(d_trans, (y[:-1], y[1:]), -1.0)
            grads["crf.trans"] += d_trans
        grads["crf.w_proj"] += d_unary.T @ states
        grads["crf.b_proj"] += d_unary.sum(axis=0)
        d_states = d_unary @ self.w_proj
        self.stack.backward(caches, d_states, grads)
        return float(loss), grads

    def decode(self, xs) -> list:
        unary, _ = self.unary_scores(xs)
        return [self.labels[i] for i in viterbi_from_scores(unary, self.trans)]


# ---------------------------------------------------------------------------
# Training loop (shared between both models)
# ---------------------------------------------------------------------------


def clip_global_norm(grads: dict[str, np.ndarray], clip: float) -> float:
    total = float(np.sqrt(sum(float((g**2).sum()) for g in grads.values())))
    if clip > 0 and total > clip:
        scale = clip / total
        for g in grads.values():
            g *= scale
    return total


def _sgd_epochs(model, data, config: TrainConfig, per_seq_loss_and_grads, loss_norm):
    """Mini-batch SGD over (xs, y) pairs; returns per-epoch mean losses."""
    if not data:
        raise ValueError("empty training corpus")
    rng = np.random.default_rng(config.seed)
    params = model.named_params()
    epoch_losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        total_loss = 0.0
        total_norm = 0
        for start in range(0, len(order), config.batch):
            batch_ids = order[start : start + config.batch]
            grads = {k: np.zeros_like(v) for k, v in params.items()}
            batch_loss = 0.0
            batch_norm = 0
            for bi in batch_ids:
                xs, y = data[bi]
                loss, g = per_seq_loss_and_grads(xs, y)
                if not np.isfinite(loss):
                    raise TrainingFailure(
                        "non-finite loss", diagnostics={"epoch": epoch, "sequence": int(bi)}
                    )
                batch_loss += loss
                batch_norm += loss_norm(y)
                for k in grads:
                    grads[k] += g[k]
            scale = 1.0 / max(batch_norm, 1)
            for k in grads:
                grads[k] *= scale
            clip_global_norm(grads, config.clip)
            for k, p in params.items():
                p -= config.lr * grads[k]
            total_loss += batch_loss
            total_norm += batch_norm
        epoch_losses.append(total_loss / max(total_norm, 1))
    return epoch_losses


def train_bilstm(model: BiLstmClassifier, data, config: TrainConfig) -> list[float]:
    """data: list of (embeddings (n, d), label-index array). Returns epoch losses."""
    return _sgd_epochs(model, data, config, model.loss_and_grads, lambda y: len(y))


def train_bilstm_crf(model: BiLstmCrf, data, config: TrainConfig) -> list[float]:
    return _sgd_epochs(model, data, config, model.neg_log_lik, lambda y: len(y))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _stack_meta(stack: BiLstmStack) -> dict:
    return {
        "layers": len(stack.layers),
        "hidden": stack.hidden,
        "d_in": stack.layers[0][0].w["i"].shape[1],
    }


def save_seqlab(path: str, model, extra_meta: dict | None = None) -> None:
    if isinstance(model, BiLstmClassifier):
        kind = "bilstm"
        head_meta = {"head": model.w1.shape[0]}
    elif isinstance(model, BiLstmCrf):
        kind = "bilstm-crf"
        head_meta = {}
    else:
        raise TypeError(f"not a seqlab model: {type(model)!r}")
    meta = {
        "format": SEQLAB_FORMAT,
        "kind": kind,
        "labels": [l.value for l in model.labels],
        **_stack_meta(model.stack),
        **head_meta,
        **(extra_meta or {}),
    }
    save_bundle(path, meta, model.named_params())


def load_seqlab(path: str):
    manifest, tensors = load_bundle(path)
    if manifest.get("format") != SEQLAB_FORMAT:
        raise ValueError(f"{path}: not a {SEQLAB_FORMAT} file")
    from .core import LABEL_BY_NAME

    labels = [LABEL_BY_NAME[v] for v in manifest["labels"]]
    layers = []
    for li in range(manifest["layers"]):
        cells = []
        for direction in ("fwd", "bwd"):
            w = {g: tensors[f"layer{li}.{direction}.w{g}"] for g in GATES}
            u = {g: tensors[f"layer{li}.{direction}.u{g}"] for g in GATES}
            b = {g: tensors[f"layer{li}.{direction}.b{g}"] for g in GATES}
            cells.append(LstmCell(w, u, b))
        layers.append(tuple(cells))
    stack = BiLstmStack(layers)
    if manifest["kind"] == "bilstm":
        model = BiLstmClassifier(
            stack, tensors["head.w1"], tensors["head.b1"],
            tensors["head.w2"], tensors["head.b2"], labels,
        )
    else:
        model = BiLstmCrf(
            stack, tensors["crf.w_proj"], tensors["crf.b_proj"], tensors["crf.trans"], labels
        )
    return model, manifest

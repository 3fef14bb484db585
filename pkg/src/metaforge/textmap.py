"""Spatial-semantic fusion extractor.

Two streams over the page: a grayscale ink map and an embedding-painted text
map, each through two stride-2 convolutions, fused by multi-head attention
(queries from the spatial grid, keys/values from the semantic grid, times a
learnable value matrix). Given text regions are classified and their boxes
refined by linear heads over region-pooled fused features. Training combines
a semantic, a spatial-smoothness and a cross-modal objective under learnable
uncertainty weights, plus a smooth-L1 box term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import BBox, Document, Label, px_rect, raster_scales
from .embeddings import embed_block, embed_token
from .errors import TrainingFailure
from .seqlab import softmax_rows
from .tensorio import load_bundle, save_bundle

TEXTMAP_FORMAT = "metaforge-textmap/1"

#: Total downscale of the two stride-2 convolutions.
GRID_STRIDE = 4


@dataclass
class TextMapConfig:
    d: int
    mode: str = "per-token"  # or "per-block"
    channels: int = 16
    heads: int = 4
    kernel: int = 3
    #: full attention up to this many grid cells, windowed above
    window_threshold: int = 4096
    window_radius: int = 4
    neighbors: int = 4
    nms_iou: float = 0.5
    box_weight: float = 1.0

    def __post_init__(self):
        if self.channels % self.heads != 0:
            raise ValueError("head count must divide the channel count")
        if self.mode not in ("per-token", "per-block"):
            raise ValueError(f"unknown mode {self.mode!r}")


# ---------------------------------------------------------------------------
# Spatial map and regions
# ---------------------------------------------------------------------------


def spatial_stream(page) -> np.ndarray:
    """Inverted normalized raster: ink 1, background 0."""
    if page.raster is None:
        raise ValueError("page has no raster")
    return 1.0 - page.raster.astype(np.float64) / 255.0


@dataclass(frozen=True)
class Region:
    bbox: BBox
    key: int  # token index (per-token) or block id (per-block)


def identify_regions(doc: Document, mode: str) -> list[Region]:
    """Text regions in reading order: one per token or one per block."""
    tokens = doc.page.tokens
    if mode == "per-token":
        return [Region(t.bbox, i) for i, t in enumerate(tokens)]
    if mode == "per-block":
        blocks: dict[int, list[int]] = {}
        for i, t in enumerate(tokens):
            blocks.setdefault(t.block_id, []).append(i)
        out = []
        for block_id in sorted(blocks):
            boxes = [tokens[i].bbox for i in blocks[block_id]]
            bbox = boxes[0]
            for b in boxes[1:]:
                bbox = bbox.union(b)
            out.append(Region(bbox, block_id))
        return out
    raise ValueError(f"unknown mode {mode!r}")


def region_embeddings(doc: Document, regions: list[Region], provider, mode: str) -> np.ndarray:
    tokens = doc.page.tokens
    rows = []
    if mode == "per-token":
        for r in regions:
            rows.append(embed_token(provider, tokens[r.key].text))
    else:
        blocks: dict[int, list[str]] = {}
        for t in tokens:
            blocks.setdefault(t.block_id, []).append(t.text)
        for r in regions:
            rows.append(
                embed_block(provider, blocks[r.key], doc_id=doc.id, block_id=r.key)
            )
    return np.asarray(rows, dtype=np.float64)


def build_text_map(
    regions: list[Region], embeddings: np.ndarray, page, raster_shape
) -> np.ndarray:
    """H x W x d map: pixels inside a region carry that region's embedding
    exactly; overlaps resolve to the later region in reading order; pixels
    outside every region stay zero."""
    h, w = raster_shape
    sx, sy = w / page.width, h / page.height
    d = embeddings.shape[1]
    tm = np.zeros((h, w, d))
    for region, emb in zip(regions, embeddings):
        r0, r1, c0, c1 = px_rect(region.bbox, sx, sy, h, w)
        tm[r0:r1, c0:c1, :] = emb
    return tm


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def conv2d_forward(x: np.ndarray, k: np.ndarray, b: np.ndarray, stride: int = 2):
    """SAME-padded strided convolution; returns (out, cache)."""
    h, w, _ = x.shape
    kh, kw = k.shape[0], k.shape[1]
    hout = -(-h // stride)
    wout = -(-w // stride)
    pad_h = max((hout - 1) * stride + kh - h, 0)
    pad_w = max((wout - 1) * stride + kw - w, 0)
    pt, pl = pad_h // 2, pad_w // 2
    xp = np.pad(x, ((pt, pad_h - pt), (pl, pad_w - pl), (0, 0)))
    patches = np.empty((hout, wout, kh, kw, x.shape[2]))
    for di in range(kh):
        for dj in range(kw):
            patches[:, :, di, dj, :] = xp[
                di : di + stride * hout : stride, dj : dj + stride * wout : stride, :
            ]
    out = np.tensordot(patches, k, axes=([2, 3, 4], [0, 1, 2])) + b
    cache = (patches, xp.shape, (pt, pl), x.shape, stride)
    return out, cache


def conv2d_backward(cache, k: np.ndarray, d_out: np.ndarray):
    patches, xp_shape, (pt, pl), x_shape, stride = cache
    hout, wout = d_out.shape[:2]
    kh, kw = k.shape[0], k.shape[1]
    dk = np.tensordot(patches, d_out, axes=([0, 1], [0, 1]))
    db = d_out.sum(axis=(0, 1))
    dpatches = np.tensordot(d_out, k, axes=([2], [3]))  # (hout, wout, kh, kw, cin)
    dxp = np.zeros(xp_shape)
    for di in range(kh):
        for dj in range(kw):
            dxp[di : di + stride * hout : stride, dj : dj + stride * wout : stride, :] += (
                dpatches[:, :, di, dj, :]
            )
    dx = dxp[pt : pt + x_shape[0], pl : pl + x_shape[1], :]
    return dx, dk, db


class ConvStack:
    """conv(stride 2) -> ReLU -> conv(stride 2) -> ReLU."""

    def __init__(self, k1, b1, k2, b2):
        self.k1, self.b1, self.k2, self.b2 = k1, b1, k2, b2

    @staticmethod
    def init(rng, c_in: int, channels: int, kernel: int) -> "ConvStack":
        def kmat(cin, cout):
            bound = 1.0 / math.sqrt(kernel * kernel * cin)
            return rng.uniform(-bound, bound, (kernel, kernel, cin, cout))

        return ConvStack(
            kmat(c_in, channels),
            rng.uniform(-0.1, 0.1, channels),
            kmat(channels, channels),
            rng.uniform(-0.1, 0.1, channels),
        )

    def forward(self, x):
        z1, c1 = conv2d_forward(x, self.k1, self.b1)
        a1 = np.maximum(z1, 0.0)
        z2, c2 = conv2d_forward(a1, self.k2, self.b2)
        a2 = np.maximum(z2, 0.0)
        return a2, (c1, z1, c2, z2)

    def backward(self, cache, d_out):
        c1, z1, c2, z2 = cache
        dz2 = d_out * (z2 > 0)
        da1, dk2, db2 = conv2d_backward(c2, self.k2, dz2)
        dz1 = da1 * (z1 > 0)
        _, dk1, db1 = conv2d_backward(c1, self.k1, dz1)
        return {"k1": dk1, "b1": db1, "k2": dk2, "b2": db2}


def stream_features(stack: ConvStack, x: np.ndarray) -> np.ndarray:
    """H' x W' x C grid with H' = ceil(H/4), W' = ceil(W/4)."""
    out, _ = stack.forward(x)
    return out


# ---------------------------------------------------------------------------
# Attention fusion
# ---------------------------------------------------------------------------


def grid_neighbor_table(h: int, w: int, radius: int):
    """(N, m) neighbor indices and validity mask for a Chebyshev window."""
    side = 2 * radius + 1
    m = side * side
    n = h * w
    nbrs = np.zeros((n, m), dtype=np.int64)
    mask = np.zeros((n, m), dtype=bool)
    rows, cols = np.divmod(np.arange(n), w)
    k = 0
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            r2 = rows + dr
            c2 = cols + dc
            ok = (r2 >= 0) & (r2 < h) & (c2 >= 0) & (c2 < w)
            nbrs[:, k] = np.where(ok, r2 * w + c2, 0)
            mask[:, k] = ok
            k += 1
    return nbrs, mask


def fuse_forward(model: "TextMapModel", f_spatial: np.ndarray, f_semantic: np.ndarray):
    """Multi-head scaled dot-product attention over the semantic grid.

    Queries come from spatial cells, keys/values from semantic cells; heads
    concatenate and multiply the learnable value matrix. Grids beyond the
    window threshold attend only to a local neighborhood.
    """
    if f_spatial.shape != f_semantic.shape:
        raise ValueError(
            f"stream shapes differ: {f_spatial.shape} vs {f_semantic.shape}"
        )
    hp, wp, c = f_spatial.shape
    n = hp * wp
    cfg = model.config
    dh = c // cfg.heads
    scale = 1.0 / math.sqrt(dh)
    qs = f_spatial.reshape(n, c)
    ks = f_semantic.reshape(n, c)
    windowed = n > cfg.window_threshold
    nbrs = mask = None
    if windowed:
        nbrs, mask = grid_neighbor_table(hp, wp, cfg.window_radius)

    heads = []
    head_caches = []
    for hi in range(cfg.heads):
        q = qs @ model.wq[hi]
        k = ks @ model.wk[hi]
        u = ks @ model.wv[hi]
        if not windowed:
            s = (q @ k.T) * scale
            a = softmax_rows(s)
            out = a @ u
            head_caches.append((q, k, u, a))
        else:
            kn = k[nbrs]  # (n, m, dh)
            un = u[nbrs]
            s = np.einsum("nd,nmd->nm", q, kn) * scale
            s = np.where(mask, s, -np.inf)
            smax = s.max(axis=1, keepdims=True)
            e = np.where(mask, np.exp(s - smax), 0.0)
            a = e / e.sum(axis=1, keepdims=True)
            out = np.einsum("nm,nmd->nd", a, un)
            head_caches.append((q, k, u, a))
        heads.append(out)
    hcat = np.concatenate(heads, axis=1)  # (n, c)
    m_flat = hcat @ model.v_mat
    cache = (qs, ks, hcat, head_caches, windowed, nbrs, mask, (hp, wp, c))
    return m_flat.reshape(hp, wp, c), cache


def fuse_backward(model: "TextMapModel", cache, d_m: np.ndarray):
    qs, ks, hcat, head_caches, windowed, nbrs, mask, (hp, wp, c) = cache
    cfg = model.config
    dh = c // cfg.heads
    scale = 1.0 / math.sqrt(dh)
    n = hp * wp
    d_m_flat = d_m.reshape(n, c)

    grads = {
        "v_mat": hcat.T @ d_m_flat,
        "wq": np.zeros_like(model.wq),
        "wk": np.zeros_like(model.wk),
        "wv": np.zeros_like(model.wv),
    }
    d_hcat = d_m_flat @ model.v_mat.T
    d_qs = np.zeros_like(qs)
    d_ks = np.zeros_like(ks)
    for hi in range(cfg.heads):
        q, k, u, a = head_caches[hi]
        d_out = d_hcat[:, hi * dh : (hi + 1) * dh]
        if not windowed:
            d_a = d_out @ u.T
            d_u = a.T @ d_out
            d_s = a * (d_a - (a * d_a).sum(axis=1, keepdims=True))
            d_q = d_s @ k * scale
            d_k = d_s.T @ q * scale
        else:
            kn = k[nbrs]
            un = u[nbrs]
            d_a = np.einsum("nd,nmd->nm", d_out, un)
            d_a = np.where(mask, d_a, 0.0)
            d_s = a * (d_a - (a * d_a).sum(axis=1, keepdims=True))
            d_q = np.einsum("nm,nmd->nd", d_s, kn) * scale
            d_k = np.zeros_like(k)
            np.add.at(d_k, nbrs.ravel(), (d_s[:, :, None] * q[:, None, :] * scale).reshape(-1, dh))
            d_u = np.zeros_like(u)
            np.add.at(d_u, nbrs.ravel(), (a[:, :, None] * d_out[:, None, :]).reshape(-1, dh))
        grads["wq"][hi] = qs.T @ d_q
        grads["wk"][hi] = ks.T @ d_k
        grads["wv"][hi] = ks.T @ d_u
        d_qs += d_q @ model.wq[hi].T
        d_ks += d_k @ model.wk[hi].T + d_u @ model.wv[hi].T
    return d_qs.reshape(hp, wp, c), d_ks.reshape(hp, wp, c), grads


def fuse(model: "TextMapModel", f_spatial: np.ndarray, f_semantic: np.ndarray) -> np.ndarray:
    out, _ = fuse_forward(model, f_spatial, f_semantic)
    return out


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class TextMapModel:
    def __init__(self, config: TextMapConfig, spa: ConvStack, sem: ConvStack,
                 wq, wk, wv, v_mat, w_sem, b_sem, w_cls, b_cls, w_box, b_box, s,
                 labels=None):
        self.config = config
        self.spa = spa
        self.sem = sem
        self.wq, self.wk, self.wv = wq, wk, wv
        self.v_mat = v_mat
        self.w_sem, self.b_sem = w_sem, b_sem
        self.w_cls, self.b_cls = w_cls, b_cls
        self.w_box, self.b_box = w_box, b_box
        self.s = s  # (3,) log-precisions for the three objectives
        self.labels = list(labels) if labels is not None else list(Label)

    @staticmethod
    def init(config: TextMapConfig, labels=None, seed: int = 0) -> "TextMapModel":
        rng = np.random.default_rng(seed)
        labels = list(labels) if labels is not None else list(Label)
        c, heads = config.channels, config.heads
        dh = c // heads

        def mat(rows, cols, fan):
            bound = 1.0 / math.sqrt(fan)
            return rng.uniform(-bound, bound, (rows, cols))

        L = len(labels)
        return TextMapModel(
            config=config,
            spa=ConvStack.init(rng, 1, c, config.kernel),
            sem=ConvStack.init(rng, config.d, c, config.kernel),
            wq=np.stack([mat(c, dh, c) for _ in range(heads)]),
            wk=np.stack([mat(c, dh, c) for _ in range(heads)]),
            wv=np.stack([mat(c, dh, c) for _ in range(heads)]),
            v_mat=mat(c, c, c),
            w_sem=mat(L, config.d, config.d),
            b_sem=np.zeros(L),
            w_cls=mat(L, c, c),
            b_cls=np.zeros(L),
            w_box=mat(4, c, c),
            b_box=np.zeros(4),
            s=np.zeros(3),
            labels=labels,
        )

    def named_params(self) -> dict[str, np.ndarray]:
        return {
            "spa.k1": self.spa.k1, "spa.b1": self.spa.b1,
            "spa.k2": self.spa.k2, "spa.b2": self.spa.b2,
            "sem.k1": self.sem.k1, "sem.b1": self.sem.b1,
            "sem.k2": self.sem.k2, "sem.b2": self.sem.b2,
            "attn.wq": self.wq, "attn.wk": self.wk, "attn.wv": self.wv,
            "attn.v_mat": self.v_mat,
            "head.w_sem": self.w_sem, "head.b_sem": self.b_sem,
            "head.w_cls": self.w_cls, "head.b_cls": self.b_cls,
            "head.w_box": self.w_box, "head.b_box": self.b_box,
            "loss.s": self.s,
        }


# ---------------------------------------------------------------------------
# Region pooling and detection
# ---------------------------------------------------------------------------


def region_grid_cells(region: Region, page, raster_shape, grid_shape) -> list[int]:
    """Flat indices of the grid cells a region's pixels fall into.

    Grid cell (i, j) owns the GRID_STRIDE x GRID_STRIDE pixel tile starting at
    (GRID_STRIDE*i, GRID_STRIDE*j). Falls back to the cell nearest the region
    center if the footprint leaves the grid entirely.
    """
    h, w = raster_shape
    gh, gw = grid_shape
    sx, sy = w / page.width, h / page.height
    r0, r1, c0, c1 = px_rect(region.bbox, sx, sy, h, w)
    g_r0, g_r1 = r0 // GRID_STRIDE, min((r1 - 1) // GRID_STRIDE, gh - 1)
    g_c0, g_c1 = c0 // GRID_STRIDE, min((c1 - 1) // GRID_STRIDE, gw - 1)
    cells = [
        r * gw + c
        for r in range(g_r0, g_r1 + 1)
        for c in range(g_c0, g_c1 + 1)
        if r < gh and c < gw
    ]
    if not cells:
        cx, cy = region.bbox.center
        r = min(int(cy * sy) // GRID_STRIDE, gh - 1)
        c = min(int(cx * sx) // GRID_STRIDE, gw - 1)
        cells = [r * gw + c]
    return cells


def refine_box(bbox: BBox, deltas: np.ndarray, page=None) -> BBox:
    """Apply (dx, dy, dw, dh) in region-relative units; zero deltas are the identity."""
    cx, cy = bbox.center
    w, h = bbox.width, bbox.height
    cx = cx + float(deltas[0]) * w
    cy = cy + float(deltas[1]) * h
    w = w * math.exp(float(deltas[2]))
    h = h * math.exp(float(deltas[3]))
    box = BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
    if page is not None:
        x0 = min(max(box.x0, 0.0), page.width - 1e-6)
        y0 = min(max(box.y0, 0.0), page.height - 1e-6)
        x1 = max(min(box.x1, page.width), x0 + 1e-6)
        y1 = max(min(box.y1, page.height), y0 + 1e-6)
        box = BBox(x0, y0, x1, y1)
    return box


def box_deltas(region: BBox, target: BBox) -> np.ndarray:
    """Inverse of refine_box: the deltas that map region onto target."""
    return np.array(
        [
            (target.center[0] - region.center[0]) / region.width,
            (target.center[1] - region.center[1]) / region.height,
            math.log(target.width / region.width),
            math.log(target.height / region.height),
        ]
    )


@dataclass
class Detection:
    region: Region
    scores: np.ndarray  # softmax over labels
    deltas: np.ndarray  # (4,)
    refined: BBox
    keep: bool = True

    @property
    def label_index(self) -> int:
        return int(np.argmax(self.scores))


def detect(
    model: TextMapModel, m_grid: np.ndarray, regions: list[Region], page,
    raster_shape, nms: bool = True,
) -> list[Detection]:
    """Per-region label scores and box deltas from mean-pooled fused features.

    With nms=True, overlapping same-label detections above the IoU threshold
    keep only the highest score.
    """
    gh, gw, c = m_grid.shape
    m_flat = m_grid.reshape(-1, c)
    detections = []
    for region in regions:
        cells = region_grid_cells(region, page, raster_shape, (gh, gw))
        pooled = m_flat[cells].mean(axis=0)
        logits = model.w_cls @ pooled + model.b_cls
        deltas = model.w_box @ pooled + model.b_box
        scores = softmax_rows(logits[None, :])[0]
        refined = refine_box(region.bbox, deltas, page)
        detections.append(Detection(region, scores, deltas, refined))
    if nms:
        order = sorted(
            range(len(detections)),
            key=lambda i: float(detections[i].scores.max()),
            reverse=True,
        )
        kept: list[int] = []
        for i in order:
            di = detections[i]
            for j in kept:
                dj = detections[j]
                if (
                    di.label_index == dj.label_index
                    and di.refined.iou(dj.refined) > model.config.nms_iou
                ):
                    di.keep = False
                    break
            if di.keep:
                kept.append(i)
    return detections


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _softmax_ce(logits: np.ndarray, gold: np.ndarray):
    """Mean cross-entropy over rows plus d(loss)/d(logits)."""
    probs = softmax_rows(logits)
    n = logits.shape[0]
    loss = float(-np.log(np.maximum(probs[np.arange(n), gold], 1e-300)).mean())
    d = probs.copy()
    d[np.arange(n), gold] -= 1.0
    return loss, d / n


def smooth_l1(x: np.ndarray):
    """Elementwise Huber with unit transition; returns (values, derivative)."""
    ax = np.abs(x)
    val = np.where(ax < 1.0, 0.5 * x**2, ax - 0.5)
    grad = np.where(ax < 1.0, x, np.sign(x))
    return val, grad


def loss_semantic(logits_sem: np.ndarray, gold: np.ndarray) -> float:
    return _softmax_ce(logits_sem, gold)[0]


def loss_cross(logits_cls: np.ndarray, gold: np.ndarray) -> float:
    return _softmax_ce(logits_cls, gold)[0]


def loss_spatial(features: np.ndarray, gold: np.ndarray, neighbor_idx: np.ndarray):
    """Mean over all (i, j) graph edges of ||f_i - f_j||^2 for same-label pairs.

    Returns (loss, d_features). neighbor_idx is (n, k); the mean denominator
    counts every edge, zero contributions included.
    """
    n, k = neighbor_idx.shape
    if n == 0 or k == 0:
        return 0.0, np.zeros_like(features)
    i_idx = np.repeat(np.arange(n), k)
    j_idx = neighbor_idx.ravel()
    same = (gold[i_idx] == gold[j_idx]).astype(np.float64)
    diffs = features[i_idx] - features[j_idx]
    pairs = n * k
    loss = float(((diffs**2).sum(axis=1) * same).sum()) / pairs
    d_edges = 2.0 * diffs * same[:, None] / pairs
    d_feat = np.zeros_like(features)
    np.add.at(d_feat, i_idx, d_edges)
    np.add.at(d_feat, j_idx, -d_edges)
    return loss, d_feat


def token_neighbor_graph(doc: Document, k: int) -> np.ndarray:
    """k nearest token-box centers by Euclidean distance, per token."""
    tokens = doc.page.tokens
    centers = np.array([t.bbox.center for t in tokens])
    n = len(tokens)
    if n <= 1:
        return np.zeros((n, 0), dtype=np.int64)
    dists = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=2)
    np.fill_diagonal(dists, np.inf)
    kk = min(k, n - 1)
    return np.argsort(dists, axis=1, kind="stable")[:, :kk]


def gold_region_labels(doc: Document, regions: list[Region], mode: str, labels) -> np.ndarray:
    """Per-region gold label indices; blocks take their majority token label."""
    token_labels = doc.token_labels()
    index_of = {l: i for i, l in enumerate(labels)}
    out = []
    if mode == "per-token":
        for r in regions:
            out.append(index_of[token_labels[r.key]])
    else:
        blocks: dict[int, list[int]] = {}
        for i, t in enumerate(doc.page.tokens):
            blocks.setdefault(t.block_id, []).append(i)
        for r in regions:
            counts: dict[int, int] = {}
            for i in blocks[r.key]:
                li = index_of[token_labels[i]]
                counts[li] = counts.get(li, 0) + 1
            out.append(max(counts.items(), key=lambda kv: (kv[1], -kv[0]))[0])
    return np.asarray(out, dtype=np.int64)


def gold_region_boxes(doc: Document, regions: list[Region], mode: str):
    """Target annotation box per region (None for background regions)."""
    ann_of_token: dict[int, BBox] = {}
    label_of_token = {}
    for ann in doc.annotations:
        for i in ann.token_indices:
            ann_of_token[i] = ann.bbox
            label_of_token[i] = ann.label
    out = []
    if mode == "per-token":
        for r in regions:
            box = ann_of_token.get(r.key)
            lab = label_of_token.get(r.key, Label.OTHER)
            out.append(box if lab is not Label.OTHER else None)
    else:
        blocks: dict[int, list[int]] = {}
        for i, t in enumerate(doc.page.tokens):
            blocks.setdefault(t.block_id, []).append(i)
        for r in regions:
            # majority non-background annotation box within the block
            counts: dict[BBox, int] = {}
            for i in blocks[r.key]:
                if label_of_token.get(i, Label.OTHER) is not Label.OTHER:
                    box = ann_of_token[i]
                    counts[box] = counts.get(box, 0) + 1
            out.append(max(counts.items(), key=lambda kv: kv[1])[0] if counts else None)
    return out


# ---------------------------------------------------------------------------
# Joint objective
# ---------------------------------------------------------------------------


@dataclass
class PreparedDoc:
    """Everything per-document that does not depend on the parameters."""

    doc: Document
    g_map: np.ndarray
    text_map: np.ndarray
    regions: list[Region]
    embeddings: np.ndarray
    gold_labels: np.ndarray
    region_cells: list[list[int]]
    token_cells: list[list[int]]
    token_labels: np.ndarray
    neighbor_idx: np.ndarray
    box_targets: list[np.ndarray | None]


def prepare_document(model: TextMapModel, doc: Document, provider) -> PreparedDoc:
    cfg = model.config
    g_map = spatial_stream(doc.page)
    raster_shape = g_map.shape
    regions = identify_regions(doc, cfg.mode)
    if not regions:
        raise ValueError(f"document {doc.id} has no text regions")
    emb = region_embeddings(doc, regions, provider, cfg.mode)
    text_map = build_text_map(regions, emb, doc.page, raster_shape)
    grid_shape = (-(-raster_shape[0] // GRID_STRIDE), -(-raster_shape[1] // GRID_STRIDE))
    region_cells = [region_grid_cells(r, doc.page, raster_shape, grid_shape) for r in regions]
    token_regions = [Region(t.bbox, i) for i, t in enumerate(doc.page.tokens)]
    token_cells = [
        region_grid_cells(r, doc.page, raster_shape, grid_shape) for r in token_regions
    ]
    index_of = {l: i for i, l in enumerate(model.labels)}
    token_labels = np.asarray([index_of[l] for l in doc.token_labels()], dtype=np.int64)
    gold_labels = gold_region_labels(doc, regions, cfg.mode, model.labels)
    neighbor_idx = token_neighbor_graph(doc, cfg.neighbors)
    boxes = gold_region_boxes(doc, regions, cfg.mode)
    box_targets = [
        None if b is None else box_deltas(r.bbox, b) for r, b in zip(regions, boxes)
    ]
    return PreparedDoc(
        doc=doc, g_map=g_map, text_map=text_map, regions=regions, embeddings=emb,
        gold_labels=gold_labels, region_cells=region_cells, token_cells=token_cells,
        token_labels=token_labels, neighbor_idx=neighbor_idx, box_targets=box_targets,
    )


def _pool(m_flat: np.ndarray, cells_list: list[list[int]]) -> np.ndarray:
    return np.stack([m_flat[cells].mean(axis=0) for cells in cells_list])


def _pool_backward(d_pooled: np.ndarray, cells_list: list[list[int]], n_cells: int, width: int):
    d_flat = np.zeros((n_cells, width))
    for row, cells in zip(d_pooled, cells_list):
        d_flat[cells] += row / len(cells)
    return d_flat


def doc_objective(model: TextMapModel, prep: PreparedDoc):
    """Joint objective for one document plus gradients for every parameter.

    J = sum_k exp(-s_k) L_k + s_k + box_weight * L_box with k over
    (semantic, spatial, cross).
    """
    cfg = model.config
    f_spa, spa_cache = model.spa.forward(prep.g_map[:, :, None])
    f_sem, sem_cache = model.sem.forward(prep.text_map)
    m_grid, fuse_cache = fuse_forward(model, f_spa, f_sem)
    gh, gw, c = m_grid.shape
    m_flat = m_grid.reshape(-1, c)
    f_spa_flat = f_spa.reshape(-1, c)

    grads = {k: np.zeros_like(v) for k, v in model.named_params().items()}

    # semantic objective: labels from embeddings alone
    logits_sem = prep.embeddings @ model.w_sem.T + model.b_sem
    l_sem, d_logits_sem = _softmax_ce(logits_sem, prep.gold_labels)

    # cross-modal objective: labels from the fused detect head
    pooled = _pool(m_flat, prep.region_cells)
    logits_cls = pooled @ model.w_cls.T + model.b_cls
    l_cross, d_logits_cls = _softmax_ce(logits_cls, prep.gold_labels)

    # spatial objective: same-label neighbor tokens should share ink features
    token_feats = _pool(f_spa_flat, prep.token_cells)
    l_spa, d_token_feats = loss_spatial(token_feats, prep.token_labels, prep.neighbor_idx)

    # box refinement on annotated regions
    deltas = pooled @ model.w_box.T + model.b_box
    box_rows = [i for i, t in enumerate(prep.box_targets) if t is not None]
    d_deltas = np.zeros_like(deltas)
    l_box = 0.0
    if box_rows:
        targets = np.stack([prep.box_targets[i] for i in box_rows])
        vals, dvals = smooth_l1(deltas[box_rows] - targets)
        l_box = float(vals.sum(axis=1).mean())
        d_deltas[box_rows] = dvals / len(box_rows)

    w = np.exp(-model.s)
    joint = float(w[0] * l_sem + w[1] * l_spa + w[2] * l_cross + model.s.sum()
                  + cfg.box_weight * l_box)
    components = {"semantic": l_sem, "spatial": l_spa, "cross": l_cross, "box": l_box}
    for name, value in components.items():
        if not np.isfinite(value):
            raise TrainingFailure(
                f"loss component went non-finite: {name}",
                diagnostics={"doc": prep.doc.id, "component": name},
            )

    # ---- backward ----
    grads["loss.s"] += np.array([
        -w[0] * l_sem + 1.0,
        -w[1] * l_spa + 1.0,
        -w[2] * l_cross + 1.0,
    ])

    d_logits_sem = d_logits_sem * w[0]
    grads["head.w_sem"] += d_logits_sem.T @ prep.embeddings
    grads["head.b_sem"] += d_logits_sem.sum(axis=0)

    d_logits_cls = d_logits_cls * w[2]
    grads["head.w_cls"] += d_logits_cls.T @ pooled
    grads["head.b_cls"] += d_logits_cls.sum(axis=0)
    d_pooled = d_logits_cls @ model.w_cls

    d_deltas = d_deltas * cfg.box_weight
    grads["head.w_box"] += d_deltas.T @ pooled
    grads["head.b_box"] += d_deltas.sum(axis=0)
    d_pooled += d_deltas @ model.w_box

    d_m_flat = _pool_backward(d_pooled, prep.region_cells, gh * gw, c)
    d_f_spa, d_f_sem, fuse_grads = fuse_backward(model, fuse_cache, d_m_flat.reshape(gh, gw, c))
    grads["attn.wq"] += fuse_grads["wq"]
    grads["attn.wk"] += fuse_grads["wk"]
    grads["attn.wv"] += fuse_grads["wv"]
    grads["attn.v_mat"] += fuse_grads["v_mat"]

    d_token_feats = d_token_feats * w[1]
    d_f_spa = d_f_spa + _pool_backward(
        d_token_feats, prep.token_cells, gh * gw, c
    ).reshape(gh, gw, c)

    spa_grads = model.spa.backward(spa_cache, d_f_spa)
    sem_grads = model.sem.backward(sem_cache, d_f_sem)
    for key, g in spa_grads.items():
        grads[f"spa.{key}"] += g
    for key, g in sem_grads.items():
        grads[f"sem.{key}"] += g

    return joint, components, grads


def joint_objective(model: TextMapModel, batch: list[PreparedDoc]):
    """Mean joint objective over prepared documents, with summed gradients scaled."""
    if not batch:
        raise ValueError("empty batch")
    total = 0.0
    agg = {k: np.zeros_like(v) for k, v in model.named_params().items()}
    comps = {"semantic": 0.0, "spatial": 0.0, "cross": 0.0, "box": 0.0}
    for prep in batch:
        j, c, g = doc_objective(model, prep)
        total += j
        for k in agg:
            agg[k] += g[k]
        for k in comps:
            comps[k] += c[k]
    scale = 1.0 / len(batch)
    for k in agg:
        agg[k] *= scale
    return total * scale, {k: v * scale for k, v in comps.items()}, agg


# ---------------------------------------------------------------------------
# Training and inference
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.1
    epochs: int = 15
    batch: int = 8
    seed: int = 0


def train(model: TextMapModel, prepared: list[PreparedDoc], config: TrainConfig):
    """Mini-batch SGD on the joint objective; returns per-epoch mean J."""
    if not prepared:
        raise ValueError("empty training corpus")
    rng = np.random.default_rng(config.seed)
    params = model.named_params()
    epoch_means = []
    for _ in range(config.epochs):
        order = rng.permutation(len(prepared))
        total = 0.0
        batches = 0
        for start in range(0, len(order), config.batch):
            batch = [prepared[i] for i in order[start : start + config.batch]]
            j, _, grads = joint_objective(model, batch)
            for k, p in params.items():
                p -= config.lr * grads[k]
            total += j
            batches += 1
        epoch_means.append(total / max(batches, 1))
    return epoch_means


def loss_weights(model: TextMapModel) -> dict[str, float]:
    """The balance weights (alpha, beta, gamma) implied by the s parameters."""
    w = np.exp(-model.s)
    return {"alpha": float(w[0]), "beta": float(w[1]), "gamma": float(w[2])}


def extract(model: TextMapModel, doc: Document, provider) -> list[Label]:
    """Label every token: per-region argmax, tokens inherit their region's
    label; suppressed or uncovered tokens fall back to Other."""
    if not doc.page.tokens:
        return []
    cfg = model.config
    g_map = spatial_stream(doc.page)
    regions = identify_regions(doc, cfg.mode)
    emb = region_embeddings(doc, regions, provider, cfg.mode)
    text_map = build_text_map(regions, emb, doc.page, g_map.shape)
    f_spa, _ = model.spa.forward(g_map[:, :, None])
    f_sem, _ = model.sem.forward(text_map)
    m_grid, _ = fuse_forward(model, f_spa, f_sem)
    detections = detect(model, m_grid, regions, doc.page, g_map.shape, nms=True)

    out = [Label.OTHER] * len(doc.page.tokens)
    for det in detections:
        if not det.keep:
            continue
        label = model.labels[det.label_index]
        if cfg.mode == "per-token":
            out[det.region.key] = label
        else:
            for i, t in enumerate(doc.page.tokens):
                if t.block_id == det.region.key:
                    out[i] = label
    return out


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_textmap(path: str, model: TextMapModel, extra_meta: dict | None = None) -> None:
    cfg = model.config
    meta = {
        "format": TEXTMAP_FORMAT,
        "mode": cfg.mode,
        "d": cfg.d,
        "C": cfg.channels,
        "n_h": cfg.heads,
        "kernel": cfg.kernel,
        "window_threshold": cfg.window_threshold,
        "window_radius": cfg.window_radius,
        "neighbors": cfg.neighbors,
        "nms_iou": cfg.nms_iou,
        "box_weight": cfg.box_weight,
        "labels": [l.value for l in model.labels],
        **(extra_meta or {}),
    }
    save_bundle(path, meta, model.named_params())


def load_textmap(path: str):
    manifest, tensors = load_bundle(path)
    if manifest.get("format") != TEXTMAP_FORMAT:
        raise ValueError(f"{path}: not a {TEXTMAP_FORMAT} file")
    from .core import LABEL_BY_NAME

    config = TextMapConfig(
        d=manifest["d"],
        mode=manifest["mode"],
        channels=manifest["C"],
        heads=manifest["n_h"],
        kernel=manifest["kernel"],
        window_threshold=manifest["window_threshold"],
        window_radius=manifest["window_radius"],
        neighbors=manifest["neighbors"],
        nms_iou=manifest["nms_iou"],
        box_weight=manifest["box_weight"],
    )
    labels = [LABEL_BY_NAME[v] for v in manifest["labels"]]
    model = TextMapModel(
        config=config,
        spa=ConvStack(tensors["spa.k1"], tensors["spa.b1"], tensors["spa.k2"], tensors["spa.b2"]),
        sem=ConvStack(tensors["sem.k1"], tensors["sem.b1"], tensors["sem.k2"], tensors["sem.b2"]),
        wq=tensors["attn.wq"], wk=tensors["attn.wk"], wv=tensors["attn.wv"],
        v_mat=tensors["attn.v_mat"],
        w_sem=tensors["head.w_sem"], b_sem=tensors["head.b_sem"],
        w_cls=tensors["head.w_cls"], b_cls=tensors["head.b_cls"],
        w_box=tensors["head.w_box"], b_box=tensors["head.b_box"],
        s=tensors["loss.s"],
        labels=labels,
    )
    return model, manifest

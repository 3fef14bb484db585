"""Document model: labels, geometry, token grouping and corpus serialization.

Coordinate convention: page units are points with the origin at the top-left
corner; rasters are 8-bit grayscale arrays indexed ``[row][col]``.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, replace

import numpy as np


class Label(enum.Enum):
    """Token-level metadata classes. Declaration order is the tie-break order."""

    TITLE = "Title"
    ABSTRACT = "Abstract"
    AUTHORS = "Authors"
    EMAIL = "Email"
    ADDRESS = "Address"
    DATE = "Date"
    JOURNAL = "Journal"
    AFFILIATION = "Affiliation"
    DOI = "Doi"
    OTHER = "Other"


#: The nine foreground classes; OTHER is the background class and is
#: excluded from macro/micro averaging.
METADATA_LABELS = tuple(l for l in Label if l is not Label.OTHER)

LABEL_BY_NAME = {l.value: l for l in Label}


class SectionLabel(enum.Enum):
    """Coarse page zones used by the line layer of the two-layer extractor."""

    HEADER = "Header"
    TITLE = "Title"
    AUTHOR_INFORMATION = "AuthorInformation"
    BODY = "Body"
    FOOTNOTE = "Footnote"


SECTION_BY_NAME = {s.value: s for s in SectionLabel}


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in page points, corners (x0, y0) top-left, (x1, y1) bottom-right."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate bbox: {self}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)

    def union(self, other: "BBox") -> "BBox":
        return BBox(
            min(self.x0, other.x0),
            min(self.y0, other.y0),
            max(self.x1, other.x1),
            max(self.y1, other.y1),
        )

    def iou(self, other: "BBox") -> float:
        ix = min(self.x1, other.x1) - max(self.x0, other.x0)
        iy = min(self.y1, other.y1) - max(self.y0, other.y0)
        if ix <= 0 or iy <= 0:
            return 0.0
        inter = ix * iy
        return inter / (self.width * self.height + other.width * other.height - inter)

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]


def union_bbox(boxes) -> BBox:
    """Tight union of a non-empty iterable of boxes."""
    boxes = list(boxes)
    if not boxes:
        raise ValueError("union of zero boxes")
    out = boxes[0]
    for b in boxes[1:]:
        out = out.union(b)
    return out


@dataclass(frozen=True)
class Token:
    """A whitespace-delimited text unit with geometry and font attributes."""

    text: str
    bbox: BBox
    font_size: float
    bold: bool = False
    italic: bool = False
    line_id: int = -1
    block_id: int = -1

    def __post_init__(self):
        if not self.text or any(c.isspace() for c in self.text):
            raise ValueError(f"token text must be non-empty without whitespace: {self.text!r}")
        if self.font_size <= 0:
            raise ValueError(f"font_size must be positive: {self.font_size}")


@dataclass(frozen=True)
class Annotation:
    """A labeled token span; bbox is the tight union of the member token boxes."""

    label: Label
    token_indices: tuple[int, ...]
    bbox: BBox

    def __post_init__(self):
        if not self.token_indices:
            raise ValueError("annotation with no tokens")
        if list(self.token_indices) != sorted(self.token_indices):
            raise ValueError("annotation token indices must be sorted")

    @staticmethod
    def from_tokens(label: Label, indices, tokens) -> "Annotation":
        idx = tuple(sorted(indices))
        box = union_bbox(tokens[i].bbox for i in idx)
        return Annotation(label, idx, box)


@dataclass(frozen=True)
class MetadataRecord:
    """Field strings for the nine foreground classes; absent fields are None."""

    title: str | None = None
    abstract: str | None = None
    authors: str | None = None
    email: str | None = None
    address: str | None = None
    date: str | None = None
    journal: str | None = None
    affiliation: str | None = None
    doi: str | None = None

    FIELD_FOR_LABEL = {
        Label.TITLE: "title",
        Label.ABSTRACT: "abstract",
        Label.AUTHORS: "authors",
        Label.EMAIL: "email",
        Label.ADDRESS: "address",
        Label.DATE: "date",
        Label.JOURNAL: "journal",
        Label.AFFILIATION: "affiliation",
        Label.DOI: "doi",
    }

    def __post_init__(self):
        for name in self.FIELD_FOR_LABEL.values():
            v = getattr(self, name)
            if v is not None and not v.strip():
                raise ValueError(f"metadata field {name} present but empty")

    def get(self, label: Label) -> str | None:
        return getattr(self, self.FIELD_FOR_LABEL[label])

    def present_labels(self) -> list[Label]:
        return [l for l in METADATA_LABELS if self.get(l) is not None]

    def to_dict(self) -> dict:
        return {
            name: getattr(self, name)
            for name in self.FIELD_FOR_LABEL.values()
            if getattr(self, name) is not None
        }

    @staticmethod
    def from_dict(d: dict) -> "MetadataRecord":
        known = set(MetadataRecord.FIELD_FOR_LABEL.values())
        return MetadataRecord(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True, eq=False)
class Page:
    """First page of a document: size, optional grayscale raster and tokens."""

    width: float
    height: float
    tokens: tuple[Token, ...] = ()
    raster: np.ndarray | None = None

    def __eq__(self, other):
        if not isinstance(other, Page):
            return NotImplemented
        if (self.width, self.height, self.tokens) != (other.width, other.height, other.tokens):
            return False
        if (self.raster is None) != (other.raster is None):
            return False
        return self.raster is None or np.array_equal(self.raster, other.raster)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("page size must be positive")
        eps = 1e-6
        for t in self.tokens:
            b = t.bbox
            if b.x0 < -eps or b.y0 < -eps or b.x1 > self.width + eps or b.y1 > self.height + eps:
                raise ValueError(f"token bbox {b} outside page {self.width}x{self.height}")
        if self.raster is not None:
            r = np.asarray(self.raster)
            if r.ndim != 2 or r.dtype != np.uint8:
                raise ValueError("raster must be a 2-D uint8 array")
            page_aspect = self.height / self.width
            raster_aspect = r.shape[0] / r.shape[1]
            if abs(raster_aspect - page_aspect) > 0.01 * page_aspect:
                raise ValueError(
                    f"raster aspect {raster_aspect:.4f} does not match page aspect {page_aspect:.4f}"
                )

    @property
    def median_font_size(self) -> float:
        if not self.tokens:
            return 0.0
        return float(np.median([t.font_size for t in self.tokens]))


@dataclass(frozen=True)
class Document:
    """One corpus instance: a page plus ground-truth annotations and metadata.

    ``truncated`` records labels whose text overflowed its layout region at
    synthesis time; it is serialized only when non-empty.
    """

    id: str
    page: Page
    annotations: tuple[Annotation, ...] = ()
    metadata: MetadataRecord | None = None
    truncated: tuple[str, ...] = ()

    def __post_init__(self):
        n = len(self.page.tokens)
        seen: set[int] = set()
        for ann in self.annotations:
            for i in ann.token_indices:
                if not (0 <= i < n):
                    raise ValueError(f"annotation index {i} out of range for {n} tokens")
                if i in seen:
                    raise ValueError(f"token {i} appears in more than one annotation")
                seen.add(i)
            tight = union_bbox(self.page.tokens[i].bbox for i in ann.token_indices)
            if tight != ann.bbox:
                raise ValueError(f"annotation bbox {ann.bbox} is not the tight union {tight}")

    def token_labels(self) -> list[Label]:
        """Gold label per token; tokens outside every annotation are OTHER."""
        out = [Label.OTHER] * len(self.page.tokens)
        for ann in self.annotations:
            for i in ann.token_indices:
                out[i] = ann.label
        return out


# ---------------------------------------------------------------------------
# Token grouping
# ---------------------------------------------------------------------------

#: Same line when vertical centers differ by less than this multiple of the
#: page median font size.
LINE_CENTER_FACTOR = 0.5
#: Consecutive lines merge into a block below this multiple of the median
#: line height, provided they overlap horizontally by more than this ratio.
BLOCK_GAP_FACTOR = 1.5
BLOCK_OVERLAP_RATIO = 0.30


def group_into_lines(tokens, center_factor: float = LINE_CENTER_FACTOR) -> list[Token]:
    """Assign dense line ids by chaining tokens with close vertical centers.

    Tokens are sorted by (y-center, x0) first, so the result does not depend
    on input order. Within a line, tokens are ordered by x0.
    """
    if not tokens:
        return []
    med_fs = float(np.median([t.font_size for t in tokens]))
    threshold = center_factor * med_fs

    def y_center(t: Token) -> float:
        return (t.bbox.y0 + t.bbox.y1) / 2.0

    ordered = sorted(tokens, key=lambda t: (y_center(t), t.bbox.x0))
    line_of: list[int] = [0]
    for prev, cur in zip(ordered, ordered[1:]):
        if y_center(cur) - y_center(prev) < threshold:
            line_of.append(line_of[-1])
        else:
            line_of.append(line_of[-1] + 1)

    lines: dict[int, list[Token]] = {}
    for t, lid in zip(ordered, line_of):
        lines.setdefault(lid, []).append(t)
    out: list[Token] = []
    for lid in sorted(lines):
        members = sorted(lines[lid], key=lambda t: t.bbox.x0)
        out.extend(replace(t, line_id=lid) for t in members)
    return out


def group_into_blocks(
    tokens,
    gap_factor: float = BLOCK_GAP_FACTOR,
    overlap_ratio: float = BLOCK_OVERLAP_RATIO,
) -> list[Token]:
    """Assign block ids by merging vertically adjacent, overlapping lines."""
    if not tokens:
        return []
    if any(t.line_id < 0 for t in tokens):
        raise ValueError("line ids must be assigned before block grouping")

    by_line: dict[int, list[Token]] = {}
    for t in tokens:
        by_line.setdefault(t.line_id, []).append(t)
    line_ids = sorted(by_line)
    line_boxes = {lid: union_bbox(t.bbox for t in by_line[lid]) for lid in line_ids}
    med_height = float(np.median([line_boxes[l].height for l in line_ids]))

    block_of = {line_ids[0]: 0}
    for prev, cur in zip(line_ids, line_ids[1:]):
        pb, cb = line_boxes[prev], line_boxes[cur]
        gap = cb.y0 - pb.y1
        overlap = min(pb.x1, cb.x1) - max(pb.x0, cb.x0)
        rel_overlap = overlap / min(pb.width, cb.width) if overlap > 0 else 0.0
        if gap < gap_factor * med_height and rel_overlap > overlap_ratio:
            block_of[cur] = block_of[prev]
        else:
            block_of[cur] = block_of[prev] + 1

    out = [replace(t, block_id=block_of[t.line_id]) for t in tokens]
    return out


def block_token_indices(tokens) -> dict[int, list[int]]:
    """Token indices per block id, in token order."""
    blocks: dict[int, list[int]] = {}
    for i, t in enumerate(tokens):
        blocks.setdefault(t.block_id, []).append(i)
    return blocks


def px_rect(bbox: BBox, sx: float, sy: float, h: int, w: int) -> tuple[int, int, int, int]:
    """Pixel rectangle (r0, r1, c0, c1) for a page box, never empty, inside h x w.

    Shared by the rasterizer and the embedding painter so both agree on which
    pixels a box owns.
    """
    c0 = int(round(bbox.x0 * sx))
    r0 = int(round(bbox.y0 * sy))
    c1 = int(round(bbox.x1 * sx))
    r1 = int(round(bbox.y1 * sy))
    c0 = min(max(c0, 0), w - 1)
    r0 = min(max(r0, 0), h - 1)
    c1 = min(max(c1, c0 + 1), w)
    r1 = min(max(r1, r0 + 1), h)
    return r0, r1, c0, c1


def raster_scales(page: Page) -> tuple[float, float]:
    """(sx, sy) pixel-per-point scales of a page's raster."""
    if page.raster is None:
        raise ValueError("page has no raster")
    h, w = page.raster.shape
    return w / page.width, h / page.height


# ---------------------------------------------------------------------------
# Raster I/O (binary PGM, 8-bit)
# ---------------------------------------------------------------------------


def write_pgm(path: str, raster: np.ndarray) -> None:
    arr = np.asarray(raster)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValueError("raster must be a 2-D uint8 array")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes(order="C"))


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":  # comment line
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(x) for x in fields)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return pixels.reshape(h, w).copy()


# ---------------------------------------------------------------------------
# Corpus serialization (JSON Lines)
# ---------------------------------------------------------------------------


def document_to_record(doc: Document, raster_path: str | None = None) -> dict:
    page: dict = {"width": doc.page.width, "height": doc.page.height}
    if raster_path is not None:
        page["raster_path"] = raster_path
    rec: dict = {
        "id": doc.id,
        "page": page,
        "tokens": [
            {
                "text": t.text,
                "bbox": t.bbox.as_list(),
                "font_size": t.font_size,
                "bold": t.bold,
                "italic": t.italic,
                "line_id": t.line_id,
                "block_id": t.block_id,
            }
            for t in doc.page.tokens
        ],
        "annotations": [
            {
                "label": a.label.value,
                "token_indices": list(a.token_indices),
                "bbox": a.bbox.as_list(),
            }
            for a in doc.annotations
        ],
        "metadata": doc.metadata.to_dict() if doc.metadata is not None else {},
    }
    if doc.truncated:
        rec["truncated"] = list(doc.truncated)
    return rec


def record_to_document(rec: dict, base_dir: str | None = None) -> Document:
    page_rec = rec["page"]
    raster = None
    raster_path = page_rec.get("raster_path")
    if raster_path is not None:
        full = raster_path if base_dir is None else os.path.join(base_dir, raster_path)
        raster = read_pgm(full)
    tokens = tuple(
        Token(
            text=t["text"],
            bbox=BBox(*t["bbox"]),
            font_size=t["font_size"],
            bold=t["bold"],
            italic=t["italic"],
            line_id=t["line_id"],
            block_id=t["block_id"],
        )
        for t in rec["tokens"]
    )
    page = Page(width=page_rec["width"], height=page_rec["height"], tokens=tokens, raster=raster)
    annotations = tuple(
        Annotation(
            label=LABEL_BY_NAME[a["label"]],
            token_indices=tuple(a["token_indices"]),
            bbox=BBox(*a["bbox"]),
        )
        for a in rec["annotations"]
    )
    metadata = MetadataRecord.from_dict(rec.get("metadata") or {}) if rec.get("metadata") else None
    return Document(
        id=rec["id"],
        page=page,
        annotations=annotations,
        metadata=metadata,
        truncated=tuple(rec.get("truncated", ())),
    )


def write_corpus(path: str, docs, raster_dir: str | None = None) -> None:
    """Write documents as JSON Lines; rasters go to ``raster_dir`` as PGM files.

    ``raster_path`` entries are stored relative to the corpus file's directory.
    """
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as f:
        for doc in docs:
            raster_rel = None
            if doc.page.raster is not None:
                if raster_dir is None:
                    raise ValueError("documents carry rasters but no raster_dir was given")
                os.makedirs(raster_dir, exist_ok=True)
                raster_file = os.path.join(raster_dir, f"{doc.id}.pgm")
                write_pgm(raster_file, doc.page.raster)
                raster_rel = os.path.relpath(raster_file, base)
            f.write(json.dumps(document_to_record(doc, raster_rel), ensure_ascii=False))
            f.write("\n")


def read_corpus(path: str) -> list[Document]:
    base = os.path.dirname(os.path.abspath(path))
    docs = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                from .errors import FormatError

                raise FormatError(f"invalid JSON in corpus: {e}", line=lineno) from e
            docs.append(record_to_document(rec, base))
    return docs

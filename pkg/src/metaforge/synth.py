"""Synthetic first-page generation with token-level ground truth.

Each template is an ordered list of labeled slots (page-fraction regions with
typography). Sampled field strings are wrapped into their slots as filled
rectangles; every emitted token belongs to exactly one annotation, body
filler is labeled Other.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .align import levenshtein_similarity, normalize_text
from .core import (
    Annotation,
    BBox,
    Document,
    Label,
    LABEL_BY_NAME,
    MetadataRecord,
    Page,
    Token,
    group_into_blocks,
    group_into_lines,
    px_rect,
)
from .parallel import run_tasks

#: Width of one character and the inter-word gap, in units of the font size.
CHAR_WIDTH = 0.6
WORD_GAP = 0.12
#: Token boxes span the full line advance so stacked lines leave no white rows.
LINE_ADVANCE = 1.2

INK_BOLD = 20
INK_REGULAR = 70
BACKGROUND = 255


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    digest = hashlib.blake2b("|".join(str(p) for p in parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(digest.digest(), "big") >> 1


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Slot:
    """One labeled region of a template; region coordinates are page fractions."""

    label: Label
    region: tuple[float, float, float, float]
    font_size: float
    bold: bool = False
    italic: bool = False
    align: str = "left"

    def __post_init__(self):
        x0, y0, x1, y1 = self.region
        if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
            raise ValueError(f"slot region out of page: {self.region}")
        if self.align not in ("left", "center", "right"):
            raise ValueError(f"unknown alignment {self.align!r}")
        if self.font_size <= 0:
            raise ValueError("font size must be positive")


@dataclass(frozen=True)
class Template:
    name: str
    slots: tuple[Slot, ...]
    page_width: float = 595.0
    page_height: float = 842.0
    jitter: float = 2.0  # maximum slot displacement, points

    def __post_init__(self):
        if not any(s.label is Label.TITLE for s in self.slots):
            raise ValueError(f"template {self.name} has no Title slot")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")
        # regions inflated by the jitter must stay disjoint, so no draw of the
        # jitter can make two slots overlap
        jx, jy = self.jitter / self.page_width, self.jitter / self.page_height
        boxes = []
        for s in self.slots:
            x0, y0, x1, y1 = s.region
            boxes.append((x0 - jx, y0 - jy, x1 + jx, y1 + jy))
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                a, b = boxes[i], boxes[j]
                if a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]:
                    raise ValueError(
                        f"template {self.name}: slots {i} and {j} may overlap after jitter"
                    )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "page_width": self.page_width,
            "page_height": self.page_height,
            "jitter": self.jitter,
            "slots": [
                {
                    "label": s.label.value,
                    "region": list(s.region),
                    "font_size": s.font_size,
                    "bold": s.bold,
                    "italic": s.italic,
                    "align": s.align,
                }
                for s in self.slots
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "Template":
        return Template(
            name=d["name"],
            page_width=d.get("page_width", 595.0),
            page_height=d.get("page_height", 842.0),
            jitter=d.get("jitter", 2.0),
            slots=tuple(
                Slot(
                    label=LABEL_BY_NAME[s["label"]],
                    region=tuple(s["region"]),
                    font_size=s["font_size"],
                    bold=s.get("bold", False),
                    italic=s.get("italic", False),
                    align=s.get("align", "left"),
                )
                for s in d["slots"]
            ),
        )


def load_templates_dir(directory: str) -> list[Template]:
    templates = []
    for name in sorted(os.listdir(directory)):
        if name.endswith(".json"):
            with open(os.path.join(directory, name), "r", encoding="utf-8") as f:
                templates.append(Template.from_dict(json.load(f)))
    if not templates:
        raise ValueError(f"no template files in {directory}")
    return templates


def save_templates_dir(directory: str, templates) -> None:
    os.makedirs(directory, exist_ok=True)
    for t in templates:
        with open(os.path.join(directory, f"{t.name}.json"), "w", encoding="utf-8") as f:
            json.dump(t.to_dict(), f, ensure_ascii=False, indent=1)


# ---------------------------------------------------------------------------
# Field sampling
# ---------------------------------------------------------------------------

TITLE_WORDS = (
    "Analysis Methods Systems Learning Networks Approach Evaluation Framework "
    "Models Detection Classification Extraction Documents Knowledge Information "
    "Retrieval Semantic Structures Patterns Robust Comparative Empirical"
).split()

ABSTRACT_WORDS = (
    "lorem ipsum dolor sit amet consectetur adipiscing elit sed eiusmod tempor "
    "incididunt labore dolore magna aliqua enim minim veniam quis nostrud "
    "exercitation ullamco laboris nisi aliquip commodo consequat"
).split()

BODY_WORDS = (
    "duis aute irure reprehenderit voluptate velit esse cillum fugiat nulla "
    "pariatur excepteur sint occaecat cupidatat proident sunt culpa officia "
    "deserunt mollit anim laborum perspiciatis unde omnis iste natus error"
).split()

FIRST_NAMES = (
    "Anna Boris Clara David Elena Felix Greta Hugo Ines Jonas Katrin Lukas "
    "Maria Nils Olga Peter Rosa Stefan Tanja Viktor"
).split()

LAST_NAMES = (
    "Abel Becker Clauss Dietrich Engel Fischer Gruber Hartmann Ibsen Jansen "
    "Keller Lang Moser Neumann Otte Pohl Richter Schmid Thiel Weber"
).split()

EMAIL_DOMAINS = "uni-example inst-research lab-docs sci-center doc-archive".split()
EMAIL_TLDS = "de org edu net".split()

STREET_WORDS = "Hauptstrasse Bahnhofweg Parkallee Ringstrasse Gartenweg Schulgasse".split()
CITIES = "Berlin Cologne Munich Hamburg Leipzig Bonn Dresden Aachen Potsdam Essen".split()

MONTHS = (
    "January February March April May June July August September October "
    "November December"
).split()

JOURNAL_WORDS = (
    "Applied Social Computational Empirical Theoretical Quantitative Science "
    "Studies Research Data Policy Society"
).split()

TOPICS = "Technology Informatics Statistics Economics Sociology Linguistics".split()


@dataclass(frozen=True)
class FieldSampler:
    """Per-label string generators over fixed word lists.

    Every label draws from its own vocabulary so synthetic corpora stay
    separable for content-based models.
    """

    title_words: tuple[str, ...] = tuple(TITLE_WORDS)
    abstract_words: tuple[str, ...] = tuple(ABSTRACT_WORDS)
    body_words: tuple[str, ...] = tuple(BODY_WORDS)
    abstract_length: tuple[int, int] = (30, 55)

    def _choice(self, rng, seq):
        return seq[int(rng.integers(0, len(seq)))]

    def title(self, rng) -> str:
        n = int(rng.integers(4, 9))
        return " ".join(self._choice(rng, self.title_words) for _ in range(n))

    def abstract(self, rng) -> str:
        n = int(rng.integers(*self.abstract_length))
        return " ".join(self._choice(rng, self.abstract_words) for _ in range(n))

    def body(self, rng, lo: int = 40, hi: int = 70) -> str:
        n = int(rng.integers(lo, hi))
        return " ".join(self._choice(rng, self.body_words) for _ in range(n))

    def authors(self, rng) -> str:
        n = int(rng.integers(1, 4))
        names = [
            f"{self._choice(rng, FIRST_NAMES)} {self._choice(rng, LAST_NAMES)}"
            for _ in range(n)
        ]
        return ", ".join(names)

    def email(self, rng) -> str:
        # label prefix mirrors how first pages print addresses and gives
        # content-only models a frequent anchor next to the unique string
        first = self._choice(rng, FIRST_NAMES).lower()
        last = self._choice(rng, LAST_NAMES).lower()
        addr = f"{first}.{last}@{self._choice(rng, EMAIL_DOMAINS)}.{self._choice(rng, EMAIL_TLDS)}"
        return f"Email: {addr}"

    def address(self, rng) -> str:
        return (
            f"{int(rng.integers(1, 99))} {self._choice(rng, STREET_WORDS)}, "
            f"{self._choice(rng, CITIES)}"
        )

    def date(self, rng) -> str:
        month = self._choice(rng, MONTHS)
        day = int(rng.integers(1, 29))
        year = int(rng.integers(1985, 2025))
        style = int(rng.integers(0, 3))
        if style == 0:
            return f"{day} {month} {year}"
        if style == 1:
            return f"{month} {day}, {year}"
        return f"Published: {month} {year}"

    def journal(self, rng) -> str:
        a = self._choice(rng, JOURNAL_WORDS)
        b = self._choice(rng, JOURNAL_WORDS)
        style = int(rng.integers(0, 3))
        if style == 0:
            return f"Journal of {a} {b}"
        if style == 1:
            return f"{a} {b} Review"
        return f"Annals of {a} {b}"

    def affiliation(self, rng) -> str:
        style = int(rng.integers(0, 3))
        city = self._choice(rng, CITIES)
        topic = self._choice(rng, TOPICS)
        if style == 0:
            return f"University of {city}"
        if style == 1:
            return f"{city} Institute of {topic}"
        return f"Institute for {topic} {city}"

    def doi(self, rng) -> str:
        prefix = int(rng.integers(1000, 99999))
        tail = "".join(self._choice(rng, "abcdefghijklmnopqrstuvwxyz") for _ in range(4))
        return f"DOI: 10.{prefix}/{tail}.{int(rng.integers(100, 9999))}"


def sample_metadata(sampler: FieldSampler, rng_seed: int) -> MetadataRecord:
    """All nine fields, deterministic for a given seed."""
    rng = np.random.default_rng(rng_seed)
    return MetadataRecord(
        title=sampler.title(rng),
        abstract=sampler.abstract(rng),
        authors=sampler.authors(rng),
        email=sampler.email(rng),
        address=sampler.address(rng),
        date=sampler.date(rng),
        journal=sampler.journal(rng),
        affiliation=sampler.affiliation(rng),
        doi=sampler.doi(rng),
    )


# ---------------------------------------------------------------------------
# Layout
# ---------------------------------------------------------------------------


def _balanced_partition(widths: list[float], gap: float, k: int) -> list[int]:
    """Split widths into k contiguous runs minimizing the widest line.

    Returns the run lengths. Classic linear-partition dynamic program; n and k
    are tiny here.
    """
    n = len(widths)
    prefix = [0.0]
    for w in widths:
        prefix.append(prefix[-1] + w + gap)

    def line_width(i, j):  # tokens i..j-1
        return prefix[j] - prefix[i] - gap

    INF = float("inf")
    cost = [[INF] * (k + 1) for _ in range(n + 1)]
    split = [[0] * (k + 1) for _ in range(n + 1)]
    cost[0][0] = 0.0
    for j in range(1, k + 1):
        for i in range(1, n + 1):
            for p in range(j - 1, i):
                c = max(cost[p][j - 1], line_width(p, i))
                if c < cost[i][j]:
                    cost[i][j] = c
                    split[i][j] = p
    runs = []
    i = n
    for j in range(k, 0, -1):
        p = split[i][j]
        runs.append(i - p)
        i = p
    runs.reverse()
    return runs


def _wrap_slot(words: list[str], font_size: float, region_width: float) -> list[list[str]]:
    """Greedy line count, then balanced fill."""
    gap = WORD_GAP * font_size
    widths = [CHAR_WIDTH * font_size * len(w) for w in words]
    lines = 1
    x = 0.0
    for w in widths:
        if x > 0 and x + gap + w > region_width:
            lines += 1
            x = w
        else:
            x = w if x == 0 else x + gap + w
    runs = _balanced_partition(widths, gap, lines)
    out = []
    i = 0
    for r in runs:
        out.append(words[i : i + r])
        i += r
    return out


def layout_page(template: Template, record: MetadataRecord, rng_seed: int) -> Document:
    """Wrap each slot's text into its (jittered) region; no raster yet.

    Body filler for Other slots is drawn from the seed. Text that overflows a
    region bottom is truncated and the label recorded on the document.
    """
    rng = np.random.default_rng(rng_seed)
    sampler = FieldSampler()
    W, H = template.page_width, template.page_height

    emitted: list[Token] = []
    slot_of_pos: dict[tuple[float, float], int] = {}
    truncated: list[str] = []

    for slot_idx, slot in enumerate(template.slots):
        if slot.label is Label.OTHER:
            text = sampler.body(rng)
        else:
            text = record.get(slot.label)
            if text is None:
                continue
        dx = float(rng.uniform(-template.jitter, template.jitter))
        dy = float(rng.uniform(-template.jitter, template.jitter))
        x0 = slot.region[0] * W + dx
        y0 = slot.region[1] * H + dy
        x1 = slot.region[2] * W + dx
        y1 = slot.region[3] * H + dy

        fs = slot.font_size
        line_h = LINE_ADVANCE * fs
        gap = WORD_GAP * fs
        words = text.split()
        lines = _wrap_slot(words, fs, x1 - x0)

        # justify every line of a multi-line wrap to the widest line, like
        # display text set flush to a measure; keeps annotation boxes dense
        def natural(ws):
            return sum(CHAR_WIDTH * fs * len(w) for w in ws) + gap * (len(ws) - 1)

        target = max(natural(ws) for ws in lines) if len(lines) > 1 else None

        y = y0
        cut = False
        for line_words in lines:
            if y + line_h > y1 + 1e-9:
                cut = True
                break
            token_total = sum(CHAR_WIDTH * fs * len(w) for w in line_words)
            stretch = 1.0
            if target is not None and token_total > 0:
                stretch = (target - gap * (len(line_words) - 1)) / token_total
            line_width = token_total * stretch + gap * (len(line_words) - 1)
            if slot.align == "center":
                x = x0 + max(0.0, (x1 - x0 - line_width) / 2.0)
            elif slot.align == "right":
                x = x0 + max(0.0, x1 - x0 - line_width)
            else:
                x = x0
            for w in line_words:
                width = CHAR_WIDTH * fs * len(w) * stretch
                tok = Token(
                    text=w,
                    bbox=BBox(x, y, x + width, y + line_h),
                    font_size=fs,
                    bold=slot.bold,
                    italic=slot.italic,
                )
                slot_of_pos[(tok.bbox.x0, tok.bbox.y0)] = slot_idx
                emitted.append(tok)
                x += width + gap
            y += line_h
        if cut and slot.label.value not in truncated:
            truncated.append(slot.label.value)

    tokens = group_into_blocks(group_into_lines(emitted))
    slot_members: dict[int, list[int]] = {}
    for i, t in enumerate(tokens):
        slot_members.setdefault(slot_of_pos[(t.bbox.x0, t.bbox.y0)], []).append(i)

    annotations = tuple(
        Annotation.from_tokens(template.slots[slot_idx].label, idx, tokens)
        for slot_idx, idx in sorted(slot_members.items())
    )
    page = Page(width=W, height=H, tokens=tuple(tokens))
    return Document(
        id="", page=page, annotations=annotations,
        metadata=record, truncated=tuple(truncated),
    )


def rasterize_page(doc: Document, dpi: int) -> np.ndarray:
    """White page with one filled rectangle per token; bold ink is darker.

    Height derives from the pixel width so the raster aspect tracks the page
    aspect even at very low resolutions.
    """
    if dpi <= 0:
        raise ValueError(f"dpi must be positive, got {dpi}")
    page = doc.page
    w = max(1, round(page.width * dpi / 72.0))
    h = max(1, round(w * page.height / page.width))
    sx, sy = w / page.width, h / page.height
    raster = np.full((h, w), BACKGROUND, dtype=np.uint8)
    for t in page.tokens:
        r0, r1, c0, c1 = px_rect(t.bbox, sx, sy, h, w)
        raster[r0:r1, c0:c1] = INK_BOLD if t.bold else INK_REGULAR
    return raster


def with_raster(doc: Document, dpi: int) -> Document:
    raster = rasterize_page(doc, dpi)
    page = Page(
        width=doc.page.width, height=doc.page.height, tokens=doc.page.tokens, raster=raster
    )
    return Document(
        id=doc.id, page=page, annotations=doc.annotations,
        metadata=doc.metadata, truncated=doc.truncated,
    )


# ---------------------------------------------------------------------------
# Similarity-based block labeling (dataset construction rule)
# ---------------------------------------------------------------------------


def assign_blocks_by_similarity(
    block_texts: list[str], record: MetadataRecord, threshold: float = 0.95
) -> list[Label]:
    """Label each block by its most similar metadata field, if close enough.

    The winning label must reach ``threshold`` normalized Levenshtein
    similarity and be the argmax across fields; ties break by label order.
    Everything else is Other.
    """
    fields = [
        (label, normalize_text(record.get(label)))
        for label in Label
        if label is not Label.OTHER and record.get(label) is not None
    ]
    out = []
    for text in block_texts:
        norm = normalize_text(text)
        best_label, best_sim = Label.OTHER, -1.0
        for label, value in fields:
            sim = levenshtein_similarity(norm, value)
            if sim > best_sim:
                best_label, best_sim = label, sim
        out.append(best_label if best_sim >= threshold else Label.OTHER)
    return out


def block_texts(doc: Document) -> list[str]:
    texts: dict[int, list[str]] = {}
    for t in doc.page.tokens:
        texts.setdefault(t.block_id, []).append(t.text)
    return [" ".join(texts[b]) for b in sorted(texts)]


# ---------------------------------------------------------------------------
# Noise injection
# ---------------------------------------------------------------------------

_ALPHABET = "abcdefghijklmnopqrstuvwxyz"


def corrupt_document(
    doc: Document,
    rng_seed: int,
    bbox_jitter: float = 0.0,
    char_corruption: float = 0.0,
    dpi: int = 0,
) -> Document:
    """Layout noise: independent token box shifts plus character typos.

    ``char_corruption`` is the per-token probability of one substituted
    character. Tokens are regrouped and annotations rebuilt afterwards; with
    dpi > 0 the page is re-rasterized so the ink matches the new geometry.
    """
    rng = np.random.default_rng(rng_seed)
    page = doc.page
    new_tokens: list[Token] = []
    key_for_old: list[tuple[float, float]] = []
    for t in page.tokens:
        text = t.text
        if char_corruption > 0 and rng.random() < char_corruption:
            i = int(rng.integers(0, len(text)))
            text = text[:i] + _ALPHABET[int(rng.integers(0, 26))] + text[i + 1 :]
        b = t.bbox
        if bbox_jitter > 0:
            dx = float(rng.uniform(-bbox_jitter, bbox_jitter))
            dy = float(rng.uniform(-bbox_jitter, bbox_jitter))
            dx = min(max(dx, -b.x0), page.width - b.x1)
            dy = min(max(dy, -b.y0), page.height - b.y1)
            b = BBox(b.x0 + dx, b.y0 + dy, b.x1 + dx, b.y1 + dy)
        tok = Token(text=text, bbox=b, font_size=t.font_size, bold=t.bold, italic=t.italic)
        new_tokens.append(tok)
        key_for_old.append((b.x0, b.y0))

    grouped = group_into_blocks(group_into_lines(new_tokens))
    new_index = {(t.bbox.x0, t.bbox.y0): i for i, t in enumerate(grouped)}
    annotations = tuple(
        Annotation.from_tokens(
            ann.label, [new_index[key_for_old[i]] for i in ann.token_indices], grouped
        )
        for ann in doc.annotations
    )
    out = Document(
        id=doc.id,
        page=Page(width=page.width, height=page.height, tokens=tuple(grouped)),
        annotations=annotations,
        metadata=doc.metadata,
        truncated=doc.truncated,
    )
    return with_raster(out, dpi) if dpi > 0 else out


# ---------------------------------------------------------------------------
# Corpus synthesis
# ---------------------------------------------------------------------------


def _synth_one(task):
    templates, sampler, i, seed, dpi = task
    rng = np.random.default_rng(seed)
    template = templates[int(rng.integers(0, len(templates)))]
    record = sample_metadata(sampler, derive_seed(seed, "record"))
    doc = layout_page(template, record, derive_seed(seed, "layout"))
    doc = Document(
        id=f"synth-{i:05d}", page=doc.page, annotations=doc.annotations,
        metadata=doc.metadata, truncated=doc.truncated,
    )
    if dpi > 0:
        doc = with_raster(doc, dpi)
    return doc


def synthesize_corpus(
    templates,
    sampler: FieldSampler,
    n: int,
    master_seed: int,
    dpi: int = 8,
    jobs: int = 1,
) -> list[Document]:
    """n documents with per-document seeds derived from (master_seed, index).

    dpi=0 skips rasters. Each document depends only on its own derived seed,
    so generation parallelizes without changing any byte of the output.
    """
    if n < 1:
        raise ValueError(f"need at least one document, got n={n}")
    templates = list(templates)
    if not templates:
        raise ValueError("no templates")
    tasks = [(templates, sampler, i, derive_seed(master_seed, i), dpi) for i in range(n)]
    return run_tasks(_synth_one, tasks, jobs)

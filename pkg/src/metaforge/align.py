"""Corpus construction by aligning known metadata strings against page text.

Pipeline per document: fetch a bibliographic record through a gateway, then
locate each field in the extracted token stream by exact matching first and
sliding-window fuzzy matching second, grounding every hit to the union bbox
of the matched tokens.
"""

from __future__ import annotations

import json
import os
import re
import unicodedata
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass

import numpy as np

from .core import Annotation, BBox, Document, Label, MetadataRecord, union_bbox
from .errors import GatewayNotFound, GatewayUnavailable, MalformedResponse

#: Field matching order; earlier matches mask their tokens from later fields.
MATCH_ORDER = (
    Label.TITLE,
    Label.ABSTRACT,
    Label.AUTHORS,
    Label.JOURNAL,
    Label.AFFILIATION,
    Label.ADDRESS,
    Label.EMAIL,
    Label.DATE,
    Label.DOI,
)

DEFAULT_FIELD_THRESHOLD = 0.85
#: DOIs are structured identifiers; anything but an exact hit is a mismatch.
DOI_THRESHOLD = 1.0
#: Fuzzy windows may differ from the field token count by this much.
WINDOW_SLACK = 2

_HYPHEN_BREAK = re.compile(r"(?<=\w)[-­]\s*\n\s*(?=\w)")
_WHITESPACE_RUN = re.compile(r"\s+")


def normalize_text(s: str) -> str:
    """Canonical form: NFC, de-hyphenated line breaks, single spaces, stripped."""
    s = unicodedata.normalize("NFC", s)
    s = _HYPHEN_BREAK.sub("", s)
    s = _WHITESPACE_RUN.sub(" ", s)
    return s.strip()


def levenshtein_distance(a: str, b: str, cap: int | None = None) -> int:
    """Edit distance with unit costs; stops early once every path exceeds ``cap``.

    Row-at-a-time DP. The insertion recurrence cur[j] = min(cur[j], cur[j-1]+1)
    chains into cur[j] = min_i<=j (cur[i] + j - i), a prefix minimum of
    cur[i]-i, which numpy can accumulate without a Python inner loop.
    """
    if a == b:
        return 0
    la, lb = len(a), len(b)
    if la == 0 or lb == 0:
        return max(la, lb)
    if cap is not None and abs(la - lb) > cap:
        return cap + 1
    bs = np.frombuffer(b.encode("utf-32-le"), dtype=np.uint32)
    idx = np.arange(lb + 1, dtype=np.int64)
    prev = idx.copy()
    for i, ch in enumerate(a, start=1):
        cur = np.empty(lb + 1, dtype=np.int64)
        cur[0] = i
        np.minimum(prev[:-1] + (bs != ord(ch)), prev[1:] + 1, out=cur[1:])
        cur = np.minimum.accumulate(cur - idx) + idx
        prev = cur
        if cap is not None and prev.min() > cap:
            return cap + 1
    return int(prev[lb])


def levenshtein_similarity(a: str, b: str) -> float:
    """1 - dist/max(len); two empty strings are identical (1.0)."""
    if not a and not b:
        return 1.0
    return 1.0 - levenshtein_distance(a, b) / max(len(a), len(b))


@dataclass(frozen=True)
class GatewayRecord:
    """Bibliographic record returned by a metadata gateway."""

    doi: str
    metadata: MetadataRecord
    pdf_url: str | None = None

    def __post_init__(self):
        if not self.doi:
            raise ValueError("gateway record without DOI")


class MetadataGateway:
    """DOI-keyed lookup of bibliographic records."""

    def fetch(self, doi: str) -> GatewayRecord:
        raise NotImplementedError


class FixtureGateway(MetadataGateway):
    """Reads records from local JSON files named by the percent-encoded DOI."""

    def __init__(self, directory: str):
        self.directory = directory

    def _path(self, doi: str) -> str:
        return os.path.join(self.directory, urllib.parse.quote(doi, safe="") + ".json")

    def fetch(self, doi: str) -> GatewayRecord:
        path = self._path(doi)
        if not os.path.exists(path):
            raise GatewayNotFound(doi)
        with open(path, "r", encoding="utf-8") as f:
            try:
                rec = json.load(f)
            except json.JSONDecodeError as e:
                raise MalformedResponse(f"{path}: {e}") from e
        return _record_from_json(rec, doi)

    def store(self, record: GatewayRecord) -> None:
        os.makedirs(self.directory, exist_ok=True)
        payload = {"doi": record.doi, "metadata": record.metadata.to_dict()}
        if record.pdf_url is not None:
            payload["pdf_url"] = record.pdf_url
        with open(self._path(record.doi), "w", encoding="utf-8") as f:
            json.dump(payload, f, ensure_ascii=False)


class HttpGateway(MetadataGateway):
    """Fetches records from an HTTP endpoint serving the fixture JSON shape.

    ``GET <base_url>/<percent-encoded-doi>`` must answer with the same JSON
    document a fixture file would contain. Timeout comes from
    ``METAFORGE_GATEWAY_TIMEOUT_MS`` (default 5000).
    """

    def __init__(self, base_url: str, timeout_ms: int | None = None):
        self.base_url = base_url.rstrip("/")
        if timeout_ms is None:
            timeout_ms = int(os.environ.get("METAFORGE_GATEWAY_TIMEOUT_MS", "5000"))
        self.timeout_s = timeout_ms / 1000.0

    def fetch(self, doi: str) -> GatewayRecord:
        url = f"{self.base_url}/{urllib.parse.quote(doi, safe='')}"
        try:
            with urllib.request.urlopen(url, timeout=self.timeout_s) as resp:
                body = resp.read()
        except urllib.error.HTTPError as e:
            if e.code == 404:
                raise GatewayNotFound(doi) from e
            raise GatewayUnavailable(f"{url}: HTTP {e.code}") from e
        except (urllib.error.URLError, OSError) as e:
            raise GatewayUnavailable(f"{url}: {e}") from e
        try:
            rec = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise MalformedResponse(f"{url}: {e}") from e
        return _record_from_json(rec, doi)


def _record_from_json(rec, doi: str) -> GatewayRecord:
    if not isinstance(rec, dict) or "metadata" not in rec or not isinstance(rec["metadata"], dict):
        raise MalformedResponse(f"record for {doi} lacks a metadata object")
    try:
        metadata = MetadataRecord.from_dict(rec["metadata"])
    except (TypeError, ValueError) as e:
        raise MalformedResponse(f"record for {doi}: {e}") from e
    return GatewayRecord(doi=rec.get("doi", doi), metadata=metadata, pdf_url=rec.get("pdf_url"))


def fetch_metadata(doi: str, gateway: MetadataGateway) -> GatewayRecord:
    if not doi or not doi.strip():
        raise ValueError("empty DOI")
    return gateway.fetch(doi.strip())


# ---------------------------------------------------------------------------
# Span search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MatchResult:
    """A located field: token span [start, end), similarity and match kind."""

    label: Label
    token_span: tuple[int, int]
    similarity: float
    kind: str  # "exact" | "fuzzy"

    def __post_init__(self):
        if self.token_span[1] <= self.token_span[0]:
            raise ValueError("empty match span")
        if self.kind == "exact" and self.similarity != 1.0:
            raise ValueError("exact match must have similarity 1.0")


def find_field_span(
    token_texts: list[str],
    field: str,
    threshold: float,
    label: Label = Label.OTHER,
    mask: list[bool] | None = None,
) -> MatchResult | None:
    """Locate ``field`` in a token stream, exact match first, fuzzy second.

    ``token_texts`` and ``field`` must be normalized the same way. Fuzzy
    search slides windows of the field's token count +/- WINDOW_SLACK over the
    stream and keeps the leftmost window maximizing Levenshtein similarity of
    the joined text, provided it reaches ``threshold``. Windows containing a
    masked token are skipped.
    """
    field_tokens = field.split()
    if not field_tokens or not token_texts:
        return None
    n = len(token_texts)
    k = len(field_tokens)
    usable = mask if mask is not None else [True] * n

    # exact token-sequence match, leftmost
    for start in range(0, n - k + 1):
        if token_texts[start : start + k] == field_tokens and all(usable[start : start + k]):
            return MatchResult(label, (start, start + k), 1.0, "exact")

    best: tuple[float, int, int] | None = None  # (similarity, start, width)
    flen = len(field)
    for start in range(n):
        if not usable[start]:
            continue
        for width in range(max(1, k - WINDOW_SLACK), k + WINDOW_SLACK + 1):
            end = start + width
            if end > n or not all(usable[start:end]):
                break
            joined = " ".join(token_texts[start:end])
            # length gap alone bounds similarity from above
            bound = 1.0 - abs(len(joined) - flen) / max(len(joined), flen, 1)
            floor = best[0] if best is not None else threshold
            if bound < floor or (best is not None and bound <= best[0]):
                continue
            cap = int(max(len(joined), flen) * (1.0 - floor)) + 1
            if cap < 0:
                continue
            dist = levenshtein_distance(joined, field, cap=cap)
            sim = 1.0 - dist / max(len(joined), flen)
            if sim >= threshold and (best is None or sim > best[0]):
                best = (sim, start, width)
    if best is None:
        return None
    sim, start, width = best
    return MatchResult(label, (start, start + width), sim, "fuzzy")


def map_span_to_bbox(span: tuple[int, int], tokens) -> BBox:
    """Tight union of the member token boxes."""
    start, end = span
    if end <= start:
        raise ValueError("empty span has no bbox")
    return union_bbox(tokens[i].bbox for i in range(start, end))


# ---------------------------------------------------------------------------
# Record construction
# ---------------------------------------------------------------------------


@dataclass
class AlignmentResult:
    """Aligned document plus the per-field report."""

    document: Document
    matches: list[MatchResult]
    unmatched: list[Label]

    @property
    def matched_labels(self) -> list[Label]:
        return [m.label for m in self.matches]


def build_record(
    doc: Document,
    gateway_record: GatewayRecord,
    thresholds: dict[Label, float] | None = None,
) -> AlignmentResult:
    """Annotate ``doc`` with every gateway field that can be located in its text.

    Fields are matched in MATCH_ORDER; each match masks its tokens so later
    fields cannot claim them. Fields that are absent from the record or
    cannot be located are reported in ``unmatched``.
    """
    thresholds = thresholds or {}
    tokens = doc.page.tokens
    texts = [normalize_text(t.text) for t in tokens]
    usable = [True] * len(tokens)

    matches: list[MatchResult] = []
    unmatched: list[Label] = []
    for label in MATCH_ORDER:
        value = gateway_record.metadata.get(label)
        if value is None:
            continue
        default = DOI_THRESHOLD if label is Label.DOI else DEFAULT_FIELD_THRESHOLD
        threshold = thresholds.get(label, default)
        m = find_field_span(texts, normalize_text(value), threshold, label=label, mask=usable)
        if m is None:
            unmatched.append(label)
            continue
        matches.append(m)
        for i in range(*m.token_span):
            usable[i] = False

    annotations = tuple(
        Annotation(
            label=m.label,
            token_indices=tuple(range(*m.token_span)),
            bbox=map_span_to_bbox(m.token_span, tokens),
        )
        for m in matches
    )
    aligned = Document(
        id=doc.id,
        page=doc.page,
        annotations=annotations,
        metadata=gateway_record.metadata,
    )
    return AlignmentResult(document=aligned, matches=matches, unmatched=unmatched)

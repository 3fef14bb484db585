"""Handcrafted line and word features for the two CRF layers.

Features are emitted as name -> value dicts. Categorical information becomes
one-hot names ("cap:init", "align:center"); a fixed set of names carries
real values that get min-max scaled to [0, 1] per corpus.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .core import Page, Token

YEAR_RE = re.compile(r"(1[89]|20)\d{2}")
EMAIL_RE = re.compile(r"[^@\s]+@[^@\s]+\.[^@\s]+")
DOI_RE = re.compile(r"10\.\d{4,9}/\S+")

#: Feature names whose values are real-valued and corpus-scaled.
REAL_FEATURES = frozenset(
    {
        "relsize",
        "bold_ratio",
        "italic_ratio",
        "cap_ratio",
        "ypos",
        "tokens",
        "gap_above",
        "gap_below",
    }
)

_GAP_CAP = 5.0


def capitalization_class(text: str) -> str:
    letters = [c for c in text if c.isalpha()]
    if not letters:
        return "none"
    if all(c.islower() for c in letters):
        return "lower"
    if all(c.isupper() for c in letters):
        return "caps" if len(letters) > 1 else "init"
    if text[0].isupper() and all(c.islower() for c in letters[1:]):
        return "init"
    return "mixed"


def length_bucket(n: int) -> str:
    if n <= 1:
        return "1"
    if n <= 4:
        return "2-4"
    if n <= 8:
        return "5-8"
    return "9+"


def font_ratio_bucket(ratio: float) -> str:
    """Font size relative to the page median, quantized to 0.05 steps."""
    return f"{round(ratio / 0.05) * 0.05:.2f}"


def word_features(
    token: Token,
    prev_token: Token | None,
    next_token: Token | None,
    page: Page,
) -> dict[str, float]:
    text = token.text
    feats: dict[str, float] = {}
    feats[f"len:{length_bucket(len(text))}"] = 1.0
    if YEAR_RE.search(text):
        feats["year"] = 1.0
    if any(c.isdigit() for c in text):
        feats["digit"] = 1.0
    if any(not c.isalnum() for c in text):
        feats["special"] = 1.0
    feats[f"cap:{capitalization_class(text)}"] = 1.0
    if EMAIL_RE.search(text):
        feats["email"] = 1.0
    if DOI_RE.search(text):
        feats["doi"] = 1.0

    feats[f"prev_cap:{capitalization_class(prev_token.text) if prev_token else 'bos'}"] = 1.0
    feats[f"next_cap:{capitalization_class(next_token.text) if next_token else 'eos'}"] = 1.0
    if prev_token is not None and YEAR_RE.search(prev_token.text):
        feats["prev_year"] = 1.0
    if next_token is not None and YEAR_RE.search(next_token.text):
        feats["next_year"] = 1.0

    if token.bold:
        feats["bold"] = 1.0
    if token.italic:
        feats["italic"] = 1.0
    med = page.median_font_size or token.font_size
    feats[f"fsize:{font_ratio_bucket(token.font_size / med)}"] = 1.0
    y_center = (token.bbox.y0 + token.bbox.y1) / 2.0
    decile = min(9, int(10 * y_center / page.height))
    feats[f"ydecile:{decile}"] = 1.0
    if prev_token is None or prev_token.line_id != token.line_id:
        feats["linestart"] = 1.0
    if next_token is None or next_token.line_id != token.line_id:
        feats["lineend"] = 1.0
    if prev_token is None or prev_token.block_id != token.block_id:
        feats["blockstart"] = 1.0
    return feats


#: Alignment tolerance: margins within this fraction of page width count as equal.
ALIGN_TOLERANCE = 0.10


def line_features(
    line_tokens: list[Token],
    page: Page,
    prev_line: list[Token] | None = None,
    next_line: list[Token] | None = None,
) -> dict[str, float]:
    if not line_tokens:
        raise ValueError("line_features on an empty line")
    feats: dict[str, float] = {}
    med = page.median_font_size or 1.0
    feats["relsize"] = float(np.mean([t.font_size for t in line_tokens])) / med
    feats["bold_ratio"] = sum(t.bold for t in line_tokens) / len(line_tokens)
    feats["italic_ratio"] = sum(t.italic for t in line_tokens) / len(line_tokens)
    feats["cap_ratio"] = sum(
        capitalization_class(t.text) in ("init", "caps") for t in line_tokens
    ) / len(line_tokens)

    x0 = min(t.bbox.x0 for t in line_tokens)
    x1 = max(t.bbox.x1 for t in line_tokens)
    left = x0 / page.width
    right = (page.width - x1) / page.width
    if abs(left - right) <= ALIGN_TOLERANCE:
        feats["align:center"] = 1.0
    elif left < right:
        feats["align:left"] = 1.0
    else:
        feats["align:right"] = 1.0

    y0 = min(t.bbox.y0 for t in line_tokens)
    y1 = max(t.bbox.y1 for t in line_tokens)
    feats["ypos"] = ((y0 + y1) / 2.0) / page.height
    feats["tokens"] = float(len(line_tokens))

    line_height = max(y1 - y0, 1e-9)
    if prev_line:
        gap = y0 - max(t.bbox.y1 for t in prev_line)
    else:
        gap = y0
    feats["gap_above"] = min(max(gap, 0.0) / line_height, _GAP_CAP)
    if next_line:
        gap = min(t.bbox.y0 for t in next_line) - y1
    else:
        gap = page.height - y1
    feats["gap_below"] = min(max(gap, 0.0) / line_height, _GAP_CAP)

    if YEAR_RE.search(" ".join(t.text for t in line_tokens)):
        feats["has_year"] = 1.0
    if any(c.isdigit() for t in line_tokens for c in t.text):
        feats["has_digit"] = 1.0
    return feats


# ---------------------------------------------------------------------------
# Feature index and scaling
# ---------------------------------------------------------------------------


@dataclass
class Scaler:
    """Per-feature min-max ranges for the real-valued features."""

    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)

    def fit(self, feature_dicts) -> "Scaler":
        for feats in feature_dicts:
            for name, value in feats.items():
                if name not in REAL_FEATURES:
                    continue
                lo, hi = self.ranges.get(name, (value, value))
                self.ranges[name] = (min(lo, value), max(hi, value))
        return self

    def transform_value(self, name: str, value: float) -> float:
        if name not in REAL_FEATURES or name not in self.ranges:
            return value
        lo, hi = self.ranges[name]
        if hi <= lo:
            return 0.0
        return min(max((value - lo) / (hi - lo), 0.0), 1.0)

    def to_dict(self) -> dict:
        return {name: list(r) for name, r in self.ranges.items()}

    @staticmethod
    def from_dict(d: dict) -> "Scaler":
        return Scaler({name: (r[0], r[1]) for name, r in d.items()})


OOV_NAME = "<oov>"


class FeatureIndex:
    """Frozen bidirectional feature-name <-> id map with a reserved OOV id.

    Unknown names map to the OOV id whose score contribution is defined to be
    zero everywhere.
    """

    def __init__(self, names: list[str]):
        if OOV_NAME in names:
            raise ValueError(f"{OOV_NAME} is reserved")
        self._names = list(names) + [OOV_NAME]
        self._ids = {name: i for i, name in enumerate(self._names)}
        if len(self._ids) != len(self._names):
            raise ValueError("duplicate feature names")
        self.oov_id = len(self._names) - 1

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, name: str) -> bool:
        return name in self._ids

    def id_of(self, name: str) -> int:
        return self._ids.get(name, self.oov_id)

    def name_of(self, fid: int) -> str:
        return self._names[fid]

    @property
    def names(self) -> list[str]:
        return list(self._names)


def fit_index(feature_dicts) -> FeatureIndex:
    """Assign ids in first-seen order over an iterable of feature dicts."""
    names: list[str] = []
    seen: set[str] = set()
    empty = True
    for feats in feature_dicts:
        empty = False
        for name in feats:
            if name not in seen:
                seen.add(name)
                names.append(name)
    if empty:
        raise ValueError("cannot fit a feature index on an empty corpus")
    return FeatureIndex(names)


def vectorize(feats: dict[str, float], index: FeatureIndex, scaler: Scaler | None = None):
    """(ids, values) arrays for one feature dict; OOV features are dropped."""
    ids = []
    values = []
    for name, value in feats.items():
        fid = index.id_of(name)
        if fid == index.oov_id:
            continue
        ids.append(fid)
        values.append(scaler.transform_value(name, value) if scaler else value)
    return np.asarray(ids, dtype=np.int64), np.asarray(values, dtype=np.float64)

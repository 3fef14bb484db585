"""Built-in layout templates.

The clean set gives every label a distinctive typographic signature (size,
bold, italic) on top of its distinctive vocabulary, so synthetic corpora are
separable for both feature-based and content-based extractors. Metadata slots
never share a horizontal band: side-by-side lines would merge during grouping
and blur block-level ground truth. Only Other (body) columns may sit beside
each other.

``conflicting_templates`` builds sets where each template permutes the
signature pool over the labels; typography then means different things in
different documents, which is exactly the template-variance regime that hurts
handcrafted features.
"""

from __future__ import annotations

import numpy as np

from .core import Label
from .synth import Slot, Template

#: (font_size, bold, italic) per label; Other anchors the page median at 10.
CLEAN_TYPOGRAPHY = {
    Label.TITLE: (18.0, True, False),
    Label.AUTHORS: (11.5, False, False),
    Label.ABSTRACT: (9.0, False, True),
    Label.EMAIL: (8.0, False, False),
    Label.ADDRESS: (10.0, False, True),
    Label.DATE: (10.0, True, False),
    Label.JOURNAL: (11.5, False, True),
    Label.AFFILIATION: (9.0, False, False),
    Label.DOI: (8.0, False, False),
    Label.OTHER: (10.0, False, False),
}

#: Vertical gap between stacked slots, in page fractions. Must clear the
#: block-merge threshold (1.5 line heights) plus jitter.
_GAP = 0.034

#: Per-label slot heights in page fractions, sized so sampled text never
#: truncates at the clean typography (worst-case word lengths included).
_HEIGHTS = {
    Label.TITLE: 0.105,
    Label.ABSTRACT: 0.095,
    Label.AUTHORS: 0.026,
    Label.EMAIL: 0.020,
    Label.ADDRESS: 0.022,
    Label.DATE: 0.022,
    Label.JOURNAL: 0.026,
    Label.AFFILIATION: 0.022,
    Label.DOI: 0.020,
}


def _stack(name, spec, typography=None, jitter=2.0, body_height=0.12, start_y=0.04):
    """Build a template from a list of (label, x0, x1, align) stacked downward."""
    typography = typography or CLEAN_TYPOGRAPHY
    slots = []
    y = start_y
    for label, x0, x1, align in spec:
        fs, bold, italic = typography[label]
        height = _HEIGHTS.get(label, body_height)
        slots.append(
            Slot(
                label=label,
                region=(x0, y, x1, y + height),
                font_size=fs,
                bold=bold,
                italic=italic,
                align=align,
            )
        )
        y += height + _GAP
    if y > 1.0:
        raise ValueError(f"template {name} overflows the page ({y:.3f})")
    return Template(name=name, slots=tuple(slots), jitter=jitter)


def _two_column_body(template: Template, y0: float, y1: float, typography=None) -> Template:
    typography = typography or CLEAN_TYPOGRAPHY
    fs, bold, italic = typography[Label.OTHER]
    cols = (
        Slot(Label.OTHER, (0.08, y0, 0.46, y1), fs, bold, italic, "left"),
        Slot(Label.OTHER, (0.54, y0, 0.92, y1), fs, bold, italic, "left"),
    )
    return Template(
        name=template.name, slots=template.slots + cols, jitter=template.jitter
    )


def builtin_templates() -> list[Template]:
    L = Label
    classic = _stack(
        "classic",
        [
            (L.JOURNAL, 0.08, 0.70, "left"),
            (L.TITLE, 0.08, 0.92, "center"),
            (L.AUTHORS, 0.08, 0.92, "center"),
            (L.AFFILIATION, 0.08, 0.70, "left"),
            (L.ADDRESS, 0.08, 0.70, "left"),
            (L.EMAIL, 0.08, 0.60, "left"),
            (L.DATE, 0.08, 0.55, "left"),
            (L.DOI, 0.08, 0.55, "left"),
            (L.ABSTRACT, 0.10, 0.90, "left"),
            (L.OTHER, 0.08, 0.92, "left"),
        ],
    )

    banner = _stack(
        "banner",
        [
            (L.DOI, 0.08, 0.50, "left"),
            (L.DATE, 0.08, 0.50, "left"),
            (L.JOURNAL, 0.08, 0.75, "left"),
            (L.TITLE, 0.10, 0.90, "center"),
            (L.AUTHORS, 0.10, 0.90, "center"),
            (L.EMAIL, 0.10, 0.70, "left"),
            (L.AFFILIATION, 0.10, 0.70, "left"),
            (L.ADDRESS, 0.10, 0.70, "left"),
            (L.ABSTRACT, 0.12, 0.88, "left"),
            (L.OTHER, 0.08, 0.92, "left"),
        ],
    )

    two_col = _stack(
        "two_column",
        [
            (L.TITLE, 0.08, 0.92, "center"),
            (L.AUTHORS, 0.08, 0.92, "center"),
            (L.AFFILIATION, 0.08, 0.70, "left"),
            (L.EMAIL, 0.08, 0.60, "left"),
            (L.ABSTRACT, 0.10, 0.90, "left"),
            (L.JOURNAL, 0.08, 0.70, "left"),
            (L.DATE, 0.08, 0.55, "left"),
            (L.ADDRESS, 0.08, 0.70, "left"),
            (L.DOI, 0.08, 0.55, "left"),
        ],
        body_height=0.0,
    )
    two_col = _two_column_body(two_col, 0.76, 0.96)

    right_meta = _stack(
        "right_meta",
        [
            (L.DATE, 0.55, 0.92, "right"),
            (L.DOI, 0.55, 0.92, "right"),
            (L.TITLE, 0.08, 0.80, "left"),
            (L.AUTHORS, 0.08, 0.80, "left"),
            (L.AFFILIATION, 0.08, 0.70, "left"),
            (L.ADDRESS, 0.08, 0.70, "left"),
            (L.EMAIL, 0.08, 0.60, "left"),
            (L.ABSTRACT, 0.10, 0.90, "left"),
            (L.JOURNAL, 0.08, 0.70, "left"),
            (L.OTHER, 0.08, 0.92, "left"),
        ],
    )

    footnoted = _stack(
        "footnoted",
        [
            (L.TITLE, 0.08, 0.92, "center"),
            (L.AUTHORS, 0.08, 0.92, "center"),
            (L.JOURNAL, 0.08, 0.70, "left"),
            (L.ABSTRACT, 0.10, 0.90, "left"),
            (L.OTHER, 0.08, 0.92, "left"),
            (L.AFFILIATION, 0.08, 0.70, "left"),
            (L.ADDRESS, 0.08, 0.70, "left"),
            (L.EMAIL, 0.08, 0.60, "left"),
            (L.DATE, 0.08, 0.55, "left"),
            (L.DOI, 0.08, 0.55, "left"),
        ],
        body_height=0.11,
    )

    compact = _stack(
        "compact",
        [
            (L.TITLE, 0.10, 0.90, "left"),
            (L.AUTHORS, 0.10, 0.90, "left"),
            (L.AFFILIATION, 0.10, 0.80, "left"),
            (L.EMAIL, 0.10, 0.70, "left"),
            (L.ADDRESS, 0.10, 0.80, "left"),
            (L.DATE, 0.10, 0.60, "left"),
            (L.JOURNAL, 0.10, 0.80, "left"),
            (L.DOI, 0.10, 0.60, "left"),
            (L.ABSTRACT, 0.10, 0.90, "left"),
            (L.OTHER, 0.10, 0.90, "left"),
        ],
        start_y=0.03,
    )

    centered = _stack(
        "centered",
        [
            (L.JOURNAL, 0.15, 0.85, "center"),
            (L.TITLE, 0.10, 0.90, "center"),
            (L.AUTHORS, 0.15, 0.85, "center"),
            (L.AFFILIATION, 0.15, 0.85, "center"),
            (L.ADDRESS, 0.15, 0.85, "center"),
            (L.EMAIL, 0.15, 0.85, "center"),
            (L.DATE, 0.15, 0.85, "center"),
            (L.DOI, 0.15, 0.85, "center"),
            (L.ABSTRACT, 0.12, 0.88, "left"),
            (L.OTHER, 0.08, 0.92, "left"),
        ],
    )

    wide_margins = _stack(
        "wide_margins",
        [
            (L.TITLE, 0.20, 0.80, "center"),
            (L.AUTHORS, 0.20, 0.80, "center"),
            (L.AFFILIATION, 0.20, 0.80, "left"),
            (L.EMAIL, 0.20, 0.75, "left"),
            (L.ADDRESS, 0.20, 0.80, "left"),
            (L.JOURNAL, 0.20, 0.80, "left"),
            (L.DATE, 0.20, 0.70, "left"),
            (L.DOI, 0.20, 0.70, "left"),
            (L.ABSTRACT, 0.20, 0.80, "left"),
            (L.OTHER, 0.20, 0.80, "left"),
        ],
    )

    return [classic, banner, two_col, right_meta, footnoted, compact, centered, wide_margins]


def conflicting_templates(seed: int, count: int = 8, jitter: float = 4.0) -> list[Template]:
    """Templates whose typography is permuted per template.

    The signature pool is the clean one, but which label wears which signature
    changes from template to template; only Other keeps the body signature so
    the page median font stays put.
    """
    rng = np.random.default_rng(seed)
    pool = [CLEAN_TYPOGRAPHY[l] for l in Label if l is not Label.OTHER]
    bases = builtin_templates()
    out = []
    for i in range(count):
        perm = rng.permutation(len(pool))
        typography = {
            label: pool[perm[j]]
            for j, label in enumerate(l for l in Label if l is not Label.OTHER)
        }
        typography[Label.OTHER] = CLEAN_TYPOGRAPHY[Label.OTHER]
        base = bases[i % len(bases)]
        slots = []
        for s in base.slots:
            fs, bold, italic = typography[s.label]
            slots.append(
                Slot(
                    label=s.label,
                    region=s.region,
                    font_size=fs,
                    bold=bold,
                    italic=italic,
                    align=s.align,
                )
            )
        out.append(
            Template(
                name=f"shuffled_{i:02d}_{base.name}",
                slots=tuple(slots),
                page_width=base.page_width,
                page_height=base.page_height,
                jitter=jitter,
            )
        )
    return out

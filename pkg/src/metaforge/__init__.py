"""Desk-scale metadata extraction workbench.

Corpus tooling (synthesis and alignment), four extractor families (two-layer
CRF, BiLSTM, BiLSTM-CRF, spatial-semantic fusion) and a token-level
evaluation harness.
"""

from .core import (
    Annotation,
    BBox,
    Document,
    Label,
    METADATA_LABELS,
    MetadataRecord,
    Page,
    SectionLabel,
    Token,
    group_into_blocks,
    group_into_lines,
    read_corpus,
    write_corpus,
)

__version__ = "0.1.0"

__all__ = [
    "Annotation",
    "BBox",
    "Document",
    "Label",
    "METADATA_LABELS",
    "MetadataRecord",
    "Page",
    "SectionLabel",
    "Token",
    "group_into_blocks",
    "group_into_lines",
    "read_corpus",
    "write_corpus",
    "__version__",
]

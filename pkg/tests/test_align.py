import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaforge.align import (
    AlignmentResult,
    FixtureGateway,
    GatewayRecord,
    HttpGateway,
    MatchResult,
    build_record,
    fetch_metadata,
    find_field_span,
    levenshtein_distance,
    levenshtein_similarity,
    map_span_to_bbox,
    normalize_text,
)
from metaforge.core import BBox, Document, Label, MetadataRecord, Page, union_bbox
from metaforge.errors import GatewayNotFound, MalformedResponse

from conftest import make_token


def slow_levenshtein(a, b):
    """Textbook O(nm) dynamic program, the oracle for the vectorized version."""
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + cost)
    return d[len(a)][len(b)]


class TestNormalize:
    def test_whitespace_runs(self):
        assert normalize_text("a  b\n c") == "a b c"

    def test_empty(self):
        assert normalize_text("") == ""

    def test_dehyphenation(self):
        assert normalize_text("meta-\ndata extraction") == "metadata extraction"
        assert normalize_text("exam-\nple") == "example"

    def test_soft_hyphen_join(self):
        assert normalize_text("exam­\nple") == "example"

    def test_nfc(self):
        # e + combining acute composes to a single code point
        assert normalize_text("café") == "café"

    @given(st.text(max_size=80))
    @settings(max_examples=100, deadline=None)
    def test_idempotent(self, s):
        once = normalize_text(s)
        assert normalize_text(once) == once


class TestLevenshtein:
    def test_identical(self):
        assert levenshtein_similarity("abc", "abc") == 1.0

    def test_empty_vs_nonempty(self):
        assert levenshtein_similarity("", "abc") == 0.0

    def test_both_empty(self):
        assert levenshtein_similarity("", "") == 1.0

    def test_titel_title(self):
        # distance 2 over length 5
        assert levenshtein_similarity("Titel", "Title") == pytest.approx(0.6)

    @given(st.text(max_size=20), st.text(max_size=20))
    @settings(max_examples=150, deadline=None)
    def test_matches_dp_oracle(self, a, b):
        assert levenshtein_distance(a, b) == slow_levenshtein(a, b)

    @given(st.text(max_size=20), st.text(max_size=20))
    @settings(max_examples=80, deadline=None)
    def test_symmetric(self, a, b):
        assert levenshtein_similarity(a, b) == pytest.approx(levenshtein_similarity(b, a))

    def test_one_iff_equal(self):
        assert levenshtein_similarity("ab", "ab") == 1.0
        assert levenshtein_similarity("ab", "ba") < 1.0

    def test_cap_early_exit(self):
        assert levenshtein_distance("aaaaaaaaaa", "bbbbbbbbbb", cap=3) == 4


class TestFindFieldSpan:
    TOKENS = "The Great Title of the Paper by Jane Doe".split()

    def test_exact_match(self):
        m = find_field_span(self.TOKENS, "Great Title", 0.85, label=Label.TITLE)
        assert m is not None
        assert m.kind == "exact"
        assert m.similarity == 1.0
        assert m.token_span == (1, 3)
        assert m.label is Label.TITLE

    def test_absent_field(self):
        assert find_field_span(self.TOKENS, "zzzz qqqq xxxx", 0.85) is None

    def test_fuzzy_typo_matches_window_scan_oracle(self):
        field = "Great Tible of the"  # one typo
        got = find_field_span(self.TOKENS, field, 0.80)
        # exhaustive scan over every window of every allowed width
        best = None
        k = len(field.split())
        for start in range(len(self.TOKENS)):
            for width in range(max(1, k - 2), k + 3):
                if start + width > len(self.TOKENS):
                    continue
                joined = " ".join(self.TOKENS[start : start + width])
                dist = slow_levenshtein(joined, field)
                sim = 1.0 - dist / max(len(joined), len(field))
                if sim >= 0.80 and (best is None or sim > best[0]):
                    best = (sim, start, width)
        assert got is not None and best is not None
        assert got.kind == "fuzzy"
        assert got.similarity == pytest.approx(best[0])
        assert got.token_span == (best[1], best[1] + best[2])

    def test_leftmost_tie(self):
        tokens = "Jane Doe filler filler Jane Doe".split()
        m = find_field_span(tokens, "Jane Doe", 0.85)
        assert m.token_span == (0, 2)

    def test_mask_skips_tokens(self):
        tokens = "Jane Doe filler Jane Doe".split()
        mask = [False, False, True, True, True]
        m = find_field_span(tokens, "Jane Doe", 0.85, mask=mask)
        assert m.token_span == (3, 5)

    def test_exact_requires_similarity_one(self):
        with pytest.raises(ValueError):
            MatchResult(Label.TITLE, (0, 1), 0.9, "exact")

    def test_empty_span_rejected(self):
        with pytest.raises(ValueError):
            MatchResult(Label.TITLE, (2, 2), 1.0, "exact")


class TestMapSpanToBbox:
    def test_single_token(self):
        toks = [make_token("a", 5, 7)]
        assert map_span_to_bbox((0, 1), toks) == toks[0].bbox

    def test_two_tokens(self):
        toks = [make_token("a", 5, 7), make_token("b", 50, 3)]
        box = map_span_to_bbox((0, 2), toks)
        assert box == toks[0].bbox.union(toks[1].bbox)

    def test_fold_oracle(self, rng):
        toks = [
            make_token(f"t{i}", float(rng.uniform(0, 400)), float(rng.uniform(0, 600)))
            for i in range(5)
        ]
        expected = union_bbox(t.bbox for t in toks)
        assert map_span_to_bbox((0, 5), toks) == expected

    def test_empty_span(self):
        with pytest.raises(ValueError):
            map_span_to_bbox((3, 3), [])


class TestFixtureGateway:
    def _gateway(self, tmp_path):
        gw = FixtureGateway(str(tmp_path))
        gw.store(
            GatewayRecord(
                doi="10.1234/abc",
                metadata=MetadataRecord(title="A Title", authors="Jane Doe"),
                pdf_url="http://example.org/a.pdf",
            )
        )
        return gw

    def test_round_trip(self, tmp_path):
        gw = self._gateway(tmp_path)
        rec = fetch_metadata("10.1234/abc", gw)
        assert rec.doi == "10.1234/abc"
        assert rec.metadata.title == "A Title"
        assert rec.pdf_url == "http://example.org/a.pdf"

    def test_absent_doi(self, tmp_path):
        gw = self._gateway(tmp_path)
        with pytest.raises(GatewayNotFound):
            fetch_metadata("10.9999/missing", gw)

    def test_missing_title_is_not_an_error(self, tmp_path):
        gw = FixtureGateway(str(tmp_path))
        gw.store(GatewayRecord(doi="10.1/x", metadata=MetadataRecord(authors="A")))
        rec = fetch_metadata("10.1/x", gw)
        assert rec.metadata.title is None
        assert rec.metadata.authors == "A"

    def test_malformed_fixture(self, tmp_path):
        gw = FixtureGateway(str(tmp_path))
        path = gw._path("10.1/bad")
        with open(path, "w") as f:
            f.write("{not json")
        with pytest.raises(MalformedResponse):
            gw.fetch("10.1/bad")

    def test_empty_doi_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            fetch_metadata("  ", FixtureGateway(str(tmp_path)))


class _Handler(BaseHTTPRequestHandler):
    records = {}

    def do_GET(self):
        key = self.path.rsplit("/", 1)[-1]
        if key in self.records:
            body = json.dumps(self.records[key]).encode()
            self.send_response(200)
            self.end_headers()
            self.wfile.write(body)
        elif key == "broken":
            self.send_response(200)
            self.end_headers()
            self.wfile.write(b"{oops")
        else:
            self.send_response(404)
            self.end_headers()

    def log_message(self, *args):
        pass


class TestHttpGateway:
    @pytest.fixture
    def server(self):
        _Handler.records = {
            "10.1234%2Fabc": {"doi": "10.1234/abc", "metadata": {"title": "T"}},
        }
        srv = HTTPServer(("127.0.0.1", 0), _Handler)
        thread = threading.Thread(target=srv.serve_forever, daemon=True)
        thread.start()
        yield f"http://127.0.0.1:{srv.server_port}"
        srv.shutdown()

    def test_fetch(self, server):
        gw = HttpGateway(server)
        rec = gw.fetch("10.1234/abc")
        assert rec.metadata.title == "T"

    def test_not_found(self, server):
        with pytest.raises(GatewayNotFound):
            HttpGateway(server).fetch("10.9/zz")

    def test_malformed(self, server):
        with pytest.raises(MalformedResponse):
            HttpGateway(server).fetch("broken")


class TestBuildRecord:
    def _doc(self, words, width=600.0):
        toks = []
        x, y = 10.0, 50.0
        for w in words:
            t = make_token(w, x, y)
            x += t.bbox.width + 4
            if x > width - 80:
                x, y = 10.0, y + 14
            toks.append(t)
        page = Page(width=width, height=850, tokens=tuple(toks))
        return Document(id="d", page=page)

    def test_all_fields_matched(self):
        doc = self._doc("An Interesting Study by Jane Doe 10.1234/xyz".split())
        rec = GatewayRecord(
            doi="10.1234/xyz",
            metadata=MetadataRecord(
                title="An Interesting Study", authors="Jane Doe", doi="10.1234/xyz"
            ),
        )
        result = build_record(doc, rec)
        assert result.unmatched == []
        assert {m.label for m in result.matches} == {Label.TITLE, Label.AUTHORS, Label.DOI}
        assert all(m.kind == "exact" for m in result.matches)
        labels = result.document.token_labels()
        assert labels == [
            Label.TITLE, Label.TITLE, Label.TITLE, Label.OTHER,
            Label.AUTHORS, Label.AUTHORS, Label.DOI,
        ]

    def test_absent_title_reported_unmatched(self):
        doc = self._doc("Jane Doe wrote this".split())
        rec = GatewayRecord(
            doi="10.1/x",
            metadata=MetadataRecord(title="Completely Different Words Here", authors="Jane Doe"),
        )
        result = build_record(doc, rec)
        assert Label.TITLE in result.unmatched
        assert Label.AUTHORS in result.matched_labels

    def test_duplicate_string_leftmost(self):
        doc = self._doc("Jane Doe filler filler Jane Doe".split())
        rec = GatewayRecord(doi="10.1/x", metadata=MetadataRecord(authors="Jane Doe"))
        result = build_record(doc, rec)
        (m,) = result.matches
        assert m.token_span == (0, 2)

    def test_earlier_matches_mask_tokens(self):
        # title claims the tokens first; the journal matching the same words
        # must not steal them
        doc = self._doc("Shared Words here".split())
        rec = GatewayRecord(
            doi="10.1/x",
            metadata=MetadataRecord(title="Shared Words", journal="Shared Words"),
        )
        result = build_record(doc, rec)
        assert Label.TITLE in result.matched_labels
        assert Label.JOURNAL in result.unmatched

    def test_doi_requires_exact(self):
        doc = self._doc("10.1234/xyzq".split())
        rec = GatewayRecord(doi="10.1234/xyz", metadata=MetadataRecord(doi="10.1234/xyz"))
        result = build_record(doc, rec)
        assert result.unmatched == [Label.DOI]

import re

import numpy as np
import pytest

from metaforge.align import levenshtein_similarity
from metaforge.core import (
    Document,
    Label,
    MetadataRecord,
    Page,
    px_rect,
    raster_scales,
)
from metaforge.synth import (
    FieldSampler,
    Slot,
    Template,
    assign_blocks_by_similarity,
    block_texts,
    corrupt_document,
    derive_seed,
    layout_page,
    load_templates_dir,
    rasterize_page,
    sample_metadata,
    save_templates_dir,
    synthesize_corpus,
    with_raster,
)
from metaforge.templates import builtin_templates, conflicting_templates

DOI_RE = re.compile(r"10\.\d{4,9}/\S+")


@pytest.fixture(scope="module")
def sampler():
    return FieldSampler()


@pytest.fixture(scope="module")
def templates():
    return builtin_templates()


@pytest.fixture(scope="module")
def small_corpus(templates, sampler):
    return synthesize_corpus(templates, sampler, 30, master_seed=7, dpi=8)


class TestSampler:
    def test_deterministic(self, sampler):
        assert sample_metadata(sampler, 0) == sample_metadata(sampler, 0)
        assert sample_metadata(sampler, 0) != sample_metadata(sampler, 1)

    def test_doi_pattern(self, sampler):
        for seed in range(1000):
            rec = sample_metadata(sampler, seed)
            assert DOI_RE.search(rec.doi), rec.doi

    def test_email_single_at(self, sampler):
        for seed in range(200):
            rec = sample_metadata(sampler, seed)
            assert rec.email.count("@") == 1

    def test_titles_mostly_distinct(self, sampler):
        titles = [sample_metadata(sampler, s).title for s in range(1000)]
        assert len(set(titles)) >= 990

    def test_all_fields_present(self, sampler):
        rec = sample_metadata(sampler, 42)
        assert len(rec.present_labels()) == 9


class TestLayout:
    def test_single_slot_single_word(self):
        tpl = Template(
            name="t",
            slots=(Slot(Label.TITLE, (0.1, 0.1, 0.9, 0.3), 18.0),),
            jitter=0.0,
        )
        rec = MetadataRecord(title="Word")
        doc = layout_page(tpl, rec, 0)
        assert len(doc.page.tokens) == 1
        assert len(doc.annotations) == 1
        assert doc.annotations[0].label is Label.TITLE

    def test_wrap_arithmetic(self):
        # slot fits exactly 3 words of 4 chars per line at fs 10:
        # 3*24 + 2*2 = 76pt wide
        tpl = Template(
            name="t",
            slots=(Slot(Label.TITLE, (0.0, 0.0, 76.0 / 595.0, 0.5), 10.0),),
            jitter=0.0,
        )
        rec = MetadataRecord(title="aaaa bbbb cccc dddd eeee ffff gggg")
        doc = layout_page(tpl, rec, 0)
        line_ids = {t.line_id for t in doc.page.tokens}
        assert len(line_ids) == 3
        assert len(doc.page.tokens) == 7

    def test_every_token_annotated(self, templates, sampler):
        rec = sample_metadata(sampler, 3)
        doc = layout_page(templates[0], rec, 99)
        covered = {i for a in doc.annotations for i in a.token_indices}
        assert covered == set(range(len(doc.page.tokens)))

    def test_round_trip_annotation_text(self, templates, sampler):
        # re-extracting each annotation's text reproduces the record fields
        for seed in range(8):
            rec = sample_metadata(sampler, seed)
            doc = layout_page(templates[seed % len(templates)], rec, seed)
            assert doc.truncated == ()
            toks = doc.page.tokens
            for ann in doc.annotations:
                if ann.label is Label.OTHER:
                    continue
                text = " ".join(toks[i].text for i in ann.token_indices)
                assert text == rec.get(ann.label)

    def test_truncation_recorded(self):
        tpl = Template(
            name="t",
            slots=(Slot(Label.TITLE, (0.1, 0.1, 0.3, 0.13), 18.0),),
            jitter=0.0,
        )
        rec = MetadataRecord(title="Far Too Many Words To Possibly Fit In There")
        doc = layout_page(tpl, rec, 0)
        assert "Title" in doc.truncated
        assert len(doc.page.tokens) < len(rec.title.split())

    def test_template_requires_title(self):
        with pytest.raises(ValueError):
            Template(name="x", slots=(Slot(Label.OTHER, (0, 0, 1, 1), 10.0),))

    def test_overlapping_slots_rejected(self):
        with pytest.raises(ValueError):
            Template(
                name="x",
                slots=(
                    Slot(Label.TITLE, (0.1, 0.1, 0.5, 0.3), 18.0),
                    Slot(Label.OTHER, (0.4, 0.2, 0.9, 0.5), 10.0),
                ),
            )

    def test_jitter_inflation_rejected(self):
        # disjoint bare regions, but 5pt of jitter can collide them
        with pytest.raises(ValueError):
            Template(
                name="x",
                jitter=5.0,
                slots=(
                    Slot(Label.TITLE, (0.1, 0.1, 0.5, 0.2), 18.0),
                    Slot(Label.OTHER, (0.1, 0.201, 0.5, 0.3), 10.0),
                ),
            )


class TestRasterize:
    def _one_token_doc(self):
        tpl = Template(
            name="t", slots=(Slot(Label.TITLE, (0.1, 0.1, 0.9, 0.4), 18.0),), jitter=0.0
        )
        return layout_page(tpl, MetadataRecord(title="Word"), 0)

    def test_empty_page_all_background(self):
        doc = Document(id="e", page=Page(width=100, height=100))
        raster = rasterize_page(doc, 72)
        assert (raster == 255).all()

    def test_token_pixels_exactly_inside_scaled_bbox(self):
        doc = self._one_token_doc()
        raster = rasterize_page(doc, 72)
        t = doc.page.tokens[0]
        h, w = raster.shape
        r0, r1, c0, c1 = px_rect(t.bbox, w / doc.page.width, h / doc.page.height, h, w)
        inside = raster[r0:r1, c0:c1]
        assert (inside < 255).all()
        total_dark = int((raster < 255).sum())
        assert total_dark == inside.size

    def test_mean_intensity_decreases_with_more_ink(self):
        doc1 = self._one_token_doc()
        tpl2 = Template(
            name="t2",
            slots=(Slot(Label.TITLE, (0.1, 0.1, 0.9, 0.4), 18.0),
                   Slot(Label.OTHER, (0.1, 0.5, 0.9, 0.8), 10.0),),
            jitter=0.0,
        )
        doc2 = layout_page(tpl2, MetadataRecord(title="Word"), 0)
        assert rasterize_page(doc2, 36).mean() < rasterize_page(doc1, 36).mean()

    def test_bold_darker(self):
        tpl = Template(
            name="t",
            slots=(Slot(Label.TITLE, (0.1, 0.1, 0.9, 0.3), 18.0, bold=True),
                   Slot(Label.OTHER, (0.1, 0.5, 0.9, 0.7), 10.0),),
            jitter=0.0,
        )
        doc = layout_page(tpl, MetadataRecord(title="Word"), 0)
        raster = rasterize_page(doc, 36)
        values = set(np.unique(raster))
        assert values == {20, 70, 255}

    def test_invalid_dpi(self):
        with pytest.raises(ValueError):
            rasterize_page(self._one_token_doc(), 0)

    def test_raster_aspect_within_tolerance(self, small_corpus):
        for doc in small_corpus[:5]:
            h, w = doc.page.raster.shape
            assert abs(h / w - doc.page.height / doc.page.width) <= 0.01 * (
                doc.page.height / doc.page.width
            )


class TestAssignBlocks:
    def test_identical_block_is_title(self):
        rec = MetadataRecord(title="An Exact Title", authors="Jane Doe")
        labels = assign_blocks_by_similarity(["An Exact Title"], rec, 0.95)
        assert labels == [Label.TITLE]

    def test_dissimilar_block_is_other(self):
        rec = MetadataRecord(title="An Exact Title")
        labels = assign_blocks_by_similarity(["nothing like it at all"], rec, 0.95)
        assert labels == [Label.OTHER]

    def test_one_char_substitution_similarity(self):
        # 40 chars, one substituted: similarity 0.975 per the DP oracle
        title = "a" * 20 + "b" * 20
        block = "a" * 20 + "c" + "b" * 19
        assert levenshtein_similarity(block, title) == pytest.approx(0.975)
        rec = MetadataRecord(title=title)
        assert assign_blocks_by_similarity([block], rec, 0.9) == [Label.TITLE]


class TestSynthesizeCorpus:
    def test_single_document(self, templates, sampler):
        docs = synthesize_corpus(templates, sampler, 1, master_seed=0, dpi=8)
        assert len(docs) == 1
        assert docs[0].id == "synth-00000"

    def test_zero_documents_rejected(self, templates, sampler):
        with pytest.raises(ValueError):
            synthesize_corpus(templates, sampler, 0, master_seed=0)

    def test_deterministic(self, templates, sampler):
        a = synthesize_corpus(templates, sampler, 5, master_seed=11, dpi=8)
        b = synthesize_corpus(templates, sampler, 5, master_seed=11, dpi=8)
        assert a == b

    def test_seed_isolation(self, templates, sampler):
        # document j is byte-identical whether or not document i exists
        five = synthesize_corpus(templates, sampler, 5, master_seed=11, dpi=8)
        three = synthesize_corpus(templates, sampler, 3, master_seed=11, dpi=8)
        assert five[:3] == three

    def test_jobs_do_not_change_output(self, templates, sampler):
        a = synthesize_corpus(templates, sampler, 8, master_seed=2, dpi=8, jobs=1)
        b = synthesize_corpus(templates, sampler, 8, master_seed=2, dpi=8, jobs=4)
        assert a == b

    def test_all_classes_covered(self, templates, sampler):
        docs = synthesize_corpus(templates, sampler, 200, master_seed=5, dpi=0)
        seen = {a.label for d in docs for a in d.annotations}
        assert seen == set(Label)

    def test_ink_inside_annotations(self, small_corpus):
        # rectangles render where annotations claim: >= 80% non-background
        for doc in small_corpus:
            raster = doc.page.raster
            h, w = raster.shape
            sx, sy = raster_scales(doc.page)
            for ann in doc.annotations:
                r0, r1, c0, c1 = px_rect(ann.bbox, sx, sy, h, w)
                patch = raster[r0:r1, c0:c1]
                assert (patch < 255).mean() >= 0.80, (doc.id, ann.label)

    def test_block_similarity_recovers_generator_labels(self, small_corpus):
        total = 0
        hits = 0
        for doc in small_corpus:
            assert doc.truncated == ()
            texts = block_texts(doc)
            assigned = assign_blocks_by_similarity(texts, doc.metadata, 0.95)
            gold_by_block: dict[int, Label] = {}
            labels = doc.token_labels()
            for i, t in enumerate(doc.page.tokens):
                gold_by_block.setdefault(t.block_id, labels[i])
            for b, want in sorted(gold_by_block.items()):
                if want is Label.OTHER:
                    continue
                total += 1
                hits += assigned[b] is want
        assert total > 0
        assert hits == total  # no truncation: 100%


class TestTemplateIo:
    def test_save_load_round_trip(self, tmp_path, templates):
        save_templates_dir(str(tmp_path), templates)
        back = load_templates_dir(str(tmp_path))
        assert sorted(t.name for t in back) == sorted(t.name for t in templates)
        by_name = {t.name: t for t in back}
        for t in templates:
            assert by_name[t.name] == t

    def test_empty_dir_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            load_templates_dir(str(tmp_path))


class TestNoise:
    def test_corruption_changes_some_tokens(self, templates, sampler):
        doc = synthesize_corpus(templates, sampler, 1, master_seed=3, dpi=0)[0]
        noisy = corrupt_document(doc, 0, bbox_jitter=3.0, char_corruption=0.05)
        assert len(noisy.page.tokens) == len(doc.page.tokens)
        changed = sum(
            a.text != b.text
            for a, b in zip(
                sorted(doc.page.tokens, key=lambda t: t.text),
                sorted(noisy.page.tokens, key=lambda t: t.text),
            )
        )
        assert changed > 0

    def test_corrupted_document_still_valid(self, templates, sampler):
        doc = synthesize_corpus(templates, sampler, 1, master_seed=3, dpi=0)[0]
        noisy = corrupt_document(doc, 1, bbox_jitter=4.0, char_corruption=0.05, dpi=8)
        # constructor re-validates invariants; raster present and consistent
        assert noisy.page.raster is not None
        assert {a.label for a in noisy.annotations} == {a.label for a in doc.annotations}

    def test_conflicting_templates_valid(self):
        tpls = conflicting_templates(0, count=8)
        assert len(tpls) == 8
        # each is constructible and has a Title slot by construction; the
        # typography assignment differs between templates
        sigs = {
            tuple(
                (s.font_size, s.bold, s.italic)
                for s in t.slots
                if s.label is Label.TITLE
            )
            for t in tpls
        }
        assert len(sigs) > 1


class TestDeriveSeed:
    def test_stable(self):
        assert derive_seed(1, 2) == derive_seed(1, 2)
        assert derive_seed(1, 2) != derive_seed(1, 3)
        assert derive_seed("a") != derive_seed("b")

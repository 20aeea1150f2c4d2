import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uniseq.errors import BoxError, DataError, TemplateError
from uniseq.tasks import (
    FINETUNE_TASKS, IMAGE, MASK_MARKER, TEMPLATES, Episode, Limits, flatten_dialogue, make_mim,
    make_mlm, make_od, read_manifest, render_instruction, serialize, template_fields,
    truncate_fields, write_manifest,
)
from uniseq.tokenization import BOS, EOS, MASK, SEP, Box, assemble, train_bpe
from uniseq.vision import Codebook, Image, patchify, save_image

CORPUS = ["what does the image describe", "a small mass in the left lung", "no acute findings"]


@pytest.fixture(scope="module")
def vocab():
    return assemble(train_bpe(CORPUS, 30), 16, 32)


def image(h=16, w=16, seed=0):
    return Image.from_unit(np.random.default_rng(seed).uniform(size=(h, w)))


LIMITS = Limits(max_src=512, max_tgt=64, patch_size=8, channels=1)


def filled(task):
    return {name: f"<{name.lower()}>" for name in template_fields(task)}


class TestRender:
    def test_image_classification(self):
        assert render_instruction(Episode("image_classification", images=[image()])) == \
            "[Image] What does the image describe?"

    def test_summarization(self):
        ep = Episode("summarization", {"Text": "x"})
        assert render_instruction(ep) == "What is the summary of the text “x”?"

    def test_vqa(self):
        assert render_instruction(Episode("vqa", {"Question": "q"}, images=[image()])) == "[Image]q"

    def test_multi_image(self):
        ep = Episode("multi_captioning", images=[image(), image()])
        assert render_instruction(ep) == "[Image] [Image] What does the images describe?"

    def test_nli_verbatim(self):
        ep = Episode("nli", {"Text1": "a", "Text2": "b"})
        assert render_instruction(ep) == "Can text1 “ a ” imply text2 “ b ”?"

    def test_missing_field(self):
        with pytest.raises(TemplateError):
            render_instruction(Episode("nli", {"Text1": "a"}))

    def test_one_template_per_table_task(self):
        assert set(FINETUNE_TASKS) <= set(TEMPLATES)
        assert len(FINETUNE_TASKS) == len(set(FINETUNE_TASKS))

    @pytest.mark.parametrize("task", sorted(TEMPLATES))
    def test_stripping_fields_recovers_skeleton(self, task):
        values = filled(task)
        n = TEMPLATES[task].count(IMAGE)
        rendered = render_instruction(Episode(task, values, images=[image()] * n))
        stripped = rendered
        for v in values.values():
            stripped = stripped.replace(v, "", 1)
        skeleton = TEMPLATES[task]
        for name in values:
            skeleton = skeleton.replace("{" + name + "}", "")
        assert stripped == skeleton


class TestSerialize:
    def test_text_only_has_no_patches(self, vocab):
        pair = serialize(Episode("summarization", {"Text": "no acute findings"}, target="normal"), vocab, LIMITS)
        assert all(it.kind == "text" for it in pair.source)
        assert pair.target[0] == BOS and pair.target[-1] == EOS

    def test_single_image_composition(self, vocab):
        ep = Episode("captioning", images=[image()], target="a small mass")
        pair = serialize(ep, vocab, LIMITS)
        n_text = len(vocab.encode(" What does the image describe?"))
        assert len(pair.source) == n_text + 4
        assert [it.kind for it in pair.source[:4]] == ["patch"] * 4
        assert [it.raster for it in pair.source[:4]] == [0, 1, 2, 3]

    def test_two_images_in_placeholder_order(self, vocab):
        a, b = image(seed=1), image(seed=2)
        pair = serialize(Episode("multi_captioning", images=[a, b], target="x"), vocab, LIMITS)
        kinds = [it.kind for it in pair.source]
        assert kinds[:4] == ["patch"] * 4 and kinds[4] == "text" and kinds[5:9] == ["patch"] * 4
        np.testing.assert_array_equal(pair.source[0].patch, patchify(a, 8).patches[0])
        np.testing.assert_array_equal(pair.source[5].patch, patchify(b, 8).patches[0])

    def test_placeholder_count_enforced(self, vocab):
        with pytest.raises(DataError):
            serialize(Episode("vqa", {"Question": "q"}, target="x"), vocab, LIMITS)

    def test_empty_target(self, vocab):
        with pytest.raises(DataError):
            serialize(Episode("summarization", {"Text": "a"}, target=""), vocab, LIMITS)

    def test_image_load_failure(self, vocab, tmp_path):
        ep = Episode("captioning", images=[str(tmp_path / "missing.pgm")], target="x")
        with pytest.raises(OSError):
            serialize(ep, vocab, LIMITS)

    def test_source_truncated_from_right(self, vocab):
        ep = Episode("summarization", {"Text": "a small mass " * 40}, target="mass")
        full = serialize(ep, vocab, LIMITS)
        short = serialize(ep, vocab, Limits(max_src=20))
        assert len(short.source) == 20
        assert [i.token for i in short.source] == [i.token for i in full.source[:20]]

    def test_target_truncation(self, vocab):
        ep = Episode("summarization", {"Text": "a"}, target="a small mass in the left lung " * 5)
        pair = serialize(ep, vocab, Limits(max_tgt=10))
        assert len(pair.target) == 10 and pair.target[-1] == EOS
        decoded = vocab.decode(pair.target[1:-1])
        assert ep.target.startswith(decoded)

    def test_subsampling_applies(self, vocab):
        ep = Episode("captioning", images=[image(64, 64)], target="x")
        pair = serialize(ep, vocab, Limits(max_patches=10), seed=3)
        patches = [it for it in pair.source if it.kind == "patch"]
        assert len(patches) == 10
        assert all(a.raster < b.raster for a, b in zip(patches, patches[1:]))

    def test_deterministic(self, vocab):
        ep = Episode("captioning", images=[image(64, 64)], target="x")
        assert serialize(ep, vocab, Limits(max_patches=10), seed=3).digest() == \
            serialize(ep, vocab, Limits(max_patches=10), seed=3).digest()

    def test_channel_mismatch(self, vocab):
        rgb = Image.from_unit(np.zeros((16, 16, 3)))
        with pytest.raises(DataError):
            serialize(Episode("captioning", images=[rgb], target="x"), vocab, LIMITS)

    @settings(max_examples=100, deadline=None)
    @given(st.text(alphabet="abcdefghij klmn", min_size=1, max_size=80), st.integers(3, 40))
    def test_target_decodes_to_prefix(self, vocab, text, max_tgt):
        if not vocab.encode(text):
            return
        pair = serialize(Episode("summarization", {"Text": "a"}, target=text), vocab, Limits(max_tgt=max_tgt))
        decoded = vocab.decode(pair.target[1:-1])
        assert text.encode().startswith(vocab.bpe.decode_bytes(pair.target[1:-1]))
        if len(vocab.encode(text)) <= max_tgt - 2:
            assert decoded == text


class TestMlm:
    def test_ratio_zero(self):
        ep = make_mlm("the left lung", 0.0, seed=0)
        assert ep.text["Text"] == "the left lung" == ep.target

    def test_ratio_one(self):
        ep = make_mlm("the  left lung", 1.0, seed=0)
        assert ep.text["Text"] == f"{MASK_MARKER}  {MASK_MARKER} {MASK_MARKER}"

    def test_exact_count(self):
        ep = make_mlm(" ".join(f"w{i}" for i in range(10)), 0.3, seed=4)
        assert ep.text["Text"].count(MASK_MARKER) == 3

    def test_masks_become_mask_ids(self, vocab):
        pair = serialize(make_mlm("a small mass", 1.0, seed=0), vocab, LIMITS)
        assert sum(it.token == MASK for it in pair.source) == 3
        assert vocab.decode(pair.target[1:-1]) == "a small mass"


class TestMim:
    @pytest.fixture
    def codebook(self):
        grid = patchify(image(seed=9), 8)
        return Codebook(grid.patches[:2].copy())

    def test_all_masked(self, vocab, codebook):
        ep = make_mim(image(seed=9), 1.0, 0, codebook, vocab, 8)
        pair = serialize(ep, vocab, LIMITS)
        assert len(pair.target) == 4 + 2
        assert all(it.kind == "mask" for it in pair.source if it.kind != "text")
        assert all(vocab.classify(t) == "vision" for t in pair.target[1:-1])

    def test_centroid_patch_gets_its_id(self, vocab, codebook):
        ep = make_mim(image(seed=9), 1.0, 0, codebook, vocab, 8)
        assert ep.target_ids[0] == vocab.vision_id(0)
        assert ep.target_ids[1] == vocab.vision_id(1)

    def test_partial(self, vocab, codebook):
        ep = make_mim(image(32, 32, seed=9), 0.25, 2, codebook, vocab, 8)
        assert len(ep.target_ids) == 4
        pair = serialize(ep, vocab, LIMITS)
        assert sum(it.kind == "mask" for it in pair.source) == 4
        assert sum(it.kind == "patch" for it in pair.source) == 12

    def test_invalid_ratio(self, vocab, codebook):
        with pytest.raises(ValueError):
            make_mim(image(), 0.0, 0, codebook, vocab, 8)


class TestOd:
    def test_single_object(self, vocab):
        box = Box(0, 0, 8, 8, 16, 16)
        pair = serialize(make_od(image(), [(box, "mass")]), vocab, LIMITS)
        body = pair.target[1:-1]
        assert [vocab.classify(t) for t in body[:4]] == ["location"] * 4
        assert body[4:] == vocab.encode("mass")

    def test_sorted_by_top_left(self, vocab):
        low = (Box(1, 10, 4, 14, 16, 16), "b")
        high = (Box(9, 2, 12, 6, 16, 16), "a")
        for order in ([low, high], [high, low]):
            body = serialize(make_od(image(), order), vocab, LIMITS).target[1:-1]
            sep = body.index(SEP)
            assert vocab.decode(body[:sep]) == "a"

    def test_full_image_box(self, vocab):
        pair = serialize(make_od(image(), [(Box(0, 0, 16, 16, 16, 16), "x")]), vocab, LIMITS)
        assert [t - vocab.location_offset for t in pair.target[1:5]] == [0, 0, 15, 15]

    def test_invalid_box(self):
        with pytest.raises(BoxError):
            make_od(image(), [(Box(5, 5, 5, 9, 16, 16), "x")])


def test_flatten_dialogue_history():
    eps = flatten_dialogue("img.pgm", [("what is it?", "a lung"), ("which side?", "left")])
    assert eps[0].text["History"] == ""
    assert eps[1].text["History"] == "what is it? a lung "
    assert render_instruction(eps[1]) == "[Image]what is it? a lung which side?"


def test_truncate_fields(vocab):
    ep = Episode("summarization", {"Text": "a small mass in the left lung"}, target="x")
    cut = truncate_fields(ep, vocab.bpe, 3)
    assert len(vocab.encode(cut.text["Text"])) <= 3
    assert ep.text["Text"].startswith(cut.text["Text"])


def test_manifest_round_trip(tmp_path, vocab):
    save_image(tmp_path / "a.pgm", np.full((16, 16), 128, dtype=np.uint8))
    records = [
        {"task": "vqa", "text": {"Question": "is it left?"}, "target": "yes", "images": ["a.pgm"],
         "answer_set": ["yes", "no"]},
        {"task": "od", "text": {}, "target": "", "images": ["a.pgm"],
         "objects": [{"x1": 0, "y1": 0, "x2": 8, "y2": 8, "label": "mass"}]},
    ]
    (tmp_path / "m.jsonl").write_text("\n".join(json.dumps(r) for r in records) + "\n")
    eps = read_manifest(tmp_path / "m.jsonl")
    assert eps[0].answer_set == ["yes", "no"]
    assert eps[1].objects[0][0].width == 16
    pair = serialize(eps[0], vocab, LIMITS)
    assert sum(it.kind == "patch" for it in pair.source) == 4
    write_manifest(eps, tmp_path / "out.jsonl")
    again = read_manifest(tmp_path / "out.jsonl")
    assert [e.task for e in again] == ["vqa", "od"]


def test_manifest_bad_json(tmp_path):
    (tmp_path / "m.jsonl").write_text("{not json\n")
    with pytest.raises(DataError):
        read_manifest(tmp_path / "m.jsonl")

import json

import numpy as np
import pytest

from guirobust.synthgui import (
    COLORS, PRESETS, Corpus, ElementAnnotation, PlatformPreset, Sample, generate_screen,
    make_corpus, render, split_for,
)
from guirobust.vocab import default_vocabulary


def test_generate_is_deterministic():
    a = generate_screen(7, "mobile")
    b = generate_screen(7, PRESETS["mobile"])
    assert np.array_equal(a.image, b.image)
    assert a.target == b.target and a.distractors == b.distractors


@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_target_inside_canvas_and_distractor_counts(preset):
    p = PRESETS[preset]
    for seed in range(30):
        s = generate_screen(seed, p)
        x0, y0, x1, y1 = s.target.bbox
        assert 0 < x0 < x1 < 1 and 0 < y0 < y1 < 1
        assert p.distractors[0] <= len(s.distractors) <= p.distractors[1]
        assert s.image.shape == p.canvas + (3,) and s.image.dtype == np.uint8


def test_instructions_unique_within_screen():
    for seed in range(1000):
        s = generate_screen(seed, "mobile")
        triples = [e.attributes for e in s.elements]
        assert len(set(triples)) == len(triples)
        assert sum(e.attributes == s.target.attributes for e in s.elements) == 1


def test_instruction_template_and_vocab():
    s = generate_screen(3, "desktop")
    t = s.target
    assert t.instruction_text == f"click the {t.color} {t.shape} {t.kind}"
    default_vocabulary().encode(t.instruction)  # every word is in vocabulary


def test_elements_do_not_overlap():
    for seed in range(100):
        s = generate_screen(seed, "web")
        boxes = [e.pixel_box for e in s.elements]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                a, b = boxes[i], boxes[j]
                assert a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]


def test_ink_lies_inside_boxes():
    for seed in range(50):
        for preset in PRESETS:
            s = generate_screen(seed, preset)
            ink = np.any(s.image != np.array(s.background, np.uint8), axis=-1)
            union = np.zeros_like(ink)
            for e in s.elements:
                x0, y0, x1, y1 = e.pixel_box
                union[y0:y1, x0:x1] = True
            assert ink.sum() > 0
            assert (ink & union).sum() / ink.sum() == 1.0


def test_target_area_exceeds_four_attack_regions():
    region_area = 0.02 * 0.02
    for seed in range(300):
        for preset in PRESETS:
            x0, y0, x1, y1 = generate_screen(seed, preset).target.bbox
            assert (x1 - x0) * (y1 - y0) >= 4 * region_area


def test_render_empty_screen_is_background():
    empty = Sample(np.zeros((64, 96, 3), np.uint8), "mobile", None, [], seed=0, background=(10, 20, 30))
    assert np.all(render(empty) == np.array((10, 20, 30), np.uint8))


def test_render_full_canvas_widget():
    el = ElementAnnotation((0.0, 0.0, 1.0, 1.0), "blue", "button", (0, 0, 96, 64))
    s = Sample(np.zeros((64, 96, 3), np.uint8), "mobile", el, [], seed=0)
    assert np.all(render(s) == np.array(COLORS["blue"], np.uint8))


def test_preset_validation():
    with pytest.raises(ValueError):
        PlatformPreset("tiny", (32, 32), (1, 2), (8, 10), ((0, 0, 0),))
    with pytest.raises(ValueError):
        PlatformPreset("big", (128, 128), (1, 2), (8, 200), ((0, 0, 0),))
    with pytest.raises(ValueError):
        generate_screen(0, "tablet")


def test_crowded_preset_fails_after_retries():
    p = PlatformPreset("crowded", (64, 64), (30, 30), (12, 12), ((255, 255, 255),))
    with pytest.raises(RuntimeError):
        generate_screen(0, p)


def test_make_corpus_counts_and_determinism(tmp_path):
    a = make_corpus(10, ["mobile", "desktop", "web"], 7, tmp_path / "a")
    b = make_corpus(10, ["mobile", "desktop", "web"], 7, tmp_path / "b", workers=2)
    assert len(list((a / "images").iterdir())) == 10
    lines = (a / "annotations.jsonl").read_text().splitlines()
    assert len(lines) == 10
    for name in ("annotations.jsonl", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    for f in (a / "images").iterdir():
        assert f.read_bytes() == (b / "images" / f.name).read_bytes()
    rec = json.loads(lines[0])
    for key in ("id", "image_path", "platform", "instruction_text", "instruction_tokens",
                "target_bbox", "kind", "distractors"):
        assert key in rec


def test_corpus_reload_matches_generation(tmp_path):
    root = make_corpus(6, ["mobile", "web"], 11, tmp_path / "c")
    c = Corpus(root)
    ids = c.split("train") + c.split("val") + c.split("test")
    assert sorted(ids) == sorted(c.records)
    for sid in ids:
        s = c.load_sample(sid)
        again = generate_screen(s.seed, s.platform)
        assert np.array_equal(s.image, again.image)
        assert s.target.color == again.target.color and s.target.shape == again.target.shape
        assert np.allclose(s.target.bbox, again.target.bbox, atol=1e-6)


def test_split_proportions():
    counts = {"train": 0, "val": 0, "test": 0}
    for i in range(10000):
        counts[split_for(7, i)] += 1
    assert abs(counts["train"] / 10000 - 0.8) <= 0.01
    assert abs(counts["val"] / 10000 - 0.1) <= 0.01
    assert abs(counts["test"] / 10000 - 0.1) <= 0.01


def test_missing_corpus(tmp_path):
    with pytest.raises(FileNotFoundError):
        Corpus(tmp_path)

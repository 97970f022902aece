import hashlib
import json

import numpy as np
import pytest

from bclip.numerics import ConfigError
from bclip.rng import Rng
from bclip.toyworld import (COLORS, N_HARD_NEGATIVES, SHAPES, SIZES, Scene, WorldConfig,
                            generate_annotations, generate_dataset, generate_scene, iter_records,
                            make_sample, read_dataset, render_patch_input, sample_to_record,
                            write_dataset)

ATTR_WORDS = (COLORS, SIZES, SHAPES)


def attributes(phrase):
    return tuple(words.index(tok) for tok, words in zip(phrase, ATTR_WORDS))


def test_small_grid_single_object():
    scene = generate_scene(Rng(0), WorldConfig(grid_size=2, n_objects=1))
    assert scene.occupancy.sum() == 1
    assert len(scene.objects) == 1


def test_same_seed_same_scene():
    cfg = WorldConfig()
    a, b = generate_scene(Rng(0), cfg), generate_scene(Rng(0), cfg)
    assert np.array_equal(a.cells, b.cells)


def test_too_many_objects_is_config_error():
    with pytest.raises(ConfigError):
        generate_scene(Rng(0), WorldConfig(grid_size=2, n_objects=5))


def test_vocab_size_lower_bound():
    with pytest.raises(ConfigError):
        WorldConfig(n_shapes=1).validate()


def test_background_cells_carry_zero_triple():
    scene = generate_scene(Rng(4), WorldConfig())
    assert np.all(scene.cells[~scene.occupancy] == 0)
    assert np.all(scene.cells[scene.occupancy] > 0)


def test_attribute_marginals_uniform():
    cfg = WorldConfig()
    scenes = [generate_scene(Rng(0).spawn(i), cfg) for i in range(1000)]
    for a, n in enumerate((cfg.n_shapes, cfg.n_colors, cfg.n_sizes)):
        vals = np.concatenate([[o[2 + a] for o in s.objects] for s in scenes])
        share = np.bincount(vals, minlength=n + 1)[1:] / len(vals)
        assert np.all(np.abs(share - 1 / n) < 0.05)


def _single(shape, color, size, r=3, c=2, g=7):
    cells = np.zeros((g, g, 3), dtype=np.int64)
    cells[r, c] = (shape, color, size)
    return Scene(g, cells, cells[..., 0] > 0)


def test_single_red_triangle_phrase():
    tri, red = SHAPES.index("triangle") + 1, COLORS.index("red") + 1
    caps, anns = generate_annotations(_single(tri, red, 2), Rng(0), WorldConfig(n_objects=1))
    (ann,) = anns
    phrase = caps.phrases[ann.phrase_index]
    assert phrase[0] == "red" and phrase[-1] == "triangle"
    assert ann.box == (3, 2, 3, 2)
    assert len(caps.sentences) == 1


def test_hard_negatives_single_swap_and_distinct():
    for i in range(30):
        s = make_sample(1, 0, i, WorldConfig())
        for ann, negs in zip(s.annotations, s.captions.hard_negatives):
            pos = attributes(s.captions.phrases[ann.phrase_index])
            assert len(negs) == N_HARD_NEGATIVES
            keys = [attributes(n) for n in negs]
            assert len(set(keys)) == N_HARD_NEGATIVES and pos not in keys
            for k in keys:
                assert sum(x != y for x, y in zip(k, pos)) == 1


def test_every_object_annotated_once():
    s = make_sample(0, 0, 3, WorldConfig())
    object_phrases = [i for i, k in enumerate(s.captions.phrase_kinds) if k == "object"]
    assert sorted(a.phrase_index for a in s.annotations) == object_phrases
    assert len(object_phrases) == len(s.scene.objects)
    for a in s.annotations:
        r, c = a.box[:2]
        assert s.scene.occupancy[r, c]


def test_caption_concatenates_sentences():
    s = make_sample(0, 0, 0, WorldConfig())
    assert s.captions.caption == [t for sent in s.captions.sentences for t in sent]
    assert len(s.captions.sentences) == 5  # four objects plus one relation


def test_render_rows():
    cfg = WorldConfig()
    scene = _single(1, 1, 1)
    scene.cells[0, 0] = (1, 1, 1)
    scene.occupancy[0, 0] = True
    x = render_patch_input(scene, cfg).data
    assert x.shape == (49, cfg.d_in)
    assert cfg.d_in == sum(cfg.vocab_sizes)
    assert np.array_equal(x[0], x[3 * 7 + 2])
    bg = np.zeros(cfg.d_in)
    bg[[0, cfg.vocab_sizes[0], cfg.vocab_sizes[0] + cfg.vocab_sizes[1]]] = 1
    assert np.array_equal(x[1], bg)
    assert np.all(x.sum(axis=1) == 3)


def test_dataset_files_byte_identical(tmp_path):
    cfg = WorldConfig()
    digests = []
    for name in ("a.jsonl", "b.jsonl"):
        write_dataset(tmp_path / name, generate_dataset(0, 20, cfg), meta={"seed": 0})
        digests.append(hashlib.sha256((tmp_path / name).read_bytes()).hexdigest())
    assert digests[0] == digests[1]


def test_dataset_round_trip(tmp_path):
    samples = generate_dataset(2, 5, WorldConfig())
    write_dataset(tmp_path / "d.jsonl", samples, meta={"x": 1})
    back = read_dataset(tmp_path / "d.jsonl")
    assert [sample_to_record(s) for s in back] == [sample_to_record(s) for s in samples]


def test_bad_json_line_reports_location(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps({"meta": {}}) + "\n{not json\n")
    with pytest.raises(ValueError, match="bad.jsonl:2"):
        list(iter_records(p))

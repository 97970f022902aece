import numpy as np
import pytest
from hypothesis import given, strategies as st

from bclip import numerics as nx
from bclip.encoders import ImageTokens
from bclip.eval import (
    attention_hit, evaluate_model, export_heatmap, heatmap, read_heatmap_csv,
    recall_at_k, recall_from_scores, region_feature, region_match, sim_diversity,
    tci_retrieval, tci_scores, true_ranks, write_metrics_jsonl, write_summary_csv,
)
from bclip.model import BetaClip, ModelConfig
from bclip.toyworld import RegionAnnotation, WorldConfig, generate_dataset

from conftest import t64


def test_identity_alignment_is_perfect():
    e = np.random.default_rng(0).normal(size=(6, 4))
    r = recall_at_k(e, e * 3).r_at
    assert r["t2i"][1] == 1.0 and r["i2t"][1] == 1.0


def test_reversed_pairs():
    e = np.eye(10)
    assert recall_at_k(e, e[::-1]).r_at["t2i"][1] == 0.0
    f = np.eye(9)
    assert recall_at_k(f, f[::-1]).r_at["i2t"][1] == pytest.approx(1 / 9)


def test_ties_go_to_lower_index():
    assert list(true_ranks(np.ones((3, 3)))) == [0, 1, 2]


def test_empty_and_mismatched():
    with pytest.raises(ValueError):
        recall_at_k(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        recall_at_k(np.ones((2, 3)), np.ones((3, 3)))


def test_random_embeddings_near_chance():
    g = np.random.default_rng(1)
    vals = [recall_at_k(g.normal(size=(100, 16)), g.normal(size=(100, 16))).r_at["t2i"][1]
            for _ in range(20)]
    assert abs(np.mean(vals) - 0.01) < 0.02


@given(st.integers(0, 2**32 - 1))
def test_rotation_invariance(seed):
    g = np.random.default_rng(seed)
    a, b = g.normal(size=(12, 5)), g.normal(size=(12, 5))
    q, _ = np.linalg.qr(g.normal(size=(5, 5)))
    assert recall_at_k(a, b).r_at == recall_at_k(a @ q, b @ q).r_at


@given(st.integers(0, 2**32 - 1))
def test_recall_monotone_in_k(seed):
    S = np.random.default_rng(seed).normal(size=(15, 15))
    r = recall_from_scores(S, ks=(1, 2, 5, 10, 15)).r_at
    for d in r.values():
        vals = list(d.values())
        assert vals == sorted(vals) and 0 <= vals[0] and vals[-1] == 1.0


# --- regions ----------------------------------------------------------------


def test_single_cell_region_is_that_patch():
    P = np.random.default_rng(2).normal(size=(9, 4))
    f = region_feature(P, RegionAnnotation((1, 2, 1, 2), 0), 3)
    np.testing.assert_allclose(f, P[5] / np.linalg.norm(P[5]))


def test_empty_box_rejected():
    with pytest.raises(ValueError, match="empty"):
        RegionAnnotation((2, 0, 1, 0), 0).patch_indices(3)


@pytest.fixture(scope="module")
def untrained():
    world = WorldConfig()
    return BetaClip(world, ModelConfig(init_seed=7)), generate_dataset(11, 160, world, split=1)


def test_positive_among_negatives_rejected(untrained):
    model, samples = untrained
    s = samples[0]
    img = model.encode_images(np.zeros((1, 49, model.world.d_in)))
    with pytest.raises(ValueError, match="negatives"):
        region_match(img, s.annotations[0], [["red", "circle"], ["red", "circle"]], model.text, 7)


class NoiseEncoder:
    """Uninformative text encoder: a fresh random vector for every candidate."""

    def __init__(self, dim, seed):
        self.dim, self.gen = dim, np.random.default_rng(seed)

    def __call__(self, slots):
        return t64(self.gen.normal(size=(len(slots), self.dim)))


def test_uninformative_scores_sit_at_chance(untrained):
    model, samples = untrained
    enc = NoiseEncoder(32, 0)
    patches = np.random.default_rng(6).normal(size=(49, 32))
    img = ImageTokens(t64(np.zeros(32)), t64(patches[None]))
    ranks = [region_match(img, a, [s.captions.phrases[a.phrase_index], *negs], enc, 7)
             for s in samples for a, negs in zip(s.annotations, s.captions.hard_negatives)]
    assert len(ranks) >= 500
    assert abs(np.mean(np.array(ranks) == 0) - 1 / 11) < 0.03


def test_untrained_model_metrics_in_range(untrained):
    model, samples = untrained
    m = evaluate_model(model, samples)
    for key in ("cls_t2i_r@1", "cls_i2t_r@5", "region_match", "region_match_raw",
                "attention_hit", "sim_diversity"):
        assert 0.0 <= m[key] <= 1.0


def test_attention_hit_picks_argmax():
    a = np.zeros((2, 9))
    a[:, 4] = 1.0
    assert attention_hit(a, RegionAnnotation((1, 1, 1, 1), 0), 3)
    assert not attention_hit(a, RegionAnnotation((0, 0, 0, 2), 0), 3)


# --- diversity --------------------------------------------------------------


def test_sim_diversity_closed_forms():
    e = np.array([1.0, 0.0, 0.0])
    assert sim_diversity(np.stack([e, e * 2, e])[None]) == pytest.approx(1.0)
    assert sim_diversity(np.eye(2)[None]) == pytest.approx(0.0)
    alt = np.stack([e, -e, e, -e])[None]
    assert sim_diversity(alt) == pytest.approx(-1 / 3)
    with pytest.raises(ValueError):
        sim_diversity(np.ones((2, 1, 3)))


@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_sim_diversity_bounds(K, seed):
    v = np.random.default_rng(seed).normal(size=(3, K, 4))
    assert -1 / (K - 1) - 1e-12 <= sim_diversity(v) <= 1 + 1e-12


# --- text-conditioned retrieval ---------------------------------------------------


def test_tci_matrix_shape_and_determinism(untrained):
    model, samples = untrained
    a = tci_retrieval(model, samples[:12])
    b = tci_retrieval(model, samples[:12])
    assert a.r_at == b.r_at and a.n_queries == 12


def test_tci_scores_row_per_image(untrained):
    model, _ = untrained
    g = np.random.default_rng(3)
    S = tci_scores(model, g.normal(size=(3, 49, 32)), g.normal(size=(3, 32)))
    assert S.shape == (3, 3) and np.all(np.abs(S) <= 1 + 1e-6)


# --- heatmaps ---------------------------------------------------------------


def test_orthogonal_text_gives_zero_map(tmp_path):
    P = np.zeros((9, 4))
    P[:, :2] = np.random.default_rng(4).normal(size=(9, 2))
    h = export_heatmap(P, np.array([0, 0, 1.0, 0]), tmp_path / "h.csv", scale=10)
    assert np.all(h == 0)
    assert set((tmp_path / "h.csv").read_text().replace("\n", ",").strip(",").split(",")) == {"0.000000"}


def test_matching_patch_is_unique_max(tmp_path):
    g = np.random.default_rng(5)
    P = g.normal(size=(16, 8))
    text = P[6] * 2.0
    h = export_heatmap(P, text, tmp_path / "h.csv", pgm_path=tmp_path / "h.pgm")
    assert np.unravel_index(np.argmax(h), h.shape) == (1, 2)
    assert np.sum(h == h.max()) == 1
    np.testing.assert_allclose(read_heatmap_csv(tmp_path / "h.csv"), h, atol=1e-6)
    raw = (tmp_path / "h.pgm").read_bytes()
    assert raw.startswith(b"P5\n4 4\n255\n") and raw[-16:][6] == 255


def test_heatmap_needs_square_grid():
    with pytest.raises(ValueError):
        heatmap(np.ones((6, 3)), np.ones(3))


def test_heatmap_write_error_names_path(tmp_path):
    with pytest.raises(OSError, match="nowhere"):
        export_heatmap(np.ones((4, 2)), np.ones(2), tmp_path / "nowhere" / "h.csv")


def test_metric_writers(tmp_path):
    write_metrics_jsonl(tmp_path / "m.jsonl", 3, {"a": 0.5, "b": 1.0}, mode="w")
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert lines[0] == '{"step": 3, "metric": "a", "value": 0.5}'
    write_summary_csv(tmp_path / "s.csv", {"b": 1.0, "a": 0.25})
    assert (tmp_path / "s.csv").read_text().splitlines() == ["metric,value", "a,0.250000", "b,1.000000"]

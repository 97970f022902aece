from collections import Counter

import pytest
from hypothesis import given, strategies as st

from bclip.decompose import (CaptionHierarchy, Level, assemble_hierarchy, clean_caption,
                             decompose_caption, extract_phrases, split_sentences)
from bclip.rng import Rng
from bclip.toyworld import POS_LEXICON, WorldConfig, make_sample

small_tokens = st.lists(st.sampled_from(["a", "b", "c", "."]), max_size=30)


class TestClean:
    def test_stutter(self):
        assert clean_caption(["very", "very", "good"]) == ["very", "good"]

    def test_repeated_bigram(self):
        assert clean_caption(["a", "b", "a", "b", "a", "b", "c"]) == ["a", "b", "c"]

    def test_clean_input_unchanged(self):
        toks = ["a", "red", "cube", "is", "on", "the", "left", "."]
        assert clean_caption(toks) == toks

    def test_two_repeats_are_kept(self):
        assert clean_caption(["a", "b", "a", "b", "c"]) == ["a", "b", "a", "b", "c"]

    @given(small_tokens)
    def test_idempotent(self, toks):
        once = clean_caption(toks)
        assert clean_caption(once) == once

    @given(small_tokens)
    def test_no_adjacent_duplicates(self, toks):
        out = clean_caption(toks)
        assert all(x != y for x, y in zip(out, out[1:]))


class TestSplit:
    def test_two_sentences(self):
        out = split_sentences(["a", "dog", "runs", ".", "it", "barks", "."])
        assert out == [["a", "dog", "runs", "."], ["it", "barks", "."]]

    def test_no_terminator(self):
        assert split_sentences(["a", "dog"]) == [["a", "dog"]]

    def test_leading_terminator_dropped(self):
        assert split_sentences([".", "a", "dog", "."]) == [["a", "dog", "."]]

    @given(small_tokens)
    def test_concatenation_preserves_non_empty_content(self, toks):
        joined = [t for s in split_sentences(toks) for t in s]
        assert [t for t in joined if t != "."] == [t for t in toks if t != "."]


class TestPhrases:
    def test_noun_chunk_with_spatial_extension(self):
        toks = ["the", "red", "cube", "on", "the", "left"]
        tags = ["DET", "ADJ", "NOUN", "ADP", "DET", "SPATIAL"]
        assert extract_phrases(toks, tags) == [toks]

    def test_action(self):
        assert extract_phrases(["leaning", "against"], ["VERB", "ADP"]) == [["leaning", "against"]]

    def test_all_determiners(self):
        assert extract_phrases(["the", "a", "the"], ["DET"] * 3) == []

    def test_short_phrase_filtered(self):
        assert extract_phrases(["ox"], ["NOUN"]) == []

    def test_spatial_relation_with_of(self):
        toks = ["is", "to", "the", "left", "of", "it"]
        tags = ["VERB", "ADP", "DET", "SPATIAL", "ADP", "OTHER"]
        out = extract_phrases(toks, tags)
        assert ["is", "to"] in out and ["to", "the", "left", "of"] in out

    def test_misaligned_tags(self):
        with pytest.raises(ValueError):
            extract_phrases(["a", "cube"], ["DET"])

    def test_unknown_tag(self):
        with pytest.raises(ValueError):
            extract_phrases(["cube"], ["PROPN"])

    @given(st.lists(st.sampled_from(sorted(POS_LEXICON)), max_size=25))
    def test_phrases_are_contiguous_subsequences(self, toks):
        tags = [POS_LEXICON[t] for t in toks]
        for p in extract_phrases(toks, tags):
            assert any(toks[i:i + len(p)] == p for i in range(len(toks)))


def test_toy_caption_decomposes_into_its_sentences():
    s = make_sample(0, 0, 0, WorldConfig())
    caption, sents, phrases = decompose_caption(s.captions.caption, lexicon=POS_LEXICON)
    assert caption == s.captions.caption
    assert sents == s.captions.sentences
    assert all(len(" ".join(p)) >= 3 for p in phrases)


def test_caller_tags_follow_cleaning():
    toks = ["the", "the", "red", "cube", "."]
    tags = ["DET", "DET", "ADJ", "NOUN", "OTHER"]
    caption, _, phrases = decompose_caption(toks, tags=tags)
    assert caption == ["the", "red", "cube", "."]
    assert phrases == [["the", "red", "cube"]]


class TestAssemble:
    caption = ["c", "."]
    sentences = [["s1", "."], ["s2", "."], ["s3", "."], ["s4", "."], ["s5", "."], ["s6", "."]]
    phrases = [[f"p{i}"] for i in range(40)]

    def test_k6(self):
        h = assemble_hierarchy(self.caption, self.sentences, [], 5, 0, Rng(0))
        assert h.K == 6 and h.slots[0] == self.caption

    def test_k36(self):
        h = assemble_hierarchy(self.caption, self.sentences, self.phrases, 5, 30, Rng(0))
        assert h.K == 36
        assert h.level_of == [Level.CAPTION] + [Level.SENTENCE] * 5 + [Level.PHRASE] * 30

    def test_without_replacement_has_no_duplicates(self):
        h = assemble_hierarchy(self.caption, self.sentences, self.phrases, 5, 30, Rng(1))
        assert len({tuple(s) for s in h.slots}) == 36

    def test_with_replacement_covers_all(self):
        sents = self.sentences[:3]
        seen = Counter()
        for seed in range(200):
            h = assemble_hierarchy(self.caption, sents, [], 5, 0, Rng(seed))
            assert len(h.sentences) == 5
            seen.update(tuple(s) for s in h.sentences)
        assert set(seen) == {tuple(s) for s in sents}

    def test_fallback_to_caption(self):
        h = assemble_hierarchy(self.caption, [], [], 2, 0, Rng(0))
        assert h.sentences == [self.caption, self.caption] and h.fallbacks == 2

    def test_empty_caption(self):
        with pytest.raises(ValueError):
            assemble_hierarchy([], self.sentences, [], 1, 0, Rng(0))

    @given(st.integers(0, 8), st.integers(0, 8), st.integers(0, 2**32))
    def test_k_invariant(self, ks, kp, seed):
        h = assemble_hierarchy(self.caption, self.sentences[:2], self.phrases[:3], ks, kp, Rng(seed))
        assert isinstance(h, CaptionHierarchy)
        assert h.K == 1 + ks + kp and h.slots[0] == self.caption
        assert all(len(s) for s in h.slots)

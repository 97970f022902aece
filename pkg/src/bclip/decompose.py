"""Caption hierarchy construction: cleaning, sentence split, phrase rules, sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

from .rng import Rng

TAGS = frozenset({"NOUN", "ADJ", "DET", "VERB", "ADP", "SPATIAL", "OTHER"})
SENTENCE_TERMINATORS = frozenset({".", "!", "?"})
STOP_TAGS = frozenset({"DET", "ADP"})
SPATIAL_HEADS = frozenset({"left", "right", "top", "bottom", "center", "middle",
                           "near", "front", "back"})
MIN_PHRASE_CHARS = 3


class Level(IntEnum):
    CAPTION = 0
    SENTENCE = 1
    PHRASE = 2


@dataclass
class CaptionHierarchy:
    caption: list[str]
    sentences: list[list[str]]
    phrases: list[list[str]]
    fallbacks: int = 0  # slots filled by duplicating the caption
    level_of: list[Level] = field(init=False)

    def __post_init__(self):
        self.level_of = ([Level.CAPTION] + [Level.SENTENCE] * len(self.sentences)
                         + [Level.PHRASE] * len(self.phrases))

    @property
    def K(self) -> int:
        return 1 + len(self.sentences) + len(self.phrases)

    @property
    def slots(self) -> list[list[str]]:
        return [self.caption, *self.sentences, *self.phrases]

    def to_record(self) -> dict:
        return {"caption": self.caption, "sentences": self.sentences,
                "phrases": self.phrases, "K": self.K, "fallbacks": self.fallbacks}


def clean_caption(tokens: Sequence[str]) -> list[str]:
    """Collapse stuttering: repeated tokens, and n-grams (n >= 2) repeated 3+ times in a row."""
    out = list(tokens)
    changed = True
    while changed:
        changed = False
        collapsed = [t for i, t in enumerate(out) if i == 0 or t != out[i - 1]]
        if len(collapsed) != len(out):
            out, changed = collapsed, True
        i = 0
        while i < len(out):
            for n in range(2, (len(out) - i) // 3 + 1):
                unit = out[i:i + n]
                reps = 1
                while out[i + reps * n:i + (reps + 1) * n] == unit:
                    reps += 1
                if reps >= 3:
                    out = out[:i + n] + out[i + reps * n:]
                    changed = True
                    break
            i += 1
    return out


def split_sentences(tokens: Sequence[str]) -> list[list[str]]:
    sents, cur = [], []
    for tok in tokens:
        cur.append(tok)
        if tok in SENTENCE_TERMINATORS:
            if any(t not in SENTENCE_TERMINATORS for t in cur):
                sents.append(cur)
            cur = []
    if cur:
        sents.append(cur)
    return sents


def _spatial_run(tokens, tags, i, heads, with_of: bool = True) -> int:
    """End index of an ``ADP DET? SPATIAL+ of?`` run starting at i, or -1."""
    n = len(tokens)
    if i >= n or tags[i] != "ADP":
        return -1
    j = i + 1
    if j < n and tags[j] == "DET":
        j += 1
    if j >= n or not (tags[j] == "SPATIAL" or tokens[j] in heads):
        return -1
    while j < n and (tags[j] == "SPATIAL" or tokens[j] in heads):
        j += 1
    if with_of and j < n and tokens[j] == "of":
        j += 1
    return j


def extract_phrases(tokens: Sequence[str], tags: Sequence[str],
                    spatial_heads=SPATIAL_HEADS, stop_tags=STOP_TAGS) -> list[list[str]]:
    """Rule-based phrase extraction over POS-tagged tokens.

    Noun chunks are maximal ``DET? ADJ* NOUN+`` runs, extended through a
    directly following ``ADP DET? SPATIAL+`` run. Actions are ``VERB ADP`` bigrams. Spatial
    relations are ``ADP DET? SPATIAL+ of?`` runs not already absorbed by a
    noun chunk. Phrases under three characters, or made only of stop-tagged
    tokens, are dropped; duplicates keep their first occurrence.
    """
    if len(tokens) != len(tags):
        raise ValueError(f"{len(tokens)} tokens but {len(tags)} tags")
    bad = set(tags) - TAGS
    if bad:
        raise ValueError(f"unknown tags {sorted(bad)}")
    n = len(tokens)
    spans: list[tuple[int, int]] = []
    used = [False] * n

    i = 0
    while i < n:
        j = i
        if tags[j] == "DET":
            j += 1
        while j < n and tags[j] == "ADJ":
            j += 1
        k = j
        while k < n and tags[k] == "NOUN":
            k += 1
        if k > j:
            end = _spatial_run(tokens, tags, k, spatial_heads, with_of=False)
            stop = end if end > 0 else k
            spans.append((i, stop))
            for t in range(i, stop):
                used[t] = True
            i = stop
        else:
            i += 1

    for i in range(n - 1):
        if tags[i] == "VERB" and tags[i + 1] == "ADP":
            spans.append((i, i + 2))

    for i in range(n):
        if used[i]:
            continue
        end = _spatial_run(tokens, tags, i, spatial_heads)
        if end > 0 and not any(used[i:end]):
            spans.append((i, end))

    spans.sort()
    out, seen = [], set()
    for a, b in spans:
        words = list(tokens[a:b])
        if len(" ".join(words)) < MIN_PHRASE_CHARS:
            continue
        if all(tags[t] in stop_tags for t in range(a, b)):
            continue
        key = tuple(words)
        if key not in seen:
            seen.add(key)
            out.append(words)
    return out


def _sample(items: list, k: int, rng: Rng) -> list:
    if k == 0:
        return []
    if len(items) >= k:
        return [items[i] for i in rng.choice(len(items), k)]
    return [items[i] for i in rng.choice(len(items), k, replace=True)]


def assemble_hierarchy(caption: Sequence[str], sentences: Sequence[Sequence[str]],
                       phrases: Sequence[Sequence[str]], k_sent: int, k_phrase: int,
                       rng: Rng) -> CaptionHierarchy:
    """Sample exactly ``k_sent`` sentences and ``k_phrase`` phrases behind the caption.

    Sampling is without replacement when enough items exist. An empty pool
    with a positive target falls back to copies of the caption, counted in
    ``fallbacks``.
    """
    if k_sent < 0 or k_phrase < 0:
        raise ValueError("slot targets must be non-negative")
    caption = list(caption)
    if not caption:
        raise ValueError("caption is empty")
    fallbacks = 0
    pools = []
    for pool, k in ((sentences, k_sent), (phrases, k_phrase)):
        pool = [list(p) for p in pool if len(p)]
        if not pool and k > 0:
            pool = [caption]
            fallbacks += k
        pools.append(_sample(pool, k, rng))
    return CaptionHierarchy(caption, pools[0], pools[1], fallbacks=fallbacks)


def tag_tokens(tokens: Sequence[str], lexicon: dict[str, str]) -> list[str]:
    return [lexicon.get(t, "OTHER") for t in tokens]


def decompose_caption(tokens: Sequence[str], tags: Sequence[str] | None = None,
                      lexicon: dict[str, str] | None = None) -> tuple[list, list, list]:
    """Clean, split and extract: returns (caption, sentences, phrases)."""
    if tags is not None:
        if len(tags) != len(tokens):
            raise ValueError(f"{len(tokens)} tokens but {len(tags)} tags")
        # cleaning may drop tokens, so keep tags attached to survivors
        pairs = clean_caption(list(zip(tokens, tags)))
        caption = [t for t, _ in pairs]
        ctags = [g for _, g in pairs]
    else:
        caption = clean_caption(tokens)
        ctags = tag_tokens(caption, lexicon or {})
    sentences = split_sentences(caption)
    phrases, pos = [], 0
    for sent in sentences:
        sent_tags = ctags[pos:pos + len(sent)]
        pos += len(sent)
        for p in extract_phrases(sent, sent_tags):
            if p not in phrases:
                phrases.append(p)
    return caption, sentences, phrases

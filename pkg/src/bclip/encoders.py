"""Toy vision and text transformers.

Vision: patch tokens plus a CLS token through pre-norm blocks. In the last
block patch rows skip query-key mixing: each patch keeps only its own value
projection, while CLS attends over every token as usual. The skip is applied
in training and inference alike.

Text: one causal pre-norm block. There is no literal end-of-sequence token:
the state at the last real position, after the output projection, serves as
the embedding of the slot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Param, Tensor
from .rng import Rng
from .toyworld import TOKEN_ID

MASK_VALUE = -1e9
INIT_STD = 0.02


class ParamSet:
    """Named parameters created with the shared init convention."""

    def __init__(self, prefix: str, rng: Rng, dtype=np.float32):
        self.prefix = prefix
        self.rng = rng
        self.dtype = dtype
        self.params: dict[str, Param] = {}

    def normal(self, name: str, shape) -> Param:
        return self._add(name, self.rng.truncated_normal(shape, std=INIT_STD))

    def ones(self, name: str, shape) -> Param:
        return self._add(name, np.ones(shape))

    def zeros(self, name: str, shape) -> Param:
        return self._add(name, np.zeros(shape))

    def _add(self, name: str, arr) -> Param:
        full = f"{self.prefix}.{name}"
        if full in self.params:
            raise ValueError(f"duplicate parameter {full}")
        p = Param(Tensor(np.asarray(arr, dtype=self.dtype)), full)
        self.params[full] = p
        return p


class MLP:
    def __init__(self, ps: ParamSet, name: str, dim: int, ratio: int = 4):
        self.fc1 = ps.normal(f"{name}.fc1", (dim, ratio * dim))
        self.b1 = ps.zeros(f"{name}.b1", (ratio * dim,))
        self.fc2 = ps.normal(f"{name}.fc2", (ratio * dim, dim))
        self.b2 = ps.zeros(f"{name}.b2", (dim,))

    def __call__(self, x: Tensor) -> Tensor:
        h = nx.gelu(x @ self.fc1.value + self.b1.value)
        return h @ self.fc2.value + self.b2.value


class LayerNorm:
    def __init__(self, ps: ParamSet, name: str, dim: int, eps: float = 1e-5):
        self.gain = ps.ones(f"{name}.gain", (dim,))
        self.bias = ps.zeros(f"{name}.bias", (dim,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain.value, self.bias.value, self.eps)


class Block:
    """Pre-norm self-attention block on (B, T, D) token stacks."""

    def __init__(self, ps: ParamSet, name: str, dim: int, heads: int):
        if dim % heads:
            raise DimensionError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.ln1 = LayerNorm(ps, f"{name}.ln1", dim)
        self.wq = ps.normal(f"{name}.attn.wq", (dim, dim))
        self.wk = ps.normal(f"{name}.attn.wk", (dim, dim))
        self.wv = ps.normal(f"{name}.attn.wv", (dim, dim))
        self.wo = ps.normal(f"{name}.attn.wo", (dim, dim))
        self.ln2 = LayerNorm(ps, f"{name}.ln2", dim)
        self.mlp = MLP(ps, f"{name}.mlp", dim)

    def attention(self, x: Tensor, mask: np.ndarray | None = None, qk_skip: bool = False) -> Tensor:
        h = self.heads
        dh = x.shape[-1] // h
        a = self.ln1(x)
        v = nx.split_heads(a @ self.wv.value, h)
        q_src = a[:, :1, :] if qk_skip else a
        q = nx.split_heads(q_src @ self.wq.value, h)
        k = nx.split_heads(a @ self.wk.value, h)
        scores = nx.scale(q @ nx.transpose(k), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = scores + Tensor(mask.astype(x.dtype))
        mixed = nx.softmax(scores) @ v
        if qk_skip:
            # CLS row mixes; patch rows pass their own values through
            mixed = nx.concat([mixed, v[:, 1:, :]], axis=1)
        return nx.merge_heads(mixed, h) @ self.wo.value

    def __call__(self, x: Tensor, mask: np.ndarray | None = None, qk_skip: bool = False) -> Tensor:
        x = x + self.attention(x, mask, qk_skip)
        return x + self.mlp(self.ln2(x))


@dataclass
class ImageTokens:
    cls: Tensor  # (B, D)
    patches: Tensor  # (B, N, D)


class VisionEncoder:
    def __init__(self, d_in: int, n_patches: int, dim: int = 32, heads: int = 4,
                 layers: int = 2, rng: Rng | None = None, dtype=np.float32):
        ps = ParamSet("vision", rng or Rng(0), dtype)
        self.n_patches, self.dim = n_patches, dim
        self.patch_proj = ps.normal("patch_proj", (d_in, dim))
        self.pos_embed = ps.normal("pos_embed", (n_patches, dim))
        self.cls_token = ps.normal("cls_token", (1, dim))
        self.blocks = [Block(ps, f"blocks.{i}", dim, heads) for i in range(layers)]
        self.ln_post = LayerNorm(ps, "ln_post", dim)
        self.proj = ps.normal("proj", (dim, dim))
        self.params = ps.params

    def embed(self, x: Tensor) -> Tensor:
        """(B, N, d_in) inputs to the (B, 1+N, D) token stack entering the blocks."""
        if x.ndim == 2:
            x = nx.reshape(x, (1, *x.shape))
        if x.shape[1] != self.n_patches:
            raise DimensionError(f"expected {self.n_patches} patches, got {x.shape[1]}")
        h = x @ self.patch_proj.value + self.pos_embed.value
        cls = Tensor(np.zeros((x.shape[0], 1, self.dim), dtype=h.dtype)) + self.cls_token.value
        return nx.concat([cls, h], axis=1)

    def run_blocks(self, tokens: Tensor) -> Tensor:
        last = len(self.blocks) - 1
        for i, blk in enumerate(self.blocks):
            tokens = blk(tokens, qk_skip=(i == last))
        return tokens

    def head(self, tokens: Tensor) -> ImageTokens:
        out = self.ln_post(tokens) @ self.proj.value
        return ImageTokens(cls=out[:, 0, :], patches=out[:, 1:, :])

    def __call__(self, x: Tensor) -> ImageTokens:
        return self.head(self.run_blocks(self.embed(x)))


def encode_image(x: Tensor, enc: VisionEncoder) -> ImageTokens:
    return enc(x)


class TextEncoder:
    def __init__(self, vocab_size: int, max_len: int = 64, dim: int = 32, heads: int = 4,
                 rng: Rng | None = None, dtype=np.float32):
        ps = ParamSet("text", rng or Rng(1), dtype)
        self.max_len, self.dim = max_len, dim
        self.tok_embed = ps.normal("tok_embed", (vocab_size, dim))
        self.pos_embed = ps.normal("pos_embed", (max_len, dim))
        self.block = Block(ps, "block", dim, heads)
        self.ln_final = LayerNorm(ps, "ln_final", dim)
        self.proj = ps.normal("proj", (dim, dim))
        self.params = ps.params
        self.truncated = 0

    def ids(self, slots: Sequence[Sequence[str]]) -> tuple[np.ndarray, np.ndarray]:
        """Right-padded id matrix and true lengths; over-long slots are truncated."""
        lens = []
        for s in slots:
            if not len(s):
                raise ValueError("empty text slot")
            if len(s) > self.max_len:
                self.truncated += 1
            lens.append(min(len(s), self.max_len))
        ids = np.zeros((len(slots), max(lens)), dtype=np.int64)
        for i, s in enumerate(slots):
            ids[i, :lens[i]] = [TOKEN_ID[t] if isinstance(t, str) else int(t) for t in s[:lens[i]]]
        return ids, np.asarray(lens)

    def encode_ids(self, ids: np.ndarray, lens: np.ndarray) -> Tensor:
        """(S, L) padded ids -> (S, D) final-position states."""
        s, width = ids.shape
        h = self.tok_embed.value[ids] + self.pos_embed.value[:width]
        mask = np.triu(np.full((width, width), MASK_VALUE), k=1)
        h = self.block(h, mask=mask)
        h = self.ln_final(h) @ self.proj.value
        flat = nx.reshape(h, (s * width, self.dim))
        return flat[np.arange(s) * width + lens - 1]

    def __call__(self, slots: Sequence[Sequence[str]]) -> Tensor:
        return self.encode_ids(*self.ids(slots))


def encode_texts(hierarchy, enc: TextEncoder) -> Tensor:
    """(K, D) bank, one independently encoded row per hierarchy slot."""
    return enc(hierarchy.slots)

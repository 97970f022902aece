"""Text-conditioned cross-attention pooling.

Each text query attends over an image's patch tokens. Unlike a standard
transformer block there is no residual from the query around attention: the
attention output is normalized, passed through a two-layer MLP, and the MLP
output is added back onto the attention output. There is no output
projection after the heads are concatenated, and queries and keys are not
normalized before attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoders import MLP, LayerNorm, ParamSet
from .numerics import DimensionError, Tensor
from .rng import Rng


def default_heads(dim: int) -> int:
    return 8 if dim >= 64 else 4


@dataclass
class PooledFeatures:
    V: Tensor  # (B, K, D)
    alphas: np.ndarray  # (B, K, h, N)


class PoolBlock:
    def __init__(self, dim: int = 32, heads: int | None = None, rng: Rng | None = None,
                 dtype=np.float32):
        heads = heads or default_heads(dim)
        if dim % heads:
            raise DimensionError(f"dim {dim} not divisible by {heads} heads")
        ps = ParamSet("pool", rng or Rng(2), dtype)
        self.dim, self.heads = dim, heads
        self.wq = ps.normal("wq", (dim, dim))
        self.wk = ps.normal("wk", (dim, dim))
        self.wv = ps.normal("wv", (dim, dim))
        self.ln = LayerNorm(ps, "ln", dim)
        self.mlp = MLP(ps, "mlp", dim)
        self.params = ps.params

    def attend(self, T: Tensor, P: Tensor) -> tuple[Tensor, Tensor]:
        """Concatenated per-head attention outputs (B, K, D) and weights (B*h, K, N)."""
        h = self.heads
        q = nx.split_heads(T @ self.wq.value, h)
        k = nx.split_heads(P @ self.wk.value, h)
        v = nx.split_heads(P @ self.wv.value, h)
        dh = self.dim // h
        alpha = nx.softmax(nx.scale(q @ nx.transpose(k), 1.0 / math.sqrt(dh)))
        return nx.merge_heads(alpha @ v, h), alpha

    def __call__(self, T: Tensor, P: Tensor) -> PooledFeatures:
        if T.ndim == 2:
            T = nx.reshape(T, (1, *T.shape))
        if P.ndim == 2:
            P = nx.reshape(P, (1, *P.shape))
        if T.shape[0] != P.shape[0] or T.shape[-1] != self.dim or P.shape[-1] != self.dim:
            raise DimensionError(f"queries {T.shape} vs patches {P.shape} (dim {self.dim})")
        if T.shape[1] < 1 or P.shape[1] < 1:
            raise DimensionError("need at least one query and one patch")
        pooled, alpha = self.attend(T, P)
        out = pooled + self.mlp(self.ln(pooled))
        b, k, n = T.shape[0], T.shape[1], P.shape[1]
        alphas = alpha.data.reshape(b, self.heads, k, n).transpose(0, 2, 1, 3)
        return PooledFeatures(out, alphas)

    def box_pool(self, patches: Tensor, indices) -> Tensor:
        """(D,) embedding of a patch subset under uniform attention weights.

        Averaging the values and sending the average through the MLP branch
        puts a region in the same space as the query-pooled features, which
        the raw patch tokens never enter during training.
        """
        p = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
        if p.ndim == 3:
            p = p[0]
        mean = p[np.asarray(list(indices))].mean(axis=0, keepdims=True).astype(self.wv.data.dtype)
        pooled = Tensor(mean) @ self.wv.value
        return (pooled + self.mlp(self.ln(pooled)))[0]


def cross_attention_pool(T: Tensor, P: Tensor, block: PoolBlock) -> PooledFeatures:
    return block(T, P)


def tci_embed(patches: Tensor, text: Tensor, block: PoolBlock) -> Tensor:
    """Single-query pooled embedding (D,) for one image."""
    t = nx.reshape(text, (1, 1, block.dim))
    p = patches if patches.ndim == 3 else nx.reshape(patches, (1, *patches.shape))
    return block(t, p).V[0, 0]

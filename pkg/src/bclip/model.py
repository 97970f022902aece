"""The assembled model: vision encoder, text encoder, pooling block, temperature."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .encoders import ImageTokens, TextEncoder, VisionEncoder
from .loss import INIT_LOG_SCALE
from .numerics import Param, Tensor
from .pooling import PoolBlock
from .rng import Rng
from .toyworld import VOCAB, WorldConfig

ACTIVATION = "gelu_tanh"


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 32
    vision_heads: int = 4
    vision_layers: int = 2
    text_heads: int = 4
    pool_heads: int = 0  # 0 -> 8 at dim >= 64, else 4
    max_len: int = 64
    init_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class BetaClip:
    def __init__(self, world: WorldConfig, cfg: ModelConfig = ModelConfig(), dtype=np.float32):
        self.world, self.cfg, self.dtype = world, cfg, np.dtype(dtype)
        root = Rng(cfg.init_seed)
        self.vision = VisionEncoder(world.d_in, world.grid_size ** 2, cfg.dim, cfg.vision_heads,
                                    cfg.vision_layers, rng=root.spawn(1), dtype=dtype)
        self.text = TextEncoder(len(VOCAB), cfg.max_len, cfg.dim, cfg.text_heads,
                                rng=root.spawn(2), dtype=dtype)
        self.pool = PoolBlock(cfg.dim, cfg.pool_heads or None, rng=root.spawn(3), dtype=dtype)
        self.log_scale = Param(Tensor(np.asarray(INIT_LOG_SCALE, dtype=dtype)), "logit_scale")

    def params(self) -> dict[str, Param]:
        out: dict[str, Param] = {}
        for part in (self.vision.params, self.text.params, self.pool.params):
            out.update(part)
        out[self.log_scale.name] = self.log_scale
        return out

    def is_pool_param(self, name: str) -> bool:
        """Parameters of the freshly added pieces (pooling block, temperature)."""
        return name.startswith("pool.") or name == self.log_scale.name

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.value.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.params()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            a = np.asarray(arrays[k])
            if a.shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {a.shape} vs model {p.shape}")
            p.value.data = a.astype(self.dtype).copy()

    # --- forward pieces ------------------------------------------------

    def encode_images(self, x) -> ImageTokens:
        return self.vision(nx.as_tensor(np.asarray(x, dtype=self.dtype) if not isinstance(x, Tensor) else x))

    def encode_slots(self, slots: Sequence[Sequence[str]]) -> Tensor:
        return self.text(slots)

    def encode_banks(self, hierarchies) -> Tensor:
        """(B, K, D) text banks. Captions and shorter slots are encoded in two
        padded groups to limit padding; each slot is still encoded alone."""
        K = hierarchies[0].K
        if any(h.K != K for h in hierarchies):
            raise ValueError("all hierarchies in a batch must share K")
        B = len(hierarchies)
        caps = self.text([h.caption for h in hierarchies])
        if K == 1:
            return nx.reshape(caps, (B, 1, caps.shape[-1]))
        rest = self.text([s for h in hierarchies for s in h.slots[1:]])
        both = nx.concat([caps, rest], axis=0)
        order = np.empty(B * K, dtype=np.int64)
        for b in range(B):
            order[b * K] = b
            order[b * K + 1:(b + 1) * K] = B + b * (K - 1) + np.arange(K - 1)
        return nx.reshape(both[order], (B, K, caps.shape[-1]))

"""Contextualized contrastive alignment losses over a flattened BK x BK grid.

Rows of the similarity matrix are text-conditioned visual features, columns
are text embeddings, both flattened image-major then slot-minor. Items i and
j belong to the same image when ``i // K == j // K``.

Soft-target mode (CE): weights are 1 on the diagonal, ``beta`` for the other
slots of the same image and 0 across images; rows are normalized into target
distributions for a symmetric softmax cross-entropy.

Hard-target mode (BCE): every same-image pair is a positive (y = 1), and the
per-pair sigmoid cross-entropy is weighted by 1 on the diagonal, ``beta``
for other same-image pairs and 1 across images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import ConfigError, NonFiniteError, Tensor
from .rng import Rng

INIT_LOG_SCALE = math.log(1 / 0.07)
MAX_SCALE = 100.0
MODES = ("ce", "bce")


@dataclass(frozen=True)
class Calibration:
    """Off-diagonal same-image weight ``beta * exp(-lam * d(i, j))``.

    ``distance="index"`` uses the slot index gap; ``"level"`` uses the gap
    between granularity levels (caption 0, sentence 1, phrase 2).
    """

    lam: float = 0.05
    distance: str = "index"

    def __post_init__(self):
        if self.distance not in ("index", "level"):
            raise ConfigError(f"unknown calibration distance {self.distance!r}")
        if self.lam < 0:
            raise ConfigError("calibration lambda must be >= 0")


@dataclass
class SimilarityBlock:
    S: Tensor
    scale: Tensor
    B: int
    K: int
    row_meta: list = field(default_factory=list)  # (image, slot, level) per row
    col_meta: list = field(default_factory=list)

    @property
    def n_extra(self) -> int:
        return self.S.shape[0] - self.B * self.K


@dataclass
class TargetMatrix:
    mode: str
    beta: float
    w: np.ndarray
    p: np.ndarray | None = None
    y: np.ndarray | None = None
    calibration: Calibration | None = None
    B: int = 0
    K: int = 0

    def with_extra_rows(self, n: int) -> "TargetMatrix":
        """Append ``n`` negative-only visual rows (p = 0; y = 0 with w = 1)."""
        if n == 0:
            return self
        cols = self.w.shape[1]
        w = np.vstack([self.w, np.ones((n, cols)) if self.mode == "bce" else np.zeros((n, cols))])
        p = None if self.p is None else np.vstack([self.p, np.zeros((n, cols))])
        y = None if self.y is None else np.vstack([self.y, np.zeros((n, cols))])
        return TargetMatrix(self.mode, self.beta, w, p, y, self.calibration, self.B, self.K)


@dataclass
class LossReport:
    l_v2t: float
    l_t2v: float
    l_beta_cal: float
    l_global: float = 0.0
    l_total: float = 0.0
    f_diag: float = 1.0
    aux: dict = field(default_factory=dict)
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("l_v2t", "l_t2v", "l_beta_cal", "l_global", "l_total", "f_diag")}


# --------------------------------------------------------------------------
# similarity
# --------------------------------------------------------------------------


def logit_scale(log_scale) -> Tensor:
    log_scale = nx.as_tensor(log_scale)
    return nx.clamp_max(nx.exp(log_scale), MAX_SCALE)


def _flat(x: Tensor) -> Tensor:
    return nx.reshape(x, (-1, x.shape[-1])) if x.ndim == 3 else x


def build_similarity(V: Tensor, T: Tensor, log_scale, B: int | None = None,
                     K: int | None = None, V_extra: Tensor | None = None,
                     level_of: Sequence[int] | None = None) -> SimilarityBlock:
    """S = scale * cos(v_i, t_j); optional extra visual rows are appended below."""
    if V.ndim == 3:
        B, K = V.shape[0], V.shape[1]
    if B is None or K is None:
        raise ValueError("B and K are required for flat inputs")
    Vf, Tf = _flat(V), _flat(T)
    if Vf.shape != Tf.shape or Vf.shape[0] != B * K:
        raise nx.DimensionError(f"visual {Vf.shape} vs text {Tf.shape} for B={B}, K={K}")
    if V_extra is not None:
        Vf = nx.concat([Vf, _flat(V_extra)], axis=0)
    scale = logit_scale(log_scale if not isinstance(log_scale, nx.Param) else log_scale.value)
    S = nx.matmul(nx.l2_normalize(Vf), nx.transpose(nx.l2_normalize(Tf))) * scale
    lv = list(level_of) if level_of is not None else [0] + [1] * (K - 1)
    cols = [(i // K, i % K, lv[i % K]) for i in range(B * K)]
    rows = cols + [(-1, -1, -1)] * (Vf.shape[0] - B * K)
    return SimilarityBlock(S, scale, B, K, rows, cols)


def diag_fraction(K: int, beta: float) -> float:
    if K < 1 or not 0 <= beta <= 1:
        raise ConfigError(f"need K >= 1 and beta in [0, 1], got K={K}, beta={beta}")
    return 1.0 / (1.0 + (K - 1) * beta)


# --------------------------------------------------------------------------
# targets
# --------------------------------------------------------------------------


def _check(B: int, K: int, beta: float) -> None:
    if B < 1 or K < 1:
        raise ConfigError(f"B and K must be >= 1, got B={B}, K={K}")
    if not 0 <= beta <= 1:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")


def intra_block(K: int, beta: float, calibration: Calibration | None = None,
                level_of: Sequence[int] | None = None) -> np.ndarray:
    """K x K same-image weights: 1 on the diagonal, beta (maybe decayed) elsewhere."""
    idx = np.arange(K)
    if calibration is None:
        block = np.full((K, K), float(beta))
    else:
        if calibration.distance == "index":
            d = np.abs(idx[:, None] - idx[None, :])
        else:
            lv = np.asarray(level_of if level_of is not None else [0] + [1] * (K - 1))
            d = np.abs(lv[:, None] - lv[None, :])
        block = beta * np.exp(-calibration.lam * d)
    block[idx, idx] = 1.0
    return block


def same_image(B: int, K: int) -> np.ndarray:
    img = np.arange(B * K) // K
    return img[:, None] == img[None, :]


def build_ce_targets(B: int, K: int, beta: float, calibration: Calibration | None = None,
                     level_of: Sequence[int] | None = None) -> TargetMatrix:
    _check(B, K, beta)
    w = np.kron(np.eye(B), intra_block(K, beta, calibration, level_of))
    if calibration is None:
        # closed-form row mass keeps the diagonal bit-equal to diag_fraction
        p = w / (1.0 + (K - 1) * beta)
    else:
        p = w / w.sum(axis=1, keepdims=True)
    return TargetMatrix("ce", beta, w, p=p, calibration=calibration, B=B, K=K)


def build_bce_targets(B: int, K: int, beta: float, calibration: Calibration | None = None,
                      level_of: Sequence[int] | None = None) -> TargetMatrix:
    _check(B, K, beta)
    same = same_image(B, K)
    w = np.where(same, np.kron(np.eye(B), intra_block(K, beta, calibration, level_of)), 1.0)
    return TargetMatrix("bce", beta, w, y=same.astype(np.float64), calibration=calibration, B=B, K=K)


def build_targets(mode: str, B: int, K: int, beta: float, calibration=None, level_of=None) -> TargetMatrix:
    if mode == "ce":
        return build_ce_targets(B, K, beta, calibration, level_of)
    if mode == "bce":
        return build_bce_targets(B, K, beta, calibration, level_of)
    raise ConfigError(f"unknown loss mode {mode!r}")


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def _const(a: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(a.astype(like.dtype))


def ce_loss(sim: SimilarityBlock, tgt: TargetMatrix) -> LossReport:
    if tgt.mode != "ce":
        raise ConfigError("ce_loss needs soft (CE) targets")
    S, n = sim.S, sim.B * sim.K
    tgt = tgt.with_extra_rows(S.shape[0] - tgt.p.shape[0])
    p = _const(tgt.p, S)
    pt = _const(np.ascontiguousarray(tgt.p.T), S)
    l_v2t = nx.scale(nx.sum(p * nx.log_softmax(S)), -1.0 / n)
    l_t2v = nx.scale(nx.sum(pt * nx.log_softmax(nx.transpose(S))), -1.0 / n)
    return _report(l_v2t, l_t2v, sim.K, tgt.beta)


def bce_loss(sim: SimilarityBlock, tgt: TargetMatrix) -> LossReport:
    """Weighted sigmoid cross-entropy, stable form max(x,0) - x*y + log1p(e^-|x|)."""
    if tgt.mode != "bce":
        raise ConfigError("bce_loss needs hard (BCE) targets")
    S, n = sim.S, sim.B * sim.K
    tgt = tgt.with_extra_rows(S.shape[0] - tgt.y.shape[0])
    w, y = _const(tgt.w, S), _const(tgt.y, S)
    wt, yt = _const(np.ascontiguousarray(tgt.w.T), S), _const(np.ascontiguousarray(tgt.y.T), S)
    St = nx.transpose(S)
    l_v2t = nx.scale(nx.sum(w * (nx.softplus(S) - y * S)), 1.0 / n)
    l_t2v = nx.scale(nx.sum(wt * (nx.softplus(St) - yt * St)), 1.0 / n)
    return _report(l_v2t, l_t2v, sim.K, tgt.beta)


def _report(l_v2t: Tensor, l_t2v: Tensor, K: int, beta: float) -> LossReport:
    cal = nx.scale(l_v2t + l_t2v, 0.5)
    return LossReport(l_v2t.item(), l_t2v.item(), cal.item(), 0.0, cal.item(),
                      diag_fraction(K, beta), tensor=cal)


def global_loss(cls: Tensor, captions: Tensor, log_scale) -> Tensor:
    """Symmetric InfoNCE between global image tokens and full-caption embeddings."""
    B = cls.shape[0]
    scale = logit_scale(log_scale.value if isinstance(log_scale, nx.Param) else log_scale)
    S = nx.matmul(nx.l2_normalize(cls), nx.transpose(nx.l2_normalize(captions))) * scale
    eye = _const(np.eye(B), S)
    rows = nx.sum(eye * nx.log_softmax(S))
    cols = nx.sum(eye * nx.log_softmax(nx.transpose(S)))
    return nx.scale(rows + cols, -0.5 / B)


def total_loss(cal, glob) -> LossReport:
    """β-CAL plus the global term, unweighted."""
    cal_t = cal.tensor if isinstance(cal, LossReport) else cal
    cal_v = cal.l_beta_cal if isinstance(cal, LossReport) else float(nx.as_tensor(cal).item())
    glob_v = float(glob.item()) if isinstance(glob, Tensor) else float(glob)
    if not (math.isfinite(cal_v) and math.isfinite(glob_v)):
        raise NonFiniteError("non-finite loss component")
    if isinstance(cal, LossReport):
        base = cal
    else:
        base = LossReport(cal_v, cal_v, cal_v)
    tensor = None
    if isinstance(cal_t, Tensor):
        tensor = cal_t + glob if isinstance(glob, Tensor) else cal_t + glob_v
    return LossReport(base.l_v2t, base.l_t2v, cal_v, glob_v, cal_v + glob_v, base.f_diag,
                      dict(base.aux), tensor=tensor)


def alignment_loss(sim: SimilarityBlock, mode: str, beta: float,
                   calibration: Calibration | None = None,
                   level_of: Sequence[int] | None = None) -> LossReport:
    tgt = build_targets(mode, sim.B, sim.K, beta, calibration, level_of)
    return ce_loss(sim, tgt) if mode == "ce" else bce_loss(sim, tgt)


# --------------------------------------------------------------------------
# text-conditioned negatives
# --------------------------------------------------------------------------


def sample_conditioned_negatives(B: int, level_of: Sequence[int], levels, rng: Rng
                                 ) -> list[tuple[int, int, int]]:
    """(image, source image, source slot) triples; one per image per enabled level.

    Levels with no slot in the hierarchy are skipped.
    """
    levels = sorted({int(lv) for lv in levels})
    if not levels:
        return []
    if B < 2:
        raise ConfigError("text-conditioned negatives need B >= 2")
    picks = []
    for lv in levels:
        slots = [k for k, l in enumerate(level_of) if int(l) == lv]
        if not slots:
            continue
        for b in range(B):
            src = int(rng.integers(B - 1))
            src += src >= b
            picks.append((b, src, slots[int(rng.integers(len(slots)))]))
    return picks


def augment_conditioned_negatives(T: Tensor, P: Tensor, block, level_of: Sequence[int],
                                  levels, rng: Rng) -> tuple[Tensor | None, list]:
    """Pool other images' texts against each image's patches.

    Returns extra visual rows (E, D) in image-major order plus the matching
    (image, source image, source slot) picks, or (None, []) when no level
    is enabled.
    """
    B = T.shape[0]
    picks = sample_conditioned_negatives(B, level_of, levels, rng)
    if not picks:
        return None, []
    per_image = len(picks) // B
    order = sorted(range(len(picks)), key=lambda i: (picks[i][0], i))
    flat = nx.reshape(T, (-1, T.shape[-1]))
    K = T.shape[1]
    idx = np.array([picks[i][1] * K + picks[i][2] for i in order])
    queries = nx.reshape(flat[idx], (B, per_image, T.shape[-1]))
    V = block(queries, P).V
    return nx.reshape(V, (-1, T.shape[-1])), [picks[i] for i in order]

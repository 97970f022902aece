"""Retrieval, region matching, attention localization, diversity and heatmaps.

Ranking ties are broken toward the lower index, so a query whose true match
ties with an earlier candidate counts as ranked below it.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .decompose import assemble_hierarchy
from .encoders import ImageTokens, TextEncoder
from .loss import logit_scale
from .numerics import Tensor
from .pooling import PooledFeatures
from .rng import Rng
from .toyworld import RegionAnnotation, Sample, render_patch_input

EVAL_KEY = 303


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        bad = np.argwhere(n[..., 0] == 0)[0].tolist()
        raise ValueError(f"zero-norm embedding at index {bad}")
    return x / n


@dataclass
class RetrievalReport:
    r_at: dict = field(default_factory=dict)  # {"t2i": {k: r}, "i2t": {k: r}}
    n_queries: int = 0

    def flat(self, prefix: str = "") -> dict:
        return {f"{prefix}{d}_r@{k}": v for d, rs in self.r_at.items() for k, v in rs.items()}


def true_ranks(scores: np.ndarray) -> np.ndarray:
    """Rank of column i within row i (0 = best), ties going to the lower index."""
    m = scores.shape[0]
    true = scores[np.arange(m), np.arange(m)][:, None]
    idx = np.arange(m)
    better = (scores > true) | ((scores == true) & (idx[None, :] < idx[:, None]))
    return better.sum(axis=1)


def recall_from_scores(scores: np.ndarray, ks: Sequence[int] = (1, 5)) -> RetrievalReport:
    """``scores[i, j]`` scores image i against text j; row i of each side is a pair."""
    scores = np.asarray(scores)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ValueError(f"need a square score matrix, got {scores.shape}")
    m = scores.shape[0]
    if m == 0:
        raise ValueError("no queries")
    i2t = true_ranks(scores)
    t2i = true_ranks(scores.T)
    return RetrievalReport({
        "t2i": {k: float(np.mean(t2i < k)) for k in ks},
        "i2t": {k: float(np.mean(i2t < k)) for k in ks},
    }, m)


def recall_at_k(image_embs, text_embs, ks: Sequence[int] = (1, 5)) -> RetrievalReport:
    img, txt = _arr(image_embs), _arr(text_embs)
    if img.shape[0] == 0:
        raise ValueError("no queries")
    if img.shape != txt.shape:
        raise ValueError(f"image {img.shape} vs text {txt.shape}")
    return recall_from_scores(_unit(img) @ _unit(txt).T, ks)


def region_feature(patches, region: RegionAnnotation, grid_size: int, head=None) -> np.ndarray:
    """L2-normalized embedding of the patches inside the box.

    Without ``head`` this is the plain mean of the patch tokens. With a pooling
    block the box is pooled under uniform attention, which lands it in the
    space that text embeddings are compared against.
    """
    idx = region.patch_indices(grid_size)
    if head is not None:
        with nx.no_grad():
            return _unit(_arr(head.box_pool(nx.as_tensor(patches), idx)))
    p = _arr(patches)
    if p.ndim == 3:
        p = p[0]
    return _unit(p[idx].mean(axis=0))


def region_match(image: ImageTokens, region: RegionAnnotation, candidates: Sequence[Sequence[str]],
                 enc: TextEncoder, grid_size: int, head=None) -> int:
    """Rank (0 = top) of ``candidates[0]`` among all candidates for this region."""
    pos = list(candidates[0])
    if any(list(c) == pos for c in candidates[1:]):
        raise ValueError(f"positive {' '.join(pos)!r} also appears among the negatives")
    feat = region_feature(image.patches, region, grid_size, head)
    with nx.no_grad():
        t = _unit(_arr(enc([list(c) for c in candidates])))
    s = t @ feat
    return int(np.sum(s > s[0]))


def attention_hit(alphas: np.ndarray, region: RegionAnnotation, grid_size: int) -> bool:
    """Does the head-averaged attention argmax (lowest index on ties) fall in the box?"""
    a = np.asarray(alphas)
    if a.ndim == 2:
        a = a.mean(axis=0)
    return int(np.argmax(a)) in set(region.patch_indices(grid_size))


def sim_diversity(V) -> float:
    """Mean over images of the mean pairwise cosine among its K pooled features."""
    v = _arr(V.V if isinstance(V, PooledFeatures) else V)
    if v.ndim == 2:
        v = v[None]
    B, K = v.shape[:2]
    if K < 2:
        raise ValueError("sim_diversity needs K >= 2")
    u = _unit(v)
    g = np.einsum("bkd,bjd->bkj", u, u)
    off = (g.sum(axis=(1, 2)) - np.trace(g, axis1=1, axis2=2)) / (K * (K - 1))
    return float(off.mean())


def tci_scores(model, patches, captions) -> np.ndarray:
    """(M, M) cosine between each image's caption-conditioned embedding and the caption."""
    P, T = _arr(patches), _arr(captions)
    m = P.shape[0]
    out = np.empty((m, m))
    tq = Tensor(T[None].astype(model.dtype))
    tu = _unit(T)
    with nx.no_grad():
        for i in range(m):
            V = model.pool(tq, Tensor(P[i:i + 1].astype(model.dtype))).V.data[0]
            out[i] = np.sum(_unit(V.astype(np.float64)) * tu, axis=1)
    return out


def tci_retrieval(model, samples: Sequence[Sample], ks: Sequence[int] = (1, 5)) -> RetrievalReport:
    img, caps = encode_eval_set(model, samples)
    return recall_from_scores(tci_scores(model, img.patches, caps), ks)


def heatmap(patches, text_emb, scale: float = 1.0) -> np.ndarray:
    """G x G grid of scale * cos(patch, text)."""
    p = _arr(patches)
    if p.ndim == 3:
        p = p[0]
    t = _arr(text_emb).reshape(-1)
    g = int(round(np.sqrt(p.shape[0])))
    if g * g != p.shape[0]:
        raise ValueError(f"{p.shape[0]} patches do not form a square grid")
    tn = np.linalg.norm(t)
    pn = np.linalg.norm(p, axis=1)
    denom = np.where(pn * tn == 0, 1.0, pn * tn)
    return (scale * (p @ t) / denom).reshape(g, g)


def export_heatmap(patches, text_emb, path: str | Path, scale: float = 1.0,
                   pgm_path: str | Path | None = None) -> np.ndarray:
    h = heatmap(patches, text_emb, scale)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            for row in h:
                fh.write(",".join(f"{v:.6f}" for v in row) + "\n")
        if pgm_path is not None:
            lo, hi = h.min(), h.max()
            norm = np.zeros_like(h) if hi == lo else (h - lo) / (hi - lo)
            px = np.round(norm * 255).astype(np.uint8)
            with open(pgm_path, "wb") as fh:
                fh.write(f"P5\n{h.shape[1]} {h.shape[0]}\n255\n".encode("ascii"))
                fh.write(px.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write heatmap {exc.filename or path}: {exc.strerror or exc}") from exc
    return h


def read_heatmap_csv(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


# --------------------------------------------------------------------------
# whole-model evaluation
# --------------------------------------------------------------------------


def encode_eval_set(model, samples: Sequence[Sample], chunk: int = 128) -> tuple[ImageTokens, np.ndarray]:
    """Image tokens and caption embeddings for a list of samples, without graphs."""
    cls, patches, caps = [], [], []
    with nx.no_grad():
        for a in range(0, len(samples), chunk):
            part = samples[a:a + chunk]
            X = np.stack([render_patch_input(s.scene, model.world, model.dtype).data for s in part])
            img = model.encode_images(X)
            cls.append(img.cls.data)
            patches.append(img.patches.data)
            caps.append(model.text([s.captions.caption for s in part]).data)
    return ImageTokens(Tensor(np.concatenate(cls)), Tensor(np.concatenate(patches))), np.concatenate(caps)


def evaluate_model(model, samples: Sequence[Sample], k_sent: int = 5, k_phrase: int = 0,
                   seed: int = 0, tci: bool = False) -> dict:
    """Every scalar metric for one model on one evaluation split."""
    if not samples:
        raise ValueError("evaluation set is empty")
    g = model.world.grid_size
    img, caps = encode_eval_set(model, samples)
    metrics = recall_at_k(img.cls, caps).flat("cls_")
    hits = raw_hits = 0
    attn_hits = n_regions = 0
    pooled = []
    rng = Rng(seed).spawn(EVAL_KEY)
    with nx.no_grad():
        for i, s in enumerate(samples):
            P = img.patches[i:i + 1]
            queries = [s.captions.phrases[a.phrase_index] for a in s.annotations]
            if queries:
                q = model.text(queries)
                alphas = model.pool(nx.reshape(q, (1, len(queries), q.shape[-1])), P).alphas[0]
            for j, (a, negs) in enumerate(zip(s.annotations, s.captions.hard_negatives)):
                cand = [s.captions.phrases[a.phrase_index], *negs]
                tokens = ImageTokens(img.cls[i], P)
                hits += region_match(tokens, a, cand, model.text, g, model.pool) == 0
                raw_hits += region_match(tokens, a, cand, model.text, g) == 0
                attn_hits += attention_hit(alphas[j], a, g)
                n_regions += 1
            if 1 + k_sent + k_phrase >= 2:
                h = assemble_hierarchy(s.captions.caption, s.captions.sentences, s.captions.phrases,
                                       k_sent, k_phrase, rng)
                T = model.text(h.slots)
                pooled.append(model.pool(nx.reshape(T, (1, *T.shape)), P).V.data[0])
    if n_regions:
        metrics["region_match"] = hits / n_regions
        metrics["region_match_raw"] = raw_hits / n_regions
        metrics["attention_hit"] = attn_hits / n_regions
    if pooled:
        metrics["sim_diversity"] = sim_diversity(np.stack(pooled))
    if tci:
        metrics.update(recall_from_scores(tci_scores(model, img.patches, caps)).flat("tci_"))
    metrics["logit_scale"] = float(logit_scale(model.log_scale.value).item())
    return metrics


def write_metrics_jsonl(path: str | Path, step: int, metrics: dict, mode: str = "a") -> None:
    with open(path, mode, encoding="utf-8") as fh:
        for name, value in metrics.items():
            fh.write(json.dumps({"step": step, "metric": name, "value": value}) + "\n")


def write_summary_csv(path: str | Path, metrics: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for name in sorted(metrics):
            w.writerow([name, f"{metrics[name]:.6f}"])

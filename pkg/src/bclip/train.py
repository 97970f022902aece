"""AdamW, the training step, the training loop and the checkpoint format.

Gradient accumulation caches encoder outputs: every micro-batch is encoded
without a graph, the loss over the whole effective batch is differentiated
with respect to those outputs, and each micro-batch is then re-encoded and
back-propagated with its slice of the cached gradients. The result equals a
single step over the effective batch (up to float summation order), which a
per-micro-batch contrastive loss could not provide.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .decompose import CaptionHierarchy, Level, assemble_hierarchy
from .loss import (MODES, Calibration, ConfigError, LossReport, alignment_loss,
                   augment_conditioned_negatives, build_similarity, global_loss, total_loss)
from .model import ACTIVATION, BetaClip, ModelConfig
from .numerics import Tensor
from .rng import Rng
from .toyworld import Sample, WorldConfig, render_patch_input

MAGIC = b"BCLP"
VERSION = 1
_EPOCH_KEY, _STEP_KEY = 101, 202
LEVEL_NAMES = {"caption": Level.CAPTION, "sentence": Level.SENTENCE, "phrase": Level.PHRASE}


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1500  # > 0 overrides epochs
    epochs: int = 0
    micro_batch: int = 64
    accum_steps: int = 1
    seed: int = 0
    k_sent: int = 5
    k_phrase: int = 0
    beta: float = 0.5
    mode: str = "ce"
    calibration: str = "none"  # none | index | level
    cal_lambda: float = 0.05
    neg_levels: tuple = ()  # subset of caption / sentence / phrase
    lr: float = 1e-4
    lr_pool: float = 1e-3
    min_lr_frac: float = 0.1
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6
    eval_every: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must lie in [0, 1), got {self.warmup_frac}")
        if self.micro_batch < 1 or self.accum_steps < 1:
            raise ConfigError("micro_batch and accum_steps must be >= 1")
        if self.k_sent < 0 or self.k_phrase < 0:
            raise ConfigError("k_sent and k_phrase must be >= 0")
        if self.steps < 0 or self.epochs < 0:
            raise ConfigError("steps and epochs must be >= 0")
        if self.calibration not in ("none", "index", "level"):
            raise ConfigError(f"calibration must be none, index or level, got {self.calibration!r}")
        for lv in self.neg_levels:
            if lv not in LEVEL_NAMES:
                raise ConfigError(f"unknown negative level {lv!r}")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accum_steps

    @property
    def K(self) -> int:
        return 1 + self.k_sent + self.k_phrase

    def calibration_obj(self) -> Calibration | None:
        if self.calibration == "none":
            return None
        return Calibration(self.cal_lambda, self.calibration)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["neg_levels"] = list(self.neg_levels)
        return d


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    rejected: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.01

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "OptimizerState":
        return cls(beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps,
                   weight_decay=cfg.weight_decay)


def adamw_step(params: dict, grads: dict, state: OptimizerState,
               lr: float | Callable[[str], float]) -> bool:
    """One AdamW update in place. Returns False (and counts it) if any grad is non-finite.

    Decoupled weight decay is applied to matrices only; gains, biases and
    the temperature are not decayed.
    """
    for g in grads.values():
        if g is not None and not np.all(np.isfinite(g)):
            state.rejected += 1
            return False
    lr_for = lr if callable(lr) else (lambda _name: lr)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if not p.trainable:
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p.data), np.zeros_like(p.data)
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        step_lr = lr_for(name)
        data = p.value.data
        if state.weight_decay and data.ndim >= 2:
            data = data * (1 - step_lr * state.weight_decay)
        p.value.data = (data - step_lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(data.dtype)
    return True


def lr_factor(step: int, total: int, warmup_frac: float, min_frac: float) -> float:
    """Linear warmup over a fraction of all steps, then cosine decay to ``min_frac``."""
    warm = int(round(warmup_frac * total))
    if step < warm:
        return (step + 1) / warm
    progress = (step - warm) / max(1, total - warm)
    return min_frac + (1.0 - min_frac) * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


# --------------------------------------------------------------------------
# one step
# --------------------------------------------------------------------------


def hierarchies_for(batch: Sequence[Sample], cfg: TrainConfig, rng: Rng) -> list[CaptionHierarchy]:
    return [assemble_hierarchy(s.captions.caption, s.captions.sentences, s.captions.phrases,
                               cfg.k_sent, cfg.k_phrase, rng) for s in batch]


def batch_inputs(batch: Sequence[Sample], world: WorldConfig, dtype) -> np.ndarray:
    return np.stack([render_patch_input(s.scene, world, dtype=dtype).data for s in batch])


def head_loss(model: BetaClip, P: Tensor, cls: Tensor, T: Tensor, level_of, cfg: TrainConfig,
              rng: Rng) -> LossReport:
    """Pooling, similarity, β-CAL and global loss from encoder outputs."""
    pooled = model.pool(T, P)
    levels = [LEVEL_NAMES[n] for n in cfg.neg_levels]
    V_extra, picks = augment_conditioned_negatives(T, P, model.pool, level_of, levels, rng)
    sim = build_similarity(pooled.V, T, model.log_scale.value, V_extra=V_extra, level_of=level_of)
    cal = alignment_loss(sim, cfg.mode, cfg.beta, cfg.calibration_obj(), level_of)
    glob = global_loss(cls, T[:, 0, :], model.log_scale.value)
    rep = total_loss(cal, glob)
    rep.aux["conditioned_negatives"] = len(picks)
    return rep


def compute_gradients(model: BetaClip, batch: Sequence[Sample], cfg: TrainConfig,
                      rng: Rng) -> LossReport:
    """Forward and backward over one effective batch; grads land on the params."""
    hier = hierarchies_for(batch, cfg, rng)
    K = hier[0].K
    if any(h.K != K for h in hier):
        raise ValueError("hierarchies in a batch must share K")
    level_of = [int(lv) for lv in hier[0].level_of]
    X = batch_inputs(batch, model.world, model.dtype)

    if cfg.accum_steps == 1:
        img = model.encode_images(Tensor(X))
        T = model.encode_banks(hier)
        rep = head_loss(model, img.patches, img.cls, T, level_of, cfg, rng)
        rep.tensor.backward()
        return rep

    bounds = np.linspace(0, len(batch), cfg.accum_steps + 1).astype(int)
    chunks = [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with nx.no_grad():
        outs = []
        for a, b in chunks:
            img = model.encode_images(Tensor(X[a:b]))
            outs.append((img.patches.data, img.cls.data, model.encode_banks(hier[a:b]).data))
    P = Tensor(np.concatenate([o[0] for o in outs]), requires_grad=True)
    C = Tensor(np.concatenate([o[1] for o in outs]), requires_grad=True)
    T = Tensor(np.concatenate([o[2] for o in outs]), requires_grad=True)
    rep = head_loss(model, P, C, T, level_of, cfg, rng)
    rep.tensor.backward()
    for a, b in chunks:
        img = model.encode_images(Tensor(X[a:b]))
        Tc = model.encode_banks(hier[a:b])
        surrogate = (nx.sum(img.patches * Tensor(P.grad[a:b])) + nx.sum(img.cls * Tensor(C.grad[a:b]))
                     + nx.sum(Tc * Tensor(T.grad[a:b])))
        surrogate.backward()
    return rep


def train_step(batch: Sequence[Sample], model: BetaClip, cfg: TrainConfig, state: OptimizerState,
               rng: Rng, lr_scale: float = 1.0) -> LossReport:
    model.zero_grad()
    rep = compute_gradients(model, batch, cfg, rng)
    params = model.params()
    grads = {k: p.grad for k, p in params.items()}

    def lr_for(name: str) -> float:
        return lr_scale * (cfg.lr_pool if model.is_pool_param(name) else cfg.lr)

    rep.aux["applied"] = adamw_step(params, grads, state, lr_for)
    model.zero_grad()
    return rep


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: BetaClip
    state: OptimizerState
    history: list = field(default_factory=list)
    seconds: float = 0.0


def total_steps(cfg: TrainConfig, n_train: int) -> int:
    if cfg.steps > 0:
        return cfg.steps
    return cfg.epochs * max(1, n_train // cfg.effective_batch)


def batch_indices(step: int, n: int, cfg: TrainConfig) -> np.ndarray:
    eff = cfg.effective_batch
    per_epoch = n // eff
    epoch, pos = divmod(step, per_epoch)
    perm = Rng(cfg.seed).spawn(_EPOCH_KEY, epoch).permutation(n)
    return perm[pos * eff:(pos + 1) * eff]


def run_training(train: Sequence[Sample], cfg: TrainConfig, model: BetaClip,
                 state: OptimizerState | None = None, out_dir: str | Path | None = None,
                 evaluate: Callable[[BetaClip, int], dict] | None = None,
                 stop_at: int | None = None, config_echo: dict | None = None) -> TrainResult:
    """Train from ``state.step`` up to the scheduled total (or ``stop_at``).

    Data order and every sampling decision depend only on (seed, step), so a
    run resumed from a checkpoint continues exactly where it stopped.
    """
    cfg.validate()
    if not train:
        raise ValueError("training set is empty")
    total = total_steps(cfg, len(train))
    if total and len(train) < cfg.effective_batch:
        raise ValueError(f"{len(train)} training scenes < effective batch {cfg.effective_batch}")
    state = state or OptimizerState.from_config(cfg)
    end = total if stop_at is None else min(stop_at, total)
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "a", encoding="utf-8")
    result = TrainResult(model, state)
    t0 = time.perf_counter()
    try:
        for step in range(state.step, end):
            idx = batch_indices(step, len(train), cfg)
            rng = Rng(cfg.seed).spawn(_STEP_KEY, step)
            scale = lr_factor(step, total, cfg.warmup_frac, cfg.min_lr_frac)
            rep = train_step([train[i] for i in idx], model, cfg, state, rng, scale)
            result.history.append(rep.as_dict())
            if metrics_fh:
                metrics_fh.write(json.dumps({"step": step + 1, "metric": "l_total",
                                             "value": rep.l_total}) + "\n")
            if evaluate and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                for name, value in evaluate(model, step + 1).items():
                    if metrics_fh:
                        metrics_fh.write(json.dumps({"step": step + 1, "metric": name,
                                                     "value": value}) + "\n")
    finally:
        if metrics_fh:
            metrics_fh.close()
    result.seconds = time.perf_counter() - t0
    if out is not None:
        save_checkpoint(out / "checkpoint.bclp", model, state, config_echo or {"train": cfg.to_dict()})
    return result


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: BetaClip, state: OptimizerState | None = None,
                    config: dict | None = None) -> None:
    """Magic, u32 version, u32 header length, JSON header, then float32 LE tensors."""
    arrays = dict(model.state_arrays())
    opt = None
    if state is not None:
        for k in model.params():
            if k in state.m:
                arrays[f"optim.m.{k}"] = state.m[k]
                arrays[f"optim.v.{k}"] = state.v[k]
        opt = {"step": state.step, "rejected": state.rejected, "beta1": state.beta1,
               "beta2": state.beta2, "eps": state.eps, "weight_decay": state.weight_decay}
    header = {
        "version": VERSION,
        "tensors": [{"name": k, "shape": list(a.shape)} for k, a in arrays.items()],
        "activation": ACTIVATION,
        "mlp_ratio": 4,
        "qk_skip": "final_vision_block",
        "pool_output_projection": False,
        "model": model.cfg.to_dict(),
        "world": asdict(model.world),
        "optimizer": opt,
        "config": config or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", VERSION, len(blob)))
            fh.write(blob)
            for a in arrays.values():
                fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror or exc}") from exc


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    arrays, off = {}, 12 + hlen
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        arrays[t["name"]] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(t["shape"]).copy()
        off += 4 * n
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return header, arrays


def load_checkpoint(path: str | Path, dtype=np.float32) -> tuple[BetaClip, OptimizerState | None, dict]:
    header, arrays = read_checkpoint(path)
    world = WorldConfig(**header["world"])
    model = BetaClip(world, ModelConfig(**header["model"]), dtype=dtype)
    model.load_arrays({k: v for k, v in arrays.items() if not k.startswith("optim.")})
    state = None
    if header.get("optimizer"):
        o = header["optimizer"]
        state = OptimizerState(step=o["step"], rejected=o["rejected"], beta1=o["beta1"],
                               beta2=o["beta2"], eps=o["eps"], weight_decay=o["weight_decay"])
        for k in model.params():
            if f"optim.m.{k}" in arrays:
                state.m[k] = arrays[f"optim.m.{k}"].astype(dtype)
                state.v[k] = arrays[f"optim.v.{k}"].astype(dtype)
    return model, state, header

"""Command line: generate, decompose, train, eval, inspect-targets, heatmap.

Settings come from four layers, later ones winning: built-in defaults, an
INI file (``--config``), ``BCLIP_SECTION__KEY`` environment variables, and
``--section.key value`` flags. The resolved settings are written next to
every artifact. Exit codes: 0 ok, 2 bad configuration, 3 bad data, 4 I/O.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .decompose import assemble_hierarchy, decompose_caption
from .eval import evaluate_model, export_heatmap, write_metrics_jsonl, write_summary_csv
from .loss import Calibration, build_targets, logit_scale
from .model import BetaClip, ModelConfig
from .numerics import ConfigError
from .rng import Rng
from .toyworld import (POS_LEXICON, TOKEN_ID, WorldConfig, generate_dataset, read_dataset,
                       render_patch_input, write_dataset)
from .train import OptimizerState, TrainConfig, load_checkpoint, run_training

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_IO = 0, 2, 3, 4
ENV_PREFIX = "BCLIP_"


class DataError(ValueError):
    """Input data is missing pieces or malformed."""


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    train_count: int = 2000
    val_count: int = 256
    train_path: str = ""
    val_path: str = ""


@dataclass(frozen=True)
class EvalConfig:
    tci: bool = False
    seed: int = 0


@dataclass(frozen=True)
class PathConfig:
    out_dir: str = "run"
    checkpoint: str = ""


SECTIONS = {
    "world": WorldConfig,
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "paths": PathConfig,
}

PROFILES = {
    "smoke": {"train.micro_batch": "8", "train.k_sent": "3", "train.k_phrase": "0",
              "train.steps": "200", "data.train_count": "256", "data.val_count": "64"},
    "toy": {"train.lr": "3e-4", "train.lr_pool": "3e-3"},
}


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out


def _coerce(section: str, key: str, raw, ftype):
    text = str(raw).strip()
    try:
        if ftype in (bool, "bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if ftype in (int, "int"):
            return int(text)
        if ftype in (float, "float"):
            return float(text)
        if ftype in (tuple, "tuple"):
            return tuple(p.strip() for p in text.split(",") if p.strip())
        return text
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot read {text!r} as {getattr(ftype, '__name__', ftype)}") from None


def build_config(overrides: Sequence[tuple[str, str]]) -> RunConfig:
    """Apply ``(section.key, value)`` pairs in order over the defaults."""
    values: dict[str, dict] = {name: {} for name in SECTIONS}
    for dotted, raw in overrides:
        if "." not in dotted:
            raise ConfigError(f"setting {dotted!r} needs the form section.key")
        section, key = dotted.split(".", 1)
        section, key = section.strip().lower(), key.strip().lower()
        if section not in SECTIONS:
            raise ConfigError(f"unknown section {section!r} in {dotted!r}")
        fields = {f.name: f.type for f in dataclasses.fields(SECTIONS[section])}
        if key not in fields:
            raise ConfigError(f"unknown key {section}.{key}")
        values[section][key] = _coerce(section, key, raw, fields[key])
    cfg = RunConfig(**{name: SECTIONS[name](**values[name]) for name in SECTIONS})
    cfg.world.validate()
    cfg.train.validate()
    if cfg.model.dim % cfg.model.vision_heads or cfg.model.dim % cfg.model.text_heads:
        raise ConfigError(f"model.dim={cfg.model.dim} must divide by the head counts")
    return cfg


def read_ini(path: str) -> list[tuple[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return [(f"{s}.{k}", v) for s in parser.sections() for k, v in parser.items(s)]


def env_overrides(environ=None) -> list[tuple[str, str]]:
    environ = os.environ if environ is None else environ
    out = []
    for name in sorted(environ):
        if name.startswith(ENV_PREFIX) and "__" in name:
            section, key = name[len(ENV_PREFIX):].split("__", 1)
            out.append((f"{section.lower()}.{key.lower()}", environ[name]))
    return out


def flag_overrides(extra: Sequence[str]) -> list[tuple[str, str]]:
    out, i = [], 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--") or "." not in arg:
            raise ConfigError(f"unrecognized argument {arg!r}")
        if "=" in arg:
            key, value = arg[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"{arg} needs a value")
            key, value = arg[2:], extra[i + 1]
            i += 2
        out.append((key, value))
    return out


def _meta() -> dict:
    return {"created": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "host": platform.node(),
            "python": platform.python_version(), "numpy": np.__version__}


def _write_json(path: Path, obj: dict) -> None:
    try:
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def _datasets(cfg: RunConfig, need_train: bool = True):
    def load(path: str, split: int, count: int):
        if path:
            if not Path(path).exists():
                raise DataError(f"dataset file not found: {path}")
            return read_dataset(path)
        return generate_dataset(cfg.data.seed, count, cfg.world, split=split)

    train = load(cfg.data.train_path, 0, cfg.data.train_count) if need_train else None
    val = load(cfg.data.val_path, 1, cfg.data.val_count)
    return train, val


def cmd_generate(cfg: RunConfig, args) -> int:
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"config": cfg.to_dict()}
    for name, split, count in (("train", 0, cfg.data.train_count), ("val", 1, cfg.data.val_count)):
        path = out / f"{name}.jsonl"
        try:
            write_dataset(path, generate_dataset(cfg.data.seed, count, cfg.world, split=split), meta)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
        print(f"wrote {count} scenes to {path}")
    return EXIT_OK


def cmd_decompose(cfg: RunConfig, args) -> int:
    if args.text is not None:
        captions = [args.text]
    elif args.input:
        try:
            captions = Path(args.input).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise OSError(f"cannot read {args.input}: {exc.strerror or exc}") from exc
    else:
        captions = sys.stdin.read().splitlines()
    rng = Rng(cfg.data.seed)
    lines = []
    for text in captions:
        tokens = text.replace(".", " . ").split()
        if not tokens:
            continue
        unknown = sorted({t for t in tokens if t not in TOKEN_ID})
        if unknown:
            raise DataError(f"tokens outside the vocabulary: {', '.join(unknown)}")
        caption, sentences, phrases = decompose_caption(tokens, lexicon=POS_LEXICON)
        h = assemble_hierarchy(caption, sentences, phrases, cfg.train.k_sent, cfg.train.k_phrase, rng)
        rec = {"all_sentences": sentences, "all_phrases": phrases, **h.to_record()}
        lines.append(json.dumps(rec))
    text_out = "\n".join(lines) + ("\n" if lines else "")
    if args.output:
        try:
            Path(args.output).write_text(text_out, encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot write {args.output}: {exc.strerror or exc}") from exc
        _write_json(Path(args.output + ".config.json"), {"config": cfg.to_dict(), "meta": _meta()})
    else:
        sys.stdout.write(text_out)
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    train, val = _datasets(cfg)
    if not train:
        raise DataError("training set is empty")
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    if cfg.paths.checkpoint:
        model, state, _ = load_checkpoint(cfg.paths.checkpoint)
    else:
        model = BetaClip(cfg.world, cfg.model)

    def periodic(m, step):
        return evaluate_model(m, val, cfg.train.k_sent, cfg.train.k_phrase, cfg.eval.seed)

    echo = cfg.to_dict()
    res = run_training(train, cfg.train, model, state, out_dir=out, evaluate=periodic,
                       config_echo=echo)
    metrics = evaluate_model(model, val, cfg.train.k_sent, cfg.train.k_phrase, cfg.eval.seed,
                             tci=cfg.eval.tci)
    metrics["train_seconds"] = round(res.seconds, 3)
    metrics["rejected_steps"] = res.state.rejected
    write_metrics_jsonl(out / "metrics.jsonl", res.state.step, metrics)
    write_summary_csv(out / "summary.csv", metrics)
    _write_json(out / "config.json", {"config": echo, "meta": _meta()})
    print(json.dumps({k: round(v, 4) if isinstance(v, float) else v for k, v in metrics.items()}))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    ckpt = cfg.paths.checkpoint or str(Path(cfg.paths.out_dir) / "checkpoint.bclp")
    if not Path(ckpt).exists():
        raise OSError(f"checkpoint not found: {ckpt}")
    model, state, header = load_checkpoint(ckpt)
    cfg = dataclasses.replace(cfg, world=model.world)
    _, val = _datasets(cfg, need_train=False)
    metrics = evaluate_model(model, val, cfg.train.k_sent, cfg.train.k_phrase, cfg.eval.seed,
                             tci=cfg.eval.tci or args.tci)
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = {"checkpoint": ckpt, "step": state.step if state else 0, "metrics": metrics,
              "config": cfg.to_dict(), "meta": _meta()}
    _write_json(out / "eval.json", report)
    write_summary_csv(out / "eval_summary.csv", metrics)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_inspect_targets(cfg: RunConfig, args) -> int:
    if not 0.0 <= args.beta <= 1.0:
        raise ConfigError(f"--beta must lie in [0, 1], got {args.beta}")
    cal = None if args.calibration == "none" else Calibration(args.lam, args.calibration)
    tgt = build_targets(args.mode, args.B, args.K, args.beta, cal)
    which = args.matrix or ("p" if args.mode == "ce" else "y")
    mat = getattr(tgt, which)
    if mat is None:
        raise ConfigError(f"mode {args.mode} has no {which!r} matrix")
    rows = "\n".join(",".join(f"{v:.4f}" for v in row) for row in mat) + "\n"
    sys.stdout.write(rows)
    if args.output:
        try:
            Path(args.output).write_text(rows, encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot write {args.output}: {exc.strerror or exc}") from exc
        echo = {"B": args.B, "K": args.K, "beta": args.beta, "mode": args.mode,
                "calibration": args.calibration, "lambda": args.lam, "matrix": which}
        _write_json(Path(args.output + ".config.json"), {"config": {**cfg.to_dict(), "targets": echo},
                                                        "meta": _meta()})
    return EXIT_OK


def cmd_heatmap(cfg: RunConfig, args) -> int:
    ckpt = cfg.paths.checkpoint or str(Path(cfg.paths.out_dir) / "checkpoint.bclp")
    if not Path(ckpt).exists():
        raise OSError(f"checkpoint not found: {ckpt}")
    model, _, _ = load_checkpoint(ckpt)
    cfg = dataclasses.replace(cfg, world=model.world)
    _, val = _datasets(cfg, need_train=False)
    if not 0 <= args.index < len(val):
        raise DataError(f"--index {args.index} outside [0, {len(val)})")
    sample = val[args.index]
    if args.text:
        query = args.text.split()
    elif sample.annotations:
        query = sample.captions.phrases[sample.annotations[0].phrase_index]
    else:
        raise DataError("scene has no annotated phrase; pass --text")
    img = model.encode_images(render_patch_input(sample.scene, model.world, model.dtype).data)
    t = model.text([query])
    scale = float(logit_scale(model.log_scale.value).item())
    out = Path(args.output or Path(cfg.paths.out_dir) / f"heatmap_{args.index}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    pgm = out.with_suffix(".pgm") if args.pgm else None
    export_heatmap(img.patches.data[0], t.data[0], out, scale, pgm)
    _write_json(Path(str(out) + ".config.json"),
                {"config": cfg.to_dict(), "query": query, "index": args.index, "meta": _meta()})
    print(f"wrote {out}" + (f" and {pgm}" if pgm else ""))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "decompose": cmd_decompose,
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect-targets": cmd_inspect_targets,
    "heatmap": cmd_heatmap,
}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bclip", description=__doc__.splitlines()[0],
                                epilog="Any setting can also be given as --section.key value.")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [world] [data] [model] [train] [eval] [paths]")
    common.add_argument("--profile", choices=sorted(PROFILES), help="preset overrides")
    common.add_argument("--seed", type=int, help="sets data.seed and train.seed")
    common.add_argument("--out", help="output directory (paths.out_dir)")
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "generate":
            sp.add_argument("--count", type=int, help="training scenes (data.train_count)")
            sp.add_argument("--val-count", type=int)
        if name == "decompose":
            sp.add_argument("--text", help="caption text; otherwise --input or stdin")
            sp.add_argument("--input", help="file with one caption per line")
            sp.add_argument("--output")
        if name in ("train", "eval", "heatmap"):
            sp.add_argument("--checkpoint", help="checkpoint to resume (train) or read")
        if name == "train":
            sp.add_argument("--mode", choices=("ce", "bce"))
            sp.add_argument("--beta", type=float)
            sp.add_argument("--steps", type=int)
        if name == "eval":
            sp.add_argument("--tci", action="store_true", help="text-conditioned retrieval too")
        if name == "inspect-targets":
            sp.add_argument("--B", type=int, default=1)
            sp.add_argument("--K", type=int, default=2)
            sp.add_argument("--beta", type=float, default=0.5)
            sp.add_argument("--mode", choices=("ce", "bce"), default="ce")
            sp.add_argument("--calibration", choices=("none", "index", "level"), default="none")
            sp.add_argument("--lam", type=float, default=0.05)
            sp.add_argument("--matrix", choices=("p", "w", "y"))
            sp.add_argument("--output")
        if name == "heatmap":
            sp.add_argument("--index", type=int, default=0)
            sp.add_argument("--text")
            sp.add_argument("--output")
            sp.add_argument("--pgm", action="store_true")
    return p


def resolve(args, extra: Sequence[str], environ=None) -> RunConfig:
    pairs: list[tuple[str, str]] = []
    if args.profile:
        pairs += list(PROFILES[args.profile].items())
    if args.config:
        pairs += read_ini(args.config)
    pairs += env_overrides(environ)
    shortcuts = {"seed": ("data.seed", "train.seed"), "out": ("paths.out_dir",),
                 "count": ("data.train_count",), "val_count": ("data.val_count",),
                 "checkpoint": ("paths.checkpoint",), "steps": ("train.steps",)}
    if args.command == "train":
        shortcuts.update({"mode": ("train.mode",), "beta": ("train.beta",)})
    for attr, keys in shortcuts.items():
        value = getattr(args, attr, None)
        if value is not None:
            pairs += [(k, str(value)) for k in keys]
    pairs += flag_overrides(extra)
    return build_config(pairs)


def main(argv: Sequence[str] | None = None) -> int:
    parser = make_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = resolve(args, extra)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DataError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``lorra {synth,vocab,train,eval,bounds,ablate,analyze}``.

Configuration precedence is flags > ``--set`` > ``--config`` file > defaults.
Every command writes its resolved config to ``<out_dir>/config.json`` so the
run can be repeated from that file alone. Wall-clock timestamps go only to
``metadata.json``; every other output is a pure function of the config.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Sequence

import torch

from . import __version__
from .ablation import LADDER, ablation_config, run_ablation_ladder
from .data import (
    QAInstance,
    SyntheticConfig,
    Vocabulary,
    build_vocabulary,
    generate_splits,
    load_dataset,
    save_dataset,
)
from .embeddings import build_question_words
from .errors import ConfigError, DataError, LorraError
from .evaluation import (
    HEURISTICS,
    analyze_predictions,
    combined_upper_bound,
    evaluate,
    heuristic,
    ocr_upper_bound,
    reports_to_csv,
    train_stats,
    vocab_upper_bound,
)
from .model import ABLATIONS, LorraModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

log = logging.getLogger("lorra")

SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# config tree
# ---------------------------------------------------------------------------

@dataclass
class DataPaths:
    train: str | None = None
    val: str | None = None
    test: str | None = None


@dataclass
class VocabSettings:
    mode: str = "min_count"  # or "top_k"
    value: int = 1
    path: str | None = None


@dataclass
class EvalSettings:
    checkpoint: str | None = None
    split: str = "test"
    heuristic: str | None = None
    max_n: int = 4
    chunk_size: int = 256


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    workers: int = 1
    ablation: str = "Pythia+LoRRA"
    ablate_names: list = field(default_factory=lambda: list(LADDER))
    synthetic: SyntheticConfig = field(default_factory=lambda: SyntheticConfig(n_val=300))
    data: DataPaths = field(default_factory=DataPaths)
    vocab: VocabSettings = field(default_factory=VocabSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def validate(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {sorted(ABLATIONS)}")
        for name in self.ablate_names:
            if name not in ABLATIONS:
                raise ConfigError(f"unknown ablation {name!r} in ablate_names")
        if self.vocab.mode not in ("min_count", "top_k"):
            raise ConfigError(f"vocab.mode must be min_count or top_k, got {self.vocab.mode!r}")
        if self.eval.split not in SPLITS:
            raise ConfigError(f"eval.split must be one of {SPLITS}")
        if self.eval.heuristic is not None and self.eval.heuristic not in HEURISTICS:
            raise ConfigError(f"unknown heuristic {self.eval.heuristic!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.synthetic.validate()
        self.train.validate()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _merge(node, updates: dict, where: str):
    """Return a copy of dataclass ``node`` with ``updates`` applied recursively."""
    known = {f.name: f for f in fields(node)}
    changes = {}
    for key, value in updates.items():
        if key not in known:
            raise ConfigError(f"unknown config key {where}{key}")
        current = getattr(node, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key} must be an object")
            changes[key] = _merge(current, value, f"{where}{key}.")
        else:
            changes[key] = value
    try:
        return replace(node, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value under {where or 'root'}: {exc}") from exc


def _dotted(assignments: Sequence[str]) -> dict:
    out: dict = {}
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"--set expects key.path=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    doc: dict = {}
    if args.config:
        path = Path(args.config)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"{path}: config file not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc.msg} at char {exc.pos})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = _merge(cfg, doc, "")
    pinned = _dotted(args.set or [])
    cfg = _merge(cfg, pinned, "")
    flags = {}
    for name, dest in (("seed", "seed"), ("out", "out_dir"), ("workers", "workers"), ("ablation", "ablation")):
        if getattr(args, name, None) is not None:
            flags[dest] = getattr(args, name)
    cfg = _merge(cfg, flags, "")
    nested = {}
    if getattr(args, "iterations", None) is not None:
        nested.setdefault("train", {})["iterations"] = args.iterations
    if getattr(args, "checkpoint", None) is not None:
        nested.setdefault("eval", {})["checkpoint"] = args.checkpoint
    if getattr(args, "heuristic", None) is not None:
        nested.setdefault("eval", {})["heuristic"] = args.heuristic
    if getattr(args, "split", None) is not None:
        nested.setdefault("eval", {})["split"] = args.split
    for split in SPLITS:
        if getattr(args, split, None) is not None:
            nested.setdefault("data", {})[split] = getattr(args, split)
    cfg = _merge(cfg, nested, "")
    # one root seed drives every component unless a section pins its own
    for section in ("synthetic", "model", "train"):
        if "seed" not in pinned.get(section, {}) and "seed" not in doc.get(section, {}):
            cfg = replace(cfg, **{section: replace(getattr(cfg, section), seed=cfg.seed)})
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _prepare_out(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"{out}: cannot create output directory ({exc})") from exc
    _write_json(out / "config.json", cfg.to_dict())
    return out


def _write_metadata(out: Path, command: str, started: float, extra: dict | None = None) -> None:
    meta = {
        "command": command,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "wall_seconds": round(time.time() - started, 3),
        "version": __version__,
        "python": platform.python_version(),
        "torch": torch.__version__,
    }
    meta.update(extra or {})
    _write_json(out / "metadata.json", meta)


_synth_cache: dict = {}


def _synthetic_splits(cfg: RunConfig) -> dict[str, list[QAInstance]]:
    key = json.dumps(_plain(asdict(cfg.synthetic)), sort_keys=True)
    if key not in _synth_cache:
        _synth_cache.clear()
        _synth_cache[key] = generate_splits(cfg.synthetic)
    return _synth_cache[key]


def load_split(cfg: RunConfig, split: str) -> list[QAInstance]:
    """A split from ``data.<split>`` if set, otherwise from the synthetic generator."""
    path = getattr(cfg.data, split)
    if path is not None:
        return load_dataset(path)
    return _synthetic_splits(cfg).get(split, [])


def _vocabulary(cfg: RunConfig, train_data: Sequence[QAInstance]) -> Vocabulary:
    if cfg.vocab.path:
        p = Path(cfg.vocab.path)
        if not p.exists():
            raise DataError(f"{p}: vocabulary file not found")
        return Vocabulary.from_json(p.read_text(encoding="utf-8"))
    if cfg.vocab.mode == "min_count":
        return build_vocabulary(train_data, min_count=cfg.vocab.value)
    return build_vocabulary(train_data, top_k=cfg.vocab.value)


def _require(data: Sequence[QAInstance], what: str) -> Sequence[QAInstance]:
    if not data:
        raise DataError(f"{what} split is empty")
    return data


def _model_config(cfg: RunConfig) -> ModelConfig:
    return ablation_config(cfg.ablation, cfg.model)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> dict:
    out = _prepare_out(cfg, "synth")
    splits = _synthetic_splits(cfg)
    files = {}
    for split in SPLITS:
        insts = splits.get(split) or []
        if not insts:
            continue
        path = out / f"{split}.json"
        save_dataset(insts, path, features_dir=out / f"features_{split}")
        files[split] = path.name
    answers = {s: {i.answers[0] for i in splits.get(s) or []} for s in SPLITS}
    manifest = {
        "seed": cfg.synthetic.seed,
        "files": files,
        "counts": {s: len(splits.get(s) or []) for s in SPLITS},
        "fraction_copy": cfg.synthetic.fraction_copy,
        "disjoint_pools": cfg.synthetic.fraction_copy < 1.0 or (
            answers["train"].isdisjoint(answers["test"]) and answers["train"].isdisjoint(answers["val"])),
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def cmd_vocab(cfg: RunConfig) -> dict:
    out = _prepare_out(cfg, "vocab")
    train_data = _require(load_split(cfg, "train"), "train")
    vocab = _vocabulary(cfg, train_data)
    (out / "vocab.json").write_text(vocab.to_json() + "\n", encoding="utf-8")
    return {"size": len(vocab)}


def cmd_train(cfg: RunConfig, *, resume: bool = False) -> dict:
    out = _prepare_out(cfg, "train")
    train_data = _require(load_split(cfg, "train"), "train")
    val_data = load_split(cfg, "val")
    vocab = _vocabulary(cfg, train_data)
    words = build_question_words(i.question_tokens for i in train_data)
    model = LorraModel(_model_config(cfg), vocab, words)
    state_path = out / "state.pt"
    state = None
    if resume:
        if not state_path.exists():
            raise DataError(f"{state_path}: nothing to resume from")
        state = torch.load(state_path, weights_only=False)
        model.load_state_dict(state["model"])
    log_path = out / "train_log.jsonl"
    if not resume and log_path.exists():
        log_path.unlink()
    result = train(model, train_data, cfg.train, val_data=val_data or None, log_path=log_path,
                   state=state, state_path=state_path)
    save_checkpoint(result.model, out / "checkpoint.safetensors",
                    extra={"ablation": cfg.ablation, "best_step": result.best_step})
    best = {"checkpoint": "checkpoint.safetensors", "ablation": cfg.ablation,
            "best_step": result.best_step, "best_val_accuracy": result.best_val_accuracy,
            "iterations": cfg.train.iterations}
    _write_json(out / "best.json", best)
    return best


def _load_model(cfg: RunConfig) -> LorraModel:
    path = Path(cfg.eval.checkpoint) if cfg.eval.checkpoint else Path(cfg.out_dir) / "checkpoint.safetensors"
    return load_checkpoint(path)


def cmd_eval(cfg: RunConfig) -> dict:
    data = _require(load_split(cfg, cfg.eval.split), cfg.eval.split)
    if cfg.eval.heuristic:
        stats = train_stats(_require(load_split(cfg, "train"), "train"))
        report = heuristic(data, cfg.eval.heuristic, stats, seed=cfg.seed, split=cfg.eval.split)
    else:
        model = _load_model(cfg)
        report = evaluate(model, data, name=cfg.ablation, split=cfg.eval.split, seed=cfg.seed,
                          workers=cfg.workers, chunk_size=cfg.eval.chunk_size)
    out = _prepare_out(cfg, "eval")
    (out / "eval.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "eval.csv").write_text(reports_to_csv([report]), encoding="utf-8")
    return {"name": report.name, "accuracy": report.accuracy}


def cmd_bounds(cfg: RunConfig) -> dict:
    data = _require(load_split(cfg, cfg.eval.split), cfg.eval.split)
    vocab = _vocabulary(cfg, _require(load_split(cfg, "train"), "train"))
    bounds = {
        "split": cfg.eval.split,
        "ocr_ub": ocr_upper_bound(data, cfg.eval.max_n),
        "vocab_ub": vocab_upper_bound(data, vocab),
        "combined_ub": combined_upper_bound(data, vocab, cfg.eval.max_n),
        "vocab_size": len(vocab),
    }
    out = _prepare_out(cfg, "bounds")
    _write_json(out / "bounds.json", bounds)
    rows = ["bound,split,accuracy_percent"]
    rows += [f"{k},{cfg.eval.split},{100 * bounds[k]:.2f}" for k in ("ocr_ub", "vocab_ub", "combined_ub")]
    (out / "bounds.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return bounds


def cmd_ablate(cfg: RunConfig) -> dict:
    train_data = _require(load_split(cfg, "train"), "train")
    test_data = _require(load_split(cfg, cfg.eval.split), cfg.eval.split)
    reports = run_ablation_ladder(train_data, load_split(cfg, "val"), test_data,
                                  names=cfg.ablate_names, model_config=cfg.model,
                                  train_config=cfg.train, vocab=_vocabulary(cfg, train_data),
                                  seed=cfg.seed, workers=cfg.workers)
    out = _prepare_out(cfg, "ablate")
    (out / "ablation.csv").write_text(reports_to_csv(reports), encoding="utf-8")
    _write_json(out / "ablation.json", [{"model": r.name, "accuracy": r.accuracy, "seed": r.seed,
                                         "split": r.split} for r in reports])
    return {r.name: r.accuracy for r in reports}


def cmd_analyze(cfg: RunConfig) -> dict:
    data = _require(load_split(cfg, cfg.eval.split), cfg.eval.split)
    report = analyze_predictions(_load_model(cfg), data, workers=cfg.workers)
    out = _prepare_out(cfg, "analyze")
    (out / "analysis.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return asdict(report)


COMMANDS = {
    "synth": cmd_synth,
    "vocab": cmd_vocab,
    "train": cmd_train,
    "eval": cmd_eval,
    "bounds": cmd_bounds,
    "ablate": cmd_ablate,
    "analyze": cmd_analyze,
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lorra", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config value, e.g. train.iterations=500 (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "eval", "analyze"):
            p.add_argument("--ablation", choices=sorted(ABLATIONS))
        if name in ("vocab", "train", "eval", "bounds", "ablate", "analyze"):
            for split in SPLITS:
                p.add_argument(f"--{split}", help=f"{split} dataset file (default: synthetic)")
        if name in ("eval", "bounds", "ablate", "analyze"):
            p.add_argument("--split", choices=SPLITS)
        if name in ("train", "ablate"):
            p.add_argument("--iterations", type=int)
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from <out>/state.pt")
        if name in ("eval", "analyze"):
            p.add_argument("--checkpoint")
        if name == "eval":
            p.add_argument("--heuristic", choices=HEURISTICS)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        cfg = resolve_config(args)
        if args.command == "train":
            result = cmd_train(cfg, resume=args.resume)
        else:
            result = COMMANDS[args.command](cfg)
        _write_metadata(Path(cfg.out_dir), args.command, started)
    except LorraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())

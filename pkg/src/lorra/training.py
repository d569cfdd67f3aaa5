"""Targets over the N+M answer space, the logit BCE loss, the learning-rate
schedule and the seeded training loop."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import QAInstance, Vocabulary, majority_answer, normalize_answer
from .errors import ConfigError, ContractError, NumericError
from .metric import soft_score
from .model import Batch, LorraModel
from .seeding import rng

logger = logging.getLogger(__name__)

__all__ = ["TrainConfig", "TargetVector", "soft_score", "build_targets", "bce_with_logits",
           "lr_at", "train", "TrainResult"]


@dataclass
class TrainConfig:
    iterations: int = 24000
    batch_size: int = 128
    base_lr: float = 5e-2
    final_lr: float = 5e-4
    decay_start: int = 14000
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = 0.25
    val_every: int = 1000
    log_every: int = 10
    target_mode: str = "soft"
    # parameter-name prefix -> learning-rate multiplier
    lr_groups: dict[str, float] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        # at batch 32 the full-scale 5e-2 saturates the question LSTM within a
        # few AdaMax steps; 1e-2 -> 1e-4 keeps the 100:1 decay ratio
        cfg = dict(iterations=3000, batch_size=32, decay_start=1750, val_every=200,
                   base_lr=1e-2, final_lr=1e-4)
        cfg.update(overrides)
        return cls(**cfg)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def validate(self) -> None:
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        if not 0 <= self.decay_start <= self.iterations:
            raise ConfigError(f"decay_start {self.decay_start} must lie in [0, iterations={self.iterations}]")
        if self.base_lr <= 0 or self.final_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.target_mode not in ("soft", "hard"):
            raise ConfigError(f"unknown target_mode {self.target_mode!r}")
        if self.val_every < 1 or self.log_every < 1:
            raise ConfigError("val_every and log_every must be >= 1")


# ---------------------------------------------------------------------------
# targets and loss
# ---------------------------------------------------------------------------

@dataclass
class TargetVector:
    values: np.ndarray
    mask: np.ndarray


def build_targets(instance: QAInstance, vocab: Vocabulary, n_slots: int = 50,
                  mode: str = "soft") -> TargetVector:
    """Target for every vocabulary entry and every OCR slot.

    The two homes of an answer are independent: an answer that is both in
    the vocabulary and among the OCR tokens gets a positive target at each.
    """
    n = len(vocab)
    values = np.zeros(n + n_slots, dtype=np.float32)
    mask = np.zeros(n + n_slots, dtype=bool)
    mask[:n] = True
    answers = instance.answers
    if mode == "soft":
        score = lambda a: soft_score(a, answers)  # noqa: E731
    else:
        top = majority_answer(answers)
        score = lambda a: float(a == top)  # noqa: E731
    for a in set(answers):
        i = vocab.index_of.get(a)
        if i is not None:
            values[i] = score(a)
    for j, tok in enumerate(instance.ocr_tokens[:n_slots]):
        values[n + j] = score(normalize_answer(tok))
        mask[n + j] = True
    return TargetVector(values, mask)


def stack_targets(instances: Sequence[QAInstance], vocab: Vocabulary, n_slots: int,
                  mode: str = "soft") -> torch.Tensor:
    return torch.from_numpy(np.stack([build_targets(i, vocab, n_slots, mode).values for i in instances]))


def bce_with_logits(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean binary cross-entropy over masked slots, in log-sum-exp form.

    Slots outside ``mask`` and dead slots (logit -inf) contribute neither to
    the loss nor to the gradient. NaN logits are kept so divergence surfaces.
    """
    if logits.shape != targets.shape:
        raise ContractError(f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    live = logits != -math.inf
    if mask is not None:
        live = live & mask.bool()
    z = torch.where(live, logits, torch.zeros_like(logits))
    t = targets.to(z.dtype)
    per_slot = z.clamp_min(0) - z * t + torch.log1p(torch.exp(-z.abs()))
    per_slot = torch.where(live, per_slot, torch.zeros_like(per_slot))
    return per_slot.sum() / live.sum().clamp_min(1)


def lr_at(config: TrainConfig, step: int) -> float:
    """Flat at base_lr, then linear to final_lr at the last iteration."""
    if not 0 <= step < config.iterations:
        raise ContractError(f"step {step} outside [0, {config.iterations})")
    if step < config.decay_start:
        return config.base_lr
    span = config.iterations - 1 - config.decay_start
    if span <= 0:
        return config.base_lr
    frac = (step - config.decay_start) / span
    return config.base_lr + frac * (config.final_lr - config.base_lr)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: LorraModel
    history: list[dict]
    best_step: int | None = None
    best_val_accuracy: float | None = None


def _param_groups(model: LorraModel, config: TrainConfig):
    groups: dict[float, list] = {}
    for name, p in model.named_parameters():
        mult = 1.0
        for prefix, m in config.lr_groups.items():
            if name.startswith(prefix):
                mult = m
        groups.setdefault(mult, []).append(p)
    return [{"params": ps, "lr_mult": m} for m, ps in sorted(groups.items())]


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Indices for ``step``: a flat stream of per-epoch seeded permutations."""
    start = step * batch_size
    out = []
    pos = start
    while len(out) < batch_size:
        epoch, offset = divmod(pos, n)
        perm = _epoch_perm(n, epoch, seed)
        take = min(batch_size - len(out), n - offset)
        out.extend(perm[offset:offset + take])
        pos += take
    return np.asarray(out, dtype=np.int64)


_PERM_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def _epoch_perm(n: int, epoch: int, seed: int) -> np.ndarray:
    key = (n, epoch, seed)
    perm = _PERM_CACHE.get(key)
    if perm is None:
        if len(_PERM_CACHE) > 64:
            _PERM_CACHE.clear()
        perm = rng(seed, "shuffle", epoch).permutation(n)
        _PERM_CACHE[key] = perm
    return perm


class JsonlLog:
    def __init__(self, path, append: bool = False):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not append:
                self.path.write_text("")

    def write(self, record: dict) -> None:
        if self.path:
            with self.path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


def train(model: LorraModel, dataset: Sequence[QAInstance], config: TrainConfig, *,
          val_data: Sequence[QAInstance] | None = None, log_path=None,
          state: dict | None = None, state_path=None) -> TrainResult:
    """Train ``model`` in place and return the best-on-validation snapshot.

    ``state`` resumes from a dict written to ``state_path`` by an earlier run
    (optimizer moments, step, best snapshot); with the same seed the
    remaining history matches an uninterrupted run.
    """
    from .evaluation import evaluate

    config.validate()
    if not dataset:
        raise ContractError("training set is empty")
    if config.iterations == 0:
        return TrainResult(model, [])

    batch_all: Batch = model.prepare(dataset)
    targets_all = stack_targets(dataset, model.vocab, model.n_slots, config.target_mode)
    targets_all = targets_all.to(model.head_out.weight.dtype)
    groups = _param_groups(model, config)
    opt = torch.optim.Adamax([{"params": g["params"]} for g in groups], lr=config.base_lr,
                             betas=config.betas, eps=config.eps)
    history: list[dict] = []
    best_acc, best_step, best_state = None, None, None
    start = 0
    if state is not None:
        opt.load_state_dict(state["optimizer"])
        start = state["step"]
        history = list(state["history"])
        best_acc, best_step, best_state = state["best_acc"], state["best_step"], state["best_state"]
    log = JsonlLog(log_path, append=state is not None)
    n = len(dataset)
    model.train()
    params = [p for g in groups for p in g["params"]]

    for step in range(start, config.iterations):
        lr = lr_at(config, step)
        for pg, g in zip(opt.param_groups, groups):
            pg["lr"] = lr * g["lr_mult"]
        idx = torch.from_numpy(batch_indices(n, config.batch_size, step, config.seed))
        out = model.forward_batch(batch_all.select(idx))
        loss = bce_with_logits(out.logits, targets_all[idx])
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss {loss.item()} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        opt.step()

        done = step + 1
        record = None
        if done % config.log_every == 0 or done == config.iterations:
            record = {"step": done, "lr": lr, "loss": float(loss.item())}
        if val_data and (done % config.val_every == 0 or done == config.iterations):
            model.eval()
            acc = evaluate(model, val_data).accuracy
            model.train()
            record = record or {"step": done, "lr": lr, "loss": float(loss.item())}
            record["val_accuracy"] = acc
            if best_acc is None or acc > best_acc:
                best_acc, best_step = acc, done
                best_state = copy.deepcopy(model.state_dict())
        if record is not None:
            history.append(record)
            log.write(record)
        if state_path is not None and (done % config.val_every == 0 or done == config.iterations):
            torch.save({"optimizer": opt.state_dict(), "step": done, "history": history,
                        "best_acc": best_acc, "best_step": best_step, "best_state": best_state,
                        "model": model.state_dict()}, state_path)

    model.eval()
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(model, history, best_step, best_acc)


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["betas"] = list(d["betas"])
    return d

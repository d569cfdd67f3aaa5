"""Train and score the ablation ladder under one seed and budget."""
from __future__ import annotations

import logging
from dataclasses import replace
from typing import Sequence

from .data import QAInstance, Vocabulary, build_vocabulary
from .embeddings import build_question_words
from .evaluation import EvalReport, evaluate, reports_to_csv
from .errors import ConfigError
from .model import ABLATIONS, LorraModel, ModelConfig
from .training import TrainConfig, train

log = logging.getLogger(__name__)

LADDER = ("Q", "I", "I+Q", "Pythia+O", "Pythia+O+C", "Pythia+LoRRA")


def ablation_config(name: str, base: ModelConfig | None = None) -> ModelConfig:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; expected one of {sorted(ABLATIONS)}")
    return replace(base or ModelConfig(), **ABLATIONS[name])


def run_ablation_ladder(train_data: Sequence[QAInstance], val_data: Sequence[QAInstance] | None,
                        test_data: Sequence[QAInstance], *, names: Sequence[str] = LADDER,
                        model_config: ModelConfig | None = None,
                        train_config: TrainConfig | None = None,
                        vocab: Vocabulary | None = None, seed: int = 0,
                        workers: int = 1) -> list[EvalReport]:
    """One report per rung, in ``names`` order, scored on ``test_data``.

    Every rung shares the vocabulary, question words, model seed and
    training schedule; only the ablation flags differ.
    """
    vocab = vocab or build_vocabulary(train_data, min_count=1)
    words = build_question_words(i.question_tokens for i in train_data)
    base = replace(model_config or ModelConfig(), seed=seed)
    tcfg = replace(train_config or TrainConfig.desk(), seed=seed)
    reports = []
    for name in names:
        model = LorraModel(ablation_config(name, base), vocab, words)
        train(model, train_data, tcfg, val_data=val_data or None)
        rep = evaluate(model, test_data, name=name, split="test", seed=seed, workers=workers)
        log.info("%s seed %d: %.2f%%", name, seed, 100 * rep.accuracy)
        reports.append(rep)
    return reports


__all__ = ["LADDER", "ablation_config", "run_ablation_ladder", "reports_to_csv"]

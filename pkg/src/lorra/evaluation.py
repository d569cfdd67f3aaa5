"""Accuracy, upper bounds, heuristic baselines and prediction provenance."""
from __future__ import annotations

import csv
import io
import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import QAInstance, Vocabulary, majority_answer, normalize_answer
from .errors import ContractError
from .metric import soft_score, vqa_accuracy
from .model import LorraModel, Prediction, predict_batch
from .seeding import rng

__all__ = ["EvalReport", "AnalysisReport", "vqa_accuracy", "evaluate", "predict_dataset",
           "ocr_candidates", "ocr_upper_bound", "vocab_upper_bound", "combined_upper_bound",
           "TrainStats", "train_stats", "heuristic", "HEURISTICS", "analyze_predictions",
           "reports_to_csv"]


@dataclass
class EvalReport:
    name: str
    accuracy: float
    scores: list[float]
    split: str | None = None
    seed: int | None = None

    @classmethod
    def from_scores(cls, name, scores, split=None, seed=None) -> "EvalReport":
        scores = [float(s) for s in scores]
        total = 0.0
        for s in scores:  # ordered 64-bit reduction
            total += s
        return cls(name, total / len(scores) if scores else 0.0, scores, split, seed)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def reports_to_csv(reports: Iterable[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "split", "accuracy_percent", "seed"])
    for r in reports:
        w.writerow([r.name, r.split or "", f"{100 * r.accuracy:.2f}", "" if r.seed is None else r.seed])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# trained models
# ---------------------------------------------------------------------------

def predict_dataset(model: LorraModel, dataset: Sequence[QAInstance], *, workers: int = 1,
                    chunk_size: int = 256) -> list[Prediction]:
    """Predictions in dataset order.

    Chunk boundaries are fixed by ``chunk_size`` alone, so the worker count
    changes throughput but never the numbers.
    """
    chunks = [dataset[i:i + chunk_size] for i in range(0, len(dataset), chunk_size)]

    def run(chunk):
        with torch.no_grad():
            out = model.forward_batch(model.prepare(chunk))
        return predict_batch(out, chunk, model.vocab)

    was_training = model.training
    model.eval()
    model.ocr_embedder.embed("")  # warm the lazy matrix copy before threads share it
    try:
        if workers <= 1:
            results = [run(c) for c in chunks]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run, chunks))
    finally:
        model.train(was_training)
    return [p for chunk in results for p in chunk]


def evaluate(model: LorraModel, dataset: Sequence[QAInstance], *, name: str = "model",
             split: str | None = None, seed: int | None = None, workers: int = 1,
             chunk_size: int = 256) -> EvalReport:
    if not dataset:
        raise ContractError("cannot evaluate on an empty dataset")
    preds = predict_dataset(model, dataset, workers=workers, chunk_size=chunk_size)
    scores = [vqa_accuracy(p.normalized, inst.answers) for p, inst in zip(preds, dataset)]
    return EvalReport.from_scores(name, scores, split, seed)


# ---------------------------------------------------------------------------
# upper bounds
# ---------------------------------------------------------------------------

def ocr_candidates(tokens: Sequence[str], max_n: int = 4) -> set[str]:
    """Every contiguous run of 1..max_n tokens, joined by single spaces, normalized."""
    if max_n < 1:
        raise ContractError("max_n must be >= 1")
    out = set()
    for i in range(len(tokens)):
        for n in range(1, max_n + 1):
            if i + n > len(tokens):
                break
            out.add(normalize_answer(" ".join(tokens[i:i + n])))
    return out


def _best(candidates: Iterable[str], answers: Sequence[str]) -> float:
    # only candidates that equal some human answer can score above zero
    present = set(answers)
    return max((soft_score(c, answers) for c in candidates if c in present), default=0.0)


def _ocr_best(inst: QAInstance, max_n: int) -> float:
    return _best(ocr_candidates(inst.ocr_tokens, max_n), inst.answers)


def _vocab_best(inst: QAInstance, vocab: Vocabulary) -> float:
    return _best((a for a in set(inst.answers) if a in vocab), inst.answers)


def _mean(xs: Sequence[float]) -> float:
    return EvalReport.from_scores("", xs).accuracy


def ocr_upper_bound(dataset: Sequence[QAInstance], max_n: int = 4) -> float:
    if max_n < 1:
        raise ContractError("max_n must be >= 1")
    return _mean([_ocr_best(i, max_n) for i in dataset])


def vocab_upper_bound(dataset: Sequence[QAInstance], vocab: Vocabulary) -> float:
    return _mean([_vocab_best(i, vocab) for i in dataset])


def combined_upper_bound(dataset: Sequence[QAInstance], vocab: Vocabulary, max_n: int = 4) -> float:
    return _mean([max(_ocr_best(i, max_n), _vocab_best(i, vocab)) for i in dataset])


# ---------------------------------------------------------------------------
# heuristics
# ---------------------------------------------------------------------------

@dataclass
class TrainStats:
    top_answers: list[str]
    top_counts: list[int]
    majority: str

    def to_dict(self) -> dict:
        return asdict(self)


def train_stats(train: Sequence[QAInstance], top: int = 100) -> TrainStats:
    counts = Counter(majority_answer(i.answers) for i in train)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top]
    return TrainStats([a for a, _ in ranked], [c for _, c in ranked], ranked[0][0])


def _ocr_max(tokens: Sequence[str]) -> str:
    norm = [normalize_answer(t) for t in tokens]
    counts = Counter(norm)
    best = max(counts.values())
    return next(t for t in norm if counts[t] == best)


HEURISTICS = ("rand100", "wt_rand100", "majority", "random_ocr", "ocr_max")


def heuristic(dataset: Sequence[QAInstance], kind: str, stats: TrainStats, seed: int = 0,
              split: str | None = None) -> EvalReport:
    if kind not in HEURISTICS:
        raise ContractError(f"unknown heuristic {kind!r}; expected one of {HEURISTICS}")
    r = rng(seed, "heuristic", kind)
    weights = np.asarray(stats.top_counts, dtype=np.float64)
    weights = weights / weights.sum()
    scores = []
    for inst in dataset:
        if kind == "rand100":
            guess = stats.top_answers[int(r.integers(len(stats.top_answers)))]
        elif kind == "wt_rand100":
            guess = stats.top_answers[int(r.choice(len(stats.top_answers), p=weights))]
        elif kind == "majority":
            guess = stats.majority
        elif kind == "random_ocr":
            toks = inst.ocr_tokens
            guess = normalize_answer(toks[int(r.integers(len(toks)))]) if toks else ""
        else:
            guess = _ocr_max(inst.ocr_tokens) if inst.ocr_tokens else ""
        scores.append(vqa_accuracy(guess, inst.answers) if guess else 0.0)
    return EvalReport.from_scores(kind, scores, split, seed)


# ---------------------------------------------------------------------------
# provenance analysis
# ---------------------------------------------------------------------------

@dataclass
class AnalysisReport:
    n_questions: int
    fraction_copy_predictions: float
    fraction_vocab_predictions: float
    copy_exact_correct: float
    copy_partial_correct: float
    vocab_correct: float
    answer_in_ocr_fraction: float
    copy_rate_given_answer_in_ocr: float
    accuracy_given_copy_and_answer_in_ocr: float
    answer_in_vocab_fraction: float
    vocab_rate_given_answer_in_vocab: float
    accuracy_given_vocab_and_answer_in_vocab: float
    multi_ocr_fraction: float
    copy_rate_given_multi_ocr: float
    copy_correct_given_multi_ocr: float
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _frac(num: int, den: int) -> float:
    return num / den if den else 0.0


def analyze_predictions(model: LorraModel, dataset: Sequence[QAInstance], *, workers: int = 1,
                        predictions: Sequence[Prediction] | None = None) -> AnalysisReport:
    """Where answers come from and how often each source is right.

    "Correct" means the prediction equals the majority human answer;
    "partially correct" means a copied token equals one word of a
    multi-word majority answer.
    """
    preds = list(predictions) if predictions is not None else predict_dataset(model, dataset, workers=workers)
    vocab = model.vocab
    n_copy = n_vocab = copy_exact = copy_partial = vocab_right = 0
    in_ocr = copy_in_ocr = copy_in_ocr_right = 0
    in_vocab = vocab_in_vocab = vocab_in_vocab_right = 0
    multi = copy_multi = copy_multi_right = 0
    for p, inst in zip(preds, dataset):
        truth = majority_answer(inst.answers)
        right = p.normalized == truth
        ocr_norm = {normalize_answer(t) for t in inst.ocr_tokens}
        if p.source == "copy":
            n_copy += 1
            copy_exact += right
            words = truth.split()
            copy_partial += (not right) and len(words) >= 2 and p.normalized in words
        else:
            n_vocab += 1
            vocab_right += right
        if truth in ocr_norm:
            in_ocr += 1
            if p.source == "copy":
                copy_in_ocr += 1
                copy_in_ocr_right += right
        if truth in vocab:
            in_vocab += 1
            if p.source == "vocab":
                vocab_in_vocab += 1
                vocab_in_vocab_right += right
        if len(inst.ocr_tokens) >= 2:
            multi += 1
            if p.source == "copy":
                copy_multi += 1
                copy_multi_right += right
    total = len(preds)
    return AnalysisReport(
        n_questions=total,
        fraction_copy_predictions=_frac(n_copy, total),
        fraction_vocab_predictions=_frac(n_vocab, total),
        copy_exact_correct=_frac(copy_exact, n_copy),
        copy_partial_correct=_frac(copy_partial, n_copy),
        vocab_correct=_frac(vocab_right, n_vocab),
        answer_in_ocr_fraction=_frac(in_ocr, total),
        copy_rate_given_answer_in_ocr=_frac(copy_in_ocr, in_ocr),
        accuracy_given_copy_and_answer_in_ocr=_frac(copy_in_ocr_right, copy_in_ocr),
        answer_in_vocab_fraction=_frac(in_vocab, total),
        vocab_rate_given_answer_in_vocab=_frac(vocab_in_vocab, in_vocab),
        accuracy_given_vocab_and_answer_in_vocab=_frac(vocab_in_vocab_right, vocab_in_vocab),
        multi_ocr_fraction=_frac(multi, total),
        copy_rate_given_multi_ocr=_frac(copy_multi, multi),
        copy_correct_given_multi_ocr=_frac(copy_multi_right, copy_multi),
    )

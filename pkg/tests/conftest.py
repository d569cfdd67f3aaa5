import numpy as np
import torch
import pytest

from lorra.data import FeatureBundle, QAInstance, SyntheticConfig


def make_instance(answers, ocr_tokens=(), qid="q0", question=("what", "is", "it"), split="train",
                  grid_shape=(4, 64), region_shape=(50, 64)):
    if isinstance(answers, str):
        answers = [answers] * 10
    return QAInstance(
        question_id=qid,
        image_id=f"img-{qid}",
        question_tokens=list(question),
        ocr_tokens=list(ocr_tokens),
        answers=list(answers),
        features=FeatureBundle(np.zeros(grid_shape, np.float32), np.zeros(region_shape, np.float32)),
        split=split,
    )


@pytest.fixture
def small_synth():
    return SyntheticConfig(n_train=40, n_test=20, n_val=10, pool_size_train=60, pool_size_test=30,
                           pool_size_val=20, fraction_copy=0.5, seed=3)


MICRO = dict(word_dim=4, hidden=4, ocr_dim=2, grid_rows=2, grid_dim=4, region_rows=2, region_dim=2,
             buckets=16, attention_dim=4, combine_dim=4, mlp_hidden=4, max_ocr=2, max_question_len=4)


def micro_model(seed=0, vocab=("yes", "stop", "red"), dtype=torch.float64, **overrides):
    """A model with every dimension <= 4, N = 3 and M = 2."""
    from lorra.data import Vocabulary
    from lorra.embeddings import build_question_words
    from lorra.model import LorraModel, ModelConfig

    cfg = ModelConfig(**{**MICRO, "seed": seed, **overrides})
    words = build_question_words([["what", "is", "it"], ["how", "many"]])
    return LorraModel(cfg, Vocabulary(list(vocab)), words).to(dtype)


def micro_instances(seed=0, n=4):
    r = np.random.default_rng(seed)
    insts = []
    for i in range(n):
        inst = make_instance(["stop"] * 6 + ["red"] * 4, ocr_tokens=["stop", "red"][: (i % 3)],
                             qid=f"m{i}", question=("what", "is", "it"),
                             grid_shape=(2, 4), region_shape=(2, 2))
        inst.features.grid = r.normal(size=(2, 4)).astype(np.float32)
        inst.features.regions = r.normal(size=(2, 2)).astype(np.float32)
        insts.append(inst)
    return insts


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, passed: bool | None, detail: str) -> None:
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    ACCEPTANCE_LINES.append(f"[{status}] {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

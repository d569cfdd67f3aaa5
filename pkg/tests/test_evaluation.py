import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lorra.data import Vocabulary, normalize_answer
from lorra.errors import ContractError
from lorra.evaluation import (
    EvalReport,
    analyze_predictions,
    combined_upper_bound,
    evaluate,
    heuristic,
    ocr_candidates,
    ocr_upper_bound,
    reports_to_csv,
    train_stats,
    vocab_upper_bound,
)
from lorra.metric import soft_score
from lorra.model import Prediction

from conftest import make_instance, micro_instances, micro_model


# -- bounds ------------------------------------------------------------------

def test_ocr_ub_bigram():
    inst = make_instance("coca cola", ocr_tokens=["coca", "cola", "classic"])
    assert ocr_upper_bound([inst], max_n=2) == 1.0
    assert ocr_upper_bound([inst], max_n=1) == 0.0


def test_ocr_ub_no_tokens():
    assert ocr_upper_bound([make_instance("yes")]) == 0.0


def test_ocr_ub_normalizes_candidates():
    inst = make_instance("stop", ocr_tokens=["STOP!"])
    assert ocr_upper_bound([inst]) == 1.0


def test_vocab_ub_full_and_empty():
    insts = [make_instance(a) for a in ("yes", "no", "red")]
    assert vocab_upper_bound(insts, Vocabulary(["yes", "no", "red"])) == 1.0
    assert vocab_upper_bound(insts, Vocabulary(["blue"])) == 0.0


def test_combined_takes_per_question_max():
    a = make_instance("stop", ocr_tokens=["stop"], qid="a")
    b = make_instance("yes", qid="b")
    vocab = Vocabulary(["yes"])
    assert ocr_upper_bound([a, b]) == 0.5
    assert vocab_upper_bound([a, b], vocab) == 0.5
    assert combined_upper_bound([a, b], vocab) == 1.0


def test_soft_bound_partial_consensus():
    inst = make_instance(["red"] * 2 + ["blue"] * 8, ocr_tokens=["red"])
    assert ocr_upper_bound([inst]) == pytest.approx(0.6)


def test_max_n_must_be_positive():
    with pytest.raises(ContractError):
        ocr_upper_bound([make_instance("x")], max_n=0)


def _brute_joins(tokens, max_n):
    out = set()
    for i, j in itertools.combinations(range(len(tokens) + 1), 2):
        if j - i <= max_n:
            out.add(normalize_answer(" ".join(tokens[i:j])))
    return out


words = st.sampled_from(["a", "b", "Stop", "coca", "cola", "20", "3.5", "the"])


@settings(max_examples=60, deadline=None)
@given(st.lists(words, max_size=6), st.integers(1, 4))
def test_candidates_match_brute_force(tokens, n):
    assert ocr_candidates(tokens, n) == _brute_joins(tokens, n)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.lists(words, min_size=10, max_size=10), st.lists(words, max_size=6)),
                min_size=1, max_size=8),
       st.lists(words, max_size=4))
def test_bound_dominance(data, vocab_words):
    insts = [make_instance([normalize_answer(a) for a in ans], ocr_tokens=ocr, qid=f"q{i}")
             for i, (ans, ocr) in enumerate(data)]
    vocab = Vocabulary(sorted({normalize_answer(w) for w in vocab_words}))
    ocr_ub, voc_ub = ocr_upper_bound(insts), vocab_upper_bound(insts, vocab)
    assert combined_upper_bound(insts, vocab) >= max(ocr_ub, voc_ub) - 1e-15
    assert combined_upper_bound(insts, vocab) <= ocr_ub + voc_ub + 1e-12


# -- heuristics --------------------------------------------------------------

def _stats_set():
    train = [make_instance("yes", qid=f"t{i}") for i in range(3)] + [make_instance("no", qid="t9")]
    return train_stats(train)


def test_train_stats_ranking():
    s = _stats_set()
    assert s.majority == "yes" and s.top_answers == ["yes", "no"] and s.top_counts == [3, 1]


def test_majority_thirty_percent():
    test = [make_instance("yes" if i < 3 else f"w{i}", qid=f"q{i}") for i in range(10)]
    assert heuristic(test, "majority", _stats_set()).accuracy == pytest.approx(0.30, abs=1e-15)


def test_ocr_max_picks_most_frequent():
    inst = make_instance("crayola", ocr_tokens=["crayola", "crayola", "big", "box"])
    assert heuristic([inst], "ocr_max", _stats_set()).accuracy == 1.0


def test_ocr_max_tie_goes_to_earliest():
    inst = make_instance("first", ocr_tokens=["first", "second"])
    assert heuristic([inst], "ocr_max", _stats_set()).accuracy == 1.0


def test_rand100_disjoint_answers_zero():
    test = [make_instance(f"w{i}", ocr_tokens=["z"], qid=f"q{i}") for i in range(20)]
    stats = _stats_set()
    for kind in ("rand100", "wt_rand100", "majority"):
        assert heuristic(test, kind, stats).accuracy == 0.0


def test_random_ocr_single_token_and_empty():
    a = make_instance("stop", ocr_tokens=["Stop"], qid="a")
    b = make_instance("stop", qid="b")
    assert heuristic([a, b], "random_ocr", _stats_set()).accuracy == 0.5


def test_heuristics_seeded():
    test = [make_instance("yes", ocr_tokens=["a", "b", "yes"], qid=f"q{i}") for i in range(30)]
    s = _stats_set()
    for kind in ("rand100", "wt_rand100", "random_ocr"):
        assert heuristic(test, kind, s, seed=4).scores == heuristic(test, kind, s, seed=4).scores


def test_unknown_heuristic():
    with pytest.raises(ContractError):
        heuristic([], "oracle", _stats_set())


# -- reports -----------------------------------------------------------------

def test_report_ordered_mean_and_csv():
    r = EvalReport.from_scores("I+Q", [1.0, 0.0, 0.3, 0.6], split="test", seed=2)
    assert r.accuracy == pytest.approx(0.475)
    assert reports_to_csv([r]) == "model,split,accuracy_percent,seed\nI+Q,test,47.50,2\n"


def test_evaluate_empty_rejected():
    with pytest.raises(ContractError):
        evaluate(micro_model(), [])


def test_workers_do_not_change_results():
    m = micro_model()
    data = micro_instances(n=40)
    one = evaluate(m, data, workers=1, chunk_size=7)
    eight = evaluate(m, data, workers=8, chunk_size=7)
    assert one.scores == eight.scores and one.accuracy == eight.accuracy


# -- provenance --------------------------------------------------------------

def test_analysis_counts():
    m = micro_model(vocab=("yes", "stop", "red"))
    data = [
        make_instance("stop", ocr_tokens=["stop", "sign"], qid="a"),   # copy, right
        make_instance("coca cola", ocr_tokens=["coca", "cola"], qid="b"),  # copy, partial
        make_instance("yes", qid="c"),                                   # vocab, right
        make_instance("red", ocr_tokens=["red"], qid="d"),               # vocab, right
    ]
    preds = [
        Prediction("stop", "copy", 3, 0.9, "stop"),
        Prediction("cola", "copy", 4, 0.8, "cola"),
        Prediction("yes", "vocab", 0, 0.7, "yes"),
        Prediction("red", "vocab", 2, 0.6, "red"),
    ]
    r = analyze_predictions(m, data, predictions=preds)
    assert r.n_questions == 4
    assert r.fraction_copy_predictions == 0.5 and r.fraction_vocab_predictions == 0.5
    assert r.copy_exact_correct == 0.5 and r.copy_partial_correct == 0.5
    assert r.vocab_correct == 1.0
    assert r.answer_in_ocr_fraction == 0.5
    assert r.copy_rate_given_answer_in_ocr == 0.5
    assert r.accuracy_given_copy_and_answer_in_ocr == 1.0
    assert r.multi_ocr_fraction == 0.5
    assert r.copy_rate_given_multi_ocr == 1.0 and r.copy_correct_given_multi_ocr == 0.5


def test_analysis_fractions_sum_to_one():
    m = micro_model()
    r = analyze_predictions(m, micro_instances(n=9))
    assert r.fraction_copy_predictions + r.fraction_vocab_predictions == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["copy", "vocab"]), st.sampled_from(["stop", "red", "yes"])),
                min_size=1, max_size=10))
def test_analysis_rates_bounded(choices):
    m = micro_model()
    data = [make_instance("stop", ocr_tokens=["stop", "red"], qid=f"q{i}") for i in range(len(choices))]
    preds = [Prediction(a, s, 0, 0.5, a) for s, a in choices]
    r = analyze_predictions(m, data, predictions=preds)
    for k, v in vars(r).items():
        if isinstance(v, float):
            assert 0.0 <= v <= 1.0, k
    expect = np.mean([a == "stop" for s, a in choices if s == "copy"]) if any(s == "copy" for s, _ in choices) else 0.0
    assert r.copy_exact_correct == pytest.approx(expect)


def test_soft_score_used_for_accuracy():
    inst = make_instance(["red"] * 2 + ["blue"] * 8)
    assert soft_score("red", inst.answers) == pytest.approx(0.6)

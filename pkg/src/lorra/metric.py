"""Consensus (soft) VQA accuracy, shared by target construction and evaluation."""
from __future__ import annotations

from typing import Sequence


def soft_score(answer: str, answers: Sequence[str]) -> float:
    """Leave-one-out average of min(matches / 3, 1) over the human answers.

    With k exact matches among n answers, dropping a matching answer leaves
    k - 1 matches and dropping a non-matching one leaves k, so the average is
    (k * min(k - 1, 3) + (n - k) * min(k, 3)) / (3 n). The numerator is an
    integer, so the result is correctly rounded.
    """
    n = len(answers)
    if n == 0:
        return 0.0
    k = sum(1 for a in answers if a == answer)
    if k == 0:
        return 0.0
    return (k * min(k - 1, 3) + (n - k) * min(k, 3)) / (3 * n)


vqa_accuracy = soft_score

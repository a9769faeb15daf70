"""Edit distance and corpus-level CER / WER."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit costs, two-row dynamic program."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def words(text: str) -> list[str]:
    # runs of spaces count as one separator
    return text.split()


@dataclass
class EvalReport:
    cer: float
    wer: float
    char_distances: list[int] = field(default_factory=list)
    word_distances: list[int] = field(default_factory=list)
    ref_chars: int = 0
    ref_words: int = 0

    def __len__(self) -> int:
        return len(self.char_distances)


def corpus_scores(refs: Sequence[str], hyps: Sequence[str], count_spaces: bool = True) -> EvalReport:
    """Micro-averaged CER and WER in percent.

    ``count_spaces=False`` drops spaces from both sides before the character
    distance.
    """
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    cd, wd = [], []
    n_chars = n_words = 0
    for r, h in zip(refs, hyps):
        if not count_spaces:
            r_c, h_c = r.replace(" ", ""), h.replace(" ", "")
        else:
            r_c, h_c = r, h
        cd.append(edit_distance(r_c, h_c))
        n_chars += len(r_c)
        rw, hw = words(r), words(h)
        wd.append(edit_distance(rw, hw))
        n_words += len(rw)
    cer = 100.0 * sum(cd) / n_chars if n_chars else 0.0
    wer = 100.0 * sum(wd) / n_words if n_words else 0.0
    return EvalReport(cer, wer, cd, wd, n_chars, n_words)

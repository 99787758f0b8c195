"""Character and word error rates from Levenshtein distances.

Rates are corpus-level (micro-averaged): total edits over total reference
length.  Spaces count as characters for CER; words are maximal runs of
non-whitespace.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

CER_NOTE = "CER counts spaces as characters; WER tokens are whitespace-separated; rates are corpus-level"


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost insert/delete/substitute distance, O(len(a) * len(b))."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


@dataclass
class EvalReport:
    cer: float
    wer: float
    char_edits: int
    char_total: int
    word_edits: int
    word_total: int
    sample_char_edits: list[int] = field(default_factory=list)
    sample_word_edits: list[int] = field(default_factory=list)
    loss: float | None = None
    hypotheses: list[str] = field(default_factory=list)

    def rows(self) -> list[tuple[str, str]]:
        rows = [
            ("cer", f"{self.cer:.4f}"),
            ("wer", f"{self.wer:.4f}"),
            ("char_edits", str(self.char_edits)),
            ("char_total", str(self.char_total)),
            ("word_edits", str(self.word_edits)),
            ("word_total", str(self.word_total)),
        ]
        if self.loss is not None:
            rows.append(("ctc_loss", f"{self.loss:.6f}"))
        return rows

    def to_text(self) -> str:
        lines = [f"# {CER_NOTE}"]
        lines += [f"{k:<12}{v:>14}" for k, v in self.rows()]
        return "\n".join(lines) + "\n"

    def to_tsv(self) -> str:
        return "metric\tvalue\n" + "".join(f"{k}\t{v}\n" for k, v in self.rows())


def cer_wer(references: Sequence[str], hypotheses: Sequence[str]) -> EvalReport:
    if len(references) != len(hypotheses):
        raise ValueError(
            f"got {len(references)} references but {len(hypotheses)} hypotheses"
        )
    c_edits = [levenshtein(r, h) for r, h in zip(references, hypotheses)]
    w_edits = [levenshtein(r.split(), h.split()) for r, h in zip(references, hypotheses)]
    c_total = sum(len(r) for r in references)
    w_total = sum(len(r.split()) for r in references)
    if c_total == 0 or w_total == 0:
        raise ValueError("references are empty in aggregate; error rates are undefined")
    return EvalReport(
        cer=100.0 * sum(c_edits) / c_total,
        wer=100.0 * sum(w_edits) / w_total,
        char_edits=sum(c_edits),
        char_total=c_total,
        word_edits=sum(w_edits),
        word_total=w_total,
        sample_char_edits=c_edits,
        sample_word_edits=w_edits,
    )


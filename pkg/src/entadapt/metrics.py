"""Word error rate by Levenshtein alignment, and simple aggregation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError

_SPECIAL = (0, 1, 2)  # BOS, EOS, PAD


@dataclass(frozen=True)
class WerBreakdown:
    substitutions: int
    insertions: int
    deletions: int
    reference_length: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        return self.errors / self.reference_length


def words(seq: Sequence[int]) -> list[int]:
    return [int(t) for t in seq if int(t) not in _SPECIAL]


def edit_distance_wer(reference: Sequence[int], hypothesis: Sequence[int]) -> WerBreakdown:
    """Unit-cost alignment of ``hypothesis`` against ``reference``.

    BOS/EOS/PAD are stripped first.  Among minimum-cost alignments the one
    with the fewest insertions plus deletions is reported.
    """
    ref, hyp = words(reference), words(hypothesis)
    if not ref:
        raise ContractError("reference has no words")
    n, m = len(ref), len(hyp)
    # cell = (cost, insertions + deletions); compared lexicographically
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    indel = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = indel[:, 0] = np.arange(n + 1)
    cost[0, :] = indel[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = ref[i - 1] != hyp[j - 1]
            cost[i, j], indel[i, j] = min(
                (cost[i - 1, j - 1] + sub, indel[i - 1, j - 1]),
                (cost[i - 1, j] + 1, indel[i - 1, j] + 1),
                (cost[i, j - 1] + 1, indel[i, j - 1] + 1),
            )
    s = ins = dele = 0
    i, j = n, m
    while i > 0 or j > 0:
        here = (cost[i, j], indel[i, j])
        if i > 0 and j > 0:
            sub = ref[i - 1] != hyp[j - 1]
            if (cost[i - 1, j - 1] + sub, indel[i - 1, j - 1]) == here:
                s += sub
                i, j = i - 1, j - 1
                continue
        if i > 0 and (cost[i - 1, j] + 1, indel[i - 1, j] + 1) == here:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerBreakdown(int(s), int(ins), int(dele), n)


def pooled(reports: Sequence[WerBreakdown]) -> WerBreakdown:
    """Sum the counts of several breakdowns (e.g. all utterances of a speaker)."""
    if not reports:
        raise ContractError("nothing to pool")
    return WerBreakdown(
        sum(r.substitutions for r in reports),
        sum(r.insertions for r in reports),
        sum(r.deletions for r in reports),
        sum(r.reference_length for r in reports),
    )


def aggregate(reports: Sequence[WerBreakdown], mode: str = "per_speaker_mean") -> float:
    """Combine per-speaker breakdowns.

    ``per_speaker_mean`` is the unweighted mean of speaker WERs (the headline
    number); ``pooled`` divides total errors by total reference length.
    """
    if not reports:
        raise ContractError("cannot aggregate an empty list")
    if mode == "per_speaker_mean":
        return float(np.mean([r.wer for r in reports]))
    if mode == "pooled":
        return pooled(reports).wer
    raise ContractError(f"unknown aggregation mode {mode!r}")

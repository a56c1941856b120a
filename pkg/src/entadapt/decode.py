"""N-best search over the recognizer and an exhaustive enumeration oracle."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ResourceError
from .model import EOS, Encoded, Recognizer, TokenSequence, Utterance, out_to_token
from . import tensorcore as tc

ENUMERATION_BUDGET = 10**6
_CHUNK = 4096


@dataclass(frozen=True)
class Hypothesis:
    tokens: TokenSequence
    logprob: float


@dataclass
class NBestList:
    utterance_id: str
    hypotheses: list[Hypothesis]
    # probability mass of sequences too long to be listed (enumeration only)
    residual: float = 0.0

    def __len__(self) -> int:
        return len(self.hypotheses)

    def __iter__(self):
        return iter(self.hypotheses)

    @property
    def sequences(self) -> list[TokenSequence]:
        return [h.tokens for h in self.hypotheses]

    @property
    def logprobs(self) -> np.ndarray:
        return np.array([h.logprob for h in self.hypotheses])

    def best(self) -> Hypothesis:
        return self.hypotheses[0]


def _ranked(scored: dict[TokenSequence, float]) -> list[Hypothesis]:
    # descending log-probability, ties broken token-lexicographically
    return [Hypothesis(t, s) for t, s in sorted(scored.items(), key=lambda kv: (-kv[1], kv[0]))]


def beam_search_encoded(rec: Recognizer, enc: Encoded, row: int, utterance_id: str = "",
                        beam_width: int = 8, n_best: int = 5, max_len: int | None = None) -> NBestList:
    """Length-unnormalised beam search for row ``row`` of an encoded batch.

    Hypotheses still open after ``max_len`` word tokens are closed with EOS,
    scored by the model's EOS probability (probability 1 at the model's own
    length cap).
    """
    if not 1 <= n_best <= beam_width:
        raise ValueError("need 1 <= n_best <= beam_width")
    cap = rec.config.max_len
    limit = cap if max_len is None else min(int(max_len), cap)
    if limit < 0:
        raise ValueError("max_len must be nonnegative")
    beams: list[tuple[float, TokenSequence]] = [(0.0, ())]
    finished: dict[TokenSequence, float] = {}
    for depth in range(limit + 1):
        if depth == cap:
            for s, p in beams:
                finished[p + (EOS,)] = s
            break
        lp = rec.next_token_logprobs(enc, row, [p for _, p in beams])
        cands: list[tuple[float, TokenSequence]] = []
        for i, (s, p) in enumerate(beams):
            finished[p + (EOS,)] = s + float(lp[i, 0])
            if depth < limit:
                cands.extend((s + float(lp[i, j]), p + (out_to_token(j),)) for j in range(1, lp.shape[1]))
        cands.sort(key=lambda c: (-c[0], c[1]))
        beams = cands[:beam_width]
        if not beams:
            break
        if len(finished) >= n_best:
            kth = sorted(finished.values(), reverse=True)[n_best - 1]
            # extensions can only lose probability
            if beams[0][0] < kth:
                break
    return NBestList(utterance_id, _ranked(finished)[:n_best])


def beam_search(utterance: Utterance, code, rec: Recognizer, beam_width: int = 8, n_best: int = 5,
                max_len: int | None = None) -> NBestList:
    with tc.no_grad():
        enc = rec.encode_utterances([utterance], code)
    return beam_search_encoded(rec, enc, 0, utterance.utt_id, beam_width, n_best, max_len)


def decode_many(utts: Sequence[Utterance], code, rec: Recognizer, beam_width: int = 8, n_best: int = 5,
                max_len: int | None = None) -> list[NBestList]:
    """Beam search every utterance, encoding them one at a time."""
    return [beam_search(u, code, rec, beam_width, n_best, max_len) for u in utts]


def enumerate_all(utterance: Utterance, code, rec: Recognizer, max_len: int) -> NBestList:
    """Score every EOS-terminated sequence with at most ``max_len`` word tokens.

    ``residual`` holds the mass of longer sequences, so the listed
    probabilities plus the residual sum to one.
    """
    cap = rec.config.max_len
    limit = min(int(max_len), cap)
    n_words = rec.config.n_words
    total = sum(n_words**k for k in range(limit + 1))
    if n_words**limit > ENUMERATION_BUDGET or total > 2 * ENUMERATION_BUDGET:
        raise ResourceError(f"enumeration of {total} sequences exceeds the budget")
    with tc.no_grad():
        enc = rec.encode_utterances([utterance], code)
    scored: dict[TokenSequence, float] = {}
    level: list[TokenSequence] = [()]
    level_lp = np.zeros(1)
    residual = 0.0
    for depth in range(limit + 1):
        if depth == cap:
            for p, s in zip(level, level_lp):
                scored[p + (EOS,)] = float(s)
            break
        lp = np.concatenate([
            rec.next_token_logprobs(enc, 0, level[i : i + _CHUNK]) for i in range(0, len(level), _CHUNK)
        ])
        for p, s, row in zip(level, level_lp, lp):
            scored[p + (EOS,)] = float(s + row[0])
        if depth == limit:
            residual = float(np.sum(np.exp(level_lp) * -np.expm1(lp[:, 0])))
            break
        nxt = (level_lp[:, None] + lp[:, 1:]).reshape(-1)
        level = [p + (out_to_token(j),) for p in level for j in range(1, lp.shape[1])]
        level_lp = nxt
    return NBestList(utterance.utt_id, _ranked(scored), residual)


def write_nbest_jsonl(lists: Iterable[NBestList], path: str | Path) -> None:
    """Debug dump: one JSON object per hypothesis."""
    with open(path, "w") as fh:
        for nb in lists:
            for rank, h in enumerate(nb.hypotheses):
                rec = {"utterance_id": nb.utterance_id, "rank": rank, "logprob": h.logprob, "tokens": list(h.tokens)}
                fh.write(json.dumps(rec) + "\n")

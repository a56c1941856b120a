"""Brute-force reference computations used by the self-check and the tests."""

from __future__ import annotations

import itertools
from collections import deque
from typing import Iterator, Sequence


def all_sequences(alphabet: Sequence[int], max_len: int) -> list[tuple[int, ...]]:
    return [s for n in range(max_len + 1) for s in itertools.product(alphabet, repeat=n)]


def _neighbours(s: tuple[int, ...], alphabet: Sequence[int], max_len: int) -> Iterator[tuple[int, ...]]:
    for i in range(len(s)):
        yield s[:i] + s[i + 1 :]
        for a in alphabet:
            if a != s[i]:
                yield s[:i] + (a,) + s[i + 1 :]
    if len(s) < max_len:
        for i in range(len(s) + 1):
            for a in alphabet:
                yield s[:i] + (a,) + s[i:]


def edit_distances_bfs(alphabet: Sequence[int], max_len: int) -> dict[tuple[int, ...], dict[tuple[int, ...], int]]:
    """All-pairs unit-cost edit distances by breadth-first search over single edits.

    Nodes are all sequences of length at most ``max_len``; a shortest edit
    path between two such sequences never needs a longer intermediate.
    """
    nodes = all_sequences(alphabet, max_len)
    out = {}
    for src in nodes:
        dist = {src: 0}
        queue = deque([src])
        while queue:
            s = queue.popleft()
            for t in _neighbours(s, alphabet, max_len):
                if t not in dist:
                    dist[t] = dist[s] + 1
                    queue.append(t)
        out[src] = dist
    return out


def alignments(ref: Sequence[int], hyp: Sequence[int]) -> Iterator[tuple[int, int, int]]:
    """Every monotone alignment as ``(substitutions, insertions, deletions)``; exponential."""
    if not ref:
        yield 0, len(hyp), 0
        return
    if not hyp:
        yield 0, 0, len(ref)
        return
    for s, i, d in alignments(ref[1:], hyp[1:]):
        yield s + (ref[0] != hyp[0]), i, d
    for s, i, d in alignments(ref[1:], hyp):
        yield s, i, d + 1
    for s, i, d in alignments(ref, hyp[1:]):
        yield s, i + 1, d

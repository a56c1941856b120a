"""Adaptation objectives over a fixed set of target hypotheses.

* pseudolabel / oracle: mean negative log-probability of one sequence per
  utterance (the decoder's 1-best, or the true reference);
* minimum entropy: for each utterance the entropy of the N-best
  distribution renormalised by its total mass ``Z``::

      loss = -1/|A| * sum_X 1/Z(X) * sum_{w in N-best(X)} q(w|X) log q(w|X)

  ``q`` and ``Z`` are recomputed from the current parameters, and the
  gradient flows through ``Z`` unless ``stop_grad_z`` is set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, xlogy

from . import tensorcore as tc
from .decode import NBestList, enumerate_all
from .errors import ContractError, DegenerateMassError
from .model import Recognizer, TokenSequence, Utterance, _code_tensor, strip_sequence
from .tensorcore import Tensor

EPS_Z = 1e-30
LOG_EPS_Z = float(np.log(EPS_Z))


@dataclass
class AdaptationBatch:
    """Utterances, each paired with the hypotheses its loss sums over."""

    utterances: list[Utterance]
    targets: list[list[TokenSequence]]

    def __post_init__(self):
        if len(self.utterances) != len(self.targets):
            raise ContractError("one target list per utterance")
        ids = [u.utt_id for u in self.utterances]
        if len(set(ids)) != len(ids):
            raise ContractError("an utterance appears twice in the batch")
        cleaned = []
        for u, hyps in zip(self.utterances, self.targets):
            seen: dict[TokenSequence, None] = {}
            for w in hyps:
                seen.setdefault(strip_sequence(w), None)
            if not seen:
                raise ContractError(f"{u.utt_id}: empty hypothesis list")
            cleaned.append(list(seen))
        self.targets = cleaned

    def __len__(self) -> int:
        return len(self.utterances)

    @classmethod
    def from_nbest(cls, utts: Sequence[Utterance], nbests: Sequence[NBestList]) -> "AdaptationBatch":
        return cls(list(utts), [nb.sequences for nb in nbests])

    @classmethod
    def from_pseudolabels(cls, utts: Sequence[Utterance], nbests: Sequence[NBestList]) -> "AdaptationBatch":
        return cls(list(utts), [[nb.best().tokens] for nb in nbests])

    @classmethod
    def from_references(cls, utts: Sequence[Utterance]) -> "AdaptationBatch":
        return cls(list(utts), [[u.reference] for u in utts])


def hypothesis_logprobs(batch: AdaptationBatch, code: Tensor | None, rec: Recognizer) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Flat ``log q(w|X)`` for every (utterance, hypothesis) pair.

    Returns the flat tensor plus a padded ``[n_utts, N_max]`` index into it
    and the matching validity mask.
    """
    if len(batch) == 0:
        raise ContractError("empty adaptation batch")
    rows, seqs = [], []
    for i, hyps in enumerate(batch.targets):
        rows.extend([i] * len(hyps))
        seqs.extend(hyps)
    enc = rec.encode_utterances(batch.utterances, _code_tensor(code))
    logq = rec.sequence_logprobs(enc, rows, seqs)
    n_max = max(len(h) for h in batch.targets)
    index = np.zeros((len(batch), n_max), dtype=np.intp)
    valid = np.zeros((len(batch), n_max), dtype=bool)
    start = 0
    for i, hyps in enumerate(batch.targets):
        n = len(hyps)
        index[i, :n] = np.arange(start, start + n)
        index[i, n:] = start
        valid[i, :n] = True
        start += n
    return logq, index, valid


def _cross_entropy(batch: AdaptationBatch, code, rec: Recognizer) -> Tensor:
    if any(len(h) != 1 for h in batch.targets):
        raise ContractError("cross-entropy losses take exactly one target per utterance")
    logq, _, _ = hypothesis_logprobs(batch, code, rec)
    return tc.scale(tc.sum(logq), -1.0 / len(batch))


def pseudolabel_loss(batch: AdaptationBatch, code, rec: Recognizer) -> Tensor:
    """``-1/|A| sum_X log q(w*(X) | X)`` for pseudolabels ``w*``."""
    return _cross_entropy(batch, code, rec)


def oracle_loss(batch: AdaptationBatch, code, rec: Recognizer) -> Tensor:
    """Supervised counterpart of :func:`pseudolabel_loss` on true references."""
    return _cross_entropy(batch, code, rec)


def renormalized_entropy(logq: np.ndarray) -> float:
    """Entropy term of one utterance from the log-probabilities of its N-best list."""
    logq = np.asarray(logq, dtype=np.float64)
    log_z = logsumexp(logq)
    if log_z < LOG_EPS_Z:
        raise DegenerateMassError(f"N-best mass {np.exp(log_z):.3g} below {EPS_Z}")
    return float(-np.sum(np.exp(logq - log_z) * logq))


def renormalized_entropy_tensor(logq: Tensor, valid: np.ndarray, stop_grad_z: bool = False) -> Tensor:
    """Per-row renormalised entropy of ``logq [n, N]``; invalid slots ignored."""
    mask = np.where(valid, 0.0, -np.inf)
    log_z = logsumexp(logq.data + mask, axis=-1)
    if np.any(log_z < LOG_EPS_Z):
        raise DegenerateMassError(f"N-best mass below {EPS_Z} for {int(np.sum(log_z < LOG_EPS_Z))} utterance(s)")
    if stop_grad_z:
        weights = tc.mul_const(tc.exp(tc.add_const(logq, -log_z[:, None])), valid)
    else:
        weights = tc.softmax(logq, np.where(valid, 0.0, -1e9))
    return tc.scale(tc.sum(tc.mul(weights, tc.mul_const(logq, valid)), axis=1), -1.0)


def normalizer_z(nbest: NBestList | Sequence[TokenSequence], utterance: Utterance, code, rec: Recognizer) -> float:
    """Total probability mass ``Z(X)`` of the hypotheses under the current model."""
    seqs = nbest.sequences if isinstance(nbest, NBestList) else list(nbest)
    if not seqs:
        raise ContractError("empty N-best list")
    with tc.no_grad():
        logq, _, _ = hypothesis_logprobs(AdaptationBatch([utterance], [seqs]), code, rec)
    log_z = float(logsumexp(logq.data))
    if log_z < LOG_EPS_Z:
        raise DegenerateMassError(f"N-best mass below {EPS_Z}")
    return float(np.exp(log_z))


def min_entropy_loss(batch: AdaptationBatch, code, rec: Recognizer, stop_grad_z: bool = False) -> Tensor:
    """Renormalised N-best conditional entropy, averaged over utterances."""
    logq, index, valid = hypothesis_logprobs(batch, code, rec)
    per_utt = renormalized_entropy_tensor(tc.take(logq, index, axis=0), valid, stop_grad_z)
    return tc.scale(tc.sum(per_utt), 1.0 / len(batch))


LOSSES = {
    "pseudolabel": pseudolabel_loss,
    "min_entropy": min_entropy_loss,
    "oracle": oracle_loss,
}


def entropy_decomposition_check(toy_audio_dist: Sequence[tuple[Utterance, float]], code, rec: Recognizer,
                                max_len: int) -> tuple[float, float, float]:
    """Joint, conditional and audio entropies of ``p_A(X) q(w|X)`` by full enumeration.

    The joint entropy is computed directly from the joint probabilities,
    not by adding the other two.
    """
    probs = np.array([p for _, p in toy_audio_dist], dtype=np.float64)
    if probs.size == 0 or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
        raise ContractError("audio probabilities must be nonnegative and sum to 1")
    h_joint = h_cond = 0.0
    for (utt, p_x) in toy_audio_dist:
        nb = enumerate_all(utt, code, rec, max_len)
        if nb.residual > 1e-12:
            raise ContractError("hypothesis space not exhausted; raise max_len to the model's cap")
        q = np.exp(nb.logprobs)
        h_joint -= float(np.sum(xlogy(p_x * q, p_x * q)))
        h_cond -= p_x * float(np.sum(xlogy(q, q)))
    h_audio = -float(np.sum(xlogy(probs, probs)))
    return h_joint, h_cond, h_audio

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import toy_model, toy_utterance
from entadapt.decode import beam_search, decode_many, enumerate_all, write_nbest_jsonl
from entadapt.errors import ResourceError
from entadapt.model import EOS, sequence_logprob


def _top(nb, n):
    return [h.tokens for h in nb.hypotheses[:n]]


class TestEnumerate:
    def test_forty_sequences(self):
        rec = toy_model(0, n_words=3, max_len=4)
        nb = enumerate_all(toy_utterance(0), None, rec, max_len=3)
        assert len(nb) == 1 + 3 + 9 + 27
        assert all(h.tokens[-1] == EOS and len(h.tokens) <= 4 for h in nb)
        assert len(set(nb.sequences)) == 40

    def test_max_len_zero(self, toy):
        nb = enumerate_all(toy_utterance(0), None, toy, max_len=0)
        assert nb.sequences == [(EOS,)]

    @pytest.mark.parametrize("max_len", [0, 1, 2, 3])
    def test_mass_plus_residual_is_one(self, max_len):
        rec = toy_model(1, n_words=3, max_len=5)
        nb = enumerate_all(toy_utterance(1), None, rec, max_len=max_len)
        assert abs(np.exp(nb.logprobs).sum() + nb.residual - 1.0) < 1e-6
        assert nb.residual > 0

    def test_scores_match_teacher_forcing(self, toy):
        utt = toy_utterance(2)
        nb = enumerate_all(utt, np.ones(4), toy, max_len=2)
        for h in nb.hypotheses[:10]:
            assert abs(h.logprob - sequence_logprob(utt, h.tokens, np.ones(4), toy.params, toy.config)) < 1e-9

    def test_sorted(self, toy):
        lp = enumerate_all(toy_utterance(3), None, toy, max_len=3).logprobs
        assert np.all(np.diff(lp) <= 0)

    def test_budget(self):
        rec = toy_model(0, n_words=13, max_len=12)
        with pytest.raises(ResourceError):
            enumerate_all(toy_utterance(0), None, rec, max_len=6)


class TestBeamSearch:
    def test_matches_enumeration_eos_a_b(self):
        rec = toy_model(4, n_words=2, max_len=3)
        utt = toy_utterance(4)
        beam = beam_search(utt, None, rec, beam_width=27, n_best=5, max_len=3)
        full = enumerate_all(utt, None, rec, max_len=3)
        assert beam.sequences == _top(full, 5)
        np.testing.assert_allclose(beam.logprobs, full.logprobs[:5], atol=1e-12)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10**6))
    def test_one_best_is_argmax(self, seed):
        rec = toy_model(seed % 97, n_words=3, max_len=3)
        utt = toy_utterance(seed)
        best = beam_search(utt, None, rec, beam_width=40, n_best=1).best()
        assert best.tokens == enumerate_all(utt, None, rec, max_len=3).best().tokens

    def test_deterministic(self, toy):
        utt = toy_utterance(5)
        a = beam_search(utt, None, toy, beam_width=4, n_best=3)
        b = beam_search(utt, None, toy, beam_width=4, n_best=3)
        assert a == b

    def test_hypotheses_scored_by_model(self, toy):
        utt = toy_utterance(6)
        nb = beam_search(utt, np.ones(4), toy, beam_width=6, n_best=5)
        for h in nb:
            assert abs(h.logprob - sequence_logprob(utt, h.tokens, np.ones(4), toy.params, toy.config)) < 1e-9

    def test_truncation_closes_with_eos(self, toy):
        nb = beam_search(toy_utterance(7), None, toy, beam_width=4, n_best=4, max_len=1)
        assert all(len(h.tokens) <= 2 and h.tokens[-1] == EOS for h in nb)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10**6), st.integers(1, 6))
    def test_invariants(self, seed, width):
        rec = toy_model(seed % 31, sharpness=1.0)
        nb = beam_search(toy_utterance(seed), None, rec, beam_width=width, n_best=min(width, 3))
        lp = nb.logprobs
        assert np.all(np.diff(lp) <= 0) and np.all(lp <= 0)
        assert len(set(nb.sequences)) == len(nb) <= min(width, 3)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10**6))
    def test_wider_beam_never_worse(self, seed):
        rec = toy_model(seed % 31, sharpness=0.5)
        utt = toy_utterance(seed)
        best = [beam_search(utt, None, rec, beam_width=w, n_best=1).best().logprob for w in (1, 2, 4, 8, 40)]
        assert all(b >= a - 1e-12 for a, b in zip(best, best[1:]))

    def test_bad_widths(self, toy):
        with pytest.raises(ValueError):
            beam_search(toy_utterance(0), None, toy, beam_width=2, n_best=3)

    def test_decode_many(self, toy):
        utts = [toy_utterance(i, utt_id=f"x{i}") for i in range(3)]
        out = decode_many(utts, None, toy, beam_width=3, n_best=2)
        assert [nb.utterance_id for nb in out] == ["x0", "x1", "x2"]


def test_nbest_dump(tmp_path, toy):
    nb = beam_search(toy_utterance(0, utt_id="u"), None, toy, beam_width=3, n_best=2)
    path = tmp_path / "nb.jsonl"
    write_nbest_jsonl([nb], path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["rank"] for r in rows] == [0, 1]
    assert rows[0] == {"utterance_id": "u", "rank": 0, "logprob": nb.best().logprob, "tokens": list(nb.best().tokens)}

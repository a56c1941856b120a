import numpy as np
import pytest

from entadapt.corpus import (AMOUNT_PRESETS, MAX_CONDITION, CorpusConfig, SpeakerProfile, build_corpus,
                             generate_corpus, load_corpus, render_utterance, speaker_profile, train_speakers)
from entadapt import corpus as corpus_mod
from entadapt.errors import ContractError, DataError
from entadapt.model import EOS, N_SPECIAL


def small(**kw):
    base = dict(n_train_speakers=3, n_test_speakers=2, n_train=4, n_train_dev=2, n_adapt=6, n_adapt_dev=2, n_test=3)
    base.update(kw)
    return CorpusConfig(**base)


class TestProfiles:
    def test_deterministic_per_speaker(self):
        cfg = CorpusConfig()
        a, b = speaker_profile(cfg, "tst004"), speaker_profile(cfg, "tst004")
        assert a.channel.tobytes() == b.channel.tobytes() and a.bias.tobytes() == b.bias.tobytes()
        assert a.noise_scale == b.noise_scale

    def test_condition_number_bounded(self):
        cfg = CorpusConfig(channel_strength=3.0)
        for s in train_speakers(cfg)[:15]:
            assert np.linalg.cond(speaker_profile(cfg, s).channel) <= MAX_CONDITION

    def test_noise_tiers(self):
        cfg = CorpusConfig()
        tiers = {speaker_profile(cfg, s).noise_scale for s in train_speakers(cfg)}
        assert tiers <= set(cfg.noise_levels) and len(tiers) > 1

    def test_presets(self):
        clean = speaker_profile(CorpusConfig(preset="clean"), "trn000")
        assert clean.noise_scale == 0 and np.array_equal(clean.channel, np.eye(8)) and not np.any(clean.bias)
        noisy = speaker_profile(CorpusConfig(preset="clean-noise"), "trn000")
        assert np.array_equal(noisy.channel, np.eye(8))

    def test_bias_along_ladder_axis(self):
        cfg = CorpusConfig()
        axis = corpus_mod._world(cfg)[2]
        for s in train_speakers(cfg)[:10]:
            bias = speaker_profile(cfg, s).bias
            along = bias @ axis
            np.testing.assert_allclose(bias, along * axis, atol=1e-12)
            assert cfg.bias_floor * cfg.bias_strength <= abs(along) <= cfg.bias_strength

    def test_bias_signs_mixed(self):
        cfg = CorpusConfig()
        axis = corpus_mod._world(cfg)[2]
        signs = {np.sign(speaker_profile(cfg, s).bias @ axis) for s in train_speakers(cfg)}
        assert signs == {-1.0, 1.0}

    def test_speakers_differ(self):
        cfg = CorpusConfig()
        p, q = speaker_profile(cfg, "trn000"), speaker_profile(cfg, "trn001")
        protos = np.random.default_rng(0).normal(size=(cfg.vocab_size, cfg.d_feat))
        tokens = (3, 4, 5, EOS)
        a = render_utterance(tokens, p, np.random.default_rng(1), protos)
        b = render_utterance(tokens, q, np.random.default_rng(1), protos)
        assert np.linalg.norm(a.features - b.features) > 0


class TestWorld:
    def test_ladder_geometry(self):
        cfg = CorpusConfig()
        protos, _, axis = corpus_mod._world(cfg)
        np.testing.assert_allclose(np.linalg.norm(axis), 1.0)
        assert not np.any(protos[:N_SPECIAL])
        words = protos[N_SPECIAL:]
        for start in range(0, len(words), cfg.ladder_size):
            ladder = words[start : start + cfg.ladder_size]
            steps = np.diff(ladder, axis=0)
            np.testing.assert_allclose(steps, np.tile(cfg.ladder_spacing * axis, (len(steps), 1)), atol=1e-12)

    def test_ladders_centred_off_axis(self):
        cfg = CorpusConfig()
        protos, _, axis = corpus_mod._world(cfg)
        first = protos[N_SPECIAL : N_SPECIAL + cfg.ladder_size]
        np.testing.assert_allclose(first.mean(axis=0) @ axis, 0.0, atol=1e-12)

    def test_deterministic(self):
        a, b = corpus_mod._world(CorpusConfig()), corpus_mod._world(CorpusConfig())
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))


class TestRender:
    def test_identity_channel_gives_prototypes(self):
        protos = np.arange(6 * 3, dtype=float).reshape(6, 3)
        prof = SpeakerProfile("s", np.eye(3), np.zeros(3), 0.0, 0)
        utt = render_utterance((3, 5, EOS), prof, np.random.default_rng(0), protos)
        frames = utt.features
        assert 4 <= len(frames) <= 8
        for row in frames:
            assert any(np.array_equal(row, protos[t]) for t in (3, 5))
        np.testing.assert_array_equal(frames[0], protos[3])
        np.testing.assert_array_equal(frames[-1], protos[5])

    def test_frame_counts(self):
        protos = np.eye(8)
        prof = SpeakerProfile("s", np.eye(8), np.zeros(8), 0.0, 0)
        for seed in range(20):
            utt = render_utterance((3, 4, 3, EOS), prof, np.random.default_rng(seed), protos)
            assert 6 <= len(utt.features) <= 12

    def test_reproducible(self):
        cfg = CorpusConfig()
        prof = speaker_profile(cfg, "trn002")
        protos = np.random.default_rng(0).normal(size=(16, 8))
        a = render_utterance((3, 4, EOS), prof, np.random.default_rng(9), protos)
        b = render_utterance((3, 4, EOS), prof, np.random.default_rng(9), protos)
        assert a.features.tobytes() == b.features.tobytes()


class TestGenerate:
    def test_default_counts(self):
        cfg = CorpusConfig()
        assert len(train_speakers(cfg)) * cfg.n_train == 4000
        assert cfg.n_adapt + cfg.n_adapt_dev + cfg.n_test == 70

    def test_split_sizes(self):
        cfg = small()
        c = build_corpus(cfg)
        assert len(c.split("train")) == 12 and len(c.split("train-dev")) == 6
        assert len(c.split("adapt")) == 12 and len(c.split("adapt-dev")) == 4 and len(c.split("test")) == 6

    def test_disjoint_speakers(self):
        c = build_corpus(small())
        train_side = set(c.speakers("train")) | set(c.speakers("train-dev"))
        test_side = set(c.speakers("adapt")) | set(c.speakers("adapt-dev")) | set(c.speakers("test"))
        assert not train_side & test_side
        assert set(c.speakers("test")) == set(corpus_mod.test_speakers(small()))

    def test_no_test_speakers(self):
        c = build_corpus(small(n_test_speakers=0))
        assert c.split("adapt") == [] and c.split("test") == [] and c.split("adapt-dev") == []

    def test_references_valid(self):
        cfg = small()
        for u in build_corpus(cfg).utterances:
            body = u.reference[:-1]
            assert u.reference[-1] == EOS and cfg.min_tokens <= len(body) <= cfg.max_tokens
            assert all(N_SPECIAL <= t < cfg.vocab_size for t in body)
            assert all(a != b for a, b in zip(body, body[1:]))

    def test_byte_identical_regeneration(self, tmp_path):
        cfg = small()
        generate_corpus(cfg, tmp_path / "a")
        generate_corpus(cfg, tmp_path / "b")
        for name in ("corpus.jsonl", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_changes_data(self):
        a = build_corpus(small(corpus_seed=0)).utterances[0]
        b = build_corpus(small(corpus_seed=1)).utterances[0]
        assert a.features.shape != b.features.shape or not np.array_equal(a.features, b.features)

    def test_load_round_trip(self, tmp_path):
        cfg = small()
        manifest = generate_corpus(cfg, tmp_path)
        loaded = load_corpus(tmp_path)
        built = build_corpus(cfg)
        assert manifest["counts"]["train"] == 12 and loaded.manifest == manifest
        for u, v in zip(loaded.utterances, built.utterances):
            assert u.utt_id == v.utt_id and u.reference == v.reference
            assert u.features.tobytes() == v.features.tobytes()

    def test_missing_corpus(self, tmp_path):
        with pytest.raises(DataError):
            load_corpus(tmp_path / "absent")

    def test_malformed_line(self, tmp_path):
        (tmp_path / "corpus.jsonl").write_text('{"utt_id": "a"}\n')
        with pytest.raises(DataError, match=":1:"):
            load_corpus(tmp_path)

    @pytest.mark.parametrize("kw", [{"preset": "studio"}, {"n_train": -1}, {"min_tokens": 5, "max_tokens": 4},
                                    {"vocab_size": 4}, {"noise_levels": ()}, {"ladder_size": 0},
                                    {"bias_floor": 1.5}, {"channel_strength": -1.0}])
    def test_invalid_config(self, kw):
        with pytest.raises(ContractError):
            CorpusConfig(**kw)


class TestSubset:
    def test_prefix_by_id(self):
        c = build_corpus(small())
        full = c.subset_adaptation_data("tst000", 6)
        assert [u.utt_id for u in full] == sorted(u.utt_id for u in c.get("tst000", "adapt"))
        assert c.subset_adaptation_data("tst000", 2) == full[:2]

    def test_bounds(self):
        c = build_corpus(small())
        with pytest.raises(ContractError):
            c.subset_adaptation_data("tst000", 0)
        with pytest.raises(ContractError):
            c.subset_adaptation_data("tst000", 7)

    def test_presets(self):
        assert AMOUNT_PRESETS == {"1min": 5, "10min": 40}

"""Deterministic synthetic corpus with per-speaker channels and noise.

Every word token owns a prototype feature vector.  An utterance renders each
token as 2-4 copies of its prototype, passes the frames through the
speaker's channel matrix, adds the speaker's bias and finally Gaussian noise
at the speaker's noise tier.

Prototypes sit on short "ladders": tokens of one group share a centre and
are spaced evenly along a common axis.  A speaker's bias points along that
axis, so it slides every frame towards a neighbouring token.  Inside one
utterance a slid frame looks like a different word; across utterances the
slide is consistent, which is what a speaker code can learn.  Channels are
mild mixings drawn from a low-dimensional family ``expm(sum_k z_k G_k)``.

Presets: ``channel-noise`` (channel, bias and noise), ``clean-noise``
(noise only) and ``clean`` (neither).
"""

from __future__ import annotations

import json
import zlib
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.linalg import expm

from .errors import ContractError, DataError
from .model import EOS, N_SPECIAL, Utterance

SPLITS = ("train", "train-dev", "adapt", "adapt-dev", "test")
PRESETS = ("channel-noise", "clean-noise", "clean")
MAX_CONDITION = 10.0

# utterance budgets standing in for one and ten minutes of adaptation data
AMOUNT_PRESETS = {"1min": 5, "10min": 40}


@dataclass
class CorpusConfig:
    preset: str = "channel-noise"
    n_train_speakers: int = 40
    n_test_speakers: int = 20
    n_train: int = 100
    n_train_dev: int = 5
    n_adapt: int = 40
    n_adapt_dev: int = 10
    n_test: int = 20
    min_tokens: int = 3
    max_tokens: int = 10
    d_feat: int = 8
    vocab_size: int = 16
    corpus_seed: int = 0
    channel_dim: int = 3
    channel_strength: float = 0.15
    # bias magnitude is uniform on [bias_floor, 1] * bias_strength, random sign
    bias_strength: float = 0.7
    bias_floor: float = 0.65
    ladder_size: int = 7
    ladder_spacing: float = 2.0
    ladder_spread: float = 1.5
    noise_levels: tuple[float, ...] = (0.0, 0.15, 0.25, 0.35)

    def __post_init__(self):
        self.noise_levels = tuple(float(x) for x in self.noise_levels)
        if self.preset not in PRESETS:
            raise ContractError(f"corpus.preset must be one of {PRESETS}")
        counts = ("n_train_speakers", "n_test_speakers", "n_train", "n_train_dev", "n_adapt", "n_adapt_dev", "n_test")
        if any(getattr(self, c) < 0 for c in counts):
            raise ContractError("corpus counts must be nonnegative")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ContractError("corpus token length range is empty")
        if self.vocab_size - N_SPECIAL < 2:
            raise ContractError("corpus needs at least two word tokens")
        if self.ladder_size < 1 or self.channel_dim < 1:
            raise ContractError("corpus.ladder_size and corpus.channel_dim must be positive")
        if not 0 <= self.bias_floor <= 1:
            raise ContractError("corpus.bias_floor must lie in [0, 1]")
        if min(self.channel_strength, self.bias_strength, self.ladder_spacing, self.ladder_spread) < 0:
            raise ContractError("corpus strengths and ladder geometry must be nonnegative")
        if len(self.noise_levels) == 0 or any(x < 0 for x in self.noise_levels):
            raise ContractError("corpus.noise_levels must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_levels"] = list(self.noise_levels)
        return d

    def split_size(self, split: str) -> int:
        return {
            "train": self.n_train,
            "train-dev": self.n_train_dev,
            "adapt": self.n_adapt,
            "adapt-dev": self.n_adapt_dev,
            "test": self.n_test,
        }[split]


@dataclass
class SpeakerProfile:
    speaker_id: str
    channel: np.ndarray
    bias: np.ndarray
    noise_scale: float
    seed: int


def _speaker_seed(speaker_id: str) -> int:
    return zlib.crc32(speaker_id.encode("utf-8"))


def train_speakers(config: CorpusConfig) -> list[str]:
    return [f"trn{i:03d}" for i in range(config.n_train_speakers)]


def test_speakers(config: CorpusConfig) -> list[str]:
    return [f"tst{i:03d}" for i in range(config.n_test_speakers)]


def _world(config: CorpusConfig):
    """Token prototypes, the channel family and the ladder axis, shared by all speakers."""
    rng = np.random.default_rng([config.corpus_seed, 0x5EED])
    d = config.d_feat
    n_words = config.vocab_size - N_SPECIAL
    axis = rng.normal(size=d)
    axis /= np.linalg.norm(axis)
    n_ladders = -(-n_words // config.ladder_size)
    centres = rng.normal(0.0, config.ladder_spread, (n_ladders, d))
    centres -= np.outer(centres @ axis, axis)
    prototypes = np.zeros((config.vocab_size, d))
    for i in range(n_words):
        ladder, rung = divmod(i, config.ladder_size)
        offset = rung - (config.ladder_size - 1) / 2
        prototypes[N_SPECIAL + i] = centres[ladder] + config.ladder_spacing * offset * axis
    generators = rng.normal(0.0, 1.0 / np.sqrt(d), (config.channel_dim, d, d))
    return prototypes, generators, axis


def speaker_profile(config: CorpusConfig, speaker_id: str) -> SpeakerProfile:
    seed = _speaker_seed(speaker_id)
    rng = np.random.default_rng([config.corpus_seed, seed])
    d = config.d_feat
    _, generators, axis = _world(config)
    noise = float(config.noise_levels[rng.integers(len(config.noise_levels))])
    if config.preset == "clean":
        noise = 0.0
    if config.preset != "channel-noise":
        return SpeakerProfile(speaker_id, np.eye(d), np.zeros(d), noise, seed)
    while True:
        z = rng.normal(0.0, 1.0, config.channel_dim)
        channel = expm(config.channel_strength * np.tensordot(z, generators, axes=1))
        if np.linalg.cond(channel) <= MAX_CONDITION:
            break
    sign = rng.choice([-1.0, 1.0])
    bias = config.bias_strength * sign * rng.uniform(config.bias_floor, 1.0) * axis
    return SpeakerProfile(speaker_id, channel, bias, noise, seed)


def sample_tokens(config: CorpusConfig, rng: np.random.Generator) -> tuple[int, ...]:
    """Word sequence without immediate repeats (repeats would be unsegmentable), EOS-closed."""
    n = int(rng.integers(config.min_tokens, config.max_tokens + 1))
    words: list[int] = []
    for _ in range(n):
        w = int(rng.integers(N_SPECIAL, config.vocab_size))
        while words and w == words[-1]:
            w = int(rng.integers(N_SPECIAL, config.vocab_size))
        words.append(w)
    return tuple(words) + (EOS,)


def render_utterance(tokens: Sequence[int], profile: SpeakerProfile, rng: np.random.Generator,
                     prototypes: np.ndarray, utt_id: str = "", split: str = "train") -> Utterance:
    """Frames for ``tokens`` as heard through ``profile``'s channel."""
    words = [t for t in tokens if t != EOS]
    counts = rng.integers(2, 5, size=len(words))
    frames = np.repeat(prototypes[words], counts, axis=0)
    feats = frames @ profile.channel.T + profile.bias
    if profile.noise_scale > 0:
        feats = feats + profile.noise_scale * rng.normal(0.0, 1.0, feats.shape)
    return Utterance(utt_id, profile.speaker_id, split, feats, tuple(tokens))


def _utterances(config: CorpusConfig) -> Iterator[Utterance]:
    prototypes, _, _ = _world(config)
    plan = [(s, ("train", "train-dev")) for s in train_speakers(config)]
    plan += [(s, ("adapt", "adapt-dev", "test")) for s in test_speakers(config)]
    for speaker_id, splits in plan:
        profile = speaker_profile(config, speaker_id)
        for split in splits:
            for i in range(config.split_size(split)):
                rng = np.random.default_rng([config.corpus_seed, profile.seed, SPLITS.index(split), i])
                tokens = sample_tokens(config, rng)
                yield render_utterance(tokens, profile, rng, prototypes, f"{speaker_id}-{split}-{i:03d}", split)


def generate_corpus(config: CorpusConfig, out_dir: str | Path) -> dict:
    """Write ``corpus.jsonl`` and ``manifest.json`` to ``out_dir``; return the manifest."""
    if set(train_speakers(config)) & set(test_speakers(config)):
        raise ContractError("train and test speakers overlap")
    out = Path(out_dir)
    counts: dict[str, int] = {s: 0 for s in SPLITS}
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "corpus.jsonl", "w") as fh:
            for u in _utterances(config):
                counts[u.split] += 1
                rec = {
                    "utt_id": u.utt_id,
                    "speaker_id": u.speaker_id,
                    "split": u.split,
                    "features": u.features.tolist(),
                    "tokens": list(u.reference),
                }
                fh.write(json.dumps(rec) + "\n")
        manifest = {
            "config": config.to_dict(),
            "seed": config.corpus_seed,
            "counts": counts,
            "train_speakers": train_speakers(config),
            "test_speakers": test_speakers(config),
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write corpus to {out}: {exc}") from exc
    return manifest


@dataclass
class Corpus:
    utterances: list[Utterance]
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index: dict[tuple[str, str], list[Utterance]] = defaultdict(list)
        for u in self.utterances:
            self._index[(u.speaker_id, u.split)].append(u)
        for key in self._index:
            self._index[key].sort(key=lambda u: u.utt_id)

    def split(self, split: str) -> list[Utterance]:
        return [u for u in self.utterances if u.split == split]

    def speakers(self, split: str) -> list[str]:
        return sorted({u.speaker_id for u in self.utterances if u.split == split})

    def get(self, speaker_id: str, split: str) -> list[Utterance]:
        return list(self._index.get((speaker_id, split), []))

    def subset_adaptation_data(self, speaker_id: str, amount: int) -> list[Utterance]:
        """The first ``amount`` adapt-split utterances of a speaker, by utterance id."""
        pool = self.get(speaker_id, "adapt")
        if amount < 1:
            raise ContractError("adaptation needs at least one utterance")
        if amount > len(pool):
            raise ContractError(f"{speaker_id} has only {len(pool)} adapt utterances, {amount} requested")
        return pool[:amount]


def load_corpus(path: str | Path) -> Corpus:
    """Read a corpus directory (or a ``corpus.jsonl`` path)."""
    path = Path(path)
    jsonl = path / "corpus.jsonl" if path.is_dir() else path
    if not jsonl.exists():
        raise DataError(f"corpus not found: {jsonl}")
    utts = []
    with open(jsonl) as fh:
        for lineno, line in enumerate(fh, 1):
            try:
                r = json.loads(line)
                utts.append(Utterance(r["utt_id"], r["speaker_id"], r["split"], np.asarray(r["features"]), r["tokens"]))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{jsonl}:{lineno}: malformed utterance record ({exc})") from exc
    manifest_path = jsonl.parent / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    return Corpus(utts, manifest)


def build_corpus(config: CorpusConfig) -> Corpus:
    """In-memory corpus, identical to what :func:`generate_corpus` writes."""
    return Corpus(list(_utterances(config)), {"config": config.to_dict()})

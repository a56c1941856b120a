"""Encoder-decoder recognizer with speaker-code injection and LoRA adapters.

Encoder layer ("Conformer-lite", no convolution module)::

    a = LN1(x) + P_l @ code        # only for l in injection_layers
    x = x + SelfAttn(a)            # residual branches off before injection
    x = x + FFN(LN2(x))

The decoder is a pre-norm autoregressive transformer with cross-attention.
Its output distribution covers EOS and the word tokens; BOS and PAD are
never emitted.  After ``max_len`` word tokens EOS is forced (probability 1),
so ``q(w | X)`` is a proper distribution over a finite set.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .errors import ContractError, DataError, DimensionError
from .params import GROUPS, ParameterStore
from .tensorcore import Tensor

BOS, EOS, PAD = 0, 1, 2
N_SPECIAL = 3
NEG_INF = -1e9

TokenSequence = tuple[int, ...]


@dataclass
class ModelConfig:
    d_feat: int = 8
    d_model: int = 32
    n_encoder_layers: int = 4
    n_decoder_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    vocab_size: int = 16
    d_code: int = 16
    injection_layers: tuple[int, ...] = (0, 1, 2, 3)
    lora_rank: int = 2
    lora_layers: tuple[int, ...] = (1, 2, 3)
    max_len: int = 12
    init_seed: int = 0

    def __post_init__(self):
        self.injection_layers = tuple(sorted(set(int(i) for i in self.injection_layers)))
        self.lora_layers = tuple(sorted(set(int(i) for i in self.lora_layers)))
        self.validate()

    def validate(self) -> None:
        for name in ("d_feat", "d_model", "n_encoder_layers", "n_decoder_layers", "n_heads", "d_ff", "d_code", "max_len"):
            if getattr(self, name) < 1:
                raise ContractError(f"model.{name} must be positive")
        if self.vocab_size < N_SPECIAL + 1:
            raise ContractError("model.vocab_size must leave room for at least one word token")
        if self.d_model % self.n_heads:
            raise ContractError("model.d_model must be divisible by model.n_heads")
        for name in ("injection_layers", "lora_layers"):
            if any(i < 0 or i >= self.n_encoder_layers for i in getattr(self, name)):
                raise ContractError(f"model.{name} must index encoder layers")
        if not 0 <= self.lora_rank <= self.d_model:
            raise ContractError("model.lora_rank must lie in [0, d_model]")

    @property
    def n_words(self) -> int:
        return self.vocab_size - N_SPECIAL

    @property
    def out_tokens(self) -> np.ndarray:
        """Token id of each output class: EOS first, then the words."""
        return np.concatenate([[EOS], np.arange(N_SPECIAL, self.vocab_size)])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["injection_layers"] = list(self.injection_layers)
        d["lora_layers"] = list(self.lora_layers)
        return d


def token_to_out(tokens) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.intp)
    return np.where(t == EOS, 0, t - (N_SPECIAL - 1))


def out_to_token(idx: int) -> int:
    return EOS if idx == 0 else idx + (N_SPECIAL - 1)


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    split: str
    features: np.ndarray
    reference: TokenSequence = field(default_factory=tuple)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.reference = tuple(int(t) for t in self.reference)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DimensionError(f"{self.utt_id}: features must be [T>=1, d_feat]")
        if self.reference:
            if self.reference[-1] != EOS or EOS in self.reference[:-1] or PAD in self.reference:
                raise ContractError(f"{self.utt_id}: reference must end with a single EOS and contain no PAD")


def strip_sequence(w: Sequence[int]) -> TokenSequence:
    """Drop trailing PAD so equivalent padded sequences score identically."""
    w = list(w)
    while w and w[-1] == PAD:
        w.pop()
    return tuple(int(t) for t in w)


def _positional(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def init_params(config: ModelConfig, seed: int | None = None) -> ParameterStore:
    """Fresh base, projection and output parameters (no speaker codes, no LoRA)."""
    rng = np.random.default_rng(config.init_seed if seed is None else seed)
    d, dff = config.d_model, config.d_ff
    p = ParameterStore()

    def linear(prefix, n_in, n_out, group="base"):
        p.add(prefix + ".W", rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out)), group)
        p.add(prefix + ".b", np.zeros(n_out), group)

    def norm(prefix):
        p.add(prefix + ".g", np.ones(d), "base")
        p.add(prefix + ".b", np.zeros(d), "base")

    def attention(prefix):
        for m in ("q", "k", "v", "o"):
            linear(f"{prefix}.{m}", d, d)

    def ffn(prefix):
        linear(prefix + ".in", d, dff)
        linear(prefix + ".out", dff, d)

    linear("enc.in", config.d_feat, d)
    for l in range(config.n_encoder_layers):
        norm(f"enc.{l}.ln1")
        attention(f"enc.{l}.att")
        norm(f"enc.{l}.ln2")
        ffn(f"enc.{l}.ff")
    norm("enc.ln")
    for l in config.injection_layers:
        p.add(f"code_proj.{l}", rng.normal(0.0, 1.0 / np.sqrt(config.d_code), (config.d_code, d)), "code_projections")
    p.add("dec.emb", rng.normal(0.0, 1.0, (config.vocab_size, d)), "base")
    for l in range(config.n_decoder_layers):
        norm(f"dec.{l}.ln1")
        attention(f"dec.{l}.self")
        norm(f"dec.{l}.ln2")
        attention(f"dec.{l}.cross")
        norm(f"dec.{l}.ln3")
        ffn(f"dec.{l}.ff")
    norm("dec.ln")
    linear("out", d, config.vocab_size - 2)
    return p


def lora_names(layer: int, target: str) -> tuple[str, str]:
    return f"lora.enc.{layer}.{target}.A", f"lora.enc.{layer}.{target}.B"


LORA_TARGETS = ("q", "v")


def apply_lora(params: ParameterStore, config: ModelConfig, rank: int | None = None,
               layers: Sequence[int] | None = None, seed: int = 0) -> None:
    """Attach zero-delta low-rank adapters to the encoder query/value projections.

    Forward then uses ``W + B A`` with ``A ~ N(0, 0.02^2)`` of shape
    ``[rank, d_model]`` and ``B = 0`` of shape ``[d_model, rank]``.
    """
    rank = config.lora_rank if rank is None else rank
    layers = config.lora_layers if layers is None else tuple(layers)
    if params.names("lora"):
        raise ContractError("LoRA adapters are already attached")
    if rank == 0:
        return
    if rank < 0 or rank > config.d_model:
        raise ContractError(f"LoRA rank must lie in [1, d_model], got {rank}")
    if any(l < 0 or l >= config.n_encoder_layers for l in layers):
        raise ContractError("LoRA layers must index encoder layers")
    rng = np.random.default_rng(seed)
    d = config.d_model
    for l in sorted(layers):
        for target in LORA_TARGETS:
            a_name, b_name = lora_names(l, target)
            params.add(a_name, rng.normal(0.0, 0.02, (rank, d)), "lora")
            params.add(b_name, np.zeros((d, rank)), "lora")


def count_parameters(params: ParameterStore, group: str) -> int:
    if group not in GROUPS:
        raise ContractError(f"unknown parameter group {group!r}")
    return params.count(group)


def code_name(speaker_id: str) -> str:
    return f"speaker_code/{speaker_id}"


def pad_features(feats: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length feature matrices into ``[B, T, d]`` plus a frame mask."""
    T = max(f.shape[0] for f in feats)
    d = feats[0].shape[1]
    out = np.zeros((len(feats), T, d))
    mask = np.zeros((len(feats), T), dtype=bool)
    for i, f in enumerate(feats):
        out[i, : f.shape[0]] = f
        mask[i, : f.shape[0]] = True
    return out, mask


@dataclass
class Encoded:
    states: Tensor  # [B, T, d_model]
    mask: np.ndarray  # [B, T] bool


class Recognizer:
    """The recognizer ``q(w | X)`` over a :class:`ParameterStore`."""

    def __init__(self, config: ModelConfig, params: ParameterStore):
        self.config = config
        self.params = params
        self._pe = _positional(64, config.d_model)

    def _pos(self, n: int) -> np.ndarray:
        if n > self._pe.shape[0]:
            self._pe = _positional(2 * n, self.config.d_model)
        return self._pe[:n]

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        return tc.add_bias(tc.matmul(x, p[prefix + ".W"]), p[prefix + ".b"])

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return tc.layernorm(x, self.params[prefix + ".g"], self.params[prefix + ".b"])

    def _projection(self, x: Tensor, prefix: str, lora_key: tuple[str, str] | None) -> Tensor:
        y = self._linear(x, prefix)
        if lora_key is not None and lora_key[0] in self.params:
            A, B = self.params[lora_key[0]], self.params[lora_key[1]]
            y = y + tc.matmul(tc.matmul(x, tc.transpose(A, (1, 0))), tc.transpose(B, (1, 0)))
        return y

    def _attention(self, q_in: Tensor, kv_in: Tensor, prefix: str, mask: np.ndarray,
                   lora_layer: int | None = None) -> Tensor:
        cfg = self.config
        B, Tq, d = q_in.shape
        Tk = kv_in.shape[1]
        H = cfg.n_heads
        dh = d // H
        lq = lora_names(lora_layer, "q") if lora_layer is not None else None
        lv = lora_names(lora_layer, "v") if lora_layer is not None else None
        q = self._projection(q_in, prefix + ".q", lq)
        k = self._projection(kv_in, prefix + ".k", None)
        v = self._projection(kv_in, prefix + ".v", lv)
        q = tc.transpose(tc.reshape(q, (B, Tq, H, dh)), (0, 2, 1, 3))
        k = tc.transpose(tc.reshape(k, (B, Tk, H, dh)), (0, 2, 3, 1))
        v = tc.transpose(tc.reshape(v, (B, Tk, H, dh)), (0, 2, 1, 3))
        scores = tc.scale(tc.bmm(q, k), 1.0 / np.sqrt(dh))
        att = tc.softmax(scores, mask)
        o = tc.reshape(tc.transpose(tc.bmm(att, v), (0, 2, 1, 3)), (B, Tq, d))
        return self._linear(o, prefix + ".o")

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        return self._linear(tc.gelu(self._linear(x, prefix + ".in")), prefix + ".out")

    # ------------------------------------------------------------ encoder

    def encode(self, feats: np.ndarray, mask: np.ndarray, code: Tensor | None = None, *,
               inject: bool = True, trace: dict | None = None,
               ablate_attention: Sequence[int] = ()) -> Encoded:
        """Encode padded features ``[B, T, d_feat]``.

        ``code`` is ``[d_code]`` (shared by the batch) or ``[B, d_code]``;
        ``None`` means the zero code.  ``trace`` collects per-layer
        intermediates; ``ablate_attention`` zeroes the self-attention output
        of the listed layers.
        """
        cfg = self.config
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 3 or feats.shape[-1] != cfg.d_feat:
            raise DimensionError(f"features must be [B, T, {cfg.d_feat}], got {feats.shape}")
        if code is not None and code.shape[-1] != cfg.d_code:
            raise DimensionError(f"speaker code must have {cfg.d_code} entries, got {code.shape}")
        B, T, _ = feats.shape
        att_mask = np.where(mask, 0.0, NEG_INF)[:, None, None, :]
        x = self._linear(Tensor(feats), "enc.in")
        x = tc.add_const(x, self._pos(T))
        for l in range(cfg.n_encoder_layers):
            ln = self._norm(x, f"enc.{l}.ln1")
            a = ln
            if inject and code is not None and l in cfg.injection_layers:
                a = tc.add_bias(ln, tc.matmul(code, self.params[f"code_proj.{l}"]))
            lora_layer = l if l in cfg.lora_layers else None
            h = self._attention(a, a, f"enc.{l}.att", att_mask, lora_layer)
            if l in ablate_attention:
                h = tc.mul_const(h, 0.0)
            x_in = x
            x = x + h
            x_mid = x
            x = x + self._ffn(self._norm(x, f"enc.{l}.ln2"), f"enc.{l}.ff")
            if trace is not None:
                trace[l] = {"input": x_in.data, "ln": ln.data, "attn_input": a.data,
                            "post_attention": x_mid.data, "output": x.data}
        return Encoded(self._norm(x, "enc.ln"), mask)

    def encode_utterances(self, utts: Sequence[Utterance], code: Tensor | None = None, **kw) -> Encoded:
        feats, mask = pad_features([u.features for u in utts])
        return self.encode(feats, mask, code, **kw)

    # ------------------------------------------------------------ decoder

    def decode(self, enc: Encoded, prev: np.ndarray) -> Tensor:
        """Log-probabilities ``[B, U, n_out]`` of the next token after each prefix.

        ``prev`` holds decoder inputs (BOS followed by the prefix), ``[B, U]``.
        """
        cfg = self.config
        prev = np.asarray(prev, dtype=np.intp)
        B, U = prev.shape
        y = tc.take(self.params["dec.emb"], prev, axis=0)
        y = tc.add_const(y, self._pos(U))
        causal = np.where(np.tril(np.ones((U, U), dtype=bool)), 0.0, NEG_INF)[None, None]
        cross = np.where(enc.mask, 0.0, NEG_INF)[:, None, None, :]
        for l in range(cfg.n_decoder_layers):
            a = self._norm(y, f"dec.{l}.ln1")
            y = y + self._attention(a, a, f"dec.{l}.self", causal)
            a = self._norm(y, f"dec.{l}.ln2")
            y = y + self._attention(a, enc.states, f"dec.{l}.cross", cross)
            y = y + self._ffn(self._norm(y, f"dec.{l}.ln3"), f"dec.{l}.ff")
        logits = self._linear(self._norm(y, "dec.ln"), "out")
        return tc.log_softmax(logits)

    def check_sequence(self, w: Sequence[int]) -> TokenSequence:
        w = strip_sequence(w)
        cfg = self.config
        if not w or w[-1] != EOS:
            raise ContractError(f"sequence must end with EOS: {w}")
        body = w[:-1]
        if any(t < N_SPECIAL or t >= cfg.vocab_size for t in body):
            raise ContractError(f"token outside the word vocabulary in {w}")
        if len(body) > cfg.max_len:
            raise ContractError(f"sequence longer than max_len={cfg.max_len}")
        return w

    def batch_targets(self, seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Decoder inputs, output-class targets and position weights for sequences."""
        U = max(len(w) for w in seqs)
        S = len(seqs)
        prev = np.full((S, U), PAD, dtype=np.intp)
        target = np.zeros((S, U), dtype=np.intp)
        weight = np.zeros((S, U))
        for i, w in enumerate(seqs):
            n = len(w)
            prev[i, 0] = BOS
            prev[i, 1:n] = w[:-1]
            target[i, :n] = token_to_out(w)
            weight[i, :n] = 1.0
            if n - 1 == self.config.max_len:
                weight[i, n - 1] = 0.0  # forced EOS has probability 1
        return prev, target, weight

    def sequence_logprobs(self, enc: Encoded, rows: Sequence[int], seqs: Sequence[Sequence[int]]) -> Tensor:
        """``log q(w_i | X_rows[i])`` for each sequence, by teacher forcing; shape ``[S]``."""
        seqs = [self.check_sequence(w) for w in seqs]
        rows = np.asarray(rows, dtype=np.intp)
        prev, target, weight = self.batch_targets(seqs)
        sub = Encoded(tc.take(enc.states, rows, axis=0), enc.mask[rows])
        lp = self.decode(sub, prev)
        return tc.sum(tc.mul_const(tc.pick(lp, target), weight), axis=1)

    def next_token_logprobs(self, enc: Encoded, row: int, prefixes: Sequence[TokenSequence]) -> np.ndarray:
        """Next-token log-probabilities (output classes) after each prefix, without gradients."""
        U = max(len(p) for p in prefixes) + 1
        prev = np.full((len(prefixes), U), PAD, dtype=np.intp)
        last = np.zeros(len(prefixes), dtype=np.intp)
        for i, p in enumerate(prefixes):
            prev[i, 0] = BOS
            prev[i, 1 : len(p) + 1] = p
            last[i] = len(p)
        with tc.no_grad():
            idx = np.full(len(prefixes), row, dtype=np.intp)
            sub = Encoded(tc.take(enc.states, idx, axis=0), enc.mask[idx])
            lp = self.decode(sub, prev).data
        return lp[np.arange(len(prefixes)), last]


def _code_tensor(code) -> Tensor | None:
    if code is None or isinstance(code, Tensor):
        return code
    return Tensor(np.asarray(code, dtype=np.float64))


def encode(features: np.ndarray, code, params: ParameterStore, config: ModelConfig, **kw) -> Tensor:
    """Encode one utterance's ``[T, d_feat]`` features; returns ``[T, d_model]``."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise DimensionError("features must be [T, d_feat]")
    enc = Recognizer(config, params).encode(feats[None], np.ones((1, feats.shape[0]), bool), _code_tensor(code), **kw)
    return tc.reshape(enc.states, enc.states.shape[1:])


def sequence_logprob(utterance: Utterance, w: Sequence[int], code, params: ParameterStore,
                     config: ModelConfig) -> float:
    """``log q(w | X)`` for a single utterance and hypothesis."""
    rec = Recognizer(config, params)
    with tc.no_grad():
        enc = rec.encode_utterances([utterance], _code_tensor(code))
        return float(rec.sequence_logprobs(enc, [0], [w]).data[0])


# --------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, config: ModelConfig, params: ParameterStore, extra: dict | None = None) -> None:
    doc = {"config": config.to_dict(), "tensors": params.to_dict()}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, ParameterStore, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        doc = json.loads(path.read_text())
        config = ModelConfig(**doc.pop("config"))
        params = ParameterStore.from_dict(doc.pop("tensors"))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed checkpoint {path}: {exc}") from exc
    return config, params, doc

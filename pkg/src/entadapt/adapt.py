"""Base-model training with speaker codes, and per-speaker adaptation.

Training learns the base recognizer, the per-layer code projections and one
code per training speaker jointly.  Within each batch a fixed share of the
utterances runs with the code clamped to zero (so the model also works
speaker-independently); those codes get no update.  For the first warm-up
epochs every code is clamped.

Adaptation decodes the adaptation data once with the unadapted model, then
takes one full-batch Adam step per epoch on the chosen loss, updating only
the chosen parameter set.  A snapshot of the adapted tensors and the loss
on adapt-dev are kept for every epoch so the epoch can be picked afterwards.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensorcore as tc
from .corpus import Corpus
from .decode import NBestList, beam_search_encoded
from .errors import ContractError, DegenerateMassError
from .losses import LOSSES, AdaptationBatch
from .metrics import WerBreakdown, edit_distance_wer, pooled
from .model import (EOS, ModelConfig, Recognizer, Utterance, apply_lora, code_name, init_params,
                    pad_features)
from .params import AdamState, ParameterStore, adam_step
from .tensorcore import Tensor

log = logging.getLogger(__name__)

PARAMETER_SETS = ("speaker_code", "lora", "both")
LOSS_KINDS = tuple(LOSSES)
SELECTION_MODES = ("global_average", "per_speaker")


@dataclass
class TrainPlan:
    steps: int = 2500
    batch_size: int = 32
    learning_rate: float = 2e-3
    code_learning_rate: float = 3e-2
    zero_code_fraction: float = 0.5
    warmup_epochs_codes_frozen: int = 5
    seed: int = 0
    eval_every: int = 250

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ContractError("train.steps, train.batch_size and train.eval_every must be positive")
        if not 0.0 <= self.zero_code_fraction <= 1.0:
            raise ContractError("train.zero_code_fraction must lie in [0, 1]")
        if self.learning_rate <= 0 or self.code_learning_rate <= 0:
            raise ContractError("train.learning_rate and train.code_learning_rate must be positive")
        if self.warmup_epochs_codes_frozen < 0:
            raise ContractError("train.warmup_epochs_codes_frozen must be nonnegative")


@dataclass
class AdaptPlan:
    parameter_set: str = "speaker_code"
    loss_kind: str = "min_entropy"
    max_epochs: int = 50
    lr_code: float = 1e-2
    lr_lora: float = 1e-3
    n_best: int = 5
    beam_width: int = 8
    epoch_selection: str = "global_average"
    stop_grad_z: bool = False
    refresh_nbest: bool = False
    lora_seed: int = 0

    def __post_init__(self):
        if self.parameter_set not in PARAMETER_SETS:
            raise ContractError(f"parameter_set must be one of {PARAMETER_SETS}")
        if self.loss_kind not in LOSS_KINDS:
            raise ContractError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.epoch_selection not in SELECTION_MODES:
            raise ContractError(f"epoch_selection must be one of {SELECTION_MODES}")
        if self.max_epochs < 1:
            raise ContractError("max_epochs must be at least 1")
        if self.lr_code <= 0 or self.lr_lora <= 0:
            raise ContractError("learning rates must be positive")
        if not 1 <= self.n_best <= self.beam_width:
            raise ContractError("need 1 <= n_best <= beam_width")

    @property
    def groups(self) -> tuple[str, ...]:
        return {"speaker_code": ("speaker_codes",), "lora": ("lora",), "both": ("speaker_codes", "lora")}[self.parameter_set]

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ training


def token_accuracy(rec: Recognizer, utts: Sequence[Utterance], codes: Mapping[str, np.ndarray] | None,
                   batch_size: int = 64) -> float:
    """Teacher-forced next-token accuracy; ``codes=None`` runs with zero codes."""
    correct = total = 0
    with tc.no_grad():
        for i in range(0, len(utts), batch_size):
            chunk = utts[i : i + batch_size]
            code = None
            if codes is not None:
                code = Tensor(np.stack([codes[u.speaker_id] for u in chunk]))
            feats, mask = pad_features([u.features for u in chunk])
            enc = rec.encode(feats, mask, code)
            prev, target, weight = rec.batch_targets([u.reference for u in chunk])
            lp = rec.decode(enc, prev).data
            hit = (lp.argmax(axis=-1) == target) & (weight > 0)
            correct += int(hit.sum())
            total += int((weight > 0).sum())
    return correct / max(total, 1)


@dataclass
class TrainResult:
    params: ParameterStore
    adam: AdamState
    step: int
    curve: list[dict] = field(default_factory=list)


def new_training_params(config: ModelConfig, speakers: Sequence[str]) -> ParameterStore:
    params = init_params(config)
    for s in speakers:
        params.add(code_name(s), np.zeros(config.d_code), "speaker_codes")
    return params


def train_base(corpus: Corpus, config: ModelConfig, plan: TrainPlan, params: ParameterStore | None = None,
               adam: AdamState | None = None, start_step: int = 0,
               on_eval: Callable[[dict], None] | None = None) -> TrainResult:
    """Jointly train base parameters, code projections and training-speaker codes.

    Batches are a pure function of ``(plan.seed, step)``, so a run resumed
    from ``start_step`` with its parameters and Adam state continues exactly
    as the uninterrupted run would.
    """
    train = sorted(corpus.split("train"), key=lambda u: u.utt_id)
    if not train:
        raise ContractError("corpus has no training utterances")
    dev = sorted(corpus.split("train-dev"), key=lambda u: u.utt_id)
    speakers = sorted({u.speaker_id for u in train})
    if params is None:
        params = new_training_params(config, speakers)
    adam = adam or AdamState()
    rec = Recognizer(config, params)
    zero = Tensor(np.zeros(config.d_code))
    steps_per_epoch = math.ceil(len(train) / plan.batch_size)
    warmup_steps = plan.warmup_epochs_codes_frozen * steps_per_epoch
    base_names = params.names("base") + params.names("code_projections")
    n_zero = int(round(plan.zero_code_fraction * min(plan.batch_size, len(train))))
    curve: list[dict] = []
    window: list[float] = []
    step = start_step
    for step in range(start_step, plan.steps):
        rng = np.random.default_rng([plan.seed, step])
        idx = np.sort(rng.choice(len(train), size=min(plan.batch_size, len(train)), replace=False))
        batch = [train[i] for i in idx]
        clamp = np.zeros(len(batch), dtype=bool)
        clamp[rng.permutation(len(batch))[:n_zero]] = True
        if step < warmup_steps:
            clamp[:] = True
        codes = [zero if c else params[code_name(u.speaker_id)] for u, c in zip(batch, clamp)]
        feats, mask = pad_features([u.features for u in batch])
        enc = rec.encode(feats, mask, tc.stack(codes))
        prev, target, weight = rec.batch_targets([u.reference for u in batch])
        lp = tc.pick(rec.decode(enc, prev), target)
        loss = tc.scale(tc.sum(tc.mul_const(lp, weight)), -1.0 / weight.sum())
        params.zero_grad()
        loss.backward()
        active = sorted({code_name(u.speaker_id) for u, c in zip(batch, clamp) if not c})
        lr = {"base": plan.learning_rate, "code_projections": plan.learning_rate,
              "speaker_codes": plan.code_learning_rate}
        adam_step(params, adam, lr, names=base_names + active)
        window.append(float(loss.data))
        if (step + 1) % plan.eval_every == 0 or step + 1 == plan.steps:
            row = {"step": step + 1, "train_loss": float(np.mean(window))}
            if dev:
                codes_by_spk = {s: params[code_name(s)].data for s in speakers}
                row["train_dev_acc_code"] = token_accuracy(rec, dev, codes_by_spk)
                row["train_dev_acc_zero"] = token_accuracy(rec, dev, None)
            window = []
            curve.append(row)
            log.info("step %d %s", step + 1, row)
            if on_eval:
                on_eval(row)
    return TrainResult(params, adam, max(plan.steps, start_step), curve)


# --------------------------------------------------------------- adaptation


@dataclass
class EpochRecord:
    epoch: int
    adapt_loss: float
    selection_score: float
    agreement: float


@dataclass
class AdaptationTrace:
    speaker_id: str
    plan: AdaptPlan
    epochs: list[EpochRecord]
    snapshots: list[dict[str, np.ndarray]]
    chosen_epoch: int | None = None

    @property
    def scores(self) -> np.ndarray:
        return np.array([r.selection_score for r in self.epochs])

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.adapt_loss for r in self.epochs])


class AdaptationAborted(RuntimeError):
    pass


def _lora_seed(speaker_id: str, plan: AdaptPlan) -> int:
    return zlib.crc32(speaker_id.encode("utf-8")) ^ plan.lora_seed


def adaptation_store(base: ParameterStore, config: ModelConfig, speaker_id: str, plan: AdaptPlan) -> tuple[ParameterStore, Tensor | None]:
    """Private copy of ``base`` with a zero code and/or zero-delta LoRA, all else frozen."""
    store = base.copy(private_groups=("lora", "speaker_codes"))
    store.freeze_all()
    code = None
    if "speaker_codes" in plan.groups:
        name = code_name(speaker_id)
        if name in store:
            raise ContractError(f"speaker {speaker_id} was seen in training")
        code = store.add(name, np.zeros(config.d_code), "speaker_codes", trainable=True)
    if "lora" in plan.groups:
        apply_lora(store, config, seed=_lora_seed(speaker_id, plan))
        store.set_trainable(["lora"], True)
    return store, code


def decode_set(rec: Recognizer, utts: Sequence[Utterance], code, beam_width: int, n_best: int) -> list[NBestList]:
    out = []
    with tc.no_grad():
        for u in utts:
            enc = rec.encode_utterances([u], code)
            out.append(beam_search_encoded(rec, enc, 0, u.utt_id, beam_width, n_best))
    return out


def _targets(kind: str, utts: Sequence[Utterance], nbests: Sequence[NBestList]) -> AdaptationBatch:
    if kind == "min_entropy":
        return AdaptationBatch.from_nbest(utts, nbests)
    if kind == "pseudolabel":
        return AdaptationBatch.from_pseudolabels(utts, nbests)
    return AdaptationBatch.from_references(utts)


def _agreement(rec: Recognizer, utts: Sequence[Utterance], labels: Sequence[tuple[int, ...]], code) -> float:
    """Share of pseudolabel tokens that are the current argmax under teacher forcing."""
    with tc.no_grad():
        enc = rec.encode_utterances(utts, code)
        prev, target, weight = rec.batch_targets(labels)
        lp = rec.decode(enc, prev).data
    ok = (lp.argmax(axis=-1) == target) & (weight > 0)
    return float(ok.sum() / max((weight > 0).sum(), 1))


def adapt_speaker(speaker_id: str, plan: AdaptPlan, config: ModelConfig, base: ParameterStore,
                  adapt_utts: Sequence[Utterance], dev_utts: Sequence[Utterance]) -> AdaptationTrace:
    """Fine-tune one speaker's adaptation parameters for ``plan.max_epochs`` epochs."""
    if not adapt_utts:
        raise ContractError("adaptation data is empty")
    store, code = adaptation_store(base, config, speaker_id, plan)
    rec = Recognizer(config, store)
    n_best = plan.n_best if plan.loss_kind == "min_entropy" else 1
    # decoded once with the unadapted system: zero code, zero LoRA delta
    unadapted = Recognizer(config, base)
    adapt_nb = decode_set(unadapted, adapt_utts, None, plan.beam_width, n_best)
    dev_nb = decode_set(unadapted, dev_utts, None, plan.beam_width, n_best) if dev_utts else []
    dev_labels = [nb.best().tokens for nb in dev_nb]
    batch = _targets(plan.loss_kind, adapt_utts, adapt_nb)
    dev_batch = _targets(plan.loss_kind, dev_utts, dev_nb) if dev_utts else None
    loss_fn = LOSSES[plan.loss_kind]
    extra = {"stop_grad_z": plan.stop_grad_z} if plan.loss_kind == "min_entropy" else {}
    lr = {"speaker_codes": plan.lr_code, "lora": plan.lr_lora}
    adam = AdamState()
    epochs: list[EpochRecord] = []
    snapshots: list[dict[str, np.ndarray]] = []
    for epoch in range(plan.max_epochs + 1):
        if plan.refresh_nbest and epoch > 0 and plan.loss_kind != "oracle":
            batch = _targets(plan.loss_kind, adapt_utts, decode_set(rec, adapt_utts, code, plan.beam_width, n_best))
        try:
            loss = loss_fn(batch, code, rec, **extra)
            if dev_batch is not None:
                with tc.no_grad():
                    score = float(loss_fn(dev_batch, code, rec, **extra).data)
            else:
                score = float(loss.data)
        except DegenerateMassError as exc:
            raise AdaptationAborted(f"{speaker_id}: epoch {epoch}: {exc}") from exc
        agree = _agreement(rec, dev_utts, dev_labels, code) if dev_utts else float("nan")
        epochs.append(EpochRecord(epoch, float(loss.data), score, agree))
        snapshots.append(store.snapshot(plan.groups, trainable_only=True))
        if epoch == plan.max_epochs:
            break
        store.zero_grad()
        loss.backward()
        adam_step(store, adam, lr)
    return AdaptationTrace(speaker_id, plan, epochs, snapshots)


def _argmin_latest(scores: np.ndarray) -> int:
    # ties go to the later epoch
    best = scores.min()
    return int(np.flatnonzero(scores <= best + 1e-12 * max(1.0, abs(best))).max())


def select_epoch(traces: Sequence[AdaptationTrace] | Sequence[Sequence[float]], mode: str = "global_average"):
    """Pick the epoch with the lowest adapt-dev selection score.

    ``global_average`` returns one epoch for all speakers (lowest mean score);
    ``per_speaker`` returns ``{speaker_id: epoch}`` (or a list when given raw
    score sequences).
    """
    if not traces:
        raise ContractError("no traces to select from")
    raw = not isinstance(traces[0], AdaptationTrace)
    grids = [np.asarray(t, dtype=np.float64) if raw else t.scores for t in traces]
    if len({g.shape for g in grids}) != 1:
        raise ContractError("traces have different epoch grids")
    if mode == "global_average":
        return _argmin_latest(np.mean(np.stack(grids), axis=0))
    if mode == "per_speaker":
        picks = [_argmin_latest(g) for g in grids]
        return picks if raw else {t.speaker_id: p for t, p in zip(traces, picks)}
    raise ContractError(f"unknown epoch selection mode {mode!r}")


@dataclass
class SpeakerResult:
    speaker_id: str
    breakdown: WerBreakdown
    utterances: list[WerBreakdown]

    @property
    def wer(self) -> float:
        return self.breakdown.wer


def evaluate_speaker(speaker_id: str, config: ModelConfig, base: ParameterStore, snapshot: Mapping[str, np.ndarray] | None,
                     test_utts: Sequence[Utterance], beam_width: int = 8) -> SpeakerResult:
    """1-best decode a speaker's test utterances with adapted tensors loaded.

    ``snapshot=None`` (or an empty snapshot) evaluates the unadapted model.
    """
    store = base.copy(private_groups=())
    code = None
    snapshot = dict(snapshot or {})
    if any(n.startswith("lora.") for n in snapshot):
        apply_lora(store, config)
    for name, values in snapshot.items():
        if name not in store:
            store.add(name, values, "speaker_codes" if name.startswith("speaker_code/") else "lora", trainable=False)
        else:
            store.load({name: values})
    if code_name(speaker_id) in store:
        code = store[code_name(speaker_id)]
    store.freeze_all()
    rec = Recognizer(config, store)
    reports = []
    for nb, u in zip(decode_set(rec, test_utts, code, beam_width, 1), test_utts):
        reports.append(edit_distance_wer(u.reference, nb.best().tokens))
    return SpeakerResult(speaker_id, pooled(reports), reports)

"""The invariant suite behind ``entadapt selfcheck``.

Every check compares an implementation against an independent reference
(central differences, full enumeration, breadth-first edit search, or an
algebraic identity) and reports the observed and expected values.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import tensorcore as tc
from .decode import beam_search, enumerate_all
from .gradcheck import check_gradients, check_op, op_cases
from .losses import (AdaptationBatch, entropy_decomposition_check, min_entropy_loss, oracle_loss,
                     pseudolabel_loss, renormalized_entropy)
from .metrics import edit_distance_wer
from .model import EOS, ModelConfig, Recognizer, Utterance, apply_lora, init_params
from .oracles import edit_distances_bfs
from .tensorcore import Tensor


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    observed: str
    expected: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: observed {self.observed}, expected {self.expected}"


def random_recognizer(seed: int, n_words: int = 3, max_len: int = 3, d_code: int = 4, sharpness: float = 2.0,
                      lora: bool = False) -> Recognizer:
    """A small random recognizer; ``sharpness`` scales the output layer."""
    cfg = ModelConfig(d_feat=3, d_model=8, n_encoder_layers=2, n_decoder_layers=1, n_heads=2, d_ff=16,
                      vocab_size=n_words + 3, d_code=d_code, injection_layers=(0, 1), lora_rank=2,
                      lora_layers=(0, 1), max_len=max_len, init_seed=seed)
    params = init_params(cfg)
    params["out.W"].data = params["out.W"].data * sharpness
    if lora:
        apply_lora(params, cfg, seed=seed)
        rng = np.random.default_rng(seed + 1000)
        for name in params.names("lora"):
            if name.endswith(".B"):
                params[name].data = rng.normal(0.0, 0.3, params[name].shape)
        params.set_trainable(["lora"], True)
    return Recognizer(cfg, params)


def random_utterance(seed: int, T: int = 5, d_feat: int = 3, reference=(3, 4, EOS), utt_id: str | None = None) -> Utterance:
    rng = np.random.default_rng([seed, 77])
    return Utterance(utt_id or f"u{seed}", "spk", "adapt", rng.normal(size=(T, d_feat)), reference)


def _le(name: str, observed: float, bound: float) -> Check:
    return Check(name, bool(observed < bound), f"{observed:.3g}", f"< {bound:g}")


# ------------------------------------------------------------------ checks


def op_gradients() -> Iterator[Check]:
    for name in op_cases(np.random.default_rng(0)):
        yield _le(f"gradient:{name}", check_op(name, zlib.crc32(name.encode())), 1e-5)


def loss_gradients(seed: int = 1, n_samples: int = 60) -> Iterator[Check]:
    """Loss gradients wrt a speaker code and LoRA factors, including the path through Z."""
    rec = random_recognizer(seed, lora=True)
    code = Tensor(np.random.default_rng(seed).normal(size=4) * 0.5, requires_grad=True)
    utts = [random_utterance(seed, reference=(3, 4, EOS)), random_utterance(seed + 1, T=6, reference=(5, EOS))]
    nbs = [enumerate_all(u, None, rec, max_len=2) for u in utts]
    tensors = [code] + [rec.params[n] for n in rec.params.names("lora")]
    batches = {
        "pseudolabel": (AdaptationBatch.from_pseudolabels(utts, nbs), pseudolabel_loss),
        "min_entropy": (AdaptationBatch(utts, [nb.sequences[:5] for nb in nbs]), min_entropy_loss),
        "oracle": (AdaptationBatch.from_references(utts), oracle_loss),
    }
    for kind, (batch, fn) in batches.items():
        err = check_gradients(lambda: fn(batch, code, rec), tensors, n_samples=n_samples,
                              rng=np.random.default_rng(seed))
        yield _le(f"loss_gradient:{kind}", err, 1e-4)


def decomposition(n_models: int = 3) -> Iterator[Check]:
    worst = 0.0
    for seed in range(n_models):
        rec = random_recognizer(seed, n_words=3, max_len=3)
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(3))
        audio = [(random_utterance(100 * seed + i, T=3 + i, utt_id=f"a{i}"), float(p[i])) for i in range(3)]
        audio[-1] = (audio[-1][0], 1.0 - sum(x for _, x in audio[:-1]))
        h_joint, h_cond, h_audio = entropy_decomposition_check(audio, rng.normal(size=4), rec, max_len=3)
        worst = max(worst, abs(h_joint - (h_cond + h_audio)))
    yield _le("entropy_decomposition", worst, 1e-10)


def singleton_reduction(n_models: int = 100) -> Iterator[Check]:
    worst = 0.0
    for seed in range(n_models):
        rec = random_recognizer(seed)
        rng = np.random.default_rng(seed)
        utt = random_utterance(seed)
        w = tuple(int(t) for t in rng.integers(3, 6, size=rng.integers(0, 4))) + (EOS,)
        batch = AdaptationBatch([utt], [[w]])
        code = rng.normal(size=4)
        me = float(min_entropy_loss(batch, code, rec).data)
        pl = float(pseudolabel_loss(batch, code, rec).data)
        worst = max(worst, abs(me - pl))
    yield _le("singleton_reduction", worst, 1e-12)


def scaling_law(alphas=(0.9, 0.5, 0.1), n_models: int = 5) -> Iterator[Check]:
    for alpha in alphas:
        worst = 0.0
        for seed in range(n_models):
            rec = random_recognizer(seed)
            utt = random_utterance(seed)
            logq = beam_search(utt, None, rec, beam_width=8, n_best=5).logprobs
            shift = renormalized_entropy(logq + np.log(alpha)) - renormalized_entropy(logq)
            worst = max(worst, abs(shift + np.log(alpha)))
        yield _le(f"scaling_law:alpha={alpha}", worst, 1e-10)


def beam_oracle(n_models: int = 20, n_words: int = 4, max_words: int = 3, beam: int = 32) -> Iterator[Check]:
    """Beam search against exhaustive enumeration (top-5, same order)."""
    mismatches = []
    for seed in range(n_models):
        rec = random_recognizer(seed, n_words=n_words, max_len=max_words)
        utt = random_utterance(seed)
        got = beam_search(utt, None, rec, beam_width=beam, n_best=5)
        want = enumerate_all(utt, None, rec, max_len=max_words).hypotheses[:5]
        same = got.sequences == [h.tokens for h in want] and np.allclose(got.logprobs, [h.logprob for h in want],
                                                                         rtol=0, atol=1e-12)
        if not same:
            mismatches.append(seed)
    yield Check("beam_vs_enumeration", not mismatches, f"{n_models - len(mismatches)}/{n_models} models agree",
                f"{n_models}/{n_models}")


def zero_code_equivalence(n_models: int = 5) -> Iterator[Check]:
    code_diff = lora_diff = 0.0
    for seed in range(n_models):
        rec = random_recognizer(seed)
        utt = random_utterance(seed)
        zero = rec.encode_utterances([utt], Tensor(np.zeros(4))).states.data
        off = rec.encode_utterances([utt], Tensor(np.zeros(4)), inject=False).states.data
        code_diff = max(code_diff, float(np.max(np.abs(zero - off))))
        code = Tensor(np.random.default_rng(seed).normal(size=4))
        enc_before = rec.encode_utterances([utt], code)
        before = rec.sequence_logprobs(enc_before, [0], [(3, 4, EOS)]).data
        apply_lora(rec.params, rec.config, seed=seed)
        enc_after = rec.encode_utterances([utt], code)
        after = rec.sequence_logprobs(enc_after, [0], [(3, 4, EOS)]).data
        lora_diff = max(lora_diff, float(np.max(np.abs(enc_after.states.data - enc_before.states.data))),
                        float(np.max(np.abs(after - before))))
    yield Check("zero_code_equivalence", code_diff < 1e-12, f"{code_diff:.3g}", "< 1e-12")
    yield Check("fresh_lora_zero_delta", lora_diff < 1e-12, f"{lora_diff:.3g}", "< 1e-12")


def wer_oracle(alphabet=(3, 4, 5), max_len: int = 5) -> Iterator[Check]:
    dist = edit_distances_bfs(alphabet, max_len)
    bad = total = 0
    for ref, row in dist.items():
        if not ref:
            continue
        for hyp, d in row.items():
            total += 1
            bad += edit_distance_wer(ref, hyp).errors != d
    yield Check("wer_vs_bfs", bad == 0, f"{total - bad}/{total} pairs agree", f"{total}/{total}")


CHECKS: dict[str, Callable[[], Iterator[Check]]] = {
    "op_gradients": op_gradients,
    "loss_gradients": loss_gradients,
    "decomposition": decomposition,
    "singleton_reduction": singleton_reduction,
    "scaling_law": scaling_law,
    "beam_oracle": beam_oracle,
    "zero_code": zero_code_equivalence,
    "wer_oracle": wer_oracle,
}


def run_selfcheck(corrupt_op: str | None = None, only: tuple[str, ...] | None = None) -> list[Check]:
    """Run the suite; ``corrupt_op`` scales that op's backward pass (negative control)."""
    results: list[Check] = []
    names = only or tuple(CHECKS)
    if corrupt_op is not None:
        with tc.corrupt_gradient(corrupt_op):
            for name in names:
                results.extend(CHECKS[name]())
    else:
        for name in names:
            results.extend(CHECKS[name]())
    return results

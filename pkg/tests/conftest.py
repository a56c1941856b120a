import numpy as np
import pytest
from hypothesis import settings

from entadapt.model import EOS, ModelConfig, Recognizer, Utterance, apply_lora, init_params

settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


def toy_config(seed=0, n_words=3, max_len=3, **kw):
    base = dict(d_feat=3, d_model=8, n_encoder_layers=2, n_decoder_layers=1, n_heads=2, d_ff=16,
                vocab_size=n_words + 3, d_code=4, injection_layers=(0, 1), lora_rank=2,
                lora_layers=(0, 1), max_len=max_len, init_seed=seed)
    base.update(kw)
    return ModelConfig(**base)


def toy_model(seed=0, n_words=3, max_len=3, sharpness=2.0, lora=False, **kw):
    """Random recognizer whose output layer is scaled to give peaked distributions."""
    cfg = toy_config(seed, n_words, max_len, **kw)
    params = init_params(cfg)
    params["out.W"].data = params["out.W"].data * sharpness
    if lora:
        apply_lora(params, cfg, seed=seed)
        rng = np.random.default_rng(seed + 1000)
        for name in params.names("lora"):
            if name.endswith(".B"):
                params[name].data = rng.normal(0.0, 0.3, params[name].shape)
    return Recognizer(cfg, params)


def toy_utterance(seed=0, T=5, d_feat=3, reference=(3, 4, EOS), utt_id=None):
    rng = np.random.default_rng(seed + 77)
    return Utterance(utt_id or f"u{seed}", "spk", "adapt", rng.normal(size=(T, d_feat)), reference)


@pytest.fixture
def toy():
    return toy_model(0)


_ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_acceptance(criterion, passed: bool, detail: str) -> None:
    _ACCEPTANCE[str(criterion)] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: (int(k.rstrip("abcde")), k)):
        passed, detail = _ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'} {detail}")

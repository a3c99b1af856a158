import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from acmix.corpus import SynthSpec, Utterance, synth_corpus

settings.register_profile("default", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_spec():
    return SynthSpec(vocab_size=6, words_per_utt=(2, 4), speaker_count=3, seed=3)


@pytest.fixture(scope="session")
def tiny_pools(small_spec):
    return synth_corpus(small_spec, "source", 12), synth_corpus(small_spec, "target", 12)


def make_utt(uid, n, domain="source", value=None, transcript=("a",), seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.5, 0.5, n).astype(np.float32) if value is None else np.full(n, value, np.float32)
    return Utterance(uid, x, tuple(transcript), domain)


@pytest.fixture(autouse=True)
def _run_root(tmp_path, monkeypatch):
    monkeypatch.setenv("ACMIX_RUN_ROOT", str(tmp_path / "runs"))
    yield


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end check")


def desk_enabled() -> bool:
    return os.environ.get("ACMIX_SKIP_DESK", "") not in ("1", "true", "yes")


TINY_OVERRIDES = [
    "corpus.source_count=40", "corpus.target_train=30", "corpus.target_valid=10", "corpus.target_test=10",
    "adapt.steps=20", "adapt.warmup_steps=5", "adapt.batch_size=4",
    "finetune.steps=30", "finetune.warmup_steps=5", "finetune.batch_size=4", "finetune.head_hidden=16",
    "encoder.d_model=32", "spin.K=16", "spin.proj_dim=16", "decode.lm_sentences=200", "decode.beam=4",
]


def tiny_config(*extra):
    """A pipeline config small enough to run end to end in a few seconds."""
    from acmix.config import ExperimentConfig, override

    return override(ExperimentConfig(), TINY_OVERRIDES + list(extra))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)

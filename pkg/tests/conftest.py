import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cmlformer import load_jsonl, sample_corpus_path, train_vocab  # noqa: E402
from cmlformer.model import CMLFormer, ModelConfig  # noqa: E402


@pytest.fixture(scope="session")
def records():
    return load_jsonl(sample_corpus_path())


@pytest.fixture(scope="session")
def vocab(records):
    return train_vocab([t for r in records for t in (r.cm_text, r.base_text, r.mix_text)], 4000, 1)


def tiny_config(vocab_size=40, mode="synchronous", **kw):
    base = dict(num_layers=2, hidden_dim=16, num_heads=2, ffn_dim=32, max_seq_len=32, coupling_mode=mode)
    base.update(kw)
    return ModelConfig(**base).with_vocab(vocab_size)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return CMLFormer(tiny_config(), seed=7)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])

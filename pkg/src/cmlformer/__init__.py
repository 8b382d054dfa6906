"""Dual-decoder Transformer pre-training for code-mixed (Hinglish) text."""

__version__ = "0.1.0"

from ._kernels import BACKEND
from .corpus import CmiConfig, CorpusRecord, compute_cmi, derive_switching_points, load_jsonl
from .model import CMLFormer, ModelConfig, parameter_count
from .objectives import LossWeights, compute_losses
from .tokenizer import Vocabulary, train_vocab

__all__ = [
    "BACKEND", "CMLFormer", "CmiConfig", "CorpusRecord", "LossWeights", "ModelConfig", "Vocabulary",
    "compute_cmi", "compute_losses", "derive_switching_points", "load_jsonl", "parameter_count",
    "sample_corpus_path", "sample_labeled_path", "train_vocab",
]


def sample_corpus_path():
    """Path of the bundled 8-record sample corpus."""
    from importlib.resources import files
    return files(__name__) / "data" / "sample_corpus.jsonl"


def sample_labeled_path():
    """Path of the bundled classification sample."""
    from importlib.resources import files
    return files(__name__) / "data" / "sample_labeled.jsonl"

"""Per-token attention profiles from the encoder's self-attention."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import derive_switching_points
from .model import ModelConfig, encode as encoder_forward
from .tokenizer import Vocabulary, encode

DEGENERATE_SCORE = 0.5


@dataclass
class AttentionProfile:
    tokens: list[str]
    scores: list[float]
    switch_flags: list[int]
    layer: int = 0
    head: int = 0

    def __post_init__(self):
        if not (len(self.tokens) == len(self.scores) == len(self.switch_flags)):
            raise ValueError("profile fields differ in length")


def column_means(attn: np.ndarray, query_mask: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Mean attention each kept key receives over the unmasked queries."""
    return attn[np.asarray(query_mask, bool)][:, np.asarray(keep, bool)].mean(axis=0)


def min_max_scale(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        return raw
    lo, hi = raw.min(), raw.max()
    span = hi - lo
    if span <= 1e-12 * max(abs(hi), 1.0):
        return np.full_like(raw, DEGENERATE_SCORE)
    return (raw - lo) / span


def attention_profile(params: dict, config: ModelConfig, vocab: Vocabulary, text: str,
                      labels: Sequence[int] | None = None, layer: int = 0, head: int = 0) -> AttentionProfile:
    """Scaled column-mean attention for one sentence, specials excluded.

    With word-level ``labels`` the first subword of each word that starts a
    language switch is flagged.
    """
    enc = encode(text, vocab)
    if len(enc) > config.max_seq_len:
        raise ValueError(f"text needs {len(enc)} tokens; max_seq_len is {config.max_seq_len}")
    if not 0 <= layer < config.num_layers or not 0 <= head < config.num_heads:
        raise ValueError("layer/head out of range")
    out = encoder_forward(params, config, np.array([enc.ids]), np.array([enc.attention_mask], bool))
    attn = out.attentions[layer][0, head]
    keep = np.array([w is not None for w in enc.word_ids])
    raw = column_means(attn, np.array(enc.attention_mask, bool), keep)

    flags = [0] * int(keep.sum())
    if labels is not None:
        if len(labels) != enc.num_words:
            raise ValueError(f"{len(labels)} labels for {enc.num_words} words")
        sp = derive_switching_points(labels)
        kept_words = [w for w in enc.word_ids if w is not None]
        prev = None
        for i, w in enumerate(kept_words):
            flags[i] = int(sp[w]) if w != prev else 0
            prev = w
    tokens = vocab.convert_ids_to_tokens([t for t, k in zip(enc.ids, keep) if k])
    return AttentionProfile(tokens, min_max_scale(raw).tolist(), flags, layer, head)


def export_profile(profile: AttentionProfile, path) -> None:
    obj = {
        "tokens": profile.tokens,
        "scores": [float(s) for s in profile.scores],
        "switch_flags": [int(f) for f in profile.switch_flags],
        "layer": profile.layer,
        "head": profile.head,
    }
    Path(path).write_text(json.dumps(obj, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")


def load_profile(path) -> AttentionProfile:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return AttentionProfile(obj["tokens"], obj["scores"], obj["switch_flags"], obj["layer"], obj["head"])

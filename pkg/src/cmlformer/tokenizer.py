"""Shared-vocabulary WordPiece-style tokenizer.

Training merges adjacent symbol pairs greedily by corpus frequency, with
ties broken by the lexicographically smallest pair.  Encoding is greedy
longest-match over the learned pieces; continuation pieces carry ``##``.
"""
from __future__ import annotations

import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
CONTINUATION = "##"
DEFAULT_VOCAB_SIZE = 4000


def normalize(text: str) -> str:
    return unicodedata.normalize("NFC", text)


def pre_tokenize(text: str) -> list[str]:
    return normalize(text).split()


class Vocabulary:
    def __init__(self, tokens: Iterable[str]):
        self.tokens = list(tokens)
        if tuple(self.tokens[:5]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the five special tokens")
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.max_piece_len = max(len(t) for t in self.tokens)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.token_to_id

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def convert_ids_to_tokens(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


@dataclass
class Encoding:
    ids: list[int]
    word_ids: list[int | None]
    attention_mask: list[int] = field(default=None)

    def __post_init__(self):
        if self.attention_mask is None:
            self.attention_mask = [1] * len(self.ids)
        if not (len(self.ids) == len(self.word_ids) == len(self.attention_mask)):
            raise ValueError("encoding fields differ in length")

    def __len__(self):
        return len(self.ids)

    @property
    def num_words(self) -> int:
        present = [w for w in self.word_ids if w is not None]
        return max(present) + 1 if present else 0


def _initial_symbols(word: str) -> list[str]:
    return [word[0]] + [CONTINUATION + c for c in word[1:]]


def _merge_symbols(symbols: list[str], a: str, b: str) -> list[str]:
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b[len(CONTINUATION):])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def train_vocab(texts: Iterable[str], vocab_size: int = DEFAULT_VOCAB_SIZE, min_freq: int = 2) -> Vocabulary:
    """Learn a subword vocabulary of at most ``vocab_size`` entries."""
    word_freq = Counter()
    for text in texts:
        word_freq.update(pre_tokenize(text))
    if not word_freq:
        raise ValueError("cannot train a vocabulary on an empty corpus")

    words = sorted(word_freq)
    freqs = [word_freq[w] for w in words]
    splits = [_initial_symbols(w) for w in words]
    alphabet = sorted({s for sym in splits for s in sym})
    if vocab_size < len(alphabet) + len(SPECIAL_TOKENS):
        raise ValueError(
            f"vocab_size {vocab_size} below alphabet size {len(alphabet)} + {len(SPECIAL_TOKENS)} specials")

    tokens = list(SPECIAL_TOKENS) + alphabet
    known = set(tokens)

    pair_counts: Counter = Counter()
    pair_words: dict[tuple[str, str], set[int]] = defaultdict(set)

    def account(idx: int, sign: int) -> None:
        sym = splits[idx]
        for pair in zip(sym, sym[1:]):
            pair_counts[pair] += sign * freqs[idx]
            if sign > 0:
                pair_words[pair].add(idx)
            elif pair_counts[pair] <= 0:
                del pair_counts[pair]

    for i in range(len(words)):
        account(i, +1)

    while len(tokens) < vocab_size:
        candidates = [(c, p) for p, c in pair_counts.items() if c >= min_freq]
        if not candidates:
            break
        best_count = max(c for c, _ in candidates)
        a, b = min(p for c, p in candidates if c == best_count)
        merged = a + b[len(CONTINUATION):]
        for idx in sorted(pair_words.pop((a, b), ())):
            sym = splits[idx]
            if not any(x == a and y == b for x, y in zip(sym, sym[1:])):
                continue
            account(idx, -1)
            splits[idx] = _merge_symbols(sym, a, b)
            account(idx, +1)
        pair_counts.pop((a, b), None)
        if merged not in known:
            known.add(merged)
            tokens.append(merged)
    return Vocabulary(tokens)


def split_word(word: str, vocab: Vocabulary) -> list[int]:
    """Greedy longest-match segmentation; ``[UNK_ID]`` if any piece is missing."""
    ids = []
    start = 0
    while start < len(word):
        end = min(len(word), start + vocab.max_piece_len)
        found = None
        while end > start:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION + piece
            tid = vocab.token_to_id.get(piece)
            if tid is not None and tid >= len(SPECIAL_TOKENS):
                found = tid
                break
            end -= 1
        if found is None:
            return [UNK_ID]
        ids.append(found)
        start = end
    return ids


def encode_segments(segments: list[str], vocab: Vocabulary, max_len: int | None = None) -> Encoding:
    """Encode ``[CLS] s1 [SEP] s2 [SEP] ...`` with word ids numbered globally."""
    ids, word_ids = [CLS_ID], [None]
    w = 0
    for seg in segments:
        for word in pre_tokenize(seg):
            pieces = split_word(word, vocab)
            ids.extend(pieces)
            word_ids.extend([w] * len(pieces))
            w += 1
        ids.append(SEP_ID)
        word_ids.append(None)
    if max_len is not None and len(ids) > max_len:
        if max_len < 2:
            raise ValueError("max_len must be at least 2 when special tokens are added")
        ids = ids[:max_len - 1] + [SEP_ID]
        word_ids = word_ids[:max_len - 1] + [None]
    return Encoding(ids, word_ids)


def encode(text: str, vocab: Vocabulary, add_specials: bool = True, max_len: int | None = None) -> Encoding:
    if add_specials:
        return encode_segments([text], vocab, max_len)
    ids, word_ids = [], []
    for w, word in enumerate(pre_tokenize(text)):
        pieces = split_word(word, vocab)
        ids.extend(pieces)
        word_ids.extend([w] * len(pieces))
    if max_len is not None:
        ids, word_ids = ids[:max_len], word_ids[:max_len]
    return Encoding(ids, word_ids)


def decode(ids, vocab: Vocabulary) -> str:
    words: list[str] = []
    for tid in ids:
        tid = int(tid)
        if tid in (PAD_ID, CLS_ID, SEP_ID, MASK_ID):
            continue
        tok = vocab.tokens[tid]
        if tok.startswith(CONTINUATION) and words:
            words[-1] += tok[len(CONTINUATION):]
        else:
            words.append(tok)
    return " ".join(words)

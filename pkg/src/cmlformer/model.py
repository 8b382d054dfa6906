"""Shared encoder, coupled dual decoders and auxiliary heads.

All layers use post-LN residual blocks (``LN(x + sublayer(x))``) and learned
absolute positional embeddings.  Parameters live in a flat ``dict`` keyed
by dotted names; the forward functions are pure in ``params``.
"""
from __future__ import annotations

import json
import math
import zipfile
import zlib
from collections import Counter
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

COUPLING_MODES = ("none", "synchronous", "asynchronous")
_MODE_ALIASES = {"sync": "synchronous", "async": "asynchronous", "off": "none"}
HEAD_NAMES = ("mlm", "spp", "tlc", "btsp", "cmi")
CHECKPOINT_FORMAT = "cmlformer-checkpoint"
CHECKPOINT_VERSION = 1
INIT_STD = 0.02


def normalize_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in COUPLING_MODES:
        raise ValueError(f"unknown coupling mode {mode!r}; expected one of {COUPLING_MODES}")
    return mode


@dataclass
class ModelConfig:
    num_layers: int = 2
    hidden_dim: int = 32
    num_heads: int = 2
    ffn_dim: int = 64
    dropout_rate: float = 0.0
    max_seq_len: int = 64
    coupling_mode: str = "synchronous"
    src_vocab: int = 4000
    base_vocab: int = 4000
    mix_vocab: int = 4000

    def __post_init__(self):
        self.coupling_mode = normalize_mode(self.coupling_mode)
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if min(self.num_layers, self.hidden_dim, self.ffn_dim, self.max_seq_len,
               self.src_vocab, self.base_vocab, self.mix_vocab) < 1:
            raise ValueError("sizes must be positive")

    @classmethod
    def base(cls) -> "ModelConfig":
        """The BERT-base sized configuration."""
        return cls(num_layers=12, hidden_dim=768, num_heads=12, ffn_dim=3072, dropout_rate=0.1,
                   max_seq_len=512, coupling_mode="synchronous",
                   src_vocab=32000, base_vocab=32000, mix_vocab=32000)

    @property
    def coupled(self) -> bool:
        return self.coupling_mode != "none"

    def with_vocab(self, size: int) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), "src_vocab": size, "base_vocab": size, "mix_vocab": size})

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# --------------------------------------------------------------------------
# parameter construction
# --------------------------------------------------------------------------

def _attn_shapes(prefix, d):
    out = {}
    for p in "qkvo":
        out[f"{prefix}.{p}.w"] = (d, d)
        out[f"{prefix}.{p}.b"] = (d,)
    return out


def _ln_shapes(prefix, d):
    return {f"{prefix}.g": (d,), f"{prefix}.b": (d,)}


def _ffn_shapes(prefix, d, f):
    return {f"{prefix}.w1": (d, f), f"{prefix}.b1": (f,), f"{prefix}.w2": (f, d), f"{prefix}.b2": (d,)}


def encoder_shapes(cfg: ModelConfig) -> dict:
    d = cfg.hidden_dim
    shapes = {"enc.tok_emb": (cfg.src_vocab, d), "enc.pos_emb": (cfg.max_seq_len, d)}
    for l in range(cfg.num_layers):
        shapes.update(_attn_shapes(f"enc.{l}.attn", d))
        shapes.update(_ln_shapes(f"enc.{l}.ln1", d))
        shapes.update(_ffn_shapes(f"enc.{l}.ffn", d, cfg.ffn_dim))
        shapes.update(_ln_shapes(f"enc.{l}.ln2", d))
    return shapes


def decoder_shapes(cfg: ModelConfig, stream: str) -> dict:
    d = cfg.hidden_dim
    vocab = cfg.base_vocab if stream == "base" else cfg.mix_vocab
    pre = f"dec_{stream}"
    shapes = {f"{pre}.tok_emb": (vocab, d), f"{pre}.pos_emb": (cfg.max_seq_len, d)}
    for l in range(cfg.num_layers):
        shapes.update(_attn_shapes(f"{pre}.{l}.self", d))
        shapes.update(_ln_shapes(f"{pre}.{l}.ln1", d))
        shapes.update(_attn_shapes(f"{pre}.{l}.enc", d))
        shapes.update(_ln_shapes(f"{pre}.{l}.ln2", d))
        if cfg.coupled:
            shapes[f"{pre}.{l}.xproj.w"] = (d, d)
            shapes[f"{pre}.{l}.xproj.b"] = (d,)
            shapes.update(_attn_shapes(f"{pre}.{l}.xattn", d))
            shapes.update(_ln_shapes(f"{pre}.{l}.ln3", d))
        shapes.update(_ffn_shapes(f"{pre}.{l}.ffn", d, cfg.ffn_dim))
        shapes.update(_ln_shapes(f"{pre}.{l}.ln4", d))
    shapes[f"{pre}.out.w"] = (d, vocab)
    shapes[f"{pre}.out.b"] = (vocab,)
    return shapes


def head_shapes(cfg: ModelConfig) -> dict:
    d = cfg.hidden_dim
    shapes = {"head.mlm.w": (d, cfg.src_vocab), "head.mlm.b": (cfg.src_vocab,)}
    for name in ("spp", "tlc", "btsp", "cmi"):
        shapes[f"head.{name}.w"] = (d, 1)
        shapes[f"head.{name}.b"] = (1,)
    return shapes


def model_shapes(cfg: ModelConfig) -> dict:
    return {**encoder_shapes(cfg), **decoder_shapes(cfg, "base"), **decoder_shapes(cfg, "mix"), **head_shapes(cfg)}


def init_param(name: str, shape: tuple, seed: int) -> np.ndarray:
    """Deterministic per-name init: N(0, 0.02) weights, zero biases, unit LN gains."""
    leaf = name.rsplit(".", 1)[-1]
    dtype = T.get_default_dtype()
    if leaf == "g":
        return np.ones(shape, dtype=dtype)
    if leaf.startswith("b"):
        return np.zeros(shape, dtype=dtype)
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    return (rng.standard_normal(shape) * INIT_STD).astype(dtype)


def init_params(shapes: dict, seed: int) -> dict[str, Tensor]:
    return {name: Tensor(init_param(name, shp, seed), requires_grad=True, name=name)
            for name, shp in shapes.items()}


def parameter_count(cfg: ModelConfig, part: str = "encoder") -> int:
    """Closed-form parameter count of ``part`` (encoder, decoders, heads, model)."""
    d, f, L, P = cfg.hidden_dim, cfg.ffn_dim, cfg.num_layers, cfg.max_seq_len
    attn = 4 * (d * d + d)
    ln = 2 * d
    ffn = d * f + f + f * d + d
    encoder = cfg.src_vocab * d + P * d + L * (attn + ffn + 2 * ln)
    if part == "encoder":
        return encoder
    dec_layer = 2 * attn + ffn + 3 * ln
    if cfg.coupled:
        dec_layer += (d * d + d) + attn + ln
    decoders = sum(v * d + P * d + L * dec_layer + d * v + v for v in (cfg.base_vocab, cfg.mix_vocab))
    heads = d * cfg.src_vocab + cfg.src_vocab + 4 * (d + 1)
    counts = {"decoders": decoders, "heads": heads, "model": encoder + decoders + heads}
    if part not in counts:
        raise ValueError(f"unknown part {part!r}")
    return counts[part]


# --------------------------------------------------------------------------
# forward pieces
# --------------------------------------------------------------------------

@dataclass
class EncoderOutput:
    hidden: Tensor                   # [B, T, d]
    attentions: list[np.ndarray]     # per layer [B, heads, T, T]
    mask: np.ndarray                 # [B, T] bool


@dataclass
class DualDecoderOutput:
    base_logits: Tensor
    mix_logits: Tensor


@dataclass
class HeadOutputs:
    mlm_logits: Tensor | None = None
    spp_logits: Tensor | None = None
    tlc_logits: Tensor | None = None
    btsp_logit: Tensor | None = None
    cmi_pred: Tensor | None = None


def linear(params, prefix, x, w="w", b="b"):
    return x @ params[f"{prefix}.{w}"] + params[f"{prefix}.{b}"]


def _layer_norm(params, prefix, x):
    return T.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def attention(params, prefix, xq, xkv, mask, num_heads, dropout_rate=0.0, rng=None):
    """Multi-head scaled dot-product attention.

    ``mask`` is a boolean ``[B, Tq, Tk]`` array of allowed key positions.
    Returns the projected output and the ``[B, h, Tq, Tk]`` probabilities.
    """
    B, Tq, d = xq.shape
    Tk = xkv.shape[1]
    dh = d // num_heads

    def split(x, n):
        return x.reshape(B, n, num_heads, dh).transpose(0, 2, 1, 3)

    q = split(linear(params, f"{prefix}.q", xq), Tq)
    k = split(linear(params, f"{prefix}.k", xkv), Tk)
    v = split(linear(params, f"{prefix}.v", xkv), Tk)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    probs = T.softmax(scores, axis=-1, mask=mask[:, None, :, :])
    ctx = T.dropout(probs, dropout_rate, rng) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(B, Tq, d)
    return linear(params, f"{prefix}.o", ctx), probs.data


def feed_forward(params, prefix, x, dropout_rate=0.0, rng=None):
    h = T.gelu(linear(params, prefix, x, "w1", "b1"))
    return linear(params, prefix, T.dropout(h, dropout_rate, rng), "w2", "b2")


def _embed(params, prefix, ids, max_len):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape[1] > max_len:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len {max_len}")
    return T.embedding(params[f"{prefix}.tok_emb"], ids) + params[f"{prefix}.pos_emb"][: ids.shape[1]]


def padding_mask(mask) -> np.ndarray:
    """``[B, T]`` key mask -> ``[B, T, T]`` allowed-position mask."""
    mask = np.asarray(mask, dtype=bool)
    return np.broadcast_to(mask[:, None, :], (mask.shape[0], mask.shape[1], mask.shape[1]))


def causal_mask(q_len: int, key_mask) -> np.ndarray:
    """Query ``i`` may see key ``j`` iff ``j <= i`` and key ``j`` is not padding."""
    key_mask = np.asarray(key_mask, dtype=bool)
    tri = np.tril(np.ones((q_len, key_mask.shape[1]), dtype=bool))
    return tri[None, :, :] & key_mask[:, None, :]


def encode(params, cfg: ModelConfig, ids, mask=None, rng=None) -> EncoderOutput:
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.ones(ids.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    x = _embed(params, "enc", ids, cfg.max_seq_len)
    allowed = padding_mask(mask)
    p = cfg.dropout_rate
    attns = []
    for l in range(cfg.num_layers):
        a, probs = attention(params, f"enc.{l}.attn", x, x, allowed, cfg.num_heads, p, rng)
        attns.append(probs)
        x = _layer_norm(params, f"enc.{l}.ln1", x + a)
        x = _layer_norm(params, f"enc.{l}.ln2", x + feed_forward(params, f"enc.{l}.ffn", x, p, rng))
    return EncoderOutput(x, attns, mask)


def decode_dual(params, cfg: ModelConfig, enc: EncoderOutput, base_ids, mix_ids,
                base_mask=None, mix_mask=None, rng=None) -> DualDecoderOutput:
    """Run both decoders layer by layer in lockstep.

    Coupling modes:
      * ``none``: two independent vanilla decoders.
      * ``synchronous``: each decoder cross-attends to the other's post
        encoder-attention state of the *same* layer.
      * ``asynchronous``: keys/values are the other decoder's final output of
        the previous layer (its embedding output for layer 0).
    Cross-decoder attention is causal so no position sees the future.
    """
    mode = cfg.coupling_mode
    if mode not in COUPLING_MODES:
        raise ValueError(f"unknown coupling mode {mode!r}")
    p, h = cfg.dropout_rate, cfg.num_heads
    ids = {"base": np.asarray(base_ids, dtype=np.int64), "mix": np.asarray(mix_ids, dtype=np.int64)}
    masks = {
        "base": np.ones(ids["base"].shape, bool) if base_mask is None else np.asarray(base_mask, bool),
        "mix": np.ones(ids["mix"].shape, bool) if mix_mask is None else np.asarray(mix_mask, bool),
    }
    other = {"base": "mix", "mix": "base"}
    enc_allowed = {s: np.broadcast_to(enc.mask[:, None, :], (enc.mask.shape[0], ids[s].shape[1], enc.mask.shape[1]))
                   for s in ids}
    self_allowed = {s: causal_mask(ids[s].shape[1], masks[s]) for s in ids}
    cross_allowed = {s: causal_mask(ids[s].shape[1], masks[other[s]]) for s in ids}

    x = {s: _embed(params, f"dec_{s}", ids[s], cfg.max_seq_len) for s in ids}
    prev = dict(x)  # H_{l-1}; embedding output before layer 0
    for l in range(cfg.num_layers):
        a = {}
        for s in ("base", "mix"):
            pre = f"dec_{s}.{l}"
            sa, _ = attention(params, f"{pre}.self", x[s], x[s], self_allowed[s], h, p, rng)
            y = _layer_norm(params, f"{pre}.ln1", x[s] + sa)
            ea, _ = attention(params, f"{pre}.enc", y, enc.hidden, enc_allowed[s], h, p, rng)
            a[s] = _layer_norm(params, f"{pre}.ln2", y + ea)
        c = {}
        for s in ("base", "mix"):
            pre = f"dec_{s}.{l}"
            if mode == "none":
                c[s] = a[s]
                continue
            source = a[other[s]] if mode == "synchronous" else prev[other[s]]
            kv = linear(params, f"{pre}.xproj", source)
            xa, _ = attention(params, f"{pre}.xattn", a[s], kv, cross_allowed[s], h, p, rng)
            c[s] = _layer_norm(params, f"{pre}.ln3", a[s] + xa)
        for s in ("base", "mix"):
            pre = f"dec_{s}.{l}"
            x[s] = _layer_norm(params, f"{pre}.ln4", c[s] + feed_forward(params, f"{pre}.ffn", c[s], p, rng))
        prev = dict(x)
    return DualDecoderOutput(linear(params, "dec_base.out", x["base"]), linear(params, "dec_mix.out", x["mix"]))


def heads_forward(params, enc: EncoderOutput, which=HEAD_NAMES) -> HeadOutputs:
    h = enc.hidden
    B, Tn, _ = h.shape
    out = HeadOutputs()
    if "mlm" in which:
        out.mlm_logits = linear(params, "head.mlm", h)
    if "spp" in which:
        out.spp_logits = linear(params, "head.spp", h).reshape(B, Tn)
    if "tlc" in which:
        out.tlc_logits = linear(params, "head.tlc", h).reshape(B, Tn)
    cls = h[:, 0, :] if ("btsp" in which or "cmi" in which) else None
    if "btsp" in which:
        out.btsp_logit = linear(params, "head.btsp", cls).reshape(B)
    if "cmi" in which:
        out.cmi_pred = linear(params, "head.cmi", cls).reshape(B)
    return out


# --------------------------------------------------------------------------
# model object and checkpoints
# --------------------------------------------------------------------------

class CMLFormer:
    """Parameters plus forward entry points; counts calls per component."""

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.config = config
        self.seed = seed
        self.params = params if params is not None else init_params(model_shapes(config), seed)
        self.calls: Counter = Counter()
        self.rng: np.random.Generator | None = None

    def train(self, rng: np.random.Generator | None) -> None:
        """Enable dropout drawn from ``rng``; ``None`` disables it."""
        self.rng = rng

    def encode(self, ids, mask=None) -> EncoderOutput:
        self.calls["encoder"] += 1
        return encode(self.params, self.config, ids, mask, self.rng)

    def decode_dual(self, enc, base_ids, mix_ids, base_mask=None, mix_mask=None) -> DualDecoderOutput:
        self.calls["decoder"] += 1
        return decode_dual(self.params, self.config, enc, base_ids, mix_ids, base_mask, mix_mask, self.rng)

    def heads_forward(self, enc, which=HEAD_NAMES) -> HeadOutputs:
        for name in which:
            self.calls[f"head.{name}"] += 1
        return heads_forward(self.params, enc, which)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self, prefix: str = "") -> int:
        return sum(p.size for n, p in self.params.items() if n.startswith(prefix))

    def save(self, path, vocab_tokens=None, extra: dict | None = None) -> None:
        save_checkpoint(path, self.config, self.params, kind="pretrain", vocab_tokens=vocab_tokens, extra=extra)

    @classmethod
    def load(cls, path) -> "CMLFormer":
        ckpt = load_checkpoint(path)
        return cls(ckpt.config, params=ckpt.params)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, Tensor]
    kind: str
    vocab_tokens: list[str] | None
    extra: dict


def save_checkpoint(path, config: ModelConfig, params: dict, kind: str, vocab_tokens=None, extra=None) -> None:
    """Write an ``.npz`` holding raw arrays plus an inline JSON manifest."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": asdict(config),
        "vocab": list(vocab_tokens) if vocab_tokens is not None else None,
        "extra": extra or {},
    }
    arrays = {"__meta__": np.array(json.dumps(meta, ensure_ascii=False))}
    arrays.update((name, p.data if isinstance(p, Tensor) else np.asarray(p)) for name, p in params.items())
    # same layout as np.savez, but with a fixed member timestamp so reruns are byte-identical
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asarray(arr), allow_pickle=False)


def load_checkpoint(path) -> Checkpoint:
    with np.load(Path(path), allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise ValueError(f"{path} is not a cmlformer checkpoint")
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a cmlformer checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        params = {k: Tensor(z[k], requires_grad=True, name=k) for k in z.files if k != "__meta__"}
    return Checkpoint(ModelConfig.from_dict(meta["config"]), params, meta["kind"], meta.get("vocab"), meta.get("extra", {}))

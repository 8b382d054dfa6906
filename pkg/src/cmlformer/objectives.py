"""Training views and the six pre-training losses.

Sampling (masking, BTSP pairing, TLC segment order) happens once in
:func:`build_batch`; the loss functions are then pure in the model
parameters and the batch, which is what makes finite-difference checks of
the full objective possible.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import BASE, MIX, CmiConfig, CorpusRecord, align_word_labels
from .tensor import IGNORE_INDEX, Tensor
from .tokenizer import (CLS_ID, MASK_ID, PAD_ID, SEP_ID, SPECIAL_TOKENS, Encoding, Vocabulary, encode,
                        encode_segments, pre_tokenize)

log = logging.getLogger(__name__)

OBJECTIVES = ("mlm", "spp", "btsp", "biltm", "tlc", "cmi")
MLM_RATE = 0.15
MLM_MASK_FRAC = 0.8
MLM_RANDOM_FRAC = 0.1


class NonFiniteLoss(FloatingPointError):
    def __init__(self, objective: str, detail: str = ""):
        super().__init__(f"objective {objective!r} produced a non-finite loss {detail}".strip())
        self.objective = objective


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0   # mlm
    beta: float = 1.0    # spp
    gamma: float = 10.0  # btsp
    eta: float = 1.0     # biltm
    zeta: float = 10.0   # tlc
    delta: float = 1.0   # cmi

    _BY_OBJECTIVE = {"mlm": "alpha", "spp": "beta", "btsp": "gamma", "biltm": "eta", "tlc": "zeta", "cmi": "delta"}

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")

    def weight(self, objective: str) -> float:
        return getattr(self, self._BY_OBJECTIVE[objective])

    def enabled(self) -> tuple[str, ...]:
        return tuple(o for o in OBJECTIVES if self.weight(o) > 0)

    def only(self, objectives: Sequence[str]) -> "LossWeights":
        """Keep the weights of ``objectives`` and zero the rest."""
        unknown = set(objectives) - set(OBJECTIVES)
        if unknown:
            raise ValueError(f"unknown objective(s): {', '.join(sorted(unknown))}")
        return replace(self, **{self._BY_OBJECTIVE[o]: 0.0 for o in OBJECTIVES if o not in objectives})


@dataclass
class LossBreakdown:
    """Component losses (Tensors or floats); disabled components are ``None``."""
    mlm: object = None
    spp: object = None
    btsp: object = None
    biltm: object = None
    tlc: object = None
    cmi: object = None
    total: object = None
    parts: dict = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        out = {}
        for name in OBJECTIVES + ("total",):
            v = getattr(self, name)
            out[name] = 0.0 if v is None else float(v.item() if isinstance(v, Tensor) else v)
        return out


def total_loss(breakdown: LossBreakdown, weights: LossWeights):
    """Weighted sum of the enabled components."""
    total = 0.0
    for name in weights.enabled():
        comp = getattr(breakdown, name)
        if comp is None:
            raise ValueError(f"objective {name!r} is enabled but was not computed")
        w = weights.weight(name)
        total = total + (comp * w if w != 1.0 else comp)
    return total


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def apply_mlm_masking(ids, special_mask, rng: np.random.Generator, vocab_size: int,
                      rate: float = MLM_RATE, mask_id: int = MASK_ID):
    """BERT-style corruption.

    Each non-special token is selected independently with probability
    ``rate``; selected tokens become ``[MASK]`` (80%), a random non-special
    token (10%) or stay unchanged (10%).  Targets hold the original id at
    selected positions and ``-100`` elsewhere.
    """
    ids = np.asarray(ids, dtype=np.int64)
    special = np.asarray(special_mask, dtype=bool)
    selected = (rng.random(ids.shape) < rate) & ~special
    action = rng.random(ids.shape)
    n_special = len(SPECIAL_TOKENS)
    if vocab_size > n_special:
        random_ids = rng.integers(n_special, vocab_size, size=ids.shape)
    else:
        random_ids = np.full(ids.shape, mask_id)
    masked = ids.copy()
    to_mask = selected & (action < MLM_MASK_FRAC)
    to_random = selected & (action >= MLM_MASK_FRAC) & (action < MLM_MASK_FRAC + MLM_RANDOM_FRAC)
    masked[to_mask] = mask_id
    masked[to_random] = random_ids[to_random]
    targets = np.where(selected, ids, IGNORE_INDEX)
    return masked, targets


def btsp_sample(index: int, dataset: Sequence[CorpusRecord], rng: np.random.Generator) -> tuple[str, int]:
    """Draw the second BTSP sequence for ``dataset[index]``.

    Quadrants: own base text, own mix text (label 1), another record's base
    or mix text (label 0), each with probability 1/4.
    """
    quadrant = int(rng.integers(4))
    if quadrant >= 2 and len(dataset) < 2:
        log.warning("BTSP negative requested on a singleton dataset; using a positive pair")
        quadrant -= 2
    if quadrant < 2:
        rec = dataset[index]
        return (rec.base_text if quadrant == 0 else rec.mix_text), 1
    j = int(rng.integers(len(dataset) - 1))
    if j >= index:
        j += 1
    other = dataset[j]
    return (other.base_text if quadrant == 2 else other.mix_text), 0


def tlc_build_input(record: CorpusRecord, vocab: Vocabulary, rng: np.random.Generator,
                    max_len: int | None = None) -> tuple[Encoding, list[int], tuple[int, int, int]]:
    """Concatenate C, B, M in shuffled order with per-token language labels.

    Returns the encoding, aligned labels and the order used
    (0 = code-mixed, 1 = base, 2 = mix).
    """
    order = tuple(int(i) for i in rng.permutation(3))
    texts = (record.cm_text, record.base_text, record.mix_text)
    segments, word_labels = [], []
    for seg in order:
        segments.append(texts[seg])
        n = len(pre_tokenize(texts[seg]))
        if seg == 0:
            word_labels.extend(record.labels)
        else:
            word_labels.extend([BASE if seg == 1 else MIX] * n)
    enc = encode_segments(segments, vocab, max_len)
    labels = align_word_labels(word_labels[:enc.num_words], enc)
    return enc, labels, order


def teacher_forcing(text: str, vocab: Vocabulary, max_len: int) -> tuple[list[int], list[int]]:
    """Decoder input ``[CLS] y`` and target ``y [SEP]``."""
    ids = encode(text, vocab, add_specials=False).ids[: max_len - 1]
    return [CLS_ID] + ids, ids + [SEP_ID]


def pad(seqs: Sequence[Sequence[int]], value: int) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), value, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def pad_mask(seqs) -> np.ndarray:
    width = max(len(s) for s in seqs)
    return np.array([[1] * len(s) + [0] * (width - len(s)) for s in seqs], dtype=bool)


@dataclass
class Batch:
    """All objective views for a group of records, padded to rectangles."""
    size: int
    objectives: tuple[str, ...]
    c_ids: np.ndarray = None
    c_mask: np.ndarray = None
    mlm_ids: list = None         # three [B, T] arrays: C, B, M views
    mlm_masks: list = None
    mlm_targets: list = None
    spp_targets: np.ndarray = None
    cmi_targets: np.ndarray = None
    btsp_ids: np.ndarray = None
    btsp_mask: np.ndarray = None
    btsp_labels: np.ndarray = None
    tlc_ids: np.ndarray = None
    tlc_mask: np.ndarray = None
    tlc_targets: np.ndarray = None
    base_in: np.ndarray = None
    base_out: np.ndarray = None
    base_mask: np.ndarray = None
    mix_in: np.ndarray = None
    mix_out: np.ndarray = None
    mix_mask: np.ndarray = None


def build_batch(indices: Sequence[int], dataset: Sequence[CorpusRecord], vocab: Vocabulary,
                rng: np.random.Generator, objectives: Sequence[str] = OBJECTIVES,
                max_len: int = 64, cmi_cfg: CmiConfig = CmiConfig()) -> Batch:
    """Tokenize and sample every view the enabled ``objectives`` need."""
    objectives = tuple(o for o in OBJECTIVES if o in objectives)
    recs = [dataset[i] for i in indices]
    batch = Batch(size=len(recs), objectives=objectives)
    V = len(vocab)

    if {"spp", "cmi", "biltm"} & set(objectives):
        encs = [encode(r.cm_text, vocab, max_len=max_len) for r in recs]
        batch.c_ids = pad([e.ids for e in encs], PAD_ID)
        batch.c_mask = pad_mask([e.ids for e in encs])
        if "spp" in objectives:
            aligned = [align_word_labels(r.switching_points[:e.num_words], e) for r, e in zip(recs, encs)]
            batch.spp_targets = pad(aligned, IGNORE_INDEX)
        if "cmi" in objectives:
            batch.cmi_targets = np.array([r.cmi(cmi_cfg) for r in recs], dtype=np.float64)

    if "mlm" in objectives:
        batch.mlm_ids, batch.mlm_masks, batch.mlm_targets = [], [], []
        for view in ("cm_text", "base_text", "mix_text"):
            seqs = [encode(getattr(r, view), vocab, max_len=max_len).ids for r in recs]
            ids = pad(seqs, PAD_ID)
            special = ids < len(SPECIAL_TOKENS)
            masked, targets = apply_mlm_masking(ids, special, rng, V)
            batch.mlm_ids.append(masked)
            batch.mlm_masks.append(pad_mask(seqs))
            batch.mlm_targets.append(targets)

    if "btsp" in objectives:
        seqs, labels = [], []
        for i in indices:
            text, label = btsp_sample(i, dataset, rng)
            seqs.append(encode_segments([dataset[i].cm_text, text], vocab, max_len).ids)
            labels.append(label)
        batch.btsp_ids, batch.btsp_mask = pad(seqs, PAD_ID), pad_mask(seqs)
        batch.btsp_labels = np.array(labels, dtype=np.float64)

    if "tlc" in objectives:
        seqs, targets = [], []
        for r in recs:
            enc, labels, _ = tlc_build_input(r, vocab, rng, max_len)
            seqs.append(enc.ids)
            targets.append(labels)
        batch.tlc_ids, batch.tlc_mask = pad(seqs, PAD_ID), pad_mask(seqs)
        batch.tlc_targets = pad(targets, IGNORE_INDEX)

    if "biltm" in objectives:
        for stream, view in (("base", "base_text"), ("mix", "mix_text")):
            pairs = [teacher_forcing(getattr(r, view), vocab, max_len) for r in recs]
            setattr(batch, f"{stream}_in", pad([p[0] for p in pairs], PAD_ID))
            setattr(batch, f"{stream}_out", pad([p[1] for p in pairs], IGNORE_INDEX))
            setattr(batch, f"{stream}_mask", pad_mask([p[0] for p in pairs]))
    return batch


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def _flat_ce(logits: Tensor, targets: np.ndarray) -> Tensor:
    return T.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))


def mlm_loss(model, batch: Batch) -> tuple[Tensor, dict]:
    """Mean of the three per-view masked-token cross-entropies."""
    views = []
    for ids, mask, targets in zip(batch.mlm_ids, batch.mlm_masks, batch.mlm_targets):
        enc = model.encode(ids, mask)
        logits = model.heads_forward(enc, ("mlm",)).mlm_logits
        views.append(_flat_ce(logits, targets))
    parts = dict(zip(("mlm_c", "mlm_b", "mlm_m"), views))
    return (views[0] + views[1] + views[2]) * (1.0 / 3.0), parts


def spp_loss(model, batch: Batch, enc=None) -> Tensor:
    enc = enc or model.encode(batch.c_ids, batch.c_mask)
    logits = model.heads_forward(enc, ("spp",)).spp_logits
    return T.binary_cross_entropy_with_logits(logits, batch.spp_targets)


def cmi_loss(model, batch: Batch, enc=None) -> Tensor:
    enc = enc or model.encode(batch.c_ids, batch.c_mask)
    pred = model.heads_forward(enc, ("cmi",)).cmi_pred
    return T.mse(pred, batch.cmi_targets)


def btsp_loss(model, batch: Batch) -> Tensor:
    enc = model.encode(batch.btsp_ids, batch.btsp_mask)
    logit = model.heads_forward(enc, ("btsp",)).btsp_logit
    return T.binary_cross_entropy_with_logits(logit, batch.btsp_labels)


def tlc_loss(model, batch: Batch) -> Tensor:
    enc = model.encode(batch.tlc_ids, batch.tlc_mask)
    logits = model.heads_forward(enc, ("tlc",)).tlc_logits
    return T.binary_cross_entropy_with_logits(logits, batch.tlc_targets)


def biltm_loss(model, batch: Batch, enc=None) -> tuple[Tensor, dict]:
    """Mean of the base and mix decoders' teacher-forced cross-entropies."""
    enc = enc or model.encode(batch.c_ids, batch.c_mask)
    out = model.decode_dual(enc, batch.base_in, batch.mix_in, batch.base_mask, batch.mix_mask)
    lb = _flat_ce(out.base_logits, batch.base_out)
    lm = _flat_ce(out.mix_logits, batch.mix_out)
    return (lb + lm) * 0.5, {"biltm_b": lb, "biltm_m": lm}


def compute_losses(model, batch: Batch, weights: LossWeights) -> LossBreakdown:
    """Evaluate every enabled objective and the weighted total."""
    enabled = weights.enabled()
    missing = set(enabled) - set(batch.objectives)
    if missing:
        raise ValueError(f"batch lacks views for: {', '.join(sorted(missing))}")
    bd = LossBreakdown()
    shared = {}

    def c_encoding():
        if "enc" not in shared:
            shared["enc"] = model.encode(batch.c_ids, batch.c_mask)
        return shared["enc"]

    runners = {
        "mlm": lambda: mlm_loss(model, batch),
        "spp": lambda: spp_loss(model, batch, c_encoding()),
        "btsp": lambda: btsp_loss(model, batch),
        "biltm": lambda: biltm_loss(model, batch, c_encoding()),
        "tlc": lambda: tlc_loss(model, batch),
        "cmi": lambda: cmi_loss(model, batch, c_encoding()),
    }
    for name in enabled:
        try:
            res = runners[name]()
        except FloatingPointError as exc:
            raise NonFiniteLoss(name, f"({exc})") from exc
        if isinstance(res, tuple):
            res, parts = res
            bd.parts.update(parts)
        if not np.isfinite(res.data).all():
            raise NonFiniteLoss(name)
        setattr(bd, name, res)
    bd.total = total_loss(bd, weights)
    if not isinstance(bd.total, Tensor):
        bd.total = Tensor(np.zeros(()))
    return bd

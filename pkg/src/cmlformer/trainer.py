"""Pre-training, fine-tuning, evaluation and the coupling ablation harness."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import CmiConfig, CorpusRecord, LabeledText
from .model import (COUPLING_MODES, CMLFormer, ModelConfig, encode, init_params, linear, load_checkpoint,
                    parameter_count, save_checkpoint)
from .objectives import OBJECTIVES, LossWeights, apply_mlm_masking, build_batch, compute_losses, pad, pad_mask
from .tensor import Tensor
from .tokenizer import PAD_ID, SPECIAL_TOKENS, Vocabulary, encode as encode_text

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch",) + OBJECTIVES + ("total",)
NUM_CLASSES = 2


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    initial_lr: float = 1e-5
    decay_factor: float = 0.9
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: str = "sgd"
    clip_norm: float = 1.0
    cmi_wn: float = 0.5
    cmi_wp: float = 0.5
    max_len: int | None = None

    @classmethod
    def pretrain_defaults(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def finetune_defaults(cls, **kw) -> "TrainConfig":
        return cls(**{"epochs": 30, **kw})

    def lr(self, epoch: int) -> float:
        return lr_at(epoch, self.initial_lr, self.decay_factor)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d


def lr_at(epoch: int, initial_lr: float, decay_factor: float) -> float:
    """Exponential decay: ``initial_lr * decay_factor ** epoch``."""
    return initial_lr * decay_factor ** epoch


# --------------------------------------------------------------------------
# optimisers
# --------------------------------------------------------------------------

def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class SGD:
    def __init__(self, params: Sequence[Tensor]):
        self.params = list(params)

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= lr * p.grad


class Adam:
    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad * p.grad
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


OPTIMIZERS = {"sgd": SGD, "adam": Adam}


def make_optimizer(name: str, params):
    try:
        return OPTIMIZERS[name](params)
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}; expected one of {sorted(OPTIMIZERS)}") from None


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index groups; the trailing partial group is dropped."""
    order = rng.permutation(n)
    bs = max(1, min(batch_size, n))
    return [order[i:i + bs] for i in range(0, n - bs + 1, bs)]


def _zero(params):
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# pre-training
# --------------------------------------------------------------------------

@dataclass
class PretrainResult:
    rows: list[dict]
    checkpoints: list[Path]
    csv_path: Path | None
    last_batches: list = field(default_factory=list)   # final epoch, masks as trained on


def write_loss_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for row in rows:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in LOSS_COLUMNS[1:]])


def read_loss_csv(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


def pretrain(model: CMLFormer, dataset: Sequence[CorpusRecord], vocab: Vocabulary, cfg: TrainConfig,
             out_dir=None, save_checkpoints: bool = True) -> PretrainResult:
    """Joint multi-task training; one CSV row of mean losses per epoch.

    Raises :class:`~cmlformer.objectives.NonFiniteLoss` naming the objective
    if any loss becomes NaN/Inf.
    """
    if not dataset:
        raise ValueError("empty pre-training dataset")
    rng = np.random.default_rng(cfg.seed)
    model.train(np.random.default_rng([cfg.seed, 1]) if model.config.dropout_rate > 0 else None)
    params = model.parameters()
    opt = make_optimizer(cfg.optimizer, params)
    objectives = cfg.weights.enabled()
    max_len = cfg.max_len or model.config.max_seq_len
    cmi_cfg = CmiConfig(cfg.cmi_wn, cfg.cmi_wp)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows, ckpts = [], []

    batches = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr(epoch)
        sums = dict.fromkeys(OBJECTIVES + ("total",), 0.0)
        steps = 0
        batches = []
        for idx in _batches(len(dataset), cfg.batch_size, rng):
            batch = build_batch(idx, dataset, vocab, rng, objectives, max_len, cmi_cfg)
            batches.append(batch)
            _zero(params)
            bd = compute_losses(model, batch, cfg.weights)
            if bd.total.requires_grad:
                T.backward(bd.total)
                clip_grad_norm(params, cfg.clip_norm)
                opt.step(lr)
            for k, v in bd.as_floats().items():
                sums[k] += v
            steps += 1
        row = {"epoch": epoch, **{k: v / max(steps, 1) for k, v in sums.items()}}
        rows.append(row)
        log.info("epoch %d lr %.3g total %.5f", epoch, lr, row["total"])
        if out is not None:
            write_loss_csv(rows, out / "losses.csv")
            if save_checkpoints:
                path = out / f"checkpoint_epoch{epoch:03d}.npz"
                model.save(path, vocab.tokens, extra={"epoch": epoch})
                ckpts.append(path)
    model.train(None)
    if out is not None:
        model.save(out / "model.npz", vocab.tokens, extra={"epoch": cfg.epochs - 1})
    return PretrainResult(rows, ckpts, out / "losses.csv" if out is not None else None, batches)


def masked_accuracy(model: CMLFormer, batches) -> float:
    """Exact-match rate on the masked positions of already built batches."""
    correct = total = 0
    for batch in batches:
        for ids, mask, targets in zip(batch.mlm_ids or [], batch.mlm_masks, batch.mlm_targets):
            enc = encode(model.params, model.config, ids, mask)
            pred = (enc.hidden.data @ model.params["head.mlm.w"].data + model.params["head.mlm.b"].data).argmax(-1)
            sel = targets != T.IGNORE_INDEX
            correct += int((pred[sel] == targets[sel]).sum())
            total += int(sel.sum())
    return correct / total if total else 0.0


def mlm_accuracy(model: CMLFormer, dataset: Sequence[CorpusRecord], vocab: Vocabulary,
                 rng: np.random.Generator, max_len: int | None = None) -> float:
    """Fraction of freshly masked positions (all three views) predicted exactly."""
    max_len = max_len or model.config.max_seq_len
    correct = total = 0
    for view in ("cm_text", "base_text", "mix_text"):
        seqs = [encode_text(getattr(r, view), vocab, max_len=max_len).ids for r in dataset]
        ids = pad(seqs, PAD_ID)
        masked, targets = apply_mlm_masking(ids, ids < len(SPECIAL_TOKENS), rng, len(vocab))
        enc = encode(model.params, model.config, masked, pad_mask(seqs))
        pred = (enc.hidden.data @ model.params["head.mlm.w"].data + model.params["head.mlm.b"].data).argmax(-1)
        sel = targets != T.IGNORE_INDEX
        correct += int((pred[sel] == targets[sel]).sum())
        total += int(sel.sum())
    return correct / total if total else 0.0


# --------------------------------------------------------------------------
# fine-tuning and evaluation
# --------------------------------------------------------------------------

class Classifier:
    """Encoder plus a linear head over the first-position state."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], vocab: Vocabulary):
        self.config = config
        self.params = params
        self.vocab = vocab

    def _encode_texts(self, texts: Sequence[str]):
        seqs = [encode_text(t, self.vocab, max_len=self.config.max_seq_len).ids for t in texts]
        return pad(seqs, PAD_ID), pad_mask(seqs)

    def logits(self, texts: Sequence[str], rng=None) -> Tensor:
        ids, mask = self._encode_texts(texts)
        enc = encode(self.params, self.config, ids, mask, rng)
        return linear(self.params, "cls", enc.hidden[:, 0, :])

    def predict(self, texts: Sequence[str]) -> np.ndarray:
        return self.logits(texts).data.argmax(axis=-1)

    def save(self, path) -> None:
        save_checkpoint(path, self.config, self.params, kind="classifier", vocab_tokens=self.vocab.tokens)

    @classmethod
    def load(cls, path) -> "Classifier":
        ck = load_checkpoint(path)
        if ck.kind != "classifier":
            raise ValueError(f"{path} holds a {ck.kind!r} checkpoint, not a classifier")
        return cls(ck.config, ck.params, Vocabulary(ck.vocab_tokens))


def finetune(source, examples: Sequence[LabeledText], vocab: Vocabulary, cfg: TrainConfig) -> tuple[Classifier, list[dict]]:
    """Drop decoders and auxiliary heads, attach a fresh head, train everything.

    ``source`` is a :class:`CMLFormer` or a checkpoint path.
    """
    if isinstance(source, (str, Path)):
        ck = load_checkpoint(source)
        config, src_params = ck.config, ck.params
    else:
        config, src_params = source.config, source.params
    params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in src_params.items() if k.startswith("enc.")}
    params.update(init_params({"cls.w": (config.hidden_dim, NUM_CLASSES), "cls.b": (NUM_CLASSES,)}, cfg.seed))
    clf = Classifier(config, params, vocab)

    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng([cfg.seed, 1]) if config.dropout_rate > 0 else None
    plist = list(params.values())
    opt = make_optimizer(cfg.optimizer, plist)
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr(epoch)
        losses = []
        for idx in _batches(len(examples), cfg.batch_size, rng):
            batch = [examples[i] for i in idx]
            _zero(plist)
            loss = T.cross_entropy(clf.logits([e.text for e in batch], drop_rng), [e.label for e in batch])
            T.backward(loss)
            grad_norm = clip_grad_norm(plist, cfg.clip_norm)
            opt.step(lr)
            losses.append(loss.item())
        history.append({"epoch": epoch, "loss": float(np.mean(losses)) if losses else 0.0, "grad_norm": grad_norm})
    return clf, history


@dataclass
class MetricReport:
    precision: float
    recall: float
    accuracy: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int

    def to_json(self) -> dict:
        return asdict(self)


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int) -> MetricReport:
    """Positive-class precision/recall/F1 plus accuracy; 0 when undefined."""
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    total = tp + fp + fn + tn
    acc = (tp + tn) / total if total else 0.0
    return MetricReport(p, r, acc, f1, tp, fp, fn, tn)


def metrics_from_predictions(y_true, y_pred) -> MetricReport:
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    tp = int(((y_pred == 1) & (y_true == 1)).sum())
    fp = int(((y_pred == 1) & (y_true == 0)).sum())
    fn = int(((y_pred == 0) & (y_true == 1)).sum())
    tn = int(((y_pred == 0) & (y_true == 0)).sum())
    return metrics_from_counts(tp, fp, fn, tn)


def evaluate(classifier: Classifier, examples: Sequence[LabeledText], batch_size: int = 32) -> MetricReport:
    preds = []
    for i in range(0, len(examples), batch_size):
        preds.extend(classifier.predict([e.text for e in examples[i:i + batch_size]]).tolist())
    return metrics_from_predictions([e.label for e in examples], preds)


# --------------------------------------------------------------------------
# coupling ablation
# --------------------------------------------------------------------------

def ablate_coupling(dataset: Sequence[CorpusRecord], vocab: Vocabulary, model_cfg: ModelConfig,
                    cfg: TrainConfig, out_dir, model_seed: int | None = None) -> dict:
    """Pre-train once per coupling mode with identical seeds and settings.

    Writes ``losses_<mode>.csv`` per mode, ``ablation_losses.csv`` with the
    per-epoch totals side by side, and ``ablation_report.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if model_seed is None else model_seed
    report = {"epochs": cfg.epochs, "seed": cfg.seed, "modes": {}}
    totals = {}
    for mode in COUPLING_MODES:
        mcfg = replace(model_cfg, coupling_mode=mode)
        model = CMLFormer(mcfg, seed=seed)
        res = pretrain(model, dataset, vocab, cfg, out_dir=None)
        csv_path = out / f"losses_{mode}.csv"
        write_loss_csv(res.rows, csv_path)
        totals[mode] = [r["total"] for r in res.rows]
        report["modes"][mode] = {
            "parameter_count": parameter_count(mcfg, "model"),
            "epochs": len(res.rows),
            "first_total": res.rows[0]["total"] if res.rows else None,
            "final_total": res.rows[-1]["total"] if res.rows else None,
            "csv": csv_path.name,
        }
    with open(out / "ablation_losses.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch",) + COUPLING_MODES)
        for e in range(cfg.epochs):
            w.writerow([e] + [repr(totals[m][e]) for m in COUPLING_MODES])
    (out / "ablation_report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return report

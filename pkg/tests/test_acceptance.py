"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL <summary>`` line; the
lines are repeated in the terminal summary of every pytest run.
"""
import contextlib
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from cmlformer import tensor as T
from cmlformer.analysis import attention_profile, column_means, export_profile, load_profile
from cmlformer.corpus import (CmiConfig, CorpusRecord, LabeledText, align_word_labels, compute_cmi,
                              derive_switching_points)
from cmlformer.model import CMLFormer, ModelConfig, encode as encoder_forward, parameter_count
from cmlformer.objectives import (OBJECTIVES, LossBreakdown, LossWeights, apply_mlm_masking, btsp_sample,
                                  build_batch, compute_losses, tlc_build_input, total_loss)
from cmlformer.tensor import Tensor
from cmlformer.tokenizer import SPECIAL_TOKENS, Vocabulary, encode, train_vocab
from cmlformer.trainer import (TrainConfig, ablate_coupling, evaluate, finetune, lr_at, masked_accuracy,
                               metrics_from_predictions, pretrain, read_loss_csv)

from conftest import tiny_config
from helpers import numeric_grad, ref_vanilla, rel_err

RESULTS: dict[int, str] = {}

# memorization run: the tiny config, with the best of the recipes tried at this size
MEMO_MODEL = dict(num_layers=2, hidden_dim=16, num_heads=2, ffn_dim=32, max_seq_len=32)
MEMO_TRAIN = dict(epochs=200, batch_size=2, initial_lr=1e-2, decay_factor=0.995, optimizer="adam", seed=0)
MEMO_SEED = 0


@contextlib.contextmanager
def criterion(n, summary):
    """Record and print a PASS/FAIL line for criterion ``n``."""
    info = {}
    try:
        yield info
    except BaseException:
        line = f"criterion {n}: FAIL {summary} {info.get('detail', '')}".rstrip()
        RESULTS[n] = line
        print(line)
        raise
    line = f"criterion {n}: PASS {summary} {info.get('detail', '')}".rstrip()
    RESULTS[n] = line
    print(line)


def _weighted(out, w):
    return T.tsum(T.mul(out, Tensor(w)))


def _op_cases(r):
    ids = r.integers(0, 4, size=(2, 3))
    targets = r.integers(0, 5, size=6)
    targets[r.random(6) < 0.3] = -100
    bits = r.integers(0, 2, size=6).astype(float)
    mask = r.random((3, 5)) > 0.3
    mask[:, 0] = True
    return {
        "add": (T.add, [r.standard_normal((2, 3)), r.standard_normal(3)]),
        "sub": (T.sub, [r.standard_normal((2, 3)), r.standard_normal((2, 1))]),
        "mul": (T.mul, [r.standard_normal((2, 3)), r.standard_normal(3)]),
        "div": (T.div, [r.standard_normal((2, 3)), 1.5 + np.abs(r.standard_normal(3))]),
        "matmul": (T.matmul, [r.standard_normal((2, 3, 4)), r.standard_normal((4, 2))]),
        "reshape": (lambda x: T.reshape(x, (3, 2)), [r.standard_normal((2, 3))]),
        "transpose": (lambda x: T.transpose(x, (1, 0)), [r.standard_normal((2, 3))]),
        "getitem": (lambda x: x[1:, ::2], [r.standard_normal((3, 4))]),
        "sum": (lambda x: T.tsum(x, axis=0), [r.standard_normal((3, 4))]),
        "mean": (lambda x: T.mean(x, axis=1), [r.standard_normal((3, 4))]),
        "gelu": (T.gelu, [2 * r.standard_normal((3, 4))]),
        "embedding": (lambda w: T.embedding(w, ids), [r.standard_normal((4, 3))]),
        "softmax": (lambda x: T.softmax(x, axis=-1, mask=mask), [r.standard_normal((3, 5))]),
        "layer_norm": (T.layer_norm, [r.standard_normal((3, 5)), 1 + 0.1 * r.standard_normal(5),
                                      r.standard_normal(5)]),
        "cross_entropy": (lambda x: T.cross_entropy(x, targets), [r.standard_normal((6, 5))]),
        "bce": (lambda x: T.binary_cross_entropy_with_logits(x, bits), [2 * r.standard_normal(6)]),
        "mse": (lambda x: T.mse(x, bits), [r.standard_normal(6)]),
    }


def test_c01_gradient_suite(records, vocab):
    with criterion(1, "finite-difference gradients (ops <= 1e-4, end-to-end <= 1e-3, < 60 s)") as info:
        t0 = time.perf_counter()
        worst_op = 0.0
        for trial in range(10):
            for name, (fn, arrays) in _op_cases(np.random.default_rng(trial)).items():
                ts = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
                out = fn(*ts)
                w = np.random.default_rng(99).standard_normal(out.shape)
                T.backward(_weighted(out, w))
                for t in ts:
                    def f():
                        return float((fn(*[Tensor(x.data) for x in ts]).data * w).sum())
                    err = rel_err(t.grad.reshape(-1), numeric_grad(f, t.data))
                    worst_op = max(worst_op, err)
                    assert err <= 1e-4, (name, trial, err)

        cfg = ModelConfig(num_layers=2, hidden_dim=16, num_heads=2, ffn_dim=32, max_seq_len=64).with_vocab(len(vocab))
        model = CMLFormer(cfg, seed=5)
        batch = build_batch([0, 4], records, vocab, np.random.default_rng(1))
        weights = LossWeights()
        T.backward(compute_losses(model, batch, weights).total)
        r = np.random.default_rng(2)
        floor = 1e-5
        names = sorted(n for n, p in model.params.items()
                       if p.grad is not None and np.any(np.abs(p.grad) >= floor))
        worst_e2e = 0.0
        picked = r.choice(names, size=24, replace=False)
        for name in picked:
            p = model.params[name]
            i = int(r.choice(np.flatnonzero(np.abs(p.grad) >= floor)))
            num = numeric_grad(lambda: compute_losses(model, batch, weights).total.item(), p.data, indices=[i])[0]
            ana = p.grad.reshape(-1)[i]
            worst_e2e = max(worst_e2e, abs(ana - num) / max(abs(ana), abs(num)))
        elapsed = time.perf_counter() - t0
        info["detail"] = f"(ops max {worst_op:.1e}, e2e max {worst_e2e:.1e} over {len(picked)} params, {elapsed:.1f} s)"
        assert worst_e2e <= 1e-3
        assert elapsed < 60


def test_c02_coupling_invariants():
    with criterion(2, "coupling: none independent, coupled modes dependent, none == vanilla oracle") as info:
        r = np.random.default_rng(0)
        src, base, mix = r.integers(5, 40, (2, 7)), r.integers(5, 40, (2, 6)), r.integers(5, 40, (2, 5))
        none = CMLFormer(tiny_config(mode="none"), seed=1)
        enc = none.encode(src)
        a = none.decode_dual(enc, base, mix).base_logits.data
        b = none.decode_dual(enc, base, r.integers(5, 40, (2, 9))).base_logits.data
        assert np.array_equal(a, b)
        diffs = {}
        for mode in ("synchronous", "asynchronous"):
            m = CMLFormer(tiny_config(mode=mode), seed=1)
            e = m.encode(src)
            mix2 = mix.copy()
            mix2[:, 0] = np.where(mix2[:, 0] == 5, 6, 5)
            diffs[mode] = float(np.abs(m.decode_dual(e, base, mix).base_logits.data
                                       - m.decode_dual(e, base, mix2).base_logits.data).max())
            assert diffs[mode] > 0
        P = {k: v.data for k, v in none.params.items()}
        out = none.decode_dual(enc, base, mix)
        _, (rb, rm) = ref_vanilla(P, none.config, src, base, mix)
        oracle = max(np.abs(out.base_logits.data - rb).max(), np.abs(out.mix_logits.data - rm).max())
        info["detail"] = f"(sync diff {diffs['synchronous']:.2e}, async diff {diffs['asynchronous']:.2e}, oracle {oracle:.1e})"
        assert oracle <= 1e-10


def test_c03_annotation_oracles():
    with criterion(3, "switching points reproduce worked examples; CMI == brute force to 1e-12") as info:
        assert derive_switching_points([1, 0, 1, 0]) == [0, 1, 1, 1]
        assert derive_switching_points([0, 0, 1, 1, 0, 0, 0, 0]) == [0, 0, 1, 0, 1, 0, 0, 0]
        assert derive_switching_points([0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0]) == \
            [0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 1, 0, 1, 0, 0, 0, 0, 0, 0]
        r = np.random.default_rng(7)
        worst = 0.0
        for _ in range(100):
            labels = r.integers(0, 2, size=int(r.integers(1, 40))).tolist()
            sp = derive_switching_points(labels)
            w_n, w_p = float(r.random()), float(r.random()) + 1e-3
            n_mix = sum(1 for x in labels if x == 1)
            brute = float((Fraction(w_n) * n_mix + Fraction(w_p) * sum(sp)) / len(labels))
            worst = max(worst, abs(compute_cmi(labels, sp, CmiConfig(w_n, w_p)) - brute))
        info["detail"] = f"(max CMI error {worst:.1e})"
        assert worst <= 1e-12


def test_c04_alignment_random_tokenizations():
    with criterion(4, "first-subword alignment on 1000 random tokenizations") as info:
        r = np.random.default_rng(4)
        letters = list("abcdefg")
        for trial in range(1000):
            words = ["".join(r.choice(letters, size=int(r.integers(1, 7)))) for _ in range(int(r.integers(1, 9)))]
            pieces = {w[i:j] for w in words for i in range(len(w)) for j in range(i + 1, len(w) + 1)}
            chosen = sorted(p for p in pieces if r.random() < 0.5)
            vocab = Vocabulary(list(SPECIAL_TOKENS) + sorted(set(letters) | {"##" + c for c in letters}
                                                             | set(chosen) | {"##" + p for p in chosen}))
            enc = encode(" ".join(words), vocab, add_specials=bool(trial % 2))
            labels = r.integers(0, 2, size=len(words)).tolist()
            out = align_word_labels(labels, enc)
            kept = [x for x in out if x != -100]
            assert len(kept) == len(words)
            assert sorted(kept) == sorted(labels)
            firsts = [i for i, w in enumerate(enc.word_ids) if w is not None and (i == 0 or enc.word_ids[i - 1] != w)]
            assert [out[i] for i in firsts] == labels
        info["detail"] = "(1000/1000)"


def test_c05_stochastic_statistics(records, vocab):
    with criterion(5, "MLM 15% and 80/10/10, BTSP quadrants, all six TLC orders") as info:
        r = np.random.default_rng(5)
        V = 1000
        ids = r.integers(5, V, size=(1000, 100))
        masked, targets = apply_mlm_masking(ids, np.zeros(ids.shape, bool), r, V)
        sel = targets != -100
        rate = sel.mean()
        frac_mask = ((masked == 4) & sel).sum() / sel.sum()
        frac_same = ((masked == ids) & sel).sum() / sel.sum()
        frac_rand = 1 - frac_mask - frac_same
        assert abs(rate - 0.15) <= 0.01
        assert abs(frac_mask - 0.8) <= 0.02 and abs(frac_same - 0.1) <= 0.02 and abs(frac_rand - 0.1) <= 0.02

        counts = np.zeros(4)
        for k in range(10_000):
            i = k % len(records)
            text, label = btsp_sample(i, records, r)
            if label:
                counts[0 if text == records[i].base_text else 1] += 1
            else:
                counts[2 if any(text == o.base_text for o in records) else 3] += 1
        quad = counts / counts.sum()
        assert np.all(np.abs(quad - 0.25) <= 0.02)

        orders = {tlc_build_input(records[0], vocab, r)[2] for _ in range(1000)}
        assert len(orders) == 6
        info["detail"] = (f"(select {rate:.4f}, mask/rand/keep {frac_mask:.3f}/{frac_rand:.3f}/{frac_same:.3f}, "
                          f"quadrants {' '.join(f'{q:.3f}' for q in quad)}, orders {len(orders)})")


def test_c06_loss_algebra(records, vocab):
    with criterion(6, "unit components total 24; disabled heads get zero gradient") as info:
        bd = LossBreakdown(*(Tensor(np.float64(1.0)) for _ in OBJECTIVES))
        total = total_loss(bd, LossWeights()).item()
        assert total == 24.0
        model = CMLFormer(tiny_config(len(vocab), max_seq_len=64), seed=2)
        batch = build_batch([0, 1], records, vocab, np.random.default_rng(0))
        T.backward(compute_losses(model, batch, LossWeights().only(["mlm", "biltm"])).total)
        norm = 0.0
        for h in ("spp", "btsp", "tlc", "cmi"):
            for s in ("w", "b"):
                g = model.params[f"head.{h}.{s}"].grad
                norm += 0.0 if g is None else float((g * g).sum())
        info["detail"] = f"(total {total!r}, disabled-head grad norm {math.sqrt(norm):.1e})"
        assert math.sqrt(norm) < 1e-12


@pytest.mark.slow
def test_c07_memorization(records):
    with criterion(7, "memorization: total < 20% of epoch 1, masked accuracy > 90%, < 5 min") as info:
        vocab = train_vocab([t for r in records for t in (r.cm_text, r.base_text, r.mix_text)], 4000, 1)
        model = CMLFormer(ModelConfig(**MEMO_MODEL).with_vocab(len(vocab)), seed=MEMO_SEED)
        t0 = time.perf_counter()
        res = pretrain(model, records, vocab, TrainConfig(**MEMO_TRAIN))
        elapsed = time.perf_counter() - t0
        ratio = res.rows[-1]["total"] / res.rows[0]["total"]
        acc = masked_accuracy(model, res.last_batches)
        info["detail"] = f"(ratio {ratio:.3f}, accuracy {acc:.3f}, {elapsed:.0f} s)"
        assert len(res.rows) == 200
        assert ratio < 0.2
        assert acc > 0.9
        assert elapsed < 300


def test_c08_finetune_pipeline():
    with criterion(8, "fine-tune separable corpus to 100%; metric fixture exact") as info:
        r = np.random.default_rng(0)
        filler = ["yeh", "woh", "kal", "aaj", "movie", "game", "dost", "ghar"]
        data = []
        for i in range(16):
            words = list(r.choice(filler, size=4)) + ["ekdum" if i % 2 else "theek"]
            r.shuffle(words)
            data.append(LabeledText(" ".join(words), i % 2))
        vocab = train_vocab([d.text for d in data], 200, 1)
        encoder = CMLFormer(tiny_config(len(vocab)), seed=2)
        clf, _ = finetune(encoder, data, vocab, TrainConfig(epochs=30, batch_size=4, initial_lr=3e-3,
                                                            decay_factor=1.0, optimizer="adam"))
        acc = evaluate(clf, data).accuracy
        m = metrics_from_predictions([1, 1, 1, 1, 1, 0, 0, 0, 0, 0], [1, 1, 1, 0, 0, 1, 0, 0, 0, 0])
        info["detail"] = f"(train accuracy {acc}, P {m.precision} R {m.recall} A {m.accuracy} F1 {m.f1:.4f})"
        assert acc == 1.0
        assert (m.precision, m.recall, m.accuracy) == (0.75, 0.6, 0.7) and round(m.f1, 4) == 0.6667


def test_c09_parameter_parity():
    with criterion(9, "encoder parameter count at base size equals closed form") as info:
        d, f, L, V, n = 768, 3072, 12, 32000, 512
        closed = V * d + n * d + L * (4 * (d * d + d) + 2 * d * f + f + d + 4 * d)
        got = parameter_count(ModelConfig.base())
        info["detail"] = f"({got:,} vs {closed:,})"
        assert got == closed == 110_023_680


def test_c10_schedules_and_logs(tmp_path, records, vocab):
    with criterion(10, "lr schedule exact; CSV epochs x 8; identical seeds give identical bytes") as info:
        for e in range(100):
            exact = Fraction(1e-5) * Fraction(0.9) ** e
            assert abs(Fraction(lr_at(e, 1e-5, 0.9)) - exact) <= exact * Fraction(1, 2 ** 50)
        blobs = []
        for run in ("a", "b"):
            model = CMLFormer(tiny_config(len(vocab), max_seq_len=64), seed=3)
            pretrain(model, records, vocab, TrainConfig(epochs=3, batch_size=4, initial_lr=1e-3, optimizer="adam"),
                     out_dir=tmp_path / run, save_checkpoints=False)
            blobs.append((tmp_path / run / "losses.csv").read_bytes())
        lines = blobs[0].decode().splitlines()
        assert lines[0] == "epoch,mlm,spp,btsp,biltm,tlc,cmi,total"
        assert len(lines) == 4 and all(len(l.split(",")) == 8 for l in lines)
        assert blobs[0] == blobs[1]
        info["detail"] = f"({len(lines) - 1} rows, {len(blobs[0])} identical bytes)"


def test_c11_ablation(tmp_path, records, vocab):
    with criterion(11, "ablation over three coupling modes; none < synchronous == asynchronous") as info:
        cfg = TrainConfig(epochs=2, batch_size=4, initial_lr=1e-3, optimizer="adam")
        report = ablate_coupling(records, vocab, tiny_config(len(vocab), max_seq_len=64), cfg, tmp_path)
        for mode in ("none", "synchronous", "asynchronous"):
            rows = read_loss_csv(tmp_path / f"losses_{mode}.csv")
            assert len(rows) == 2 and all(math.isfinite(v) for row in rows for v in row.values())
        c = {m: v["parameter_count"] for m, v in report["modes"].items()}
        info["detail"] = f"(params none {c['none']}, sync {c['synchronous']}, async {c['asynchronous']})"
        assert c["none"] < c["synchronous"] == c["asynchronous"]


def test_c12_attention_export(tmp_path, records, vocab):
    with criterion(12, "attention column means == brute force to 1e-9; scores in [0,1]; JSON round trip") as info:
        model = CMLFormer(tiny_config(len(vocab), max_seq_len=64), seed=4)
        worst = 0.0
        for rec in records:
            prof = attention_profile(model.params, model.config, vocab, rec.cm_text, rec.labels)
            enc = encode(rec.cm_text, vocab)
            attn = encoder_forward(model.params, model.config, np.array([enc.ids])).attentions[0][0, 0]
            keep = [w is not None for w in enc.word_ids]
            brute = np.array([sum(attn[i, j] for i in range(len(enc))) / len(enc)
                              for j in range(len(enc)) if keep[j]])
            fast = column_means(attn, np.ones(len(enc), bool), np.array(keep))
            worst = max(worst, float(np.abs(fast - brute).max()))
            assert all(0.0 <= s <= 1.0 for s in prof.scores)
            export_profile(prof, tmp_path / "p.json")
            back = load_profile(tmp_path / "p.json")
            assert back == prof
        info["detail"] = f"(max column-mean error {worst:.1e})"
        assert worst <= 1e-9

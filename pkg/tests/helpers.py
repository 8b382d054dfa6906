"""Oracles shared across test modules."""
import math

import numpy as np

H = 1e-6


def numeric_grad(f, arr, h=H, indices=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (mutated in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


# plain numpy transformer pieces, no autodiff

def ref_ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def ref_gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def ref_mha(P, pre, xq, xkv, allowed, h):
    Bn, Tq, d = xq.shape
    dh = d // h
    q = xq @ P[pre + ".q.w"] + P[pre + ".q.b"]
    k = xkv @ P[pre + ".k.w"] + P[pre + ".k.b"]
    v = xkv @ P[pre + ".v.w"] + P[pre + ".v.b"]
    out = np.zeros_like(q)
    for bi in range(Bn):
        for hi in range(h):
            sl = slice(hi * dh, (hi + 1) * dh)
            s = q[bi, :, sl] @ k[bi, :, sl].T / math.sqrt(dh)
            s = np.where(allowed[bi], s, -np.inf)
            e = np.exp(s - s.max(-1, keepdims=True))
            out[bi, :, sl] = (e / e.sum(-1, keepdims=True)) @ v[bi, :, sl]
    return out @ P[pre + ".o.w"] + P[pre + ".o.b"]


def ref_ffn(P, pre, x):
    return ref_gelu(x @ P[pre + ".w1"] + P[pre + ".b1"]) @ P[pre + ".w2"] + P[pre + ".b2"]


def ref_vanilla(P, cfg, src, base, mix):
    """Encoder plus two independent standard decoders."""
    def ln(pre, x):
        return ref_ln(x, P[pre + ".g"], P[pre + ".b"])

    x = P["enc.tok_emb"][src] + P["enc.pos_emb"][: src.shape[1]]
    full = np.ones((src.shape[0], src.shape[1], src.shape[1]), bool)
    for l in range(cfg.num_layers):
        x = ln(f"enc.{l}.ln1", x + ref_mha(P, f"enc.{l}.attn", x, x, full, cfg.num_heads))
        x = ln(f"enc.{l}.ln2", x + ref_ffn(P, f"enc.{l}.ffn", x))
    mem = x
    outs = []
    for s, ids in (("base", base), ("mix", mix)):
        n = ids.shape[1]
        causal = np.broadcast_to(np.tril(np.ones((n, n), bool)), (ids.shape[0], n, n))
        to_mem = np.ones((ids.shape[0], n, mem.shape[1]), bool)
        y = P[f"dec_{s}.tok_emb"][ids] + P[f"dec_{s}.pos_emb"][:n]
        for l in range(cfg.num_layers):
            p = f"dec_{s}.{l}"
            y = ln(p + ".ln1", y + ref_mha(P, p + ".self", y, y, causal, cfg.num_heads))
            y = ln(p + ".ln2", y + ref_mha(P, p + ".enc", y, mem, to_mem, cfg.num_heads))
            y = ln(p + ".ln4", y + ref_ffn(P, p + ".ffn", y))
        outs.append(y @ P[f"dec_{s}.out.w"] + P[f"dec_{s}.out.b"])
    return mem, outs

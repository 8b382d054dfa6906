"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--rows 4096] [--cols 256] [--repeat 20] [--end-to-end]

``--end-to-end`` additionally times one pre-training epoch on the sample
corpus in two subprocesses, one with ``CMLFORMER_DISABLE_NUMBA=1``.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from cmlformer import _kernels

STEP = """
import time, numpy as np
from cmlformer import load_jsonl, sample_corpus_path, train_vocab, _kernels
from cmlformer.model import CMLFormer, ModelConfig
from cmlformer.trainer import TrainConfig, pretrain
recs = load_jsonl(sample_corpus_path())
vocab = train_vocab([t for r in recs for t in (r.cm_text, r.base_text, r.mix_text)], 4000, 1)
cfg = TrainConfig(epochs=1, batch_size=4, initial_lr=1e-3, optimizer="adam")
pretrain(CMLFormer(ModelConfig().with_vocab(len(vocab))), recs, vocab, cfg)  # warm-up / jit
t = time.perf_counter()
for _ in range(3):
    pretrain(CMLFormer(ModelConfig().with_vocab(len(vocab))), recs, vocab, cfg)
print(_kernels.BACKEND, (time.perf_counter() - t) / 3)
"""


def cases(rows, cols, rng):
    x = rng.standard_normal((rows, cols))
    keep = rng.random((rows, cols)) > 0.2
    keep[:, 0] = True
    g = rng.standard_normal((rows, cols))
    targets = rng.integers(0, cols, size=rows)
    ids = rng.integers(0, 512, size=rows)

    def ln_bwd(k):
        xhat, rstd = k.layer_norm_rows(x, 1e-5)
        return lambda: k.layer_norm_rows_backward(g, xhat, rstd)

    return {
        "softmax_rows": lambda k: (lambda: k.softmax_rows(x, keep)),
        "softmax_rows_backward": lambda k: (lambda y=k.softmax_rows(x, keep): k.softmax_rows_backward(y, g)),
        "layer_norm_rows": lambda k: (lambda: k.layer_norm_rows(x, 1e-5)),
        "layer_norm_rows_backward": ln_bwd,
        "cross_entropy_rows": lambda k: (lambda: k.cross_entropy_rows(x, targets, -100)),
        "gelu": lambda k: (lambda: k.gelu(x)),
        "gelu_backward": lambda k: (lambda: k.gelu_backward(x, g)),
        "scatter_add_rows": lambda k: (lambda: k.scatter_add_rows(np.zeros((512, cols)), ids, g)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--cols", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args(argv)

    nb = _kernels._build_numba_kernels()
    npk = _kernels.numpy_kernels
    print(f"{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, make in cases(args.rows, args.cols, np.random.default_rng(0)).items():
        fn_nb, fn_np = make(nb), make(npk)
        fn_nb()  # compile
        t_np = min(timeit.repeat(fn_np, number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(fn_nb, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<26}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.2f}x")

    if args.end_to_end:
        for flag in ("0", "1"):
            env = dict(os.environ, CMLFORMER_DISABLE_NUMBA=flag)
            out = subprocess.run([sys.executable, "-c", STEP], env=env, capture_output=True, text=True, check=True)
            backend, secs = out.stdout.split()
            print(f"one pre-training epoch ({backend}): {float(secs):.3f} s")


if __name__ == "__main__":
    main()

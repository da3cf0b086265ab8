"""Time each kernel under the compiled and the numpy backend.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Also times one full training step (batch 16, dim 8) per backend.
"""
import argparse
import json
import timeit

import numpy as np

from gistdesk import encoder, guide, kernels, synthetic, trainer
from gistdesk.selection import Strategy


def kernel_cases(rng):
    n_texts, tokens, dim, vocab = 48, 10, 8, 4096
    table = rng.normal(size=(vocab, dim))
    ids = rng.integers(0, vocab, n_texts * tokens).astype(np.int64)
    offsets = np.arange(0, n_texts * tokens + 1, tokens, dtype=np.int64)
    n = 16
    sims = [rng.uniform(-1, 1, (n, n)) for _ in range(4)]
    masks = [np.eye(n, dtype=bool), np.zeros((n, n), bool), np.eye(n, dtype=bool), np.eye(n, dtype=bool)]
    skip = np.zeros(n, bool)
    grad = rng.normal(size=(vocab, dim))

    def pool(impl):
        return lambda: impl.pool_forward(table, ids, offsets)

    def pool_back(impl):
        pre, emb, norms = impl.pool_forward(table, ids, offsets)
        g = rng.normal(size=emb.shape)
        out = np.zeros_like(table)
        return lambda: impl.pool_backward(g, emb, norms, ids, offsets, out)

    def rows(impl):
        return lambda: impl.contrastive_rows(*sims, *masks, 100.0, True, skip)

    def adam(impl):
        p, m, v = table.ravel().copy(), np.zeros(table.size), np.zeros(table.size)
        g = grad.ravel()
        return lambda: impl.adamw_update(p, g, m, v, 1e-2, 0.9, 0.999, 1e-8, 0.0, 1)

    return {"pool_forward": pool, "pool_backward": pool_back, "contrastive_rows": rows, "adamw_update": adam}


def train_step_case():
    corpus = synthetic.generate(synthetic.SynthConfig(false_negative_rate=0.3))
    oracle = guide.LabelOracleGuide.from_items(corpus.items)
    params = encoder.init_params(8)
    cfg = trainer.TrainConfig.desk(strategy=Strategy.GUIDED, total_steps=20)
    return lambda: trainer.train(corpus.triplets, params, oracle, cfg)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args()

    impls = kernels.available_backends()
    results = {}
    for name, make in kernel_cases(np.random.default_rng(0)).items():
        for backend, impl in impls.items():
            fn = make(impl)
            number, _ = timeit.Timer(fn).autorange()
            best = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
            results.setdefault(name, {})[backend] = best

    step = train_step_case()
    saved = kernels._impl
    for backend, impl in impls.items():
        kernels._impl = impl
        best = min(timeit.repeat(step, number=1, repeat=args.repeat)) / 20
        results.setdefault("train_step", {})[backend] = best
    kernels._impl = saved

    header = f"{'kernel':<18}" + "".join(f"{b + ' (us)':>16}" for b in impls)
    if len(impls) > 1:
        header += f"{'speedup':>10}"
    print(header)
    for name, row in results.items():
        line = f"{name:<18}" + "".join(f"{row[b] * 1e6:>16.1f}" for b in impls)
        if "cython" in row and "python" in row:
            line += f"{row['python'] / row['cython']:>9.1f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=1, sort_keys=True)


if __name__ == "__main__":
    main()

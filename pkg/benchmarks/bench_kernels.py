"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
import argparse
import json
import timeit

import numpy as np

from mote import kernels
from mote.expert import PAR, AdapterExpert, TrainConfig, train_task
from mote.harness import preset_tasks
from mote.inference import InferenceConfig, predict_batch
from mote.numerics import SeededRng
from mote.prototypes import Prototype, PrototypePool


def fixtures(d=768, r=16, n_experts=10, per_task=10, batch=256):
    rng = SeededRng(0)
    experts, pool = [], PrototypePool()
    for t in range(n_experts):
        classes = range(t * per_task, (t + 1) * per_task)
        e = AdapterExpert.create(t, classes, d, r, PAR, rng.child(t))
        e.w_up = rng.child(t, 1).normal(scale=0.02, size=e.w_up.shape)
        e.trained = True
        experts.append(e)
        for c in classes:
            pool.add(Prototype(c, t, rng.child(t, 2, c).normal(size=d), t))
        pool.add_scope(t, classes)
    h = rng.child(99).normal(size=(batch, d))
    return experts, pool, h


def cases():
    experts, pool, h = fixtures()
    _, protos, _ = pool.arrays()
    e = experts[0]
    single = h[:1]
    task = preset_tasks("confusable", 1993)[0]
    cfg = TrainConfig(epochs=2)
    return {
        "matmul 256x768 @ 768x16": lambda: kernels.matmul(h, e.w_down),
        "adapter_forward batch 256": lambda: kernels.adapter_forward(h, h, e.w_down, e.w_up, True),
        "cosine_sims 256 x 100 protos": lambda: kernels.cosine_sims(h, protos),
        "predict_batch 256, 10 experts": lambda: predict_batch(h, h, experts, pool, InferenceConfig()),
        "predict single sample, 10 experts": lambda: predict_batch(single, single, experts, pool,
                                                                 InferenceConfig()),
        "train_task 2 epochs (d=32)": lambda: train_task(
            AdapterExpert.create(0, task.classes, 32, 16, PAR, SeededRng(1)), task.train, cfg, SeededRng(2)),
    }


def bench(repeat):
    results = {}
    backends = ["python"] + (["compiled"] if kernels.compiled_available() else [])
    for name in backends:
        kernels.use(name)
        for label, fn in cases().items():
            fn()  # warm up
            number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-7)))
            best = min(timeit.repeat(fn, number=number, repeat=repeat)) / number
            results.setdefault(label, {})[name] = best
    return results


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args()
    prev = kernels.BACKEND
    try:
        results = bench(args.repeat)
    finally:
        kernels.use(prev)
    print(f"{'case':<36}{'python':>12}{'compiled':>12}{'speedup':>10}")
    for label, r in results.items():
        py, c = r["python"], r.get("compiled")
        cells = f"{1e6 * py:>10.1f}us" + (f"{1e6 * c:>10.1f}us{py / c:>9.2f}x" if c else f"{'-':>12}{'-':>10}")
        print(f"{label:<36}{cells}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()

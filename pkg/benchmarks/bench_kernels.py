"""Compare the compiled kernel extension against the numpy fallback.

Times the row-wise hot kernels at shapes representative of the training
loops, plus one end-to-end teacher training step per backend. Run:

    python benchmarks/bench_kernels.py [--repeats 200]
"""

import argparse
import time

import numpy as np

from maskdist._kernels import numpy_ref

try:
    from maskdist._kernels import _core
except ImportError:
    _core = None


def timeit(fn, repeats):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats * 1e6  # microseconds


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    rows = np.ascontiguousarray(rng.normal(size=(2048, 64)))
    gy = np.ascontiguousarray(rng.normal(size=(2048, 64)))
    gain = np.ascontiguousarray(rng.normal(size=64))
    bias = np.ascontiguousarray(rng.normal(size=64))
    flat = np.ascontiguousarray(rng.normal(size=2048 * 64))
    table = np.ascontiguousarray(rng.normal(size=(1024, 64)))
    idx = rng.integers(0, 1024, size=2048)
    probs = numpy_ref.softmax_rows(rows)
    u = np.ascontiguousarray(rng.random(2048))
    soft = numpy_ref.softmax_rows(rows)
    _, mean, rstd = numpy_ref.layernorm_rows(rows, gain, bias, 1e-5)

    cases = {
        "softmax_rows (2048x64)": lambda k: k.softmax_rows(rows),
        "softmax_backward (2048x64)": lambda k: k.softmax_backward_rows(soft, gy),
        "log_softmax_rows (2048x64)": lambda k: k.log_softmax_rows(rows),
        "layernorm_rows (2048x64)": lambda k: k.layernorm_rows(rows, gain, bias, 1e-5),
        "layernorm_backward (2048x64)": lambda k: k.layernorm_backward_rows(
            rows, gain, mean, rstd, gy),
        "gelu_forward (131072)": lambda k: k.gelu_forward(flat),
        "gelu_backward (131072)": lambda k: k.gelu_backward(flat, flat),
        "gather_rows (2048 of 1024x64)": lambda k: k.gather_rows(table, idx),
        "scatter_add_rows (2048x64)": lambda k: k.scatter_add_rows(
            np.zeros_like(table), idx, gy),
        "categorical_rows (2048x64)": lambda k: k.categorical_rows(probs, u),
    }
    print(f"{'kernel':34s} {'numpy us':>10s} {'compiled us':>12s} {'speedup':>8s}")
    for name, fn in cases.items():
        t_np = timeit(lambda: fn(numpy_ref), repeats)
        if _core is None:
            print(f"{name:34s} {t_np:10.1f} {'n/a':>12s} {'n/a':>8s}")
        else:
            t_cy = timeit(lambda: fn(_core), repeats)
            print(f"{name:34s} {t_np:10.1f} {t_cy:12.1f} {t_np / t_cy:7.1f}x")


def bench_train_step(repeats):
    """End-to-end teacher iterations under each backend (set via env when
    spawning; here we swap the dispatch table in place)."""
    import maskdist._kernels as K
    from maskdist.datasets import SyntheticDataset
    from maskdist.model import ModelConfig
    from maskdist.teacher import TrainConfig, train_teacher

    ds = SyntheticDataset.markov_chain(8, 16, 2, seed=1)
    mc = ModelConfig(vocab_size=16, seq_len=8, n_classes=2, d_model=64,
                     n_blocks=2, n_heads=4)

    def run():
        train_teacher(ds, TrainConfig(iterations=repeats, batch_size=64,
                                      lr=1e-3, seed=0), mc)

    backends = [("numpy", numpy_ref)] + ([("compiled", _core)] if _core else [])
    saved = {name: getattr(K, name) for name in K.KERNEL_NAMES}
    results = {}
    for label, mod in backends:
        for name in saved:
            setattr(K, name, getattr(mod, name))
        t0 = time.perf_counter()
        run()
        results[label] = (time.perf_counter() - t0) / repeats * 1e3
    for name, fn in saved.items():
        setattr(K, name, fn)
    print(f"\n{'teacher train iteration':34s} "
          + "  ".join(f"{label}: {ms:.1f} ms" for label, ms in results.items()))


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=200)
    parser.add_argument("--train-iters", type=int, default=30)
    args = parser.parse_args()
    if _core is None:
        print("compiled extension not built; showing numpy fallback only\n")
    bench_kernels(args.repeats)
    bench_train_step(args.train_iters)


if __name__ == "__main__":
    main()

"""Compare the compiled kernels with their numpy twins, then time a training step.

Run:  python3 benchmarks/bench_kernels.py [--repeat N]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from semiopen_vqa import kernels
from semiopen_vqa.data import encode_dataset, generate_dataset
from semiopen_vqa.experiments import reference_config
from semiopen_vqa.model import VqaModel
from semiopen_vqa.train import TrainState, adam_step


def kernel_cases(rng):
    x = rng.standard_normal((32 * 4 * 24, 24))          # attention score rows
    g = rng.standard_normal(x.shape)
    y = kernels.softmax_fwd(x)
    h = rng.standard_normal((32 * 24, 64))               # layer-norm rows
    gain, bias = np.ones(64), np.zeros(64)
    _, xhat, rstd = kernels.layer_norm_fwd(h, gain, bias, 1e-5)
    act = rng.standard_normal((32 * 24, 256))
    logits = rng.standard_normal((32, 23))
    t = np.zeros_like(logits)
    t[np.arange(32), rng.integers(0, 23, 32)] = 1
    return {
        "softmax_fwd": lambda: kernels.softmax_fwd(x),
        "softmax_bwd": lambda: kernels.softmax_bwd(y, g),
        "layer_norm_fwd": lambda: kernels.layer_norm_fwd(h, gain, bias, 1e-5),
        "layer_norm_bwd": lambda: kernels.layer_norm_bwd(h, xhat, rstd, gain),
        "gelu_fwd": lambda: kernels.gelu_fwd(act),
        "gelu_bwd": lambda: kernels.gelu_bwd(act, act),
        "asl_fwd": lambda: kernels.asl_fwd(logits, t, 1.0, 4.0, 1e-12),
    }


def best_of(fn, repeat: int) -> float:
    fn()  # warm-up / JIT compile
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-6)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def train_step_time(repeat: int) -> float:
    cfg = reference_config()
    samples, vocab = generate_dataset(32, seed=0)
    ds = encode_dataset(samples, vocab, cfg.model.max_question_tokens)
    model = VqaModel(cfg.fitted_to(vocab, 4).model)
    state = TrainState()

    def step():
        model.zero_grads()
        loss = model.loss(model.logits(ds.images, ds.questions), ds.answers)
        loss.backward()
        adam_step(model.parameters(), state)
    return best_of(step, repeat)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    print(f"{'kernel':<16}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, fn in cases.items():
        times = {}
        for b in ("numpy", "numba"):
            with kernels.use_backend(b):
                times[b] = best_of(fn, args.repeat) * 1e3
        print(f"{name:<16}{times['numpy']:>10.3f}{times['numba']:>10.3f}{times['numpy'] / times['numba']:>8.2f}x")

    print("\nreference-config training step, batch 32 (float32):")
    for b in ("numpy", "numba"):
        with kernels.use_backend(b):
            print(f"  {b:<6} {train_step_time(args.repeat) * 1e3:8.1f} ms")


if __name__ == "__main__":
    main()

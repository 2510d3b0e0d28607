"""Compare the compiled kernel backend against the NumPy reference.

Times each numeric kernel under both backends on training-shaped inputs,
checks they agree numerically, then times a full encoder forward/backward
step under each backend. Run from the repository root:

    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --rows 4096 --width 256 --repeats 30
"""

import argparse
import time

import numpy as np

from levelwise import exits, kernels, training
from levelwise.autograd import Tape
from levelwise.data import build_tree_hierarchy
from levelwise.encoder import ModelConfig, TransformerEncoder
from levelwise.hierarchy import LevelIndex, level_weights


def best_of(fn, repeats):
    """Minimum wall time over `repeats` calls (one warm-up call first)."""
    fn()
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def kernel_cases(rng, rows, width):
    """Callable pairs (name, run(backend_module)) on shared random inputs."""
    x = rng.standard_normal((rows, width))
    dy = rng.standard_normal((rows, width))
    y_sig = 1.0 / (1.0 + np.exp(-x))
    y_soft = np.exp(x - x.max(axis=-1, keepdims=True))
    y_soft /= y_soft.sum(axis=-1, keepdims=True)
    gain = rng.standard_normal(width)
    bias = rng.standard_normal(width)
    _, xhat, inv_std = kernels.reference.layernorm_fwd(x, gain, bias, 1e-5)
    probs = rng.uniform(1e-4, 1.0 - 1e-4, size=(rows, width))
    targets = rng.integers(0, 2, size=(rows, width)).astype(np.float64)
    value = rng.standard_normal((rows, width))
    grad = rng.standard_normal((rows, width))
    moment1 = np.zeros_like(value)
    moment2 = np.zeros_like(value)

    def adam(mod):
        # copies: adam_step mutates its buffers in place
        return mod.adam_step(
            value.copy(), grad, moment1.copy(), moment2.copy(),
            1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001,
        )

    return [
        ("sigmoid_fwd", lambda mod: mod.sigmoid_fwd(x)),
        ("sigmoid_bwd", lambda mod: mod.sigmoid_bwd(y_sig, dy)),
        ("gelu_fwd", lambda mod: mod.gelu_fwd(x)),
        ("gelu_bwd", lambda mod: mod.gelu_bwd(x, dy)),
        ("softmax_fwd", lambda mod: mod.softmax_fwd(x)),
        ("softmax_bwd", lambda mod: mod.softmax_bwd(y_soft, dy)),
        ("layernorm_fwd", lambda mod: mod.layernorm_fwd(x, gain, bias, 1e-5)),
        ("layernorm_bwd", lambda mod: mod.layernorm_bwd(xhat, inv_std, gain, dy)),
        ("bce_fwd", lambda mod: mod.bce_fwd(probs, targets, 1e-7)),
        ("bce_bwd", lambda mod: mod.bce_bwd(probs, targets, 1e-7, 0.5)),
        ("adam_step", adam),
    ]


def max_disagreement(result_a, result_b):
    if isinstance(result_a, tuple):
        return max(
            max_disagreement(a, b) for a, b in zip(result_a, result_b)
        )
    if result_a is None:
        return 0.0
    return float(np.max(np.abs(np.asarray(result_a) - np.asarray(result_b))))


def bench_kernels(rng, rows, width, repeats):
    print(f"per-kernel timings on ({rows}, {width}) float64 inputs, "
          f"best of {repeats}")
    print(f"{'kernel':<15} {'python':>10} {'compiled':>10} "
          f"{'speedup':>8} {'max|diff|':>10}")
    for name, run in kernel_cases(rng, rows, width):
        ref_out = run(kernels.reference)
        fast_out = run(kernels._fastk)
        diff = max_disagreement(ref_out, fast_out)
        t_ref = best_of(lambda: run(kernels.reference), repeats)
        t_fast = best_of(lambda: run(kernels._fastk), repeats)
        print(f"{name:<15} {t_ref * 1e3:>8.3f}ms {t_fast * 1e3:>8.3f}ms "
              f"{t_ref / t_fast:>7.2f}x {diff:>10.2e}")


def training_step(encoder, heads, wiring, weights, ids, mask, targets,
                  optimizer):
    optimizer.zero_grad()
    with Tape() as tape:
        activation = encoder.encode(ids, mask, training=True)
        scores = exits.predict(activation, heads, wiring)
        loss = training.weighted_loss(scores, targets, weights)
        tape.backward(loss.total)
    optimizer.step()
    return loss.value


def bench_model_step(rng, repeats):
    h = build_tree_hierarchy(6, 2)
    index = LevelIndex(h)
    weights = level_weights(h).as_floats()
    config = ModelConfig(
        vocabulary_size=1000, dropout_rate=0.0, seed=0
    )  # the default 12x64x4 geometry
    wiring = exits.build_wiring("last-six", config.num_layers, h.depth)
    batch, length = 16, 128
    ids = rng.integers(4, 1000, size=(batch, length))
    mask = np.ones((batch, length))
    targets = [
        rng.integers(0, 2, size=(batch, index.size(n))).astype(np.float64)
        for n in range(1, h.depth + 1)
    ]

    print(f"\nfull training step, batch {batch} x seq {length}, "
          f"{config.num_layers} layers, best of {repeats}")
    for backend in kernels.available_backends():
        kernels.use_backend(backend)
        encoder = TransformerEncoder(config)
        heads = exits.create_heads(wiring, index, config.hidden_size, seed=0)
        optimizer = training.AdamOptimizer(
            list(encoder.parameters()) + exits.head_parameters(heads), 1e-3
        )

        def step():
            training_step(
                encoder, heads, wiring, weights, ids, mask, targets, optimizer
            )

        t = best_of(step, repeats)
        print(f"{backend:<10} {t * 1e3:>10.1f}ms per step")


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--rows", type=int, default=2048,
                        help="rows of the kernel test matrices")
    parser.add_argument("--width", type=int, default=128,
                        help="columns of the kernel test matrices")
    parser.add_argument("--repeats", type=int, default=20,
                        help="timing repetitions per measurement")
    parser.add_argument("--step-repeats", type=int, default=3,
                        help="repetitions for the full-model step")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    if "compiled" not in kernels.available_backends():
        raise SystemExit(
            "compiled kernel extension is not available; build it with "
            "`pip install -e . --no-build-isolation`"
        )
    active = kernels.backend_name()
    rng = np.random.default_rng(args.seed)
    try:
        bench_kernels(rng, args.rows, args.width, args.repeats)
        bench_model_step(rng, args.step_repeats)
    finally:
        kernels.use_backend(active)


if __name__ == "__main__":
    main()

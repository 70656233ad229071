"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--scale 2]

Each hot kernel runs on shapes taken from the desk-scale cascade; outputs of the
two backends are compared before timing. The last rows time one forward and
backward pass of the full model under each backend.
"""

import argparse
import time

import numpy as np

from caduf import _backend
from caduf.cascade import Cascade, caduf_loss, desk_config


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_cases(rng, s):
    n, c, h, w, p = 4, 32, 24, 24, 2
    taps = (2 * p + 1) ** 2
    inp = rng.random((n, c, h, w))
    py = rng.uniform(-1, h, (n, 9, h, w))
    px = rng.uniform(-1, w, (n, 9, h, w))
    grad = rng.random((n, c, 9, h, w))
    z = rng.random((n, 3, h, w))
    coef = rng.random((n, taps, h * s, w * s))
    g = rng.random((n, 3, h * s, w * s))
    return [
        ("bilinear_gather", lambda m: m.bilinear_gather(inp, py, px)),
        ("bilinear_scatter", lambda m: m.bilinear_scatter(grad, inp, py, px)),
        ("dynamic_filter_forward", lambda m: m.dynamic_filter_forward(z, coef, p, s)),
        ("dynamic_filter_backward", lambda m: m.dynamic_filter_backward(g, z, coef, p, s)),
    ]


def model_step(s):
    rng = np.random.default_rng(0)
    model = Cascade(desk_config(s), rng)
    for q in model.parameters():
        q.data = q.data + 0.01 * rng.standard_normal(q.shape)
    y = rng.random((2, 3, 24, 24))
    x = rng.random((2, 3, 24 * s, 24 * s))

    def run():
        out = model(y, y)
        loss, _ = caduf_loss(out, y, x, 0.6, 0.3, model.config)
        loss.backward()

    return run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=int, default=2)
    args = ap.parse_args()
    backends = _backend.available()
    if "cython" not in backends:
        print("compiled kernels not built; only the python backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for name, fn in kernel_cases(rng, args.scale):
        outs = [fn(_backend.module(b)) for b in backends]
        outs = [o if isinstance(o, tuple) else (o,) for o in outs]
        for a, b in zip(outs[0], outs[-1]):
            assert np.allclose(a, b, rtol=1e-12, atol=1e-12), f"{name}: backends disagree"
        times = [best_of(lambda b=b: fn(_backend.module(b)), args.repeat) for b in backends]
        ratio = times[0] / times[-1]
        print(f"{name:<26}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times) + f"{ratio:>9.1f}x")
    step = model_step(args.scale)
    times = []
    for b in backends:
        _backend.use(b)
        step()
        times.append(best_of(step, max(1, args.repeat // 2)))
    print(f"{'cascade forward+backward':<26}" + "".join(f"{t * 1e3:>10.1f}ms" for t in times)
          + f"{times[0] / times[-1]:>9.1f}x")


if __name__ == "__main__":
    main()

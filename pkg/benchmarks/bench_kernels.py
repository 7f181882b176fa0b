"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py            # per-kernel timings
    python benchmarks/bench_kernels.py --train    # plus one training epoch per backend
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from ssbandit import kernels


def cases(rng):
    x1 = rng.random((64, 28, 28, 1))
    x2 = rng.random((64, 13, 13, 16))
    a1 = rng.random((64, 26, 26, 16))
    spd = np.linalg.inv(np.eye(128) + 0.01 * (lambda m: m @ m.T)(rng.random((128, 128))))
    spd = (spd + spd.T) / 2
    big = np.eye(784)
    v128, v784 = rng.random(128), rng.random(784) * 1e-3
    return {
        "im2col 64x28x28x1 k3": lambda m: m.im2col(x1, 3),
        "im2col 64x13x13x16 k3": lambda m: m.im2col(x2, 3),
        "col2im 64x13x13x16 k3": (lambda c: lambda m: m.col2im(c, x2.shape, 3))(rng.random((64 * 121, 144))),
        "maxpool fwd 64x26x26x16": lambda m: m.maxpool_forward(a1, 2),
        "maxpool bwd 64x26x26x16": (lambda o: lambda m: m.maxpool_backward(o[0], o[1], a1.shape, 2))(
            kernels.maxpool_forward(a1, 2)
        ),
        "sherman_morrison d=128": lambda m: m.sherman_morrison(spd.copy(), v128),
        "sherman_morrison d=784": lambda m: m.sherman_morrison(big.copy(), v784),
        "quad_form d=784": lambda m: m.quad_form(big, v784),
    }


def bench(repeat):
    rng = np.random.default_rng(0)
    backends = kernels.backends()
    names = sorted(backends)
    print(f"{'kernel':<28}" + "".join(f"{n:>12}" for n in names) + ("   speedup" if len(names) > 1 else ""))
    for label, fn in cases(rng).items():
        times = {}
        for n in names:
            mod = backends[n]
            t = timeit.Timer(lambda: fn(mod))
            number, _ = t.autorange()
            times[n] = min(t.repeat(repeat, number)) / number
        row = f"{label:<28}" + "".join(f"{times[n] * 1e3:>10.3f}ms" for n in names)
        if "cython" in times:
            row += f"   {times['python'] / times['cython']:6.2f}x"
        print(row)


TRAIN_SNIPPET = """
import time, numpy as np
from ssbandit import kernels, nn
rng = np.random.default_rng(0)
spec = nn.NetworkSpec.default((28, 28, 1), 10)
net = nn.RepresentationNet.init(spec, rng)
imgs = rng.random((512, 28, 28, 1)); arms = rng.integers(0, 10, 512); rewards = rng.integers(0, 2, 512)
opt = nn.OptimizerState("sgd", 0.01)
for mu in (None, 0.9):
    t0 = time.perf_counter()
    nn.train(net, opt, imgs, arms, rewards, epochs=1, rng=rng, mu=mu, t=500)
    kind = "bandit only" if mu is None else "with rotations"
    print(f"{kernels.BACKEND:<8} one epoch, 512 images, {kind:<15} {time.perf_counter() - t0:7.2f}s")
"""


def bench_train():
    for backend in ("python", "cython"):
        env = dict(os.environ, SSBANDIT_KERNELS=backend)
        out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, capture_output=True, text=True)
        print(out.stdout.rstrip() or out.stderr.rstrip())


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--train", action="store_true", help="also time a training epoch under each backend")
    args = p.parse_args()
    print(f"active backend: {kernels.BACKEND}")
    bench(args.repeat)
    if args.train:
        bench_train()


if __name__ == "__main__":
    main()

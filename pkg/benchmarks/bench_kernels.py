"""Compare the compiled and numpy conv3x3 kernels.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per (shape, pass, backend) with the best-of-N wall time,
then checks that both backends agree to 1e-12 relative to the output scale.
"""
import argparse
import timeit

import numpy as np

from pfmdose import kernels

SHAPES = [
    # (batch, in channels, out channels, H, W): the conv head at desk scale and a wider case
    (4, 16, 16, 32, 32),
    (4, 16, 1, 32, 32),
    (2, 32, 32, 64, 64),
]


def _time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    backends = {"numpy": kernels.numpy_backend}
    if kernels.compiled_backend is not None:
        backends["cython"] = kernels.compiled_backend
    else:
        print("compiled kernel not built; timing numpy only")

    rng = np.random.default_rng(0)
    print(f"{'shape':<22}{'pass':<10}{'backend':<8}{'ms':>10}")
    for b, cin, cout, h, w in SHAPES:
        x = rng.standard_normal((b, cin, h, w))
        k = rng.standard_normal((cout, cin, 3, 3))
        bias = rng.standard_normal(cout)
        g = rng.standard_normal((b, cout, h, w))
        outs = {}
        for name, mod in backends.items():
            t_fwd = _time(lambda: mod.conv3x3_forward(x, k, bias), args.repeat)
            t_bwd = _time(lambda: mod.conv3x3_backward(x, k, g), args.repeat)
            outs[name] = (mod.conv3x3_forward(x, k, bias), *mod.conv3x3_backward(x, k, g))
            label = f"{b}x{cin}->{cout}x{h}x{w}"
            print(f"{label:<22}{'forward':<10}{name:<8}{1e3 * t_fwd:>10.3f}")
            print(f"{label:<22}{'backward':<10}{name:<8}{1e3 * t_bwd:>10.3f}")
        if len(outs) == 2:
            err = max(float(np.max(np.abs(a - c)) / max(1.0, np.max(np.abs(a)))) for a, c in zip(outs["numpy"], outs["cython"]))
            print(f"max relative |numpy - cython| = {err:.2e}" + ("" if err < 1e-12 else "  MISMATCH"))


if __name__ == "__main__":
    main()

"""Time the numba and pure-numpy kernel paths on representative sizes.

    python benchmarks/bench_kernels.py [--repeat N]

Both paths are imported side by side, so one process compares them; the
CHEMU_DISABLE_NUMBA flag only changes which one the library dispatches to.
"""

import argparse
import timeit

import numpy as np

from chemu import _kernels as K


def _best(fn, repeat):
    fn()  # warm-up (and JIT compile)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5, help="timing repetitions, best is reported (default 5)")
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)

    cases = []
    # CTF synthesis: 200 time samples x 460 rays x 128 bins (one subchannel of the reference scenario slice)
    amp = rng.random((200, 460))
    tau = rng.uniform(0, 2e-6, (200, 460))
    ctf_args = (amp, tau, 2.6e9, -30e6, 60e6 / 128, 128)
    cases.append(("ctf_accumulate 200x460x128", lambda: K._ctf_accumulate_numpy(*ctf_args),
                  (lambda: K._ctf_accumulate_numba(*ctf_args)) if K.HAVE_NUMBA else None))
    # per-bin MIMO multiply-accumulate: 4x4 at N_H = 4096
    s = rng.standard_normal((4, 4096)) + 1j * rng.standard_normal((4, 4096))
    h = rng.standard_normal((4, 4, 4096)) + 1j * rng.standard_normal((4, 4, 4096))
    cases.append(("mimo_mac 4x4x4096", lambda: K._mimo_mac_numpy(s, h),
                  (lambda: K._mimo_mac_numba(s, h)) if K.HAVE_NUMBA else None))

    print(f"library backend: {K.BACKEND}")
    print(f"{'kernel':<30}{'numpy ms':>12}{'numba ms':>12}{'speed-up':>10}")
    for name, np_fn, nb_fn in cases:
        t_np = _best(np_fn, args.repeat) * 1e3
        if nb_fn is None:
            print(f"{name:<30}{t_np:>12.2f}{'n/a':>12}{'':>10}")
            continue
        t_nb = _best(nb_fn, args.repeat) * 1e3
        print(f"{name:<30}{t_np:>12.2f}{t_nb:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()

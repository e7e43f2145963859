"""Hot numeric loops with a numba path and a pure-numpy path.

The numba path is used when numba imports and the environment variable
``CHEMU_DISABLE_NUMBA`` is unset (or ``0``). Both paths compute the same
quantities; results agree to rounding, not bit-for-bit.
"""

import os

import numpy as np

_DISABLE = os.environ.get("CHEMU_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    if _DISABLE:
        raise ImportError("numba disabled by CHEMU_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"

TWO_PI = 2.0 * np.pi


# --------------------------------------------------------------------------
# CTF ray summation
# --------------------------------------------------------------------------

RESEED = 32  # bins between exact phase evaluations in the rotation recurrence


def _ctf_accumulate_numpy(amp, tau, f_c, f0, df, n_freq):
    """H[t, i] = sum_r amp[t, r] * exp(j*2*pi*(f_c - f_i)*tau[t, r]), f_i = f0 + i*df."""
    n_t, n_r = amp.shape
    out = np.zeros((n_t, n_freq), dtype=np.complex128)
    if n_r == 0:
        return out
    step = df * tau
    step -= np.round(step)
    rot = np.exp(-1j * TWO_PI * step)
    for i0 in range(0, n_freq, RESEED):
        cycles = (f_c - (f0 + df * i0)) * tau
        cycles -= np.round(cycles)
        e = amp * np.exp(1j * TWO_PI * cycles)
        for i in range(i0, min(i0 + RESEED, n_freq)):
            out[:, i] = e.sum(axis=1)
            e *= rot
    return out


def _ctf_accumulate_loop(amp, tau, f_c, f0, df, n_freq):
    # rays innermost: the per-ray rotations are independent, so the compiled loop vectorises
    n_t, n_r = amp.shape
    out = np.zeros((n_t, n_freq), dtype=np.complex128)
    e_re = np.empty(n_r)
    e_im = np.empty(n_r)
    rot_re = np.empty(n_r)
    rot_im = np.empty(n_r)
    for t in range(n_t):
        for r in range(n_r):
            s = df * tau[t, r]
            s -= np.floor(s + 0.5)
            rot_re[r] = np.cos(TWO_PI * s)
            rot_im[r] = -np.sin(TWO_PI * s)
        for i0 in range(0, n_freq, RESEED):
            for r in range(n_r):
                c = (f_c - (f0 + df * i0)) * tau[t, r]
                c -= np.floor(c + 0.5)
                e_re[r] = amp[t, r] * np.cos(TWO_PI * c)
                e_im[r] = amp[t, r] * np.sin(TWO_PI * c)
            for i in range(i0, min(i0 + RESEED, n_freq)):
                acc_re = 0.0
                acc_im = 0.0
                for r in range(n_r):
                    a_re = e_re[r]
                    a_im = e_im[r]
                    acc_re += a_re
                    acc_im += a_im
                    e_re[r] = a_re * rot_re[r] - a_im * rot_im[r]
                    e_im[r] = a_re * rot_im[r] + a_im * rot_re[r]
                out[t, i] = complex(acc_re, acc_im)
    return out


# --------------------------------------------------------------------------
# Per-bin MIMO multiply-accumulate
# --------------------------------------------------------------------------

def _mimo_mac_numpy(spec_in, cfr):
    """R[q, m] = sum_p S[p, m] * H[q, p, m]; returns (R, mac_count)."""
    q, p, m = cfr.shape
    return np.einsum("pm,qpm->qm", spec_in, cfr), q * p * m


def _mimo_mac_loop(spec_in, cfr):
    n_q, n_p, n_m = cfr.shape
    out = np.zeros((n_q, n_m), dtype=spec_in.dtype)
    count = 0
    for q in range(n_q):
        for p in range(n_p):
            for m in range(n_m):
                out[q, m] += spec_in[p, m] * cfr[q, p, m]
                count += 1
    return out, count


if HAVE_NUMBA:
    _ctf_accumulate_numba = njit(cache=True)(_ctf_accumulate_loop)
    _mimo_mac_numba = njit(cache=True)(_mimo_mac_loop)


def ctf_accumulate(amp, tau, f_c, f0, df, n_freq):
    amp = np.ascontiguousarray(amp, dtype=np.float64)
    tau = np.ascontiguousarray(tau, dtype=np.float64)
    if amp.shape != tau.shape or amp.ndim != 2:
        raise ValueError(f"amp and tau must share a 2-D shape, got {amp.shape} and {tau.shape}")
    if HAVE_NUMBA:
        return _ctf_accumulate_numba(amp, tau, float(f_c), float(f0), float(df), int(n_freq))
    return _ctf_accumulate_numpy(amp, tau, f_c, f0, df, n_freq)


def mimo_mac(spec_in, cfr):
    if HAVE_NUMBA:
        out, count = _mimo_mac_numba(np.ascontiguousarray(spec_in), np.ascontiguousarray(cfr))
        return out, int(count)
    return _mimo_mac_numpy(spec_in, cfr)

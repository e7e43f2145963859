"""Validation quantities: CTF error, time-varying Doppler PSD and delay PSD."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .gbsm import CtfGrid

DB_FLOOR = -300.0


@dataclass
class ErrorTrace:
    """Per-time reconstruction error for every subchannel, arrays shaped (Q, P, T)."""

    e_mean: np.ndarray
    e_power_db: np.ndarray
    t_axis: np.ndarray


@dataclass
class SpectrumSeries:
    kind: str  # "doppler" or "delay"
    surface: np.ndarray  # (n_times, n_bins), nonnegative
    t_axis: np.ndarray
    bin_axis: np.ndarray  # Hz for Doppler (two-sided), s for delay
    window: tuple = ("rect", 0)

    @property
    def bin_width(self) -> float:
        return float(self.bin_axis[1] - self.bin_axis[0])

    def peak_bins(self) -> np.ndarray:
        return self.bin_axis[np.argmax(self.surface, axis=1)]


def _same_axes(a: CtfGrid, b: CtfGrid):
    if a.data.shape != b.data.shape:
        raise ValueError(f"grid shapes differ: {a.data.shape} vs {b.data.shape}")
    if not (np.array_equal(a.t_axis, b.t_axis) and np.array_equal(a.f_axis, b.f_axis)):
        raise ValueError("grid axes differ")


def to_db(ratio, floor: float = DB_FLOOR):
    ratio = np.asarray(ratio, dtype=float)
    with np.errstate(divide="ignore"):
        return np.maximum(10.0 * np.log10(ratio), floor)


def ctf_error(h: CtfGrid, h_hat: CtfGrid) -> ErrorTrace:
    """Complex mean difference over the band and its mean-square variant in dB.

    ``e_power_db`` divides the per-time mean-square difference by the mean
    power of ``h`` over the whole grid, floored at -300 dB.
    """
    _same_axes(h, h_hat)
    diff = h.data - h_hat.data
    df = h.df
    e_mean = diff.sum(axis=3) * df / (df * len(h.f_axis))
    ref = np.mean(np.abs(h.data) ** 2, axis=(2, 3))
    mse = np.mean(np.abs(diff) ** 2, axis=3)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(ref[..., None] > 0, mse / ref[..., None], np.where(mse > 0, np.inf, 0.0))
    return ErrorTrace(e_mean, to_db(ratio), h.t_axis.copy())


# --------------------------------------------------------------------------
# Doppler
# --------------------------------------------------------------------------

def temporal_acf(h, t_idx: int, lags, n_avg: int = 16) -> np.ndarray:
    """Local lag-product estimate of conj(H(t)) H(t + dt).

    Products are averaged over anchors within +-n_avg samples of ``t_idx``,
    clipped to the series so every lag stays in range.
    """
    h = np.asarray(h)
    lags = np.atleast_1d(np.asarray(lags, dtype=int))
    n = len(h)
    max_lag = int(lags.max()) if lags.size else 0
    if lags.size and lags.min() < 0:
        raise ValueError("lags must be nonnegative")
    if not 0 <= t_idx < n or t_idx + max_lag >= n:
        raise ValueError(f"t index {t_idx} plus lag {max_lag} exceeds the {n}-sample series")
    lo = max(0, t_idx - n_avg)
    hi = min(n - 1 - max_lag, t_idx + n_avg)
    anchors = np.arange(lo, hi + 1)
    base = np.conj(h[anchors])
    out = np.array([np.mean(base * h[anchors + lag]) for lag in lags], dtype=np.complex128)
    out[lags == 0] = np.mean(np.abs(h[anchors]) ** 2)
    return out


def _window(shape: str, length: int) -> np.ndarray:
    shape = shape.lower()
    if shape in ("gaussian", "gauss"):
        k = np.arange(length) - (length - 1) / 2
        return np.exp(-0.5 * (k / (length / 6.0)) ** 2)
    if shape in ("hann", "hanning"):
        return np.hanning(length + 2)[1:-1]
    if shape in ("rect", "rectangular", "boxcar"):
        return np.ones(length)
    raise ValueError(f"unknown window shape {shape!r}")


def doppler_psd(h, t_axis, window: tuple = ("gaussian", 256), n_avg: int = 16, times=None) -> SpectrumSeries:
    """STFT of the local temporal ACF at each analysis time.

    Lags run over -L/2..L/2 (Hermitian extension of the one-sided
    estimate), weighted by the window, and are transformed with an L-point
    DFT; the bin width is 1 / (L t_ch). ``times`` holds sample indices
    (default: every L/4 samples).
    """
    h = np.asarray(h)
    t_axis = np.asarray(t_axis, dtype=float)
    shape, length = window[0], int(window[1])
    n = len(h)
    half = (length - 1) // 2
    if length < 3 or 2 * half + 1 > n:
        raise ValueError(f"degenerate window length {length} for a {n}-sample series")
    dt = float(t_axis[1] - t_axis[0])
    if times is None:
        times = np.arange(0, n, max(1, length // 4))
    times = np.atleast_1d(np.asarray(times, dtype=int))
    w = _window(shape, 2 * half + 1)
    lags = np.arange(half + 1)
    surface = np.empty((len(times), length))
    for row, t in enumerate(times):
        anchor = int(np.clip(t - half // 2, 0, n - 1 - half))
        r = temporal_acf(h, anchor, lags, n_avg)
        seq = np.zeros(length, dtype=np.complex128)
        seq[: half + 1] = r * w[half:]
        seq[length - half:] = np.conj(r[1:][::-1]) * w[:half]
        surface[row] = np.abs(np.fft.fftshift(np.fft.fft(seq)))
    freqs = np.fft.fftshift(np.fft.fftfreq(length, dt))
    return SpectrumSeries("doppler", surface, t_axis[times], freqs, (shape, length))


def zero_frequency_series(ctf: CtfGrid, q: int = 0, p: int = 0) -> np.ndarray:
    """Time series at the bin nearest f = 0."""
    return ctf.data[q, p, :, int(np.argmin(np.abs(ctf.f_axis)))]


# --------------------------------------------------------------------------
# Delay
# --------------------------------------------------------------------------

def _overlap_corr(h: np.ndarray) -> np.ndarray:
    """All-lag correlation along the last axis, averaged over the in-band overlap only."""
    n = h.shape[-1]
    spectrum = np.fft.fft(h, 2 * n, axis=-1)
    raw = np.fft.ifft(np.abs(spectrum) ** 2, axis=-1)[..., :n]
    raw[..., 0] = np.sum(np.abs(h) ** 2, axis=-1)
    return raw / (n - np.arange(n))


def freq_corr(h_row, lags) -> np.ndarray:
    """Mean over f of conj(H(f)) H(f + df), taken over the f where both lie in band."""
    h_row = np.asarray(h_row)
    lags = np.atleast_1d(np.asarray(lags, dtype=int))
    n = len(h_row)
    if lags.size and (lags.min() < 0 or lags.max() >= n):
        raise ValueError(f"frequency lags must lie in [0, {n})")
    out = np.array([np.mean(np.conj(h_row[: n - lag]) * h_row[lag:]) for lag in lags], dtype=np.complex128)
    out[lags == 0] = np.mean(np.abs(h_row) ** 2)
    return out


def frequency_correlation_surface(ctf: CtfGrid, q: int = 0, p: int = 0) -> np.ndarray:
    """R(t, lag) for lags 0..I-1, the quantity ``delay_psd`` transforms."""
    return _overlap_corr(ctf.data[q, p])


def delay_psd(ctf: CtfGrid, q: int = 0, p: int = 0) -> SpectrumSeries:
    """|unitary inverse DFT over frequency lag| of the frequency correlation, per time sample."""
    h = ctf.data[q, p]
    n = h.shape[1]
    if n < 2:
        raise ValueError("need at least two frequency bins")
    surface = np.abs(np.fft.ifft(_overlap_corr(h), axis=1, norm="ortho"))
    delays = np.arange(n) / (n * ctf.df)
    return SpectrumSeries("delay", surface, ctf.t_axis.copy(), delays, ("rect", n))


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

def spectrum_csv(series: SpectrumSeries, out: Optional[io.TextIOBase] = None) -> str:
    """Long-format CSV: t, bin, value."""
    buf = out if out is not None else io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", "bin", "value"])
    for t, row in zip(series.t_axis, series.surface):
        for b, v in zip(series.bin_axis, row):
            writer.writerow([repr(float(t)), repr(float(b)), repr(float(v))])
    return buf.getvalue() if out is None else ""


def error_csv(trace: ErrorTrace, out: Optional[io.TextIOBase] = None) -> str:
    buf = out if out is not None else io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", "q", "p", "e_power_db", "e_mean_re", "e_mean_im"])
    n_q, n_p, _ = trace.e_power_db.shape
    for q in range(n_q):
        for p in range(n_p):
            for t, db, e in zip(trace.t_axis, trace.e_power_db[q, p], trace.e_mean[q, p]):
                writer.writerow([repr(float(t)), q, p, repr(float(db)), repr(float(e.real)), repr(float(e.imag))])
    return buf.getvalue() if out is None else ""

"""Frequency-domain emulation engine: overlap-add block convolution with a per-block CFR."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from ._kernels import mimo_mac
from .errors import ConfigError
from .gbsm import CtfGrid
from .subspace import ProjectionPackage

ChannelSource = Union[CtfGrid, ProjectionPackage, Sequence[ProjectionPackage]]


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class EngineConfig:
    """Block geometry of the engine.

    ``n_a`` is floor(tau_max / t_s); a relative slack of 1e-9 keeps exact
    multiples such as 64 * t_s from rounding down to 63.
    ``out_of_band`` decides what happens to DFT bins outside the channel
    band: ``"error"`` rejects the configuration, ``"zero"`` leaves them empty.
    """

    n_fft: int
    tau_max: float
    t_s: float
    n_tx: int = 1
    n_rx: int = 1
    t0: float = 0.0
    single_precision: bool = False
    out_of_band: str = "error"
    strict_pow2: bool = True

    def __post_init__(self):
        if self.t_s <= 0 or not math.isfinite(self.t_s):
            raise ConfigError("t_s must be positive", key="t_s")
        if self.tau_max < 0:
            raise ConfigError("tau_max must be nonnegative", key="tau_max")
        if self.strict_pow2 and not _is_pow2(self.n_fft):
            raise ConfigError(f"n_fft={self.n_fft} is not a power of two", key="n_fft")
        if self.n_a < 1:
            raise ConfigError(f"tau_max/t_s gives N_a={self.n_a}; need at least one tail sample", key="tau_max")
        if self.n_s < 1:
            raise ConfigError(f"N_a={self.n_a} leaves no room in an N_H={self.n_fft} block", key="n_fft")
        if self.n_tx < 1 or self.n_rx < 1:
            raise ConfigError("antenna counts must be positive", key="n_tx" if self.n_tx < 1 else "n_rx")
        if self.out_of_band not in ("error", "zero"):
            raise ConfigError("out_of_band must be 'error' or 'zero'", key="out_of_band")

    @property
    def n_a(self) -> int:
        return int(math.floor(self.tau_max / self.t_s * (1 + 1e-9)))

    @property
    def n_s(self) -> int:
        return self.n_fft - self.n_a

    @property
    def t_ch(self) -> float:
        return self.n_s * self.t_s

    @property
    def dtype(self):
        return np.complex64 if self.single_precision else np.complex128

    def bin_frequencies(self) -> np.ndarray:
        """Baseband frequency of DFT bin m, wrapped to [-1/(2 t_s), 1/(2 t_s))."""
        return np.fft.fftfreq(self.n_fft, self.t_s)


@dataclass
class SignalBlock:
    samples: np.ndarray
    index: int
    antenna: int = 0
    partial: bool = False


@dataclass
class EngineState:
    tails: np.ndarray  # (Q, N_a)
    index: int = 0
    t: float = 0.0

    @classmethod
    def initial(cls, config: EngineConfig) -> "EngineState":
        return cls(np.zeros((config.n_rx, config.n_a), dtype=config.dtype), 0, config.t0)


@dataclass
class BlockStats:
    index: int
    forward_transforms: int
    inverse_transforms: int
    transform_size: int
    macs: int

    @property
    def transforms(self) -> int:
        return self.forward_transforms + self.inverse_transforms


# --------------------------------------------------------------------------
# CFR snapshot
# --------------------------------------------------------------------------

def _source_frequency_axis(source) -> np.ndarray:
    if isinstance(source, (CtfGrid, ProjectionPackage)):
        return source.f_axis
    return source[0].f_axis


def _source_at(source, t: float) -> np.ndarray:
    """(Q, P, I) on the source frequency axis at time t."""
    if isinstance(source, ProjectionPackage):
        return source.reconstruct_all(t)[:, :, 0, :]
    if isinstance(source, CtfGrid):
        ta = source.t_axis
        tol = 1e-9 * max(1.0, abs(ta[-1]))
        if t < ta[0] - tol or t > ta[-1] + tol:
            raise ValueError(f"t={t} outside CTF grid [{ta[0]}, {ta[-1]}]")
        if len(ta) == 1:
            return source.data[:, :, 0, :]
        j = int(np.clip(np.searchsorted(ta, t, side="right") - 1, 0, len(ta) - 2))
        w = float(np.clip((t - ta[j]) / (ta[j + 1] - ta[j]), 0.0, 1.0))
        if w == 0.0:
            return source.data[:, :, j, :]
        if w == 1.0:
            return source.data[:, :, j + 1, :]
        return (1 - w) * source.data[:, :, j, :] + w * source.data[:, :, j + 1, :]
    for pkg in source:
        if pkg.covers(t) and t < pkg.t_end:
            return _source_at(pkg, t)
    for pkg in source:
        if pkg.covers(t):
            return _source_at(pkg, t)
    raise ValueError(f"t={t} not covered by any package window")


def cfr_snapshot(source: ChannelSource, t: float, config: EngineConfig) -> np.ndarray:
    """CFR at time t on the engine's N_H DFT bins, shape (Q, P, N_H).

    Source samples are linearly interpolated onto the bin frequencies. The
    source band is treated as one period of width I*df, so bins between
    the last knot and +B/2 interpolate toward the first knot.
    """
    f_src = _source_frequency_axis(source)
    h_src = _source_at(source, t)
    if h_src.shape[:2] != (config.n_rx, config.n_tx):
        raise ValueError(f"source is {h_src.shape[0]}x{h_src.shape[1]}, engine expects "
                         f"{config.n_rx}x{config.n_tx}")
    bins = config.bin_frequencies()
    if len(f_src) == 1:
        out = np.broadcast_to(h_src, h_src.shape[:2] + (config.n_fft,)).astype(np.complex128)
        return out.astype(config.dtype)
    df = f_src[1] - f_src[0]
    period = df * len(f_src)
    lo, hi = f_src[0], f_src[0] + period
    tol = 1e-9 * period
    inside = (bins >= lo - tol) & (bins < hi - tol)
    if not np.all(inside) and config.out_of_band == "error":
        raise ValueError(f"engine sample rate {1 / config.t_s:g} Hz exceeds channel bandwidth {period:g} Hz")
    out = np.zeros(h_src.shape[:2] + (config.n_fft,), dtype=np.complex128)
    x = bins[inside]
    for q in range(h_src.shape[0]):
        for p in range(h_src.shape[1]):
            row = h_src[q, p]
            out[q, p, inside] = (np.interp(x, f_src, row.real, period=period)
                                 + 1j * np.interp(x, f_src, row.imag, period=period))
    return out.astype(config.dtype, copy=False)


# --------------------------------------------------------------------------
# Block processing
# --------------------------------------------------------------------------

def _stack_inputs(inputs, config: EngineConfig, index: int) -> np.ndarray:
    if isinstance(inputs, np.ndarray):
        block = inputs
    else:
        idx = {b.index for b in inputs}
        if idx != {index}:
            raise ValueError(f"input block indices {sorted(idx)} do not match state index {index}")
        block = np.stack([b.samples for b in sorted(inputs, key=lambda b: b.antenna)])
    block = np.asarray(block)
    if block.shape != (config.n_tx, config.n_s):
        raise ValueError(f"input block shape {block.shape}, expected {(config.n_tx, config.n_s)}")
    return block


def process_block(state: EngineState, inputs, cfr: np.ndarray, config: EngineConfig):
    """One overlap-add step.

    ``inputs`` is either P SignalBlocks or a (P, N_s) array. Returns the
    Q output blocks, the advanced state, and the operation counts.
    """
    x = _stack_inputs(inputs, config, state.index)
    if cfr.shape != (config.n_rx, config.n_tx, config.n_fft):
        raise ValueError(f"CFR shape {cfr.shape}, expected {(config.n_rx, config.n_tx, config.n_fft)}")
    dtype = config.dtype
    padded = np.zeros((config.n_tx, config.n_fft), dtype=dtype)
    padded[:, : config.n_s] = x
    spectrum = np.fft.fft(padded, axis=1).astype(dtype, copy=False)
    mixed, macs = mimo_mac(spectrum, np.asarray(cfr, dtype=dtype))
    r = np.fft.ifft(mixed, axis=1).astype(dtype, copy=False)
    acc = r.copy()
    acc[:, : config.n_a] += state.tails
    out = acc[:, : config.n_s]
    new_state = EngineState(acc[:, config.n_s:].copy(), state.index + 1, config.t0 + (state.index + 1) * config.t_ch)
    stats = BlockStats(state.index, config.n_tx, config.n_rx, config.n_fft, macs)
    blocks = [SignalBlock(out[q].copy(), state.index, q) for q in range(config.n_rx)]
    return blocks, new_state, stats


def split_blocks(inputs: np.ndarray, config: EngineConfig) -> list[list[SignalBlock]]:
    """Cut (P, L) streams into lists of P SignalBlocks; the last block is zero-padded and flagged."""
    inputs = np.atleast_2d(np.asarray(inputs))
    n_tx, length = inputs.shape
    n_blocks = max(1, math.ceil(length / config.n_s))
    out = []
    for i in range(n_blocks):
        chunk = inputs[:, i * config.n_s:(i + 1) * config.n_s]
        partial = chunk.shape[1] < config.n_s
        if partial:
            chunk = np.concatenate([chunk, np.zeros((n_tx, config.n_s - chunk.shape[1]), dtype=chunk.dtype)], axis=1)
        out.append([SignalBlock(chunk[p].copy(), i, p, partial) for p in range(n_tx)])
    return out


@dataclass
class StreamResult:
    outputs: np.ndarray  # (Q, L + N_a)
    stats: list[BlockStats] = field(default_factory=list)


def run_stream(config: EngineConfig, source: ChannelSource, inputs) -> StreamResult:
    """Stream (P, L) inputs through the channel; output length is L + N_a.

    The CFR is evaluated at t0 + i*T_ch for block i and held for the block.
    ``source`` may also be a callable t -> (Q, P, N_H) CFR.
    """
    inputs = np.atleast_2d(np.asarray(inputs))
    if inputs.shape[0] != config.n_tx:
        raise ValueError(f"{inputs.shape[0]} input streams for {config.n_tx} transmit antennas")
    length = inputs.shape[1]
    state = EngineState.initial(config)
    pieces, stats = [], []
    for blocks in split_blocks(inputs, config):
        cfr = source(state.t) if callable(source) else cfr_snapshot(source, state.t, config)
        out, state, st = process_block(state, blocks, cfr, config)
        pieces.append(np.stack([b.samples for b in out]))
        stats.append(st)
    pieces.append(state.tails)
    full = np.concatenate(pieces, axis=1)
    return StreamResult(full[:, : length + config.n_a], stats)


def stats_csv(stats: Sequence[BlockStats], out: Optional[io.TextIOBase] = None) -> str:
    buf = out if out is not None else io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["block", "forward_transforms", "inverse_transforms", "transform_size", "macs"])
    for s in stats:
        writer.writerow([s.index, s.forward_transforms, s.inverse_transforms, s.transform_size, s.macs])
    return buf.getvalue() if out is None else ""

import numpy as np
import pytest

from chemu.errors import ConfigError
from chemu.engine import (
    EngineConfig, EngineState, SignalBlock, cfr_snapshot, process_block, run_stream, split_blocks, stats_csv,
)
from chemu.gbsm import CtfGrid
from chemu.subspace import ProjectionPackage

T_S = 1 / 60e6


def _cfg(n_fft=64, n_a=8, p=1, q=1, **kw):
    return EngineConfig(n_fft, n_a * T_S, T_S, p, q, **kw)


def _dft_grid(cfr_bins, t_axis=(0.0, 1.0)):
    """A CtfGrid whose frequency axis is exactly the engine's DFT bins (sorted); cfr_bins is (Q, P, N)."""
    n = cfr_bins.shape[-1]
    freqs = np.fft.fftfreq(n, T_S)
    order = np.argsort(freqs)
    data = np.repeat(cfr_bins[:, :, None, order], len(t_axis), axis=2)
    return CtfGrid(data, np.asarray(t_axis), freqs[order], 2.6e9, np.ones(cfr_bins.shape[:2]))


def _taps_to_cfr(taps, n):
    """taps (Q, P, L) time-domain impulse responses -> (Q, P, n) DFT."""
    padded = np.zeros(taps.shape[:2] + (n,), dtype=complex)
    padded[..., : taps.shape[2]] = taps
    return np.fft.fft(padded, axis=2)


def _direct_convolution(taps, x):
    q, p, _ = taps.shape
    out_len = x.shape[1] + taps.shape[2] - 1
    out = np.zeros((q, out_len), dtype=complex)
    for qi in range(q):
        for pi in range(p):
            out[qi] += np.convolve(x[pi], taps[qi, pi])
    return out


def _random_taps(rng, q, p, n_a):
    return (rng.standard_normal((q, p, n_a + 1)) + 1j * rng.standard_normal((q, p, n_a + 1))) / np.sqrt(n_a)


# ---------------------------------------------------------------- config

class TestEngineConfig:
    def test_derived_sizes(self):
        cfg = EngineConfig(1024, 64 * T_S, T_S, 2, 2)
        assert (cfg.n_a, cfg.n_s) == (64, 960)
        assert cfg.n_s + cfg.n_a == cfg.n_fft
        assert cfg.t_ch == 960 * T_S

    def test_floor(self):
        assert EngineConfig(64, 8.9 * T_S, T_S).n_a == 8

    @pytest.mark.parametrize("kw,key", [
        (dict(n_fft=100, tau_max=8 * T_S), "n_fft"),
        (dict(n_fft=64, tau_max=0.5 * T_S), "tau_max"),
        (dict(n_fft=64, tau_max=64 * T_S), "n_fft"),
    ])
    def test_invalid(self, kw, key):
        with pytest.raises(ConfigError) as info:
            EngineConfig(t_s=T_S, **kw)
        assert info.value.key == key

    def test_non_power_of_two_allowed_when_relaxed(self):
        assert EngineConfig(100, 8 * T_S, T_S, strict_pow2=False).n_s == 92

    def test_state_initialised_to_zero(self):
        st = EngineState.initial(_cfg(q=3))
        assert st.tails.shape == (3, 8) and not np.any(st.tails) and st.index == 0


# ---------------------------------------------------------------- cfr_snapshot

class TestCfrSnapshot:
    def test_constant_channel_package(self):
        cfg = _cfg()
        coeffs = np.zeros((1, 1, 1, 4), dtype=complex)
        coeffs[0, 0, 0, :] = 1
        pkg = ProjectionPackage(coeffs, [[0.0, 0.0]], 0.0, 1.0, 10, np.linspace(-30e6, 15e6, 4), 2.6e9, [[1.0]])
        h = cfr_snapshot(pkg, 0.37, cfg)
        assert h.shape == (1, 1, 64) and np.array_equal(h, np.ones((1, 1, 64)))

    @pytest.mark.parametrize("d", [0, 3, 8])
    def test_single_tap_pattern(self, d):
        cfg = _cfg()
        theta = 0.7
        m = np.arange(64)
        bins = np.exp(1j * theta) * np.exp(-2j * np.pi * m * d / 64)
        h = cfr_snapshot(_dft_grid(bins[None, None]), 0.0, cfg)
        assert np.allclose(h[0, 0], bins, atol=1e-12)
        taps = np.fft.ifft(h[0, 0])
        expected = np.zeros(64, dtype=complex)
        expected[d] = np.exp(1j * theta)
        assert np.allclose(taps, expected, atol=1e-12)

    def test_grid_row_exact_at_knots(self, rng):
        cfg = _cfg(n_fft=32)
        f = np.fft.fftshift(np.fft.fftfreq(32, T_S))
        data = rng.standard_normal((1, 1, 3, 32)) + 1j * rng.standard_normal((1, 1, 3, 32))
        grid = CtfGrid(data, [0.0, 1e-3, 2e-3], f, 2.6e9, [[1.0]])
        h = cfr_snapshot(grid, 1e-3, cfg)
        assert np.array_equal(h[0, 0], np.fft.ifftshift(data[0, 0, 1]))

    def test_linear_interpolation_in_time_and_frequency(self):
        cfg = _cfg(n_fft=64)
        f = np.fft.fftshift(np.fft.fftfreq(32, T_S))  # half as many knots as DFT bins
        row0 = np.exp(1j * np.linspace(0, 3, 32))
        grid = CtfGrid(np.stack([row0, 3 * row0])[None, None], [0.0, 1e-3], f, 2.6e9, [[1.0]])
        h = cfr_snapshot(grid, 0.25e-3, cfg)[0, 0]
        bins = np.fft.fftfreq(64, T_S)
        ref = 1.5 * (np.interp(bins, f, row0.real, period=60e6) + 1j * np.interp(bins, f, row0.imag, period=60e6))
        assert np.allclose(h, ref, atol=1e-14)

    def test_out_of_range_time(self):
        grid = _dft_grid(np.ones((1, 1, 64)))
        with pytest.raises(ValueError):
            cfr_snapshot(grid, 1.5, _cfg())

    def test_bandwidth_exceeded(self):
        f = np.linspace(-10e6, 10e6, 16, endpoint=False)
        grid = CtfGrid(np.ones((1, 1, 2, 16)), [0.0, 1.0], f, 2.6e9, [[1.0]])
        with pytest.raises(ValueError):
            cfr_snapshot(grid, 0.0, _cfg())
        h = cfr_snapshot(grid, 0.0, _cfg(out_of_band="zero"))
        inside = np.abs(np.fft.fftfreq(64, T_S)) < 10e6
        assert np.all(h[0, 0, inside] == 1) and not np.any(h[0, 0, ~inside])


# ---------------------------------------------------------------- process_block

class TestProcessBlock:
    def test_identity_mimo_round_trip(self, rng):
        cfg = _cfg(p=2, q=2)
        h = np.zeros((2, 2, 64), dtype=complex)
        h[0, 0] = h[1, 1] = 1
        x = rng.standard_normal((2, 56)) + 1j * rng.standard_normal((2, 56))
        blocks = [SignalBlock(x[p], 0, p) for p in range(2)]
        out, state, _ = process_block(EngineState.initial(cfg), blocks, h, cfg)
        for q in range(2):
            assert np.max(np.abs(out[q].samples - x[q])) <= 1e-12
        assert np.max(np.abs(state.tails)) <= 1e-12
        assert state.index == 1 and state.t == pytest.approx(cfg.t_ch)

    def test_zero_channel(self, rng):
        cfg = _cfg()
        out, state, _ = process_block(EngineState.initial(cfg), rng.standard_normal((1, 56)) + 0j,
                                      np.zeros((1, 1, 64)), cfg)
        assert not np.any(out[0].samples) and not np.any(state.tails)

    @pytest.mark.parametrize("d", [5, 8])
    def test_delayed_impulse_crosses_boundary(self, d):
        cfg = EngineConfig(16, 8 * T_S, T_S)  # N_s = 8, so d > N_s - 1 spills into the next block
        h = np.exp(-2j * np.pi * np.arange(16) * d / 16)[None, None]
        x = np.zeros(24, dtype=complex)
        x[0] = 1
        y = run_stream(cfg, lambda t: h, x[None]).outputs[0]
        expected = np.zeros(len(y))
        expected[d] = 1
        assert np.allclose(y, expected, atol=1e-13)
        assert (d > cfg.n_s - 1) == (d >= 8)

    def test_mismatched_block_index(self):
        cfg = _cfg()
        with pytest.raises(ValueError):
            process_block(EngineState.initial(cfg), [SignalBlock(np.zeros(56), 3, 0)], np.ones((1, 1, 64)), cfg)

    def test_bad_shapes(self):
        cfg = _cfg()
        st = EngineState.initial(cfg)
        with pytest.raises(ValueError):
            process_block(st, np.zeros((1, 55)), np.ones((1, 1, 64)), cfg)
        with pytest.raises(ValueError):
            process_block(st, np.zeros((1, 56)), np.ones((1, 2, 64)), cfg)

    def test_operation_counts(self):
        cfg = _cfg(p=3, q=2)
        _, _, stats = process_block(EngineState.initial(cfg), np.zeros((3, 56)), np.ones((2, 3, 64)), cfg)
        assert stats.forward_transforms == 3 and stats.inverse_transforms == 2
        assert stats.transforms == 5 and stats.transform_size == 64
        assert stats.macs == 3 * 2 * 64


# ---------------------------------------------------------------- run_stream

class TestRunStream:
    def test_static_channel_equals_linear_convolution(self, rng):
        n_a = 16
        cfg = _cfg(n_fft=128, n_a=n_a, p=2, q=3)
        taps = _random_taps(rng, 3, 2, n_a)
        x = rng.standard_normal((2, 1000)) + 1j * rng.standard_normal((2, 1000))
        grid = _dft_grid(_taps_to_cfr(taps, 128))
        y = run_stream(cfg, grid, x).outputs
        ref = _direct_convolution(taps, x)
        assert y.shape == (3, 1000 + n_a) == ref.shape
        assert np.linalg.norm(y - ref) <= 1e-10 * np.linalg.norm(ref)

    def test_block_size_invariance(self, rng):
        n_a = 8
        taps = _random_taps(rng, 1, 1, n_a)
        x = rng.standard_normal((1, 700)) + 0j
        cfg_a = EngineConfig(32, n_a * T_S, T_S)  # N_s = 24
        cfg_b = EngineConfig(56, n_a * T_S, T_S, strict_pow2=False)  # N_s = 48
        y_a = run_stream(cfg_a, lambda t: _taps_to_cfr(taps, 32), x).outputs
        y_b = run_stream(cfg_b, lambda t: _taps_to_cfr(taps, 56), x).outputs
        assert np.linalg.norm(y_a - y_b) <= 1e-10 * np.linalg.norm(y_a)

    def test_zero_input(self):
        grid = _dft_grid(np.ones((2, 2, 64)))
        y = run_stream(_cfg(p=2, q=2), grid, np.zeros((2, 300), dtype=complex)).outputs
        assert y.shape == (2, 308) and not np.any(y)

    def test_partial_block_flagged(self):
        blocks = split_blocks(np.ones((2, 130)), _cfg())
        assert len(blocks) == 3
        assert [b[0].partial for b in blocks] == [False, False, True]
        assert np.array_equal(blocks[-1][1].samples[:18], np.ones(18)) and not np.any(blocks[-1][1].samples[18:])

    def test_linearity(self, rng):
        cfg = _cfg(p=2, q=2)
        grid = _dft_grid(_taps_to_cfr(_random_taps(rng, 2, 2, 8), 64), t_axis=(0.0, 1e-3, 2e-3))
        grid.data[:, :, 1] *= 1j
        x1 = rng.standard_normal((2, 500)) + 1j * rng.standard_normal((2, 500))
        x2 = rng.standard_normal((2, 500)) + 1j * rng.standard_normal((2, 500))
        a, b = 0.4 - 1.1j, -2.0
        lhs = run_stream(cfg, grid, a * x1 + b * x2).outputs
        rhs = a * run_stream(cfg, grid, x1).outputs + b * run_stream(cfg, grid, x2).outputs
        assert np.max(np.abs(lhs - rhs)) <= 1e-10 * np.abs(lhs).max()

    def test_causality(self, rng):
        cfg = _cfg()
        grid = _dft_grid(_taps_to_cfr(_random_taps(rng, 1, 1, 8), 64), t_axis=(0.0, 1e-3))
        x = rng.standard_normal((1, 400)) + 0j
        full = run_stream(cfg, grid, x).outputs[0]
        for cut in (1, 57, 200, 399):
            prefix = run_stream(cfg, grid, x[:, :cut]).outputs[0]
            assert np.allclose(prefix[:cut], full[:cut], rtol=0, atol=1e-12)

    def test_energy_bound(self, rng):
        cfg = _cfg(p=2, q=2)
        h = _taps_to_cfr(_random_taps(rng, 2, 2, 8), 64)
        x = rng.standard_normal((2, 600)) + 1j * rng.standard_normal((2, 600))
        y = run_stream(cfg, _dft_grid(h), x).outputs
        sigma = max(np.linalg.svd(h[:, :, m], compute_uv=False)[0] for m in range(64))
        assert np.linalg.norm(y) <= sigma * np.linalg.norm(x) + 1e-9

    def test_deterministic(self, rng):
        cfg = _cfg(p=2, q=2)
        grid = _dft_grid(_taps_to_cfr(_random_taps(rng, 2, 2, 8), 64))
        x = rng.standard_normal((2, 777)) + 1j * rng.standard_normal((2, 777))
        assert run_stream(cfg, grid, x).outputs.tobytes() == run_stream(cfg, grid, x).outputs.tobytes()

    def test_channel_refreshed_per_block(self):
        cfg = _cfg()
        seen = []

        def source(t):
            seen.append(t)
            return np.ones((1, 1, 64))

        run_stream(cfg, source, np.ones((1, 200)))
        assert np.allclose(seen, [0.0, cfg.t_ch, 2 * cfg.t_ch, 3 * cfg.t_ch])

    def test_single_precision_path(self, rng):
        taps = _random_taps(rng, 1, 1, 8)
        grid = _dft_grid(_taps_to_cfr(taps, 64))
        x = rng.standard_normal((1, 300)) + 0j
        y32 = run_stream(_cfg(single_precision=True), grid, x).outputs
        y64 = run_stream(_cfg(), grid, x).outputs
        assert y32.dtype == np.complex64
        assert np.linalg.norm(y32 - y64) <= 1e-5 * np.linalg.norm(y64)

    def test_stats_channel(self):
        res = run_stream(_cfg(p=2, q=3), lambda t: np.ones((3, 2, 64)), np.ones((2, 120)))
        text = stats_csv(res.stats)
        lines = text.strip().splitlines()
        assert lines[0] == "block,forward_transforms,inverse_transforms,transform_size,macs"
        assert lines[1:] == ["0,2,3,64,384", "1,2,3,64,384", "2,2,3,64,384"]

import numpy as np
import pytest

from chemu import iofmt
from chemu.errors import NearDependentBasis
from chemu.gbsm import SPEED_OF_LIGHT, AntennaArray, CtfGrid, make_cluster, simulate_clusters
from chemu.metrics import ctf_error
from chemu.subspace import (
    ChirpBasis, ProjectionPackage, build_basis, chirp_matrix, derive_chirp_ranges, grid_chirps, gram_schmidt,
    nested_basis, nested_order, project, project_grid, reconstruct, reconstruct_grid, window_slices,
)

from conftest import F_C, reference_config, static_config

V_OVER_LAMBDA = 10.0 * F_C / SPEED_OF_LIGHT


def _random_complex(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def _lstsq_oracle(psi, h):
    # normal equations (Psi^H Psi) a = Psi^H h
    gram = psi.conj().T @ psi
    return np.linalg.solve(gram, psi.conj().T @ h)


# ---------------------------------------------------------------- ranges and basis

class TestChirpRanges:
    def test_no_motion_collapses(self):
        cfg = static_config(rx_array=AntennaArray(1, origin=(0, 0, 0)))
        c = make_cluster(0, [[0, 30, 0], [0, 20, 0]], [[40, 5, 3], [10, -20, 0]])
        assert derive_chirp_ranges(cfg, [c]) == ((0.0, 0.0), (0.0, 0.0))

    def test_single_ray_straight_ahead(self):
        cfg = static_config(rx_array=AntennaArray(1, origin=(0, 0, 0), velocity=(10, 0, 0)))
        c = make_cluster(0, [[0, 30, 0]], [[300, 0, 0]])
        (a_lo, a_hi), (b_lo, b_hi) = derive_chirp_ranges(cfg, [c])
        assert a_lo == a_hi == pytest.approx(-V_OVER_LAMBDA, rel=1e-14)
        assert b_lo == b_hi == 0.0

    def test_reference_scenario_bounded_by_speed(self):
        cfg = reference_config(birth_rate=0.0, death_rate=0.0, t_total=0.01)
        clusters, _ = simulate_clusters(cfg)
        (a_lo, a_hi), _ = derive_chirp_ranges(cfg, clusters)
        assert -V_OVER_LAMBDA <= a_lo < a_hi <= V_OVER_LAMBDA
        assert V_OVER_LAMBDA == pytest.approx(86.7267, abs=1e-4)

    def test_empty_ray_set(self):
        cfg = static_config(rx_array=AntennaArray(1, velocity=(10, 0, 0)))
        with pytest.raises(ValueError):
            derive_chirp_ranges(cfg, [make_cluster(0, [[0, 30, 0]], [[40, 0, 0]], birth_time=1.0)])

    def test_margin_is_five_percent(self):
        cfg = static_config(rx_array=AntennaArray(1, origin=(0, 0, 0), velocity=(10, 0, 0)))
        c = make_cluster(0, [[0, 30, 0]] * 2, [[0, 50, 0], [50, 50, 0]])
        (a_lo, a_hi), (b_lo, b_hi) = derive_chirp_ranges(cfg, [c])
        raw = (-V_OVER_LAMBDA / np.sqrt(2), 0.0)
        width = raw[1] - raw[0]
        assert a_lo == pytest.approx(raw[0] - 0.05 * width, rel=1e-12)
        assert a_hi == pytest.approx(raw[1] + 0.05 * width, rel=1e-12)
        assert b_lo < b_hi


class TestBuildBasis:
    def test_single_chirp_at_midpoints(self):
        basis = build_basis(1, (-10, 30), (2, 4), 0.0, 0.1, 100)
        assert basis.params() == [(10.0, 3.0)]

    def test_degenerate_box_is_constant(self):
        basis = build_basis(1, (0, 0), (0, 0), 0.5, 0.1, 50)
        assert np.array_equal(basis.matrix(), np.ones((50, 1), dtype=complex))

    def test_reference_grid_enumeration(self):
        chirps = grid_chirps(30, (-87, 87), (0, 10))
        alphas = np.unique(chirps[:, 0])
        betas = np.unique(chirps[:, 1])
        assert len(alphas) == 6 and len(betas) == 5
        assert tuple(chirps[0]) == (-87.0, 0.0) and tuple(chirps[-1]) == (87.0, 10.0)
        assert np.allclose(np.diff(alphas), 174 / 5) and np.allclose(np.diff(betas), 2.5)

    def test_truncation(self):
        chirps = grid_chirps(7, (0, 1), (0, 1))
        assert len(chirps) == 7 and len({tuple(c) for c in chirps}) == 7

    def test_rejects_k_above_samples(self):
        with pytest.raises(ValueError):
            build_basis(11, (0, 1), (0, 1), 0.0, 0.01, 10)

    def test_rejects_duplicate_chirps(self):
        with pytest.raises(ValueError):
            ChirpBasis(np.array([[1.0, 2.0], [1.0, 2.0]]), 0.0, 1.0, 10)

    def test_chirp_phase_window_relative(self):
        t = np.array([1.0, 1.25])
        m = chirp_matrix([[2.0, 8.0]], t, t0=1.0)
        assert m[0, 0] == 1
        # s = 0.25: 2*0.25 + 4*0.0625 = 0.75 cycles
        assert m[1, 0] == pytest.approx(np.exp(2j * np.pi * 0.75), abs=1e-15)

    def test_nested_order_is_permutation_with_spread_prefix(self):
        chirps = grid_chirps(30, (-87, 87), (0, 10))
        order = nested_order(chirps)
        assert sorted(order.tolist()) == list(range(30))
        corners = {tuple(c) for c in chirps[order[:4]]}
        assert corners == {(-87.0, 0.0), (87.0, 10.0), (-87.0, 10.0), (87.0, 0.0)}


# ---------------------------------------------------------------- Gram-Schmidt and projection

class TestGramSchmidt:
    def test_single_column(self, rng):
        psi = _random_complex(rng, 20, 1)
        phi, g = gram_schmidt(psi)
        assert np.array_equal(g, np.eye(1)) and np.array_equal(phi, psi)

    def test_orthogonal_columns_give_identity(self):
        n = 16
        psi = np.fft.fft(np.eye(n))[:, :6]
        phi, g = gram_schmidt(psi)
        assert np.allclose(g, np.eye(6), atol=1e-14)
        assert np.allclose(phi, psi, atol=1e-13)

    @pytest.mark.parametrize("reorth", [True, False])
    def test_random_orthogonality(self, rng, reorth):
        psi = _random_complex(rng, 256, 8)
        phi, g = gram_schmidt(psi, reorthogonalize=reorth)
        norms = np.linalg.norm(phi, axis=0)
        gram = np.abs(phi.conj().T @ phi) / np.outer(norms, norms)
        np.fill_diagonal(gram, 0)
        assert gram.max() <= 1e-8
        assert np.max(np.abs(psi @ g - phi)) <= 1e-10
        assert np.allclose(np.diag(g), 1) and np.allclose(np.tril(g, -1), 0)

    def test_dependent_column(self, rng):
        psi = _random_complex(rng, 32, 3)
        psi = np.column_stack([psi, psi[:, 0] * (1 + 1e-13) + 0.5 * psi[:, 1]])
        with pytest.raises(NearDependentBasis) as info:
            gram_schmidt(psi)
        assert info.value.column == 3

    def test_too_many_columns(self, rng):
        with pytest.raises(NearDependentBasis):
            gram_schmidt(_random_complex(rng, 4, 5))

    def test_second_pass_repairs_chirp_grid(self):
        # a dense chirp grid over a short window: one classical pass loses orthogonality
        basis = build_basis(30, (-86, 86), (0, 60), 0.0, 0.08, 80)
        for reorth, ok in ((True, True), (False, False)):
            phi, _ = gram_schmidt(basis.matrix(), reorthogonalize=reorth)
            norms = np.linalg.norm(phi, axis=0)
            gram = np.abs(phi.conj().T @ phi) / np.outer(norms, norms)
            np.fill_diagonal(gram, 0)
            assert (gram.max() <= 1e-8) == ok


class TestProject:
    def test_member_chirp(self):
        basis = build_basis(6, (-50, 50), (0, 20), 0.0, 0.2, 200)
        psi = basis.matrix()
        phi, g = gram_schmidt(psi)
        for k in range(6):
            a = project(psi[:, k], phi, g)
            expected = np.zeros((6, 1))
            expected[k] = 1
            assert np.allclose(a, expected, atol=1e-10)

    def test_zero(self, rng):
        phi, g = gram_schmidt(_random_complex(rng, 40, 5))
        assert not np.any(project(np.zeros((40, 3)), phi, g))

    def test_least_squares_oracle(self, rng):
        psi = _random_complex(rng, 512, 30)
        h = _random_complex(rng, 512, 4)
        phi, g = gram_schmidt(psi)
        a = project(h, phi, g)
        ref = _lstsq_oracle(psi, h)
        assert np.linalg.norm(a - ref) <= 1e-8 * np.linalg.norm(ref)

    def test_dimension_mismatch(self, rng):
        phi, g = gram_schmidt(_random_complex(rng, 40, 5))
        with pytest.raises(ValueError):
            project(np.zeros(39), phi, g)

    def test_idempotent(self, rng):
        psi = _random_complex(rng, 100, 10)
        phi, g = gram_schmidt(psi)
        a = project(_random_complex(rng, 100, 3), phi, g)
        assert np.allclose(project(psi @ a, phi, g), a, rtol=0, atol=1e-10 * np.abs(a).max())

    def test_residual_orthogonal(self, rng):
        psi = _random_complex(rng, 128, 12)
        h = _random_complex(rng, 128, 5)
        phi, g = gram_schmidt(psi)
        resid = h - psi @ project(h, phi, g)
        inner = np.abs(psi.conj().T @ resid)
        bound = 1e-8 * np.outer(np.linalg.norm(psi, axis=0), np.linalg.norm(h, axis=0))
        assert np.all(inner <= bound)

    def test_linear(self, rng):
        psi = _random_complex(rng, 64, 8)
        phi, g = gram_schmidt(psi)
        h1, h2 = _random_complex(rng, 64, 2), _random_complex(rng, 64, 2)
        al, be = 0.3 - 2j, 1.7
        lhs = project(al * h1 + be * h2, phi, g)
        rhs = al * project(h1, phi, g) + be * project(h2, phi, g)
        assert np.max(np.abs(lhs - rhs)) <= 1e-10 * np.abs(lhs).max()


# ---------------------------------------------------------------- packages

def _package(coeffs, chirps, t0=0.0, tw=0.1, n=100):
    coeffs = np.asarray(coeffs, dtype=complex)
    return ProjectionPackage(coeffs, chirps, t0, tw, n, np.linspace(-1, 1, coeffs.shape[3]), F_C,
                             np.ones(coeffs.shape[:2]))


class TestReconstruct:
    chirps = np.array([[5.0, 0.0], [-20.0, 40.0], [12.0, -8.0]])

    def test_unit_column_gives_chirp(self):
        coeffs = np.zeros((1, 1, 3, 2), dtype=complex)
        coeffs[0, 0, 1, :] = 1
        pkg = _package(coeffs, self.chirps, t0=0.3)
        t = np.array([0.3, 0.3137, 0.39])
        expected = chirp_matrix(self.chirps[1:2], t, 0.3)[:, 0]
        assert np.array_equal(pkg.reconstruct(0, 0, t, 0), expected)
        assert reconstruct(pkg, 0, 0, 0.3137, 1) == expected[1]

    def test_zero(self):
        pkg = _package(np.zeros((1, 1, 3, 2)), self.chirps)
        assert pkg.reconstruct(0, 0, 0.05, 0) == 0

    def test_grid_points_match_matrix_product(self, rng):
        coeffs = _random_complex(rng, 2, 1, 3, 4)
        pkg = _package(coeffs, self.chirps)
        tg = pkg.time_grid()
        psi = chirp_matrix(self.chirps, tg, 0.0)
        for q in range(2):
            assert np.max(np.abs(pkg.reconstruct(q, 0, tg) - psi @ coeffs[q, 0])) <= 1e-12

    def test_outside_window(self):
        pkg = _package(np.zeros((1, 1, 3, 2)), self.chirps, t0=1.0, tw=0.1)
        with pytest.raises(ValueError):
            pkg.reconstruct(0, 0, 0.99, 0)
        with pytest.raises(ValueError):
            pkg.reconstruct(0, 0, 1.2, 0)


def _random_grid(rng, q=1, p=1, n_t=16, n_f=4, t_ch=1e-3):
    data = _random_complex(rng, q, p, n_t, n_f)
    return CtfGrid(data, np.arange(n_t) * t_ch, np.linspace(-1e6, 1e6, n_f, endpoint=False), F_C, np.ones((q, p)))


class TestProjectGrid:
    def test_complete_basis_is_exact(self, rng):
        grid = _random_grid(rng, 2, 2, n_t=16)
        pk = project_grid(grid, 16, alpha_range=(-500, 437.5), beta_range=(0, 0),
                          basis_fn=lambda k, a, b: np.column_stack([np.linspace(*a, k), np.zeros(k)]))
        assert len(pk) == 1
        rec = reconstruct_grid(pk, grid)
        assert np.max(np.abs(rec.data - grid.data)) <= 1e-9

    def test_complete_basis_default_grid(self, rng):
        grid = _random_grid(rng, 1, 1, n_t=9)
        pk = project_grid(grid, 9, alpha_range=(-400, 400), beta_range=(-4e4, 4e4))
        rec = reconstruct_grid(pk, grid)
        assert np.max(np.abs(rec.data - grid.data)) <= 1e-9

    def test_two_windows_are_local(self, rng):
        grid = _random_grid(rng, 1, 2, n_t=40)
        pk = project_grid(grid, 5, t_window=0.02, alpha_range=(-100, 100), beta_range=(0, 500))
        assert [p.t0 for p in pk] == [0.0, 0.02] and all(p.n_time_samples == 20 for p in pk)
        for w, p in enumerate(pk):
            alone = CtfGrid(grid.data[:, :, 20 * w:20 * (w + 1)], grid.t_axis[20 * w:20 * (w + 1)], grid.f_axis,
                            F_C, grid.normalization)
            solo = project_grid(alone, 5, alpha_range=(-100, 100), beta_range=(0, 500))[0]
            assert np.allclose(solo.coeffs, p.coeffs, rtol=0, atol=1e-12)
            assert np.allclose(p.reconstruct(0, 1, p.time_grid()),
                               solo.reconstruct(0, 1, solo.time_grid()), atol=1e-12)

    def test_needs_ranges_without_doppler_box(self, rng):
        with pytest.raises(ValueError):
            project_grid(_random_grid(rng), 4)

    def test_propagates_near_dependence(self, rng):
        grid = _random_grid(rng, n_t=64)
        with pytest.raises(NearDependentBasis):
            project_grid(grid, 30, alpha_range=(-1, 1), beta_range=(0, 1))

    def test_window_slices_cut_at_events(self):
        sl = window_slices(100, 40, breakpoints=[10, 55])
        assert [(s.start, s.stop) for s in sl] == [(0, 10), (10, 40), (40, 55), (55, 80), (80, 100)]

    def test_event_split_windows_and_short_windows(self, rng):
        grid = _random_grid(rng, n_t=60)
        grid.events = np.array([3, 30])
        pk = project_grid(grid, 8, t_window=0.02, alpha_range=(-150, 150), beta_range=(0, 1000))
        assert [p.n_time_samples for p in pk] == [3, 17, 10, 10, 20]
        assert pk[0].k == 3 and all(p.k == 8 for p in pk[1:])
        rec = reconstruct_grid(pk, grid)
        assert np.max(np.abs(rec.data[..., :3, :] - grid.data[..., :3, :])) <= 1e-9

    def test_nested_bases_monotone_error(self, reference_grid):
        sub = CtfGrid(reference_grid.data[:, :, :400], reference_grid.t_axis[:400], reference_grid.f_axis, reference_grid.f_c,
                      reference_grid.normalization, reference_grid.doppler_box[:400], reference_grid.tau_hint,
                      reference_grid.events[reference_grid.events < 400])
        totals = []
        for k in (5, 10, 20, 30):
            rec = reconstruct_grid(project_grid(sub, k, 0.08, basis_fn=nested_basis(30)), sub)
            totals.append(np.sum(np.abs(rec.data - sub.data) ** 2))
        assert all(b <= a * (1 + 1e-9) for a, b in zip(totals, totals[1:]))

    def test_reference_scenario_gate(self, reference_grid):
        pk = project_grid(reference_grid, 30, 0.08)
        err = ctf_error(reference_grid, reconstruct_grid(pk, reference_grid))
        assert err.e_power_db.max() <= -40.0

    def test_compression_accounting(self, reference_grid):
        pk = project_grid(reference_grid, 30, 0.08)
        assert all(p.k < p.n_time_samples for p in pk if p.n_time_samples > 30)
        raw_payload = reference_grid.data.size * 16
        pkg_payload = sum(p.coeffs.size for p in pk) * 16
        assert pkg_payload == sum(p.k * len(p.f_axis) for p in pk) * 2 * 4 * 16
        assert pkg_payload < raw_payload
        assert len(iofmt.dumps_package(pk)) < len(iofmt.dumps_ctf(reference_grid))

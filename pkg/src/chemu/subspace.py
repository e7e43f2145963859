"""Chirp-subspace compression of CTF time series and reconstruction from packages."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import NearDependentBasis
from .gbsm import CtfGrid, ScenarioConfig, chirp_ranges

PIVOT_TOL = 1e-10


class ChirpParam(NamedTuple):
    alpha: float  # initial frequency, Hz
    beta: float  # chirp rate, Hz/s


def chirp_matrix(chirps, t, t0: float = 0.0) -> np.ndarray:
    """Evaluate exp(j 2 pi (alpha s + beta s^2 / 2)), s = t - t0, for every chirp; shape (len(t), K).

    Time is measured from the window start, so alpha is each chirp's
    frequency at ``t0``.
    """
    chirps = np.atleast_2d(np.asarray(chirps, dtype=float))
    t = np.asarray(t, dtype=float).reshape(-1, 1) - t0
    cycles = chirps[:, 0] * t + 0.5 * chirps[:, 1] * t * t
    cycles -= np.round(cycles)
    return np.exp(2j * np.pi * cycles)


@dataclass(frozen=True)
class ChirpBasis:
    chirps: np.ndarray  # (K, 2) rows of (alpha, beta)
    t0: float
    t_window: float
    n_time_samples: int

    def __post_init__(self):
        chirps = np.atleast_2d(np.asarray(self.chirps, dtype=float))
        if chirps.ndim != 2 or chirps.shape[1] != 2 or not np.all(np.isfinite(chirps)):
            raise ValueError("chirps must be a finite (K, 2) array")
        if len({(a, b) for a, b in chirps.tolist()}) != len(chirps):
            raise ValueError("chirp (alpha, beta) pairs must be distinct")
        if len(chirps) > self.n_time_samples:
            raise ValueError(f"K={len(chirps)} exceeds the {self.n_time_samples} time samples of the window")
        object.__setattr__(self, "chirps", chirps)

    @property
    def k(self) -> int:
        return len(self.chirps)

    @property
    def dt(self) -> float:
        return self.t_window / self.n_time_samples

    def params(self) -> list[ChirpParam]:
        return [ChirpParam(a, b) for a, b in self.chirps.tolist()]

    def time_grid(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_time_samples) * self.dt

    def matrix(self) -> np.ndarray:
        return chirp_matrix(self.chirps, self.time_grid(), self.t0)


def derive_chirp_ranges(config: ScenarioConfig, clusters, t_ref: float = 0.0):
    """Alpha and beta boxes covering the linearised Doppler of the rays alive at ``t_ref``, widened 5% per side."""
    return chirp_ranges(config, clusters, t_ref=t_ref, margin=0.05)


def _levels(lo, hi, n):
    if n == 1:
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo, hi, n)


def grid_chirps(k: int, alpha_range, beta_range) -> np.ndarray:
    """K (alpha, beta) pairs on a near-square uniform grid, alpha-major, endpoints included."""
    if k < 1:
        raise ValueError("K must be >= 1")
    n_alpha = math.ceil(math.sqrt(k))
    n_beta = math.ceil(k / n_alpha)
    alphas = _levels(*alpha_range, n_alpha)
    betas = _levels(*beta_range, n_beta)
    pairs = np.array([(a, b) for a in alphas for b in betas], dtype=float)
    return pairs[:k]


def build_basis(k: int, alpha_range, beta_range, t0: float, t_window: float, n_time_samples: int) -> ChirpBasis:
    if k > n_time_samples:
        raise ValueError(f"K={k} exceeds the {n_time_samples} time samples of the window")
    return ChirpBasis(grid_chirps(k, alpha_range, beta_range), float(t0), float(t_window), int(n_time_samples))


def nested_order(chirps) -> np.ndarray:
    """Permutation of the chirp rows such that every prefix is spread over the box.

    Greedy farthest-point ordering in range-normalised (alpha, beta)
    coordinates, starting at the first row. Prefixes of the result give
    nested bases.
    """
    chirps = np.atleast_2d(np.asarray(chirps, dtype=float))
    span = np.ptp(chirps, axis=0)
    pts = (chirps - chirps.min(axis=0)) / np.where(span > 0, span, 1.0)
    order = [0]
    dist = np.linalg.norm(pts - pts[0], axis=1)
    for _ in range(1, len(pts)):
        nxt = int(np.argmax(dist))
        order.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return np.asarray(order)


def nested_basis(k_full: int) -> Callable:
    """``basis_fn`` whose K-chirp basis is the K-prefix of one K_full grid in nested order."""

    def make(k, alpha_range, beta_range):
        full = grid_chirps(k_full, alpha_range, beta_range)
        return full[nested_order(full)][:k]

    return make


def _inner(u, v):
    """<u, v> = sum_n u[n] conj(v[n]), column-wise over matching trailing axes."""
    return np.sum(u * np.conj(v), axis=0)


def gram_schmidt(psi: np.ndarray, reorthogonalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Classical, unnormalised Gram-Schmidt.

    Returns ``(phi, g)`` with ``phi = psi @ g``, the columns of ``phi``
    pairwise orthogonal and ``g`` the inverse of the unit upper-triangular
    coefficient matrix. Raises :class:`NearDependentBasis` when a pivot norm
    drops below ``1e-10`` times the first column's norm.

    With ``reorthogonalize`` each column gets a second classical pass against
    the already accepted columns and the two coefficient sets are summed.
    Chirp grids over short windows are badly conditioned; a single pass then
    leaves the columns far from orthogonal.
    """
    psi = np.asarray(psi, dtype=np.complex128)
    if psi.ndim != 2:
        raise ValueError("psi must be a 2-D (n, K) matrix")
    n, k = psi.shape
    if k > n:
        raise NearDependentBasis(f"{k} columns cannot be independent in {n} dimensions", column=n)
    phi = np.empty_like(psi)
    coef = np.eye(k, dtype=np.complex128)
    ref = np.linalg.norm(psi[:, 0])
    if ref == 0:
        raise NearDependentBasis("first basis column is zero", column=0, ratio=0.0)
    energy = np.empty(k)
    passes = 2 if reorthogonalize else 1
    for col in range(k):
        g = psi[:, col].copy()
        if col:
            for _ in range(passes):
                c = _inner(g[:, None], phi[:, :col]) / energy[:col]
                coef[:col, col] += c
                g -= phi[:, :col] @ c
        norm = np.linalg.norm(g)
        if not norm > PIVOT_TOL * ref:
            raise NearDependentBasis(f"basis column {col} is numerically dependent on earlier columns "
                                     f"(pivot ratio {norm / ref:.3e})", column=col, ratio=norm / ref)
        phi[:, col] = g
        energy[col] = norm * norm
    return phi, _unit_upper_inverse(coef)


def _unit_upper_inverse(u: np.ndarray) -> np.ndarray:
    # back substitution on U G = I, one column at a time
    k = u.shape[0]
    g = np.zeros_like(u)
    for col in range(k):
        g[col, col] = 1.0
        for row in range(col - 1, -1, -1):
            g[row, col] = -u[row, row + 1:col + 1] @ g[row + 1:col + 1, col]
    return g


def project(h: np.ndarray, phi: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Coefficients A (K x I) of each column of h in the original chirp basis."""
    h = np.asarray(h, dtype=np.complex128)
    if h.ndim == 1:
        h = h[:, None]
    if h.shape[0] != phi.shape[0]:
        raise ValueError(f"h has {h.shape[0]} time samples, basis has {phi.shape[0]}")
    if g.shape != (phi.shape[1], phi.shape[1]):
        raise ValueError("G must be K x K")
    energy = np.sum(np.abs(phi) ** 2, axis=0)
    x = (phi.conj().T @ h) / energy[:, None]
    return g @ x


@dataclass
class ProjectionPackage:
    """Compressed channel for one time window.

    ``coeffs[q, p]`` is the K x I coefficient matrix of subchannel (q, p);
    the chirp table, window and frequency axis are shared.
    """

    coeffs: np.ndarray
    chirps: np.ndarray
    t0: float
    t_window: float
    n_time_samples: int
    f_axis: np.ndarray
    f_c: float
    normalization: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.complex128)
        self.chirps = np.atleast_2d(np.asarray(self.chirps, dtype=float))
        self.f_axis = np.asarray(self.f_axis, dtype=float)
        self.n_time_samples = int(self.n_time_samples)
        self.t0 = float(self.t0)
        self.t_window = float(self.t_window)
        self.f_c = float(self.f_c)
        if self.coeffs.ndim != 4 or self.coeffs.shape[2:] != (len(self.chirps), len(self.f_axis)):
            raise ValueError(f"coeffs shape {self.coeffs.shape} inconsistent with K={len(self.chirps)}, "
                             f"I={len(self.f_axis)}")
        if not np.all(np.isfinite(self.coeffs.view(float))):
            raise ValueError("coefficients must be finite")
        self.normalization = np.asarray(self.normalization, dtype=float).reshape(self.coeffs.shape[:2])

    @property
    def k(self) -> int:
        return len(self.chirps)

    @property
    def t_end(self) -> float:
        return self.t0 + self.t_window

    def covers(self, t) -> bool:
        tol = 1e-9 * max(1.0, abs(self.t_end))
        return bool(np.all((np.asarray(t) >= self.t0 - tol) & (np.asarray(t) <= self.t_end + tol)))

    def time_grid(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_time_samples) * (self.t_window / self.n_time_samples)

    def reconstruct(self, q: int, p: int, t, f_bin=None):
        """sum_k a_k(f) b_k(t) at arbitrary times inside the window; shape (len(t), I) or (len(t),)."""
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        if not self.covers(t_arr):
            raise ValueError(f"t outside package window [{self.t0}, {self.t_end}]")
        a = self.coeffs[q, p] if f_bin is None else self.coeffs[q, p][:, f_bin]
        out = chirp_matrix(self.chirps, t_arr, self.t0) @ a
        return out[0] if np.ndim(t) == 0 else out

    def reconstruct_all(self, t) -> np.ndarray:
        """Every subchannel at times t; shape (Q, P, len(t), I)."""
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        if not self.covers(t_arr):
            raise ValueError(f"t outside package window [{self.t0}, {self.t_end}]")
        psi = chirp_matrix(self.chirps, t_arr, self.t0)
        return np.einsum("nk,qpki->qpni", psi, self.coeffs)


def reconstruct(package: ProjectionPackage, q: int, p: int, t, f_bin: int):
    return package.reconstruct(q, p, t, f_bin)


def window_slices(n_times: int, n_per_window: int, breakpoints=()) -> list[slice]:
    """Windows of n_per_window samples on a regular grid, additionally cut at every breakpoint."""
    if n_per_window < 1:
        raise ValueError("window must hold at least one sample")
    cuts = set(range(0, n_times, n_per_window)) | {n_times}
    cuts |= {int(b) for b in breakpoints if 0 < int(b) < n_times}
    cuts = sorted(cuts)
    return [slice(a, b) for a, b in zip(cuts[:-1], cuts[1:])]


def _short_window_basis(make, k: int, n: int, t0: float, t_window: float, reorthogonalize: bool):
    """Largest basis of at most min(K, n) chirps that passes Gram-Schmidt."""
    for k_eff in range(min(k, n), 0, -1):
        basis = ChirpBasis(make(k_eff), t0, t_window, n)
        try:
            return basis, gram_schmidt(basis.matrix(), reorthogonalize)
        except NearDependentBasis:
            continue
    raise NearDependentBasis(f"no usable chirp basis for a {n}-sample window")


def project_grid(ctf: CtfGrid, k: int, t_window: Optional[float] = None, alpha_range=None, beta_range=None,
                 basis_fn: Optional[Callable] = None, reorthogonalize: bool = True,
                 split_at_events: bool = True) -> list[ProjectionPackage]:
    """Compress every subchannel of a CTF grid, one package per time window.

    Unless both ranges are given, each window takes its chirp box from the
    Doppler snapshot recorded at its first sample (the first sample with any
    ray, if that one is empty). ``basis_fn(k, alpha_range, beta_range)``
    may replace the uniform grid placement, e.g. to build nested bases.

    With ``split_at_events`` the windows are also cut where clusters are
    born or die, so that no window straddles a jump. A window cut shorter
    than T_w uses the largest basis of at most min(K, n) chirps that passes
    Gram-Schmidt; full-length windows raise NearDependentBasis instead.
    """
    n_t = len(ctf.t_axis)
    t_ch = ctf.t_ch if n_t > 1 else 1.0
    n_per = n_t if t_window is None else max(1, int(round(t_window / t_ch)))
    fixed = alpha_range is not None and beta_range is not None
    make_chirps = basis_fn if basis_fn is not None else grid_chirps
    breaks = ctf.events if split_at_events else ()
    packages = []
    for sl in window_slices(n_t, n_per, breaks):
        n = sl.stop - sl.start
        t0 = float(ctf.t_axis[sl.start])
        if fixed:
            ranges = (tuple(alpha_range), tuple(beta_range))
        else:
            ranges = _snapshot_box(ctf, sl)
            if ranges is None:
                raise ValueError("no Doppler box recorded for this window; pass alpha_range and beta_range")
            ranges = _open_box(ranges, k, n * t_ch)
        if n >= n_per:
            basis = ChirpBasis(make_chirps(k, *ranges), t0, n * t_ch, n)
            phi, g = gram_schmidt(basis.matrix(), reorthogonalize)
        else:
            basis, (phi, g) = _short_window_basis(lambda kk: make_chirps(kk, *ranges), k, n, t0, n * t_ch,
                                                  reorthogonalize)
        coeffs = np.empty(ctf.data.shape[:2] + (basis.k, ctf.data.shape[3]), dtype=np.complex128)
        for q in range(ctf.n_rx):
            for p in range(ctf.n_tx):
                coeffs[q, p] = project(ctf.data[q, p, sl], phi, g)
        packages.append(ProjectionPackage(coeffs, basis.chirps, basis.t0, basis.t_window, n, ctf.f_axis, ctf.f_c,
                                          ctf.normalization))
    return packages


def _open_box(ranges, k: int, t_window: float):
    """Widen a zero-width range (e.g. a single ray) into a grid through its value.

    The grid levels along that axis are then 1/T_w apart in alpha and
    4/T_w^2 apart in beta, about the resolution of a T_w-long window, and
    the original value is one of them.
    """
    n_alpha = math.ceil(math.sqrt(k))
    counts = (n_alpha, math.ceil(k / n_alpha))
    out = []
    for (lo, hi), n, step in zip(ranges, counts, (1.0 / t_window, 4.0 / t_window ** 2)):
        if n > 1 and hi - lo < 1e-6 * step:
            below = (n - 1) // 2
            lo, hi = lo - below * step, lo + (n - 1 - below) * step
        out.append((lo, hi))
    return tuple(out)


def _snapshot_box(ctf: CtfGrid, sl: slice):
    if ctf.doppler_box is None:
        return None
    for i in range(sl.start, sl.stop):
        box = ctf.chirp_box(slice(i, i + 1))
        if box is not None:
            return box
    return None


def reconstruct_grid(packages: Sequence[ProjectionPackage], like: Optional[CtfGrid] = None) -> CtfGrid:
    """Evaluate packages on their own sample grids and stitch the windows into a CtfGrid."""
    packages = sorted(packages, key=lambda pk: pk.t0)
    if not packages:
        raise ValueError("no packages")
    parts, times = [], []
    for pk in packages:
        tg = pk.time_grid()
        parts.append(pk.reconstruct_all(tg))
        times.append(tg)
    t_axis = np.concatenate(times)
    if like is not None:
        if len(like.t_axis) != len(t_axis) or not np.allclose(like.t_axis, t_axis, rtol=0, atol=1e-9):
            raise ValueError("packages do not cover the reference grid's time axis")
        t_axis = like.t_axis
    first = packages[0]
    return CtfGrid(np.concatenate(parts, axis=2), t_axis, first.f_axis, first.f_c, first.normalization,
                   tau_hint=like.tau_hint if like is not None else math.nan,
                   events=like.events if like is not None else None)

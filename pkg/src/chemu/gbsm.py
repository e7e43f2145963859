"""Twin-cluster non-stationary GBSM: cluster process, ray geometry and CTF grids."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .errors import ConfigError, GeometryError

SPEED_OF_LIGHT = 299_792_458.0

Vec3 = tuple[float, float, float]


def _vec3(v, key) -> Vec3:
    arr = np.asarray(v, dtype=float).reshape(-1)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise ConfigError(f"{key} must be a finite 3-vector, got {v!r}", key=key)
    return tuple(float(x) for x in arr)


def spherical_to_cartesian(d, elevation, azimuth):
    """(d, elevation, azimuth) -> d * (cos E cos A, cos E sin A, sin E)."""
    ce = np.cos(elevation)
    return np.stack([d * ce * np.cos(azimuth), d * ce * np.sin(azimuth), d * np.sin(elevation)], axis=-1)


@dataclass(frozen=True)
class AntennaArray:
    """Uniform linear array.

    ``velocity`` applies from t=0; ``velocity_changes`` holds later
    ``(t_start, (vx, vy, vz))`` segments of a piecewise-constant trajectory.
    ``spacing=None`` is resolved to half a carrier wavelength by
    :class:`ScenarioConfig`.
    """

    n_elements: int = 1
    spacing: Optional[float] = None
    axis: Vec3 = (0.0, 1.0, 0.0)
    origin: Vec3 = (0.0, 0.0, 0.0)
    velocity: Vec3 = (0.0, 0.0, 0.0)
    velocity_changes: tuple = ()

    def __post_init__(self):
        if int(self.n_elements) != self.n_elements or self.n_elements < 1:
            raise ConfigError(f"n_elements must be a positive integer, got {self.n_elements}", key="n_elements")
        object.__setattr__(self, "n_elements", int(self.n_elements))
        if self.spacing is not None and not (math.isfinite(self.spacing) and self.spacing >= 0):
            raise ConfigError(f"spacing must be >= 0, got {self.spacing}", key="spacing")
        axis = _vec3(self.axis, "axis")
        if abs(math.sqrt(sum(a * a for a in axis)) - 1.0) > 1e-12:
            raise ConfigError(f"axis must be a unit vector, got {axis}", key="axis")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "origin", _vec3(self.origin, "origin"))
        object.__setattr__(self, "velocity", _vec3(self.velocity, "velocity"))
        changes = []
        last = 0.0
        for t_start, v in self.velocity_changes:
            t_start = float(t_start)
            if not t_start > last:
                raise ConfigError("velocity_changes must have increasing start times > 0", key="velocity_changes")
            changes.append((t_start, _vec3(v, "velocity_changes")))
            last = t_start
        object.__setattr__(self, "velocity_changes", tuple(changes))

    @property
    def is_static(self) -> bool:
        return not any(self.velocity) and all(not any(v) for _, v in self.velocity_changes)

    @property
    def has_constant_velocity(self) -> bool:
        return all(v == self.velocity for _, v in self.velocity_changes)

    def velocity_at(self, t) -> np.ndarray:
        """Velocity in force at time(s) t; shape ``t.shape + (3,)``."""
        t = np.asarray(t, dtype=float)
        out = np.broadcast_to(np.asarray(self.velocity), t.shape + (3,)).copy()
        for start, v in self.velocity_changes:
            out[t >= start] = v
        return out

    def element_offsets(self) -> np.ndarray:
        """(n_elements, 3) offsets from element 1 at t=0."""
        k = np.arange(self.n_elements, dtype=float)[:, None]
        return k * (self.spacing or 0.0) * np.asarray(self.axis)[None, :]

    def displacement(self, t) -> np.ndarray:
        """Integrated velocity from 0 to t; shape ``t.shape + (3,)``."""
        t = np.asarray(t, dtype=float)
        knots = [0.0] + [c[0] for c in self.velocity_changes]
        vels = [self.velocity] + [c[1] for c in self.velocity_changes]
        out = np.zeros(t.shape + (3,))
        for i, (start, v) in enumerate(zip(knots, vels)):
            stop = knots[i + 1] if i + 1 < len(knots) else np.inf
            span = np.clip(t, start, stop) - start
            out += span[..., None] * np.asarray(v)
        return out

    def positions(self, t) -> np.ndarray:
        """Element positions, shape ``t.shape + (n_elements, 3)``."""
        base = np.asarray(self.origin) + self.displacement(t)
        return base[..., None, :] + self.element_offsets()


@dataclass(frozen=True)
class ScenarioConfig:
    f_c: float
    bandwidth: float
    n_freq: int = 128
    t_total: float = 2.0
    t_ch: float = 1e-3
    tx_array: AntennaArray = field(default_factory=lambda: AntennaArray(4, None, (0.0, 1.0, 0.0), (0.0, 0.0, 35.0)))
    rx_array: AntennaArray = field(
        default_factory=lambda: AntennaArray(2, None, (0.0, 1.0, 0.0), (10.0, 0.0, 1.5), (10.0, 0.0, 0.0))
    )
    n_clusters: int = 23
    rays_per_cluster: int = 20
    birth_rate: float = 4.0
    death_rate: float = 0.2
    r_tau: float = 3.0
    ds: float = 100e-9
    gamma: float = 0.0
    cluster_dist_mean: float = 50.0
    angle_mean: tuple = (0.0, 0.0)
    angle_std: tuple = (0.2, 0.8)
    ellipsoid_stds: Vec3 = (5.0, 5.0, 5.0)
    tau_link_mean: float = 50e-9
    cluster_speed_std: float = 0.0
    d_corr: float = 30.0
    seed: int = 0
    k_basis: int = 30
    t_window: Optional[float] = None
    n_fft: Optional[int] = None
    tau_max: Optional[float] = None

    def __post_init__(self):
        def bad(key, msg):
            raise ConfigError(f"{key}: {msg}", key=key)

        for key in ("f_c", "bandwidth", "t_total", "t_ch", "r_tau", "ds", "gamma", "birth_rate", "death_rate",
                    "cluster_dist_mean", "tau_link_mean", "cluster_speed_std"):
            val = getattr(self, key)
            if not isinstance(val, (int, float)) or math.isnan(val):
                bad(key, f"must be a number, got {val!r}")
        if not self.f_c > 0:
            bad("f_c", "must be > 0")
        if not (self.bandwidth > 0 and self.bandwidth < 2 * self.f_c):
            bad("bandwidth", "must satisfy 0 < B < 2*f_c")
        if not (self.t_ch > 0 and math.isfinite(self.t_ch)):
            bad("t_ch", "must be > 0")
        if not (self.t_total > 0 and math.isfinite(self.t_total)):
            bad("t_total", "must be > 0")
        for key in ("n_freq", "n_clusters", "rays_per_cluster", "seed", "k_basis"):
            val = getattr(self, key)
            if int(val) != val:
                bad(key, f"must be an integer, got {val!r}")
            object.__setattr__(self, key, int(val))
        if self.n_freq < 2:
            bad("n_freq", "must be >= 2")
        if not self.r_tau > 1:
            bad("r_tau", "must be > 1")
        if not self.ds > 0:
            bad("ds", "must be > 0")
        if not self.birth_rate >= 0:
            bad("birth_rate", "must be >= 0")
        if not self.death_rate > 0 and not (self.death_rate == 0 and self.birth_rate == 0):
            # lambda_R = 0 is tolerated only for the frozen (no-dynamics) process
            bad("death_rate", "must be > 0")
        if self.n_clusters < 1:
            bad("n_clusters", "must be >= 1")
        if self.rays_per_cluster < 1:
            bad("rays_per_cluster", "must be >= 1")
        if not self.cluster_dist_mean > 0:
            bad("cluster_dist_mean", "must be > 0")
        if not self.tau_link_mean >= 0:
            bad("tau_link_mean", "must be >= 0")
        if not self.cluster_speed_std >= 0:
            bad("cluster_speed_std", "must be >= 0")
        if not self.d_corr > 0:
            bad("d_corr", "must be > 0")
        if self.k_basis < 1:
            bad("k_basis", "must be >= 1")
        angle_mean = tuple(float(x) for x in self.angle_mean)
        angle_std = tuple(float(x) for x in self.angle_std)
        if len(angle_mean) != 2 or len(angle_std) != 2:
            bad("angle_mean", "angle_mean and angle_std are (elevation, azimuth) pairs")
        if min(angle_std) < 0:
            bad("angle_std", "must be >= 0")
        object.__setattr__(self, "angle_mean", angle_mean)
        object.__setattr__(self, "angle_std", angle_std)
        stds = _vec3(self.ellipsoid_stds, "ellipsoid_stds")
        if min(stds) < 0:
            bad("ellipsoid_stds", "must be >= 0")
        object.__setattr__(self, "ellipsoid_stds", stds)
        if self.t_window is not None and not self.t_window > 0:
            bad("t_window", "must be > 0")
        if self.n_fft is not None and (self.n_fft < 2 or self.n_fft & (self.n_fft - 1)):
            bad("n_fft", "must be a power of two")
        if self.tau_max is not None and not self.tau_max > 0:
            bad("tau_max", "must be > 0")
        half_wave = self.wavelength / 2
        for key in ("tx_array", "rx_array"):
            arr = getattr(self, key)
            if arr.spacing is None:
                object.__setattr__(self, key, dataclasses.replace(arr, spacing=half_wave))

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.f_c

    @property
    def n_times(self) -> int:
        return int(math.ceil(round(self.t_total / self.t_ch, 9)))

    def t_axis(self) -> np.ndarray:
        return np.arange(self.n_times) * self.t_ch

    def f_axis(self) -> np.ndarray:
        """I bins covering [-B/2, B/2) with spacing B/I; contains f=0 for even I."""
        return -self.bandwidth / 2 + np.arange(self.n_freq) * (self.bandwidth / self.n_freq)


@dataclass(frozen=True)
class ClusterSide:
    """One side of a twin cluster.

    ``center`` is the cluster centre extrapolated to t=0, so scatterer m sits at
    ``center + offsets[m] + velocity * t`` for any t.
    """

    spherical: Vec3
    center: np.ndarray
    offsets: np.ndarray
    velocity: np.ndarray

    def scatterers(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        base = self.center + t[..., None] * self.velocity
        return base[..., None, :] + self.offsets


@dataclass(frozen=True)
class ClusterPair:
    id: int
    tx: ClusterSide
    rx: ClusterSide
    tau_link: float
    birth_time: float
    death_time: float = math.inf
    # antenna pairs farther than this (along either array) from the reference pair do not see the cluster
    visibility_extent: float = math.inf

    def __post_init__(self):
        if self.tx.offsets.shape != self.rx.offsets.shape or self.tx.offsets.ndim != 2:
            raise ValueError("Tx and Rx sides need the same number of scatterers")
        if not self.birth_time < self.death_time:
            raise ValueError(f"birth_time {self.birth_time} must precede death_time {self.death_time}")

    @property
    def n_rays(self) -> int:
        return self.tx.offsets.shape[0]

    def alive(self, t) -> np.ndarray | bool:
        t = np.asarray(t)
        return (self.birth_time <= t) & (t < self.death_time)

    def visible(self, q: int, p: int, config: ScenarioConfig) -> bool:
        reach = max(p * config.tx_array.spacing, q * config.rx_array.spacing)
        return reach <= self.visibility_extent


def make_cluster(id, tx_scatterers, rx_scatterers, tau_link=0.0, birth_time=0.0, death_time=math.inf,
                 tx_velocity=(0.0, 0.0, 0.0), rx_velocity=(0.0, 0.0, 0.0)) -> ClusterPair:
    """Deterministic cluster from explicit t=0 scatterer coordinates (one row per ray)."""
    tx_s = np.atleast_2d(np.asarray(tx_scatterers, dtype=float))
    rx_s = np.atleast_2d(np.asarray(rx_scatterers, dtype=float))

    def side(s, v):
        center = s.mean(axis=0)
        return ClusterSide((float(np.linalg.norm(center)), 0.0, 0.0), center, s - center, np.asarray(v, float))

    return ClusterPair(int(id), side(tx_s, tx_velocity), side(rx_s, rx_velocity), float(tau_link),
                       float(birth_time), float(death_time))


# --------------------------------------------------------------------------
# Cluster process
# --------------------------------------------------------------------------

def place_cluster(config: ScenarioConfig, birth_time: float, rng: np.random.Generator, cluster_id: int = 0) -> ClusterPair:
    """Draw a new twin cluster born at ``birth_time``.

    Each side gets an exponential centre distance, Gaussian elevation and
    azimuth around the matching array's element-1 position at birth, an
    ellipsoid Gaussian scatterer cloud and a Gaussian drift velocity.
    """
    if not config.cluster_dist_mean > 0:
        raise ConfigError("cluster_dist_mean must be > 0", key="cluster_dist_mean")
    if min(config.ellipsoid_stds) < 0 or min(config.angle_std) < 0 or config.cluster_speed_std < 0:
        raise ConfigError("distribution spreads must be >= 0")
    m = config.rays_per_cluster
    sides = []
    for arr in (config.tx_array, config.rx_array):
        d = rng.exponential(config.cluster_dist_mean)
        elev = rng.normal(config.angle_mean[0], config.angle_std[0])
        azim = rng.normal(config.angle_mean[1], config.angle_std[1])
        offsets = rng.normal(0.0, 1.0, size=(m, 3)) * np.asarray(config.ellipsoid_stds)
        velocity = rng.normal(0.0, 1.0, size=3) * config.cluster_speed_std
        anchor = np.asarray(arr.origin) + arr.displacement(birth_time)
        center_at_birth = anchor + spherical_to_cartesian(d, elev, azim)
        sides.append(ClusterSide((float(d), float(elev), float(azim)), center_at_birth - velocity * birth_time,
                                 offsets, velocity))
    tau_link = rng.exponential(config.tau_link_mean) if config.tau_link_mean > 0 else 0.0
    extent = rng.exponential(config.d_corr) if math.isfinite(config.d_corr) else math.inf
    return ClusterPair(int(cluster_id), sides[0], sides[1], float(tau_link), float(birth_time),
                       visibility_extent=float(extent))


def evolve_clusters(state: Sequence[ClusterPair], dt: float, rng: np.random.Generator, config: ScenarioConfig,
                    t_now: float = 0.0, id_start: Optional[int] = None) -> list[ClusterPair]:
    """One birth-death step of length ``dt``.

    Survivors are kept with probability exp(-death_rate*dt) each, then a
    Poisson(birth_rate*dt) number of clusters is placed with birth time
    ``t_now``. Clusters that die are dropped from the returned list.
    """
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    state = list(state)
    if config.death_rate > 0 and state:
        survive = math.exp(-config.death_rate * dt)
        keep = rng.random(len(state)) < survive
        state = [c for c, k in zip(state, keep) if k]
    if config.birth_rate > 0:
        n_new = int(rng.poisson(config.birth_rate * dt))
        if id_start is None:
            id_start = max((c.id for c in state), default=-1) + 1
        state.extend(place_cluster(config, t_now, rng, id_start + i) for i in range(n_new))
    return state


def simulate_clusters(config: ScenarioConfig, rng: Optional[np.random.Generator] = None):
    """Run the birth-death process on the t_ch grid.

    Returns ``(clusters, counts)``: every cluster that was ever alive, with
    birth and death times filled in, and the alive count per grid step.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    t_axis = config.t_axis()
    state = [place_cluster(config, 0.0, rng, i) for i in range(config.n_clusters)]
    history = {c.id: c for c in state}
    next_id = config.n_clusters
    counts = np.zeros(len(t_axis), dtype=np.int64)
    counts[0] = len(state)
    for k in range(1, len(t_axis)):
        t_now = float(t_axis[k])
        new_state = evolve_clusters(state, config.t_ch, rng, config, t_now, next_id)
        alive_ids = {c.id for c in new_state}
        for c in state:
            if c.id not in alive_ids:
                history[c.id] = dataclasses.replace(history[c.id], death_time=t_now)
        for c in new_state:
            if c.id not in history:
                history[c.id] = c
                next_id = max(next_id, c.id + 1)
        state = new_state
        counts[k] = len(state)
    return [history[i] for i in sorted(history)], counts


# --------------------------------------------------------------------------
# Rays
# --------------------------------------------------------------------------

def ray_power(delay, f, config: ScenarioConfig):
    """Un-normalised ray power for a delay (s) and baseband offset f (Hz)."""
    delay = np.asarray(delay, dtype=float)
    decay = (config.r_tau - 1.0) / (config.r_tau * config.ds)
    return ((config.f_c + np.asarray(f, dtype=float)) / config.f_c) ** config.gamma * np.exp(-decay * delay)


def _distances(points, antennas):
    d = np.linalg.norm(points - antennas, axis=-1)
    if np.any(d == 0.0):
        raise GeometryError("antenna and scatterer coincide; ray distance is zero")
    return d


def ray_delay(config: ScenarioConfig, cluster: ClusterPair, m: int, p: int, q: int, t):
    """Delay of ray ``m`` of ``cluster`` between Tx element ``p`` and Rx element ``q`` (0-based) at time t."""
    t = np.asarray(t, dtype=float)
    a_tx = config.tx_array.positions(t)[..., p, :]
    a_rx = config.rx_array.positions(t)[..., q, :]
    d_tx = _distances(cluster.tx.scatterers(t)[..., m, :], a_tx)
    d_rx = _distances(cluster.rx.scatterers(t)[..., m, :], a_rx)
    return (d_tx + d_rx) / SPEED_OF_LIGHT + cluster.tau_link


def ctf_sample(f, delays, powers, f_c):
    """Sum of sqrt(P) * exp(j 2 pi (f_c - f) tau) over a ray set."""
    delays = np.asarray(delays, dtype=float)
    if delays.size == 0:
        return 0j
    cycles = (f_c - f) * delays
    cycles = cycles - np.round(cycles)
    return complex(np.sum(np.sqrt(powers) * np.exp(2j * np.pi * cycles)))


@dataclass
class RaySnapshot:
    """Rays alive at one instant for one antenna pair."""

    delays: np.ndarray
    powers: np.ndarray  # evaluated at f = 0
    cluster_ids: np.ndarray


def active_rays(config: ScenarioConfig, clusters: Sequence[ClusterPair], t: float, q: int, p: int) -> RaySnapshot:
    delays, ids = [], []
    for c in clusters:
        if not c.alive(t) or not c.visible(q, p, config):
            continue
        for m in range(c.n_rays):
            delays.append(float(ray_delay(config, c, m, p, q, t)))
            ids.append(c.id)
    delays = np.asarray(delays, dtype=float)
    return RaySnapshot(delays, ray_power(delays, 0.0, config), np.asarray(ids, dtype=np.int64))


def cir_taps(t: float, q: int, p: int, config: ScenarioConfig, clusters: Sequence[ClusterPair]):
    """One (delay, complex amplitude) tap per active ray, amplitude sqrt(P) exp(j 2 pi f_c tau)."""
    snap = active_rays(config, clusters, t, q, p)
    cycles = config.f_c * snap.delays
    cycles -= np.round(cycles)
    amps = np.sqrt(snap.powers) * np.exp(2j * np.pi * cycles)
    return list(zip(snap.delays.tolist(), amps.tolist()))


# --------------------------------------------------------------------------
# Doppler (Tx fixed, constant Rx velocity)
# --------------------------------------------------------------------------

def _require_doppler_regime(config: ScenarioConfig, constant_rx: bool = True):
    if not config.tx_array.is_static:
        raise ConfigError("Doppler approximation needs a fixed Tx", key="tx_velocity")
    if constant_rx and not config.rx_array.has_constant_velocity:
        raise ConfigError("Doppler approximation needs a constant Rx velocity", key="rx_velocity")


def _doppler_arrays(config: ScenarioConfig, scatterers, elements, velocity, q: int):
    """Linearised Doppler terms for Rx element q (0-based); leading axes broadcast.

    ``scatterers`` (..., R, 3), ``elements`` (..., Q, 3) and ``velocity``
    (..., 3) describe the geometry at the reference instant. Returns
    ``(alpha, beta, denom)``; alpha = -cos(omega) v / lambda and
    beta = sin^2(omega) v^2 / (lambda * denom).
    """
    rx = config.rx_array
    lam = config.wavelength
    u = scatterers - elements[..., q, None, :]
    u_norm = np.linalg.norm(u, axis=-1)
    if np.any(u_norm == 0.0):
        raise GeometryError("Rx element coincides with a scatterer")
    speed = np.linalg.norm(velocity, axis=-1)[..., None]
    safe = np.where(speed > 0, speed, 1.0)
    cos_omega = np.clip(np.einsum("...rk,...k->...r", u, velocity) / (u_norm * safe), -1.0, 1.0)
    cos_theta = (u @ np.asarray(rx.axis)) / u_norm
    dist = np.linalg.norm(scatterers - elements[..., 0, None, :], axis=-1)
    denom = dist - cos_theta * q * rx.spacing
    alpha = -cos_omega * speed / lam
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = np.where(speed > 0, (1.0 - cos_omega**2) * speed**2 / (lam * denom), 0.0)
    return alpha, beta, denom


def doppler_terms(config: ScenarioConfig, scatterers, q: int, t_ref: float = 0.0):
    """Per-scatterer (initial Doppler Hz, Doppler rate Hz/s) at Rx element q (0-based).

    Geometry is frozen at ``t_ref``: the array elements sit where they are at
    ``t_ref`` and ``scatterers`` are the scatterer positions at that time.
    """
    _require_doppler_regime(config, constant_rx=False)
    scatterers = np.atleast_2d(np.asarray(scatterers, dtype=float))
    rx = config.rx_array
    alpha, beta, denom = _doppler_arrays(config, scatterers, rx.positions(t_ref), rx.velocity_at(t_ref), q)
    if np.linalg.norm(rx.velocity_at(t_ref)) > 0 and np.any(denom <= 0):
        raise GeometryError("scatterer lies at or behind the Rx array along its axis (non-positive distance term)")
    return alpha, beta


def doppler_approx(config: ScenarioConfig, cluster: ClusterPair, m: int, q: int, t) -> float:
    """Linearised instantaneous Doppler (Hz) of ray m at Rx element q (0-based) and time t.

    Angles and the distance term are taken from the t=0 geometry; needs a
    fixed Tx and a constant Rx velocity.
    """
    _require_doppler_regime(config)
    alpha, beta = doppler_terms(config, cluster.rx.scatterers(0.0)[m], q)
    return alpha[0] + beta[0] * np.asarray(t, dtype=float)


def _widen(lo, hi, margin, bound=math.inf):
    """Pad [lo, hi] by ``margin`` times its width on each side, without crossing +-bound."""
    pad = margin * (hi - lo)
    return (float(max(lo - pad, -bound)), float(min(hi + pad, bound)))


def chirp_ranges(config: ScenarioConfig, clusters: Sequence[ClusterPair], t_ref: float = 0.0, margin: float = 0.05):
    """Box of initial Doppler and Doppler rate over the rays alive at ``t_ref``.

    Covers every Rx element; each range is widened by ``margin`` times its
    width on both sides, the alpha range no further than the +-v/lambda
    bound that no ray can exceed.
    """
    rays = [c.rx.scatterers(t_ref) for c in clusters if c.alive(t_ref)]
    if not rays:
        raise ValueError("cannot derive chirp ranges from an empty ray set")
    scat = np.concatenate(rays)
    alphas, betas = [], []
    for q in range(config.rx_array.n_elements):
        a, b = doppler_terms(config, scat, q, t_ref)
        alphas.append(a)
        betas.append(b)
    alphas = np.concatenate(alphas)
    betas = np.concatenate(betas)
    bound = np.linalg.norm(config.rx_array.velocity_at(t_ref)) / config.wavelength
    return _widen(alphas.min(), alphas.max(), margin, bound), _widen(betas.min(), betas.max(), margin)


def _doppler_box(config: ScenarioConfig, scat_rx, alive, t_axis, margin: float = 0.05) -> np.ndarray:
    """Per-time-sample (alpha_lo, alpha_hi, beta_lo, beta_hi); NaN where no ray qualifies."""
    rx = config.rx_array
    elements = rx.positions(t_axis)
    velocity = rx.velocity_at(t_axis)
    lo_a = np.full(len(t_axis), np.inf)
    hi_a = np.full(len(t_axis), -np.inf)
    lo_b = lo_a.copy()
    hi_b = hi_a.copy()
    for q in range(rx.n_elements):
        alpha, beta, denom = _doppler_arrays(config, scat_rx, elements, velocity, q)
        ok = alive & (denom > 0)
        lo_a = np.minimum(lo_a, np.where(ok, alpha, np.inf).min(axis=1))
        hi_a = np.maximum(hi_a, np.where(ok, alpha, -np.inf).max(axis=1))
        lo_b = np.minimum(lo_b, np.where(ok, beta, np.inf).min(axis=1))
        hi_b = np.maximum(hi_b, np.where(ok, beta, -np.inf).max(axis=1))
    box = np.stack([lo_a, hi_a, lo_b, hi_b], axis=1)
    box[~np.all(np.isfinite(box), axis=1)] = np.nan
    pad_a = margin * (box[:, 1] - box[:, 0])
    pad_b = margin * (box[:, 3] - box[:, 2])
    bound = np.linalg.norm(velocity, axis=-1) / config.wavelength
    box[:, 0] = np.maximum(box[:, 0] - pad_a, -bound)
    box[:, 1] = np.minimum(box[:, 1] + pad_a, bound)
    box[:, 2] -= pad_b
    box[:, 3] += pad_b
    return box


# --------------------------------------------------------------------------
# CTF grid
# --------------------------------------------------------------------------

@dataclass
class CtfGrid:
    """Sampled transfer function ``data[q, p, t, f]`` with its axes.

    ``normalization[q, p]`` is the gain applied to the raw sum so that every
    non-empty subchannel has unit mean power over the grid. ``events`` lists
    the sample indices at which the set of live clusters changes.
    """

    data: np.ndarray
    t_axis: np.ndarray
    f_axis: np.ndarray
    f_c: float
    normalization: np.ndarray
    doppler_box: Optional[np.ndarray] = None
    tau_hint: float = math.nan
    events: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        self.t_axis = np.asarray(self.t_axis, dtype=float)
        self.f_axis = np.asarray(self.f_axis, dtype=float)
        if self.data.ndim != 4 or self.data.shape[2:] != (len(self.t_axis), len(self.f_axis)):
            raise ValueError(f"data shape {self.data.shape} does not match axes "
                             f"({len(self.t_axis)}, {len(self.f_axis)})")
        self.normalization = np.asarray(self.normalization, dtype=float).reshape(self.data.shape[:2])
        if self.doppler_box is not None:
            self.doppler_box = np.asarray(self.doppler_box, dtype=float).reshape(len(self.t_axis), 4)
        self.tau_hint = float(self.tau_hint)
        ev = np.zeros(0, dtype=np.int64) if self.events is None else np.asarray(self.events, dtype=np.int64).ravel()
        if ev.size and (np.any(np.diff(ev) <= 0) or ev[0] < 1 or ev[-1] >= len(self.t_axis)):
            raise ValueError("events must be increasing sample indices inside the grid")
        self.events = ev

    def chirp_box(self, sl: slice = slice(None)):
        """Union of the per-sample Doppler boxes over ``sl``: (alpha_range, beta_range) or None."""
        if self.doppler_box is None:
            return None
        rows = self.doppler_box[sl]
        rows = rows[np.all(np.isfinite(rows), axis=1)]
        if not len(rows):
            return None
        return ((float(rows[:, 0].min()), float(rows[:, 1].max())),
                (float(rows[:, 2].min()), float(rows[:, 3].max())))

    @property
    def n_rx(self) -> int:
        return self.data.shape[0]

    @property
    def n_tx(self) -> int:
        return self.data.shape[1]

    @property
    def t_ch(self) -> float:
        return float(self.t_axis[1] - self.t_axis[0]) if len(self.t_axis) > 1 else math.nan

    @property
    def df(self) -> float:
        return float(self.f_axis[1] - self.f_axis[0])

    @property
    def bandwidth(self) -> float:
        return self.df * len(self.f_axis)


def _ray_arrays(clusters: Sequence[ClusterPair]):
    tx_pos = np.concatenate([c.tx.center + c.tx.offsets for c in clusters])
    rx_pos = np.concatenate([c.rx.center + c.rx.offsets for c in clusters])
    tx_vel = np.concatenate([np.broadcast_to(c.tx.velocity, (c.n_rays, 3)) for c in clusters])
    rx_vel = np.concatenate([np.broadcast_to(c.rx.velocity, (c.n_rays, 3)) for c in clusters])
    link = np.concatenate([np.full(c.n_rays, c.tau_link) for c in clusters])
    birth = np.concatenate([np.full(c.n_rays, c.birth_time) for c in clusters])
    death = np.concatenate([np.full(c.n_rays, c.death_time) for c in clusters])
    extent = np.concatenate([np.full(c.n_rays, c.visibility_extent) for c in clusters])
    return tx_pos, rx_pos, tx_vel, rx_vel, link, birth, death, extent


def synthesize_ctf(config: ScenarioConfig, clusters: Sequence[ClusterPair], normalize: bool = True) -> CtfGrid:
    """Fill the (Q, P, T, I) grid from a fixed cluster history."""
    t_axis = config.t_axis()
    f_axis = config.f_axis()
    n_q, n_p = config.rx_array.n_elements, config.tx_array.n_elements
    data = np.zeros((n_q, n_p, len(t_axis), len(f_axis)), dtype=np.complex128)
    gains = np.ones((n_q, n_p))
    box = None
    tau_hint = math.nan
    events = None
    if clusters:
        tx_pos, rx_pos, tx_vel, rx_vel, link, birth, death, extent = _ray_arrays(clusters)
        tt = t_axis[:, None, None]
        scat_tx = tx_pos[None] + tt * tx_vel[None]
        scat_rx = rx_pos[None] + tt * rx_vel[None]
        alive = (birth[None, :] <= t_axis[:, None]) & (t_axis[:, None] < death[None, :])
        events = np.flatnonzero(np.any(alive[1:] != alive[:-1], axis=1)) + 1
        ant_tx = config.tx_array.positions(t_axis)
        ant_rx = config.rx_array.positions(t_axis)
        d_tx = [np.linalg.norm(scat_tx - ant_tx[:, p, None, :], axis=-1) for p in range(n_p)]
        d_rx = [np.linalg.norm(scat_rx - ant_rx[:, q, None, :], axis=-1) for q in range(n_q)]
        if any(np.any((d == 0) & alive) for d in d_tx + d_rx):
            raise GeometryError("antenna and scatterer coincide; ray distance is zero")
        freq_amp = np.sqrt(((config.f_c + f_axis) / config.f_c) ** config.gamma)
        decay = (config.r_tau - 1.0) / (config.r_tau * config.ds)
        all_delays = []
        for q in range(n_q):
            for p in range(n_p):
                reach = max(p * config.tx_array.spacing, q * config.rx_array.spacing)
                mask = alive & (reach <= extent)[None, :]
                tau = (d_tx[p] + d_rx[q]) / SPEED_OF_LIGHT + link[None, :]
                amp = np.where(mask, np.exp(-0.5 * decay * tau), 0.0)
                data[q, p] = _kernels.ctf_accumulate(amp, tau, config.f_c, f_axis[0], f_axis[1] - f_axis[0],
                                                     len(f_axis)) * freq_amp
                all_delays.append(tau[mask])
        delays = np.concatenate(all_delays)
        if delays.size:
            tau_hint = float(np.percentile(delays, 99.9))
        if config.tx_array.is_static:
            box = _doppler_box(config, scat_rx, alive, t_axis)
    if normalize:
        power = np.mean(np.abs(data) ** 2, axis=(2, 3))
        gains = np.where(power > 0, 1.0 / np.sqrt(np.where(power > 0, power, 1.0)), 1.0)
        data *= gains[:, :, None, None]
    return CtfGrid(data, t_axis, f_axis, config.f_c, gains, box, tau_hint, events)


def generate_ctf_grid(config: ScenarioConfig) -> CtfGrid:
    """Simulate the cluster process from ``config.seed`` and synthesise the normalised CTF."""
    clusters, _ = simulate_clusters(config)
    return synthesize_ctf(config, clusters)

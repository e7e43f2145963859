"""On-disk formats: scenario text files and the CTF, package and signal binaries.

Binary layout (little-endian throughout)::

    magic    8 bytes   b"CHEMU" + kind tag (b"CTF", b"PKG", b"SIG")
    version  u16
    endian   u8        always 1 (little)
    dims     kind-specific counts
    axes     float64 arrays (CTF files add the Doppler box and event indices)
    payload  interleaved (re, im) samples

The payload length must match the declared dimensions exactly; a short
file raises :class:`TruncatedPayload`, a long one :class:`FormatError`.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass, fields
from typing import Optional, Sequence, Union

import numpy as np

from .errors import BadMagic, ConfigError, FormatError, TruncatedPayload
from .gbsm import AntennaArray, CtfGrid, ScenarioConfig
from .subspace import ProjectionPackage

VERSION = 1
_LITTLE = 1
MAGIC_CTF = b"CHEMUCTF"
MAGIC_PKG = b"CHEMUPKG"
MAGIC_SIG = b"CHEMUSIG"

PathLike = Union[str, os.PathLike]


# --------------------------------------------------------------------------
# Scenario text files
# --------------------------------------------------------------------------

# file key -> (target, attribute, kind); target "cfg" or an antenna array
_SCENARIO_KEYS = {
    "f_c": ("cfg", "f_c", "float"),
    "B": ("cfg", "bandwidth", "float"),
    "I": ("cfg", "n_freq", "int"),
    "T": ("cfg", "t_total", "float"),
    "t_ch": ("cfg", "t_ch", "float"),
    "N": ("cfg", "n_clusters", "int"),
    "M": ("cfg", "rays_per_cluster", "int"),
    "lambda_G": ("cfg", "birth_rate", "float"),
    "lambda_R": ("cfg", "death_rate", "float"),
    "r_tau": ("cfg", "r_tau", "float"),
    "DS": ("cfg", "ds", "float"),
    "gamma": ("cfg", "gamma", "float"),
    "cluster_dist_mean": ("cfg", "cluster_dist_mean", "float"),
    "angle_mean": ("cfg", "angle_mean", "vec2"),
    "angle_std": ("cfg", "angle_std", "vec2"),
    "ellipsoid_stds": ("cfg", "ellipsoid_stds", "vec3"),
    "tau_link_mean": ("cfg", "tau_link_mean", "float"),
    "cluster_speed_std": ("cfg", "cluster_speed_std", "float"),
    "D_corr": ("cfg", "d_corr", "float"),
    "seed": ("cfg", "seed", "int"),
    "K": ("cfg", "k_basis", "int"),
    "t_window": ("cfg", "t_window", "opt_float"),
    "n_fft": ("cfg", "n_fft", "opt_int"),
    "tau_max": ("cfg", "tau_max", "opt_float"),
}
for _side, _count in (("tx", "P"), ("rx", "Q")):
    _SCENARIO_KEYS[_count] = (_side, "n_elements", "int")
    _SCENARIO_KEYS[f"{_side}_spacing"] = (_side, "spacing", "opt_float")
    _SCENARIO_KEYS[f"{_side}_axis"] = (_side, "axis", "vec3")
    _SCENARIO_KEYS[f"{_side}_origin"] = (_side, "origin", "vec3")
    _SCENARIO_KEYS[f"{_side}_velocity"] = (_side, "velocity", "vec3")
    _SCENARIO_KEYS[f"{_side}_velocity_changes"] = (_side, "velocity_changes", "changes")

# long-form aliases accepted on read
_ALIASES = {attr: key for key, (target, attr, _) in _SCENARIO_KEYS.items() if target == "cfg" and attr != key}
MANDATORY_KEYS = ("f_c", "B")


def _parse_value(kind: str, text: str, key: str, line: int):
    try:
        if kind in ("opt_float", "opt_int") and text.lower() == "none":
            return None
        if kind in ("float", "opt_float"):
            return float(text)
        if kind in ("int", "opt_int"):
            val = float(text)
            if val != int(val):
                raise ValueError(text)
            return int(val)
        if kind in ("vec2", "vec3"):
            parts = [float(x) for x in text.split(",")]
            if len(parts) != int(kind[-1]):
                raise ValueError(f"expected {kind[-1]} components")
            return tuple(parts)
        if kind == "changes":
            out = []
            for seg in filter(None, (s.strip() for s in text.split(";"))):
                t_start, vec = seg.split(":")
                v = tuple(float(x) for x in vec.split(","))
                if len(v) != 3:
                    raise ValueError("velocity needs 3 components")
                out.append((float(t_start), v))
            return tuple(out)
    except ValueError as exc:
        raise ConfigError(f"line {line}: bad value for {key}: {text!r} ({exc})", key=key, line=line) from None
    raise AssertionError(kind)


def _format_value(kind: str, val) -> str:
    if val is None:
        return "none"
    if kind in ("vec2", "vec3"):
        return ", ".join(repr(float(x)) for x in val)
    if kind == "changes":
        return "; ".join(f"{t!r}: " + ", ".join(repr(float(x)) for x in v) for t, v in val)
    if kind in ("int", "opt_int"):
        return str(int(val))
    return repr(float(val))


def parse_scenario(text: str) -> ScenarioConfig:
    values: dict[str, tuple] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in _SCENARIO_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}", key=key, line=lineno)
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}", key=key, line=lineno)
        values[key] = (_parse_value(_SCENARIO_KEYS[key][2], value, key, lineno), lineno)
    missing = [k for k in MANDATORY_KEYS if k not in values]
    if missing:
        raise ConfigError(f"missing mandatory keys: {', '.join(missing)}", key=missing[0])

    cfg_kwargs, arrays = {}, {"tx": {}, "rx": {}}
    for key, (val, _) in values.items():
        target, attr, _ = _SCENARIO_KEYS[key]
        (cfg_kwargs if target == "cfg" else arrays[target])[attr] = val
    defaults = ScenarioConfig(f_c=1.0, bandwidth=1.0)
    try:
        for side in ("tx", "rx"):
            if arrays[side]:
                base = getattr(defaults, f"{side}_array")
                merged = {f.name: getattr(base, f.name) for f in fields(AntennaArray)}
                merged["spacing"] = None
                merged.update(arrays[side])
                cfg_kwargs[f"{side}_array"] = AntennaArray(**merged)
        return ScenarioConfig(**cfg_kwargs)
    except ConfigError as exc:
        line = next((ln for k, (_, ln) in values.items() if _SCENARIO_KEYS[k][1] == exc.key), None)
        raise ConfigError(str(exc), key=exc.key, line=line) from None


def format_scenario(config: ScenarioConfig) -> str:
    lines = ["# chemu scenario"]
    for key, (target, attr, kind) in _SCENARIO_KEYS.items():
        obj = config if target == "cfg" else getattr(config, f"{target}_array")
        val = getattr(obj, attr)
        if val is None:
            continue
        lines.append(f"{key} = {_format_value(kind, val)}")
    return "\n".join(lines) + "\n"


def read_scenario(path: PathLike) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())


def write_scenario(path: PathLike, config: ScenarioConfig) -> None:
    atomic_write(path, format_scenario(config).encode("utf-8"))


# --------------------------------------------------------------------------
# Binary helpers
# --------------------------------------------------------------------------

def atomic_write(path: PathLike, data: bytes) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".chemu-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise TruncatedPayload(f"need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def floats(self, n: int, dtype="<f8") -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(n * dt.itemsize), dtype=dt).copy()

    def complex_payload(self, shape, dtype="<f8") -> np.ndarray:
        count = int(np.prod(shape))
        dt = np.dtype(dtype)
        need = 2 * count * dt.itemsize
        remaining = len(self.buf) - self.pos
        if remaining < need:
            raise TruncatedPayload(f"payload needs {need} bytes, {remaining} present")
        if remaining > need:
            raise FormatError(f"payload has {remaining - need} bytes beyond the declared dimensions")
        flat = self.floats(2 * count, dtype)
        cplx = np.complex128 if dt.itemsize == 8 else np.complex64
        return flat.view(cplx).reshape(shape) if flat.size else np.zeros(shape, dtype=cplx)


def _header(magic: bytes) -> bytes:
    return magic + struct.pack("<HB", VERSION, _LITTLE)


def _check_header(r: _Reader, magic: bytes):
    got = bytes(r.take(8))
    if got != magic:
        raise BadMagic(f"expected magic {magic!r}, found {got!r}")
    version, endian = r.unpack("<HB")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    if endian != _LITTLE:
        raise FormatError(f"unsupported endianness flag {endian}")


def _interleaved(data: np.ndarray, dtype="<f8") -> bytes:
    arr = np.ascontiguousarray(data)
    real_dt = np.dtype(dtype)
    out = np.empty(arr.shape + (2,), dtype=real_dt)
    out[..., 0] = arr.real
    out[..., 1] = arr.imag
    return out.tobytes()


def _f64(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


# --------------------------------------------------------------------------
# CTF grid
# --------------------------------------------------------------------------

def dumps_ctf(grid: CtfGrid) -> bytes:
    q, p, t, i = grid.data.shape
    has_box = grid.doppler_box is not None
    parts = [
        _header(MAGIC_CTF),
        struct.pack("<4IBI", q, p, t, i, int(has_box), len(grid.events)),
        struct.pack("<2d", grid.f_c, grid.tau_hint),
        _f64(grid.t_axis), _f64(grid.f_axis), _f64(grid.normalization),
    ]
    if has_box:
        parts.append(_f64(grid.doppler_box))
    parts.append(np.ascontiguousarray(grid.events, dtype="<u4").tobytes())
    parts.append(_interleaved(grid.data))
    return b"".join(parts)


def loads_ctf(buf: bytes) -> CtfGrid:
    r = _Reader(buf)
    _check_header(r, MAGIC_CTF)
    q, p, t, i, has_box, n_events = r.unpack("<4IBI")
    if has_box not in (0, 1):
        raise FormatError(f"bad Doppler box flag {has_box}")
    f_c, tau_hint = r.unpack("<2d")
    t_axis = r.floats(t)
    f_axis = r.floats(i)
    norm = r.floats(q * p).reshape(q, p)
    box = r.floats(4 * t).reshape(t, 4) if has_box else None
    events = r.floats(n_events, "<u4").astype(np.int64)
    data = r.complex_payload((q, p, t, i))
    try:
        return CtfGrid(data, t_axis, f_axis, f_c, norm, box, tau_hint, events)
    except ValueError as exc:
        raise FormatError(f"inconsistent CTF file: {exc}") from None


# --------------------------------------------------------------------------
# Projection package (one or more windows)
# --------------------------------------------------------------------------

def package_header_size(ks: Sequence[int], n_freq: int, n_rx: int, n_tx: int) -> int:
    """Bytes before the coefficient payload for windows holding ``ks`` chirps each."""
    fixed = 8 + 3 + 4 * 4 + 8
    per_window = 2 * 8 + 2 * 4
    return fixed + 8 * n_freq + 8 * n_rx * n_tx + sum(per_window + 16 * k for k in ks)


def dumps_package(packages: Union[ProjectionPackage, Sequence[ProjectionPackage]]) -> bytes:
    """Windows may differ in K but must share Q, P and the frequency axis."""
    pkgs = [packages] if isinstance(packages, ProjectionPackage) else list(packages)
    if not pkgs:
        raise ValueError("no packages to write")
    first = pkgs[0]
    q, p, _, i = first.coeffs.shape
    for pkg in pkgs[1:]:
        if pkg.coeffs.shape[:2] != (q, p) or not np.array_equal(pkg.f_axis, first.f_axis):
            raise ValueError("all windows in a package file must share Q, P and the frequency axis")
    parts = [
        _header(MAGIC_PKG),
        struct.pack("<4I", q, p, i, len(pkgs)),
        struct.pack("<d", first.f_c),
        _f64(first.f_axis), _f64(first.normalization),
    ]
    for pkg in pkgs:
        parts.append(struct.pack("<2d2I", pkg.t0, pkg.t_window, pkg.n_time_samples, pkg.k))
        parts.append(_f64(pkg.chirps.reshape(pkg.k, 2)))
    parts.append(b"".join(_interleaved(pkg.coeffs) for pkg in pkgs))
    return b"".join(parts)


def loads_package(buf: bytes) -> list[ProjectionPackage]:
    r = _Reader(buf)
    _check_header(r, MAGIC_PKG)
    q, p, i, n_windows = r.unpack("<4I")
    if n_windows < 1:
        raise FormatError("package file declares no windows")
    (f_c,) = r.unpack("<d")
    f_axis = r.floats(i)
    norm = r.floats(q * p).reshape(q, p)
    windows = []
    for _ in range(n_windows):
        t0, t_window, n_samples, k = r.unpack("<2d2I")
        windows.append((t0, t_window, n_samples, r.floats(2 * k).reshape(k, 2)))
    total = sum(q * p * len(w[3]) * i for w in windows)
    flat = r.complex_payload((total,))
    out, pos = [], 0
    try:
        for t0, tw, ns, chirps in windows:
            size = q * p * len(chirps) * i
            coeffs = flat[pos:pos + size].reshape(q, p, len(chirps), i)
            pos += size
            out.append(ProjectionPackage(coeffs, chirps, t0, tw, ns, f_axis.copy(), f_c, norm.copy()))
    except ValueError as exc:
        raise FormatError(f"inconsistent package file: {exc}") from None
    return out


# --------------------------------------------------------------------------
# Signal files
# --------------------------------------------------------------------------

@dataclass
class Signal:
    """Complex baseband streams ``samples[channel, n]`` at ``sample_rate`` Hz."""

    samples: np.ndarray
    sample_rate: float
    single_precision: bool = False

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples))
        self.samples = self.samples.astype(np.complex64 if self.single_precision else np.complex128)
        self.sample_rate = float(self.sample_rate)
        if not (self.sample_rate > 0 and math.isfinite(self.sample_rate)):
            raise ValueError("sample_rate must be positive")


def dumps_signal(sig: Signal) -> bytes:
    n_ch, n = sig.samples.shape
    dtype = "<f4" if sig.single_precision else "<f8"
    return b"".join([
        _header(MAGIC_SIG),
        struct.pack("<IQBd", n_ch, n, int(sig.single_precision), sig.sample_rate),
        _interleaved(sig.samples, dtype),
    ])


def loads_signal(buf: bytes) -> Signal:
    r = _Reader(buf)
    _check_header(r, MAGIC_SIG)
    n_ch, n, single, rate = r.unpack("<IQBd")
    if single not in (0, 1):
        raise FormatError(f"bad precision flag {single}")
    data = r.complex_payload((n_ch, n), "<f4" if single else "<f8")
    try:
        return Signal(data, rate, bool(single))
    except ValueError as exc:
        raise FormatError(str(exc)) from None


# --------------------------------------------------------------------------
# Path wrappers
# --------------------------------------------------------------------------

def _read_bytes(path: PathLike) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def write_ctf(path: PathLike, grid: CtfGrid) -> None:
    atomic_write(path, dumps_ctf(grid))


def read_ctf(path: PathLike) -> CtfGrid:
    return loads_ctf(_read_bytes(path))


def write_package(path: PathLike, packages) -> None:
    atomic_write(path, dumps_package(packages))


def read_package(path: PathLike) -> list[ProjectionPackage]:
    return loads_package(_read_bytes(path))


def write_signal(path: PathLike, sig: Signal) -> None:
    atomic_write(path, dumps_signal(sig))


def read_signal(path: PathLike) -> Signal:
    return loads_signal(_read_bytes(path))


def sniff_kind(path: PathLike) -> Optional[str]:
    """"ctf", "pkg", "sig" or None, from the first eight bytes."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    return {MAGIC_CTF: "ctf", MAGIC_PKG: "pkg", MAGIC_SIG: "sig"}.get(head)

"""``chemu`` command line: generate, project, reconstruct, emulate, metrics, pipeline, replay.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
failure. Every output is computed in memory first and written only after
the whole command has succeeded.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from typing import Callable, Optional

import numpy as np

from . import __version__, iofmt
from .engine import EngineConfig, run_stream, stats_csv
from .errors import ChemuError, FormatError, NearDependentBasis
from .gbsm import CtfGrid, generate_ctf_grid
from .metrics import ctf_error, delay_psd, doppler_psd, error_csv, spectrum_csv, zero_frequency_series
from .subspace import project_grid, reconstruct_grid

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _window_arg(text: str):
    shape, _, length = text.partition(":")
    try:
        n = int(length) if length else 256
    except ValueError:
        raise argparse.ArgumentTypeError(f"window must look like SHAPE:LENGTH, got {text!r}") from None
    return shape, n


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# --------------------------------------------------------------------------
# Stage functions: pure in-memory transforms returning {path: bytes}
# --------------------------------------------------------------------------

def _scenario(path: str, seed: Optional[int]):
    cfg = iofmt.read_scenario(path)
    return dataclasses.replace(cfg, seed=seed) if seed is not None else cfg


def _load_channel(args):
    if getattr(args, "package", None):
        return iofmt.read_package(args.package)
    if getattr(args, "ctf", None):
        return iofmt.read_ctf(args.ctf)
    raise UsageError("give --package or --ctf")


def _project(ctf: CtfGrid, k: int, t_window: Optional[float], split: bool = True):
    try:
        return project_grid(ctf, k, t_window, split_at_events=split)
    except NearDependentBasis as exc:
        raise NearDependentBasis(f"project stage (K={k}, T_w={t_window}): {exc}", exc.column, exc.ratio) from None


def _engine_config(source, signal: iofmt.Signal, nfft: Optional[int], tau_max: Optional[float], single: bool):
    if isinstance(source, CtfGrid):
        n_rx, n_tx, t0, hint = source.n_rx, source.n_tx, float(source.t_axis[0]), source.tau_hint
    else:
        n_rx, n_tx = source[0].coeffs.shape[:2]
        t0, hint = min(p.t0 for p in source), float("nan")
    if tau_max is None:
        if not np.isfinite(hint):
            raise UsageError("--tau-max is required when the channel file carries no delay hint")
        tau_max = hint
    t_s = 1.0 / signal.sample_rate
    if nfft is None:
        n_a = int(np.floor(tau_max / t_s * (1 + 1e-9)))
        nfft = 1 << max(6, int(np.ceil(np.log2(max(8 * n_a, 2)))))
    return EngineConfig(nfft, tau_max, t_s, n_tx, n_rx, t0, single_precision=single)


def _emulate(source, signal: iofmt.Signal, nfft, tau_max, single=False):
    cfg = _engine_config(source, signal, nfft, tau_max, single)
    if signal.samples.shape[0] != cfg.n_tx:
        raise FormatError(f"signal has {signal.samples.shape[0]} channels, channel expects {cfg.n_tx} inputs")
    result = run_stream(cfg, source, signal.samples)
    out = iofmt.Signal(result.outputs, signal.sample_rate, single)
    return out, result.stats, cfg


def _metric_csv(metric: str, ctf: CtfGrid, ref: Optional[CtfGrid], window, q: int, p: int, n_avg: int) -> str:
    if metric == "error":
        if ref is None:
            raise UsageError("--metric error needs --ref (the grid to compare against)")
        return error_csv(ctf_error(ref, ctf))
    if metric == "doppler":
        return spectrum_csv(doppler_psd(zero_frequency_series(ctf, q, p), ctf.t_axis, window, n_avg))
    return spectrum_csv(delay_psd(ctf, q, p))


# --------------------------------------------------------------------------
# Subcommands; each returns {output path: bytes} and writes nothing itself
# --------------------------------------------------------------------------

def cmd_generate(args):
    cfg = _scenario(args.scenario, args.seed)
    return {args.out: iofmt.dumps_ctf(generate_ctf_grid(cfg))}


def cmd_project(args):
    ctf = iofmt.read_ctf(args.ctf)
    return {args.out: iofmt.dumps_package(_project(ctf, args.k, args.t_window, not args.no_split))}


def cmd_reconstruct(args):
    return {args.out: iofmt.dumps_ctf(reconstruct_grid(iofmt.read_package(args.package)))}


def cmd_emulate(args):
    source = _load_channel(args)
    out, stats, _ = _emulate(source, iofmt.read_signal(args.inp), args.nfft, args.tau_max, args.single)
    outputs = {args.out: iofmt.dumps_signal(out)}
    if args.stats:
        outputs[args.stats] = stats_csv(stats).encode()
    return outputs


def cmd_metrics(args):
    if args.package:
        ctf = reconstruct_grid(iofmt.read_package(args.package))
    elif args.ctf:
        ctf = iofmt.read_ctf(args.ctf)
    else:
        raise UsageError("give --ctf or --package")
    ref = iofmt.read_ctf(args.ref) if args.ref else None
    text = _metric_csv(args.metric, ctf, ref, args.window, args.q, args.p, args.n_avg)
    return {args.out or "-": text.encode()}


def run_pipeline(params: dict, out_dir: str) -> dict:
    """generate -> project -> emulate -> metrics. ``params`` is the manifest's parameter block.

    The output directory is deliberately not part of ``params``, so runs
    into different directories produce identical manifests.
    """
    cfg = _scenario(params["scenario"], params["seed"])
    k = params["k"] if params["k"] is not None else cfg.k_basis
    t_window = params["t_window"] if params["t_window"] is not None else cfg.t_window
    ctf = generate_ctf_grid(cfg)
    packages = _project(ctf, k, t_window)
    rec = reconstruct_grid(packages, ctf)
    signal = iofmt.read_signal(params["in"])
    nfft = params["nfft"] if params["nfft"] is not None else cfg.n_fft
    tau_max = params["tau_max"] if params["tau_max"] is not None else (cfg.tau_max or ctf.tau_hint)
    out, stats, ecfg = _emulate(packages, signal, nfft, tau_max)
    files = {
        "ctf.bin": iofmt.dumps_ctf(ctf),
        "package.bin": iofmt.dumps_package(packages),
        "out.sig": iofmt.dumps_signal(out),
        "error.csv": error_csv(ctf_error(ctf, rec)).encode(),
        "stats.csv": stats_csv(stats).encode(),
    }
    if params.get("metric") in ("doppler", "delay"):
        files[f"{params['metric']}.csv"] = _metric_csv(params["metric"], rec, None, tuple(params["window"]),
                                                       0, 0, 16).encode()
    manifest = {
        "tool": "chemu",
        "version": __version__,
        "format_version": iofmt.VERSION,
        "parameters": params,
        "resolved": {"k": k, "t_window": t_window, "n_fft": ecfg.n_fft, "tau_max": ecfg.tau_max,
                     "n_a": ecfg.n_a, "n_s": ecfg.n_s, "t_s": ecfg.t_s},
        "inputs": {"scenario": _sha256(open(params["scenario"], "rb").read()),
                   "signal": _sha256(open(params["in"], "rb").read())},
        "outputs": {name: _sha256(data) for name, data in sorted(files.items())},
    }
    files["manifest.json"] = (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode()
    return {os.path.join(out_dir, name): data for name, data in files.items()}


def _pipeline_params(args) -> dict:
    return {
        "scenario": os.path.abspath(args.scenario),
        "in": os.path.abspath(args.inp),
        "seed": args.seed,
        "k": args.k,
        "t_window": args.t_window,
        "nfft": args.nfft,
        "tau_max": args.tau_max,
        "metric": args.metric,
        "window": list(args.window),
    }


def cmd_pipeline(args):
    os.makedirs(args.out_dir, exist_ok=True)
    return run_pipeline(_pipeline_params(args), args.out_dir)


def cmd_replay(args):
    with open(args.manifest, encoding="utf-8") as fh:
        manifest = json.load(fh)
    try:
        params = dict(manifest["parameters"])
        expected = manifest["outputs"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"manifest lacks {exc}") from None
    if manifest.get("format_version") != iofmt.VERSION:
        raise FormatError(f"manifest format version {manifest.get('format_version')} != {iofmt.VERSION}")
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.manifest))
    os.makedirs(out_dir, exist_ok=True)
    outputs = run_pipeline(params, out_dir)
    got = {os.path.basename(path): _sha256(data) for path, data in outputs.items()}
    diff = sorted(name for name, digest in expected.items() if got.get(name) != digest)
    if diff:
        raise FormatError(f"replay differs from manifest in: {', '.join(diff)}")
    return outputs


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chemu", description="Non-stationary MIMO channel emulator.")
    parser.add_argument("--version", action="version", version=f"chemu {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func: Callable, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    p = add("generate", cmd_generate, "Simulate the scenario and write its normalised CTF grid.")
    p.add_argument("--scenario", required=True, help="scenario text file")
    p.add_argument("--out", required=True, help="output CTF file")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed (default: keep)")

    p = add("project", cmd_project, "Compress a CTF grid into chirp-subspace packages.")
    p.add_argument("--ctf", required=True, help="input CTF file")
    p.add_argument("--out", required=True, help="output package file")
    p.add_argument("--k", type=int, default=30, help="chirps per window (default 30)")
    p.add_argument("--t-window", type=float, default=None, help="window length in s (default: whole grid)")
    p.add_argument("--no-split", action="store_true", help="do not cut windows at cluster birth/death events")

    p = add("reconstruct", cmd_reconstruct, "Rebuild a CTF grid from a package file.")
    p.add_argument("--package", required=True, help="input package file")
    p.add_argument("--out", required=True, help="output CTF file")

    p = add("emulate", cmd_emulate, "Stream a signal file through the channel.")
    p.add_argument("--package", help="channel as a package file (required unless --ctf is given)")
    p.add_argument("--ctf", help="channel as a CTF file (required unless --package is given)")
    p.add_argument("--in", dest="inp", required=True, help="input signal file")
    p.add_argument("--out", required=True, help="output signal file")
    p.add_argument("--nfft", type=int, default=None, help="transform size N_H (default: power of two >= 8 N_a)")
    p.add_argument("--tau-max", type=float, default=None,
                   help="maximum delay in s (default: the CTF file's 99.9th percentile delay)")
    p.add_argument("--stats", default=None, help="per-block operation counts CSV (default: none)")
    p.add_argument("--single", action="store_true", help="single-precision processing")

    p = add("metrics", cmd_metrics, "Write a validation metric as long-format CSV.")
    p.add_argument("--ctf", help="grid to analyse (required unless --package is given)")
    p.add_argument("--package", help="package to reconstruct and analyse (required unless --ctf is given)")
    p.add_argument("--ref", help="reference CTF, required by --metric error (default: none)")
    p.add_argument("--metric", choices=("error", "doppler", "delay"), default="error", help="default: error")
    p.add_argument("--window", type=_window_arg, default=("gaussian", 256),
                   help="Doppler STFT window SHAPE:LENGTH (default gaussian:256)")
    p.add_argument("--n-avg", type=int, default=16, help="ACF neighbourhood half-width (default 16)")
    p.add_argument("--q", type=int, default=0, help="receive antenna (default 0)")
    p.add_argument("--p", type=int, default=0, help="transmit antenna (default 0)")
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")

    p = add("pipeline", cmd_pipeline, "generate, project, emulate and score in one run, with a manifest.")
    p.add_argument("--scenario", required=True, help="scenario text file")
    p.add_argument("--in", dest="inp", required=True, help="input signal file")
    p.add_argument("--out-dir", required=True, help="directory for all outputs")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed (default: keep)")
    p.add_argument("--k", type=int, default=None, help="chirps per window (default: scenario K)")
    p.add_argument("--t-window", type=float, default=None, help="window length in s (default: scenario t_window)")
    p.add_argument("--nfft", type=int, default=None, help="transform size (default: scenario n_fft or automatic)")
    p.add_argument("--tau-max", type=float, default=None, help="maximum delay (default: scenario or delay hint)")
    p.add_argument("--metric", choices=("error", "doppler", "delay"), default="error",
                   help="extra spectrum CSV besides error.csv (default: error only)")
    p.add_argument("--window", type=_window_arg, default=("gaussian", 256),
                   help="Doppler STFT window SHAPE:LENGTH (default gaussian:256)")

    p = add("replay", cmd_replay, "Re-run a pipeline from its manifest and check the output hashes.")
    p.add_argument("--manifest", required=True, help="manifest.json written by pipeline")
    p.add_argument("--out-dir", default=None, help="where to write (default: the manifest's directory)")
    return parser


def _write_all(outputs: dict) -> None:
    for path, data in outputs.items():
        if path == "-":
            sys.stdout.write(data.decode())
        else:
            iofmt.atomic_write(path, data)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        outputs = args.func(args)
    except UsageError as exc:
        print(f"chemu {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NearDependentBasis, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"chemu {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ChemuError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"chemu {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        _write_all(outputs)
    except OSError as exc:
        print(f"chemu {args.command}: cannot write output: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``specmix {simulate,unmix,evaluate,analyze,bench}``.

Exit codes: 0 success, 2 configuration/usage error, 3 I/O error,
4 shape/data error. Diagnostics go to standard error; all randomness comes
from explicit seeds echoed into ``manifest.json``.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from dataclasses import replace

from . import __version__
from .containers import (
    dump_json,
    ensure_dir,
    load_concentration_map,
    load_json,
    load_spectral_image,
    read_mixing_csv,
    save_concentration_map,
    save_spectral_image,
    write_mixing_csv,
    write_report_csv,
)
from .core import BandLayout, EmissionSpectrum, analyze_conditioning, build_mixing_matrix
from .errors import ConfigError, ContainerError, InvalidSpec, MalformedSpectrum, ShapeMismatch, SpecmixError
from .metrics import evaluate_unmixing
from .simulate import AcquisitionConfig, PhantomSpec, generate_phantom, simulate_acquisition
from .solvers import SOLVER_NAMES, SolverConfig, unmix

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DATA = 4


class CliFailure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _fail_config(msg: str) -> CliFailure:
    return CliFailure(EXIT_CONFIG, msg)


def _load_config(path, loader, what: str):
    try:
        doc = load_json(path)
    except FileNotFoundError:
        raise CliFailure(EXIT_IO, f"{what}: file not found: {path}")
    except OSError as exc:
        raise CliFailure(EXIT_IO, f"{what}: {exc}")
    except ConfigError as exc:
        raise _fail_config(f"{what}: {exc}")
    try:
        return loader(doc)
    except (ConfigError, InvalidSpec) as exc:
        raise _fail_config(f"{what}: {exc}")


def _load_spectra_dir(spectra_dir, n_required: int):
    if not os.path.isdir(spectra_dir):
        raise CliFailure(EXIT_IO, f"spectra directory not found: {spectra_dir}")
    paths = sorted(glob.glob(os.path.join(spectra_dir, "*.csv")))
    if len(paths) < n_required:
        names = [os.path.splitext(os.path.basename(p))[0] for p in paths]
        raise _fail_config(
            f"phantom has {n_required} fluorophore channels but {spectra_dir} holds "
            f"{len(paths)} spectrum CSVs ({', '.join(names) or 'none'}); "
            f"missing spectrum for fluorophore #{len(paths) + 1}"
        )
    try:
        spectra = [EmissionSpectrum.from_csv(p) for p in paths[:n_required]]
    except MalformedSpectrum as exc:
        raise _fail_config(str(exc))
    layout_path = os.path.join(spectra_dir, "layout.json")
    if os.path.exists(layout_path):
        with open(layout_path, "r", encoding="utf-8") as fh:
            try:
                layout = BandLayout.from_json(fh.read())
            except (ValueError, KeyError, json.JSONDecodeError) as exc:
                raise _fail_config(f"layout.json: {exc}")
    else:
        lo = min(float(s.wavelengths[0]) for s in spectra)
        hi = max(float(s.wavelengths[-1]) for s in spectra)
        layout = BandLayout.equispaced(lo, hi, 32)
    return spectra, layout


def cmd_simulate(args) -> int:
    phantom = _load_config(args.phantom, PhantomSpec.from_dict, "phantom config")
    acq = _load_config(args.acquisition, AcquisitionConfig.from_dict, "acquisition config")
    if args.seed is not None:
        phantom = replace(phantom, rng_seed=args.seed)
        acq = replace(acq, rng_seed=args.seed)
    spectra, layout = _load_spectra_dir(args.spectra_dir, phantom.n_channels)
    try:
        matrix = build_mixing_matrix(spectra, layout)
    except SpecmixError as exc:
        raise _fail_config(str(exc))

    gt = generate_phantom(phantom)
    gt.labels = [s.name for s in spectra]
    acquired = simulate_acquisition(gt, matrix, acq)

    ensure_dir(args.out)
    gt_path = os.path.join(args.out, "gt.spmx")
    sp_path = os.path.join(args.out, "spectral.spmx")
    mix_path = os.path.join(args.out, "mixing.csv")
    manifest_path = os.path.join(args.out, "manifest.json")
    try:
        save_concentration_map(gt_path, gt)
        save_spectral_image(sp_path, acquired, dtype="u16" if acq.quantize else "f32")
        write_mixing_csv(mix_path, matrix)
        dump_json(
            manifest_path,
            {
                "tool": {"name": "specmix", "version": __version__},
                "phantom": phantom.to_dict(),
                "acquisition": acq.to_dict(),
                "spectra": {s.name: os.path.basename(p) for s, p in zip(spectra, sorted(glob.glob(os.path.join(args.spectra_dir, "*.csv"))))},
                "layout": {"bands": [[lo, hi] for lo, hi in layout.bands]},
                "outputs": ["gt.spmx", "spectral.spmx", "mixing.csv"],
            },
        )
    except OSError as exc:
        raise CliFailure(EXIT_IO, f"writing outputs: {exc}")
    if args.verbose:
        print(f"wrote {gt_path}, {sp_path}, {mix_path}, {manifest_path}", file=sys.stderr)
    return EXIT_OK


def _load_spectral(path):
    try:
        return load_spectral_image(path)
    except FileNotFoundError:
        raise CliFailure(EXIT_IO, f"file not found: {path}")
    except ContainerError as exc:
        raise CliFailure(EXIT_DATA, str(exc))
    except OSError as exc:
        raise CliFailure(EXIT_IO, str(exc))


def _load_mixing(path, renormalize: bool = False):
    try:
        return read_mixing_csv(path, renormalize=renormalize)
    except FileNotFoundError:
        raise CliFailure(EXIT_IO, f"file not found: {path}")
    except ConfigError as exc:
        raise _fail_config(str(exc))
    except OSError as exc:
        raise CliFailure(EXIT_IO, str(exc))


def cmd_unmix(args) -> int:
    if args.method not in SOLVER_NAMES:
        raise _fail_config(f"unknown method {args.method!r}; expected one of {', '.join(SOLVER_NAMES)}")
    spectral = _load_spectral(args.spectral)
    matrix = _load_mixing(args.mixing)
    if args.solver_config is not None:
        cfg = _load_config(args.solver_config, SolverConfig.from_dict, "solver config")
    else:
        cfg = SolverConfig()
    if args.seed is not None:
        cfg = replace(cfg, rng_seed=args.seed)
    if args.method == "lumos" and spectral.n_bands > 5:
        print(
            f"warning: lumos is intended for low-band settings (<= 5 bands); input has {spectral.n_bands}",
            file=sys.stderr,
        )
    # The detector offset recorded at acquisition time is a known calibration
    # constant; remove it so solvers see photon-proportional intensities.
    offset = float(spectral.meta.get("acquisition", {}).get("offset", 0.0))
    if offset:
        spectral = type(spectral)(spectral.data - offset, spectral.band_layout, dict(spectral.meta))
    try:
        estimate = unmix(args.method, spectral, matrix, cfg)
    except ShapeMismatch as exc:
        raise CliFailure(EXIT_DATA, str(exc))
    except SpecmixError as exc:
        raise _fail_config(str(exc))

    out = args.out
    if out is None or os.path.isdir(out) or not out.endswith(".spmx"):
        ensure_dir(out or ".")
        out = os.path.join(out or ".", f"est_{args.method}.spmx")
    try:
        save_concentration_map(out, estimate)
    except OSError as exc:
        raise CliFailure(EXIT_IO, f"writing {out}: {exc}")
    if args.verbose:
        print(f"wrote {out}", file=sys.stderr)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        gt = load_concentration_map(args.gt)
        est = load_concentration_map(args.estimate)
    except FileNotFoundError as exc:
        raise CliFailure(EXIT_IO, str(exc))
    except ContainerError as exc:
        raise CliFailure(EXIT_DATA, str(exc))
    except OSError as exc:
        raise CliFailure(EXIT_IO, str(exc))
    try:
        report = evaluate_unmixing(gt, est)
    except ShapeMismatch as exc:
        raise CliFailure(EXIT_DATA, str(exc))
    except SpecmixError as exc:
        raise CliFailure(EXIT_DATA, str(exc))
    ensure_dir(args.out)
    method = est.meta.get("method", "-")
    dump_json(os.path.join(args.out, "metrics.json"), report.to_dict())
    write_report_csv(os.path.join(args.out, "metrics.csv"), report.to_csv_rows(method=str(method)))
    if args.verbose:
        print(f"wrote metrics.json and metrics.csv in {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_analyze(args) -> int:
    matrix = _load_mixing(args.mixing, renormalize=args.renormalize)
    report = analyze_conditioning(matrix)
    text = report.to_json()
    print(text)
    if args.out:
        try:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        except OSError as exc:
            raise CliFailure(EXIT_IO, f"writing {args.out}: {exc}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import SweepSpec, run_sweep, write_outputs

    spec = _load_config(args.spec, SweepSpec.from_dict, "sweep spec")
    if args.seed is not None:
        spec = replace(
            spec,
            phantom=replace(spec.phantom, rng_seed=args.seed),
            acquisition=replace(spec.acquisition, rng_seed=args.seed),
            solver_config=replace(spec.solver_config, rng_seed=args.seed),
        )
    threads = args.threads if args.threads else (os.cpu_count() or 1)
    if args.verbose:
        print(f"running {spec.axis} sweep: {len(spec.values)} values x "
              f"{spec.replicates} replicates x {len(spec.solvers)} solvers", file=sys.stderr)
    report = run_sweep(spec, threads=threads)
    try:
        written = write_outputs(report, args.out)
    except OSError as exc:
        raise CliFailure(EXIT_IO, f"writing outputs: {exc}")
    if args.verbose:
        for path in written:
            print(f"wrote {path}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specmix", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a phantom and acquire a spectral image")
    p.add_argument("phantom", help="phantom JSON config")
    p.add_argument("acquisition", help="acquisition JSON config")
    p.add_argument("spectra_dir", help="directory of emission CSVs (plus optional layout.json)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override all RNG seeds")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("unmix", help="run one solver on a spectral container")
    p.add_argument("spectral", help="spectral .spmx file")
    p.add_argument("mixing", help="mixing matrix CSV")
    p.add_argument("solver_config", nargs="?", default=None, help="solver JSON config")
    p.add_argument("--method", required=True, help=f"one of {', '.join(SOLVER_NAMES)}")
    p.add_argument("--out", default=None, help="output .spmx path or directory")
    p.add_argument("--seed", type=int, default=None, help="override the solver seed")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_unmix)

    p = sub.add_parser("evaluate", help="score an estimate against ground truth")
    p.add_argument("gt", help="ground-truth .spmx")
    p.add_argument("estimate", help="estimate .spmx")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="conditioning report for a mixing matrix")
    p.add_argument("mixing", help="mixing matrix CSV")
    p.add_argument("--renormalize", action="store_true", help="rescale non-normalized columns")
    p.add_argument("--out", default=None, help="also write the JSON report here")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", help="run an experiment sweep")
    p.add_argument("--spec", required=True, help="sweep spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override all RNG seeds")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: logical cores)")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, matching the config/usage code
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except SpecmixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

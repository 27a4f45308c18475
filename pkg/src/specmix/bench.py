"""Experiment sweeps over phantoms: exposure (noise), spectral-overlap shift,
and band-count reduction in the same-per-band-SNR and same-total-photon-budget
regimes. Produces per-axis tables shaped like per-method result tables plus a
monotonicity/ranking summary.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .containers import REPORT_COLUMNS, dump_json, ensure_dir, format_report_value, write_report_csv
from .core import (
    BandLayout,
    ConcentrationMap,
    EmissionSpectrum,
    MixingMatrix,
    SpectralImage,
    analyze_conditioning,
    build_mixing_matrix,
)
from .errors import ConfigError, InvalidSpec, SpecmixError
from .metrics import MetricReport, evaluate_unmixing, spectral_snr
from .simulate import AcquisitionConfig, PhantomSpec, even_groups, generate_phantom, simulate_acquisition
from .solvers import SOLVER_NAMES, SolverConfig, unmix

AXES = ("exposure", "overlap_delta", "band_count_same_snr", "band_count_same_budget")

METRIC_NAMES = ("psnr_ri", "ms_ssim_ri", "pearson", "snr")

# k-means on raw spectra degrades with band count (curse of dimensionality);
# cells beyond this limit are recorded as skipped rather than run.
LUMOS_MAX_BANDS = 5


def default_spectra(n: int, lo_nm: float, hi_nm: float) -> list[EmissionSpectrum]:
    """Evenly spaced, broadly overlapping parametric emission spectra."""
    span = hi_nm - lo_nm
    peaks = [lo_nm + span * (j + 1) / (n + 1) for j in range(n)]
    fwhm = 0.9 * span / (n + 1)
    return [
        EmissionSpectrum.lognormal(f"fluor_{j + 1}", peak_nm=p, fwhm_nm=fwhm, skew=1.25)
        for j, p in enumerate(peaks)
    ]


def resolve_spectrum(doc: dict) -> EmissionSpectrum:
    kind = doc.get("kind", "lognormal")
    if kind == "csv":
        return EmissionSpectrum.from_csv(doc["path"], doc.get("name"))
    if kind == "lognormal":
        return EmissionSpectrum.lognormal(
            doc.get("name", "fluor"),
            peak_nm=float(doc["peak_nm"]),
            fwhm_nm=float(doc["fwhm_nm"]),
            skew=float(doc.get("skew", 1.25)),
        )
    raise ConfigError(f"unknown spectrum kind {kind!r}")


def resolve_layout(doc: dict | None) -> BandLayout:
    if doc is None:
        return BandLayout.equispaced(480.0, 700.0, 32)
    if "bands" in doc:
        return BandLayout(tuple((b[0], b[1]) for b in doc["bands"]))
    return BandLayout.equispaced(float(doc["lo_nm"]), float(doc["hi_nm"]), int(doc["n_bands"]))


@dataclass(frozen=True)
class SweepSpec:
    """One experiment axis over a fixed phantom."""

    axis: str
    values: tuple[float, ...]
    phantom: PhantomSpec
    solvers: tuple[str, ...]
    acquisition: AcquisitionConfig
    replicates: int = 1
    spectra: tuple[dict, ...] = ()
    layout: dict | None = None
    solver_config: SolverConfig = field(default_factory=SolverConfig)
    dataset: str = "phantom"

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "solvers", tuple(self.solvers))
        object.__setattr__(self, "spectra", tuple(self.spectra))
        if self.axis not in AXES:
            raise InvalidSpec(f"axis must be one of {AXES}, got {self.axis!r}")
        if len(self.values) == 0:
            raise InvalidSpec("values must be non-empty")
        diffs = np.diff(self.values)
        if len(diffs) and not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise InvalidSpec("values must be strictly monotone")
        if self.replicates < 1:
            raise InvalidSpec("replicates must be >= 1")
        for name in self.solvers:
            if name not in SOLVER_NAMES:
                raise InvalidSpec(f"unknown solver {name!r}")
        if self.axis == "overlap_delta" and self.phantom.n_channels != 2:
            raise InvalidSpec("overlap_delta sweeps use a two-channel phantom")

    @classmethod
    def from_dict(cls, doc: dict) -> "SweepSpec":
        known = {
            "axis", "values", "phantom", "solvers", "acquisition", "replicates",
            "spectra", "layout", "solver_config", "dataset",
        }
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"SweepSpec: unknown keys {sorted(unknown)}")
        try:
            return cls(
                axis=doc["axis"],
                values=tuple(doc["values"]),
                phantom=PhantomSpec.from_dict(doc["phantom"]),
                solvers=tuple(doc["solvers"]),
                acquisition=AcquisitionConfig.from_dict(doc["acquisition"]),
                replicates=int(doc.get("replicates", 1)),
                spectra=tuple(doc.get("spectra", ())),
                layout=doc.get("layout"),
                solver_config=SolverConfig.from_dict(doc.get("solver_config", {})),
                dataset=str(doc.get("dataset", "phantom")),
            )
        except KeyError as exc:
            raise ConfigError(f"SweepSpec: missing key {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "values": list(self.values),
            "phantom": self.phantom.to_dict(),
            "solvers": list(self.solvers),
            "acquisition": self.acquisition.to_dict(),
            "replicates": self.replicates,
            "spectra": [dict(d) for d in self.spectra],
            "layout": dict(self.layout) if self.layout else None,
            "solver_config": self.solver_config.to_dict(),
            "dataset": self.dataset,
        }


@dataclass(frozen=True)
class Condition:
    """Everything needed to simulate and solve one sweep value."""

    value: float
    layout: BandLayout
    matrix: MixingMatrix
    acquisition: AcquisitionConfig
    kappa: float


def build_conditions(spec: SweepSpec) -> list[Condition]:
    """Materialize the per-value mixing matrix and acquisition settings."""
    base_layout = resolve_layout(spec.layout)
    if spec.spectra:
        spectra = [resolve_spectrum(d) for d in spec.spectra]
    else:
        lo = base_layout.bands[0][0]
        hi = base_layout.bands[-1][1]
        spectra = default_spectra(spec.phantom.n_channels, lo, hi)

    conditions = []
    for value in spec.values:
        if spec.axis == "exposure":
            layout = base_layout
            matrix = build_mixing_matrix(spectra[: spec.phantom.n_channels], layout)
            acq = replace(spec.acquisition, exposure_ms=float(value))
        elif spec.axis == "overlap_delta":
            layout = base_layout
            base = spectra[0]
            matrix = build_mixing_matrix([base, base.shifted(float(value))], layout)
            acq = spec.acquisition
        else:
            n_out = int(value)
            if not 1 <= n_out <= base_layout.n_bands:
                raise InvalidSpec(f"band count {n_out} outside 1..{base_layout.n_bands}")
            layout = base_layout.merged(even_groups(base_layout.n_bands, n_out))
            matrix = build_mixing_matrix(spectra[: spec.phantom.n_channels], layout)
            if spec.axis == "band_count_same_snr":
                scale = n_out / base_layout.n_bands
                acq = replace(
                    spec.acquisition,
                    photons_per_unit_per_ms=spec.acquisition.photons_per_unit_per_ms * scale,
                )
            else:
                acq = spec.acquisition
        conditions.append(Condition(float(value), layout, matrix, acq, analyze_conditioning(matrix).kappa))
    return conditions


@dataclass
class CellResult:
    value: float
    replicate: int
    solver: str
    report: MetricReport | None
    spectral_snr: float | None
    error: str | None = None


@dataclass
class BenchReport:
    """All cells of one sweep plus aggregation helpers."""

    spec: SweepSpec
    conditions: list[Condition]
    labels: list[str]
    cells: list[CellResult]

    def _cell_map(self) -> dict:
        return {(c.value, c.replicate, c.solver): c for c in self.cells}

    def aggregate(self) -> dict:
        """(value, solver) -> {channel -> {metric -> (mean, std)}} over replicates."""
        out: dict = {}
        for cond in self.conditions:
            for solver in self.spec.solvers:
                reps = [
                    c.report
                    for c in self.cells
                    if c.value == cond.value and c.solver == solver and c.report is not None
                ]
                per_channel: dict = {}
                for ch_idx, label in enumerate(list(self.labels) + ["mean"]):
                    stats = {}
                    for metric in METRIC_NAMES:
                        vals = []
                        for rep in reps:
                            rec = rep.mean if label == "mean" else rep.per_channel[ch_idx]
                            vals.append(getattr(rec, metric))
                        if vals:
                            stats[metric] = (float(np.mean(vals)), float(np.std(vals)))
                        else:
                            stats[metric] = (float("nan"), float("nan"))
                    per_channel[label] = stats
                out[(cond.value, solver)] = per_channel
        return out

    def condition_snr(self) -> dict:
        """value -> (mean, std) of the input spectral SNR over replicates."""
        out = {}
        for cond in self.conditions:
            vals = sorted(
                {
                    (c.replicate, c.spectral_snr)
                    for c in self.cells
                    if c.value == cond.value and c.spectral_snr is not None
                }
            )
            snrs = [v for _, v in vals]
            out[cond.value] = (float(np.mean(snrs)), float(np.std(snrs))) if snrs else (float("nan"), float("nan"))
        return out

    def errors(self) -> list[dict]:
        return [
            {"value": c.value, "replicate": c.replicate, "solver": c.solver, "error": c.error}
            for c in self.cells
            if c.error
        ]

    def to_rows(self) -> list[dict]:
        """Flat CSV rows per the shared report schema (replicate means)."""
        agg = self.aggregate()
        rows = []
        for cond in self.conditions:
            for solver in self.spec.solvers:
                per_channel = agg[(cond.value, solver)]
                for label in list(self.labels) + ["mean"]:
                    stats = per_channel[label]
                    rows.append(
                        {
                            "dataset": self.spec.dataset,
                            "method": solver,
                            "condition_key": self.spec.axis,
                            "condition_value": format_report_value(cond.value),
                            "channel": label,
                            "psnr_ri": stats["psnr_ri"][0],
                            "ms_ssim_ri": stats["ms_ssim_ri"][0],
                            "pearson": stats["pearson"][0],
                            "snr": stats["snr"][0],
                        }
                    )
        return rows

    def to_json_doc(self) -> dict:
        agg = self.aggregate()
        cond_snr = self.condition_snr()
        table = []
        for cond in self.conditions:
            entry = {
                "value": cond.value,
                "kappa": format_report_value(cond.kappa),
                "spectral_snr_mean": format_report_value(cond_snr[cond.value][0]),
                "spectral_snr_std": format_report_value(cond_snr[cond.value][1]),
                "methods": {},
            }
            for solver in self.spec.solvers:
                per_channel = agg[(cond.value, solver)]
                entry["methods"][solver] = {
                    label: {
                        metric: {
                            "mean": format_report_value(stats[metric][0]),
                            "std": format_report_value(stats[metric][1]),
                        }
                        for metric in METRIC_NAMES
                    }
                    for label, stats in per_channel.items()
                }
            table.append(entry)
        return {
            "axis": self.spec.axis,
            "dataset": self.spec.dataset,
            "values": list(self.spec.values),
            "solvers": list(self.spec.solvers),
            "replicates": self.spec.replicates,
            "conditions": table,
            "errors": self.errors(),
        }

    def monotonicity(self) -> dict:
        """Directional checks along the sweep values (per solver, mean channel)."""
        agg = self.aggregate()
        cond_snr = self.condition_snr()
        values = [c.value for c in self.conditions]
        kappas = [c.kappa for c in self.conditions]
        snrs = [cond_snr[v][0] for v in values]

        def series_increasing(series: list[float]) -> bool:
            arr = np.array(series, dtype=float)
            return bool(np.all(np.isfinite(arr)) and np.all(np.diff(arr) > 0))

        doc = {
            "values": values,
            "kappa": [format_report_value(k) for k in kappas],
            "kappa_strictly_decreasing": bool(
                np.all(np.isfinite(kappas)) and np.all(np.diff(kappas) < 0)
            ),
            "spectral_snr": snrs,
            "spectral_snr_strictly_increasing": series_increasing(snrs),
            "psnr_strictly_increasing": {},
        }
        for solver in self.spec.solvers:
            series = [agg[(v, solver)]["mean"]["psnr_ri"][0] for v in values]
            doc["psnr_strictly_increasing"][solver] = series_increasing(series)
        return doc


def _run_cell(
    spec: SweepSpec,
    cond: Condition,
    replicate: int,
    gt: ConcentrationMap,
) -> list[CellResult]:
    acq = replace(cond.acquisition, rng_seed=cond.acquisition.rng_seed + replicate)
    acquired = simulate_acquisition(gt, cond.matrix, acq)
    try:
        ssnr = spectral_snr(acquired)
    except SpecmixError:
        ssnr = None
    # Detector offset is a known calibration constant; remove it before solving.
    solver_input = SpectralImage(acquired.data - acq.offset, acquired.band_layout, dict(acquired.meta))

    results = []
    for solver in spec.solvers:
        if solver == "lumos" and cond.matrix.n_bands > LUMOS_MAX_BANDS:
            results.append(
                CellResult(cond.value, replicate, solver, None, ssnr,
                           f"lumos skipped: {cond.matrix.n_bands} bands > {LUMOS_MAX_BANDS}")
            )
            continue
        try:
            estimate = unmix(solver, solver_input, cond.matrix, spec.solver_config)
            report = evaluate_unmixing(gt, estimate)
            results.append(CellResult(cond.value, replicate, solver, report, ssnr))
        except SpecmixError as exc:
            results.append(CellResult(cond.value, replicate, solver, None, ssnr, str(exc)))
    return results


def run_sweep(spec: SweepSpec, threads: int = 1) -> BenchReport:
    """Execute the sweep: per value build the mixing matrix and acquisition,
    simulate ``replicates`` noisy acquisitions of the fixed phantom, run each
    solver and score it against the ground truth. Failed cells carry an error
    string; the run continues.
    """
    conditions = build_conditions(spec)
    gt = generate_phantom(spec.phantom)
    jobs = [(cond, rep) for cond in conditions for rep in range(spec.replicates)]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(lambda args: _run_cell(spec, args[0], args[1], gt), jobs))
    else:
        chunks = [_run_cell(spec, cond, rep, gt) for cond, rep in jobs]

    keyed = {}
    for chunk in chunks:
        for cell in chunk:
            keyed[(cell.value, cell.replicate, cell.solver)] = cell
    ordered = [
        keyed[(cond.value, rep, solver)]
        for cond in conditions
        for rep in range(spec.replicates)
        for solver in spec.solvers
    ]
    return BenchReport(spec, conditions, list(gt.labels), ordered)


def compare_methods(report: BenchReport) -> dict:
    """Rank methods per condition and metric on the channel-mean values.

    Best and second best are flagged; exact ties share a rank and are broken
    lexicographically in the ordering; errored cells are excluded and noted.
    """
    agg = report.aggregate()
    ranking: dict = {"axis": report.spec.axis, "conditions": []}
    for cond in report.conditions:
        entry: dict = {"value": cond.value, "metrics": {}}
        excluded = sorted(
            {
                c.solver
                for c in report.cells
                if c.value == cond.value and c.report is None
            }
        )
        for metric in METRIC_NAMES:
            scored = []
            for solver in report.spec.solvers:
                mean_val = agg[(cond.value, solver)]["mean"][metric][0]
                if np.isnan(mean_val):
                    continue
                scored.append((solver, mean_val))
            scored.sort(key=lambda t: (-t[1], t[0]))
            distinct = sorted({v for _, v in scored}, reverse=True)
            best_val = distinct[0] if distinct else None
            second_val = distinct[1] if len(distinct) > 1 else None
            ranks = []
            for idx, (solver, val) in enumerate(scored):
                tied = sum(1 for _, v in scored if v == val) > 1
                ranks.append(
                    {
                        "method": solver,
                        "value": format_report_value(val),
                        "rank": idx + 1,
                        "best": val == best_val,
                        "second": second_val is not None and val == second_val,
                        "tied": tied,
                    }
                )
            entry["metrics"][metric] = ranks
        if excluded:
            entry["excluded"] = excluded
        ranking["conditions"].append(entry)
    return ranking


def write_outputs(report: BenchReport, out_dir, render: bool = True) -> list[str]:
    """Write table_<axis>.csv/.json, summary.json and (optionally) figures."""
    ensure_dir(out_dir)
    import os

    axis = report.spec.axis
    written = []
    csv_path = os.path.join(out_dir, f"table_{axis}.csv")
    write_report_csv(csv_path, report.to_rows())
    written.append(csv_path)
    json_path = os.path.join(out_dir, f"table_{axis}.json")
    dump_json(json_path, report.to_json_doc())
    written.append(json_path)
    summary_path = os.path.join(out_dir, "summary.json")
    dump_json(
        summary_path,
        {
            "axis": axis,
            "monotonicity": report.monotonicity(),
            "ranking": compare_methods(report),
            "spec": report.spec.to_dict(),
        },
    )
    written.append(summary_path)
    if render:
        from .figures import render_report

        written.extend(render_report(report, out_dir))
    return written

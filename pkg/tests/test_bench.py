import numpy as np
import pytest

from specmix.bench import (
    BenchReport,
    SweepSpec,
    build_conditions,
    compare_methods,
    default_spectra,
    run_sweep,
    write_outputs,
)
from specmix.core import BandLayout, ConcentrationMap, build_mixing_matrix
from specmix.errors import ConfigError, InvalidSpec
from specmix.metrics import psnr_ri
from specmix.simulate import AcquisitionConfig, PhantomSpec, generate_phantom, simulate_acquisition
from specmix.solvers import SolverConfig, unmix, unmix_fclu, unmix_nmf_ri


def small_spec(**overrides):
    base = dict(
        axis="exposure",
        values=(2.0, 20.0),
        phantom=PhantomSpec("blobs", (1, 128, 128), 2, rng_seed=11),
        solvers=("lu",),
        acquisition=AcquisitionConfig(exposure_ms=20.0, rng_seed=5),
        replicates=2,
        dataset="unit",
    )
    base.update(overrides)
    return SweepSpec(**base)


class TestSweepSpec:
    def test_rejects_unknown_axis(self):
        with pytest.raises(InvalidSpec):
            small_spec(axis="temperature")

    def test_rejects_non_monotone_values(self):
        with pytest.raises(InvalidSpec):
            small_spec(values=(2.0, 10.0, 5.0))

    def test_rejects_unknown_solver(self):
        with pytest.raises(InvalidSpec):
            small_spec(solvers=("lu", "magic"))

    def test_overlap_requires_two_channels(self):
        with pytest.raises(InvalidSpec):
            small_spec(axis="overlap_delta", phantom=PhantomSpec("blobs", (1, 128, 128), 3))

    def test_from_dict_rejects_unknown_keys(self):
        doc = small_spec().to_dict()
        doc["gpu"] = True
        with pytest.raises(ConfigError):
            SweepSpec.from_dict(doc)

    def test_dict_round_trip(self):
        spec = small_spec()
        again = SweepSpec.from_dict(spec.to_dict())
        assert again == spec


class TestBuildConditions:
    def test_exposure_axis_varies_exposure_only(self):
        conds = build_conditions(small_spec())
        assert [c.acquisition.exposure_ms for c in conds] == [2.0, 20.0]
        assert conds[0].matrix.m.tobytes() == conds[1].matrix.m.tobytes()

    def test_overlap_axis_shifts_second_spectrum(self):
        spec = small_spec(
            axis="overlap_delta",
            values=(2.0, 50.0),
            spectra=({"kind": "lognormal", "name": "egfp", "peak_nm": 509, "fwhm_nm": 40, "skew": 1.3},),
        )
        conds = build_conditions(spec)
        assert conds[0].kappa > conds[1].kappa

    def test_band_count_same_budget_keeps_gain(self):
        spec = small_spec(axis="band_count_same_budget", values=(3.0, 32.0))
        conds = build_conditions(spec)
        assert conds[0].matrix.n_bands == 3
        assert conds[1].matrix.n_bands == 32
        gains = {c.acquisition.photons_per_unit_per_ms for c in conds}
        assert len(gains) == 1

    def test_band_count_same_snr_scales_gain(self):
        spec = small_spec(axis="band_count_same_snr", values=(4.0, 32.0))
        conds = build_conditions(spec)
        g4 = conds[0].acquisition.photons_per_unit_per_ms
        g32 = conds[1].acquisition.photons_per_unit_per_ms
        assert g4 == pytest.approx(g32 * 4 / 32)

    def test_underdetermined_condition_flagged(self):
        spec = small_spec(
            axis="band_count_same_snr",
            values=(3.0, 32.0),
            phantom=PhantomSpec("blobs", (1, 128, 128), 4, rng_seed=11),
        )
        conds = build_conditions(spec)
        assert conds[0].kappa == np.inf  # 3 bands, 4 fluorophores


class TestRunSweep:
    def test_shapes_and_rows(self):
        report = run_sweep(small_spec())
        assert len(report.cells) == 2 * 2 * 1  # values x replicates x solvers
        rows = report.to_rows()
        assert len(rows) == 2 * 1 * 3  # values x solvers x (2 channels + mean)
        assert {r["channel"] for r in rows} == {"fluor_1", "fluor_2", "mean"}

    def test_lumos_skipped_on_many_bands(self):
        report = run_sweep(small_spec(solvers=("lu", "lumos")))
        errors = report.errors()
        assert all("lumos skipped" in e["error"] for e in errors)
        assert len(errors) == 4  # every (value, replicate) cell

    def test_thread_parallel_identical(self):
        spec = small_spec()
        serial = run_sweep(spec, threads=1)
        parallel = run_sweep(spec, threads=4)
        assert serial.to_rows() == parallel.to_rows()

    def test_exposure_monotonicity_flags(self):
        spec = small_spec(values=(2.0, 5.0, 10.0, 20.0), replicates=3)
        mono = run_sweep(spec).monotonicity()
        assert mono["spectral_snr_strictly_increasing"]
        assert mono["psnr_strictly_increasing"]["lu"]

    def test_rerun_identical_csv(self, tmp_path):
        spec = small_spec()
        a = tmp_path / "a"
        b = tmp_path / "b"
        write_outputs(run_sweep(spec), a, render=False)
        write_outputs(run_sweep(spec), b, render=False)
        assert (a / "table_exposure.csv").read_bytes() == (b / "table_exposure.csv").read_bytes()
        assert (a / "table_exposure.json").read_bytes() == (b / "table_exposure.json").read_bytes()
        assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()

    def test_figures_rendered(self, tmp_path):
        written = write_outputs(run_sweep(small_spec()), tmp_path, render=True)
        pngs = [p for p in written if p.endswith(".png")]
        assert len(pngs) >= 4
        import os

        assert all(os.path.getsize(p) > 0 for p in pngs)


class TestCompareMethods:
    def test_single_method_ranks_first(self):
        report = run_sweep(small_spec())
        ranking = compare_methods(report)
        for cond in ranking["conditions"]:
            for metric, rows in cond["metrics"].items():
                assert rows[0]["method"] == "lu"
                assert rows[0]["best"]

    def test_tie_breaks_lexicographically(self):
        report = run_sweep(small_spec(solvers=("lu", "hyu")))
        # force a tie by overwriting hyu's cells with lu's reports
        by_key = {(c.value, c.replicate, c.solver): c for c in report.cells}
        for (v, r, s), cell in list(by_key.items()):
            if s == "hyu":
                cell.report = by_key[(v, r, "lu")].report
        ranking = compare_methods(report)
        rows = ranking["conditions"][0]["metrics"]["psnr_ri"]
        assert [r["method"] for r in rows] == ["hyu", "lu"]
        assert all(r["tied"] and r["best"] for r in rows)

    def test_errored_cells_excluded(self):
        report = run_sweep(small_spec(solvers=("lu", "lumos")))
        ranking = compare_methods(report)
        for cond in ranking["conditions"]:
            assert cond["excluded"] == ["lumos"]
            for rows in cond["metrics"].values():
                assert all(r["method"] != "lumos" for r in rows)


class TestNoiseFreeControl:
    """Noiseless acquisition, well-conditioned matrix: every solver clears
    80 dB range-invariant PSNR on its feasible regime (LUMoS excluded: hard
    assignment cannot represent mixed voxels)."""

    ACQ = AcquisitionConfig(
        exposure_ms=1.0, photons_per_unit_per_ms=1.0, read_noise_sigma=0.0,
        offset=0.0, noiseless=True, rng_seed=0,
    )

    def _psnr(self, gt, est):
        return min(psnr_ri(gt.data[j], est.data[j]) for j in range(gt.n_channels))

    def test_pixel_decomposable_solvers(self):
        gt = generate_phantom(PhantomSpec("blobs", (1, 128, 128), 2, rng_seed=21))
        m = build_mixing_matrix(default_spectra(2, 480, 700), BandLayout.equispaced(480, 700, 8))
        s = simulate_acquisition(gt, m, self.ACQ)
        cfg = SolverConfig(admm_rho=0.05, admm_tol=1e-10, admm_max_iter=5000, rlu_iters=2000)
        for method in ("lu", "nnlu", "rlu"):
            est = unmix(method, s, m, cfg)
            assert self._psnr(gt, est) > 80.0, method

    def test_fclu_on_sum_normalized_phantom(self):
        gt0 = generate_phantom(PhantomSpec("blobs", (1, 128, 128), 2, rng_seed=21))
        total = gt0.data.sum(axis=0)
        mask = total > 1e-9
        data = gt0.data.copy()
        data[:, mask] /= total[mask]
        data[:, ~mask] = 0.0
        gt = ConcentrationMap(data, list(gt0.labels))
        m = build_mixing_matrix(default_spectra(2, 480, 700), BandLayout.equispaced(480, 700, 8))
        s = simulate_acquisition(gt, m, self.ACQ)
        est = unmix_fclu(s, m, SolverConfig(admm_rho=0.05, admm_tol=1e-10, admm_max_iter=5000))
        assert self._psnr(gt, est) > 80.0

    def test_hyu_on_disjoint_populations(self):
        gt0 = generate_phantom(PhantomSpec("blobs", (1, 128, 128), 2, rng_seed=21))
        data = gt0.data.copy()
        data[0, :, :, 64:] = 0.0
        data[1, :, :, :64] = 0.0
        gt = ConcentrationMap(data, list(gt0.labels))
        m = build_mixing_matrix(default_spectra(2, 480, 700), BandLayout.equispaced(480, 700, 8))
        s = simulate_acquisition(gt, m, self.ACQ)
        est = unmix("hyu", s, m, SolverConfig())
        assert self._psnr(gt, est) > 80.0

    def test_nmf_ri_on_identifiable_spectra(self):
        gt = generate_phantom(PhantomSpec("blobs", (1, 128, 128), 2, rng_seed=21))
        layout = BandLayout.equispaced(440, 740, 16)
        from specmix.core import EmissionSpectrum

        specs = [
            EmissionSpectrum.lognormal("a", 500, 35, 1.25),
            EmissionSpectrum.lognormal("b", 660, 35, 1.25),
        ]
        m = build_mixing_matrix(specs, layout)
        s = simulate_acquisition(gt, m, self.ACQ)
        est, _ = unmix_nmf_ri(s, m, SolverConfig(nmf_iters=2000, rng_seed=4))
        assert self._psnr(gt, est) > 80.0

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specmix.core import (
    BandLayout,
    ConcentrationMap,
    EmissionSpectrum,
    MixingMatrix,
    SpectralImage,
    analyze_conditioning,
    build_mixing_matrix,
    discretize_spectrum,
    mix_forward,
)
from specmix.errors import MalformedSpectrum, NoOverlap, ShapeMismatch

from conftest import random_mixing, voxels_map


def fine_grid_band_average(spec: EmissionSpectrum, layout: BandLayout, step=0.1):
    """Independent oracle: rectangle-rule band averages on a 0.1 nm grid."""
    cols = []
    for lo, hi in layout.bands:
        grid = np.arange(lo, hi, step) + step / 2
        vals = np.interp(grid, spec.wavelengths, spec.intensities, left=0.0, right=0.0)
        cols.append(vals.mean())
    col = np.array(cols)
    return col / col.sum()


class TestBandLayout:
    def test_rejects_overlap(self):
        with pytest.raises(ValueError):
            BandLayout(((400.0, 500.0), (450.0, 550.0)))

    def test_rejects_empty_interval(self):
        with pytest.raises(ValueError):
            BandLayout(((500.0, 500.0),))

    def test_json_round_trip(self):
        layout = BandLayout.equispaced(400, 700, 5)
        again = BandLayout.from_json(layout.to_json())
        assert again == layout

    def test_gaps_allowed(self):
        BandLayout(((400.0, 450.0), (500.0, 550.0)))


class TestEmissionSpectrum:
    def test_rejects_nonincreasing_wavelengths(self):
        with pytest.raises(MalformedSpectrum):
            EmissionSpectrum(np.array([500.0, 500.0]), np.array([1.0, 2.0]))

    def test_rejects_all_zero(self):
        with pytest.raises(MalformedSpectrum):
            EmissionSpectrum(np.array([500.0, 600.0]), np.array([0.0, 0.0]))

    def test_shift_zero_is_identity(self):
        s = EmissionSpectrum.lognormal("x", 510, 40)
        s0 = s.shifted(0.0)
        np.testing.assert_array_equal(s0.wavelengths, s.wavelengths)
        np.testing.assert_array_equal(s0.intensities, s.intensities)

    def test_shift_inverse_composition(self):
        s = EmissionSpectrum.lognormal("x", 510, 40)
        back = s.shifted(50.0).shifted(-50.0)
        np.testing.assert_array_equal(back.wavelengths, s.wavelengths)
        np.testing.assert_array_equal(back.intensities, s.intensities)

    def test_csv_round_trip(self, tmp_path):
        s = EmissionSpectrum.lognormal("egfp", 509, 38, 1.3)
        path = tmp_path / "egfp.csv"
        s.to_csv(path)
        again = EmissionSpectrum.from_csv(path)
        assert again.name == "egfp"
        np.testing.assert_array_equal(again.wavelengths, s.wavelengths)
        np.testing.assert_array_equal(again.intensities, s.intensities)

    def test_lognormal_peak_and_width(self):
        s = EmissionSpectrum.lognormal("x", 510, 40, 1.3, step_nm=0.05)
        peak_idx = s.intensities.argmax()
        assert abs(s.wavelengths[peak_idx] - 510) < 0.06
        above = s.wavelengths[s.intensities >= 0.5]
        assert abs((above[-1] - above[0]) - 40.0) < 0.2


class TestDiscretize:
    def test_flat_spectrum_equal_bands(self):
        flat = EmissionSpectrum(np.array([400.0, 700.0]), np.array([1.0, 1.0]))
        layout = BandLayout.equispaced(400, 700, 4)
        np.testing.assert_allclose(discretize_spectrum(flat, layout), [0.25] * 4, atol=1e-12)

    def test_triangle_mirror_symmetry(self):
        tri = EmissionSpectrum(np.array([450.0, 500.0, 550.0]), np.array([0.0, 1.0, 0.0]))
        layout = BandLayout(((450.0, 500.0), (500.0, 550.0)))
        np.testing.assert_allclose(discretize_spectrum(tri, layout), [0.5, 0.5], atol=1e-12)

    def test_two_point_ramp_against_fine_grid_oracle(self):
        spec = EmissionSpectrum(np.array([500.0, 600.0]), np.array([0.0, 2.0]))
        layout = BandLayout(((500.0, 550.0), (550.0, 600.0)))
        col = discretize_spectrum(spec, layout)
        np.testing.assert_allclose(col, [0.25, 0.75], atol=1e-12)
        oracle = fine_grid_band_average(spec, layout)
        np.testing.assert_allclose(col, oracle, atol=1e-3)

    def test_random_spectra_match_fine_grid_oracle(self, rng):
        layout = BandLayout.equispaced(480, 700, 8)
        for _ in range(5):
            w = np.sort(rng.uniform(460, 720, size=12))
            w += np.arange(12) * 1e-6  # enforce strict increase
            spec = EmissionSpectrum(w, rng.uniform(0.1, 2.0, size=12))
            col = discretize_spectrum(spec, layout)
            oracle = fine_grid_band_average(spec, layout, step=0.01)
            np.testing.assert_allclose(col, oracle, atol=1e-4)

    def test_no_overlap_raises(self):
        spec = EmissionSpectrum(np.array([300.0, 350.0]), np.array([1.0, 1.0]))
        with pytest.raises(NoOverlap):
            discretize_spectrum(spec, BandLayout.equispaced(400, 700, 4))

    def test_result_is_normalized_and_nonnegative(self):
        spec = EmissionSpectrum.lognormal("x", 520, 45)
        col = discretize_spectrum(spec, BandLayout.equispaced(480, 700, 32))
        assert np.all(col >= 0)
        assert abs(col.sum() - 1.0) < 1e-12


class TestBuildMixingMatrix:
    def test_disjoint_deltas_give_identity(self):
        a = EmissionSpectrum(np.array([449.0, 450.0, 451.0]), np.array([0.0, 1.0, 0.0]))
        b = EmissionSpectrum(np.array([549.0, 550.0, 551.0]), np.array([0.0, 1.0, 0.0]))
        layout = BandLayout(((400.0, 500.0), (500.0, 600.0)))
        m = build_mixing_matrix([a, b], layout)
        np.testing.assert_allclose(m.m, np.eye(2), atol=1e-12)

    def test_identical_spectra_rank_deficient(self):
        s = EmissionSpectrum.lognormal("x", 520, 45)
        layout = BandLayout.equispaced(480, 700, 8)
        m = build_mixing_matrix([s, s], layout)
        report = analyze_conditioning(m)
        assert report.rank_deficient
        assert report.singular_values[-1] < 1e-12

    def test_shift_decorrelates_egfp_columns(self):
        egfp = EmissionSpectrum.lognormal("egfp", 509, 40, 1.3)
        layout = BandLayout.equispaced(480, 700, 32)
        m = build_mixing_matrix([egfp, egfp.shifted(50.0)], layout)
        c0, c1 = m.m[:, 0], m.m[:, 1]
        # independent dot-product oracle
        cos = sum(a * b for a, b in zip(c0, c1)) / (
            np.sqrt(sum(a * a for a in c0)) * np.sqrt(sum(b * b for b in c1))
        )
        assert cos < 0.9

    def test_error_carries_fluorophore_name(self):
        bad = EmissionSpectrum(np.array([300.0, 310.0]), np.array([1.0, 1.0]), name="uvprobe")
        with pytest.raises(NoOverlap, match="uvprobe"):
            build_mixing_matrix([bad], BandLayout.equispaced(400, 700, 4))


class TestMixForward:
    def test_identity(self):
        m = MixingMatrix(np.eye(2))
        out = mix_forward(voxels_map([[3.0], [7.0]]), m)
        np.testing.assert_array_equal(out.data.ravel(), [3.0, 7.0])

    def test_hand_worked_voxel(self):
        m = MixingMatrix(np.array([[0.6, 0.2], [0.4, 0.8]]))
        out = mix_forward(voxels_map([[10.0], [5.0]]), m)
        np.testing.assert_allclose(out.data.ravel(), [7.0, 8.0], atol=1e-12)
        assert abs(out.data.sum() - 15.0) < 1e-12

    def test_zero_map(self):
        m = MixingMatrix(np.array([[0.6, 0.2], [0.4, 0.8]]))
        out = mix_forward(ConcentrationMap(np.zeros((2, 1, 4, 4))), m)
        assert not out.data.any()

    def test_shape_mismatch(self):
        m = MixingMatrix(np.eye(3))
        with pytest.raises(ShapeMismatch):
            mix_forward(ConcentrationMap(np.ones((2, 1, 2, 2))), m)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_intensity_conservation(self, seed):
        rng = np.random.default_rng(seed)
        f = int(rng.integers(1, 5))
        ell = int(rng.integers(1, 9))
        m = random_mixing(rng, ell, f)
        u = ConcentrationMap(rng.uniform(0, 10, size=(f, 1, 3, 4)))
        s = mix_forward(u, m)
        np.testing.assert_allclose(
            s.data.sum(axis=0), u.data.sum(axis=0), rtol=1e-6, atol=1e-12
        )

    def test_linearity(self, rng):
        m = random_mixing(rng, 6, 3)
        u1 = rng.uniform(0, 5, size=(3, 1, 4, 4))
        u2 = rng.uniform(0, 5, size=(3, 1, 4, 4))
        a, b = 2.5, -1.25
        lhs = mix_forward(ConcentrationMap(a * u1 + b * u2), m).data
        rhs = a * mix_forward(ConcentrationMap(u1), m).data + b * mix_forward(ConcentrationMap(u2), m).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-12)


class TestConditioning:
    def test_identity(self):
        report = analyze_conditioning(MixingMatrix(np.eye(2)))
        np.testing.assert_array_equal(report.singular_values, [1.0, 1.0])
        assert report.kappa == 1.0
        assert report.amplification_bound == 1.0
        assert not report.rank_deficient

    def test_duplicated_columns(self):
        report = analyze_conditioning(MixingMatrix(np.full((2, 2), 0.5)))
        assert report.singular_values[-1] < 1e-15
        assert report.kappa == np.inf
        assert report.rank_deficient

    def test_underdetermined_padded_to_f(self):
        m = MixingMatrix(np.array([[0.5, 0.2, 0.4], [0.5, 0.8, 0.6]]))
        report = analyze_conditioning(m)
        assert len(report.singular_values) == 3
        assert report.singular_values[-1] == 0.0
        assert report.kappa == np.inf

    def test_svd_reconstruction_and_eigen_oracle(self, rng):
        for _ in range(5):
            m = random_mixing(rng, 8, 3)
            u, sig, vt = np.linalg.svd(m.m, full_matrices=False)
            rebuilt = (u * sig) @ vt
            rel = np.linalg.norm(rebuilt - m.m) / np.linalg.norm(m.m)
            assert rel < 1e-10
            # independent eigen-solve of M^T M
            eigvals = np.linalg.eigvalsh(m.m.T @ m.m)[::-1]
            sig_oracle = np.sqrt(np.maximum(eigvals, 0.0))
            report = analyze_conditioning(m)
            np.testing.assert_allclose(report.singular_values, sig_oracle, atol=1e-8)

    def test_kappa_decreases_with_shift(self):
        egfp = EmissionSpectrum.lognormal("egfp", 509, 40, 1.3)
        layout = BandLayout.equispaced(480, 700, 32)
        kappas = []
        for delta in (2, 5, 10, 20, 50):
            m = build_mixing_matrix([egfp, egfp.shifted(delta)], layout)
            # SVD oracle via eigen-decomposition of M^T M
            eig = np.linalg.eigvalsh(m.m.T @ m.m)
            kappas.append(np.sqrt(eig[-1] / eig[0]))
        assert all(a > b for a, b in zip(kappas, kappas[1:]))

    def test_report_json_serializable(self):
        report = analyze_conditioning(MixingMatrix(np.full((2, 2), 0.5)))
        doc = json.loads(report.to_json())
        assert doc["kappa"] == "inf"
        assert doc["rank_deficient"] is True


class TestImageTypes:
    def test_spectral_requires_4d(self):
        with pytest.raises(ShapeMismatch):
            SpectralImage(np.zeros((4, 4)))

    def test_spectral_rejects_nonfinite(self):
        data = np.zeros((2, 1, 2, 2))
        data[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            SpectralImage(data)

    def test_layout_band_count_checked(self):
        with pytest.raises(ShapeMismatch):
            SpectralImage(np.zeros((3, 1, 2, 2)), BandLayout.equispaced(400, 700, 4))

    def test_concentration_default_labels(self):
        u = ConcentrationMap(np.zeros((3, 1, 2, 2)))
        assert u.labels == ["fluor_1", "fluor_2", "fluor_3"]

    def test_mixing_matrix_validation(self):
        with pytest.raises(ValueError):
            MixingMatrix(np.array([[0.5, -0.1], [0.5, 1.1]]))
        with pytest.raises(ValueError):
            MixingMatrix(np.array([[0.5, 0.5], [0.4, 0.5]]))

import json
import shutil
import subprocess
import sys

import pytest

SPECMIX = [sys.executable, "-m", "specmix.cli"]


def run_specmix(*args, check=True):
    """Drive the unmixing toolkit through its CLI (the shared interface)."""
    proc = subprocess.run([*SPECMIX, *map(str, args)], capture_output=True, text=True)
    if check and proc.returncode != 0:
        raise RuntimeError(f"specmix {args} failed ({proc.returncode}): {proc.stderr}")
    return proc


def _lognormal_curve(peak, fwhm, skew=1.3, lo=None, hi=None, step=1.0):
    import numpy as np

    lo = peak - 3 * fwhm if lo is None else lo
    hi = peak + 5 * fwhm if hi is None else hi
    lam = np.arange(lo, hi + step / 2, step)
    arg = (lam - peak) * (skew**2 - 1.0) / (fwhm * skew) + 1.0
    vals = np.zeros_like(lam)
    ok = arg > 0
    vals[ok] = np.exp(-(np.log(2.0) / np.log(skew) ** 2) * np.log(arg[ok]) ** 2)
    return lam, vals


def _write_spectrum_csv(path, peak, fwhm):
    lam, vals = _lognormal_curve(peak, fwhm)
    lines = ["wavelength_nm,intensity"]
    lines += [f"{w!r},{v!r}" for w, v in zip(lam.tolist(), vals.tolist())]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_spectra_dir(path, delta_nm=8.0, n_bands=8, lo=450.0, hi=680.0):
    import numpy as np

    path.mkdir(parents=True, exist_ok=True)
    _write_spectrum_csv(path / "a_probe.csv", 520.0, 40.0)
    _write_spectrum_csv(path / "b_probe.csv", 520.0 + delta_nm, 40.0)
    edges = np.linspace(lo, hi, n_bands + 1)
    bands = [[edges[i], edges[i + 1]] for i in range(n_bands)]
    (path / "layout.json").write_text(json.dumps({"bands": bands}))


def simulate_images(root, n_images, acquisition, phantom_base=None, delta_nm=8.0):
    """Simulate n_images via the CLI; returns the list of output directories."""
    spectra = root / "spectra"
    if not spectra.exists():
        write_spectra_dir(spectra, delta_nm=delta_nm)
    acq_path = root / "acq.json"
    acq_path.write_text(json.dumps(acquisition))
    outs = []
    for i in range(n_images):
        phantom = dict(phantom_base or {"kind": "mixed", "shape": [1, 128, 128],
                                        "n_channels": 2, "colocalization": 0.2})
        phantom["rng_seed"] = 100 + i
        ph_path = root / f"ph{i}.json"
        ph_path.write_text(json.dumps(phantom))
        out = root / f"img{i}"
        run_specmix("simulate", ph_path, acq_path, spectra, "--out", out, "--seed", 100 + i)
        outs.append(out)
    return outs


@pytest.fixture(scope="session")
def clean_sim(tmp_path_factory):
    """One noiseless gain-1 simulation: spectral.spmx equals the mixed ground
    truth exactly (up to f32 storage)."""
    root = tmp_path_factory.mktemp("clean")
    acq = {"exposure_ms": 1.0, "photons_per_unit_per_ms": 1.0,
           "read_noise_sigma": 0.0, "offset": 0.0, "noiseless": True, "rng_seed": 0}
    (out,) = simulate_images(root, 1, acq, {"kind": "blobs", "shape": [1, 64, 64], "n_channels": 2})
    return out


@pytest.fixture(scope="session")
def training_dir(tmp_path_factory):
    """Moderate-noise 2-fluorophore training set (seven 128x128 images)."""
    root = tmp_path_factory.mktemp("toyset")
    acq = {"exposure_ms": 2.0, "rng_seed": 0}
    outs = simulate_images(root, 7, acq)
    train = root / "train"
    train.mkdir()
    for i, out in enumerate(outs):
        shutil.copy(out / "spectral.spmx", train / f"img{i:02d}.spmx")
    shutil.copy(outs[0] / "mixing.csv", train / "mixing.csv")
    return train

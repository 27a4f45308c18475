"""Acceptance suite for the variational unmixing component. The benchmark
test trains the toy model end to end on CPU (a few minutes); run with
``pytest tests/test_acceptance.py -s`` to see per-criterion PASS/FAIL lines.
"""

import json
import shutil
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from lambdasplit.containers import read_container, read_mixing_csv
from lambdasplit.inference import predict_container
from lambdasplit.model import ModelConfig, SpectralMixerLayer, elbo_loss, gaussian_kl
from lambdasplit.training import save_checkpoint, train

from conftest import run_specmix, simulate_images


@contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print(f"[ACCEPTANCE] {name}: FAIL")
        raise
    print(f"[ACCEPTANCE] {name}: PASS")


def test_mixer_layer_equivalence(tmp_path):
    with criterion("mixer layer matches toolkit forward model on 10 shared files (<1e-5)"):
        acq = {"exposure_ms": 1.0, "photons_per_unit_per_ms": 1.0,
               "read_noise_sigma": 0.0, "offset": 0.0, "noiseless": True, "rng_seed": 0}
        outs = simulate_images(tmp_path, 10, acq,
                               {"kind": "mixed", "shape": [1, 64, 64], "n_channels": 2})
        for out in outs:
            gt, _ = read_container(out / "gt.spmx")
            spectral, _ = read_container(out / "spectral.spmx")
            m, _ = read_mixing_csv(out / "mixing.csv")
            mixer = SpectralMixerLayer(m)
            mixed = mixer(torch.from_numpy(gt.astype(np.float32))[None, :, 0])[0].numpy()
            assert np.abs(mixed - spectral[:, 0]).max() < 1e-5


def test_mixer_gradient_check():
    with criterion("mixer finite-difference gradient check (rel < 1e-4)"):
        rng = np.random.default_rng(41)
        m = rng.dirichlet(np.ones(7), size=3).T
        mixer = SpectralMixerLayer(m, dtype=torch.float64)
        u0 = torch.randn(1, 3, 6, 6, dtype=torch.float64)
        weight = torch.randn(1, 7, 6, 6, dtype=torch.float64)

        def scalar(u):
            return (mixer(u) * weight).sum()

        u = u0.clone().requires_grad_(True)
        scalar(u).backward()
        h = 1e-6
        for trial in range(10):
            ch = int(rng.integers(0, 3))
            y, x = (int(v) for v in rng.integers(0, 6, size=2))
            up, down = u0.clone(), u0.clone()
            up[0, ch, y, x] += h
            down[0, ch, y, x] -= h
            fd = float((scalar(up) - scalar(down)) / (2 * h))
            an = float(u.grad[0, ch, y, x])
            assert abs(fd - an) / max(abs(an), 1e-8) < 1e-4


def test_objective_sanity():
    with criterion("objective sanity (zero loss at optimum; KL matches Monte Carlo within 2%)"):
        s = torch.randn(2, 4, 16, 16)
        stats = [(torch.zeros(2, 8), torch.ones(2, 8))]
        assert float(elbo_loss(s, s, stats, stats)) == 0.0

        torch.manual_seed(17)
        mu_q, sig_q = torch.tensor(0.4), torch.tensor(1.6)
        mu_p, sig_p = torch.tensor(-0.5), torch.tensor(0.7)
        closed = float(gaussian_kl(mu_q, sig_q, mu_p, sig_p))
        z = mu_q + sig_q * torch.randn(100000, dtype=torch.float64)

        def log_normal(x, mu, sig):
            return -0.5 * torch.log(2 * torch.pi * sig**2) - (x - mu) ** 2 / (2 * sig**2)

        mc = float((log_normal(z, mu_q, sig_q) - log_normal(z, mu_p, sig_p)).mean())
        assert abs(mc - closed) / closed < 0.02


def test_learned_prior_beats_least_squares(tmp_path):
    """Low-SNR overlapping-spectra benchmark: the trained model's MMSE
    prediction must reach at least the least-squares PSNR on a held-out
    image (everything flows through the shared CLI and file formats)."""
    with criterion("learned prior >= least squares on held-out low-SNR benchmark"):
        start = time.monotonic()
        acq = {"exposure_ms": 0.2, "rng_seed": 0}
        outs = simulate_images(tmp_path, 12, acq, delta_nm=8.0)
        train_dir = tmp_path / "train"
        train_dir.mkdir()
        for i, out in enumerate(outs[:-1]):
            shutil.copy(out / "spectral.spmx", train_dir / f"img{i:02d}.spmx")
        shutil.copy(outs[0] / "mixing.csv", train_dir / "mixing.csv")
        held_out = outs[-1]

        torch.set_num_threads(4)
        cfg = ModelConfig(hierarchy_levels=3, feature_channels=32, latent_channels=8,
                          patch_size=64, batch_size=8, lr=1e-3, epochs=80, rng_seed=7)
        checkpoint = train(train_dir, cfg)
        save_checkpoint(tmp_path / "model.pt", checkpoint)
        predict_container(held_out / "spectral.spmx", checkpoint,
                          tmp_path / "est_lambdasplit.spmx", mmse_samples=50, rng_seed=3)

        run_specmix("unmix", held_out / "spectral.spmx", held_out / "mixing.csv",
                    "--method", "lu", "--out", tmp_path)

        def mean_psnr(est, tag):
            run_specmix("evaluate", held_out / "gt.spmx", est, "--out", tmp_path / tag)
            doc = json.loads((tmp_path / tag / "metrics.json").read_text())
            value = doc["mean"]["psnr_ri"]
            return float("inf") if value == "inf" else float(value)

        ours = mean_psnr(tmp_path / "est_lambdasplit.spmx", "ev_ours")
        baseline = mean_psnr(tmp_path / "est_lu.spmx", "ev_lu")
        elapsed = time.monotonic() - start
        print(f"  lambdasplit {ours:.2f} dB vs least-squares {baseline:.2f} dB "
              f"({elapsed:.0f}s)")
        assert elapsed < 1800.0
        assert ours >= baseline

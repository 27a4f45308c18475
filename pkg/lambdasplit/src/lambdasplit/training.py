"""Self-supervised training loop: Adamax, plateau LR schedule, early
stopping, NaN abort; the checkpoint is a single file carrying weights,
config, normalization statistics and the mixing matrix."""

from __future__ import annotations

import math

import numpy as np
import torch

from .data import SpectralDataset, load_dataset, sample_patches
from .model import LadderVAE, ModelConfig


class NaNLoss(Exception):
    pass


def _epoch_patch_count(dataset: SpectralDataset, indices, patch: int) -> int:
    area = sum(dataset.images[i].shape[1] * dataset.images[i].shape[2] for i in indices)
    return max(1, area // (patch * patch))


def train(dataset_dir, cfg: ModelConfig, val_fraction: float = 0.25, verbose: bool = False) -> dict:
    """Train on every spectral container in ``dataset_dir`` and return the
    checkpoint dict (also obtainable via torch.load after save_checkpoint).

    The last ceil(val_fraction * n_images) images form the validation split;
    an epoch draws as many random patches as tile the training images once.
    """
    dataset = load_dataset(dataset_dir)
    torch.manual_seed(cfg.rng_seed)
    rng = np.random.default_rng(np.uint64(cfg.rng_seed))

    n_images = len(dataset.images)
    n_val = min(max(1, math.ceil(val_fraction * n_images)), n_images - 1) if n_images > 1 else 0
    train_idx = list(range(n_images - n_val)) if n_val else list(range(n_images))
    val_idx = list(range(n_images - n_val, n_images)) if n_val else list(range(n_images))

    model = LadderVAE(dataset.n_bands, dataset.n_fluors, cfg, dataset.mixing)
    optimizer = torch.optim.Adamax(model.parameters(), lr=cfg.lr)
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, patience=cfg.lr_plateau_patience
    )

    per_epoch = _epoch_patch_count(dataset, train_idx, cfg.patch_size)
    val_patches = torch.from_numpy(
        sample_patches(dataset, val_idx, max(8, per_epoch // 2), cfg.patch_size, np.random.default_rng(np.uint64(cfg.rng_seed) + 1))
    )

    history = {"train": [], "val": []}
    best_val = math.inf
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    stale = 0
    for epoch in range(cfg.epochs):
        model.train()
        batch_losses = []
        remaining = per_epoch
        while remaining > 0:
            size = min(cfg.batch_size, remaining)
            batch = torch.from_numpy(
                sample_patches(dataset, train_idx, size, cfg.patch_size, rng)
            )
            optimizer.zero_grad()
            loss = model.loss(batch)
            if not torch.isfinite(loss):
                raise NaNLoss(f"non-finite loss at epoch {epoch}: {loss.item()}")
            loss.backward()
            optimizer.step()
            batch_losses.append(float(loss.detach()))
            remaining -= size
        model.eval()
        with torch.no_grad():
            val_loss = float(model.loss(val_patches))
        if not np.isfinite(val_loss):
            raise NaNLoss(f"non-finite validation loss at epoch {epoch}")
        scheduler.step(val_loss)
        history["train"].append(float(np.mean(batch_losses)))
        history["val"].append(val_loss)
        if verbose:
            print(f"epoch {epoch}: train {history['train'][-1]:.5f} val {val_loss:.5f}")
        if val_loss < best_val:
            best_val = val_loss
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break

    return {
        "state_dict": best_state,
        "config": cfg.to_dict(),
        "n_bands": dataset.n_bands,
        "n_fluors": dataset.n_fluors,
        "mixing": np.asarray(dataset.mixing, dtype=np.float64),
        "labels": list(dataset.names),
        "normalization": {"mean": dataset.mean, "std": dataset.std},
        "history": history,
        "best_val": best_val,
    }


def save_checkpoint(path, checkpoint: dict) -> None:
    torch.save(checkpoint, path)


def load_checkpoint(path) -> dict:
    return torch.load(path, weights_only=False)


def build_model(checkpoint: dict) -> "LadderVAE":
    cfg = ModelConfig.from_dict(checkpoint["config"])
    model = LadderVAE(checkpoint["n_bands"], checkpoint["n_fluors"], cfg, checkpoint["mixing"])
    model.load_state_dict(checkpoint["state_dict"])
    model.eval()
    return model

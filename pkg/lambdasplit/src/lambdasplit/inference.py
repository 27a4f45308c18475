"""MMSE inference: average posterior samples per tile, stitch tiles keeping
only inner regions so neighboring tiles abut without border artifacts, and
de-normalize predictions back to the spectral-input intensity scale."""

from __future__ import annotations

import numpy as np
import torch

from .containers import read_container, write_container
from .model import ModelConfig
from .training import build_model


class IncompatibleCheckpoint(Exception):
    pass


def _tile_starts(extent: int, tile: int, stride: int) -> list[int]:
    if extent <= tile:
        return [0]
    starts = list(range(0, extent - tile, stride))
    starts.append(extent - tile)
    return starts


def predict_mmse(
    spectral: np.ndarray,
    checkpoint: dict,
    mmse_samples: int | None = None,
    rng_seed: int = 0,
    sample: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Unmix one [L, H, W] spectral image.

    Tiles of ``patch_size`` overlap by ``tile_overlap_fraction``; each tile is
    decoded ``mmse_samples`` times and averaged, and only the inner region of
    each tile (overlap/2 trimmed per interior edge) is written to the output.
    Returns (concentrations [F, H, W], per-pixel sample std [F, H, W]) in the
    intensity scale of the input.
    """
    cfg = ModelConfig.from_dict(checkpoint["config"])
    n_samples = int(mmse_samples if mmse_samples is not None else cfg.mmse_samples)
    if n_samples < 1:
        raise ValueError("mmse_samples must be >= 1")
    if spectral.ndim != 3:
        raise IncompatibleCheckpoint(f"expected [L, H, W], got shape {spectral.shape}")
    if spectral.shape[0] != checkpoint["n_bands"]:
        raise IncompatibleCheckpoint(
            f"checkpoint expects {checkpoint['n_bands']} bands, input has {spectral.shape[0]}"
        )
    model = build_model(checkpoint)
    torch.manual_seed(rng_seed)

    mean = checkpoint["normalization"]["mean"]
    std = checkpoint["normalization"]["std"]
    x = (np.asarray(spectral, dtype=np.float64) - mean) / std

    L, H, W = x.shape
    tile = cfg.patch_size
    overlap = int(round(tile * cfg.tile_overlap_fraction))
    stride = tile - overlap
    trim = overlap // 2

    if H <= tile and W <= tile:
        pad_h, pad_w = _pad_to_grid(H, W, cfg)
        xt = np.zeros((L, H + pad_h, W + pad_w), dtype=np.float32)
        xt[:, :H, :W] = x
        mean_u, std_u = _decode_tile(model, xt, n_samples, sample)
        u = mean_u[:, :H, :W]
        u_std = std_u[:, :H, :W]
    else:
        F = checkpoint["n_fluors"]
        u = np.zeros((F, H, W))
        u_std = np.zeros((F, H, W))
        for y0 in _tile_starts(H, tile, stride):
            for x0 in _tile_starts(W, tile, stride):
                patch = x[:, y0 : y0 + tile, x0 : x0 + tile].astype(np.float32)
                mean_u, std_u = _decode_tile(model, patch, n_samples, sample)
                ky0 = 0 if y0 == 0 else trim
                kx0 = 0 if x0 == 0 else trim
                ky1 = tile if y0 + tile >= H else tile - trim
                kx1 = tile if x0 + tile >= W else tile - trim
                u[:, y0 + ky0 : y0 + ky1, x0 + kx0 : x0 + kx1] = mean_u[:, ky0:ky1, kx0:kx1]
                u_std[:, y0 + ky0 : y0 + ky1, x0 + kx0 : x0 + kx1] = std_u[:, ky0:ky1, kx0:kx1]

    # Map back to the spectral-input intensity scale: scale by sigma and
    # distribute the subtracted global mean through the least-squares
    # preimage of the flat spectrum.
    m = np.asarray(checkpoint["mixing"], dtype=np.float64)
    offset_u = mean * (np.linalg.pinv(m) @ np.ones(m.shape[0]))
    u_phys = u * std + offset_u[:, None, None]
    return u_phys, u_std * std


def _pad_to_grid(h: int, w: int, cfg: ModelConfig) -> tuple[int, int]:
    unit = 2**cfg.hierarchy_levels
    return (-h) % unit, (-w) % unit


def _decode_tile(model, patch: np.ndarray, n_samples: int, sample: bool = True) -> tuple[np.ndarray, np.ndarray]:
    batch = torch.from_numpy(patch[None]).float()
    outs = []
    with torch.no_grad():
        for _ in range(n_samples if sample else 1):
            u_hat, _, _, _ = model(batch, sample=sample)
            outs.append(u_hat[0].numpy())
    stack = np.stack(outs)
    return stack.mean(axis=0), stack.std(axis=0)


def predict_container(spectral_path, checkpoint: dict, out_path, std_path=None,
                      mmse_samples: int | None = None, rng_seed: int = 0) -> None:
    """Container-to-container inference over the shared SPMX1 format."""
    tensor, header = read_container(spectral_path)
    if header.get("axes") != ["L", "Z", "Y", "X"]:
        raise IncompatibleCheckpoint(f"{spectral_path}: expected spectral axes [L,Z,Y,X]")
    data = tensor.astype(np.float64)
    if data.shape[1] != 1:
        raise IncompatibleCheckpoint("only 2D (Z=1) inputs are supported")
    offset = float(header.get("meta", {}).get("acquisition", {}).get("offset", 0.0))
    u, u_std = predict_mmse(data[:, 0] - offset, checkpoint, mmse_samples, rng_seed)
    meta = {"method": "lambdasplit", "mmse_samples": int(mmse_samples or checkpoint["config"]["mmse_samples"]),
            "labels": checkpoint.get("labels", [])}
    write_container(out_path, u[:, None].astype(np.float32), ["F", "Z", "Y", "X"], meta)
    if std_path is not None:
        write_container(std_path, u_std[:, None].astype(np.float32), ["F", "Z", "Y", "X"],
                        {"method": "lambdasplit-std"})

"""The seven classical unmixing procedures.

All solvers map a SpectralImage (plus mixing matrix / configuration) to a
ConcentrationMap. LU, NNLU, FCLU and RLU are strictly per-voxel: every update
is an elementwise array operation, so outputs on any spatial crop equal the
crop of the full output bitwise. HyU aggregates voxels into phasor bins and
LUMoS clusters globally; NMF-RI refines the mixing matrix jointly over all
voxels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .core import RANK_TOL, ConcentrationMap, MixingMatrix, SpectralImage
from .errors import ConfigError, DegenerateClustering, ShapeMismatch

SOLVER_NAMES = ("lu", "nnlu", "fclu", "rlu", "nmf-ri", "hyu", "lumos")

# Floor applied to (M u) inside the Richardson-Lucy ratio; avoids 0/0 at
# zero-background voxels and sits far below metric resolution.
RL_FLOOR = 1e-12


@dataclass(frozen=True)
class SolverConfig:
    """Shared solver settings; defaults follow the reference procedures."""

    admm_rho: float = 1.0
    admm_tol: float = 1e-6
    admm_max_iter: int = 200
    rlu_iters: int = 100
    nmf_iters: int = 500
    hyu_harmonic: int = 1
    hyu_bins: int = 128
    lumos_restarts: int = 10
    lumos_max_iter: int = 200
    rng_seed: int = 0

    def __post_init__(self):
        if self.admm_rho <= 0 or self.admm_tol <= 0:
            raise ConfigError("admm_rho and admm_tol must be positive")
        for name in ("admm_max_iter", "rlu_iters", "nmf_iters", "hyu_harmonic",
                     "hyu_bins", "lumos_restarts", "lumos_max_iter"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SolverConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"SolverConfig: unknown keys {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, text: str) -> "SolverConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"SolverConfig: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError("SolverConfig: expected a JSON object")
        return cls.from_dict(doc)


def _check_shapes(s: SpectralImage, m: MixingMatrix) -> None:
    if s.n_bands != m.n_bands:
        raise ShapeMismatch(f"image has {s.n_bands} bands, matrix has {m.n_bands} rows")


def _apply(mat: np.ndarray, x: np.ndarray) -> np.ndarray:
    """mat @ x computed column by column with a fixed accumulation order, so
    every output voxel is an elementwise expression of its own inputs."""
    out = np.zeros((mat.shape[0], x.shape[1]), dtype=np.result_type(mat, x))
    for k in range(mat.shape[1]):
        out += mat[:, k : k + 1] * x[k]
    return out


def _result(u_flat: np.ndarray, s: SpectralImage, m: MixingMatrix, method: str, meta: dict | None = None) -> ConcentrationMap:
    data = u_flat.reshape((m.n_fluorophores,) + s.spatial_shape)
    info = {"method": method}
    info.update(meta or {})
    return ConcentrationMap(data, list(m.names), info)


def pseudo_inverse(m: MixingMatrix) -> np.ndarray:
    """Truncated-SVD Moore-Penrose pseudo-inverse (F x L). Singular values
    below RANK_TOL * sigma_max are zeroed, which yields the minimum-norm
    solution in rank-deficient and underdetermined (L < F) regimes."""
    u, sig, vt = np.linalg.svd(m.m, full_matrices=False)
    inv = np.where(sig > RANK_TOL * sig[0], 1.0 / np.where(sig > 0, sig, 1.0), 0.0)
    return (vt.T * inv) @ u.T


def unmix_lu(s: SpectralImage, m: MixingMatrix) -> ConcentrationMap:
    """Per-voxel least squares via the pseudo-inverse; may contain negatives."""
    _check_shapes(s, m)
    u = _apply(pseudo_inverse(m), s.flat())
    return _result(u, s, m, "lu")


def _admm(
    s_flat: np.ndarray,
    m: MixingMatrix,
    cfg: SolverConfig,
    project,
) -> tuple[np.ndarray, dict]:
    """Per-voxel ADMM for min ||s - Mu||^2 s.t. u in C, with ``project`` the
    Euclidean projection onto C. Voxels freeze individually once their primal
    and dual residuals drop below admm_tol, which keeps the iteration strictly
    per-voxel (crop-equivariant) and deterministic.
    Returns the z iterate, which satisfies the constraint exactly."""
    F, P = m.n_fluorophores, s_flat.shape[1]
    rho = cfg.admm_rho
    a = m.m.T @ m.m + rho * np.eye(F)
    a_inv = cho_solve(cho_factor(a), np.eye(F))  # factored once per image
    mts = _apply(m.m.T, s_flat)

    x = np.zeros((F, P))
    z = np.zeros((F, P))
    w = np.zeros((F, P))
    active = np.ones(P, dtype=bool)
    primal_hit = np.zeros(P, dtype=bool)
    iterations = 0
    for it in range(cfg.admm_max_iter):
        if not active.any():
            break
        iterations = it + 1
        x_new = _apply(a_inv, mts + rho * (z - w))
        z_new = project(x_new + w)
        w_new = w + x_new - z_new
        primal = np.sqrt(((x_new - z_new) ** 2).sum(axis=0))
        dual = rho * np.sqrt(((z_new - z) ** 2).sum(axis=0))
        primal_hit |= active & (primal < cfg.admm_tol)
        x = np.where(active, x_new, x)
        z = np.where(active, z_new, z)
        w = np.where(active, w_new, w)
        active = active & ~((primal < cfg.admm_tol) & (dual < cfg.admm_tol))
    info = {
        "converged": bool(not active.any()),
        "unconverged_voxels": int(active.sum()),
        "primal_converged_voxels": int(primal_hit.sum()),
        "iterations": iterations,
    }
    return z, info


def unmix_nnlu(s: SpectralImage, m: MixingMatrix, cfg: SolverConfig | None = None) -> ConcentrationMap:
    """Non-negative least squares per voxel via ADMM (clamp-at-zero projection)."""
    cfg = cfg or SolverConfig()
    _check_shapes(s, m)
    z, info = _admm(s.flat(), m, cfg, lambda v: np.maximum(v, 0.0))
    return _result(z, s, m, "nnlu", info)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Columnwise Euclidean projection onto {u >= 0, sum u = 1} (sort-based)."""
    f, p = v.shape
    u = -np.sort(-v, axis=0)
    css = (np.cumsum(u, axis=0) - 1.0) / np.arange(1, f + 1)[:, None]
    k = (u > css).cumsum(axis=0).argmax(axis=0)
    theta = css[k, np.arange(p)]
    return np.maximum(v - theta, 0.0)


def unmix_fclu(s: SpectralImage, m: MixingMatrix, cfg: SolverConfig | None = None) -> ConcentrationMap:
    """Fully constrained least squares: voxel spectra are l1-normalized, and
    ADMM projects onto the probability simplex, so outputs are non-negative
    and sum to one. Zero-intensity voxels short-circuit to zero."""
    cfg = cfg or SolverConfig()
    _check_shapes(s, m)
    flat = s.flat()
    norms = np.abs(flat).sum(axis=0)
    nonzero = norms > 0
    safe = np.where(nonzero, norms, 1.0)
    z, info = _admm(flat / safe, m, cfg, project_simplex)
    z = np.where(nonzero, z, 0.0)
    info["zero_voxels"] = int((~nonzero).sum())
    return _result(z, s, m, "fclu", info)


def unmix_rlu(
    s: SpectralImage,
    m: MixingMatrix,
    cfg: SolverConfig | None = None,
    kl_trace: bool = False,
) -> ConcentrationMap:
    """Richardson-Lucy multiplicative updates; inherently non-negative.

    Data are clamped at zero, the estimate starts uniform at (sum_l s_l)/F,
    and the normalizer is 1 because mixing columns are l1-normalized. With
    ``kl_trace`` the per-iteration KL(s || Mu) sequence is stored in metadata.
    """
    cfg = cfg or SolverConfig()
    _check_shapes(s, m)
    data = np.maximum(s.flat(), 0.0)
    F = m.n_fluorophores
    u = np.broadcast_to(data.sum(axis=0) / F, (F, data.shape[1])).copy()
    trace = []
    for _ in range(cfg.rlu_iters):
        mu = np.maximum(_apply(m.m, u), RL_FLOOR)
        if kl_trace:
            trace.append(_kl_divergence(data, mu))
        u = u * _apply(m.m.T, data / mu)
    meta: dict = {"iterations": cfg.rlu_iters}
    if kl_trace:
        mu = np.maximum(_apply(m.m, u), RL_FLOOR)
        trace.append(_kl_divergence(data, mu))
        meta["kl_trace"] = trace
    return _result(u, s, m, "rlu", meta)


def _kl_divergence(data: np.ndarray, mu: np.ndarray) -> float:
    """Generalized KL(s || Mu) summed over all bands and voxels; 0 log 0 = 0."""
    ratio = np.ones_like(data)
    pos = data > 0
    ratio[pos] = data[pos] / mu[pos]
    return float((data * np.log(ratio) - data + mu).sum())


def unmix_nmf_ri(
    s: SpectralImage,
    m_init: MixingMatrix,
    cfg: SolverConfig | None = None,
    objective_trace: bool = False,
) -> tuple[ConcentrationMap, MixingMatrix]:
    """Joint multiplicative-update factorization S ~ MU with spectra
    initialized from the supplied matrix and abundances from seeded random
    values. Columns of M are re-l1-normalized after every M-update with the
    scale folded into U, so the product MU is unchanged by the rescaling.
    Returns the refined abundances and spectra.
    """
    cfg = cfg or SolverConfig()
    _check_shapes(s, m_init)
    data = np.maximum(s.flat(), 0.0)
    F, P = m_init.n_fluorophores, data.shape[1]
    rng = np.random.default_rng(np.uint64(cfg.rng_seed))
    scale = max(data.mean(), RL_FLOOR)
    u = rng.uniform(0.0, 1.0, size=(F, P)) * scale
    m = m_init.m.copy()
    eps = RL_FLOOR
    trace = []
    for _ in range(cfg.nmf_iters):
        if objective_trace:
            trace.append(float(((data - m @ u) ** 2).sum()))
        u *= (m.T @ data) / np.maximum(m.T @ m @ u, eps)
        num = data @ u.T
        den = m @ u @ u.T
        # entries with no abundance mass carry no update information; keep them
        ratio = np.where((num <= eps) & (den <= eps), 1.0, num / np.maximum(den, eps))
        m *= ratio
        colsum = np.maximum(m.sum(axis=0), eps)
        m /= colsum
        u *= colsum[:, None]
    if objective_trace:
        trace.append(float(((data - m @ u) ** 2).sum()))
    meta: dict = {"iterations": cfg.nmf_iters}
    if objective_trace:
        meta["objective_trace"] = trace
    refined = MixingMatrix(m, m_init.names, m_init.layout)
    return _result(u, s, m_init, "nmf-ri", meta), refined


@dataclass(frozen=True)
class PhasorCoords:
    """First (or n-th) harmonic Fourier coordinates of each voxel spectrum."""

    g: np.ndarray  # spatial shape
    s: np.ndarray
    zero_mask: np.ndarray  # True where the voxel had zero l1 norm


def phasor_transform(s: SpectralImage, harmonic: int = 1) -> PhasorCoords:
    """Map each l1-normalized voxel spectrum to (g, s) phasor coordinates.

    Band centers sit at phase 2*pi*n*(l - 1/2)/L. Zero-norm voxels map to
    (0, 0) and are flagged. Coordinates lie in [-1, 1]^2.
    """
    if harmonic < 1:
        raise ConfigError("harmonic must be >= 1")
    L = s.n_bands
    flat = s.flat()
    norms = np.abs(flat).sum(axis=0)
    zero = norms == 0
    safe = np.where(zero, 1.0, norms)
    phases = 2.0 * np.pi * harmonic * (np.arange(L) + 0.5) / L
    g = (flat * np.cos(phases)[:, None]).sum(axis=0) / safe
    sc = (flat * np.sin(phases)[:, None]).sum(axis=0) / safe
    g = np.where(zero, 0.0, g)
    sc = np.where(zero, 0.0, sc)
    shape = s.spatial_shape
    return PhasorCoords(g.reshape(shape), sc.reshape(shape), zero.reshape(shape))


@dataclass(frozen=True)
class PhasorHistogram:
    """Equispaced binning of phasor coordinates over [-1, 1]^2.

    ``bin_of_voxel`` holds the flat bin id per voxel (-1 for zero-norm voxels);
    ``bin_ids`` lists occupied bins and ``mean_spectra`` their l1-normalized
    average member spectra, row-aligned with ``bin_ids``.
    """

    bins: int
    bin_of_voxel: np.ndarray  # (P,) int
    bin_ids: np.ndarray  # (B,) int
    mean_spectra: np.ndarray  # (B, L)
    counts: np.ndarray  # (B,) int


def phasor_histogram(s: SpectralImage, cfg: SolverConfig | None = None) -> PhasorHistogram:
    cfg = cfg or SolverConfig()
    coords = phasor_transform(s, cfg.hyu_harmonic)
    bins = cfg.hyu_bins
    g = coords.g.ravel()
    sc = coords.s.ravel()
    zero = coords.zero_mask.ravel()
    ix = np.minimum((np.clip(g + 1.0, 0.0, 2.0) / 2.0 * bins).astype(int), bins - 1)
    iy = np.minimum((np.clip(sc + 1.0, 0.0, 2.0) / 2.0 * bins).astype(int), bins - 1)
    bin_of_voxel = np.where(zero, -1, iy * bins + ix)

    flat = s.flat()
    norms = np.abs(flat).sum(axis=0)
    safe = np.where(norms == 0, 1.0, norms)
    normalized = flat / safe

    occupied = bin_of_voxel >= 0
    ids, inverse, counts = np.unique(bin_of_voxel[occupied], return_inverse=True, return_counts=True)
    sums = np.zeros((ids.size, s.n_bands))
    np.add.at(sums, inverse, normalized[:, occupied].T)
    means = sums / counts[:, None]
    mean_norms = np.abs(means).sum(axis=1, keepdims=True)
    means = means / np.where(mean_norms == 0, 1.0, mean_norms)
    return PhasorHistogram(bins, bin_of_voxel, ids, means, counts)


def unmix_hyu(s: SpectralImage, m: MixingMatrix, cfg: SolverConfig | None = None) -> ConcentrationMap:
    """Phasor-binned unmixing: average the normalized spectra per occupied
    phasor bin, least-squares unmix each bin average, then scatter each bin's
    abundance vector back to its member voxels scaled by the voxel's original
    l1 intensity."""
    cfg = cfg or SolverConfig()
    _check_shapes(s, m)
    hist = phasor_histogram(s, cfg)
    pinv = pseudo_inverse(m)
    bin_abund = hist.mean_spectra @ pinv.T  # (B, F)

    flat = s.flat()
    norms = np.abs(flat).sum(axis=0)
    u = np.zeros((m.n_fluorophores, flat.shape[1]))
    occupied = hist.bin_of_voxel >= 0
    if occupied.any():
        lookup = np.searchsorted(hist.bin_ids, hist.bin_of_voxel[occupied])
        u[:, occupied] = (bin_abund[lookup] * norms[occupied, None]).T
    meta = {"occupied_bins": int(hist.bin_ids.size), "harmonic": cfg.hyu_harmonic}
    return _result(u, s, m, "hyu", meta)


def _lloyd(points: np.ndarray, k: int, seed: int, max_iter: int) -> tuple[np.ndarray, np.ndarray, float]:
    """One deterministic k-means run; returns (centroids, assignment, wcss)."""
    rng = np.random.default_rng(np.uint64(seed))
    n = points.shape[0]
    uniq = np.unique(points, axis=0)
    pick = rng.choice(uniq.shape[0], size=k, replace=False)
    centroids = uniq[pick].astype(float)
    assign = np.full(n, -1)
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = points[assign == j]
            if members.shape[0] > 0:
                centroids[j] = members.mean(axis=0)
    d2 = ((points - centroids[assign]) ** 2).sum()
    return centroids, assign, float(d2)


def _match_clusters(centroids: np.ndarray, m: MixingMatrix) -> dict[int, int]:
    """Greedy max-cosine matching of centroids to mixing columns; ties break
    toward the lower channel index, then the lower cluster index."""
    k = centroids.shape[0]
    f = m.n_fluorophores
    cnorm = np.linalg.norm(centroids, axis=1)
    mnorm = np.linalg.norm(m.m, axis=0)
    sim = centroids @ m.m / np.where(cnorm == 0, 1.0, cnorm)[:, None] / np.where(mnorm == 0, 1.0, mnorm)[None, :]
    mapping: dict[int, int] = {}
    used_cols: set[int] = set()
    used_rows: set[int] = set()
    for _ in range(min(k, f)):
        best = (-np.inf, f, k)
        for i in range(k):
            if i in used_rows:
                continue
            for j in range(f):
                if j in used_cols:
                    continue
                cand = (sim[i, j], j, i)
                if cand[0] > best[0] or (cand[0] == best[0] and (cand[1], cand[2]) < (best[1], best[2])):
                    best = cand
        _, j, i = best
        mapping[i] = j
        used_rows.add(i)
        used_cols.add(j)
    return mapping


def unmix_lumos(
    s: SpectralImage,
    k: int,
    cfg: SolverConfig | None = None,
    m: MixingMatrix | None = None,
) -> ConcentrationMap:
    """Hard k-means assignment of l1-normalized voxel spectra.

    Runs ``lumos_restarts`` seeded restarts and keeps the lowest
    within-cluster sum of squares. A voxel contributes its full l1 intensity
    to the channel of its cluster. When a mixing matrix is supplied, clusters
    are matched to its columns by greedy cosine similarity (extra clusters
    are treated as background); otherwise channels are the raw clusters.
    """
    cfg = cfg or SolverConfig()
    if k < 1:
        raise ConfigError("k must be >= 1")
    flat = s.flat()
    norms = np.abs(flat).sum(axis=0)
    safe = np.where(norms == 0, 1.0, norms)
    points = (flat / safe).T  # (P, L)
    n_unique = np.unique(points, axis=0).shape[0]
    if k > n_unique:
        raise DegenerateClustering(f"k={k} exceeds the {n_unique} distinct spectra")

    best = None
    for r in range(cfg.lumos_restarts):
        run = _lloyd(points, k, cfg.rng_seed + r, cfg.lumos_max_iter)
        if best is None or run[2] < best[2]:
            best = run
    centroids, assign, wcss = best

    if m is not None:
        _check_shapes(s, m)
        mapping = _match_clusters(centroids, m)
        out = np.zeros((m.n_fluorophores, flat.shape[1]))
        for cluster, channel in mapping.items():
            sel = assign == cluster
            out[channel, sel] = norms[sel]
        meta = {"wcss": wcss, "cluster_to_channel": {str(c): int(j) for c, j in mapping.items()}, "k": k}
        return _result(out, s, m, "lumos", meta)

    out = np.zeros((k, flat.shape[1]))
    for cluster in range(k):
        sel = assign == cluster
        out[cluster, sel] = norms[sel]
    data = out.reshape((k,) + s.spatial_shape)
    return ConcentrationMap(data, [f"cluster_{c + 1}" for c in range(k)], {"method": "lumos", "wcss": wcss, "k": k})


def unmix(
    method: str,
    s: SpectralImage,
    m: MixingMatrix,
    cfg: SolverConfig | None = None,
    lumos_k: int | None = None,
) -> ConcentrationMap:
    """Dispatch by method name (one of SOLVER_NAMES)."""
    cfg = cfg or SolverConfig()
    if method == "lu":
        return unmix_lu(s, m)
    if method == "nnlu":
        return unmix_nnlu(s, m, cfg)
    if method == "fclu":
        return unmix_fclu(s, m, cfg)
    if method == "rlu":
        return unmix_rlu(s, m, cfg)
    if method == "nmf-ri":
        return unmix_nmf_ri(s, m, cfg)[0]
    if method == "hyu":
        return unmix_hyu(s, m, cfg)
    if method == "lumos":
        return unmix_lumos(s, lumos_k or m.n_fluorophores, cfg, m)
    raise ConfigError(f"unknown method {method!r}; expected one of {SOLVER_NAMES}")

"""Bit-exact persistence: the SPMX1 array container plus the CSV/JSON
interchange formats shared with external tools.

Container layout: one newline-terminated JSON header line followed by the raw
little-endian array bytes in C order. The header is the only carrier of axis
semantics; nothing is ever inferred from dimension sizes.
"""

from __future__ import annotations

import json
import os
from typing import Sequence

import numpy as np

from .core import BandLayout, ConcentrationMap, MixingMatrix, SpectralImage
from .errors import (
    BadMagic,
    ConfigError,
    HeaderMismatch,
    TruncatedPayload,
    UnsupportedDtype,
)

MAGIC = "SPMX1"

_DTYPES = {
    "f32": np.dtype("<f4"),
    "u16": np.dtype("<u2"),
}
_CODES = {v: k for k, v in _DTYPES.items()}


def build_header(tensor: np.ndarray, axes: Sequence[str], meta: dict | None = None) -> dict:
    dtype = np.dtype(tensor.dtype).newbyteorder("<")
    if dtype not in _CODES:
        raise UnsupportedDtype(f"dtype {tensor.dtype} not supported; use f32 or u16")
    if len(axes) != tensor.ndim:
        raise HeaderMismatch(f"{len(axes)} axes for a {tensor.ndim}-D tensor")
    return {
        "magic": MAGIC,
        "dtype": _CODES[dtype],
        "order": "C",
        "dims": list(tensor.shape),
        "axes": list(axes),
        "meta": dict(meta or {}),
    }


def write_container(path, tensor: np.ndarray, header: dict) -> None:
    """Write tensor + header; the file round-trips bitwise through read_container."""
    tensor = np.ascontiguousarray(tensor)
    if header.get("magic") != MAGIC:
        raise HeaderMismatch(f"header magic must be {MAGIC!r}")
    code = header.get("dtype")
    if code not in _DTYPES:
        raise UnsupportedDtype(f"unknown dtype code {code!r}")
    if _DTYPES[code] != np.dtype(tensor.dtype).newbyteorder("<"):
        raise HeaderMismatch(f"header dtype {code} does not match tensor dtype {tensor.dtype}")
    if list(tensor.shape) != list(header.get("dims", [])):
        raise HeaderMismatch(f"header dims {header.get('dims')} do not match tensor shape {tensor.shape}")
    if len(header.get("axes", [])) != tensor.ndim:
        raise HeaderMismatch("axes length must equal dims length")
    line = json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n"
    with open(path, "wb") as fh:
        fh.write(line.encode("utf-8"))
        fh.write(tensor.astype(tensor.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))


def read_container(path) -> tuple[np.ndarray, dict]:
    """Inverse of write_container."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BadMagic(f"{path}: unreadable header") from exc
        if header.get("magic") != MAGIC:
            raise BadMagic(f"{path}: magic {header.get('magic')!r} != {MAGIC!r}")
        code = header.get("dtype")
        if code not in _DTYPES:
            raise UnsupportedDtype(f"{path}: dtype code {code!r}")
        dtype = _DTYPES[code]
        dims = header.get("dims", [])
        n = int(np.prod(dims)) if dims else 0
        payload = fh.read()
    if len(payload) < n * dtype.itemsize:
        raise TruncatedPayload(f"{path}: expected {n * dtype.itemsize} payload bytes, got {len(payload)}")
    tensor = np.frombuffer(payload[: n * dtype.itemsize], dtype=dtype).reshape(dims)
    return tensor, header


def _json_safe(meta: dict) -> dict:
    out = {}
    for k, v in meta.items():
        if isinstance(v, (np.integer,)):
            out[k] = int(v)
        elif isinstance(v, (np.floating,)):
            out[k] = float(v)
        elif isinstance(v, np.ndarray):
            out[k] = v.tolist()
        else:
            out[k] = v
    return out


def save_spectral_image(path, image: SpectralImage, dtype: str = "f32") -> None:
    meta = _json_safe(image.meta)
    if image.band_layout is not None:
        meta["band_edges"] = [[lo, hi] for lo, hi in image.band_layout.bands]
    tensor = image.data.astype(_DTYPES[dtype])
    write_container(path, tensor, build_header(tensor, ["L", "Z", "Y", "X"], meta))


def load_spectral_image(path) -> SpectralImage:
    tensor, header = read_container(path)
    if header["axes"] != ["L", "Z", "Y", "X"]:
        raise HeaderMismatch(f"{path}: expected spectral axes [L,Z,Y,X], got {header['axes']}")
    meta = dict(header.get("meta", {}))
    edges = meta.pop("band_edges", None)
    layout = BandLayout(tuple((e[0], e[1]) for e in edges)) if edges else None
    return SpectralImage(tensor.astype(np.float64), layout, meta)


def save_concentration_map(path, cmap: ConcentrationMap, dtype: str = "f32") -> None:
    meta = _json_safe(cmap.meta)
    meta["labels"] = list(cmap.labels)
    tensor = cmap.data.astype(_DTYPES[dtype])
    write_container(path, tensor, build_header(tensor, ["F", "Z", "Y", "X"], meta))


def load_concentration_map(path) -> ConcentrationMap:
    tensor, header = read_container(path)
    if header["axes"] != ["F", "Z", "Y", "X"]:
        raise HeaderMismatch(f"{path}: expected concentration axes [F,Z,Y,X], got {header['axes']}")
    meta = dict(header.get("meta", {}))
    labels = meta.pop("labels", None) or []
    return ConcentrationMap(tensor.astype(np.float64), list(labels), meta)


def write_mixing_csv(path, m: MixingMatrix) -> None:
    """Header row ``band,<name...>``; one row per band, full float precision."""
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("band," + ",".join(m.names) + "\n")
        for ell in range(m.n_bands):
            row = ",".join(repr(float(x)) for x in m.m[ell])
            fh.write(f"{ell + 1},{row}\n")


def read_mixing_csv(path, renormalize: bool = False, tol: float = 1e-6) -> MixingMatrix:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("band,"):
        raise ConfigError(f"{path}: expected header 'band,<names...>'")
    names = tuple(lines[0].split(",")[1:])
    try:
        rows = [[float(x) for x in ln.split(",")[1:]] for ln in lines[1:]]
    except ValueError as exc:
        raise ConfigError(f"{path}: non-numeric matrix entry") from exc
    m = np.array(rows, dtype=float)
    if m.ndim != 2 or m.shape[1] != len(names) or m.shape[0] < 1:
        raise ConfigError(f"{path}: malformed matrix block")
    if np.any(m < 0):
        raise ConfigError(f"{path}: negative matrix entries")
    colsums = m.sum(axis=0)
    deviation = np.abs(colsums - 1.0).max()
    if deviation > 1e-9:
        if deviation > tol and not renormalize:
            raise ConfigError(
                f"{path}: columns not l1-normalized (sums {colsums}); pass renormalize to rescale"
            )
        if np.any(colsums <= 0):
            raise ConfigError(f"{path}: zero column cannot be renormalized")
        m = m / colsums
    return MixingMatrix(m, names)


REPORT_COLUMNS = (
    "dataset",
    "method",
    "condition_key",
    "condition_value",
    "channel",
    "psnr_ri",
    "ms_ssim_ri",
    "pearson",
    "snr",
)


def format_report_value(v) -> str:
    """Deterministic CSV cell: shortest round-trip float repr, inf as 'inf'."""
    if isinstance(v, str):
        return v
    if v is None:
        return "nan"
    f = float(v)
    if np.isnan(f):
        return "nan"
    if np.isinf(f):
        return "inf" if f > 0 else "-inf"
    return repr(f)


def write_report_csv(path, rows: Sequence[dict]) -> None:
    """Rows are dicts keyed by REPORT_COLUMNS; written in the given order."""
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(",".join(REPORT_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(format_report_value(row.get(c)) for c in REPORT_COLUMNS) + "\n")


def load_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def dump_json(path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)

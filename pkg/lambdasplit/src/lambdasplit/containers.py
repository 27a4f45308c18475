"""Independent reader/writer for the SPMX1 array container and the mixing
CSV, byte-compatible with the unmixing toolkit that produces the training
data. One newline-terminated JSON header line (sorted keys, compact
separators), then raw little-endian C-order array bytes.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = "SPMX1"

_DTYPES = {
    "f32": np.dtype("<f4"),
    "u16": np.dtype("<u2"),
}
_CODES = {v: k for k, v in _DTYPES.items()}


class ContainerError(Exception):
    pass


def write_container(path, tensor: np.ndarray, axes, meta: dict | None = None) -> None:
    tensor = np.ascontiguousarray(tensor)
    dtype = np.dtype(tensor.dtype).newbyteorder("<")
    if dtype not in _CODES:
        raise ContainerError(f"unsupported dtype {tensor.dtype}; use float32 or uint16")
    if len(axes) != tensor.ndim:
        raise ContainerError("axes length must equal tensor rank")
    header = {
        "magic": MAGIC,
        "dtype": _CODES[dtype],
        "order": "C",
        "dims": list(tensor.shape),
        "axes": list(axes),
        "meta": dict(meta or {}),
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n"
    with open(path, "wb") as fh:
        fh.write(line.encode("utf-8"))
        fh.write(tensor.astype(dtype, copy=False).tobytes(order="C"))


def read_container(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContainerError(f"{path}: unreadable header") from exc
        if header.get("magic") != MAGIC:
            raise ContainerError(f"{path}: bad magic {header.get('magic')!r}")
        code = header.get("dtype")
        if code not in _DTYPES:
            raise ContainerError(f"{path}: unsupported dtype {code!r}")
        dims = header.get("dims", [])
        dtype = _DTYPES[code]
        n = int(np.prod(dims)) if dims else 0
        payload = fh.read()
    if len(payload) < n * dtype.itemsize:
        raise ContainerError(f"{path}: truncated payload")
    tensor = np.frombuffer(payload[: n * dtype.itemsize], dtype=dtype).reshape(dims)
    return tensor, header


def rewrite_container(src, dst) -> None:
    """Round a container through this writer; byte-identical for valid files."""
    tensor, header = read_container(src)
    write_container(dst, tensor, header["axes"], header.get("meta", {}))


def read_mixing_csv(path) -> tuple[np.ndarray, list[str]]:
    """Mixing CSV: header ``band,<names...>``, one row per band."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("band,"):
        raise ContainerError(f"{path}: expected header 'band,<names...>'")
    names = lines[0].split(",")[1:]
    rows = [[float(x) for x in ln.split(",")[1:]] for ln in lines[1:]]
    m = np.asarray(rows, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != len(names):
        raise ContainerError(f"{path}: malformed matrix block")
    return m, names

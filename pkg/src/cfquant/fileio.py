"""Binary artifact formats and sidecar metadata.

Volume format V3D1 (little-endian):
    magic ``V3D1`` | u32 dx dy dz | u32 dtype (0 = f32 voxels, 1 = u16 labels)
    | f32 sx sy sz | raw voxels, x fastest.

Checkpoint format CKPT1 (little-endian):
    magic ``CKPT1`` | u32 n_params | per param:
    u32 name_len | name utf-8 | u32 ndim | u32 * ndim shape | f32 data.

Every artifact may carry a ``<basename>.meta`` sidecar of UTF-8 ``key=value``
lines; keys are written sorted so re-runs are byte-identical.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .errors import FileFormatError
from .volume import Volume3D

V3D_MAGIC = b"V3D1"
CKPT_MAGIC = b"CKPT1"
DTYPE_F32 = 0
DTYPE_U16 = 1


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".meta")


def write_meta(path, meta: dict) -> None:
    lines = [f"{k}={meta[k]}" for k in sorted(meta)]
    meta_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_meta(path) -> dict:
    mp = meta_path(path)
    if not mp.exists():
        return {}
    out = {}
    for line in mp.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key] = value
    return out


def write_v3d(path, vol, meta: dict | None = None, labels: np.ndarray | None = None,
              spacing_mm=None) -> None:
    """Write a float volume (``vol``) or an integer label volume (``labels``)."""
    path = Path(path)
    if labels is not None:
        arr = np.asarray(labels)
        dims = arr.shape
        spacing = spacing_mm or (1.0, 1.0, 1.0)
        dtype_code = DTYPE_U16
        payload = np.ascontiguousarray(arr.ravel(order="F"), dtype="<u2").tobytes()
    else:
        dims = vol.dims
        spacing = vol.spacing_mm
        dtype_code = DTYPE_F32
        payload = np.ascontiguousarray(vol.flat, dtype="<f4").tobytes()
    header = V3D_MAGIC + struct.pack("<4I3f", *dims, dtype_code, *spacing)
    path.write_bytes(header + payload)
    if meta is not None:
        write_meta(path, meta)


def read_v3d(path):
    """Read a V3D1 file. Returns (Volume3D, meta) or (label ndarray, spacing, meta)."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != V3D_MAGIC:
        raise FileFormatError(f"bad V3D1 magic in {path}")
    dx, dy, dz, dtype_code, sx, sy, sz = struct.unpack_from("<4I3f", blob, 4)
    offset = 4 + struct.calcsize("<4I3f")
    count = dx * dy * dz
    meta = read_meta(path)
    if dtype_code == DTYPE_F32:
        if len(blob) - offset < 4 * count:
            raise FileFormatError(f"truncated voxel payload in {path}")
        flat = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        vol = Volume3D.from_flat(flat.astype(np.float64), (dx, dy, dz), (sx, sy, sz))
        return vol, meta
    if dtype_code == DTYPE_U16:
        if len(blob) - offset < 2 * count:
            raise FileFormatError(f"truncated label payload in {path}")
        flat = np.frombuffer(blob, dtype="<u2", count=count, offset=offset)
        labels = flat.reshape((dx, dy, dz), order="F").astype(np.int32)
        return labels, (sx, sy, sz), meta
    raise FileFormatError(f"unknown dtype code {dtype_code} in {path}")


def write_ckpt(path, params: dict) -> None:
    """Serialize named parameter arrays as CKPT1."""
    path = Path(path)
    chunks = [CKPT_MAGIC, struct.pack("<I", len(params))]
    for name in params:
        arr = np.asarray(params[name], dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    path.write_bytes(b"".join(chunks))


def read_ckpt(path) -> dict:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:5] != CKPT_MAGIC:
        raise FileFormatError(f"bad CKPT1 magic in {path}")
    offset = 5
    (n_params,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    out = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        if arr.size != count:
            raise FileFormatError(f"truncated parameter payload in {path}")
        offset += 4 * count
        out[name] = arr.reshape(shape).astype(np.float32)
    return out


def write_csv(path, header: list, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path) -> tuple[list, list]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise FileFormatError(f"empty csv {path}")
    return rows[0], rows[1:]

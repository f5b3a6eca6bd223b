"""On-disk formats: DAT1 tensors, binary PPM images, source lists, manifests.

DAT1 is a text header ``DAT1 <ndim> <extent...> <f32|f64>\\n`` followed by a
little-endian row-major payload.  All writers are deterministic so that
equal inputs produce byte-identical files.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

_DTYPE_TAGS = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_TAG_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def dat_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.dtype not in _DTYPE_TAGS:
        raise ValueError(f"DAT1 stores f32/f64 payloads, got {arr.dtype}")
    tag = _DTYPE_TAGS[arr.dtype]
    header = f"DAT1 {arr.ndim} {' '.join(str(e) for e in arr.shape)} {tag}\n"
    payload = np.ascontiguousarray(arr).astype(f"<{'f4' if tag == 'f32' else 'f8'}", copy=False)
    return header.encode("ascii") + payload.tobytes(order="C")


def save_dat(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(dat_bytes(arr))


def parse_dat(buf: bytes) -> tuple[np.ndarray, int]:
    """Decode one DAT1 block from the front of ``buf``; returns (array, bytes consumed)."""
    nl = buf.index(b"\n")
    fields = buf[:nl].decode("ascii").split()
    if not fields or fields[0] != "DAT1":
        raise ValueError("not a DAT1 block")
    ndim = int(fields[1])
    shape = tuple(int(e) for e in fields[2:2 + ndim])
    tag = fields[2 + ndim]
    dtype = _TAG_DTYPES[tag]
    count = int(np.prod(shape)) if shape else 1
    start = nl + 1
    end = start + count * dtype.itemsize
    arr = np.frombuffer(buf[start:end], dtype=dtype).reshape(shape)
    native = arr.astype(np.float32 if tag == "f32" else np.float64)
    return native, end


def load_dat(path) -> np.ndarray:
    arr, _ = parse_dat(Path(path).read_bytes())
    return arr


def quantize_u8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_ppm(path, img: np.ndarray) -> None:
    """Write an HxWx3 field in [0,1] as binary 8-bit PPM."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM expects HxWx3, got {img.shape}")
    h, w, _ = img.shape
    data = quantize_u8(img)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def load_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    if int(parts[2]) != 255:
        raise ValueError("only 8-bit PPM supported")
    return np.frombuffer(parts[3][: h * w * 3], dtype=np.uint8).reshape(h, w, 3)


def save_sources(path, centers: np.ndarray, confidences: np.ndarray) -> None:
    """Text list: count line, then one ``x y confidence`` line per source."""
    lines = [str(len(centers))]
    for (x, y), c in zip(centers, confidences):
        lines.append(f"{float(x)!r} {float(y)!r} {float(c)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_sources(path) -> tuple[np.ndarray, np.ndarray]:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    k = int(lines[0])
    centers = np.zeros((k, 2), dtype=np.float64)
    conf = np.zeros(k, dtype=np.float64)
    for i in range(k):
        xs, ys, cs = lines[1 + i].split()
        centers[i] = (float(xs), float(ys))
        conf[i] = float(cs)
    return centers, conf


def save_manifest(path, rows: list[tuple[int, int, list[str]]]) -> None:
    """TSV rows of ``index  seed  path...`` with paths relative to the manifest."""
    out = []
    for index, seed, paths in rows:
        out.append("\t".join([str(index), str(seed)] + list(paths)))
    Path(path).write_text("\n".join(out) + "\n", encoding="ascii")


def load_manifest(path) -> list[tuple[int, int, list[str]]]:
    rows = []
    base = Path(path).parent
    for line in Path(path).read_text(encoding="ascii").splitlines():
        if not line.strip():
            continue
        fields = line.split("\t")
        rows.append((int(fields[0]), int(fields[1]), [str(base / p) for p in fields[2:]]))
    return rows


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValueError(f"cannot create output directory {p}: {exc}") from exc
    if not os.access(p, os.W_OK):
        raise ValueError(f"output directory {p} is not writable")
    return p

"""Volume files, dataset manifests and slice images.

Volume file layout (little-endian)::

    b"HDV1" | dtype code (u8: 0=f32, 1=u8) | channels (u64) | D, H, W (u64 each) | payload

Payload order is channel-major, then depth, height, width.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

VOLUME_MAGIC = b"HDV1"
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_HEADER = struct.Struct("<4sBQQQQ")


def write_volume(path: str | Path, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4:
        raise ValueError(f"volume must be 3-D or 4-D (channels first), got shape {data.shape}")
    if data.dtype.kind == "f":
        code = 0
    elif data.dtype.kind in "biu":
        if data.size and (data.min() < 0 or data.max() > 255):
            raise ValueError("integer volumes must fit in u8")
        code = 1
    else:
        raise ValueError(f"unsupported volume dtype {data.dtype}")
    payload = np.ascontiguousarray(data.astype(DTYPE_CODES[code], copy=False))
    c, d, h, w = payload.shape
    Path(path).write_bytes(_HEADER.pack(VOLUME_MAGIC, code, c, d, h, w) + payload.tobytes())


def read_volume(path: str | Path, squeeze: bool = True) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, code, c, d, h, w = _HEADER.unpack_from(raw)
    if magic != VOLUME_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if code not in DTYPE_CODES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    dtype = DTYPE_CODES[code]
    expected = c * d * h * w * dtype.itemsize
    if len(raw) - _HEADER.size != expected:
        raise ValueError(f"{path}: payload is {len(raw) - _HEADER.size} bytes, header implies {expected}")
    arr = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size).reshape(c, d, h, w).copy()
    return arr[0] if squeeze and c == 1 else arr


@dataclass
class ManifestRecord:
    index: int
    split: str
    image: str
    level1: str
    level2: str
    level3: str
    seed: int
    variant: str

    def label_file(self, level: int) -> str:
        return getattr(self, f"level{level}")


MANIFEST_FIELDS = ["index", "split", "image", "level1", "level2", "level3", "seed", "variant"]


def write_manifest(path: str | Path, records: list[ManifestRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in records:
            w.writerow([getattr(r, f) for f in MANIFEST_FIELDS])


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    return [
        ManifestRecord(
            index=int(r["index"]), split=r["split"], image=r["image"], level1=r["level1"],
            level2=r["level2"], level3=r["level3"], seed=int(r["seed"]), variant=r["variant"],
        )
        for r in rows
    ]


# Distinct, saturated colours for up to 16 labels.
PALETTE = np.array([
    [0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25],
    [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240],
    [240, 50, 230], [210, 245, 60], [250, 190, 212], [0, 128, 128],
    [220, 190, 255], [170, 110, 40], [255, 250, 200], [128, 0, 0],
], dtype=np.uint8)


def _take_slice(vol: np.ndarray, axis: int, index: int) -> np.ndarray:
    if not 0 <= axis <= 2:
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    if not 0 <= index < vol.shape[axis]:
        raise IndexError(f"slice index {index} out of range 0..{vol.shape[axis] - 1} on axis {axis}")
    return np.take(vol, index, axis=axis)


def grayscale_slice(vol: np.ndarray, axis: int, index: int) -> np.ndarray:
    """Min-max scale the slice to 8 bits; a constant slice maps to 128."""
    s = _take_slice(vol, axis, index).astype(np.float64)
    lo, hi = float(s.min()), float(s.max())
    if hi <= lo:
        return np.full(s.shape, 128, dtype=np.uint8)
    return np.round((s - lo) / (hi - lo) * 255.0).astype(np.uint8)


def label_slice(vol: np.ndarray, axis: int, index: int) -> np.ndarray:
    s = _take_slice(vol, axis, index)
    if s.max() >= len(PALETTE):
        raise ValueError(f"label {int(s.max())} exceeds the {len(PALETTE)}-colour palette")
    return PALETTE[s.astype(np.int64)]


def export_slices(path: str | Path, axis: int, indices, out_dir: str | Path) -> list[Path]:
    """Write PNG slices; u8 volumes are treated as label maps."""
    raw = Path(path).read_bytes()
    is_label = len(raw) > 4 and raw[4] == 1
    vol = read_volume(path)
    if vol.ndim != 3:
        raise ValueError(f"{path}: slice export needs a single-channel volume")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(path).name.split(".")[0]
    written = []
    for idx in indices:
        img = label_slice(vol, axis, idx) if is_label else grayscale_slice(vol, axis, idx)
        target = out_dir / f"{stem}_axis{axis}_{idx:03d}.png"
        Image.fromarray(img).save(target)
        written.append(target)
    return written

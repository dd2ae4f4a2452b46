"""Scalar volumes, label maps, and the MVOL on-disk container.

MVOL is a tiny little-endian format: a 32-byte header followed by the raw
voxel payload. Header layout (struct '<4sHBB3I3f'):

    magic    4 bytes  b"MVOL"
    version  u16      currently 1
    dtype    u8       0 = float32, 1 = uint8
    kind     u8       0 = image, 1 = labels
    dims     3 x u32  nx, ny, nz
    spacing  3 x f32  voxel spacing in mm, per axis

The payload is written x-fastest, i.e. numpy order="F" for arrays indexed
[x, y, z]. Images are float32, label maps uint8.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MVOL"
FORMAT_VERSION = 1
HEADER_STRUCT = struct.Struct("<4sHBB3I3f")

DTYPE_F32 = 0
DTYPE_U8 = 1
KIND_IMAGE = 0
KIND_LABELS = 1

DEFAULT_SPACING_MM = (0.8, 0.8, 0.8)

NUM_CLASSES = 8
# fixed label convention: 0 is background, 1..7 are the tissues below
TISSUE_NAMES = (
    "background",
    "csf",
    "gm",
    "wm",
    "ventricles",
    "cerebellum",
    "dgm",
    "brainstem",
)


class MvolFormatError(ValueError):
    """Bad magic, version, or header fields in an MVOL file."""


class MvolTruncationError(MvolFormatError):
    """Payload shorter or longer than the header promises."""


class ValidationError(ValueError):
    """Volume or label-map content violates its invariants."""


class DegenerateVolumeError(ValidationError):
    """Operation needs a positive maximum but the volume has none."""


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise ValidationError(f"spacing must have 3 entries, got {len(spacing)}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValidationError(f"spacing must be positive and finite, got {spacing}")
    return spacing


@dataclass
class Volume:
    """A scalar 3D image indexed data[x, y, z], float32, spacing in mm."""

    data: np.ndarray
    spacing_mm: tuple = DEFAULT_SPACING_MM

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValidationError(f"expected 3D data, got shape {self.data.shape}")
        self.spacing_mm = _check_spacing(self.spacing_mm)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def validate(self):
        """Raise ValidationError if any voxel is non-finite."""
        if not np.isfinite(self.data).all():
            bad = int(np.size(self.data) - np.isfinite(self.data).sum())
            raise ValidationError(f"volume contains {bad} non-finite voxels")


@dataclass
class LabelMap:
    """Integer segmentation indexed data[x, y, z], values 0..num_classes-1."""

    data: np.ndarray
    spacing_mm: tuple = DEFAULT_SPACING_MM
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.ndim != 3:
            raise ValidationError(f"expected 3D labels, got shape {self.data.shape}")
        self.spacing_mm = _check_spacing(self.spacing_mm)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def validate(self):
        hi = int(self.data.max(initial=0))
        if hi >= self.num_classes:
            raise ValidationError(
                f"label value {hi} out of range for {self.num_classes} classes"
            )


def normalize_max(vol: Volume) -> Volume:
    """Divide by the volume's maximum so the result peaks at exactly 1.0.

    Raises DegenerateVolumeError when the max is not strictly positive
    (an all-zero or negative volume has no meaningful scale).
    """
    peak = float(vol.data.max())
    if not np.isfinite(peak) or peak <= 0.0:
        raise DegenerateVolumeError(f"cannot normalize, max is {peak}")
    return Volume(vol.data / np.float32(peak), vol.spacing_mm)


def one_hot(labels: LabelMap) -> np.ndarray:
    """(num_classes, nx, ny, nz) float32 with exactly one 1 per voxel column."""
    labels.validate()
    classes = np.arange(labels.num_classes, dtype=np.uint8)
    return (labels.data[None] == classes[:, None, None, None]).astype(np.float32)


def _write(path, kind_code, dtype_code, arr, spacing_mm):
    header = HEADER_STRUCT.pack(
        MAGIC,
        FORMAT_VERSION,
        dtype_code,
        kind_code,
        *(int(d) for d in arr.shape),
        *(float(s) for s in spacing_mm),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="F"))


def write_mvol(path, vol) -> None:
    """Serialize a Volume or LabelMap. Same content writes identical bytes."""
    if isinstance(vol, Volume):
        vol.validate()
        _write(path, KIND_IMAGE, DTYPE_F32, vol.data, vol.spacing_mm)
    elif isinstance(vol, LabelMap):
        vol.validate()
        _write(path, KIND_LABELS, DTYPE_U8, vol.data, vol.spacing_mm)
    else:
        raise TypeError(f"write_mvol wants a Volume or LabelMap, got {type(vol)!r}")


def read_mvol(path):
    """Parse an MVOL file into a Volume or LabelMap, validating as it goes."""
    blob = Path(path).read_bytes()
    if len(blob) < HEADER_STRUCT.size:
        raise MvolTruncationError(f"file is only {len(blob)} bytes, no full header")
    magic, version, dtype_code, kind_code, nx, ny, nz, sx, sy, sz = (
        HEADER_STRUCT.unpack_from(blob)
    )
    if magic != MAGIC:
        raise MvolFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise MvolFormatError(f"unsupported version {version}")
    if kind_code == KIND_IMAGE:
        if dtype_code != DTYPE_F32:
            raise MvolFormatError(f"image payload must be float32, dtype code {dtype_code}")
        np_dtype = np.dtype("<f4")
    elif kind_code == KIND_LABELS:
        if dtype_code != DTYPE_U8:
            raise MvolFormatError(f"label payload must be uint8, dtype code {dtype_code}")
        np_dtype = np.dtype("u1")
    else:
        raise MvolFormatError(f"unknown payload kind {kind_code}")

    n_voxels = int(nx) * int(ny) * int(nz)
    expected = HEADER_STRUCT.size + n_voxels * np_dtype.itemsize
    if len(blob) != expected:
        raise MvolTruncationError(
            f"payload mismatch: file has {len(blob)} bytes, header implies {expected}"
        )
    flat = np.frombuffer(blob, dtype=np_dtype, offset=HEADER_STRUCT.size)
    arr = flat.reshape((nx, ny, nz), order="F")
    if kind_code == KIND_IMAGE:
        out = Volume(arr, (sx, sy, sz))
    else:
        out = LabelMap(arr, (sx, sy, sz))
    out.validate()
    return out

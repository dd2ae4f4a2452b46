"""Subject/atlas pairing, patch extraction, augmentation, and inference.

A Sample bundles one subject (image + labels + ga) with its paired atlas
entry. Patches carry four aligned channels: subject image, subject labels,
atlas image, and the atlas labels rescaled to [0, 1] by value / 7 so they
can ride along as a float intensity channel.

All spatial augmentations apply one transform jointly to the four channels
(linear interpolation for images, nearest neighbor for labels, edge
replication for out-of-range samples). The contrast jitter applies the same
exponent to both image channels and leaves labels alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .phantom import ATLAS_WEEK_MAX, ATLAS_WEEK_MIN, GA_MAX, GA_MIN, AtlasEntry
from .volume import LabelMap, NUM_CLASSES, Volume, read_mvol, write_mvol


def pair_atlas(ga: float) -> int:
    """Week of the atlas paired to a subject: round half up, then clamp."""
    ga = float(ga)
    if not (GA_MIN <= ga <= GA_MAX):
        raise ValueError(f"ga must be in [{GA_MIN}, {GA_MAX}], got {ga}")
    week = math.floor(ga + 0.5)
    return min(max(week, ATLAS_WEEK_MIN), ATLAS_WEEK_MAX)


@dataclass
class Sample:
    image: Volume
    labels: LabelMap
    atlas: AtlasEntry
    ga: float
    subject_id: str = ""

    def __post_init__(self):
        if self.image.dims != self.labels.dims:
            raise ValueError("image and labels dims differ")
        if self.atlas.image.dims != self.image.dims:
            raise ValueError("atlas dims differ from subject dims")


@dataclass
class Patch:
    image: np.ndarray  # (p, p, p) float32
    labels: np.ndarray  # (p, p, p) uint8
    atlas_image: np.ndarray  # (p, p, p) float32
    atlas_labels: np.ndarray  # (p, p, p) float32, labels / (classes - 1)
    origin: tuple = (0, 0, 0)


def scale_labels(lab: np.ndarray) -> np.ndarray:
    """uint8 labels -> float32 channel in [0, 1]."""
    return lab.astype(np.float32) / np.float32(NUM_CLASSES - 1)


def sample_patch(sample: Sample, patch_edge: int, rng, fg_bias: float = 0.5,
                 max_retries: int = 10) -> Patch:
    """Random patch that overlaps foreground.

    With probability fg_bias the patch is anchored on a randomly chosen
    foreground voxel (uniform origin among those covering it); otherwise
    the origin is uniform over the volume, re-drawn (bounded) until the
    patch touches any foreground. Draw order is fixed for stream stability.
    """
    p = int(patch_edge)
    dims = sample.image.dims
    if p <= 0 or p % 16 != 0:
        raise ValueError(f"patch edge must be a positive multiple of 16, got {p}")
    if any(p > d for d in dims):
        raise ValueError(f"patch edge {p} exceeds volume dims {dims}")
    hi = [d - p for d in dims]
    anchored = rng.random() < fg_bias
    if anchored:
        fg = np.argwhere(sample.labels.data > 0)
        if len(fg):
            voxel = fg[int(rng.integers(len(fg)))]
            origin = tuple(
                int(rng.integers(max(0, v - p + 1), min(h, v) + 1))
                for v, h in zip(voxel, hi)
            )
            sl = tuple(slice(o, o + p) for o in origin)
            lab = sample.labels.data[sl]
        else:
            anchored = False
    if not anchored:
        for _ in range(max(1, int(max_retries))):
            origin = tuple(int(rng.integers(0, h + 1)) for h in hi)
            sl = tuple(slice(o, o + p) for o in origin)
            lab = sample.labels.data[sl]
            if lab.any():
                break
    return Patch(
        image=sample.image.data[sl].copy(),
        labels=lab.copy(),
        atlas_image=sample.atlas.image.data[sl].copy(),
        atlas_labels=scale_labels(sample.atlas.labels.data[sl]),
        origin=origin,
    )


@dataclass
class AugmentationConfig:
    flip_prob: tuple = (0.5, 0.5, 0.5)  # per-axis mirror probability
    max_rotation_deg: float = 35.0
    contrast_range: tuple = (0.75, 1.3)  # gamma exponent bounds
    elastic_grid_voxels: int = 16  # control point spacing
    elastic_max_mm: float = 3.0  # per-axis displacement bound
    flip: bool = True
    rotate: bool = True
    elastic: bool = True
    contrast: bool = True

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(flip=False, rotate=False, elastic=False, contrast=False)


def _rotation_matrix(angles_deg: np.ndarray) -> np.ndarray:
    ax, ay, az = np.deg2rad(angles_deg)
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _warp_all(patch: Patch, coords) -> Patch:
    """Resample the four channels at the given coordinates jointly."""

    def img(arr):
        return ndimage.map_coordinates(arr, coords, order=1, mode="nearest").astype(
            np.float32
        )

    def lab(arr):
        return ndimage.map_coordinates(arr, coords, order=0, mode="nearest")

    return Patch(
        image=img(patch.image),
        labels=lab(patch.labels),
        atlas_image=img(patch.atlas_image),
        atlas_labels=img(patch.atlas_labels),
        origin=patch.origin,
    )


def augment(
    patch: Patch, cfg: AugmentationConfig, rng, spacing_mm=(0.8, 0.8, 0.8)
) -> Patch:
    """Random flip, rotation, elastic warp, and contrast jitter.

    Draws happen in a fixed order regardless of outcomes so the stream is
    reproducible. With everything disabled the input comes back unchanged.
    """
    out = patch
    if cfg.flip:
        axes = [ax for ax in range(3) if rng.random() < cfg.flip_prob[ax]]
        if axes:
            out = Patch(
                image=np.flip(out.image, axes).copy(),
                labels=np.flip(out.labels, axes).copy(),
                atlas_image=np.flip(out.atlas_image, axes).copy(),
                atlas_labels=np.flip(out.atlas_labels, axes).copy(),
                origin=out.origin,
            )
    if cfg.rotate:
        angles = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, size=3)
        rot = _rotation_matrix(angles)
        shape = np.array(out.image.shape, dtype=np.float64)
        center = (shape - 1) / 2.0
        grid = np.indices(out.image.shape, dtype=np.float64)
        rel = grid - center[:, None, None, None]
        # sample input at R^-1 applied to output coordinates
        coords = np.einsum("ij,jxyz->ixyz", rot.T, rel) + center[:, None, None, None]
        out = _warp_all(out, coords)
    if cfg.elastic:
        n = out.image.shape[0]
        spacing = np.asarray(spacing_mm, dtype=np.float64)
        n_ctrl = n // cfg.elastic_grid_voxels + 1
        disp_mm = rng.uniform(-cfg.elastic_max_mm, cfg.elastic_max_mm, size=(3, n_ctrl, n_ctrl, n_ctrl))
        disp_vox = disp_mm / spacing[:, None, None, None]
        grid = np.indices(out.image.shape, dtype=np.float64)
        ctrl_coords = grid / cfg.elastic_grid_voxels
        field = np.stack(
            [
                ndimage.map_coordinates(disp_vox[ax], ctrl_coords, order=1, mode="nearest")
                for ax in range(3)
            ]
        )
        out = _warp_all(out, grid + field)
    if cfg.contrast:
        gamma = rng.uniform(*cfg.contrast_range)
        out = replace(
            out,
            image=np.power(np.clip(out.image, 0.0, 1.0), gamma).astype(np.float32),
            atlas_image=np.power(np.clip(out.atlas_image, 0.0, 1.0), gamma).astype(
                np.float32
            ),
        )
    return out


def window_starts(dim: int, patch_edge: int, stride: int) -> list:
    """Start offsets along one axis; the last window snaps to the edge."""
    starts = list(range(0, dim - patch_edge + 1, stride))
    if starts[-1] != dim - patch_edge:
        starts.append(dim - patch_edge)
    return starts


def sliding_window_infer(
    predict,
    image: Volume,
    atlas: AtlasEntry,
    patch_edge: int,
    stride: int,
    origins=None,
    batch_size: int = 4,
) -> LabelMap:
    """Tile the volume, average class probabilities, argmax to labels.

    `predict` maps stacked (b, p, p, p) arrays (image, atlas_image,
    atlas_labels) to a (b, 8, p, p, p) probability array; windows are fed
    to it in groups of batch_size. Accumulation is float64 in origin order,
    so identical runs stitch identically.
    """
    p = int(patch_edge)
    dims = image.dims
    if any(p > d for d in dims):
        raise ValueError(f"patch edge {p} exceeds volume dims {dims}")
    if not (0 < stride <= p):
        raise ValueError(f"stride must be in (0, {p}], got {stride}")
    if origins is None:
        origins = [
            (ox, oy, oz)
            for ox in window_starts(dims[0], p, stride)
            for oy in window_starts(dims[1], p, stride)
            for oz in window_starts(dims[2], p, stride)
        ]
    prob_sum = np.zeros((NUM_CLASSES,) + dims, dtype=np.float64)
    cover = np.zeros(dims, dtype=np.int32)
    atlas_lab = scale_labels(atlas.labels.data)
    for at in range(0, len(origins), max(1, int(batch_size))):
        chunk = origins[at : at + max(1, int(batch_size))]
        slices = [tuple(slice(o, o + p) for o in origin) for origin in chunk]
        probs = predict(
            np.stack([image.data[sl] for sl in slices]),
            np.stack([atlas.image.data[sl] for sl in slices]),
            np.stack([atlas_lab[sl] for sl in slices]),
        )
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (len(chunk), NUM_CLASSES, p, p, p):
            raise ValueError(f"predictor returned shape {probs.shape}")
        for sl, win in zip(slices, probs):
            prob_sum[(slice(None),) + sl] += win
            cover[sl] += 1
    if (cover == 0).any():
        raise ValueError("window tiling left voxels uncovered")
    mean = prob_sum / cover[None]
    return LabelMap(np.argmax(mean, axis=0).astype(np.uint8), image.spacing_mm)


# --- file-based dataset plumbing -------------------------------------------


def write_manifest(path, entries) -> None:
    """entries: list of {"image_path": ..., "labels_path": ..., "ga": float}."""
    with open(path, "w") as fh:
        json.dump({"subjects": list(entries)}, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> list:
    with open(path) as fh:
        doc = json.load(fh)
    subjects = doc.get("subjects")
    if not isinstance(subjects, list) or not subjects:
        raise ValueError(f"manifest {path} has no subjects")
    for e in subjects:
        for key in ("image_path", "labels_path", "ga"):
            if key not in e:
                raise ValueError(f"manifest entry missing {key!r}: {e}")
    return subjects


def atlas_paths(atlas_dir, week: int) -> tuple[Path, Path]:
    d = Path(atlas_dir)
    return d / f"atlas_{week}_image.mvol", d / f"atlas_{week}_labels.mvol"


def write_atlas_dir(atlas_dir, entries) -> None:
    Path(atlas_dir).mkdir(parents=True, exist_ok=True)
    for entry in entries:
        ip, lp = atlas_paths(atlas_dir, entry.ga_week)
        write_mvol(ip, entry.image)
        write_mvol(lp, entry.labels)


class AtlasLibrary:
    """Lazy cache of atlas entries read from an atlas directory."""

    def __init__(self, atlas_dir):
        self.atlas_dir = Path(atlas_dir)
        self._cache: dict[int, AtlasEntry] = {}

    def check_complete(self):
        missing = []
        for week in range(ATLAS_WEEK_MIN, ATLAS_WEEK_MAX + 1):
            ip, lp = atlas_paths(self.atlas_dir, week)
            if not ip.exists() or not lp.exists():
                missing.append(week)
        if missing:
            raise FileNotFoundError(
                f"atlas dir {self.atlas_dir} missing weeks {missing}"
            )

    def get(self, week: int) -> AtlasEntry:
        if week not in self._cache:
            ip, lp = atlas_paths(self.atlas_dir, week)
            image = read_mvol(ip)
            labels = read_mvol(lp)
            if not isinstance(image, Volume) or not isinstance(labels, LabelMap):
                raise ValueError(f"atlas files for week {week} have wrong kinds")
            self._cache[week] = AtlasEntry(week, image, labels)
        return self._cache[week]


def load_sample(entry: dict, atlases: AtlasLibrary, base_dir=None) -> Sample:
    """Read one manifest entry into a Sample, pairing its atlas by GA."""
    base = Path(base_dir) if base_dir is not None else Path(".")
    image = read_mvol(base / entry["image_path"])
    labels = read_mvol(base / entry["labels_path"])
    if not isinstance(image, Volume):
        raise ValueError(f"{entry['image_path']} is not an image volume")
    if not isinstance(labels, LabelMap):
        raise ValueError(f"{entry['labels_path']} is not a label map")
    from .volume import normalize_max

    ga = float(entry["ga"])
    return Sample(
        image=normalize_max(image),
        labels=labels,
        atlas=atlases.get(pair_atlas(ga)),
        ga=ga,
        subject_id=str(entry.get("subject_id", Path(entry["image_path"]).stem)),
    )

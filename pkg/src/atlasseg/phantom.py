"""Synthetic brain-like phantom, parameterized by gestational age.

The phantom is a concentric head model on the voxel grid (spacing is carried
as metadata only; geometry is defined in normalized voxel coordinates).
With t = (ga - 22) / 17 in [0, 1]:

  * brain radius grows linearly with t (0.52 -> 0.76 of the half edge),
  * a CSF shell wraps a cortical GM ribbon wrapping a WM core,
  * the WM/GM boundary is modulated by a sinusoidal "folding" field whose
    amplitude and angular frequency both grow with t,
  * paired ellipsoidal ventricles shrink with t (relative to the brain),
  * deep GM spheres, a cerebellum ellipsoid and a brainstem cylinder sit
    in the inferior half,
  * tissue intensities are fixed plateaus except the WM/GM pair, whose
    contrast narrows as t grows.

`variability` scales small seed-driven jitters of every shape and intensity
parameter; at 0 the output is a pure function of ga and size. `noise_sd`
adds Gaussian noise which is clipped at zero and re-normalized, so the
returned image always has max exactly 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .volume import (
    DEFAULT_SPACING_MM,
    LabelMap,
    NUM_CLASSES,
    TISSUE_NAMES,
    ValidationError,
    Volume,
    normalize_max,
)

GA_MIN = 22.0
GA_MAX = 39.0
ATLAS_WEEK_MIN = 23
ATLAS_WEEK_MAX = 38
MIN_SIZE = 32
CANONICAL_ATLAS_SEED = 0

CSF, GM, WM, VENT, CEREB, DGM, STEM = 1, 2, 3, 4, 5, 6, 7


class GeometryError(ValidationError):
    """Raised when the requested grid cannot hold every tissue."""


@dataclass
class PhantomSpec:
    ga: float  # gestational age, weeks
    seed: int = 0
    size: int = 64  # cubic edge, voxels
    variability: float = 0.0  # 0 = canonical shape, 1 = full jitter
    noise_sd: float = 0.0  # additive Gaussian, on the pre-normalized scale
    spacing_mm: tuple = DEFAULT_SPACING_MM

    def __post_init__(self):
        self.ga = float(self.ga)
        if not (GA_MIN <= self.ga <= GA_MAX):
            raise ValueError(f"ga must be in [{GA_MIN}, {GA_MAX}], got {self.ga}")
        self.size = int(self.size)
        if self.size < MIN_SIZE:
            raise ValueError(f"size must be >= {MIN_SIZE}, got {self.size}")
        self.variability = float(self.variability)
        if not (0.0 <= self.variability <= 1.0):
            raise ValueError(f"variability must be in [0, 1], got {self.variability}")
        self.noise_sd = float(self.noise_sd)
        if not (self.noise_sd >= 0.0 and math.isfinite(self.noise_sd)):
            raise ValueError(f"noise_sd must be finite and >= 0, got {self.noise_sd}")


@dataclass
class AtlasEntry:
    """Canonical template for one integer gestational week."""

    ga_week: int
    image: Volume
    labels: LabelMap


def _t(ga: float) -> float:
    return (ga - GA_MIN) / (GA_MAX - GA_MIN)


def tissue_intensities(ga: float, shifts=None) -> np.ndarray:
    """Per-class intensity plateaus before noise and normalization.

    GM rises and WM falls toward GM as ga grows, so their contrast
    |wm - gm| shrinks from 0.32 down to 0.12 across the ga range.
    """
    t = _t(ga)
    gm = 0.46 + 0.04 * t
    lut = np.zeros(NUM_CLASSES, dtype=np.float64)
    lut[CSF] = 0.88
    lut[GM] = gm
    lut[WM] = gm + (0.32 - 0.20 * t)
    lut[VENT] = 1.00
    lut[CEREB] = 0.24
    lut[DGM] = 0.35
    lut[STEM] = 0.12
    if shifts is not None:
        lut[1:] += shifts
    return lut


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelMap]:
    """Build one phantom. Deterministic in spec; see module docstring."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    v = spec.variability

    # jitters are always drawn in this exact order so that the stream is
    # stable; multiplying by v=0 reproduces the canonical phantom exactly
    u_radius = rng.uniform(-1, 1)
    u_aniso = rng.uniform(-1, 1, size=3)
    u_phase = rng.uniform(-1, 1, size=2)
    u_fold_amp = rng.uniform(-1, 1)
    u_vent_scale = rng.uniform(-1, 1)
    u_vent_shift = rng.uniform(-1, 1, size=3)
    u_deep_shift = rng.uniform(-1, 1, size=3)
    u_intensity = rng.uniform(-1, 1, size=NUM_CLASSES - 1)

    t = _t(spec.ga)
    n = spec.size
    half = (n - 1) / 2.0

    radius = (0.52 + 0.24 * t) * (1.0 + 0.06 * v * u_radius) * half
    aniso = 1.0 + 0.05 * v * u_aniso

    axes = [(np.arange(n, dtype=np.float64) - half) for _ in range(3)]
    x = axes[0][:, None, None] / (radius * aniso[0])
    y = axes[1][None, :, None] / (radius * aniso[1])
    z = axes[2][None, None, :] / (radius * aniso[2])
    r = np.sqrt(x * x + y * y + z * z)

    # angular folding field on the unit sphere; sin(phi) factor keeps it
    # continuous at the poles where theta is undefined
    with np.errstate(invalid="ignore", divide="ignore"):
        theta = np.arctan2(y, x)
        cos_phi = np.where(r > 0, z / np.maximum(r, 1e-12), 1.0)
    phi = np.arccos(np.clip(cos_phi, -1.0, 1.0))
    m = 3 + round(3 * t)
    l = 2 + round(2 * t)
    amp = (0.012 + 0.055 * t) * (1.0 + 0.30 * v * u_fold_amp)
    p1 = math.pi * v * u_phase[0]
    p2 = math.pi * v * u_phase[1]
    fold = amp * np.sin(m * theta + p1) * np.sin(l * phi + p2) * np.sin(phi)

    inside = r <= 1.0
    lab = np.zeros((n, n, n), dtype=np.uint8)
    lab[inside] = CSF
    lab[r <= 0.88] = GM
    lab[r <= 0.74 + fold] = WM

    def ellipsoid(center, semi):
        q = (
            ((x - center[0]) / semi[0]) ** 2
            + ((y - center[1]) / semi[1]) ** 2
            + ((z - center[2]) / semi[2]) ** 2
        )
        return (q <= 1.0) & inside

    deep_shift = 0.03 * v * u_deep_shift
    cereb = ellipsoid(
        (0.0 + deep_shift[0], -0.50 + deep_shift[1], -0.30 + deep_shift[2]),
        (0.28, 0.20, 0.18),
    )
    lab[cereb] = CEREB

    stem = (
        ((x - deep_shift[0]) ** 2 + (y + 0.10 - deep_shift[1]) ** 2 <= 0.13**2)
        & (z >= -0.88)
        & (z <= -0.40)
        & inside
    )
    lab[stem] = STEM

    for sx in (-1.0, 1.0):
        dgm = ellipsoid(
            (sx * 0.16 + deep_shift[0], -0.10 + deep_shift[1], 0.02 + deep_shift[2]),
            (0.13, 0.13, 0.13),
        )
        lab[dgm] = DGM

    vk = (1.0 - 0.40 * t) * (1.0 + 0.10 * v * u_vent_scale)
    vshift = 0.02 * v * u_vent_shift
    for sx in (-1.0, 1.0):
        vent = ellipsoid(
            (sx * 0.28 + vshift[0], 0.10 + vshift[1], 0.12 + vshift[2]),
            (0.15 * vk, 0.32 * vk, 0.15 * vk),
        )
        lab[vent] = VENT

    counts = np.bincount(lab.ravel(), minlength=NUM_CLASSES)
    missing = [TISSUE_NAMES[i] for i in range(NUM_CLASSES) if counts[i] == 0]
    if missing:
        raise GeometryError(
            f"grid of size {n} at ga {spec.ga} lost tissue(s): {', '.join(missing)}"
        )

    lut = tissue_intensities(spec.ga, shifts=0.02 * v * u_intensity)
    img = lut[lab]
    if spec.noise_sd > 0:
        img = img + rng.normal(0.0, spec.noise_sd, size=img.shape)
        img = np.maximum(img, 0.0)

    vol = normalize_max(Volume(img.astype(np.float32), spec.spacing_mm))
    return vol, LabelMap(lab, spec.spacing_mm)


def atlas_for_week(week: int, size: int = 64, spacing_mm=DEFAULT_SPACING_MM) -> AtlasEntry:
    """Canonical (jitter-free, noise-free, seed 0) phantom for one week."""
    if int(week) != week:
        raise ValueError(f"atlas week must be an integer, got {week!r}")
    week = int(week)
    if not (ATLAS_WEEK_MIN <= week <= ATLAS_WEEK_MAX):
        raise ValueError(
            f"atlas week must be in [{ATLAS_WEEK_MIN}, {ATLAS_WEEK_MAX}], got {week}"
        )
    img, lab = generate_phantom(
        PhantomSpec(
            ga=float(week),
            seed=CANONICAL_ATLAS_SEED,
            size=size,
            variability=0.0,
            noise_sd=0.0,
            spacing_mm=spacing_mm,
        )
    )
    return AtlasEntry(week, img, lab)


def generate_cohort(
    n: int,
    week_weights: dict,
    seed: int,
    size: int = 64,
    variability: float = 0.3,
    noise_sd: float = 0.03,
    spacing_mm=DEFAULT_SPACING_MM,
) -> list[PhantomSpec]:
    """Draw n subject specs with GA sampled from a weighted week histogram.

    week_weights maps integer week -> nonnegative weight. Each subject gets
    ga = week + uniform(-0.5, 0.5) clipped to the legal range, plus its own
    generator seed, all from a single stream seeded by `seed`.
    """
    if n <= 0:
        raise ValueError(f"cohort size must be positive, got {n}")
    weeks = sorted(int(w) for w in week_weights)
    if not weeks:
        raise ValueError("week_weights is empty")
    for w in weeks:
        if not (GA_MIN <= w <= GA_MAX):
            raise ValueError(f"week {w} outside [{GA_MIN}, {GA_MAX}]")
    weights = np.array([float(week_weights[w]) for w in weeks], dtype=np.float64)
    if (weights < 0).any() or weights.sum() <= 0:
        raise ValueError("week weights must be nonnegative with a positive sum")
    probs = weights / weights.sum()

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    specs = []
    for _ in range(n):
        week = int(rng.choice(weeks, p=probs))
        ga = float(np.clip(week + rng.uniform(-0.5, 0.5), GA_MIN, GA_MAX))
        subject_seed = int(rng.integers(0, 2**63 - 1))
        specs.append(
            PhantomSpec(
                ga=ga,
                seed=subject_seed,
                size=size,
                variability=variability,
                noise_sd=noise_sd,
                spacing_mm=spacing_mm,
            )
        )
    return specs

"""Overlap and surface-distance metrics for 8-class segmentations.

Definitions used throughout:

  * DSC(G, P) = 2|G n P| / (|G| + |P|); both masks empty gives 1.0,
    exactly one empty gives 0.0.
  * The surface of a mask is the set of centers (in mm, index * spacing)
    of its voxels that have at least one of their 6 face neighbors outside
    the mask; voxels on the array boundary count as surface.
  * HD is the symmetric Hausdorff distance between the two surface point
    sets. 95HD is by default the nearest-rank 95th percentile of the
    combined multiset of both directed nearest-distance lists; the
    max-of-per-direction variant is available via percentile_mode.
  * ASSD = (sum of G->P nearest distances + sum of P->G nearest distances)
    divided by the total number of surface points.

When either mask is empty the surface metrics are undefined; they are
reported as NaN and excluded (but counted) in the macro averages. Macro
values average the 7 foreground classes only.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .volume import NUM_CLASSES, TISSUE_NAMES, LabelMap

FOREGROUND_CLASSES = tuple(range(1, NUM_CLASSES))

SUBGROUP_NAMES = ("early", "mid_early", "mid_late", "late")


def subgroup_of(ga: float) -> str:
    """Gestational-age bin: 22-25, 26-29, 30-33, 34+ weeks by floor(ga)."""
    week = math.floor(ga)
    if week < 22 or ga > 39.0:
        raise ValueError(f"ga {ga} outside the supported [22, 39] range")
    if week <= 25:
        return "early"
    if week <= 29:
        return "mid_early"
    if week <= 33:
        return "mid_late"
    return "late"


def dsc(g: np.ndarray, p: np.ndarray) -> float:
    """Dice coefficient of two boolean masks of equal shape."""
    g = np.asarray(g, dtype=bool)
    p = np.asarray(p, dtype=bool)
    if g.shape != p.shape:
        raise ValueError(f"shape mismatch {g.shape} vs {p.shape}")
    ng, np_ = int(g.sum()), int(p.sum())
    if ng + np_ == 0:
        return 1.0
    inter = int(np.logical_and(g, p).sum())
    return 2.0 * inter / (ng + np_)


def extract_surface(mask: np.ndarray, spacing_mm) -> np.ndarray:
    """(n, 3) float64 array of surface voxel centers in mm.

    A voxel is surface if it is in the mask and any 6-neighbor is outside,
    with everything beyond the array treated as outside.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError(f"mask must be 3D, got shape {mask.shape}")
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    interior &= padded[:-2, 1:-1, 1:-1]
    interior &= padded[2:, 1:-1, 1:-1]
    interior &= padded[1:-1, :-2, 1:-1]
    interior &= padded[1:-1, 2:, 1:-1]
    interior &= padded[1:-1, 1:-1, :-2]
    interior &= padded[1:-1, 1:-1, 2:]
    surf = mask & ~interior
    pts = np.argwhere(surf).astype(np.float64)
    return pts * np.asarray(spacing_mm, dtype=np.float64)[None, :]


def directed_nn_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """For each point in src, distance to its nearest point in dst (mm)."""
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("directed distances need nonempty point sets")
    dists, _ = cKDTree(dst).query(src, k=1)
    return np.asarray(dists, dtype=np.float64)


def surface_distance_sets(g_mask, p_mask, spacing_mm):
    """Both directed nearest-distance lists, or None when undefined."""
    sg = extract_surface(g_mask, spacing_mm)
    sp = extract_surface(p_mask, spacing_mm)
    if len(sg) == 0 or len(sp) == 0:
        return None
    return directed_nn_distances(sg, sp), directed_nn_distances(sp, sg)


def _nearest_rank(sorted_vals: np.ndarray, q: float) -> float:
    k = math.ceil(q * len(sorted_vals))
    return float(sorted_vals[max(k, 1) - 1])


def hd(g_mask, p_mask, spacing_mm) -> float:
    """Symmetric Hausdorff distance in mm; NaN if either surface is empty."""
    pair = surface_distance_sets(g_mask, p_mask, spacing_mm)
    if pair is None:
        return float("nan")
    return float(max(pair[0].max(), pair[1].max()))


def hd95(g_mask, p_mask, spacing_mm, percentile_mode: str = "combined") -> float:
    """95th-percentile Hausdorff distance in mm (nearest-rank).

    percentile_mode "combined" ranks the pooled multiset of both directed
    lists; "per_direction" takes the max of the two per-direction ranks.
    """
    pair = surface_distance_sets(g_mask, p_mask, spacing_mm)
    if pair is None:
        return float("nan")
    if percentile_mode == "combined":
        pooled = np.sort(np.concatenate(pair))
        return _nearest_rank(pooled, 0.95)
    if percentile_mode == "per_direction":
        return max(
            _nearest_rank(np.sort(pair[0]), 0.95),
            _nearest_rank(np.sort(pair[1]), 0.95),
        )
    raise ValueError(f"unknown percentile_mode {percentile_mode!r}")


def assd(g_mask, p_mask, spacing_mm) -> float:
    """Average symmetric surface distance in mm; NaN if undefined."""
    pair = surface_distance_sets(g_mask, p_mask, spacing_mm)
    if pair is None:
        return float("nan")
    d_gp, d_pg = pair
    return float((d_gp.sum() + d_pg.sum()) / (len(d_gp) + len(d_pg)))


@dataclass
class ClassMetrics:
    dsc: float
    hd: float
    hd95: float
    assd: float

    @property
    def surface_defined(self) -> bool:
        return not math.isnan(self.assd)


@dataclass
class SubjectReport:
    subject_id: str
    ga: float
    per_class: dict = field(default_factory=dict)  # tissue name -> ClassMetrics

    @property
    def subgroup(self) -> str:
        return subgroup_of(self.ga)

    def _macro(self, attr) -> float:
        vals = [getattr(self.per_class[TISSUE_NAMES[c]], attr) for c in FOREGROUND_CLASSES]
        arr = np.array(vals, dtype=np.float64)
        if np.isnan(arr).all():
            return float("nan")
        return float(np.nanmean(arr))

    @property
    def macro_dsc(self) -> float:
        return self._macro("dsc")

    @property
    def macro_hd95(self) -> float:
        return self._macro("hd95")

    @property
    def macro_assd(self) -> float:
        return self._macro("assd")

    @property
    def undefined_count(self) -> int:
        return sum(
            1
            for c in FOREGROUND_CLASSES
            if not self.per_class[TISSUE_NAMES[c]].surface_defined
        )


def evaluate_subject(
    pred: LabelMap, truth: LabelMap, ga: float, subject_id: str = ""
) -> SubjectReport:
    """Per-class and macro metrics for one prediction/truth pair."""
    if pred.dims != truth.dims:
        raise ValueError(f"dims mismatch {pred.dims} vs {truth.dims}")
    if tuple(pred.spacing_mm) != tuple(truth.spacing_mm):
        raise ValueError("spacing mismatch between prediction and truth")
    report = SubjectReport(subject_id=subject_id, ga=float(ga))
    for c in FOREGROUND_CLASSES:
        g = truth.data == c
        p = pred.data == c
        d = dsc(g, p)
        pair = surface_distance_sets(g, p, truth.spacing_mm)
        if pair is None:
            cm = ClassMetrics(d, float("nan"), float("nan"), float("nan"))
        else:
            d_gp, d_pg = pair
            pooled = np.sort(np.concatenate(pair))
            cm = ClassMetrics(
                d,
                float(max(d_gp.max(), d_pg.max())),
                _nearest_rank(pooled, 0.95),
                float((d_gp.sum() + d_pg.sum()) / (len(d_gp) + len(d_pg))),
            )
        report.per_class[TISSUE_NAMES[c]] = cm
    return report


def _mean_sd(vals) -> tuple[float, float]:
    arr = np.array([v for v in vals if not math.isnan(v)], dtype=np.float64)
    if len(arr) == 0:
        return float("nan"), float("nan")
    if len(arr) == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std(ddof=1))


def subgroup_summary(reports) -> dict:
    """Mean and SD of the macro metrics per gestational-age subgroup.

    Returns {subgroup: {"n": int, "dsc": (mean, sd), "hd95": ..., "assd": ...}}
    with only the subgroups that actually occur, plus a "_spread" entry
    holding the across-subgroup SD of the mean DSC.
    """
    buckets: dict[str, list[SubjectReport]] = {}
    for r in reports:
        buckets.setdefault(r.subgroup, []).append(r)
    out = {}
    for name in SUBGROUP_NAMES:
        if name not in buckets:
            continue
        rs = buckets[name]
        out[name] = {
            "n": len(rs),
            "dsc": _mean_sd([r.macro_dsc for r in rs]),
            "hd95": _mean_sd([r.macro_hd95 for r in rs]),
            "assd": _mean_sd([r.macro_assd for r in rs]),
        }
    means = [out[k]["dsc"][0] for k in out]
    out["_spread"] = _mean_sd(means)[1] if len(means) > 1 else 0.0
    return out


def _fmt(x: float) -> str:
    if isinstance(x, float) and math.isnan(x):
        return ""
    return f"{x:.6f}"


PER_CLASS_CSV_COLUMNS = (
    "subject_id",
    "ga",
    "subgroup",
    "tissue",
    "dsc",
    "hd_mm",
    "hd95_mm",
    "assd_mm",
    "defined",
)


def reports_to_csv(reports, path) -> None:
    """One row per subject x tissue, plus a macro row per subject."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PER_CLASS_CSV_COLUMNS)
        for r in reports:
            for c in FOREGROUND_CLASSES:
                name = TISSUE_NAMES[c]
                cm = r.per_class[name]
                w.writerow(
                    [
                        r.subject_id,
                        _fmt(r.ga),
                        r.subgroup,
                        name,
                        _fmt(cm.dsc),
                        _fmt(cm.hd),
                        _fmt(cm.hd95),
                        _fmt(cm.assd),
                        int(cm.surface_defined),
                    ]
                )
            w.writerow(
                [
                    r.subject_id,
                    _fmt(r.ga),
                    r.subgroup,
                    "macro",
                    _fmt(r.macro_dsc),
                    "",
                    _fmt(r.macro_hd95),
                    _fmt(r.macro_assd),
                    7 - r.undefined_count,
                ]
            )


SUBGROUP_CSV_COLUMNS = (
    "subgroup",
    "n",
    "dsc_mean",
    "dsc_sd",
    "hd95_mean",
    "hd95_sd",
    "assd_mean",
    "assd_sd",
)


def subgroup_summary_to_csv(summary: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUBGROUP_CSV_COLUMNS)
        for name in SUBGROUP_NAMES:
            if name not in summary:
                continue
            s = summary[name]
            w.writerow(
                [
                    name,
                    s["n"],
                    _fmt(s["dsc"][0]),
                    _fmt(s["dsc"][1]),
                    _fmt(s["hd95"][0]),
                    _fmt(s["hd95"][1]),
                    _fmt(s["assd"][0]),
                    _fmt(s["assd"][1]),
                ]
            )

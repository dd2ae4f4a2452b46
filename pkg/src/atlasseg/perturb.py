"""Test-time intensity perturbations and the robustness sweep.

Perturbations apply to the subject image only; atlas inputs are passed
through untouched by the sweep. Both ops re-normalize so downstream code
always sees a max-1 volume.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .volume import Volume, normalize_max

GAMMA_GRID_LOW = (0.5, 0.6, 0.7, 0.8, 0.9)
GAMMA_GRID_HIGH = (1.1, 1.2, 1.3, 1.4, 1.5)
NOISE_SD_GRID = (0.01, 0.02, 0.03, 0.04, 0.05)


def gamma_correct(vol: Volume, gamma: float) -> Volume:
    """Raise intensities to the given exponent, then max-normalize."""
    gamma = float(gamma)
    if not (gamma > 0 and math.isfinite(gamma)):
        raise ValueError(f"gamma must be positive and finite, got {gamma}")
    if float(vol.data.min()) < 0:
        raise ValueError("gamma correction needs nonnegative intensities")
    powered = np.power(vol.data.astype(np.float64), gamma)
    return normalize_max(Volume(powered.astype(np.float32), vol.spacing_mm))


def add_noise(vol: Volume, sd: float, seed: int) -> Volume:
    """Additive Gaussian noise, negatives clipped to 0, then max-normalize."""
    sd = float(sd)
    if not (sd >= 0 and math.isfinite(sd)):
        raise ValueError(f"noise sd must be finite and >= 0, got {sd}")
    if sd == 0.0:
        return normalize_max(Volume(vol.data.copy(), vol.spacing_mm))
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    noisy = vol.data.astype(np.float64) + rng.normal(0.0, sd, size=vol.dims)
    noisy = np.maximum(noisy, 0.0)
    return normalize_max(Volume(noisy.astype(np.float32), vol.spacing_mm))


@dataclass
class PerturbationSpec:
    kind: str  # "gamma" or "noise"
    value: float  # gamma exponent, or noise sd
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gamma", "noise"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")


def apply_perturbation(vol: Volume, spec: PerturbationSpec) -> Volume:
    if spec.kind == "gamma":
        return gamma_correct(vol, spec.value)
    return add_noise(vol, spec.value, spec.seed)


ROBUSTNESS_CSV_COLUMNS = ("kind", "value", "mean_dsc", "delta_dsc")


def run_robustness_suite(
    predict,
    samples,
    patch_edge: int,
    stride: int,
    gamma_low=GAMMA_GRID_LOW,
    gamma_high=GAMMA_GRID_HIGH,
    noise_grid=NOISE_SD_GRID,
    noise_seed: int = 0,
    csv_path=None,
    svg_path=None,
):
    """Mean macro DSC across samples for each perturbation grid point.

    `predict` is a patch predictor (see sliding-window inference); `samples`
    is a list of pipeline Samples with ground truth labels. Returns a dict
    kind -> list of (value, mean_dsc, delta_dsc), where each curve includes
    the unperturbed operating point (gamma 1.0 or sd 0.0) whose DSC is, by
    construction, exactly the standard evaluation value.
    """
    from .metrics import evaluate_subject
    from .pipeline import sliding_window_infer

    def mean_macro_dsc(perturb_fn):
        vals = []
        for s in samples:
            image = perturb_fn(s.image)
            pred = sliding_window_infer(
                predict, image, s.atlas, patch_edge, stride
            )
            rep = evaluate_subject(pred, s.labels, s.ga)
            vals.append(rep.macro_dsc)
        return float(np.mean(vals))

    base = mean_macro_dsc(lambda v: v)
    curves = {}
    for kind, grid in (("gamma_low", gamma_low), ("gamma_high", gamma_high)):
        pts = [(1.0, base, 0.0)]
        for g in grid:
            d = mean_macro_dsc(lambda v, g=g: gamma_correct(v, g))
            pts.append((float(g), d, d - base))
        curves[kind] = sorted(pts)
    pts = [(0.0, base, 0.0)]
    for sd in noise_grid:
        d = mean_macro_dsc(lambda v, sd=sd: add_noise(v, sd, noise_seed))
        pts.append((float(sd), d, d - base))
    curves["noise"] = sorted(pts)

    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ROBUSTNESS_CSV_COLUMNS)
            for kind in ("gamma_low", "gamma_high", "noise"):
                for value, mean_dsc, delta in curves[kind]:
                    w.writerow([kind, f"{value:.6f}", f"{mean_dsc:.6f}", f"{delta:.6f}"])
    if svg_path is not None:
        plot_robustness(curves, svg_path)
    return curves


def plot_robustness(curves: dict, svg_path) -> None:
    """Three-panel DSC-vs-perturbation line plot, written as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.2))
    titles = {
        "gamma_low": "gamma < 1",
        "gamma_high": "gamma > 1",
        "noise": "additive noise sd",
    }
    for ax, kind in zip(axes, ("gamma_low", "gamma_high", "noise")):
        pts = curves[kind]
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        ax.plot(xs, ys, marker="o")
        ax.set_title(titles[kind])
        ax.set_xlabel(kind.startswith("gamma") and "gamma" or "sd")
        ax.set_ylabel("mean macro DSC")
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(svg_path, format="svg")
    plt.close(fig)

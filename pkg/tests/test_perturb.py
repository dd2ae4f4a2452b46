import csv

import numpy as np
import pytest

from atlasseg.perturb import (
    GAMMA_GRID_HIGH,
    GAMMA_GRID_LOW,
    NOISE_SD_GRID,
    PerturbationSpec,
    add_noise,
    apply_perturbation,
    gamma_correct,
    run_robustness_suite,
)
from atlasseg.phantom import PhantomSpec, atlas_for_week, generate_phantom
from atlasseg.pipeline import Sample, pair_atlas
from atlasseg.volume import NUM_CLASSES, Volume


def normalized_volume(seed=0, shape=(10, 10, 10)):
    rng = np.random.default_rng(seed)
    data = rng.random(shape, dtype=np.float32)
    data.flat[0] = 1.0  # pin the max so the input is already normalized
    return Volume(data)


def test_gamma_one_is_bitwise_identity():
    vol = normalized_volume()
    out = gamma_correct(vol, 1.0)
    assert np.array_equal(out.data, vol.data)


def test_noise_zero_is_bitwise_identity():
    vol = normalized_volume()
    out = add_noise(vol, 0.0, seed=123)
    assert np.array_equal(out.data, vol.data)
    assert out.data is not vol.data  # still a fresh array


def test_gamma_monotone_and_direction():
    vol = normalized_volume(1)
    low = gamma_correct(vol, 0.5)
    high = gamma_correct(vol, 2.0)
    # gamma < 1 brightens midtones, gamma > 1 darkens them
    assert (low.data >= vol.data - 1e-7).all()
    assert (high.data <= vol.data + 1e-7).all()
    # ranking of voxels is preserved either way
    order = np.argsort(vol.data.ravel(), kind="stable")
    assert (np.diff(low.data.ravel()[order]) >= -1e-7).all()
    assert (np.diff(high.data.ravel()[order]) >= -1e-7).all()
    assert low.data.max() == 1.0
    assert high.data.max() == 1.0


def test_noise_properties():
    vol = normalized_volume(2)
    a = add_noise(vol, 0.1, seed=7)
    b = add_noise(vol, 0.1, seed=7)
    c = add_noise(vol, 0.1, seed=8)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)
    assert a.data.min() >= 0.0
    assert a.data.max() == 1.0


def test_argument_validation():
    vol = normalized_volume(3)
    with pytest.raises(ValueError):
        gamma_correct(vol, 0.0)
    with pytest.raises(ValueError):
        gamma_correct(vol, -1.0)
    with pytest.raises(ValueError):
        gamma_correct(Volume(vol.data - 2.0), 1.2)  # negative intensities
    with pytest.raises(ValueError):
        add_noise(vol, -0.01, seed=0)
    with pytest.raises(ValueError):
        PerturbationSpec(kind="blur", value=1.0)


def test_apply_perturbation_dispatch():
    vol = normalized_volume(4)
    g = apply_perturbation(vol, PerturbationSpec("gamma", 0.8))
    assert np.array_equal(g.data, gamma_correct(vol, 0.8).data)
    n = apply_perturbation(vol, PerturbationSpec("noise", 0.05, seed=3))
    assert np.array_equal(n.data, add_noise(vol, 0.05, 3).data)


def constant_class_predictor(images, atlas_images, atlas_labels):
    """Fake model that thresholds the image; fast but image-sensitive."""
    b, p, _, _ = images.shape
    out = np.full((b, NUM_CLASSES, p, p, p), 1e-3)
    hot = np.clip((images * (NUM_CLASSES - 1)).round().astype(int), 0, NUM_CLASSES - 1)
    for c in range(NUM_CLASSES):
        out[:, c][hot == c] = 1.0
    return out / out.sum(axis=1, keepdims=True)


@pytest.fixture(scope="module")
def tiny_samples():
    out = []
    for ga, seed in ((24.0, 1), (33.0, 2)):
        img, lab = generate_phantom(PhantomSpec(ga=ga, seed=seed, size=32, variability=0.2))
        out.append(Sample(image=img, labels=lab,
                          atlas=atlas_for_week(pair_atlas(ga), size=32), ga=ga))
    return out


def test_robustness_suite_curves_and_files(tmp_path, tiny_samples):
    csv_path = tmp_path / "robustness.csv"
    svg_path = tmp_path / "robustness.svg"
    curves = run_robustness_suite(
        constant_class_predictor, tiny_samples, patch_edge=32, stride=32,
        csv_path=csv_path, svg_path=svg_path,
    )
    assert set(curves) == {"gamma_low", "gamma_high", "noise"}
    assert len(curves["gamma_low"]) == len(GAMMA_GRID_LOW) + 1
    assert len(curves["gamma_high"]) == len(GAMMA_GRID_HIGH) + 1
    assert len(curves["noise"]) == len(NOISE_SD_GRID) + 1

    # the unperturbed operating point sits inside each curve with delta 0
    base_vals = set()
    for kind in curves:
        anchor = 1.0 if kind.startswith("gamma") else 0.0
        pts = {v: (d, delta) for v, d, delta in curves[kind]}
        assert anchor in pts
        assert pts[anchor][1] == 0.0
        base_vals.add(pts[anchor][0])
    assert len(base_vals) == 1, "all three curves share the same baseline"

    rows = list(csv.DictReader(open(csv_path)))
    assert len(rows) == 18
    assert {r["kind"] for r in rows} == {"gamma_low", "gamma_high", "noise"}
    blob = svg_path.read_text()
    assert blob.lstrip().startswith("<?xml") and "svg" in blob[:300]


def test_robustness_values_are_stable(tmp_path, tiny_samples):
    a = run_robustness_suite(constant_class_predictor, tiny_samples, 32, 32)
    b = run_robustness_suite(constant_class_predictor, tiny_samples, 32, 32)
    assert a == b

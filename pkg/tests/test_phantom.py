"""Checks for the synthetic brain generator: determinism, anatomy trends,
label/image consistency, and the weekly template set."""

import numpy as np
import pytest

from atlasseg.phantom import (
    ATLAS_WEEK_MAX,
    ATLAS_WEEK_MIN,
    CSF,
    GA_MAX,
    GA_MIN,
    GM,
    PhantomSpec,
    VENT,
    WM,
    atlas_for_week,
    generate_cohort,
    generate_phantom,
    tissue_intensities,
)
from atlasseg.volume import NUM_CLASSES


def test_same_spec_same_bits():
    spec = PhantomSpec(ga=29.5, seed=11, size=48, variability=0.4, noise_sd=0.05)
    img1, lab1 = generate_phantom(spec)
    img2, lab2 = generate_phantom(spec)
    assert np.array_equal(img1.data, img2.data)
    assert np.array_equal(lab1.data, lab2.data)


def test_seed_changes_output():
    a = generate_phantom(PhantomSpec(ga=29.5, seed=1, size=48, variability=0.4))
    b = generate_phantom(PhantomSpec(ga=29.5, seed=2, size=48, variability=0.4))
    assert not np.array_equal(a[1].data, b[1].data)


def test_zero_variability_ignores_seed():
    a = generate_phantom(PhantomSpec(ga=31.0, seed=1, size=48, variability=0.0, noise_sd=0.0))
    b = generate_phantom(PhantomSpec(ga=31.0, seed=999, size=48, variability=0.0, noise_sd=0.0))
    assert np.array_equal(a[0].data, b[0].data)
    assert np.array_equal(a[1].data, b[1].data)


@pytest.mark.parametrize("ga", [22.0, 26.7, 31.2, 39.0])
@pytest.mark.parametrize("size", [32, 48])
def test_all_tissues_present(ga, size):
    _, lab = generate_phantom(PhantomSpec(ga=ga, seed=5, size=size, variability=0.3))
    present = np.unique(lab.data)
    assert set(present.tolist()) == set(range(NUM_CLASSES))


def test_growth_trends_across_weeks():
    # older brains: more foreground voxels, relatively smaller ventricles
    fg, vent_frac = [], []
    for week in range(ATLAS_WEEK_MIN, ATLAS_WEEK_MAX + 1):
        _, lab = generate_phantom(
            PhantomSpec(ga=float(week), seed=0, size=64, variability=0.0, noise_sd=0.0)
        )
        n_fg = int((lab.data > 0).sum())
        fg.append(n_fg)
        vent_frac.append((lab.data == VENT).sum() / n_fg)
    assert all(b > a for a, b in zip(fg, fg[1:]))
    assert all(b < a for a, b in zip(vent_frac, vent_frac[1:]))


def test_contrast_narrows_with_age():
    gaps = []
    for ga in (22.0, 26.0, 30.0, 34.0, 39.0):
        lut = tissue_intensities(ga)
        gaps.append(abs(lut[WM] - lut[GM]))  # wm vs gm
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


def test_clean_image_matches_lut():
    # without jitter or noise every tissue is a single grey level (post rescale)
    img, lab = generate_phantom(
        PhantomSpec(ga=28.0, seed=0, size=48, variability=0.0, noise_sd=0.0)
    )
    lut = tissue_intensities(28.0)
    peak = max(lut)
    for cls in range(NUM_CLASSES):
        region = img.data[lab.data == cls]
        got = np.unique(region)
        assert got.size == 1
        assert got[0] == pytest.approx(lut[cls] / peak, abs=1e-6)
    assert img.data.max() == 1.0


def test_noise_behaviour():
    clean, _ = generate_phantom(PhantomSpec(ga=27.0, seed=3, size=48, variability=0.2, noise_sd=0.0))
    noisy, _ = generate_phantom(PhantomSpec(ga=27.0, seed=3, size=48, variability=0.2, noise_sd=0.05))
    assert not np.array_equal(clean.data, noisy.data)
    assert noisy.data.min() >= 0.0
    assert noisy.data.max() == 1.0


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(ga=GA_MIN - 0.1, seed=0)
    with pytest.raises(ValueError):
        PhantomSpec(ga=GA_MAX + 0.1, seed=0)
    with pytest.raises(ValueError):
        PhantomSpec(ga=30.0, seed=0, size=24)
    with pytest.raises(ValueError):
        PhantomSpec(ga=30.0, seed=0, variability=-0.2)
    with pytest.raises(ValueError):
        PhantomSpec(ga=30.0, seed=0, noise_sd=-0.01)


def test_atlas_is_the_noise_free_phantom():
    entry = atlas_for_week(30, size=48)
    img, lab = generate_phantom(
        PhantomSpec(ga=30.0, seed=0, size=48, variability=0.0, noise_sd=0.0)
    )
    assert entry.ga_week == 30
    assert np.array_equal(entry.image.data, img.data)
    assert np.array_equal(entry.labels.data, lab.data)
    assert entry.image.data.max() == 1.0


def test_atlas_week_bounds():
    with pytest.raises(ValueError):
        atlas_for_week(ATLAS_WEEK_MIN - 1)
    with pytest.raises(ValueError):
        atlas_for_week(ATLAS_WEEK_MAX + 1)
    with pytest.raises(ValueError):
        atlas_for_week(23.5)


def test_cohort_determinism_and_weights():
    weights = {25: 1.0, 30: 2.0, 35: 1.0}
    a = generate_cohort(12, weights, seed=4, size=32)
    b = generate_cohort(12, weights, seed=4, size=32)
    assert len(a) == 12
    assert a == b  # specs are plain dataclasses
    seeds = {s.seed for s in a}
    assert len(seeds) == 12, "every subject needs its own generator seed"
    # ages stay within half a week of a weighted week, never elsewhere
    for s in a:
        assert min(abs(s.ga - w) for w in weights) <= 0.5
        assert s.size == 32
    # specs actually render
    img, lab = generate_phantom(a[0])
    assert img.data.shape == (32, 32, 32)
    assert lab.data.max() > 0


def test_cohort_argument_errors():
    with pytest.raises(ValueError):
        generate_cohort(0, {30: 1.0}, seed=0)
    with pytest.raises(ValueError):
        generate_cohort(3, {}, seed=0)
    with pytest.raises(ValueError):
        generate_cohort(3, {30: -1.0}, seed=0)
    with pytest.raises(ValueError):
        generate_cohort(3, {50: 1.0}, seed=0)


def test_csf_is_outer_shell():
    _, lab = generate_phantom(PhantomSpec(ga=30.0, seed=0, size=64, variability=0.0))
    data = lab.data
    fg = np.argwhere(data > 0)
    center = fg.mean(axis=0)
    dist = np.linalg.norm(np.argwhere(data == CSF) - center, axis=1)
    other = np.linalg.norm(np.argwhere((data > 0) & (data != CSF)) - center, axis=1)
    assert np.median(dist) > np.median(other)

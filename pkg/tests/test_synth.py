import filecmp
import math
from dataclasses import asdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segagree.metrics import confusion_counts, evaluate_pair, overlap_metrics
from segagree.synth import (
    DEFAULT_RATERS,
    LesionSpec,
    RaterSpec,
    derive_seed,
    dilate_mm,
    erode_mm,
    generate_cohort,
    generate_lesion,
    perturb_rater,
)
from segagree.volgrid import BinaryMask, volume_ml


def solid_cube(n=9, lo=3, hi=6, spacing=(1.0, 1.0, 1.0)):
    data = np.zeros((n, n, n), np.uint8)
    data[lo:hi, lo:hi, lo:hi] = 1
    return BinaryMask(data, spacing)


def dice(a, b):
    return overlap_metrics(confusion_counts(a, b))[0][0]


def test_spec_validation():
    with pytest.raises(ValueError):
        LesionSpec(radius_range_mm=(0.0, 3.0))
    with pytest.raises(ValueError):
        LesionSpec(radius_range_mm=(5.0, 3.0))
    with pytest.raises(ValueError):
        RaterSpec(flip_prob=1.5)
    with pytest.raises(ValueError):
        RaterSpec(empty_prob=-0.1)


def test_lesion_empty_and_deterministic():
    assert generate_lesion(LesionSpec(n_ellipsoids=0)).count() == 0
    a = generate_lesion(LesionSpec(seed=3))
    np.testing.assert_array_equal(a.data, generate_lesion(LesionSpec(seed=3)).data)
    assert a.count() > 0


def test_sphere_volume_close_to_analytic():
    spec = LesionSpec(dims=(24, 24, 24), spacing_mm=(1.0, 1.0, 1.0), n_ellipsoids=1,
                      radius_range_mm=(5.0, 5.0), center_jitter_mm=0.0)
    vol_mm3 = volume_ml(generate_lesion(spec)) * 1000
    assert abs(vol_mm3 - 4 / 3 * math.pi * 125) <= 0.1 * 4 / 3 * math.pi * 125


def test_perturb_identity_spec():
    m = generate_lesion(LesionSpec(seed=1))
    np.testing.assert_array_equal(perturb_rater(m, RaterSpec(), 99).data, m.data)


def test_pure_dilation_is_superset():
    m = generate_lesion(LesionSpec(seed=2))
    d = perturb_rater(m, RaterSpec(radius_mean_mm=2.5), 0)
    assert evaluate_pair(d, m).recall == 1.0
    assert d.count() > m.count()


def test_dilation_shell_count():
    # a 1 mm ball at unit spacing adds exactly the face-adjacent shell: 6 faces of 3x3
    cube = solid_cube()
    assert int(dilate_mm(cube, 1.0).sum()) == 27 + 6 * 9
    # sqrt(2) also admits the 12 edge rows of 3
    assert int(dilate_mm(cube, math.sqrt(2)).sum()) == 27 + 6 * 9 + 12 * 3


def test_erosion_of_cube():
    cube = solid_cube(n=9, lo=2, hi=7)
    assert int(erode_mm(cube, 1.0).sum()) == 27
    # voxels on the array edge erode as if the outside were background
    edge = BinaryMask(np.ones((3, 3, 3), np.uint8))
    assert int(erode_mm(edge, 1.0).sum()) == 1


def test_anisotropic_dilation_respects_mm():
    m = BinaryMask.from_indices((5, 9, 9), [(2, 4, 4)], (3.0, 1.0, 1.0))
    d = dilate_mm(m, 2.0)
    assert not d[1, 4, 4] and d[2, 4, 6] and not d[2, 4, 7]


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 4), st.floats(0, 4))
def test_dilation_monotone(r1, r2):
    m = generate_lesion(LesionSpec(dims=(8, 24, 24), seed=5, radius_range_mm=(3, 6)))
    lo, hi = sorted((r1, r2))
    small, big = dilate_mm(m, lo), dilate_mm(m, hi)
    assert not (small & ~big).any()


def test_empty_probability_one():
    m = generate_lesion(LesionSpec(seed=4))
    assert perturb_rater(m, RaterSpec(empty_prob=1.0), 1).count() == 0


def test_perturb_deterministic():
    m = generate_lesion(LesionSpec(seed=4))
    spec = DEFAULT_RATERS["A"]
    np.testing.assert_array_equal(perturb_rater(m, spec, 8).data, perturb_rater(m, spec, 8).data)


def test_derive_seed_stable_and_distinct():
    assert derive_seed(7, 0, "A") == derive_seed(7, 0, "A")
    seeds = {derive_seed(7, i, r) for i in range(20) for r in "ABC"}
    assert len(seeds) == 60


def test_generate_cohort_layout(tmp_path):
    raters = dict(DEFAULT_RATERS, C=RaterSpec(empty_prob=1.0))
    man = generate_cohort(5, LesionSpec(), raters, 11, tmp_path / "c", fmt="raw")
    assert len(man.cases) == 5 and all(len(c.mask_paths) == 4 for c in man.cases)
    assert (tmp_path / "c" / "manifest.json").exists()
    from segagree.io import load_mask

    for c in man.cases:
        assert load_mask(man.resolve(c.mask_paths["C"])).count() == 0


def test_generate_cohort_count_fixture(tmp_path):
    man = generate_cohort(32, LesionSpec(dims=(6, 16, 16), radius_range_mm=(3, 5), center_jitter_mm=2),
                          DEFAULT_RATERS, 1, tmp_path)
    assert len(man.cases) == 32
    assert sum(len(c.mask_paths) for c in man.cases) == 32 * 4


def test_generate_cohort_byte_identical(tmp_path):
    lesion = LesionSpec(dims=(8, 24, 24))
    generate_cohort(3, lesion, DEFAULT_RATERS, 5, tmp_path / "a")
    generate_cohort(3, lesion, DEFAULT_RATERS, 5, tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    files = ["manifest.json"] + [f"case_{i:03d}/{r}.nii" for i in range(3) for r in DEFAULT_RATERS]
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    assert not mismatch and not errors and len(match) == len(files)
    assert not cmp.left_only and not cmp.right_only


def test_generate_cohort_errors(tmp_path):
    with pytest.raises(ValueError):
        generate_cohort(0, LesionSpec(), DEFAULT_RATERS, 0, tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_cohort(1, LesionSpec(), DEFAULT_RATERS, 0, blocker / "sub")


@pytest.mark.slow
def test_tighter_model_wins_on_median_dice():
    """Monte-Carlo sanity bound: a tighter model beats the experts on median Dice in >= 95% of cohorts."""
    lesion = LesionSpec(dims=(16, 40, 40), radius_range_mm=(5.0, 10.0), center_jitter_mm=4.0)
    wins, reps = 0, 20
    for rep in range(reps):
        inter, model = [], []
        for i in range(32):
            truth = generate_lesion(LesionSpec(**{**asdict(lesion), "seed": derive_seed(rep, i)}))
            m = {r: perturb_rater(truth, s, derive_seed(rep, i, r)) for r, s in DEFAULT_RATERS.items()}
            inter.append(dice(m["B"], m["A"]))
            model.append(dice(m["B"], m["Model"]))
        wins += np.median(model) >= np.median(inter)
    assert wins >= 0.95 * reps

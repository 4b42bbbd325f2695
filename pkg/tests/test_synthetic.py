import numpy as np

import synthetic
from morphometry import BOW
from morphometry import FEATURE_NAMES
from morphometry import TUFT


def test_concentric_glomerulus_nests_tuft_in_capsule():
    labels = synthetic.concentric_glomerulus(20, 12)
    assert set(np.unique(labels)) == {0, BOW, TUFT}
    assert ((labels == TUFT).sum()) < ((labels >= BOW).sum())


def test_planted_cohort_shifts_only_the_planted_feature():
    features, clinical, spec = synthetic.planted_cohort(n_per_group=200, shift=0.5, seed=1)
    by_group = {"A": [], "B": []}
    for vector, record in zip(features, clinical):
        by_group[record.values["Group"]].append(vector)
    for name in FEATURE_NAMES:
        ratio = np.mean([v[name] for v in by_group["B"]]) / np.mean([v[name] for v in by_group["A"]])
        expected = 1.5 if name == "AreaTuft_mean" else 1.0
        assert abs(ratio - expected) < 0.05, name
    assert spec["Group"].labels == ("A", "B")


def test_gaussian_blobs_are_separated_along_first_axis():
    data = synthetic.gaussian_blobs(n_per_class=500, d=8, separation=4.0)
    gap = data.vectors[data.labels == 1].mean(axis=0) - data.vectors[data.labels == 0].mean(axis=0)
    assert abs(gap[0] - 4.0) < 0.3
    assert np.all(np.abs(gap[1:]) < 0.3)


def test_attention_fields_have_one_box_each():
    fields = synthetic.attention_fields(n_grids=4, size=16, seed=3)
    assert len(fields) == 4
    for grid, boxes in fields:
        x0, y0, x1, y1 = boxes[0]
        assert grid.shape == (16, 16)
        assert 0 <= x0 < x1 <= 16 and 0 <= y0 < y1 <= 16


def test_entity_images_are_reproducible():
    first, classes = synthetic.entity_images(n=4, seed=9)
    second, _ = synthetic.entity_images(n=4, seed=9)
    np.testing.assert_array_equal(first, second)
    assert first.shape == (4, 32, 32)
    assert set(classes.tolist()) <= {0, 1}

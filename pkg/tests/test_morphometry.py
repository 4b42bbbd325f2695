import math

import numpy as np
import pytest

import morphometry
import synthetic
from morphometry import EntityMask


def _component(pixels, label=morphometry.TUFT):
    labels = np.where(np.asarray(pixels, dtype=bool), label, 0)
    return morphometry.extract_component(EntityMask(labels), label)


def test_disk_shape():
    mask = EntityMask(synthetic.concentric_glomerulus(80, 64))
    record = morphometry.glomerulus_morphometry(mask)
    tuft = record.tuft
    assert 0.95 <= tuft.circularity <= 1.02
    assert tuft.eccentricity <= 0.10
    assert tuft.area == pytest.approx(math.pi * 64**2, rel=0.01)
    assert tuft.major_semi_axis == pytest.approx(64, rel=0.02)
    assert record.status == "ok"


def test_ellipse_eccentricity():
    labels = synthetic.nested_labels(synthetic.ellipse_mask(80, 40), synthetic.ellipse_mask(20, 10, shape=(169, 169)))
    bow = morphometry.glomerulus_morphometry(EntityMask(labels)).bow
    assert bow.eccentricity == pytest.approx(math.sqrt(1 - 0.25), abs=0.02)
    assert bow.major_semi_axis == pytest.approx(80, rel=0.02)
    assert bow.minor_semi_axis == pytest.approx(40, rel=0.02)


def test_translation_invariance():
    small = synthetic.ellipse_mask(20, 12, rotation=0.4, shape=(60, 60))
    big = np.zeros((100, 120), dtype=bool)
    big[17:77, 41:101] = small
    first = morphometry.shape_params(_component(small))
    second = morphometry.shape_params(_component(big))
    assert first == second


def test_quarter_turn_invariance():
    pixels = synthetic.ellipse_mask(25, 11, rotation=0.3, shape=(70, 70))
    first = morphometry.shape_params(_component(pixels))
    second = morphometry.shape_params(_component(np.rot90(pixels)))
    assert first.area == second.area
    assert first.perimeter == pytest.approx(second.perimeter)
    assert first.eccentricity == pytest.approx(second.eccentricity)
    assert first.major_semi_axis == pytest.approx(second.major_semi_axis)


def test_resolution_scales_lengths_and_areas():
    pixels = synthetic.disk_mask(20)
    unit = morphometry.shape_params(_component(pixels))
    scaled = morphometry.shape_params(_component(pixels), resolution=0.5)
    assert scaled.area == pytest.approx(unit.area * 0.25)
    assert scaled.perimeter == pytest.approx(unit.perimeter * 0.5)
    assert scaled.circularity == pytest.approx(unit.circularity)


def test_square_contour():
    pixels = np.zeros((5, 5), dtype=bool)
    pixels[1:4, 1:4] = True
    vertices = morphometry.trace_contour(_component(pixels))
    assert sorted(map(tuple, vertices.tolist())) == [(1, 1), (1, 4), (4, 1), (4, 4)]
    assert morphometry.polygon_area(vertices) == 9
    expected = morphometry.STRAIGHT_JOINT * 8 + morphometry.CORNER_JOINT * 4
    assert morphometry.contour_length(vertices) == pytest.approx(expected)


def test_axis_aligned_square_is_measured_short():
    pixels = np.zeros((12, 12), dtype=bool)
    pixels[2:10, 2:10] = True
    params = morphometry.shape_params(_component(pixels))
    expected = morphometry.STRAIGHT_JOINT * 28 + morphometry.CORNER_JOINT * 4
    assert params.perimeter == pytest.approx(expected)
    assert params.circularity == pytest.approx(4 * math.pi * 64 / expected**2)
    assert 0.93 < params.circularity < 0.95


@pytest.mark.parametrize("radius", [20, 32])
def test_double_resolution_disk_scales_area_and_perimeter(radius):
    single = morphometry.shape_params(_component(synthetic.disk_mask(radius)))
    double = morphometry.shape_params(_component(synthetic.disk_mask(2 * radius)))
    assert double.area / single.area == pytest.approx(4, rel=0.02)
    assert double.perimeter / single.perimeter == pytest.approx(2, rel=0.02)
    assert double.circularity == pytest.approx(single.circularity, abs=0.02)
    assert double.eccentricity == pytest.approx(single.eccentricity, abs=0.02)


def test_double_resolution_ellipse_keeps_shape():
    single = morphometry.shape_params(_component(synthetic.ellipse_mask(30, 15, rotation=0.5)))
    double = morphometry.shape_params(_component(synthetic.ellipse_mask(60, 30, rotation=0.5)))
    assert double.area / single.area == pytest.approx(4, rel=0.02)
    assert double.eccentricity == pytest.approx(single.eccentricity, abs=0.02)


def test_disk_circularity_settles_near_one():
    circularity = {r: morphometry.shape_params(_component(synthetic.disk_mask(r))).circularity for r in (20, 32, 40, 64, 128)}
    assert all(abs(value - 1) <= 0.02 for value in circularity.values())
    assert abs(circularity[128] - 1) < abs(circularity[20] - 1)


def test_diagonal_pixels_share_one_contour():
    component = _component([[1, 0], [0, 1]])
    vertices = morphometry.trace_contour(component)
    assert morphometry.polygon_area(vertices) == 2
    assert len(vertices) == 8


def test_contour_area_matches_pixel_count(rng):
    labels = synthetic.random_glomerulus(rng, 64)
    component = morphometry.extract_component(EntityMask(labels), morphometry.BOW)
    assert morphometry.polygon_area(morphometry.trace_contour(component)) == component.area


def test_largest_component_with_holes_filled():
    labels = np.zeros((30, 30), dtype=np.uint8)
    labels[2:12, 2:12] = morphometry.TUFT
    labels[5:8, 5:8] = 0
    labels[20:23, 20:23] = morphometry.TUFT
    component = morphometry.extract_component(EntityMask(labels), morphometry.TUFT)
    assert component.area == 100
    assert component.origin == (2, 2)


def test_bow_region_includes_tuft():
    labels = synthetic.concentric_glomerulus(20, 10)
    bow = morphometry.extract_component(EntityMask(labels), morphometry.BOW)
    assert bow.area == int((labels >= 1).sum())


def test_missing_structures():
    only_bow = np.zeros((10, 10), dtype=np.uint8)
    only_bow[2:8, 2:8] = morphometry.BOW
    record = morphometry.glomerulus_morphometry(EntityMask(only_bow, glomerulus_id="g1"))
    assert record.tuft is None
    assert record.ratio is None
    assert record.status == "missing:tuft"
    assert not record.usable

    only_tuft = np.where(only_bow > 0, morphometry.TUFT, 0)
    record = morphometry.glomerulus_morphometry(EntityMask(only_tuft))
    assert record.status == "missing:bow"


def test_line_is_degenerate():
    labels = np.zeros((12, 12), dtype=np.uint8)
    labels[3:9, 3:9] = morphometry.BOW
    labels[5, 2:10] = morphometry.TUFT
    record = morphometry.glomerulus_morphometry(EntityMask(labels))
    assert record.tuft.degenerate
    assert record.tuft.eccentricity == morphometry.DEGENERATE_ECC
    assert record.status == "degenerate"


def test_invalid_masks():
    with pytest.raises(morphometry.InvalidMask):
        EntityMask(np.array([[0, 3]]))
    with pytest.raises(morphometry.InvalidMask):
        EntityMask(np.zeros(4))
    with pytest.raises(morphometry.InvalidMask):
        EntityMask.from_flat(3, 3, [0] * 8)
    with pytest.raises(morphometry.NoPixelsForLabel):
        morphometry.extract_component(EntityMask(np.zeros((3, 3))), morphometry.TUFT)


def test_from_flat_is_row_major():
    mask = EntityMask.from_flat(3, 2, [0, 1, 2, 0, 0, 1])
    assert (mask.width, mask.height) == (3, 2)
    assert mask.labels[0, 2] == 2


def test_aggregate_case():
    masks = [
        EntityMask(synthetic.concentric_glomerulus(r, r // 2), glomerulus_id=f"g{r}")
        for r in (10, 14, 18)
    ]
    records = [morphometry.glomerulus_morphometry(mask) for mask in masks]
    vector = morphometry.aggregate_case(records, "case")
    assert vector.n_glomeruli == 3
    assert set(vector.features) == set(morphometry.FEATURE_NAMES)
    areas = [r.bow.area for r in records]
    assert vector["AreaBow_mean"] == pytest.approx(np.mean(areas))
    assert vector["AreaBow_med"] == pytest.approx(np.median(areas))


def test_aggregate_case_without_usable_glomeruli():
    labels = np.zeros((5, 5), dtype=np.uint8)
    labels[1:4, 1:4] = morphometry.BOW
    record = morphometry.glomerulus_morphometry(EntityMask(labels))
    with pytest.raises(morphometry.EmptyCase):
        morphometry.aggregate_case([record], "empty")


def test_measure_cohort_threads_agree(rng):
    cohort = {
        f"c{i}": [EntityMask(synthetic.random_glomerulus(rng, 48), glomerulus_id=f"g{j}") for j in range(3)]
        for i in range(2)
    }
    assert morphometry.measure_cohort(cohort, threads=1) == morphometry.measure_cohort(cohort, threads=4)

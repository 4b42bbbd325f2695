import json

import numpy as np
import pytest

import cohort_io
import synthetic
from cohort_io import ClinicalRecord
from helpers import IoFailure
from morphometry import FEATURE_NAMES
from morphometry import CaseFeatureVector


@pytest.fixture
def xj():
    return cohort_io.load_binning_spec("xj_light_1")


@pytest.fixture
def kpmp():
    return cohort_io.load_binning_spec("kpmp_g")


def test_shipped_specs_load(xj, kpmp):
    assert xj.name == "XJ-Light-1"
    assert kpmp.name == "KPMP-G"
    assert xj["Lesion"].labels == ("0-Mild", "1-Moderate", "2-Severe")
    assert kpmp["Diabetes History"].labels == ("Yes", "No")


def test_unknown_spec():
    with pytest.raises(cohort_io.ValidationError, match="kpmp_g"):
        cohort_io.load_binning_spec("no-such-spec")


@pytest.mark.parametrize(
    "value, expected",
    [(43, "≤43"), (43.0001, ">43"), (20, "≤43"), ("60", ">43")],
)
def test_right_closed_bins(xj, value, expected):
    assert cohort_io.bin_variable(value, "Age", xj) == expected


@pytest.mark.parametrize(
    "value, expected",
    [(29.9, "<30"), (30, "30-39"), (69.5, "60-69"), (70, "≥70"), (49.999, "40-49")],
)
def test_left_closed_bins(kpmp, value, expected):
    assert cohort_io.bin_variable(value, "Age", kpmp) == expected


def test_egfr_boundaries(kpmp):
    assert cohort_io.bin_variable(50, "eGFR", kpmp) == "50-100"
    assert cohort_io.bin_variable(100, "eGFR", kpmp) == ">100"


def test_categorical_aliases(xj, kpmp):
    assert cohort_io.bin_variable("M", "Gender", xj) == "Male"
    assert cohort_io.bin_variable("female", "Gender", xj) == "Female"
    assert cohort_io.bin_variable("IgAN", "IgA", xj) == "IgA"
    assert cohort_io.bin_variable("2", "Lesion", xj) == "2-Severe"
    assert cohort_io.bin_variable("N", "Diabetes History", kpmp) == "No"


def test_missing_and_unknown_values(xj):
    assert cohort_io.bin_variable(None, "Age", xj) is None
    assert cohort_io.bin_variable("  ", "Gender", xj) is None
    assert cohort_io.bin_variable(float("nan"), "Age", xj) is None
    with pytest.raises(cohort_io.OutOfDomain):
        cohort_io.bin_variable("Other", "Disease", xj)
    with pytest.raises(cohort_io.OutOfDomain):
        cohort_io.bin_variable("old", "Age", xj)


def test_variable_spec_validation():
    with pytest.raises(cohort_io.ValidationError):
        cohort_io.VariableSpec("x", "thresholded", ("a", "b", "c"), (2.0, 1.0))
    with pytest.raises(cohort_io.ValidationError):
        cohort_io.VariableSpec("x", "thresholded", ("a", "b"), (1.0, 2.0))
    with pytest.raises(cohort_io.ValidationError):
        cohort_io.VariableSpec("x", "categorical", ("a",))


def test_load_clinical(tmp_path, xj):
    path = tmp_path / "clinical.csv"
    path.write_text("case_id,Age,Gender,Notes\nb,50,F,x\na,,M,\n", encoding="utf-8")
    records = cohort_io.load_clinical(path, xj)
    assert [r.case_id for r in records] == ["a", "b"]
    assert records[0].values["Age"] is None
    assert records[1].values["Age"] == 50.0
    assert records[1].values["Gender"] == "F"


def test_load_clinical_errors(tmp_path, xj):
    path = tmp_path / "clinical.csv"
    path.write_text("case_id,Age\na,old\n", encoding="utf-8")
    with pytest.raises(cohort_io.UnparsableNumeric):
        cohort_io.load_clinical(path, xj)
    path.write_text("case_id,Age\na,1\na,2\n", encoding="utf-8")
    with pytest.raises(cohort_io.DuplicateId):
        cohort_io.load_clinical(path, xj)
    path.write_text("case_id,Age\na,1\n ,2\n", encoding="utf-8")
    with pytest.raises(cohort_io.ValidationError, match="row 3"):
        cohort_io.load_clinical(path, xj)
    path.write_text("id,Age\na,1\n", encoding="utf-8")
    with pytest.raises(cohort_io.MissingHeader):
        cohort_io.load_clinical(path, xj)
    with pytest.raises(IoFailure):
        cohort_io.load_clinical(tmp_path / "absent.csv", xj)


def test_load_mask_cohort(mask_root):
    cohort = cohort_io.load_mask_cohort(mask_root)
    assert sorted(cohort) == ["case000", "case001", "case002"]
    assert [m.glomerulus_id for m in cohort["case000"]] == ["g00", "g01", "g02"]


def test_malformed_masks_are_skipped_unless_strict(mask_root):
    (mask_root / "case000" / "g99.png").write_bytes(b"not an image")
    cohort = cohort_io.load_mask_cohort(mask_root)
    assert len(cohort["case000"]) == 3
    with pytest.raises(cohort_io.MaskFormatError):
        cohort_io.load_mask_cohort(mask_root, strict=True)


def test_bad_label_values_rejected(tmp_path):
    synthetic.write_mask(tmp_path / "c" / "g.png", np.full((4, 4), 5))
    with pytest.raises(cohort_io.MaskFormatError):
        cohort_io.read_mask(tmp_path / "c" / "g.png")


def test_pgm_masks(tmp_path):
    synthetic.write_mask_cohort(tmp_path, n_cases=1, n_glomeruli=2, suffix=".pgm")
    cohort = cohort_io.load_mask_cohort(tmp_path)
    assert len(cohort["case000"]) == 2


def test_empty_cohort(tmp_path):
    (tmp_path / "case").mkdir()
    with pytest.raises(cohort_io.EmptyCohort):
        cohort_io.load_mask_cohort(tmp_path)


def test_embeddings_csv(tmp_path):
    data = synthetic.gaussian_blobs(n_per_class=5, d=3)
    path = tmp_path / "emb.csv"
    cohort_io.write_embeddings_csv(path, data)
    loaded = cohort_io.load_embeddings(path)
    np.testing.assert_array_equal(loaded.vectors, data.vectors)
    np.testing.assert_array_equal(loaded.labels, data.labels)
    assert loaded.ids == data.ids


def test_embeddings_binary(tmp_path):
    vectors = np.arange(6, dtype="<f4").reshape(3, 2)
    vectors.tofile(tmp_path / "emb.f32")
    meta = {"n": 3, "d": 2, "ids": ["a", "b", "c"], "labels": ["x", "y", "x"]}
    (tmp_path / "emb.json").write_text(json.dumps(meta), encoding="utf-8")
    loaded = cohort_io.load_embeddings(tmp_path / "emb.f32")
    assert loaded.d == 2
    assert len(loaded) == 3
    assert loaded.labels.tolist() == ["x", "y", "x"]

    meta["d"] = 3
    (tmp_path / "emb.json").write_text(json.dumps(meta), encoding="utf-8")
    with pytest.raises(cohort_io.EmbeddingFormatError):
        cohort_io.load_embeddings(tmp_path / "emb.f32")


def test_join_cases_reports_one_sided_cases():
    features = [CaseFeatureVector(c, {}, 1) for c in ("a", "b")]
    clinical = [ClinicalRecord(c, {}) for c in ("b", "c")]
    joined, exclusions = cohort_io.join_cases(features, clinical)
    assert [vector.case_id for vector, _ in joined] == ["b"]
    assert [(e.case_id, e.reason) for e in exclusions] == [("a", "features only"), ("c", "clinical only")]


def test_case_features_written_and_read(tmp_path):
    features, _, _ = synthetic.planted_cohort(n_per_group=2)
    path = tmp_path / "cases.csv"
    cohort_io.write_case_features(path, features, "px")
    loaded = cohort_io.load_case_features(path)
    assert [v.case_id for v in loaded] == sorted(v.case_id for v in features)
    by_id = {v.case_id: v for v in features}
    for vector in loaded:
        for name in FEATURE_NAMES:
            assert vector[name] == by_id[vector.case_id][name]


def test_write_rows_formatting(tmp_path):
    path = tmp_path / "out.csv"
    rows = [{"a": 1.23456789, "b": None, "c": ("x", "y")}, {"a": float("nan"), "b": True, "c": []}]
    cohort_io.write_rows(path, ("a", "b", "c"), rows, decimals=4)
    assert path.read_bytes() == b"a,b,c\n1.2346,,x;y\n,True,\n"


def test_write_report_rejects_empty(tmp_path):
    with pytest.raises(cohort_io.EmptyResults):
        cohort_io.write_report([], "csv", tmp_path / "r.csv")


def test_write_json_replaces_nan(tmp_path):
    path = tmp_path / "out.json"
    cohort_io.write_json(path, {"x": float("nan"), "y": np.arange(2), "z": np.float64(0.5)})
    assert json.loads(path.read_text(encoding="utf-8")) == {"x": None, "y": [0, 1], "z": 0.5}


def test_load_scores(tmp_path):
    path = tmp_path / "scores.csv"
    path.write_text("task,run,score,label\nt,1,0.2,0\nt,1,0.9,1\nt,2,0.4,1\nu,,0.1,0\n", encoding="utf-8")
    scores = cohort_io.load_scores(path)
    assert sorted(scores) == ["t", "u"]
    assert sorted(scores["t"]) == ["1", "2"]
    np.testing.assert_array_equal(scores["t"]["1"][1], [0, 1])
    assert list(scores["u"]) == ["0"]


def test_load_attention(tmp_path):
    fields = synthetic.attention_fields(n_grids=3, size=8)
    np.save(tmp_path / "grids.npy", np.stack([grid for grid, _ in fields]))
    entries = [{"grid": i, "lesion": "crescent", "boxes": boxes} for i, (_, boxes) in enumerate(fields)]
    (tmp_path / "boxes.json").write_text(json.dumps(entries), encoding="utf-8")
    loaded = cohort_io.load_attention(tmp_path / "grids.npy", tmp_path / "boxes.json")
    assert [(index, lesion) for index, lesion, _, _ in loaded] == [(0, "crescent"), (1, "crescent"), (2, "crescent")]
    np.testing.assert_array_equal(loaded[1][2], fields[1][0])

    (tmp_path / "boxes.json").write_text(json.dumps([{"grid": 5, "boxes": []}]), encoding="utf-8")
    with pytest.raises(cohort_io.ValidationError):
        cohort_io.load_attention(tmp_path / "grids.npy", tmp_path / "boxes.json")

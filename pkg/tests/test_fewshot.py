import json

import numpy as np
import pytest

import fewshot
import synthetic
from cohort_io import EmbeddingDataset
from fewshot import FewShotRun
from fewshot import ProtocolCell


@pytest.fixture(scope="module")
def blobs():
    return synthetic.gaussian_blobs(n_per_class=200, d=32, separation=4.0, seed=0)


def test_sample_k_shot_partitions_the_data(blobs):
    train, test = fewshot.sample_k_shot(blobs, 5, seed=11)
    assert np.bincount(train.y).tolist() == [5, 5]
    assert np.intersect1d(train.index, test.index).size == 0
    assert train.index.size + test.index.size == len(blobs)
    again, _ = fewshot.sample_k_shot(blobs, 5, seed=11)
    np.testing.assert_array_equal(train.index, again.index)


def test_sample_k_shot_needs_enough_members():
    data = EmbeddingDataset(np.zeros((6, 2)), [0, 0, 0, 1, 1, 1], list("abcdef"))
    with pytest.raises(fewshot.InsufficientClassMembers):
        fewshot.sample_k_shot(data, 3, seed=0)
    with pytest.raises(fewshot.ValidationError):
        fewshot.sample_k_shot(data, 0, seed=0)


def test_binary_labels():
    y, positive = fewshot.binary_labels(np.array(["neg", "pos", "neg"]))
    assert positive == "pos"
    assert y.tolist() == [0, 1, 0]
    y, positive = fewshot.binary_labels(np.array([3, 7, 3]), positive="3")
    assert positive == 3
    assert y.tolist() == [1, 0, 1]
    with pytest.raises(fewshot.NotBinary):
        fewshot.binary_labels(np.array([0, 1, 2]))
    with pytest.raises(fewshot.ValidationError):
        fewshot.binary_labels(np.array([0, 1]), positive=5)


def test_ptl_scores_favour_the_nearer_centroid():
    train = fewshot.Subset(np.array([[0.0, 0.0], [4.0, 0.0]]), np.array([0, 1]), np.arange(2))
    test = fewshot.Subset(np.array([[1.0, 0.0], [3.0, 0.0]]), np.array([0, 1]), np.arange(2))
    np.testing.assert_allclose(fewshot.ptl_fit_predict(train, test), [-2.0, 2.0])


def test_ptl_is_invariant_to_rigid_motion_and_scaling(blobs, rng):
    train, test = fewshot.sample_k_shot(blobs, 5, seed=3)
    scores = fewshot.ptl_fit_predict(train, test)
    rotation, _ = np.linalg.qr(rng.normal(size=(32, 32)))
    shift = rng.normal(size=32)

    def moved(subset, scale):
        return fewshot.Subset(scale * (subset.x @ rotation) + shift, subset.y, subset.index)

    np.testing.assert_allclose(fewshot.ptl_fit_predict(moved(train, 1.0), moved(test, 1.0)), scores, atol=1e-9)
    np.testing.assert_allclose(fewshot.ptl_fit_predict(moved(train, 2.5), moved(test, 2.5)), 2.5 * scores, atol=1e-9)


def test_lr_fits_separable_shots(blobs):
    train, _ = fewshot.sample_k_shot(blobs, 10, seed=4)
    model, converged = fewshot.fit_lr(train)
    assert converged
    assert (model.predict(train.x) == train.y).all()


def test_lr_boundary_passes_through_origin_for_antipodal_shots():
    positive = np.array([[1.0, 2.0], [2.0, 0.5], [0.5, 1.5]])
    train = fewshot.Subset(np.vstack([positive, -positive]), np.array([1, 1, 1, 0, 0, 0]), np.arange(6))
    model, _ = fewshot.fit_lr(train)
    assert abs(model.intercept_[0]) < 1e-6


def test_rf_fits_training_shots_and_is_seeded(blobs):
    train, test = fewshot.sample_k_shot(blobs, 10, seed=5)
    assert ((fewshot.rf_fit_predict(train, train, seed=7) > 0.5) == (train.y == 1)).all()
    first = fewshot.rf_fit_predict(train, test, seed=7)
    np.testing.assert_array_equal(first, fewshot.rf_fit_predict(train, test, seed=7))


def test_single_class_training_set_is_rejected():
    train = fewshot.Subset(np.zeros((2, 2)), np.array([1, 1]), np.arange(2))
    for fit_predict in fewshot.FIT_PREDICT.values():
        with pytest.raises(fewshot.SingleClass):
            fit_predict(train, train)


def test_mlp_gradient_matches_finite_differences(rng):
    x = rng.normal(size=(7, 3))
    y = rng.integers(0, 2, size=7).astype(float)
    params = fewshot.mlp_init(3, seed=5, hidden=(4, 3))
    _, grads = fewshot.loss_and_grad(params, x, y)
    eps = 1e-6
    for layer, param in enumerate(params):
        for index in np.ndindex(param.shape):
            original = param[index]
            param[index] = original + eps
            up, _ = fewshot.loss_and_grad(params, x, y)
            param[index] = original - eps
            down, _ = fewshot.loss_and_grad(params, x, y)
            param[index] = original
            numeric = (up - down) / (2 * eps)
            assert grads[layer][index] == pytest.approx(numeric, rel=1e-4, abs=1e-8)


def test_mlp_init_shapes():
    params = fewshot.mlp_init(32, seed=0)
    assert [p.shape for p in params] == [(32, 256), (256,), (256, 128), (128,), (128, 1), (1,)]
    assert np.std(params[0]) == pytest.approx(np.sqrt(2 / 32), rel=0.05)


def test_failed_cells_are_kept():
    data = EmbeddingDataset(np.arange(20.0).reshape(10, 2), [0] * 7 + [1] * 3, [str(i) for i in range(10)])
    table = fewshot.run_protocol(data, ["PTL"], [1, 5], repeats=2)
    assert table[("PTL", 1)].status == "ok"
    assert table[("PTL", 5)].status.startswith("failed")
    assert table[("PTL", 5)].runs == ()
    assert fewshot.format_cell(table[("PTL", 5)]) == "failed"


def test_format_cell():
    runs = tuple(FewShotRun("LR", 1, i, i, auc) for i, auc in enumerate((0.9, 0.8)))
    assert fewshot.format_cell(ProtocolCell("LR", 1, runs)) == "0.8500 ± 0.0707"
    below = tuple(FewShotRun("LR", 1, i, i, auc) for i, auc in enumerate((0.4, 0.45)))
    assert fewshot.format_cell(ProtocolCell("LR", 1, below)) == "-"


def test_unknown_classifier(blobs):
    with pytest.raises(fewshot.ValidationError):
        fewshot.run_protocol(blobs, ["SVM"], [1])


def test_protocol_is_reproducible_and_thread_independent(blobs):
    first = fewshot.run_protocol(blobs, ["PTL", "LR"], [1, 5], repeats=3, master_seed=9)
    second = fewshot.run_protocol(blobs, ["PTL", "LR"], [1, 5], repeats=3, master_seed=9, threads=3)
    for key in first.cells:
        assert first[key].runs == second[key].runs
    other = fewshot.run_protocol(blobs, ["PTL"], [1], repeats=3, master_seed=10)
    assert other[("PTL", 1)].runs != first[("PTL", 1)].runs


def test_write_protocol(blobs, tmp_path):
    table = fewshot.run_protocol(blobs, ["PTL"], [1, 5], repeats=2)
    fewshot.write_protocol(table, tmp_path)
    lines = (tmp_path / "fewshot_table.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "method,k=1,k=5"
    assert lines[1].startswith("PTL,")
    runs = json.loads((tmp_path / "fewshot_runs.json").read_text(encoding="utf-8"))
    assert len(runs["runs"]) == 4
    assert runs["positive"] == "1"


@pytest.mark.slow
def test_full_protocol_on_separated_blobs(blobs):
    table = fewshot.run_protocol(blobs, fewshot.CLASSIFIERS, fewshot.DEFAULT_KS, repeats=10, master_seed=0)
    again = fewshot.run_protocol(blobs, fewshot.CLASSIFIERS, fewshot.DEFAULT_KS, repeats=10, master_seed=0)
    for name in fewshot.CLASSIFIERS:
        means = [table[(name, k)].mean for k in fewshot.DEFAULT_KS]
        assert table[(name, 25)].mean >= 0.95, name
        assert all(later >= earlier - 0.02 for earlier, later in zip(means, means[1:])), (name, means)
        assert table[(name, 100)].std < table[(name, 1)].std, name
        for k in fewshot.DEFAULT_KS:
            assert table[(name, k)].runs == again[(name, k)].runs

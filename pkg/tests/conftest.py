import numpy as np
import pytest

import synthetic
from cohort_io import write_case_features
from cohort_io import write_clinical


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def mask_root(tmp_path):
    root = tmp_path / "masks"
    synthetic.write_mask_cohort(root, n_cases=3, n_glomeruli=3, seed=7)
    return root


@pytest.fixture
def planted_files(tmp_path):
    """A 60-case cohort with a strong planted tuft-area shift, written as features and clinical CSVs, plus its spec file."""
    features, clinical, spec = synthetic.planted_cohort(shift=0.4, seed=3)
    features_path = tmp_path / "cases.csv"
    clinical_path = tmp_path / "clinical.csv"
    spec_path = tmp_path / "group.yaml"
    write_case_features(features_path, features)
    write_clinical(clinical_path, clinical, ["Group"])
    spec_path.write_text(
        "name: group\nvariables:\n  Group:\n    kind: categorical\n    labels: [A, B]\n",
        encoding="utf-8",
    )
    return features_path, clinical_path, spec_path

"""Seeded generators for masks, cohorts, embeddings, entity images and attention fields."""

import logging
import pathlib

import numpy as np
import PIL.Image
import scipy.stats
import skimage.draw

from cohort_io import BinningSpec
from cohort_io import ClinicalRecord
from cohort_io import EmbeddingDataset
from cohort_io import VariableSpec
from helpers import IoFailure
from morphometry import BOW
from morphometry import FEATURE_NAMES
from morphometry import TUFT
from morphometry import CaseFeatureVector

logger = logging.getLogger(__name__)

# Mean attention (and spread) inside and outside lesion boxes.
ATTENTION_IN = (0.5118, 0.0351)
ATTENTION_OUT = (0.3261, 0.0438)


def disk_mask(radius: float, shape=None, center=None) -> np.ndarray:
    """Boolean raster of a disk, by default centred in a square with a 4 px margin."""
    if shape is None:
        side = int(2 * radius) + 9
        shape = (side, side)
    if center is None:
        center = ((shape[0] - 1) / 2, (shape[1] - 1) / 2)
    mask = np.zeros(shape, dtype=bool)
    rows, cols = skimage.draw.disk(center, radius, shape=shape)
    mask[rows, cols] = True
    return mask


def ellipse_mask(a: float, b: float, rotation: float = 0.0, shape=None, center=None) -> np.ndarray:
    """Boolean raster of an ellipse with semi-axes a (along columns before rotation) and b."""
    if shape is None:
        side = int(2 * max(a, b)) + 9
        shape = (side, side)
    if center is None:
        center = ((shape[0] - 1) / 2, (shape[1] - 1) / 2)
    mask = np.zeros(shape, dtype=bool)
    rows, cols = skimage.draw.ellipse(center[0], center[1], b, a, shape=shape, rotation=rotation)
    mask[rows, cols] = True
    return mask


def nested_labels(bow: np.ndarray, tuft: np.ndarray) -> np.ndarray:
    """Label raster with the tuft painted over the capsule."""
    labels = np.zeros(bow.shape, dtype=np.uint8)
    labels[bow] = BOW
    labels[tuft] = TUFT
    return labels


def concentric_glomerulus(bow_radius: float, tuft_radius: float) -> np.ndarray:
    side = int(2 * bow_radius) + 9
    return nested_labels(disk_mask(bow_radius, (side, side)), disk_mask(tuft_radius, (side, side)))


def random_glomerulus(rng, size: int = 96) -> np.ndarray:
    """A random capsule ellipse with a smaller tuft ellipse inside it."""
    a = rng.uniform(0.3, 0.45) * size
    b = rng.uniform(0.6, 1.0) * a
    rotation = rng.uniform(0, np.pi)
    center = (size / 2 + rng.uniform(-2, 2), size / 2 + rng.uniform(-2, 2))
    bow = ellipse_mask(a, b, rotation, (size, size), center)
    scale = rng.uniform(0.5, 0.8)
    tuft = ellipse_mask(a * scale, b * scale, rotation + rng.uniform(-0.3, 0.3), (size, size), center)
    return nested_labels(bow, tuft & bow)


def write_mask(path, labels: np.ndarray):
    """Save a label raster as an 8-bit grayscale PNG or PGM."""
    path = pathlib.Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        PIL.Image.fromarray(np.asarray(labels, dtype=np.uint8)).save(path)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def write_mask_cohort(root, n_cases: int = 3, n_glomeruli: int = 3, seed: int = 0, size: int = 64, suffix: str = ".png"):
    """Write `<case>/<glomerulus><suffix>` random masks; returns the case ids."""
    rng = np.random.default_rng(seed)
    root = pathlib.Path(root)
    cases = [f"case{i:03d}" for i in range(n_cases)]
    for case in cases:
        for j in range(n_glomeruli):
            write_mask(root / case / f"g{j:02d}{suffix}", random_glomerulus(rng, size))
    return cases


def group_spec(labels=("A", "B"), variable: str = "Group") -> BinningSpec:
    return BinningSpec(variable, {variable: VariableSpec(variable, "categorical", tuple(labels))})


def planted_cohort(
    n_per_group: int = 30,
    shift: float = 0.2,
    cv: float = 0.1,
    seed: int = 0,
    feature: str = "AreaTuft_mean",
    groups=("A", "B"),
    variable: str = "Group",
):
    """Case features and clinical records with the last group's `feature` scaled by 1 + shift.

    Every feature is drawn independently as base * (1 + cv * N(0, 1)); with
    shift 0 this is a null cohort. Returns (features, clinical, spec).
    """
    rng = np.random.default_rng(seed)
    bases = {name: 100.0 * (i + 1) for i, name in enumerate(FEATURE_NAMES)}
    features, clinical = [], []
    for g, group in enumerate(groups):
        for i in range(n_per_group):
            case_id = f"{group}{i:03d}"
            values = {name: base * (1 + cv * rng.standard_normal()) for name, base in bases.items()}
            if g == len(groups) - 1:
                values[feature] *= 1 + shift
            features.append(CaseFeatureVector(case_id, values, 1))
            clinical.append(ClinicalRecord(case_id, {variable: group}))
    return features, clinical, group_spec(groups, variable)


def gaussian_blobs(n_per_class: int = 200, d: int = 32, separation: float = 4.0, seed: int = 0) -> EmbeddingDataset:
    """Two unit-variance Gaussian classes whose means differ by `separation` along the first axis."""
    rng = np.random.default_rng(seed)
    vectors = rng.standard_normal((2 * n_per_class, d))
    labels = np.repeat([0, 1], n_per_class)
    vectors[labels == 1, 0] += separation
    ids = [f"e{i:05d}" for i in range(2 * n_per_class)]
    return EmbeddingDataset(vectors, labels, ids)


# Field-wide intensity offset of latent class 1 in `entity_images`.
ENTITY_STAIN = 0.8


def entity_images(n: int = 64, size: int = 32, seed: int = 0) -> tuple:
    """Grey glomerulus-like images: a capsule ellipse with an inner tuft.

    Latent class 0 has a small smooth tuft, class 1 a large textured one on
    a more intensely stained field (`ENTITY_STAIN` added everywhere), so the
    classes stay apart in any crop of the entity.
    Returns (images of shape (n, size, size), latent classes).
    """
    rng = np.random.default_rng(seed)
    images = np.zeros((n, size, size))
    classes = rng.integers(0, 2, size=n)
    for i, cls in enumerate(classes):
        a = rng.uniform(0.35, 0.45) * size
        b = rng.uniform(0.7, 1.0) * a
        rotation = rng.uniform(0, np.pi)
        center = (size / 2 + rng.uniform(-1.5, 1.5), size / 2 + rng.uniform(-1.5, 1.5))
        image = 0.5 * ellipse_mask(a, b, rotation, (size, size), center)
        ratio = rng.uniform(0.35, 0.5) if cls == 0 else rng.uniform(0.65, 0.8)
        tuft = ellipse_mask(a * ratio, b * ratio, rotation, (size, size), center)
        texture = 0.15 * rng.standard_normal((size, size)) if cls == 1 else 0.0
        image = np.where(tuft, 1.0 + texture, image)
        images[i] = image + ENTITY_STAIN * cls + 0.05 * rng.standard_normal((size, size))
    return images, classes


def attention_fields(n_grids: int = 20, size: int = 32, seed: int = 0, inside=ATTENTION_IN, outside=ATTENTION_OUT, noise: float = 0.01):
    """Attention grids with one lesion box each; returns [(grid, [[x0, y0, x1, y1]])].

    The per-grid attention levels inside and outside the box are the normal
    quantiles of the given (mean, sd) pairs in random order, so the grid
    means reproduce both distributions; `noise` is the pixel-level spread.
    """
    rng = np.random.default_rng(seed)
    probabilities = (np.arange(n_grids) + 0.5) / n_grids
    levels_in = rng.permutation(scipy.stats.norm.ppf(probabilities, *inside))
    levels_out = rng.permutation(scipy.stats.norm.ppf(probabilities, *outside))
    fields = []
    for level_in, level_out in zip(levels_in, levels_out):
        grid = level_out + noise * rng.standard_normal((size, size))
        w, h = (int(v) for v in rng.integers(size // 4, size // 2, size=2))
        x0 = int(rng.integers(0, size - w))
        y0 = int(rng.integers(0, size - h))
        grid[y0 : y0 + h, x0 : x0 + w] = level_in + noise * rng.standard_normal((h, w))
        fields.append((grid, [[x0, y0, x0 + w, y0 + h]]))
    return fields

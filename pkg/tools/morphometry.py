"""Glomerular morphometry: shape parameters of Bowman's capsule and tuft masks.

Each glomerulus is a label raster (0 background, 1 Bowman's capsule, 2 tuft).
The tuft is painted over the capsule, so the capsule structure is every pixel
labelled 1 or 2 and the tuft structure is every pixel labelled 2. For each
structure the largest 8-connected component is kept and its holes are filled,
then area, perimeter, moment-equivalent ellipse, circularity and eccentricity
are measured. Case-level features are the mean and median of the seven
per-glomerulus parameters.
"""

import dataclasses
import logging
import math

import numpy as np
import scipy.ndimage
import skimage.measure

from helpers import ValidationError
from helpers import parallel_map

logger = logging.getLogger(__name__)

BACKGROUND, BOW, TUFT = 0, 1, 2
STRUCTURES = {BOW: "bow", TUFT: "tuft"}

# Chamfer weights for axis and diagonal steps of an 8-connected chain. On the
# crack contour a diagonal step is a pair of corner joints, so each corner
# joint carries half of the diagonal weight.
# Straight runs are weighted 0.948 per unit, so axis-aligned edges come out
# about 5% short: an 8x8 square measures Cir 0.94 against the true pi/4.
AXIS_STEP = 0.948
DIAGONAL_STEP = 1.343
STRAIGHT_JOINT = AXIS_STEP
CORNER_JOINT = DIAGONAL_STEP / 2

# Reported eccentricity of a shape whose minor axis vanishes.
DEGENERATE_ECC = 1.0 - 1e-12

PARAMETERS = ("AreaBow", "AreaTuft", "Ratio", "CirBow", "CirTuft", "EccBow", "EccTuft")
FEATURE_NAMES = tuple(f"{name}_{stat}" for name in PARAMETERS for stat in ("mean", "med"))


class InvalidMask(ValidationError):
    """The raster is not a valid glomerulus label mask."""


class NoPixelsForLabel(ValidationError):
    """The requested structure does not occur in the mask."""

    def __init__(self, label: int):
        super().__init__(f"no pixels labelled {label} ({STRUCTURES.get(label, '?')})")
        self.label = label


class EmptyCase(ValidationError):
    """A case has no glomerulus usable for aggregation."""


@dataclasses.dataclass(frozen=True)
class EntityMask:
    """Label raster of one glomerulus, indexed [row, column]."""

    labels: np.ndarray
    resolution: float = 1.0
    glomerulus_id: str = ""

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.size == 0:
            raise InvalidMask(f"expected a non-empty 2-D raster, got shape {labels.shape}")
        bad = np.setdiff1d(np.unique(labels), (BACKGROUND, BOW, TUFT))
        if bad.size:
            raise InvalidMask(f"label values {bad.tolist()} not in {{0, 1, 2}}")
        if not self.resolution > 0:
            raise InvalidMask(f"resolution must be positive, got {self.resolution}")
        object.__setattr__(self, "labels", labels.astype(np.uint8))

    @classmethod
    def from_flat(cls, width: int, height: int, values, resolution: float = 1.0, glomerulus_id: str = ""):
        """Build a mask from a row-major list of labels."""
        values = np.asarray(values)
        if values.size != width * height:
            raise InvalidMask(f"{values.size} labels for a {width}x{height} raster")
        return cls(values.reshape(height, width), resolution, glomerulus_id)

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]


@dataclasses.dataclass(frozen=True)
class PixelComponent:
    """One filled 8-connected component, cropped to its bounding box."""

    pixels: np.ndarray
    origin: tuple
    label: int

    @property
    def area(self) -> int:
        return int(self.pixels.sum())


@dataclasses.dataclass(frozen=True)
class ShapeParams:
    area: float
    perimeter: float
    major_semi_axis: float
    minor_semi_axis: float
    circularity: float
    eccentricity: float
    degenerate: bool = False


@dataclasses.dataclass(frozen=True)
class MorphometryRecord:
    glomerulus_id: str
    bow: ShapeParams | None
    tuft: ShapeParams | None
    ratio: float | None
    missing: tuple = ()

    @property
    def usable(self) -> bool:
        """True if the record can enter case aggregation."""
        return (
            self.bow is not None
            and self.tuft is not None
            and not self.bow.degenerate
            and not self.tuft.degenerate
        )

    @property
    def status(self) -> str:
        if self.missing:
            return "missing:" + "+".join(self.missing)
        if not self.usable:
            return "degenerate"
        return "ok"

    def parameter(self, name: str) -> float:
        return {
            "AreaBow": lambda: self.bow.area,
            "AreaTuft": lambda: self.tuft.area,
            "Ratio": lambda: self.ratio,
            "CirBow": lambda: self.bow.circularity,
            "CirTuft": lambda: self.tuft.circularity,
            "EccBow": lambda: self.bow.eccentricity,
            "EccTuft": lambda: self.tuft.eccentricity,
        }[name]()


@dataclasses.dataclass(frozen=True)
class CaseFeatureVector:
    case_id: str
    features: dict
    n_glomeruli: int

    def __getitem__(self, name: str) -> float:
        return self.features[name]


def extract_component(mask: EntityMask, label: int) -> PixelComponent:
    """Return the largest 8-connected component of a structure, holes filled."""
    if label not in STRUCTURES:
        raise ValueError(f"label must be {BOW} or {TUFT}, not {label}")
    if not (mask.labels == label).any():
        raise NoPixelsForLabel(label)
    region = mask.labels >= BOW if label == BOW else mask.labels == TUFT
    labelled = skimage.measure.label(region, connectivity=2)
    # Ties on area go to the component met first in raster order.
    largest = max(skimage.measure.regionprops(labelled), key=lambda p: (p.area, -p.label))
    filled = scipy.ndimage.binary_fill_holes(largest.image)
    return PixelComponent(pixels=filled, origin=tuple(largest.bbox[:2]), label=label)


def _crack_edges(pixels: np.ndarray) -> dict:
    """Map each lattice vertex to the directions of boundary edges leaving it.

    Coordinates are (x, y) = (column, row) on the pixel-corner lattice and the
    edges run with the region on their left when y is drawn upwards, so a
    closed walk has positive shoelace area.
    """
    padded = np.pad(pixels, 1)
    inner = padded[1:-1, 1:-1]
    outgoing = {}
    sides = (
        (padded[:-2, 1:-1], (0, 0), (1, 0)),  # neighbour above: edge along the top
        (padded[1:-1, 2:], (1, 0), (0, 1)),  # right
        (padded[2:, 1:-1], (1, 1), (-1, 0)),  # below
        (padded[1:-1, :-2], (0, 1), (0, -1)),  # left
    )
    for neighbour, (ox, oy), direction in sides:
        rows, cols = np.nonzero(inner & ~neighbour)
        for row, col in zip(rows.tolist(), cols.tolist()):
            outgoing.setdefault((col + ox, row + oy), []).append(direction)
    return outgoing


def trace_contour(component: PixelComponent) -> np.ndarray:
    """Trace the outer crack contour of a component as a corner-vertex polygon.

    Returns an (V, 2) integer array of (x, y) pixel-corner coordinates in the
    mask frame, counterclockwise (positive shoelace area). Where two pixels
    touch only at a corner the walk turns right, which keeps diagonal
    neighbours on one contour.
    """
    if not component.pixels.any():
        raise ValueError("cannot trace an empty component")
    outgoing = _crack_edges(component.pixels)
    total = sum(len(directions) for directions in outgoing.values())
    rows, cols = np.nonzero(component.pixels)
    start = (int(cols[0]), int(rows[0]))
    heading = (1, 0)
    outgoing[start].remove(heading)
    vertices = [start]
    x, y = start
    walked = 0
    while True:
        x, y = x + heading[0], y + heading[1]
        walked += 1
        if (x, y) == start:
            break
        options = outgoing[(x, y)]
        right = (heading[1], -heading[0])
        new = right if right in options else options[0]
        options.remove(new)
        if new != heading:
            vertices.append((x, y))
        heading = new
    if walked != total:
        logger.warning("Contour covers %d of %d boundary edges", walked, total)
    oy, ox = component.origin
    return np.asarray(vertices, dtype=np.int64) + np.array([ox, oy])


def polygon_area(vertices: np.ndarray) -> float:
    """Signed shoelace area of a closed polygon."""
    x = vertices[:, 0].astype(float)
    y = vertices[:, 1].astype(float)
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def contour_length(vertices: np.ndarray) -> float:
    """Corner-cut length of a crack contour given by its corner vertices."""
    sides = np.abs(np.roll(vertices, -1, axis=0) - vertices).sum(axis=1)
    edges = int(sides.sum())
    corners = len(vertices)
    return STRAIGHT_JOINT * (edges - corners) + CORNER_JOINT * corners


def shape_params(component: PixelComponent, resolution: float = 1.0) -> ShapeParams:
    """Area, perimeter, ellipse semi-axes, circularity and eccentricity."""
    pixels = component.pixels.astype(float)
    area = float(component.area) * resolution**2
    perimeter = contour_length(trace_contour(component)) * resolution
    mu = skimage.measure.moments_central(pixels, order=2)
    covariance = np.array([[mu[2, 0], mu[1, 1]], [mu[1, 1], mu[0, 2]]]) / mu[0, 0]
    minor_var, major_var = np.clip(np.linalg.eigvalsh(covariance), 0.0, None)
    major = 2.0 * math.sqrt(major_var) * resolution
    minor = 2.0 * math.sqrt(minor_var) * resolution
    degenerate = minor_var <= 1e-12 * max(major_var, 1.0)
    if degenerate:
        eccentricity = DEGENERATE_ECC
    else:
        eccentricity = min(math.sqrt(max(1.0 - minor_var / major_var, 0.0)), DEGENERATE_ECC)
    return ShapeParams(
        area=area,
        perimeter=perimeter,
        major_semi_axis=major,
        minor_semi_axis=minor,
        circularity=4.0 * math.pi * area / perimeter**2,
        eccentricity=eccentricity,
        degenerate=bool(degenerate),
    )


def glomerulus_morphometry(mask: EntityMask) -> MorphometryRecord:
    """Measure both structures of one glomerulus; absent structures are flagged."""
    params = {}
    missing = []
    for label, name in STRUCTURES.items():
        try:
            params[name] = shape_params(extract_component(mask, label), mask.resolution)
        except NoPixelsForLabel:
            logger.info("%s has no %s pixels", mask.glomerulus_id or "mask", name)
            params[name] = None
            missing.append(name)
    bow, tuft = params["bow"], params["tuft"]
    ratio = tuft.area / bow.area if bow is not None and tuft is not None else None
    for name, shape in params.items():
        if shape is not None and shape.degenerate:
            logger.info("%s: degenerate %s (line-like), excluded from aggregation", mask.glomerulus_id, name)
    return MorphometryRecord(mask.glomerulus_id, bow, tuft, ratio, tuple(missing))


def aggregate_case(records, case_id: str = "") -> CaseFeatureVector:
    """Mean and median of the seven parameters over the usable glomeruli."""
    ordered = sorted(records, key=lambda r: r.glomerulus_id)
    usable = [record for record in ordered if record.usable]
    dropped = len(ordered) - len(usable)
    if dropped:
        logger.info("Case %s: %d of %d glomeruli excluded from aggregation", case_id, dropped, len(ordered))
    if not usable:
        raise EmptyCase(f"case {case_id!r} has no usable glomeruli")
    features = {}
    for name in PARAMETERS:
        values = np.array([record.parameter(name) for record in usable], dtype=float)
        features[f"{name}_mean"] = float(np.mean(values))
        features[f"{name}_med"] = float(np.median(values))
    return CaseFeatureVector(case_id=case_id, features=features, n_glomeruli=len(usable))


def measure_cohort(cohort: dict, threads: int = 1) -> dict:
    """Measure every mask of a cohort; returns case id -> records sorted by id."""
    jobs = [(case_id, mask) for case_id in sorted(cohort) for mask in cohort[case_id]]
    records = parallel_map(lambda job: glomerulus_morphometry(job[1]), jobs, threads)
    measured = {case_id: [] for case_id in sorted(cohort)}
    for (case_id, _), record in zip(jobs, records):
        measured[case_id].append(record)
    for case_id in measured:
        measured[case_id].sort(key=lambda r: r.glomerulus_id)
    return measured


RECORD_COLUMNS = (
    "case_id",
    "glomerulus_id",
    "S_bow",
    "P_bow",
    "a_bow",
    "b_bow",
    "Cir_bow",
    "Ecc_bow",
    "S_tuft",
    "P_tuft",
    "a_tuft",
    "b_tuft",
    "Cir_tuft",
    "Ecc_tuft",
    "R",
    "status",
    "unit",
)


def record_row(case_id: str, record: MorphometryRecord, unit: str) -> dict:
    """Flatten a record into one per-glomerulus output row."""
    row = {"case_id": case_id, "glomerulus_id": record.glomerulus_id}
    for name, shape in (("bow", record.bow), ("tuft", record.tuft)):
        values = (
            (shape.area, shape.perimeter, shape.major_semi_axis, shape.minor_semi_axis, shape.circularity, shape.eccentricity)
            if shape is not None
            else (None,) * 6
        )
        for prefix, value in zip(("S", "P", "a", "b", "Cir", "Ecc"), values):
            row[f"{prefix}_{name}"] = value
    row["R"] = record.ratio
    row["status"] = record.status
    row["unit"] = unit
    return row

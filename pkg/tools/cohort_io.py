"""Loading and writing cohort data: masks, clinical tables, binning specs, embeddings, reports."""

import csv
import dataclasses
import json
import logging
import math
import pathlib

import numpy as np
import PIL.Image
import yaml

from helpers import IoFailure
from helpers import ValidationError
from helpers import iter_cases
from morphometry import FEATURE_NAMES
from morphometry import RECORD_COLUMNS
from morphometry import CaseFeatureVector
from morphometry import EntityMask
from morphometry import InvalidMask
from morphometry import record_row

logger = logging.getLogger(__name__)

MASK_SUFFIXES = (".pgm", ".png")
SPECS_DIR = pathlib.Path(__file__).parent / "specs"
CSV_DECIMALS = 4


class MaskFormatError(ValidationError):
    """A mask file is unreadable or holds invalid labels."""


class EmptyCohort(ValidationError):
    """No valid mask was found under the cohort root."""


class DuplicateId(ValidationError):
    """An id occurs twice where it must be unique."""


class MissingHeader(ValidationError):
    """A required CSV column is absent."""


class UnparsableNumeric(ValidationError):
    """A cell that must be numeric could not be parsed."""

    def __init__(self, path, row: int, column: str, value: str):
        super().__init__(f"{path}: row {row}, column {column!r}: cannot parse {value!r} as a number")
        self.row = row
        self.column = column


class OutOfDomain(ValidationError):
    """A categorical value is not one of the variable's categories."""


class EmptyResults(ValidationError):
    """There is nothing to write."""


class EmbeddingFormatError(ValidationError):
    """An embedding matrix and its metadata disagree."""


@dataclasses.dataclass(frozen=True)
class VariableSpec:
    name: str
    kind: str
    labels: tuple
    thresholds: tuple = ()
    closed: str = "left"
    aliases: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("categorical", "thresholded"):
            raise ValidationError(f"{self.name}: unknown kind {self.kind!r}")
        if len(self.labels) < 2:
            raise ValidationError(f"{self.name}: at least two groups are required")
        if self.kind == "thresholded":
            if len(self.labels) != len(self.thresholds) + 1:
                raise ValidationError(f"{self.name}: {len(self.thresholds)} thresholds need {len(self.thresholds) + 1} labels")
            if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
                raise ValidationError(f"{self.name}: thresholds must be strictly increasing")
            if self.closed not in ("left", "right"):
                raise ValidationError(f"{self.name}: closed must be 'left' or 'right'")


@dataclasses.dataclass(frozen=True)
class BinningSpec:
    name: str
    variables: dict

    @classmethod
    def from_mapping(cls, data: dict, default_name: str = ""):
        if not isinstance(data, dict) or not isinstance(data.get("variables"), dict):
            raise ValidationError("a binning spec needs a 'variables' mapping")
        variables = {}
        for name, entry in data["variables"].items():
            variables[name] = VariableSpec(
                name=name,
                kind=entry.get("kind", "categorical"),
                labels=tuple(str(label) for label in entry.get("labels", ())),
                thresholds=tuple(float(t) for t in entry.get("thresholds", ())),
                closed=entry.get("closed", "left"),
                aliases={str(k): str(v) for k, v in (entry.get("aliases") or {}).items()},
            )
        return cls(name=data.get("name", default_name), variables=variables)

    def __getitem__(self, variable: str) -> VariableSpec:
        try:
            return self.variables[variable]
        except KeyError:
            raise ValidationError(f"variable {variable!r} is not in binning spec {self.name!r}") from None


@dataclasses.dataclass(frozen=True)
class ClinicalRecord:
    case_id: str
    values: dict


@dataclasses.dataclass(frozen=True)
class EmbeddingDataset:
    vectors: np.ndarray
    labels: np.ndarray
    ids: tuple

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=float)
        if vectors.ndim != 2 or vectors.shape[1] < 1:
            raise EmbeddingFormatError(f"expected an n x d matrix, got shape {vectors.shape}")
        if not (len(self.labels) == len(self.ids) == vectors.shape[0]):
            raise EmbeddingFormatError("vectors, labels and ids have different lengths")
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "labels", np.asarray(self.labels))
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.vectors.shape[0]


@dataclasses.dataclass(frozen=True)
class Exclusion:
    case_id: str
    scope: str
    reason: str


def _read_yaml(path: pathlib.Path):
    try:
        with path.open(encoding="utf-8") as source:
            return yaml.safe_load(source)
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ValidationError(f"{path} is not valid YAML/JSON: {e}") from e


def load_binning_spec(name_or_path) -> BinningSpec:
    """Load a binning spec from a YAML/JSON file, or one of the shipped specs by name."""
    path = pathlib.Path(name_or_path)
    if not path.exists():
        shipped = SPECS_DIR / f"{name_or_path}.yaml"
        if not shipped.exists():
            known = ", ".join(sorted(p.stem for p in SPECS_DIR.glob("*.yaml")))
            raise ValidationError(f"no binning spec {name_or_path!r} (shipped: {known})")
        path = shipped
    return BinningSpec.from_mapping(_read_yaml(path), default_name=path.stem)


def bin_variable(value, variable: str, spec: BinningSpec):
    """Assign a clinical value to its group label; missing values give None."""
    var = spec[variable]
    if value is None or (isinstance(value, str) and not value.strip()):
        return None
    if var.kind == "thresholded":
        try:
            number = float(value)
        except (TypeError, ValueError):
            raise OutOfDomain(f"{variable}: {value!r} is not numeric") from None
        if math.isnan(number):
            return None
        # closed="right" bins are (low, high]; closed="left" bins are [low, high).
        side = "left" if var.closed == "right" else "right"
        return var.labels[int(np.searchsorted(var.thresholds, number, side=side))]
    text = str(value).strip()
    if text in var.labels:
        return text
    if text in var.aliases:
        return var.aliases[text]
    folded = {alias.casefold(): label for alias, label in var.aliases.items()}
    folded.update({label.casefold(): label for label in var.labels})
    if text.casefold() in folded:
        return folded[text.casefold()]
    raise OutOfDomain(f"{variable}: {text!r} is not one of {', '.join(var.labels)}")


def _parse_number(text: str, path, row: int, column: str):
    if not text.strip():
        return None
    try:
        return float(text)
    except ValueError:
        raise UnparsableNumeric(path, row, column, text) from None


def load_clinical(path, spec: BinningSpec) -> list:
    """Read a clinical CSV into records sorted by case id.

    Thresholded variables are parsed as numbers, everything else is kept as
    text. Empty cells become None and are excluded pairwise downstream.
    """
    path = pathlib.Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as source:
            reader = csv.DictReader(source)
            header = reader.fieldnames or []
            if "case_id" not in header:
                raise MissingHeader(f"{path}: no case_id column")
            for column in header:
                if column != "case_id" and column not in spec.variables:
                    logger.warning("%s: column %r is not in binning spec %s", path, column, spec.name)
            for variable in spec.variables:
                if variable not in header:
                    logger.warning("%s: binning spec variable %r has no column", path, variable)
            records = {}
            for row_number, row in enumerate(reader, start=2):
                case_id = (row["case_id"] or "").strip()
                if not case_id:
                    raise ValidationError(f"{path}: row {row_number} has an empty case_id")
                if case_id in records:
                    raise DuplicateId(f"{path}: case {case_id!r} appears twice")
                values = {}
                for column in header:
                    if column == "case_id":
                        continue
                    text = row.get(column) or ""
                    var = spec.variables.get(column)
                    if var is not None and var.kind == "thresholded":
                        values[column] = _parse_number(text, path, row_number, column)
                    else:
                        values[column] = text.strip() or None
                records[case_id] = ClinicalRecord(case_id, values)
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    logger.info("Loaded %d clinical records from %s", len(records), path)
    return [records[case_id] for case_id in sorted(records)]


def read_mask(path: pathlib.Path, resolution: float = 1.0) -> EntityMask:
    """Read one 8-bit single-channel PGM/PNG mask."""
    try:
        with PIL.Image.open(path) as image:
            if image.mode != "L":
                raise MaskFormatError(f"{path}: expected 8-bit grayscale, got mode {image.mode}")
            labels = np.asarray(image)
    except (PIL.UnidentifiedImageError, OSError) as e:
        raise MaskFormatError(f"{path}: {e}") from e
    try:
        return EntityMask(labels, resolution, path.stem)
    except InvalidMask as e:
        raise MaskFormatError(f"{path}: {e}") from e


def load_mask_cohort(root, resolution: float = 1.0, strict: bool = False) -> dict:
    """Load `<case>/<glomerulus>.<pgm|png>` masks into case id -> masks sorted by id.

    Malformed files are logged and skipped, unless strict is set.
    """
    root = pathlib.Path(root)
    if not root.is_dir():
        raise IoFailure(f"mask root {root} is not a directory")
    cohort = {}
    for case in iter_cases(root):
        masks = {}
        for path in sorted(case.iterdir()):
            if path.suffix.lower() not in MASK_SUFFIXES:
                logger.debug("Ignoring %s - not a mask file", path)
                continue
            if path.stem in masks:
                raise DuplicateId(f"glomerulus {path.stem!r} appears twice in case {case.name}")
            try:
                masks[path.stem] = read_mask(path, resolution)
            except MaskFormatError as e:
                if strict:
                    raise
                logger.error("Skipping %s", e)
        if not masks:
            logger.warning("Case %s has no valid masks", case.name)
            continue
        cohort[case.name] = [masks[stem] for stem in sorted(masks)]
        logger.info("Loaded %d masks for case %s", len(masks), case.name)
    if not cohort:
        raise EmptyCohort(f"no valid masks under {root}")
    return cohort


def load_embeddings(path) -> EmbeddingDataset:
    """Read embeddings from `id,label,f0..` CSV or a little-endian float32 matrix with a JSON sidecar."""
    path = pathlib.Path(path)
    if path.suffix.lower() == ".csv":
        return _load_embeddings_csv(path)
    sidecar = path.with_suffix(".json")
    try:
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        raw = np.fromfile(path, dtype="<f4")
    except OSError as e:
        raise IoFailure(f"cannot read embeddings {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise EmbeddingFormatError(f"{sidecar}: {e}") from e
    n, d = int(meta["n"]), int(meta["d"])
    if raw.size != n * d:
        raise EmbeddingFormatError(f"{path}: {raw.size} floats for n={n}, d={d}")
    return EmbeddingDataset(raw.reshape(n, d).astype(float), _labels(meta["labels"]), meta["ids"])


def _labels(raw) -> np.ndarray:
    labels = [str(label).strip() for label in raw]
    try:
        return np.array([int(label) for label in labels])
    except ValueError:
        return np.array(labels)


def _load_embeddings_csv(path: pathlib.Path) -> EmbeddingDataset:
    try:
        with path.open(newline="", encoding="utf-8") as source:
            reader = csv.reader(source)
            header = next(reader, None)
            if not header or header[:2] != ["id", "label"] or len(header) < 3:
                raise MissingHeader(f"{path}: expected header id,label,f0,...")
            ids, labels, rows = [], [], []
            for row_number, row in enumerate(reader, start=2):
                if not row:
                    continue
                ids.append(row[0])
                labels.append(row[1])
                values = []
                for column, text in zip(header[2:], row[2:]):
                    value = _parse_number(text, path, row_number, column)
                    if value is None:
                        raise UnparsableNumeric(path, row_number, column, text)
                    values.append(value)
                if len(values) != len(header) - 2:
                    raise EmbeddingFormatError(f"{path}: row {row_number} has {len(values)} features")
                rows.append(values)
    except OSError as e:
        raise IoFailure(f"cannot read embeddings {path}: {e}") from e
    if len(set(ids)) != len(ids):
        raise DuplicateId(f"{path}: embedding ids are not unique")
    return EmbeddingDataset(np.array(rows, dtype=float).reshape(len(rows), len(header) - 2), _labels(labels), ids)


def write_embeddings_csv(path, data: EmbeddingDataset):
    columns = ["id", "label"] + [f"f{i}" for i in range(data.d)]
    rows = [
        dict(zip(columns, [entity_id, label, *vector]))
        for entity_id, label, vector in zip(data.ids, data.labels.tolist(), data.vectors.tolist())
    ]
    write_rows(path, columns, rows)


def load_case_features(path) -> list:
    """Read a per-case feature CSV (as written by the morph command)."""
    path = pathlib.Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as source:
            reader = csv.DictReader(source)
            header = reader.fieldnames or []
            missing = [name for name in ("case_id", *FEATURE_NAMES) if name not in header]
            if missing:
                raise MissingHeader(f"{path}: missing columns {', '.join(missing)}")
            vectors = {}
            for row_number, row in enumerate(reader, start=2):
                case_id = row["case_id"].strip()
                if case_id in vectors:
                    raise DuplicateId(f"{path}: case {case_id!r} appears twice")
                features = {}
                for name in FEATURE_NAMES:
                    value = _parse_number(row[name], path, row_number, name)
                    features[name] = math.nan if value is None else value
                count = row.get("n_glomeruli") or "0"
                vectors[case_id] = CaseFeatureVector(case_id, features, int(float(count)))
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    logger.info("Loaded %d case feature vectors from %s", len(vectors), path)
    return [vectors[case_id] for case_id in sorted(vectors)]


def join_cases(features, clinical):
    """Pair feature vectors with clinical records by case id.

    Returns the joined (features, record) pairs sorted by case id and one
    Exclusion per case found on only one side.
    """
    by_case = {vector.case_id: vector for vector in features}
    records = {record.case_id: record for record in clinical}
    joined = [(by_case[case_id], records[case_id]) for case_id in sorted(set(by_case) & set(records))]
    exclusions = [Exclusion(case_id, "cohort", "features only") for case_id in sorted(set(by_case) - set(records))]
    exclusions += [Exclusion(case_id, "cohort", "clinical only") for case_id in sorted(set(records) - set(by_case))]
    for exclusion in exclusions:
        logger.info("Excluding case %s (%s)", exclusion.case_id, exclusion.reason)
    return joined, exclusions


def _csv_value(value, decimals):
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, (float, np.floating)):
        if math.isnan(value):
            return ""
        return f"{value:.{decimals}f}" if decimals is not None else repr(float(value))
    if isinstance(value, (list, tuple)):
        return ";".join(_csv_value(v, decimals) for v in value)
    return str(value)


def write_rows(path, columns, rows, decimals=None):
    """Write dict rows as a UTF-8, LF-terminated CSV; floats rounded when decimals is set."""
    path = pathlib.Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as output:
            writer = csv.writer(output, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_csv_value(row.get(column), decimals) for column in columns])
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
    logger.debug("Wrote %d rows to %s", len(rows), path)


def _json_safe(value):
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return _json_safe(value.tolist())
    if isinstance(value, (np.floating, float)):
        return None if math.isnan(value) or math.isinf(value) else float(value)
    if isinstance(value, np.integer):
        return int(value)
    return value


def write_json(path, data):
    path = pathlib.Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(_json_safe(data), indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def write_report(results, fmt: str, path):
    """Write association or regression results as CSV (4 decimals) or JSON (full precision).

    Every result type provides CSV_COLUMNS, rows() and to_record(); the caller's order
    is kept, so canonical ordering is the producer's job.
    """
    results = list(results)
    if not results:
        raise EmptyResults(f"nothing to write to {path}")
    if fmt == "csv":
        columns = type(results[0]).CSV_COLUMNS
        write_rows(path, columns, [row for result in results for row in result.rows()], decimals=CSV_DECIMALS)
    elif fmt == "json":
        write_json(path, [result.to_record() for result in results])
    else:
        raise ValidationError(f"unknown report format {fmt!r}")


def write_morphometry(out_dir, measured: dict, vectors: list, unit: str):
    """Write the per-glomerulus and per-case morphometry CSVs at full precision."""
    out_dir = pathlib.Path(out_dir)
    rows = [record_row(case_id, record, unit) for case_id in sorted(measured) for record in measured[case_id]]
    write_rows(out_dir / "glomeruli.csv", RECORD_COLUMNS, rows)
    write_case_features(out_dir / "cases.csv", vectors, unit)


def write_exclusions(path, exclusions):
    rows = [dataclasses.asdict(exclusion) for exclusion in exclusions]
    write_rows(path, ("case_id", "scope", "reason"), rows)


def write_case_features(path, vectors, unit: str = ""):
    columns = ("case_id", *FEATURE_NAMES, "n_glomeruli", "unit")
    rows = [{"case_id": v.case_id, **v.features, "n_glomeruli": v.n_glomeruli, "unit": unit} for v in vectors]
    write_rows(path, columns, rows)


def write_clinical(path, records, variables):
    write_rows(path, ("case_id", *variables), [{"case_id": r.case_id, **r.values} for r in records])


def _read_dict_rows(path: pathlib.Path, required):
    try:
        with path.open(newline="", encoding="utf-8") as source:
            reader = csv.DictReader(source)
            header = reader.fieldnames or []
            missing = [name for name in required if name not in header]
            if missing:
                raise MissingHeader(f"{path}: missing columns {', '.join(missing)}")
            return header, list(reader)
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e


def load_scores(path) -> dict:
    """Read a `score,label[,task][,run]` CSV into task -> run -> (scores, labels)."""
    path = pathlib.Path(path)
    _, rows = _read_dict_rows(path, ("score", "label"))
    grouped = {}
    for row_number, row in enumerate(rows, start=2):
        score = _parse_number(row["score"], path, row_number, "score")
        label = _parse_number(row["label"], path, row_number, "label")
        if score is None or label is None:
            raise UnparsableNumeric(path, row_number, "score" if score is None else "label", "")
        task = (row.get("task") or "").strip() or "task"
        run = (row.get("run") or "").strip() or "0"
        scores, labels = grouped.setdefault(task, {}).setdefault(run, ([], []))
        scores.append(score)
        labels.append(int(label))
    if not grouped:
        raise EmptyResults(f"{path}: no scores")
    return {
        task: {run: (np.array(s), np.array(l)) for run, (s, l) in sorted(runs.items())}
        for task, runs in sorted(grouped.items())
    }


def load_columns(path, names) -> dict:
    """Read the named numeric columns of a CSV; rows with an empty cell in any of them are dropped."""
    path = pathlib.Path(path)
    _, rows = _read_dict_rows(path, names)
    columns = {name: [] for name in names}
    for row_number, row in enumerate(rows, start=2):
        values = [_parse_number(row[name], path, row_number, name) for name in names]
        if any(value is None for value in values):
            logger.info("%s: row %d has a missing value, skipped", path, row_number)
            continue
        for name, value in zip(names, values):
            columns[name].append(value)
    return {name: np.array(values) for name, values in columns.items()}


def load_attention(grids_path, boxes_path) -> list:
    """Read attention grids and their lesion boxes.

    Grids come from a `.npy` array of shape (n, h, w) (or one (h, w) grid) or
    a JSON list of 2-D lists. The boxes JSON is a list of
    `{"grid": i, "lesion": name, "boxes": [[x0, y0, x1, y1], ...]}` entries;
    a plain list of box lists is read as one unnamed entry per grid.
    Returns [(grid index, lesion, grid, boxes)].
    """
    grids_path, boxes_path = pathlib.Path(grids_path), pathlib.Path(boxes_path)
    try:
        if grids_path.suffix.lower() == ".npy":
            grids = np.load(grids_path, allow_pickle=False)
        else:
            grids = np.array(json.loads(grids_path.read_text(encoding="utf-8")), dtype=float)
        entries = json.loads(boxes_path.read_text(encoding="utf-8"))
    except OSError as e:
        raise IoFailure(f"cannot read attention input: {e}") from e
    except ValueError as e:
        raise ValidationError(f"unreadable attention input: {e}") from e
    grids = np.asarray(grids, dtype=float)
    if grids.ndim == 2:
        grids = grids[np.newaxis]
    if grids.ndim != 3:
        raise ValidationError(f"{grids_path}: expected (n, h, w) grids, got shape {grids.shape}")
    if not isinstance(entries, list):
        raise ValidationError(f"{boxes_path}: expected a JSON list")
    result = []
    for i, entry in enumerate(entries):
        if isinstance(entry, dict):
            index, lesion, boxes = int(entry.get("grid", i)), str(entry.get("lesion", "")), entry.get("boxes", [])
        else:
            index, lesion, boxes = i, "", entry
        if not 0 <= index < len(grids):
            raise ValidationError(f"{boxes_path}: grid index {index} out of range (have {len(grids)})")
        result.append((index, lesion, grids[index], boxes))
    return result

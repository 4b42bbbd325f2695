"""Association statistics between case-level morphology and clinical groups.

Two groups are compared with the two-sample Kolmogorov-Smirnov test (effect
size D), three or more with Kruskal-Wallis (effect size epsilon-squared)
followed by Dunn's post-hoc test with Bonferroni adjustment. Shapiro-Wilk is
reported per group as an advisory normality screen only.
"""

import collections
import dataclasses
import logging
import math
import sys

import numpy as np
import scikit_posthocs
import scipy.stats

from cohort_io import bin_variable
from cohort_io import join_cases
from helpers import ValidationError
from helpers import parallel_map
from morphometry import FEATURE_NAMES

logger = logging.getLogger(__name__)

STAR_LEVELS = ((0.001, "***"), (0.01, "**"), (0.05, "*"))
STAR_ORDER = ("***", "**", "*", "ns")
MIN_GROUP_SIZE = 3
SHAPIRO_MAX_N = 5000


class SampleTooSmall(ValidationError):
    pass


class SampleTooLarge(ValidationError):
    pass


class ConstantSample(ValidationError):
    pass


class EmptySample(ValidationError):
    pass


class TooFewGroups(ValidationError):
    pass


class FewerThanThreeGroups(TooFewGroups):
    pass


class EmptyRegion(ValidationError):
    """Attention pixels inside or outside the boxes are missing."""


class InvalidBox(ValidationError):
    pass


class UnpairedSamples(ValidationError):
    pass


@dataclasses.dataclass(frozen=True)
class Sample:
    values: np.ndarray
    group_label: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if values.size == 0:
            raise EmptySample(f"sample {self.group_label!r} is empty")
        if not np.all(np.isfinite(values)):
            raise ValidationError(f"sample {self.group_label!r} has non-finite values")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size


def _values(sample) -> np.ndarray:
    if isinstance(sample, Sample):
        return sample.values
    return Sample(sample).values


@dataclasses.dataclass(frozen=True)
class GroupSummary:
    label: str
    n: int
    mean: float
    sd: float
    median: float
    iqr: float
    shapiro_w: float | None = None
    shapiro_p: float | None = None


@dataclasses.dataclass(frozen=True)
class AssociationResult:
    phenotype: str
    variable: str
    test: str
    statistic: float
    p_value: float
    effect_size: float
    stars: str
    group_labels: tuple
    group_sizes: tuple
    flags: tuple = ()
    excluded: tuple = ()
    groups: tuple = ()
    posthoc: dict | None = None

    CSV_COLUMNS = ("phenotype", "variable", "test", "statistic", "p", "effect", "p (D)", "p (eps2)", "stars", "groups", "n", "flags", "n_excluded")

    def to_record(self) -> dict:
        record = {
            "phenotype": self.phenotype,
            "variable": self.variable,
            "test": self.test,
            "statistic": self.statistic,
            "p": self.p_value,
            "effect": self.effect_size,
            "p (D)": self.p_value if self.test == "KS" else None,
            "p (eps2)": self.p_value if self.test == "KW" else None,
            "stars": self.stars,
            "groups": list(self.group_labels),
            "n": list(self.group_sizes),
            "flags": list(self.flags),
            "n_excluded": len(self.excluded),
            "excluded": list(self.excluded),
            "group_summaries": [dataclasses.asdict(group) for group in self.groups],
        }
        if self.posthoc is not None:
            record["posthoc"] = self.posthoc
        return record

    def rows(self) -> list:
        return [self.to_record()]


@dataclasses.dataclass(frozen=True)
class AlignmentResult:
    mean_in: float
    mean_out: float
    d: float
    p_value: float
    n_in: int
    n_out: int


def shapiro_wilk(x) -> tuple:
    """Shapiro-Wilk W and p-value (Royston's approximation)."""
    values = _values(x)
    if values.size < 3:
        raise SampleTooSmall(f"Shapiro-Wilk needs n >= 3, got {values.size}")
    if values.size > SHAPIRO_MAX_N:
        raise SampleTooLarge(f"Shapiro-Wilk supports n <= {SHAPIRO_MAX_N}, got {values.size}")
    if np.ptp(values) == 0:
        raise ConstantSample("Shapiro-Wilk is undefined for a constant sample")
    result = scipy.stats.shapiro(values)
    return float(result.statistic), float(result.pvalue)


def _ecdf_gap(x: np.ndarray, y: np.ndarray) -> float:
    x = np.sort(x)
    y = np.sort(y)
    support = np.concatenate([x, y])
    cdf_x = np.searchsorted(x, support, side="right") / x.size
    cdf_y = np.searchsorted(y, support, side="right") / y.size
    return float(np.max(np.abs(cdf_x - cdf_y)))


def ks_two_sample(x, y) -> tuple:
    """Two-sample KS statistic D with its asymptotic Kolmogorov p-value."""
    x = _values(x)
    y = _values(y)
    d = _ecdf_gap(x, y)
    effective_n = x.size * y.size / (x.size + y.size)
    p = float(scipy.stats.kstwobign.sf(math.sqrt(effective_n) * d))
    # Reported p-values stay in (0, 1].
    return d, min(max(p, sys.float_info.min), 1.0)


def ks_one_sample(x, cdf_name: str = "uniform", params=()) -> tuple:
    """One-sample KS test against a named scipy.stats distribution."""
    result = scipy.stats.kstest(_values(x), cdf_name, args=tuple(params))
    return float(result.statistic), float(result.pvalue)


def kruskal_wallis(groups) -> tuple:
    """Tie-corrected Kruskal-Wallis H, chi-squared p-value and epsilon-squared."""
    samples = [_values(group) for group in groups]
    if len(samples) < 2:
        raise TooFewGroups(f"Kruskal-Wallis needs at least 2 groups, got {len(samples)}")
    pooled = np.concatenate(samples)
    n = pooled.size
    if n < 3:
        raise SampleTooSmall(f"Kruskal-Wallis needs n >= 3, got {n}")
    if np.ptp(pooled) == 0:
        return 0.0, 1.0, 0.0
    result = scipy.stats.kruskal(*samples)
    h = float(result.statistic)
    eps2 = h / ((n**2 - 1) / (n + 1))
    return h, float(result.pvalue), min(max(eps2, 0.0), 1.0)


def dunn_posthoc(groups, adjust: bool = True) -> np.ndarray:
    """Pairwise Dunn p-values (k x k), Bonferroni-adjusted unless adjust is False."""
    samples = [_values(group) for group in groups]
    if len(samples) < 3:
        raise FewerThanThreeGroups(f"Dunn's test needs at least 3 groups, got {len(samples)}")
    if np.ptp(np.concatenate(samples)) == 0:
        return np.ones((len(samples), len(samples)))
    matrix = scikit_posthocs.posthoc_dunn(
        [sample.tolist() for sample in samples], p_adjust="bonferroni" if adjust else None
    )
    return np.clip(matrix.to_numpy(dtype=float), 0.0, 1.0)


def significance_stars(p: float) -> str:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p-value must be in [0, 1], got {p}")
    for threshold, stars in STAR_LEVELS:
        if p < threshold:
            return stars
    return "ns"


def summarize_group(label: str, values) -> GroupSummary:
    values = _values(values)
    q1, median, q3 = np.percentile(values, [25, 50, 75])
    w = p = None
    if MIN_GROUP_SIZE <= values.size <= SHAPIRO_MAX_N and np.ptp(values) > 0:
        w, p = shapiro_wilk(values)
    return GroupSummary(
        label=label,
        n=int(values.size),
        mean=float(np.mean(values)),
        sd=float(np.std(values, ddof=1)) if values.size > 1 else 0.0,
        median=float(median),
        iqr=float(q3 - q1),
        shapiro_w=w,
        shapiro_p=p,
    )


def _group_cases(joined, variable: str, spec):
    """Group joined cases by the variable's bins; cases with no value are excluded."""
    labels = spec[variable].labels
    members = {label: [] for label in labels}
    excluded = []
    for vector, record in joined:
        group = bin_variable(record.values.get(variable), variable, spec)
        if group is None:
            excluded.append(vector.case_id)
        else:
            members[group].append(vector)
    return members, excluded


def _test_feature(feature: str, variable: str, members: dict, excluded: list):
    samples = {}
    dropped = list(excluded)
    for label, vectors in members.items():
        values = []
        for vector in vectors:
            value = vector.features.get(feature, math.nan)
            if math.isfinite(value):
                values.append(value)
            else:
                dropped.append(vector.case_id)
        if values:
            samples[label] = np.array(values)
    if len(samples) < 2:
        logger.warning("%s x %s: fewer than two non-empty groups, no test", feature, variable)
        return None
    flags = []
    small = [label for label, values in samples.items() if values.size < MIN_GROUP_SIZE]
    if small:
        logger.warning("%s x %s: groups %s have fewer than %d cases", feature, variable, ", ".join(small), MIN_GROUP_SIZE)
        flags.append("GroupTooSmall")
    labels = tuple(samples)
    values = [samples[label] for label in labels]
    posthoc = None
    if len(values) == 2:
        test = "KS"
        statistic, p = ks_two_sample(values[0], values[1])
        effect = statistic
    else:
        test = "KW"
        statistic, p, effect = kruskal_wallis(values)
        matrix = dunn_posthoc(values)
        posthoc = {a: {b: float(matrix[i, j]) for j, b in enumerate(labels)} for i, a in enumerate(labels)}
    return AssociationResult(
        phenotype=feature,
        variable=variable,
        test=test,
        statistic=statistic,
        p_value=p,
        effect_size=effect,
        stars=significance_stars(p),
        group_labels=labels,
        group_sizes=tuple(int(v.size) for v in values),
        flags=tuple(flags),
        excluded=tuple(sorted(dropped)),
        groups=tuple(summarize_group(label, v) for label, v in zip(labels, values)),
        posthoc=posthoc,
    )


def associate(features, clinical, variable: str, spec, threads: int = 1) -> list:
    """Test every case-level feature against one clinical variable."""
    joined, _ = join_cases(features, clinical)
    members, excluded = _group_cases(joined, variable, spec)
    if excluded:
        logger.info("%s: %d cases without a value excluded", variable, len(excluded))
    results = parallel_map(lambda feature: _test_feature(feature, variable, members, excluded), FEATURE_NAMES, threads)
    return [result for result in results if result is not None]


def association_matrix(features, clinical, spec, variables=None, threads: int = 1) -> list:
    """Association results for every (feature, variable) pair, in canonical order."""
    variables = list(variables or spec.variables)
    by_variable = {variable: associate(features, clinical, variable, spec, threads) for variable in variables}
    order = {name: i for i, name in enumerate(FEATURE_NAMES)}
    results = [result for variable in variables for result in by_variable[variable]]
    return sorted(results, key=lambda r: (order[r.phenotype], variables.index(r.variable)))


def matrix_cell(result: AssociationResult) -> str:
    """`p (D)` for a KS result, `p (eps2)` for a KW one, both to four decimals."""
    return f"{result.p_value:.4f} ({result.effect_size:.4f})"


def association_grid(results) -> tuple:
    """Feature rows by variable columns of formatted cells; returns (columns, rows).

    Rows and columns follow the order of `results`; untested pairs stay empty.
    """
    variables = list(dict.fromkeys(result.variable for result in results))
    rows = {}
    for result in results:
        rows.setdefault(result.phenotype, {"phenotype": result.phenotype})[result.variable] = matrix_cell(result)
    return ("phenotype", *variables), list(rows.values())


def significance_summary(results) -> collections.Counter:
    """Count of results at each significance level."""
    counts = collections.Counter({level: 0 for level in STAR_ORDER})
    counts.update(result.stars for result in results)
    return counts


def wilcoxon_paired(x, y) -> tuple:
    """Two-sided Wilcoxon signed-rank test on paired samples."""
    x = _values(x)
    y = _values(y)
    if x.size != y.size:
        raise UnpairedSamples(f"paired samples differ in length ({x.size} vs {y.size})")
    if np.all(x == y):
        return 0.0, 1.0
    result = scipy.stats.wilcoxon(x, y, alternative="two-sided")
    return float(result.statistic), float(result.pvalue)


def box_mask(shape, boxes) -> np.ndarray:
    """Boolean mask of the union of half-open [x0, y0, x1, y1] boxes."""
    height, width = shape
    inside = np.zeros(shape, dtype=bool)
    for box in boxes:
        x0, y0, x1, y1 = (int(v) for v in box)
        if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
            raise InvalidBox(f"box {list(box)} is empty or outside a {width}x{height} grid")
        inside[y0:y1, x0:x1] = True
    return inside


def split_attention(attn, boxes) -> tuple:
    attn = np.asarray(attn, dtype=float)
    if attn.ndim != 2:
        raise ValidationError(f"attention grid must be 2-D, got shape {attn.shape}")
    inside = box_mask(attn.shape, boxes)
    return attn[inside], attn[~inside]


def _alignment(values_in: np.ndarray, values_out: np.ndarray) -> AlignmentResult:
    if values_in.size == 0 or values_out.size == 0:
        raise EmptyRegion("attention inside and outside the boxes must both be non-empty")
    d, p = ks_two_sample(values_in, values_out)
    return AlignmentResult(
        mean_in=float(np.mean(values_in)),
        mean_out=float(np.mean(values_out)),
        d=d,
        p_value=p,
        n_in=int(values_in.size),
        n_out=int(values_out.size),
    )


def attention_alignment(attn, boxes) -> AlignmentResult:
    """Compare attention inside lesion boxes against attention outside them."""
    return _alignment(*split_attention(attn, boxes))


def pooled_attention_alignment(grids) -> AlignmentResult:
    """Alignment over the pixels of several (attention grid, boxes) pairs together."""
    splits = [split_attention(attn, boxes) for attn, boxes in grids]
    if not splits:
        raise EmptyRegion("no attention grids to pool")
    return _alignment(np.concatenate([s[0] for s in splits]), np.concatenate([s[1] for s in splits]))


def entity_attention_alignment(grids) -> AlignmentResult:
    """Alignment between per-grid mean attention inside and outside the boxes.

    Each grid contributes one mean to each side, so D compares the
    distributions of entity-level attention rather than of pixels.
    """
    splits = [split_attention(attn, boxes) for attn, boxes in grids]
    if any(inside.size == 0 or outside.size == 0 for inside, outside in splits):
        raise EmptyRegion("every grid needs attention both inside and outside its boxes")
    return _alignment(np.array([s[0].mean() for s in splits]), np.array([s[1].mean() for s in splits]))

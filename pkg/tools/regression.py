"""Multivariate linear and logistic regression of phenotypes on clinical covariates."""

import dataclasses
import logging
import math

import numpy as np
import scipy.linalg
import scipy.special
import scipy.stats

from cohort_io import bin_variable
from eval_metrics import SingleClass
from helpers import ValidationError
from morphometry import FEATURE_NAMES

logger = logging.getLogger(__name__)

RANK_TOLERANCE = 1e-10
GRADIENT_TOLERANCE = 1e-8


class RankDeficient(ValidationError):
    """The design matrix has linearly dependent columns."""

    def __init__(self, columns):
        super().__init__(f"design matrix is rank deficient; collinear columns: {', '.join(columns)}")
        self.columns = tuple(columns)


class TooFewObservations(ValidationError):
    pass


@dataclasses.dataclass(frozen=True)
class RegressionTerm:
    name: str
    coef: float
    se: float
    p_value: float
    block: str = ""
    block_p: float | None = None


@dataclasses.dataclass(frozen=True)
class RegressionResult:
    outcome: str
    model: str
    terms: tuple
    r_squared: float
    n: int
    converged: bool = True
    iterations: int = 0
    excluded: tuple = ()

    CSV_COLUMNS = ("outcome", "model", "term", "coef", "se", "p", "block", "block p", "R2", "n", "converged")

    def to_record(self) -> dict:
        return {
            "outcome": self.outcome,
            "model": self.model,
            "R2": self.r_squared,
            "n": self.n,
            "converged": self.converged,
            "iterations": self.iterations,
            "excluded": list(self.excluded),
            "terms": [dataclasses.asdict(term) for term in self.terms],
        }

    def rows(self) -> list:
        return [
            {
                "outcome": self.outcome,
                "model": self.model,
                "term": term.name,
                "coef": term.coef,
                "se": term.se,
                "p": term.p_value,
                "block": term.block,
                "block p": term.block_p,
                "R2": self.r_squared,
                "n": self.n,
                "converged": self.converged,
            }
            for term in self.terms
        ]


def _prepare(design, y):
    x = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if x.ndim != 2 or x.shape[0] != y.size:
        raise ValidationError(f"design {x.shape} does not match {y.size} outcomes")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("design and outcome must be finite")
    if x.shape[0] <= x.shape[1]:
        raise TooFewObservations(f"{x.shape[0]} observations for {x.shape[1]} columns")
    return x, y


def _names(names, p):
    return list(names) if names is not None else [f"x{i}" for i in range(p)]


def _block_p(beta, cov, blocks):
    """Joint Wald chi-squared p-value for each named block of columns."""
    result = {}
    for block, indices in blocks.items():
        b = beta[indices]
        sub = cov[np.ix_(indices, indices)]
        try:
            statistic = float(b @ np.linalg.solve(sub, b))
        except np.linalg.LinAlgError:
            result[block] = math.nan
            continue
        result[block] = float(scipy.stats.chi2.sf(statistic, len(indices)))
    return result


def _terms(names, beta, se, p, cov, blocks):
    blocks = blocks or {}
    block_of = {i: block for block, indices in blocks.items() for i in indices}
    block_p = _block_p(beta, cov, blocks)
    return tuple(
        RegressionTerm(
            name=name,
            coef=float(beta[i]),
            se=float(se[i]),
            p_value=float(p[i]),
            block=block_of.get(i, ""),
            block_p=block_p.get(block_of.get(i)),
        )
        for i, name in enumerate(names)
    )


def ols_regression(design, y, names=None, outcome: str = "y", blocks=None) -> RegressionResult:
    """Least squares through a column-pivoted QR, with t-test p-values and R-squared."""
    x, y = _prepare(design, y)
    n, p = x.shape
    names = _names(names, p)
    q, r, pivot = scipy.linalg.qr(x, mode="economic", pivoting=True)
    diagonal = np.abs(np.diag(r))
    rank = int(np.sum(diagonal > RANK_TOLERANCE * diagonal[0]))
    if rank < p:
        raise RankDeficient([names[i] for i in sorted(pivot[rank:])])
    beta = np.empty(p)
    beta[pivot] = scipy.linalg.solve_triangular(r, q.T @ y)
    residual = y - x @ beta
    dof = n - p
    sigma2 = float(residual @ residual) / dof
    r_inv = scipy.linalg.solve_triangular(r, np.eye(p))
    cov = np.empty((p, p))
    cov[np.ix_(pivot, pivot)] = sigma2 * (r_inv @ r_inv.T)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / se, np.where(beta == 0, 0.0, np.inf))
    p_values = 2 * scipy.stats.t.sf(np.abs(t), dof)
    total = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 if total == 0 else 1.0 - float(residual @ residual) / total
    return RegressionResult(
        outcome=outcome,
        model="linear",
        terms=_terms(names, beta, se, p_values, cov, blocks),
        r_squared=min(max(r_squared, 0.0), 1.0),
        n=n,
    )


def _penalized_deviance(x, y, beta, penalty):
    eta = x @ beta
    nll = float(np.sum(np.logaddexp(0.0, eta) - y * eta))
    return nll + 0.5 * float(np.sum(penalty * beta**2))


def logistic_regression_mv(
    design, y, names=None, outcome: str = "y", blocks=None, l2: float = 1.0, max_iter: int = 100
) -> RegressionResult:
    """L2-penalised logistic regression by Newton steps with step halving.

    All-ones columns are the intercept and are not penalised. Standard errors
    come from the inverse penalised Hessian; R2 is McFadden's pseudo R-squared.
    """
    x, y = _prepare(design, y)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValidationError("logistic outcome must be 0/1")
    if y.min() == y.max():
        raise SingleClass(f"outcome {outcome!r} has a single class")
    n, p = x.shape
    names = _names(names, p)
    penalty = np.where(np.all(x == 1.0, axis=0), 0.0, l2)
    beta = np.zeros(p)
    objective = _penalized_deviance(x, y, beta, penalty)
    converged = False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        mu = scipy.special.expit(x @ beta)
        gradient = x.T @ (mu - y) + penalty * beta
        if np.linalg.norm(gradient) < GRADIENT_TOLERANCE:
            converged = True
            break
        hessian = (x.T * (mu * (1 - mu))) @ x + np.diag(penalty)
        try:
            step = scipy.linalg.solve(hessian, gradient, assume_a="pos")
        except (scipy.linalg.LinAlgError, ValueError):
            step = np.linalg.lstsq(hessian, gradient, rcond=None)[0]
        scale = 1.0
        for _ in range(50):
            candidate = beta - scale * step
            candidate_objective = _penalized_deviance(x, y, candidate, penalty)
            if candidate_objective <= objective + 1e-12 * max(1.0, abs(objective)):
                break
            scale /= 2
        else:
            logger.warning("%s: line search stalled at iteration %d", outcome, iteration)
            break
        beta, objective = candidate, candidate_objective
    mu = scipy.special.expit(x @ beta)
    if not converged:
        converged = bool(np.linalg.norm(x.T @ (mu - y) + penalty * beta) < GRADIENT_TOLERANCE)
    if not converged:
        logger.warning("%s: logistic regression did not converge after %d iterations", outcome, iteration)
    hessian = (x.T * (mu * (1 - mu))) @ x + np.diag(penalty)
    cov = np.linalg.pinv(hessian)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, beta / se, 0.0)
    p_values = 2 * scipy.stats.norm.sf(np.abs(z))
    eta = x @ beta
    log_likelihood = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    rate = y.mean()
    null_log_likelihood = n * (rate * math.log(rate) + (1 - rate) * math.log(1 - rate))
    return RegressionResult(
        outcome=outcome,
        model="logistic",
        terms=_terms(names, beta, se, p_values, cov, blocks),
        r_squared=1.0 - log_likelihood / null_log_likelihood,
        n=n,
        converged=converged,
        iterations=iteration,
    )


def _column_kind(name, joined, spec):
    if name in FEATURE_NAMES:
        return "feature"
    if name in spec.variables:
        return "numeric" if spec[name].kind == "thresholded" else "categorical"
    values = [record.values.get(name) for _, record in joined if record.values.get(name) is not None]
    try:
        [float(v) for v in values]
    except (TypeError, ValueError):
        return "categorical"
    return "numeric"


def _raw_value(name, kind, vector, record, spec):
    if kind == "feature":
        value = vector.features.get(name, math.nan)
        return value if math.isfinite(value) else None
    value = record.values.get(name)
    if value is None:
        return None
    if kind == "numeric":
        return float(value)
    if name in spec.variables:
        return bin_variable(value, name, spec)
    return str(value)


def build_design(joined, outcome: str, covariates, spec, positive=None):
    """Build (design, y, names, blocks, excluded ids) from joined cases.

    Features and numeric clinical columns enter as they are; categorical
    covariates are one-hot encoded against their first observed level. With
    positive group labels the outcome becomes 0/1 membership of those groups.
    Cases missing any used value are dropped listwise.
    """
    kinds = {name: _column_kind(name, joined, spec) for name in [outcome, *covariates]}
    rows, excluded = [], []
    for vector, record in joined:
        if positive:
            label = bin_variable(record.values.get(outcome), outcome, spec) if outcome in spec.variables else record.values.get(outcome)
            target = None if label is None else float(label in positive)
        else:
            target = _raw_value(outcome, kinds[outcome], vector, record, spec)
        values = {name: _raw_value(name, kinds[name], vector, record, spec) for name in covariates}
        if target is None or any(v is None for v in values.values()):
            excluded.append(vector.case_id)
            continue
        rows.append((target, values))
    if excluded:
        logger.info("Regression of %s: %d cases with missing values dropped", outcome, len(excluded))
    names = ["intercept"]
    columns = [np.ones(len(rows))]
    blocks = {}
    for name in covariates:
        observed = [values[name] for _, values in rows]
        if kinds[name] != "categorical":
            names.append(name)
            columns.append(np.array(observed, dtype=float))
            continue
        order = list(spec[name].labels) if name in spec.variables else sorted(set(observed))
        levels = [level for level in order if level in set(observed)]
        indices = []
        for level in levels[1:]:
            indices.append(len(names))
            names.append(f"{name}[{level}]")
            columns.append(np.array([float(v == level) for v in observed]))
        if len(indices) > 1:
            blocks[name] = indices
    design = np.column_stack(columns) if rows else np.empty((0, len(columns)))
    y = np.array([target for target, _ in rows], dtype=float)
    return design, y, names, blocks, tuple(excluded)


def regress(joined, outcome: str, covariates, spec, positive=None) -> RegressionResult:
    """Fit the linear (numeric outcome) or logistic (positive groups given) model."""
    design, y, names, blocks, excluded = build_design(joined, outcome, covariates, spec, positive)
    if positive:
        result = logistic_regression_mv(design, y, names, outcome, blocks)
    else:
        result = ols_regression(design, y, names, outcome, blocks)
    return dataclasses.replace(result, excluded=excluded)

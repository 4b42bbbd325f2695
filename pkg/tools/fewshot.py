"""Few-shot classification on frozen embeddings.

k labelled examples per class are drawn, one of four classifiers is fitted
on them and scored by ROC-AUC on every entity that was not drawn. Each
(classifier, k) cell is repeated with independently derived seeds.
"""

import dataclasses
import logging
import math
import pathlib

import numpy as np
import scipy.special
import sklearn.ensemble
import sklearn.linear_model

from cohort_io import write_json
from cohort_io import write_rows
from eval_metrics import ScoredLabels
from eval_metrics import SingleClass
from eval_metrics import roc_auc
from eval_metrics import summarize_runs
from helpers import ValidationError
from helpers import derive_seed
from helpers import parallel_map

logger = logging.getLogger(__name__)

CLASSIFIERS = ("PTL", "LR", "MLP", "RF")
DEFAULT_KS = (1, 5, 10, 25, 100)
DEFAULT_REPEATS = 10

MLP_HIDDEN = (256, 128)
MLP_EPOCHS = 200
ADAM_STEP = 1e-3
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class InsufficientClassMembers(ValidationError):
    pass


class NotBinary(ValidationError):
    pass


@dataclasses.dataclass(frozen=True)
class Subset:
    x: np.ndarray
    y: np.ndarray
    index: np.ndarray


@dataclasses.dataclass(frozen=True)
class FewShotRun:
    classifier: str
    k: int
    repeat: int
    seed: int
    auc: float
    flags: tuple = ()


@dataclasses.dataclass(frozen=True)
class ProtocolCell:
    classifier: str
    k: int
    runs: tuple
    status: str = "ok"

    @property
    def aucs(self) -> np.ndarray:
        return np.array([run.auc for run in self.runs])

    @property
    def mean(self) -> float:
        return summarize_runs(self.aucs)[0] if self.runs else math.nan

    @property
    def std(self) -> float:
        return summarize_runs(self.aucs)[1] if self.runs else math.nan

    @property
    def flags(self) -> tuple:
        return tuple(sorted({flag for run in self.runs for flag in run.flags}))


@dataclasses.dataclass(frozen=True)
class ProtocolTable:
    classifiers: tuple
    ks: tuple
    repeats: int
    master_seed: int
    positive: object
    cells: dict

    def __getitem__(self, key) -> ProtocolCell:
        return self.cells[key]


def binary_labels(labels, positive=None) -> tuple:
    """Map labels of a two-class dataset to 0/1; returns (y, positive label)."""
    classes = sorted(np.unique(labels).tolist())
    if len(classes) != 2:
        raise NotBinary(f"few-shot tasks need exactly two classes, found {len(classes)}: {classes}")
    if positive is None:
        positive = classes[-1]
    elif positive not in classes:
        matches = [c for c in classes if str(c) == str(positive)]
        if not matches:
            raise ValidationError(f"positive class {positive!r} is not one of {classes}")
        positive = matches[0]
    return (np.asarray(labels) == positive).astype(int), positive


def sample_k_shot(data, k: int, seed: int, positive=None) -> tuple:
    """Draw k training entities per class without replacement; the rest is the test set."""
    if k < 1:
        raise ValidationError(f"k must be at least 1, got {k}")
    y, _ = binary_labels(data.labels, positive)
    rng = np.random.default_rng(seed)
    chosen = []
    for cls in (0, 1):
        members = np.flatnonzero(y == cls)
        if members.size <= k:
            raise InsufficientClassMembers(f"class {cls} has {members.size} members, k={k} needs more than {k}")
        chosen.append(rng.choice(members, size=k, replace=False))
    train_index = np.sort(np.concatenate(chosen))
    test_index = np.setdiff1d(np.arange(len(y)), train_index)
    train = Subset(data.vectors[train_index], y[train_index], train_index)
    test = Subset(data.vectors[test_index], y[test_index], test_index)
    return train, test


def _check_train(train: Subset):
    if np.unique(train.y).size != 2:
        raise SingleClass("training set must contain both classes")


def ptl_fit_predict(train: Subset, test: Subset, seed: int = 0) -> np.ndarray:
    """Nearest-centroid scores: distance to the negative centre minus distance to the positive one."""
    _check_train(train)
    positive = train.x[train.y == 1].mean(axis=0)
    negative = train.x[train.y == 0].mean(axis=0)
    return np.linalg.norm(test.x - negative, axis=1) - np.linalg.norm(test.x - positive, axis=1)


def fit_lr(train: Subset) -> tuple:
    """L2 logistic regression (strength 1, unpenalised intercept) by L-BFGS; returns (model, converged)."""
    _check_train(train)
    model = sklearn.linear_model.LogisticRegression(C=1.0, solver="lbfgs", tol=1e-10, max_iter=1000)
    model.fit(train.x, train.y)
    converged = bool(model.n_iter_[0] < model.max_iter)
    if not converged:
        logger.warning("Logistic regression hit %d iterations without converging", model.max_iter)
    return model, converged


def lr_fit_predict(train: Subset, test: Subset, seed: int = 0) -> np.ndarray:
    """Predicted log-odds of the positive class."""
    model, _ = fit_lr(train)
    return model.decision_function(test.x)


def mlp_init(d: int, seed: int, hidden=MLP_HIDDEN) -> list:
    """He-initialised weights and zero biases for d -> hidden... -> 1."""
    rng = np.random.default_rng(seed)
    sizes = (d, *hidden, 1)
    params = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        params.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return params


def mlp_logits(params: list, x: np.ndarray) -> np.ndarray:
    h = x
    for w, b in zip(params[:-2:2], params[1:-2:2]):
        h = np.maximum(h @ w + b, 0.0)
    return (h @ params[-2] + params[-1]).ravel()


def loss_and_grad(params: list, x: np.ndarray, y: np.ndarray) -> tuple:
    """Mean binary cross-entropy on logits and its gradient for every parameter."""
    activations = [x]
    pre = []
    h = x
    for w, b in zip(params[:-2:2], params[1:-2:2]):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        activations.append(h)
    logits = (h @ params[-2] + params[-1]).ravel()
    n = x.shape[0]
    loss = float(np.mean(np.logaddexp(0.0, logits) - y * logits))
    delta = ((scipy.special.expit(logits) - y) / n)[:, None]
    grads = [None] * len(params)
    for layer in range(len(params) // 2 - 1, -1, -1):
        grads[2 * layer] = activations[layer].T @ delta
        grads[2 * layer + 1] = delta.sum(axis=0)
        if layer:
            delta = (delta @ params[2 * layer].T) * (pre[layer - 1] > 0)
    return loss, grads


def mlp_train(x: np.ndarray, y: np.ndarray, seed: int, epochs: int = MLP_EPOCHS, hidden=MLP_HIDDEN) -> list:
    """Full-batch Adam on the cross-entropy loss for a fixed number of epochs."""
    params = mlp_init(x.shape[1], seed, hidden)
    first = [np.zeros_like(p) for p in params]
    second = [np.zeros_like(p) for p in params]
    beta1, beta2 = ADAM_BETAS
    for epoch in range(1, epochs + 1):
        _, grads = loss_and_grad(params, x, y)
        for i, grad in enumerate(grads):
            first[i] = beta1 * first[i] + (1 - beta1) * grad
            second[i] = beta2 * second[i] + (1 - beta2) * grad**2
            corrected_first = first[i] / (1 - beta1**epoch)
            corrected_second = second[i] / (1 - beta2**epoch)
            params[i] = params[i] - ADAM_STEP * corrected_first / (np.sqrt(corrected_second) + ADAM_EPS)
    return params


def mlp_fit_predict(train: Subset, test: Subset, seed: int = 0) -> np.ndarray:
    """Output logits of a d-256-128-1 ReLU network trained for 200 epochs."""
    _check_train(train)
    params = mlp_train(train.x, train.y.astype(float), seed)
    return mlp_logits(params, test.x)


def rf_fit_predict(train: Subset, test: Subset, seed: int = 0) -> np.ndarray:
    """Share of 100 Gini CART trees (bootstrap, sqrt(d) features per split) voting positive."""
    _check_train(train)
    forest = sklearn.ensemble.RandomForestClassifier(
        n_estimators=100,
        criterion="gini",
        max_features="sqrt",
        bootstrap=True,
        min_samples_leaf=1,
        random_state=seed % 2**32,
        n_jobs=1,
    )
    forest.fit(train.x, train.y)
    return forest.predict_proba(test.x)[:, list(forest.classes_).index(1)]


FIT_PREDICT = {
    "PTL": ptl_fit_predict,
    "LR": lr_fit_predict,
    "MLP": mlp_fit_predict,
    "RF": rf_fit_predict,
}


def _run_once(data, classifier: str, k: int, repeat: int, master_seed: int, positive) -> FewShotRun:
    seed = derive_seed(master_seed, classifier, k, repeat)
    train, test = sample_k_shot(data, k, seed, positive)
    flags = ()
    if classifier == "LR":
        model, converged = fit_lr(train)
        scores = model.decision_function(test.x)
        flags = () if converged else ("NonConvergence",)
    else:
        scores = FIT_PREDICT[classifier](train, test, seed)
    auc = roc_auc(ScoredLabels(scores, test.y))
    return FewShotRun(classifier, k, repeat, seed, auc, flags)


def run_protocol(
    data,
    classifiers=CLASSIFIERS,
    ks=DEFAULT_KS,
    repeats: int = DEFAULT_REPEATS,
    master_seed: int = 0,
    positive=None,
    threads: int = 1,
) -> ProtocolTable:
    """Run every (classifier, k) cell `repeats` times.

    A cell whose sampling or fitting fails is kept with a failed status and
    no runs; nothing is imputed.
    """
    unknown = [name for name in classifiers if name not in FIT_PREDICT]
    if unknown:
        raise ValidationError(f"unknown classifiers: {', '.join(unknown)}")
    _, positive = binary_labels(data.labels, positive)
    ks = tuple(sorted(set(int(k) for k in ks)))
    jobs = [(name, k, i) for name in classifiers for k in ks for i in range(repeats)]

    def run(job):
        name, k, i = job
        try:
            return _run_once(data, name, k, i, master_seed, positive)
        except ValidationError as e:
            return e

    outcomes = dict(zip(jobs, parallel_map(run, jobs, threads)))
    cells = {}
    for name in classifiers:
        for k in ks:
            results = [outcomes[(name, k, i)] for i in range(repeats)]
            errors = [r for r in results if isinstance(r, Exception)]
            if errors:
                logger.error("%s k=%d failed: %s", name, k, errors[0])
                cells[(name, k)] = ProtocolCell(name, k, (), f"failed: {errors[0]}")
            else:
                cells[(name, k)] = ProtocolCell(name, k, tuple(results))
                logger.info("%s k=%d: AUC %.4f ± %.4f", name, k, cells[(name, k)].mean, cells[(name, k)].std)
    return ProtocolTable(tuple(classifiers), ks, repeats, master_seed, positive, cells)


def format_cell(cell: ProtocolCell) -> str:
    """Table text for a cell: mean ± std, '-' below chance, 'failed' without runs."""
    if not cell.runs:
        return "failed"
    if cell.mean < 0.5:
        return "-"
    return f"{cell.mean:.4f} ± {cell.std:.4f}"


def write_protocol(table: ProtocolTable, out_dir):
    """Write the method x k table, the long per-cell table and the per-run JSON."""
    out_dir = pathlib.Path(out_dir)
    columns = ["method", *[f"k={k}" for k in table.ks]]
    rows = [
        {"method": name, **{f"k={k}": format_cell(table[(name, k)]) for k in table.ks}}
        for name in table.classifiers
    ]
    write_rows(out_dir / "fewshot_table.csv", columns, rows)
    cell_rows = [
        {
            "classifier": cell.classifier,
            "k": cell.k,
            "mean_auc": cell.mean,
            "std_auc": cell.std,
            "n_runs": len(cell.runs),
            "status": cell.status,
            "flags": cell.flags,
        }
        for cell in (table[(name, k)] for name in table.classifiers for k in table.ks)
    ]
    write_rows(
        out_dir / "fewshot_cells.csv",
        ("classifier", "k", "mean_auc", "std_auc", "n_runs", "status", "flags"),
        cell_rows,
    )
    runs = {
        "master_seed": table.master_seed,
        "positive": str(table.positive),
        "repeats": table.repeats,
        "runs": [
            dataclasses.asdict(run)
            for name in table.classifiers
            for k in table.ks
            for run in table[(name, k)].runs
        ],
    }
    write_json(out_dir / "fewshot_runs.json", runs)

#! /usr/bin/env python3

"""Glomerular morphometry and clinicopathological statistics from the command line.

Each subcommand is one pipeline stage: morph measures masks, associate and
regress relate case features to clinical variables, fewshot runs the
few-shot evaluation protocol on embeddings, eval scores predictions,
distill-sim runs the self-distillation simulator, attn-align tests attention
against lesion boxes and compare runs a paired test on two metric columns.
"""

import collections
import dataclasses
import functools
import logging
import pathlib
import sys

import click
import numpy as np
import rich.console
import rich.table
import yaml

import assoc_stats
import cohort_io
import eval_metrics
import fewshot
import morphometry
import regression
import selfdistill
import synthetic
from helpers import GlomstatError
from helpers import IoFailure
from helpers import ValidationError
from helpers import count_and_percentage_table
from helpers import setup_logging

logger = logging.getLogger(__name__)

FORMATS = ("csv", "json")
LOG_LEVELS = ["debug", "info", "warning", "error", "critical"]


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    threads: int = 1
    log_level: str = "info"
    config: pathlib.Path | None = None


def load_config(ctx, param, value):
    """Use a YAML/JSON file as the default map; flags given on the command line win."""
    if value is None:
        return None
    try:
        data = yaml.safe_load(value.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise click.BadParameter(f"not valid YAML/JSON: {e}", ctx=ctx, param=param) from e
    if not isinstance(data, dict):
        raise click.BadParameter("the config file must hold a mapping", ctx=ctx, param=param)
    ctx.default_map = _normalise_keys(data)
    return value


def _normalise_keys(data):
    # Subcommand sections keep their names; option keys map dashes to underscores.
    normalised = {}
    for key, value in data.items():
        if isinstance(value, dict):
            normalised[str(key)] = _normalise_keys(value)
        else:
            normalised[str(key).replace("-", "_")] = value
    return normalised


def exit_codes(f):
    """Map library errors onto exit codes: 2 for I/O, 1 for everything else."""

    @functools.wraps(f)
    def inner(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except (IoFailure, OSError) as e:
            logger.error("%s", e)
            sys.exit(2)
        except GlomstatError as e:
            logger.error("%s", e)
            sys.exit(1)

    return inner


class CommandGroup(click.Group):
    """A click group whose usage errors exit with 1; 2 is kept for I/O failures."""

    def make_context(self, info_name, args, parent=None, **extra):
        try:
            return super().make_context(info_name, args, parent, **extra)
        except click.UsageError as e:
            e.exit_code = 1
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = 1
            raise


def _console():
    console = rich.console.Console()
    console.print()  # Separate out from any logging.
    return console


def _out_dir(path: pathlib.Path) -> pathlib.Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create output directory {path}: {e}") from e
    return path


EXISTING_FILE = click.Path(exists=True, dir_okay=False, path_type=pathlib.Path)
EXISTING_DIR = click.Path(exists=True, file_okay=False, path_type=pathlib.Path)
OUT_DIR = click.Path(file_okay=False, path_type=pathlib.Path)


@click.group(cls=CommandGroup)
@click.option(
    "-c",
    "--config",
    type=EXISTING_FILE,
    default=None,
    is_eager=True,
    expose_value=True,
    callback=load_config,
    help="YAML or JSON file of option defaults, keyed by subcommand.",
)
@click.option(
    "--log-level",
    default="info",
    type=click.Choice(LOG_LEVELS, case_sensitive=False),
)
@click.option("--seed", default=0, type=click.IntRange(0), help="Master seed for all randomness.")
@click.option("--threads", default=1, type=click.IntRange(1))
@click.pass_context
def main(ctx, config, log_level, seed, threads):
    """Glomerular morphometry and clinicopathological statistics."""
    setup_logging(log_level)
    ctx.obj = PipelineConfig(seed=seed, threads=threads, log_level=log_level, config=config)


@main.command()
@click.option("--masks", required=True, type=EXISTING_DIR, envvar="GLOMSTAT_DATA_ROOT", help="Cohort root of <case>/<glomerulus>.png masks.")
@click.option("--out", required=True, type=OUT_DIR)
@click.option("--resolution", default=1.0, type=click.FloatRange(min=0, min_open=True), help="Physical size of one pixel.")
@click.option("--unit", default=None, help="Unit name for the outputs (default px, or um with --resolution).")
@click.option("--strict/--no-strict", default=False, help="Fail on the first malformed mask instead of skipping it.")
@click.pass_obj
@exit_codes
def morph(config, masks, out, resolution, unit, strict):
    """Measure every glomerulus mask and aggregate per case."""
    if unit is None:
        unit = "px" if resolution == 1.0 else "um"
    cohort = cohort_io.load_mask_cohort(masks, resolution, strict)
    measured = morphometry.measure_cohort(cohort, config.threads)
    vectors, exclusions = [], []
    for case_id, records in measured.items():
        try:
            vectors.append(morphometry.aggregate_case(records, case_id))
        except morphometry.EmptyCase as e:
            logger.warning("%s", e)
            exclusions.append(cohort_io.Exclusion(case_id, "cohort", "no usable glomeruli"))
    if not vectors:
        raise morphometry.EmptyCase(f"no case under {masks} has a usable glomerulus")
    out = _out_dir(out)
    cohort_io.write_morphometry(out, measured, vectors, unit)
    cohort_io.write_exclusions(out / "exclusions.csv", exclusions)

    records = [record for case in measured.values() for record in case]
    statuses = collections.Counter(record.status for record in records)
    console = _console()
    console.print(f"{len(vectors)} cases, {len(records)} glomeruli measured.")
    console.print(count_and_percentage_table("Glomerulus Status", "Status", len(records), statuses.most_common()))


def _variables(requested, spec, clinical):
    if requested:
        unknown = [name for name in requested if name not in spec.variables]
        if unknown:
            raise ValidationError(f"variables not in binning spec {spec.name}: {', '.join(unknown)}")
        return list(requested)
    present = set().union(*(record.values for record in clinical)) if clinical else set()
    return [name for name in spec.variables if name in present]


@main.command()
@click.option("--features", required=True, type=EXISTING_FILE, help="Per-case feature CSV from morph.")
@click.option("--clinical", required=True, type=EXISTING_FILE)
@click.option("--spec", default="xj_light_1", help="Binning spec: a shipped name or a YAML/JSON path.")
@click.option("--variable", "variables", multiple=True, help="Clinical variable to test (repeatable; default all).")
@click.option("--out", required=True, type=OUT_DIR)
@click.option("--format", "fmt", default="csv", type=click.Choice(FORMATS, case_sensitive=False))
@click.pass_obj
@exit_codes
def associate(config, features, clinical, spec, variables, out, fmt):
    """Test every case feature against every clinical variable."""
    spec = cohort_io.load_binning_spec(spec)
    vectors = cohort_io.load_case_features(features)
    records = cohort_io.load_clinical(clinical, spec)
    variables = _variables(variables, spec, records)
    _, exclusions = cohort_io.join_cases(vectors, records)
    results = assoc_stats.association_matrix(vectors, records, spec, variables, config.threads)
    for variable in variables:
        missing = sorted({case for r in results if r.variable == variable for case in r.excluded})
        exclusions += [cohort_io.Exclusion(case, variable, "missing value") for case in missing]

    out = _out_dir(out)
    cohort_io.write_report(results, fmt, out / f"association.{fmt}")
    columns, grid = assoc_stats.association_grid(results)
    cohort_io.write_rows(out / "association_matrix.csv", columns, grid)
    levels = assoc_stats.significance_summary(results)
    cohort_io.write_rows(
        out / "significance_levels.csv",
        ("level", "count"),
        [{"level": level, "count": levels[level]} for level in assoc_stats.STAR_ORDER],
    )
    cohort_io.write_exclusions(out / "exclusions.csv", exclusions)

    console = _console()
    console.print(f"{len(results)} feature x variable tests over {len(variables)} variables.")
    console.print(
        count_and_percentage_table(
            "Significance Levels", "Level", len(results), [(level, levels[level]) for level in assoc_stats.STAR_ORDER]
        )
    )
    significant = [r for r in results if r.stars != "ns"]
    if significant:
        table = rich.table.Table(title="Significant Associations")
        for column in ("Phenotype", "Variable", "Test", "Statistic", "p", ""):
            table.add_column(column)
        for r in significant:
            table.add_row(r.phenotype, r.variable, r.test, f"{r.statistic:.4f}", f"{r.p_value:.2e}", r.stars)
        console.print(table)


@main.command()
@click.option("--features", required=True, type=EXISTING_FILE)
@click.option("--clinical", required=True, type=EXISTING_FILE)
@click.option("--spec", default="xj_light_1")
@click.option("--outcome", required=True, help="Feature or clinical column to model.")
@click.option("--covariate", "covariates", multiple=True, required=True)
@click.option("--positive", default=None, help="Comma-separated outcome groups coded 1; selects logistic regression.")
@click.option("--out", required=True, type=OUT_DIR)
@click.option("--format", "fmt", default="csv", type=click.Choice(FORMATS, case_sensitive=False))
@click.pass_obj
@exit_codes
def regress(config, features, clinical, spec, outcome, covariates, positive, out, fmt):
    """Fit a multivariate linear or logistic regression."""
    spec = cohort_io.load_binning_spec(spec)
    vectors = cohort_io.load_case_features(features)
    records = cohort_io.load_clinical(clinical, spec)
    joined, exclusions = cohort_io.join_cases(vectors, records)
    positive = tuple(p.strip() for p in positive.split(",") if p.strip()) if positive else None
    result = regression.regress(joined, outcome, list(covariates), spec, positive)
    exclusions += [cohort_io.Exclusion(case, outcome, "missing value") for case in result.excluded]

    out = _out_dir(out)
    cohort_io.write_report([result], fmt, out / f"regression.{fmt}")
    cohort_io.write_exclusions(out / "exclusions.csv", exclusions)

    console = _console()
    table = rich.table.Table(title=f"{result.model.title()} regression of {outcome} (n={result.n}, R2={result.r_squared:.4f})")
    for column in ("Term", "coef", "SE", "p", ""):
        table.add_column(column)
    for term in result.terms:
        table.add_row(term.name, f"{term.coef:.4f}", f"{term.se:.4f}", f"{term.p_value:.2e}", assoc_stats.significance_stars(term.p_value))
    console.print(table)
    if not result.converged:
        console.print("[bold red]The logistic fit did not converge.[/bold red]")


@main.command(name="fewshot")
@click.option("--embeddings", required=True, type=EXISTING_FILE, help="CSV (id,label,f0..) or float32 matrix with a JSON sidecar.")
@click.option("--classifier", "classifiers", multiple=True, type=click.Choice(fewshot.CLASSIFIERS), default=fewshot.CLASSIFIERS)
@click.option("--k", "ks", multiple=True, type=click.IntRange(1), default=fewshot.DEFAULT_KS, help="Training entities per class (repeatable).")
@click.option("--repeats", default=fewshot.DEFAULT_REPEATS, type=click.IntRange(1))
@click.option("--positive", default=None, help="Label treated as the positive class.")
@click.option("--out", required=True, type=OUT_DIR)
@click.pass_obj
@exit_codes
def fewshot_command(config, embeddings, classifiers, ks, repeats, positive, out):
    """Run the few-shot protocol over classifiers and shot counts."""
    data = cohort_io.load_embeddings(embeddings)
    table = fewshot.run_protocol(data, classifiers, ks, repeats, config.seed, positive, config.threads)
    fewshot.write_protocol(table, _out_dir(out))

    console = _console()
    rich_table = rich.table.Table(title=f"Few-shot ROC-AUC ({repeats} repeats, seed {config.seed})")
    rich_table.add_column("Method")
    for k in table.ks:
        rich_table.add_column(f"k={k}")
    for name in table.classifiers:
        rich_table.add_row(name, *[fewshot.format_cell(table[(name, k)]) for k in table.ks])
    console.print(rich_table)


def _score_metrics(scores_path, threshold):
    rows = []
    for task, runs in cohort_io.load_scores(scores_path).items():
        metrics = collections.defaultdict(list)
        for run, (scores, labels) in runs.items():
            scored = eval_metrics.ScoredLabels(scores, labels)
            metrics["roc_auc"].append(eval_metrics.roc_auc(scored))
            metrics["pr_auc"].append(eval_metrics.pr_auc(scored))
            counts = eval_metrics.threshold_counts(scored, threshold)
            metrics["precision"].append(eval_metrics.precision(counts))
            metrics["recall"].append(eval_metrics.recall(counts))
            metrics["f1"].append(eval_metrics.f1_score(counts))
        for metric, values in metrics.items():
            mean, std = eval_metrics.summarize_runs(values)
            rows.append({"task": task, "metric": metric, "mean": mean, "std": std, "n_runs": len(values)})
    return rows


def _mask_metrics(predicted_root, truth_root):
    predicted = cohort_io.load_mask_cohort(predicted_root, strict=True)
    truth = cohort_io.load_mask_cohort(truth_root, strict=True)
    pairs, rows = [], []
    for case_id in sorted(set(predicted) | set(truth)):
        mine = {mask.glomerulus_id: mask for mask in predicted.get(case_id, [])}
        theirs = {mask.glomerulus_id: mask for mask in truth.get(case_id, [])}
        for glomerulus_id in sorted(set(mine) ^ set(theirs)):
            logger.warning("Case %s: glomerulus %s has no counterpart mask, skipped", case_id, glomerulus_id)
        for glomerulus_id in sorted(set(mine) & set(theirs)):
            scores = eval_metrics.iou_per_structure(mine[glomerulus_id].labels, theirs[glomerulus_id].labels)
            pairs.append({"case_id": case_id, "glomerulus_id": glomerulus_id, **scores})
    if not pairs:
        raise cohort_io.EmptyResults("no predicted mask has a ground-truth counterpart")
    for structure in ("bow", "tuft"):
        mean, std = eval_metrics.summarize_runs([pair[structure] for pair in pairs])
        rows.append({"task": "segmentation", "metric": f"iou_{structure}", "mean": mean, "std": std, "n_runs": len(pairs)})
    return pairs, rows


@main.command(name="eval")
@click.option("--scores", type=EXISTING_FILE, default=None, help="CSV of score,label with optional task and run columns.")
@click.option("--predicted-masks", type=EXISTING_DIR, default=None)
@click.option("--truth-masks", type=EXISTING_DIR, default=None)
@click.option("--threshold", default=0.5, type=float, help="Decision threshold for precision, recall and F1.")
@click.option("--out", required=True, type=OUT_DIR)
@click.pass_obj
@exit_codes
def eval_command(config, scores, predicted_masks, truth_masks, threshold, out):
    """Score predictions (ROC-AUC, PR-AUC, F1) and segmentations (IoU)."""
    if scores is None and predicted_masks is None:
        raise click.UsageError("give --scores and/or --predicted-masks with --truth-masks")
    if (predicted_masks is None) != (truth_masks is None):
        raise click.UsageError("--predicted-masks and --truth-masks go together")
    out = _out_dir(out)
    rows = []
    if scores is not None:
        rows += _score_metrics(scores, threshold)
    if predicted_masks is not None:
        pairs, mask_rows = _mask_metrics(predicted_masks, truth_masks)
        rows += mask_rows
        cohort_io.write_rows(out / "iou.csv", ("case_id", "glomerulus_id", "bow", "tuft"), pairs)
    cohort_io.write_rows(out / "metrics.csv", ("task", "metric", "mean", "std", "n_runs"), rows)

    console = _console()
    table = rich.table.Table(title="Evaluation Metrics")
    for column in ("Task", "Metric", "Mean", "Std", "Runs"):
        table.add_column(column)
    for row in rows:
        table.add_row(row["task"], row["metric"], f"{row['mean']:.4f}", f"{row['std']:.4f}", str(row["n_runs"]))
    console.print(table)


@main.command(name="distill-sim")
@click.option("--out", required=True, type=OUT_DIR)
@click.option("--steps", default=500, type=click.IntRange(1))
@click.option("--entities", "n_entities", default=64, type=click.IntRange(2), help="Number of synthetic glomerulus images.")
@click.option("--batch-size", default=16, type=click.IntRange(1))
@click.option("--lr", default=0.002, type=click.FloatRange(min=0, min_open=True))
@click.option("--tau-s", default=0.1, type=float)
@click.option("--tau-t", default=0.04, type=float)
@click.option("--momentum", default=0.996, type=float)
@click.option("--center-momentum", default=0.9, type=float)
@click.option("--init-spread", default=0.007, type=click.FloatRange(min=0), help="Initial logit spread of the output layer over the entities.")
@click.option("--centering/--no-centering", default=True)
@click.option("--augment/--no-augment", default=True, help="Flips, colour jitter and blur on the views.")
@click.option("--log-every", default=50, type=click.IntRange(0))
@click.pass_obj
@exit_codes
def distill_sim(config, out, steps, n_entities, batch_size, lr, tau_s, tau_t, momentum, center_momentum, init_spread, centering, augment, log_every):
    """Run the student/teacher self-distillation simulator on synthetic entities."""
    out = _out_dir(out)
    views = selfdistill.ViewConfig(flips=augment, jitter=augment, blur=augment)
    cfg = selfdistill.DistillConfig(
        steps=steps,
        batch_size=batch_size,
        lr=lr,
        tau_s=tau_s,
        tau_t=tau_t,
        momentum=momentum,
        center_momentum=center_momentum,
        init_spread=init_spread,
        centering=centering,
        views=views,
        log_every=log_every,
        dump_path=str(out / "nonfinite_state.json"),
    )
    entities, _ = synthetic.entity_images(n_entities, seed=config.seed)
    log, state = selfdistill.train(entities, cfg, config.seed)
    cohort_io.write_rows(
        out / "training_log.csv",
        ("step", "loss", "embedding_std", "teacher_entropy"),
        [dataclasses.asdict(entry) for entry in log],
    )
    final = log[-1]
    summary = {
        "seed": config.seed,
        "config": {key: value for key, value in dataclasses.asdict(cfg).items() if key != "dump_path"},
        "final": dataclasses.asdict(final),
        "center": state.center,
        "collapsed": final.embedding_std < selfdistill.COLLAPSE_STD,
    }
    cohort_io.write_json(out / "summary.json", summary)

    console = _console()
    console.print(
        f"After {final.step} steps: loss {final.loss:.4f}, embedding std {final.embedding_std:.4f}, "
        f"teacher entropy {final.teacher_entropy:.4f}"
    )
    if summary["collapsed"]:
        console.print("[bold red]The teacher outputs have collapsed.[/bold red]")


def _alignment_row(scope, lesion, grid, result):
    return {"scope": scope, "lesion": lesion, "grid": grid, **dataclasses.asdict(result), "stars": assoc_stats.significance_stars(result.p_value)}


@main.command(name="attn-align")
@click.option("--grids", required=True, type=EXISTING_FILE, help=".npy array (n, h, w) or JSON list of grids.")
@click.option("--boxes", required=True, type=EXISTING_FILE, help="JSON list of {grid, lesion, boxes} entries.")
@click.option("--out", required=True, type=OUT_DIR)
@click.pass_obj
@exit_codes
def attn_align(config, grids, boxes, out):
    """Compare attention inside lesion boxes with attention outside them."""
    entries = cohort_io.load_attention(grids, boxes)
    rows = []
    for index, lesion, grid, grid_boxes in entries:
        rows.append(_alignment_row("grid", lesion, index, assoc_stats.attention_alignment(grid, grid_boxes)))
    by_lesion = collections.defaultdict(list)
    for _, lesion, grid, grid_boxes in entries:
        by_lesion[lesion].append((grid, grid_boxes))
    for lesion, pairs in sorted(by_lesion.items()):
        rows.append(_alignment_row("pooled", lesion, "", assoc_stats.pooled_attention_alignment(pairs)))
        rows.append(_alignment_row("entity", lesion, "", assoc_stats.entity_attention_alignment(pairs)))
    columns = ("scope", "lesion", "grid", "mean_in", "mean_out", "d", "p_value", "n_in", "n_out", "stars")
    cohort_io.write_rows(_out_dir(out) / "alignment.csv", columns, rows)

    console = _console()
    table = rich.table.Table(title="Attention Alignment")
    for column in ("Scope", "Lesion", "Mean in", "Mean out", "D", "p", ""):
        table.add_column(column)
    for row in rows:
        if row["scope"] != "grid":
            table.add_row(row["scope"], row["lesion"] or "-", f"{row['mean_in']:.4f}", f"{row['mean_out']:.4f}", f"{row['d']:.4f}", f"{row['p_value']:.2e}", row["stars"])
    console.print(table)


@main.command()
@click.option("--metrics", required=True, type=EXISTING_FILE, help="CSV with one row per paired task.")
@click.option("--column-a", required=True)
@click.option("--column-b", required=True)
@click.option("--out", required=True, type=OUT_DIR)
@click.pass_obj
@exit_codes
def compare(config, metrics, column_a, column_b, out):
    """Paired Wilcoxon signed-rank test between two metric columns."""
    columns = cohort_io.load_columns(metrics, (column_a, column_b))
    a, b = columns[column_a], columns[column_b]
    statistic, p = assoc_stats.wilcoxon_paired(a, b)
    wins = int(np.sum(a > b))
    row = {"a": column_a, "b": column_b, "n": int(a.size), "a_wins": wins, "statistic": statistic, "p": p, "stars": assoc_stats.significance_stars(p)}
    cohort_io.write_rows(_out_dir(out) / "compare.csv", tuple(row), [row])

    console = _console()
    console.print(f"{column_a} beats {column_b} on {wins} of {a.size} ({wins / a.size * 100:.1f}%) paired rows.")
    console.print(f"Wilcoxon W={statistic:.1f}, p={p:.2e} {row['stars']}")


if __name__ == "__main__":
    main()

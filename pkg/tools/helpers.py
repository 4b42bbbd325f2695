"""Utilities common across multiple tools."""

import logging
import pathlib
import zlib

import joblib
import numpy as np
import rich.logging
import rich.table

logger = logging.getLogger(__name__)


class GlomstatError(Exception):
    """Base class for every error raised by the glomstat tools."""


class ValidationError(GlomstatError, ValueError):
    """The input data does not satisfy a precondition (exit code 1)."""


class IoFailure(GlomstatError, OSError):
    """A file could not be read or written (exit code 2)."""


def setup_logging(level: str = "info"):
    """Send log records through rich, the same way for every tool."""
    FORMAT = "%(message)s"
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format=FORMAT,
        datefmt="[%X]",
        handlers=[rich.logging.RichHandler()],
    )


def iter_cases(base: pathlib.Path):
    """Iterate through the case folders contained in the base location, in name order."""
    for case in sorted(pathlib.Path(base).iterdir()):
        if case.name.startswith("."):
            continue
        if not case.is_dir():
            logger.info("Ignoring %s - not a case folder", case)
            continue
        yield case


def derive_seed(master_seed: int, *keys) -> int:
    """Mix a master seed with a cell key into an independent 64-bit seed.

    String keys are reduced with CRC-32 and integer keys are used as they are;
    the mixing itself is numpy's SeedSequence hash, so the same key always
    gives the same seed and distinct keys give unrelated streams.
    """
    entropy = [int(master_seed)]
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode("utf-8")))
        else:
            entropy.append(int(key))
    state = np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)
    return int(state[0])


def parallel_map(func, items, threads: int = 1):
    """Apply func to every item, in order, optionally on a thread pool.

    The result list always follows the input order, so serial and parallel
    runs are interchangeable.
    """
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [func(item) for item in items]
    return joblib.Parallel(n_jobs=threads, prefer="threads")(
        joblib.delayed(func)(item) for item in items
    )


def count_and_percentage_table(title, col0_title, total, counts):
    """Return a rich.table.Table that has a count and percentage columns."""
    table = rich.table.Table(title=title)
    table.add_column(col0_title)
    table.add_column("Count")
    table.add_column("Percentage")
    for label, count in counts:
        pct = count / total * 100 if total else 0.0
        table.add_row(str(label), str(count), f"{pct:.1f}")
    return table

"""
Shared plumbing for per-item stages: the worker pool and failure reporting.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Iterator, Optional, TypeVar

import sentry_sdk
from models.manifest_record import ManifestRecord
from schemas.reports import ItemFailure, StageReport
from utils.codecs import PathLike
from utils.manifest import manifest_append

logger = logging.getLogger("pipeline.stdout")

# bumped when the way a stage derives its artifacts changes
OP_VERSION = 1

I = TypeVar("I")  # noqa: E741
R = TypeVar("R")

Outcome = tuple[I, Optional[R], Optional[Exception]]


def map_items(fn: Callable[[I], R], items: Iterable[I], jobs: int = 1) -> Iterator[Outcome]:
    """
    Applies `fn` to every item and yields (item, result, error) in input order,
    whatever the completion order. Exceptions are captured per item; anything that
    is not an Exception (interrupts) propagates.
    """

    def guarded(item: I) -> Outcome:
        try:
            return item, fn(item), None
        except Exception as e:
            return item, None, e

    if jobs <= 1:
        for item in items:
            yield guarded(item)
        return
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        yield from pool.map(guarded, items)


def record_failure(report: StageReport, item_id: str, error: Exception):
    logger.error(f"Item {item_id} failed: {error}")
    sentry_sdk.capture_exception(error=error)
    report.failures.append(ItemFailure(item=item_id, error=str(error)))


def append_new(manifest_path: PathLike, records: Iterable[ManifestRecord], existing: set[str]):
    """
    Appends the records whose ids are not yet in `existing`, updating it.
    """
    for record in records:
        if record.id in existing:
            continue
        manifest_append(manifest_path, record)
        existing.add(record.id)


def log_summary(stage: str, report: StageReport):
    logger.info(
        f"{stage}: {report.success}/{report.total} succeeded "
        f"({report.skipped} already present, {report.failed} failed)"
    )

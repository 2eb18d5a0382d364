"""
Append-only JSON Lines manifest.

Each line is one ManifestRecord. Writers are serialized per manifest file with a
process-local lock plus an advisory file lock, and every record is written with a
single append so a crash can at most leave one incomplete trailing line. That tail
is reported by validation and cut off by the next append.
"""

import hashlib
import json
import logging
import os
import threading
from collections import Counter
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Optional

from models.manifest_record import ManifestRecord, RecordKind
from pydantic import ValidationError
from schemas.reports import ValidationReport, Violation
from utils.codecs import PathLike, atomic_output, sha256_file
from utils.errors import DuplicateId, IoFailure, ManifestInvalid, MissingFile, ParseFailure

try:
    import fcntl
except ImportError:  # pragma: no cover
    fcntl = None

logger = logging.getLogger("pipeline.stdout")

ARTIFACTS_DIR = "artifacts"

_clock: Callable[[], datetime] = lambda: datetime.now(timezone.utc)  # noqa: E731

_locks_guard = threading.Lock()
_locks: dict[str, threading.Lock] = {}
# manifest path -> (inode, parsed prefix length, last bytes of that prefix, ids in it)
_id_index: dict[str, tuple[int, int, bytes, set[str]]] = {}
_TAIL_BYTES = 64


@contextmanager
def use_clock(clock: Callable[[], datetime]) -> Iterator[None]:
    """
    Temporarily replaces the timestamp source used by make_record.
    """
    global _clock
    previous = _clock
    _clock = clock
    try:
        yield
    finally:
        _clock = previous


def now() -> datetime:
    return _clock()


def content_id(prefix: str, *parts: Any) -> str:
    """
    Deterministic record id from the record's defining inputs.

    Args:
        prefix (str): Short kind prefix, e.g. "img" or "gen".
        *parts: Values identifying the content (digests, backend ids, parameters).

    Returns:
        str: `<prefix>-<first 16 hex chars of sha256>`.
    """
    joined = "|".join(json.dumps(part, sort_keys=True, default=str) for part in parts)
    return f"{prefix}-{hashlib.sha256(joined.encode('utf-8')).hexdigest()[:16]}"


def artifact_dir(manifest_path: PathLike, kind: RecordKind) -> Path:
    return Path(manifest_path).parent / ARTIFACTS_DIR / kind.value


def make_record(
    manifest_path: PathLike,
    record_id: str,
    kind: RecordKind,
    paths: Optional[dict[str, PathLike]] = None,
    params: Optional[dict[str, Any]] = None,
) -> ManifestRecord:
    """
    Builds a record whose paths are relative to the manifest's directory and whose
    digests are computed from the referenced files.
    """
    base = Path(manifest_path).parent
    relative = {}
    digests = {}
    for role, path in (paths or {}).items():
        relative[role] = Path(os.path.relpath(Path(path), base)).as_posix()
        digests[role] = sha256_file(path)
    return ManifestRecord(
        id=record_id,
        kind=kind,
        paths=relative,
        sha256=digests,
        params=params or {},
        created_at=now(),
    )


def resolve_path(manifest_path: PathLike, record: ManifestRecord, role: str) -> Path:
    """
    Absolute location of one of a record's files.

    Raises:
        ManifestInvalid: If the record has no path for the role.
    """
    if role not in record.paths:
        raise ManifestInvalid(f"record {record.id} has no '{role}' path")
    return Path(manifest_path).parent / record.paths[role]


def _parse_line(line: bytes, number: int, path: PathLike) -> ManifestRecord:
    try:
        return ManifestRecord.model_validate_json(line)
    except ValidationError as e:
        raise ParseFailure(
            f"{path}:{number}: not a valid manifest record ({e.error_count()} error(s))"
        ) from e


def _split_complete(data: bytes) -> tuple[list[bytes], bool]:
    """
    Splits file content into complete lines and reports whether an incomplete
    trailing line was present.
    """
    if not data:
        return [], False
    truncated = not data.endswith(b"\n")
    lines = data.split(b"\n")
    # the element after the final newline is either empty or the incomplete tail
    return lines[:-1], truncated


def _read_lines(path: PathLike) -> tuple[list[tuple[int, bytes]], bool]:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise MissingFile(f"no such manifest: {path}") from e
    except OSError as e:
        raise IoFailure(f"cannot read manifest {path}: {e}") from e
    lines, truncated = _split_complete(data)
    numbered = [(index + 1, line) for index, line in enumerate(lines) if line.strip()]
    return numbered, truncated


def read_manifest(path: PathLike, missing_ok: bool = False) -> list[ManifestRecord]:
    """
    Reads every complete record in append order. An incomplete trailing line is
    ignored.

    Raises:
        MissingFile: If the manifest does not exist and missing_ok is not set.
        ParseFailure: If a complete line is not a valid record.
    """
    if missing_ok and not Path(path).exists():
        return []
    lines, _ = _read_lines(path)
    return [_parse_line(line, number, path) for number, line in lines]


def manifest_ids(path: PathLike) -> set[str]:
    return {record.id for record in read_manifest(path, missing_ok=True)}


def records_of_kind(records: Iterable[ManifestRecord], kind: RecordKind) -> list[ManifestRecord]:
    return [record for record in records if record.kind == kind]


def canonical_json(record: ManifestRecord) -> str:
    """
    Sorted-key JSON of a record without its timestamp.
    """
    payload = record.model_dump(mode="json", exclude={"created_at"})
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def manifest_digest(path: PathLike) -> str:
    """
    sha256 over the canonical form of every record. Timestamps are excluded, so two
    runs producing the same artifacts in the same order have equal digests.
    """
    digest = hashlib.sha256()
    for record in read_manifest(path):
        digest.update(canonical_json(record).encode("utf-8"))
        digest.update(b"\n")
    return digest.hexdigest()


def _process_lock(key: str) -> threading.Lock:
    with _locks_guard:
        return _locks.setdefault(key, threading.Lock())


@contextmanager
def _locked(handle):
    if fcntl is not None:
        fcntl.flock(handle.fileno(), fcntl.LOCK_EX)
    try:
        yield
    finally:
        if fcntl is not None:
            fcntl.flock(handle.fileno(), fcntl.LOCK_UN)


def _known_ids(handle, key: str, path: Path) -> set[str]:
    """
    Ids currently in the manifest. Only bytes appended since the last call are
    parsed; an incomplete tail is truncated away first. Must hold the write lock.
    """
    stat = os.fstat(handle.fileno())
    inode, offset, tail, ids = _id_index.get(key, (stat.st_ino, 0, b"", set()))
    if inode != stat.st_ino or stat.st_size < offset or _tail_at(handle, offset) != tail:
        offset, ids = 0, set()
    handle.seek(offset)
    data = handle.read()
    lines, truncated = _split_complete(data)
    if truncated:
        complete = offset + data.rfind(b"\n") + 1
        logger.warning(
            f"Dropping incomplete trailing line of {path} ({stat.st_size - complete} bytes)"
        )
        handle.truncate(complete)
    ids = set(ids)
    for index, line in enumerate(lines):
        if line.strip():
            ids.add(_parse_line(line, index + 1, path).id)
    consumed = offset + sum(len(line) + 1 for line in lines)
    _id_index[key] = (stat.st_ino, consumed, _tail_at(handle, consumed), ids)
    return ids


def _tail_at(handle, offset: int) -> bytes:
    start = max(0, offset - _TAIL_BYTES)
    handle.seek(start)
    return handle.read(offset - start)


def manifest_append(path: PathLike, record: ManifestRecord):
    """
    Appends one record as a single JSON line.

    Raises:
        DuplicateId: If a record with the same id is already present.
        IoFailure: If the manifest cannot be written.
    """
    target = Path(path)
    line = record.model_dump_json().encode("utf-8") + b"\n"
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        key = str(target.resolve())
        with _process_lock(key), open(target, "a+b") as handle, _locked(handle):
            ids = _known_ids(handle, key, target)
            if record.id in ids:
                raise DuplicateId(f"record id {record.id} already present in {target}")
            handle.seek(0, os.SEEK_END)
            handle.write(line)
            handle.flush()
            offset = _id_index[key][1] + len(line)
            ids.add(record.id)
            _id_index[key] = (_id_index[key][0], offset, _tail_at(handle, offset), ids)
    except OSError as e:
        raise IoFailure(f"cannot append to manifest {target}: {e}") from e


def manifest_reorder(path: PathLike, ordered_ids: list[str]) -> bool:
    """
    Puts the records named in `ordered_ids` into that order within the line slots
    they already occupy. Other records keep their positions. The file is replaced
    atomically under the write lock, and only when the order changes. An incomplete
    trailing line is dropped.

    Returns:
        bool: Whether the manifest was rewritten.

    Raises:
        MissingFile: If the manifest does not exist.
        IoFailure: If the manifest cannot be read or replaced.
    """
    target = Path(path)
    rank = {record_id: index for index, record_id in enumerate(ordered_ids)}
    key = str(target.resolve())
    try:
        with _process_lock(key), open(target, "rb") as handle, _locked(handle):
            lines, _ = _split_complete(handle.read())
            numbered = [(index + 1, line) for index, line in enumerate(lines) if line.strip()]
            ids = [_parse_line(line, number, target).id for number, line in numbered]
            slots = [index for index, record_id in enumerate(ids) if record_id in rank]
            ordered = sorted(slots, key=lambda index: rank[ids[index]])
            if slots == ordered:
                return False
            rewritten = [line for _, line in numbered]
            for slot, index in zip(slots, ordered):
                rewritten[slot] = numbered[index][1]
            with atomic_output(target, "wb") as out:
                out.write(b"".join(line + b"\n" for line in rewritten))
            _id_index.pop(key, None)
    except FileNotFoundError as e:
        raise MissingFile(f"no such manifest: {target}") from e
    except OSError as e:
        raise IoFailure(f"cannot rewrite manifest {target}: {e}") from e
    logger.info(f"Restored the canonical order of {len(slots)} records in {target}")
    return True


def manifest_validate(path: PathLike) -> ValidationReport:
    """
    Checks a manifest for duplicate ids, dangling paths and digest mismatches.

    Returns:
        ValidationReport: Counts per kind and the list of violations.

    Raises:
        MissingFile: If the manifest does not exist.
        ParseFailure: If a complete line is not a valid record.
    """
    lines, truncated = _read_lines(path)
    records = [_parse_line(line, number, path) for number, line in lines]
    violations = []
    seen = set()
    for record in records:
        if record.id in seen:
            violations.append(Violation(kind="duplicate_id", record_id=record.id))
        seen.add(record.id)
        for role in record.paths:
            location = resolve_path(path, record, role)
            if not location.is_file():
                violations.append(
                    Violation(
                        kind="dangling_path",
                        record_id=record.id,
                        role=role,
                        detail=str(location),
                    )
                )
                continue
            expected = record.sha256.get(role)
            if expected is not None and sha256_file(location) != expected:
                violations.append(
                    Violation(
                        kind="digest_mismatch",
                        record_id=record.id,
                        role=role,
                        detail=str(location),
                    )
                )
    counts = Counter(record.kind.value for record in records)
    if truncated:
        logger.warning(f"{path} ends with an incomplete line")
    return ValidationReport(
        records=len(records),
        counts=dict(sorted(counts.items())),
        violations=violations,
        truncated_tail=truncated,
    )


def require_valid(path: PathLike) -> list[ManifestRecord]:
    """
    Validates a manifest and returns its records.

    Raises:
        ManifestInvalid: If validation reports any violation.
    """
    report = manifest_validate(path)
    if not report.ok:
        first = report.violations[0]
        raise ManifestInvalid(
            f"{path} has {len(report.violations)} violation(s), first: "
            f"{first.kind} in record {first.record_id}"
        )
    return read_manifest(path)

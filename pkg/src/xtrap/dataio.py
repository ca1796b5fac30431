"""Core domain types and readers/writers for all on-disk formats.

Formats handled here:

- queries:      ``id<TAB>text``, one record per line, UTF-8
- qrels:        ``qid 0 docid rel``, whitespace separated (the second
                field is historical and ignored)
- run files:    ``qid Q0 docid rank score tag`` in TREC format; the rank
                field is re-derived from scores, never trusted
- embeddings:   either a bespoke binary format (magic ``EVEC``, see
                :func:`read_embeddings`) or ``id<TAB>v1 v2 ... vdim`` TSV

All readers accept LF and CRLF line endings; writers emit LF only. Every
parsed container is immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import logging
import math
import re
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"EVEC"
EMBEDDING_VERSION = 1

# ids are serialized into whitespace-delimited text formats, so they must
# be non-empty and free of whitespace
_WS = re.compile(r"\s")


def _bad_id(value: str) -> bool:
    return not value or _WS.search(value) is not None


class ParseError(ValueError):
    """A file could not be parsed; carries the path and location."""

    def __init__(self, path, message: str, line: int | None = None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


class DataError(ValueError):
    """Inputs parsed fine but violate a semantic contract."""


def _iter_lines(path) -> Iterator[tuple[int, str]]:
    """Yield (1-based line number, line) with terminators removed.

    Blank lines are skipped; invalid UTF-8 raises ParseError.
    """
    with open(path, "rb") as f:
        for lineno, raw in enumerate(f, start=1):
            if raw.endswith(b"\n"):
                raw = raw[:-1]
            if raw.endswith(b"\r"):
                raw = raw[:-1]
            if not raw:
                continue
            try:
                yield lineno, raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise ParseError(path, f"invalid UTF-8: {e}", lineno) from e


@dataclass(frozen=True)
class Query:
    """One query: a whitespace-free id plus its raw text."""

    id: str
    text: str


class QuerySet:
    """Ordered collection of queries with unique ids; order equals file order."""

    def __init__(self, queries: Iterable[Query]):
        self._queries = tuple(queries)
        index: dict[str, int] = {}
        for pos, q in enumerate(self._queries):
            if _bad_id(q.id):
                raise DataError(f"query id must be a non-empty token, got {q.id!r}")
            if q.id in index:
                raise DataError(f"duplicate query id {q.id}")
            index[q.id] = pos
        self._index = index

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(q.id for q in self._queries)

    def text(self, query_id: str) -> str:
        return self._queries[self._index[query_id]].text

    def __contains__(self, query_id: str) -> bool:
        return query_id in self._index

    def __iter__(self) -> Iterator[Query]:
        return iter(self._queries)

    def __len__(self) -> int:
        return len(self._queries)

    def __eq__(self, other) -> bool:
        return isinstance(other, QuerySet) and self._queries == other._queries


class QrelSet:
    """Graded relevance judgments keyed by (query id, doc id).

    At most one grade per pair; when built from records the last one wins
    and the overwrite is counted in :attr:`overwrites`.
    """

    def __init__(self, grades: Mapping[str, Mapping[str, int]], overwrites: int = 0):
        store: dict[str, dict[str, int]] = {}
        for qid, docs in grades.items():
            for docid, rel in docs.items():
                if rel < 0:
                    raise DataError(f"negative relevance grade for ({qid}, {docid})")
            store[qid] = dict(docs)
        self._grades = store
        self.overwrites = overwrites

    @classmethod
    def from_records(cls, records: Iterable[tuple[str, str, int]]) -> "QrelSet":
        grades: dict[str, dict[str, int]] = {}
        overwrites = 0
        for qid, docid, rel in records:
            per_query = grades.setdefault(qid, {})
            if docid in per_query:
                overwrites += 1
            per_query[docid] = rel
        return cls(grades, overwrites=overwrites)

    def query_ids(self) -> tuple[str, ...]:
        return tuple(self._grades)

    def docs(self, query_id: str) -> Mapping[str, int]:
        """Per-query view: doc id -> grade (empty if the query is unknown)."""
        return dict(self._grades.get(query_id, {}))

    def pairs(self) -> Iterator[tuple[str, str, int]]:
        """Iterate all (query id, doc id, grade) triples without copying."""
        for qid, docs in self._grades.items():
            for docid, rel in docs.items():
                yield qid, docid, rel

    def grade(self, query_id: str, doc_id: str, default: int = 0) -> int:
        return self._grades.get(query_id, {}).get(doc_id, default)

    def has_query(self, query_id: str) -> bool:
        return query_id in self._grades

    def relevant_count(self, query_id: str, threshold: int = 1) -> int:
        return sum(1 for rel in self._grades.get(query_id, {}).values() if rel >= threshold)

    def __len__(self) -> int:
        return sum(len(d) for d in self._grades.values())

    def __eq__(self, other) -> bool:
        return isinstance(other, QrelSet) and self._grades == other._grades


class RunSet:
    """Ranked retrieval results per query.

    Rankings are canonicalized at construction: sorted by descending score,
    ties broken by ascending doc id, independent of input order.
    """

    def __init__(self, rankings: Mapping[str, Sequence[tuple[str, float]]], tag: str | None = None):
        store: dict[str, tuple[tuple[str, float], ...]] = {}
        for qid, entries in rankings.items():
            seen: set[str] = set()
            for docid, score in entries:
                if docid in seen:
                    raise DataError(f"duplicate doc {docid} for query {qid}")
                if not math.isfinite(score):
                    raise DataError(f"non-finite score for ({qid}, {docid})")
                seen.add(docid)
            store[qid] = tuple(sorted(entries, key=lambda e: (-e[1], e[0])))
        self._rankings = store
        self.tag = tag

    def query_ids(self) -> tuple[str, ...]:
        return tuple(self._rankings)

    def ranking(self, query_id: str) -> tuple[tuple[str, float], ...]:
        return self._rankings.get(query_id, ())

    def __contains__(self, query_id: str) -> bool:
        return query_id in self._rankings

    def __len__(self) -> int:
        return len(self._rankings)

    def __eq__(self, other) -> bool:
        return isinstance(other, RunSet) and self._rankings == other._rankings


class EmbeddingSet:
    """Fixed-dimension float32 vector per id, stored as one (n, dim) matrix.

    Takes ownership of `matrix` when no dtype conversion is needed: the
    array is frozen in place, so callers must not rely on mutating it.
    """

    def __init__(self, ids: Sequence[str], matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=np.float32)
        if matrix.ndim != 2:
            raise DataError("embedding matrix must be 2-dimensional")
        if matrix.shape[1] < 1:
            raise DataError("embedding dim must be positive")
        if matrix.shape[0] != len(ids):
            raise DataError(f"{len(ids)} ids but {matrix.shape[0]} vectors")
        if not np.all(np.isfinite(matrix)):
            bad = int(np.argwhere(~np.isfinite(matrix).all(axis=1))[0][0])
            raise DataError(f"non-finite component in vector for id {ids[bad]}")
        index: dict[str, int] = {}
        for pos, eid in enumerate(ids):
            if _bad_id(eid):
                raise DataError(f"embedding id must be a non-empty token, got {eid!r}")
            if eid in index:
                raise DataError(f"duplicate embedding id {eid}")
            index[eid] = pos
        self._ids = tuple(ids)
        self._index = index
        if matrix.flags.writeable:
            matrix.setflags(write=False)
        self._matrix = matrix

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    @property
    def dim(self) -> int:
        return int(self._matrix.shape[1])

    def vector(self, eid: str) -> np.ndarray:
        return self._matrix[self._index[eid]]

    def position(self, eid: str) -> int:
        return self._index[eid]

    def __contains__(self, eid: str) -> bool:
        return eid in self._index

    def __len__(self) -> int:
        return len(self._ids)

    def subset(self, ids: Sequence[str]) -> "EmbeddingSet":
        """Project onto `ids` in the given order; unknown ids are an error."""
        positions = []
        for eid in ids:
            if eid not in self._index:
                raise DataError(f"no embedding for id {eid}")
            positions.append(self._index[eid])
        return EmbeddingSet(list(ids), self._matrix[positions])

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EmbeddingSet)
            and self._ids == other._ids
            and self._matrix.shape == other._matrix.shape
            and bool(np.array_equal(self._matrix, other._matrix))
        )


def parse_queries(path) -> QuerySet:
    """Read ``id<TAB>text`` records, preserving file order."""
    queries: list[Query] = []
    first_line: dict[str, int] = {}
    for lineno, line in _iter_lines(path):
        if "\t" not in line:
            raise ParseError(path, "expected 'id<TAB>text'", lineno)
        qid, text = line.split("\t", 1)
        if not qid or any(ch.isspace() for ch in qid):
            raise ParseError(path, f"query id must be a non-empty token, got {qid!r}", lineno)
        if qid in first_line:
            raise ParseError(
                path, f"duplicate id {qid} (first seen at line {first_line[qid]})", lineno
            )
        first_line[qid] = lineno
        queries.append(Query(qid, text))
    return QuerySet(queries)


def write_queries(queries: QuerySet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for q in queries:
            f.write(f"{q.id}\t{q.text}\n")


def parse_qrels(path) -> QrelSet:
    """Read ``qid 0 docid rel`` records; later duplicates overwrite with a warning."""
    records: list[tuple[str, str, int]] = []
    oversized = 0
    for lineno, line in _iter_lines(path):
        fields = line.split()
        if len(fields) != 4:
            raise ParseError(path, f"expected 'qid 0 docid rel' (4 fields), got {len(fields)}", lineno)
        qid, _, docid, rel_s = fields
        try:
            rel = int(rel_s)
        except ValueError:
            raise ParseError(path, f"relevance grade must be an integer, got {rel_s!r}", lineno) from None
        if rel < 0:
            raise ParseError(path, f"negative relevance grade {rel}", lineno)
        if rel > 3:
            oversized += 1
        records.append((qid, docid, rel))
    qrels = QrelSet.from_records(records)
    if qrels.overwrites:
        logger.warning("%s: %d duplicate (query, doc) pairs; later records win", path, qrels.overwrites)
    if oversized:
        logger.warning("%s: %d grades exceed 3 (expected 0-3 TREC DL or 0/1 MS MARCO style)", path, oversized)
    return qrels


def write_qrels(qrels: QrelSet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for qid in qrels.query_ids():
            for docid, rel in qrels.docs(qid).items():
                if _bad_id(qid) or _bad_id(docid):
                    raise DataError(f"cannot serialize ({qid!r}, {docid!r}): ids must be whitespace-free tokens")
                f.write(f"{qid} 0 {docid} {rel}\n")


def parse_run(path) -> RunSet:
    """Read a TREC run file; ranking order is re-derived from the scores."""
    rankings: dict[str, list[tuple[str, float]]] = {}
    file_order: dict[str, list[tuple[int, float]]] = {}
    seen: set[tuple[str, str]] = set()
    tag: str | None = None
    for lineno, line in _iter_lines(path):
        fields = line.split()
        if len(fields) != 6:
            raise ParseError(
                path, f"expected 'qid Q0 docid rank score tag' (6 fields), got {len(fields)}", lineno
            )
        qid, _, docid, rank_s, score_s, line_tag = fields
        try:
            rank = int(rank_s)
        except ValueError:
            raise ParseError(path, f"rank must be an integer, got {rank_s!r}", lineno) from None
        try:
            score = float(score_s)
        except ValueError:
            raise ParseError(path, f"score must be a number, got {score_s!r}", lineno) from None
        if not math.isfinite(score):
            raise ParseError(path, f"non-finite score {score_s}", lineno)
        if (qid, docid) in seen:
            raise ParseError(path, f"duplicate (query, doc) pair ({qid}, {docid})", lineno)
        seen.add((qid, docid))
        if tag is None:
            tag = line_tag
        rankings.setdefault(qid, []).append((docid, score))
        file_order.setdefault(qid, []).append((rank, score))
    contradictions = 0
    for qid, entries in file_order.items():
        by_rank = sorted(range(len(entries)), key=lambda i: entries[i][0])
        scores = [entries[i][1] for i in by_rank]
        if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
            contradictions += 1
    if contradictions:
        logger.warning(
            "%s: rank field contradicts score order for %d queries; ranks re-derived from scores",
            path,
            contradictions,
        )
    return RunSet(rankings, tag=tag)


def write_run(run: RunSet, path, tag: str | None = None) -> None:
    """Write in TREC format with re-derived 1-based ranks; scores use repr (lossless)."""
    tag = tag or run.tag or "xtrap"
    if _bad_id(tag):
        raise DataError(f"run tag must be a whitespace-free token, got {tag!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for qid in run.query_ids():
            for rank, (docid, score) in enumerate(run.ranking(qid), start=1):
                if _bad_id(qid) or _bad_id(docid):
                    raise DataError(f"cannot serialize ({qid!r}, {docid!r}): ids must be whitespace-free tokens")
                f.write(f"{qid} Q0 {docid} {rank} {score!r} {tag}\n")


def _binary_error(path, offset: int, message: str) -> ParseError:
    return ParseError(path, f"offset {offset}: {message}")


def read_embeddings(path, format: str = "binary") -> EmbeddingSet:
    """Read embeddings in the given format ('binary' or 'tsv').

    Binary layout, little-endian throughout: magic ``EVEC``, u32 version=1,
    u64 count, u32 dim, then per record a u16 id byte length, the UTF-8 id,
    and dim float32 components.
    """
    if format == "binary":
        return _read_embeddings_binary(path)
    if format == "tsv":
        return _read_embeddings_tsv(path)
    raise ValueError(f"unknown embedding format {format!r}")


def _read_embeddings_binary(path) -> EmbeddingSet:
    with open(path, "rb") as f:
        data = f.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise _binary_error(path, off, f"truncated file while reading {what}")
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != EMBEDDING_MAGIC:
        raise _binary_error(path, 0, "bad magic, not an EVEC file")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != EMBEDDING_VERSION:
        raise _binary_error(path, 4, f"unsupported version {version}")
    (count,) = struct.unpack("<Q", take(8, "count"))
    (dim,) = struct.unpack("<I", take(4, "dim"))
    if dim < 1:
        raise _binary_error(path, 16, "dim must be positive")
    ids: list[str] = []
    matrix = np.empty((count, dim), dtype=np.float32)
    vec_bytes = 4 * dim
    for i in range(count):
        (id_len,) = struct.unpack("<H", take(2, f"id length of record {i}"))
        try:
            eid = take(id_len, f"id of record {i}").decode("utf-8")
        except UnicodeDecodeError as e:
            raise _binary_error(path, off, f"record {i}: id is not valid UTF-8: {e}") from e
        if _bad_id(eid):
            raise _binary_error(path, off, f"record {i}: id must be a non-empty whitespace-free token")
        raw = take(vec_bytes, f"vector of record {i}")
        matrix[i] = np.frombuffer(raw, dtype="<f4")
        ids.append(eid)
    if off != len(data):
        raise _binary_error(path, off, f"{len(data) - off} trailing bytes after {count} records")
    if count and not np.all(np.isfinite(matrix)):
        bad = int(np.argwhere(~np.isfinite(matrix).all(axis=1))[0][0])
        raise _binary_error(path, 0, f"non-finite component in vector for id {ids[bad]}")
    seen: dict[str, int] = {}
    for i, eid in enumerate(ids):
        if eid in seen:
            raise _binary_error(path, 0, f"duplicate id {eid} (records {seen[eid]} and {i})")
        seen[eid] = i
    return EmbeddingSet(ids, matrix)


def _read_embeddings_tsv(path) -> EmbeddingSet:
    ids: list[str] = []
    seen: set[str] = set()
    rows: list[np.ndarray] = []
    dim: int | None = None
    for lineno, line in _iter_lines(path):
        if "\t" not in line:
            raise ParseError(path, "expected 'id<TAB>v1 v2 ...'", lineno)
        eid, rest = line.split("\t", 1)
        if _bad_id(eid):
            raise ParseError(path, f"embedding id must be a non-empty token, got {eid!r}", lineno)
        parts = rest.split()
        if not parts:
            raise ParseError(path, "empty vector", lineno)
        try:
            values = [float(p) for p in parts]
        except ValueError:
            raise ParseError(path, "vector components must be decimal floats", lineno) from None
        if any(not math.isfinite(v) for v in values):
            raise ParseError(path, f"non-finite component in vector for id {eid}", lineno)
        if dim is None:
            dim = len(values)
        elif len(values) != dim:
            raise ParseError(path, f"expected {dim} components, got {len(values)}", lineno)
        if eid in seen:
            raise ParseError(path, f"duplicate id {eid}", lineno)
        seen.add(eid)
        ids.append(eid)
        rows.append(np.asarray(values, dtype=np.float32))
    if dim is None:
        raise ParseError(path, "no embedding records found")
    return EmbeddingSet(ids, np.vstack(rows))


def write_embeddings(embeddings: EmbeddingSet, path, format: str = "binary") -> None:
    if format == "binary":
        _write_embeddings_binary(embeddings, path)
    elif format == "tsv":
        _write_embeddings_tsv(embeddings, path)
    else:
        raise ValueError(f"unknown embedding format {format!r}")


def _write_embeddings_binary(embeddings: EmbeddingSet, path) -> None:
    matrix = np.ascontiguousarray(embeddings.matrix, dtype="<f4")
    with open(path, "wb") as f:
        f.write(EMBEDDING_MAGIC)
        f.write(struct.pack("<IQI", EMBEDDING_VERSION, len(embeddings), embeddings.dim))
        for i, eid in enumerate(embeddings.ids):
            id_bytes = eid.encode("utf-8")
            if len(id_bytes) > 0xFFFF:
                raise DataError(f"id {eid[:32]!r}... exceeds 65535 UTF-8 bytes")
            f.write(struct.pack("<H", len(id_bytes)))
            f.write(id_bytes)
            f.write(matrix[i].tobytes())


def _write_embeddings_tsv(embeddings: EmbeddingSet, path) -> None:
    # %.9g is lossless for float32 round-trips
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for i, eid in enumerate(embeddings.ids):
            comps = " ".join("%.9g" % v for v in embeddings.matrix[i])
            f.write(f"{eid}\t{comps}\n")


def sniff_embedding_format(path) -> str:
    """Guess 'binary' vs 'tsv' from the EVEC magic bytes."""
    with open(path, "rb") as f:
        head = f.read(4)
    return "binary" if head == EMBEDDING_MAGIC else "tsv"

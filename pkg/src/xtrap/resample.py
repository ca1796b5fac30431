"""Dataset resampling for interpolation/extrapolation evaluation.

Two strategies are provided. The first keeps the original test set and
rebuilds the training set from query-similarity neighborhoods: the
interpolation variant unions the nearest training queries of every test
query (round-robin over neighbor ranks, deduplicated, truncated to the
requested size); the extrapolation variant removes every test query's
nearest training queries and samples the remainder. The second strategy
clusters training and test queries together with k-means and evaluates
leave-one-bucket-out: models train on k-1 buckets, the held-out bucket's
test queries score extrapolation, the rest score interpolation, and each
test query is therefore scored k-1 times for interpolation.

All randomness flows through numpy's PCG64 generator seeded from the
config, and the algorithm identifier is recorded in the split manifest,
so identical configs reproduce identical splits on any platform.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataio import DataError, EmbeddingSet, ParseError, QrelSet, QuerySet, RunSet
from .metrics import MetricSpec, score_run
from .simindex import MEASURES, knn

logger = logging.getLogger(__name__)

RNG_ALGORITHM = "pcg64"

# row chunk for distance computations; bounds float64 temporaries
_CHUNK_ELEMENTS = 16 * 1024 * 1024


@dataclass(frozen=True)
class KMeansConfig:
    k: int = 5
    seed: int = 42
    max_iters: int = 100
    tol: float = 1e-4
    normalize: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")


@dataclass(frozen=True)
class ReSTrainConfig:
    """Neighborhood depths, output size, and seed for training-set resampling."""

    target_size: int
    include_depth: int = 1
    exclude_depth: int = 1
    seed: int = 42
    measure: str = "inner_product"

    def __post_init__(self):
        if self.target_size < 1:
            raise ValueError("target_size must be >= 1")
        if self.include_depth < 1 or self.exclude_depth < 1:
            raise ValueError("neighborhood depths must be >= 1")
        if self.measure not in MEASURES:
            raise ValueError(f"unknown similarity measure {self.measure!r}")

    def provenance(self) -> dict[str, str]:
        return {
            "seed": str(self.seed),
            "include_depth": str(self.include_depth),
            "exclude_depth": str(self.exclude_depth),
            "target_size": str(self.target_size),
            "measure": self.measure,
            "rng": RNG_ALGORITHM,
        }


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray
    assignment: dict[str, int]
    inertia: float
    history: tuple[float, ...]
    iterations: int


@dataclass(frozen=True)
class SplitSpec:
    """Which ids train and which test, for one resampled dataset."""

    regime: str
    training_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    provenance: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.regime not in ("interpolation", "extrapolation"):
            raise DataError(f"unknown regime {self.regime!r}")
        if len(set(self.training_ids)) != len(self.training_ids):
            raise DataError("duplicate ids in training_ids")
        if len(set(self.test_ids)) != len(self.test_ids):
            raise DataError("duplicate ids in test_ids")
        overlap = set(self.training_ids) & set(self.test_ids)
        if overlap:
            raise DataError(f"training and test ids overlap: {sorted(overlap)[:5]}")


@dataclass(frozen=True)
class FoldSpec:
    """Leave-one-bucket-out folds over a k-means bucketing.

    `buckets[i]` lists the ids assigned to bucket i, training queries
    first, each group in its original order. Fold f trains on the
    training queries outside bucket f, extrapolates on the test queries
    inside it, and interpolates on the test queries outside it.
    """

    k: int
    buckets: tuple[tuple[str, ...], ...]
    train_ids: tuple[str, ...]
    provenance: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.k < 2:
            raise DataError("k must be >= 2: a single bucket leaves no training data")
        if len(self.buckets) != self.k:
            raise DataError(f"expected {self.k} buckets, got {len(self.buckets)}")
        all_ids = [i for bucket in self.buckets for i in bucket]
        if len(set(all_ids)) != len(all_ids):
            raise DataError("buckets must partition the queries; found a duplicate id")
        missing = set(self.train_ids) - set(all_ids)
        if missing:
            raise DataError(f"training ids missing from buckets: {sorted(missing)[:5]}")

    @property
    def bucket_of(self) -> dict[str, int]:
        return {i: b for b, bucket in enumerate(self.buckets) for i in bucket}

    @property
    def test_ids(self) -> tuple[str, ...]:
        train = set(self.train_ids)
        return tuple(i for bucket in self.buckets for i in bucket if i not in train)

    def fold_training_ids(self, fold: int) -> tuple[str, ...]:
        train = set(self.train_ids)
        return tuple(
            i for b, bucket in enumerate(self.buckets) if b != fold for i in bucket if i in train
        )

    def fold_extrapolation_test_ids(self, fold: int) -> tuple[str, ...]:
        train = set(self.train_ids)
        return tuple(i for i in self.buckets[fold] if i not in train)

    def fold_interpolation_test_ids(self, fold: int) -> tuple[str, ...]:
        train = set(self.train_ids)
        return tuple(
            i for b, bucket in enumerate(self.buckets) if b != fold for i in bucket if i not in train
        )


def _chunked_rows(n: int, dim: int) -> int:
    return max(1, _CHUNK_ELEMENTS // max(1, dim))


def _sq_distances(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances, float64, chunked over rows."""
    n, dim = X.shape
    k = centroids.shape[0]
    out = np.empty((n, k), dtype=np.float64)
    step = _chunked_rows(n, dim)
    for lo in range(0, n, step):
        chunk = X[lo : lo + step].astype(np.float64)
        for j in range(k):
            diff = chunk - centroids[j]
            out[lo : lo + step, j] = np.einsum("ij,ij->i", diff, diff)
    return out


def _kmeanspp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seed centroids with the k-means++ scheme (D^2 sampling)."""
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_distances(X, X[chosen[-1]][None].astype(np.float64))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # all points coincide with a chosen center; pick any unused point
            unused = sorted(set(range(n)) - set(chosen))
            idx = unused[int(rng.integers(len(unused)))]
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_distances(X, X[idx][None].astype(np.float64))[:, 0])
    return X[chosen].astype(np.float64)


def _update_centroids(
    X: np.ndarray, assignment: np.ndarray, k: int, d2min: np.ndarray, old: np.ndarray
) -> np.ndarray:
    """Cluster means; empty clusters seize the point farthest from its centroid."""
    dim = X.shape[1]
    centroids = np.empty((k, dim), dtype=np.float64)
    counts = np.bincount(assignment, minlength=k)
    for j in range(k):
        if counts[j]:
            members = np.flatnonzero(assignment == j)
            centroids[j] = X[members].sum(axis=0, dtype=np.float64) / counts[j]
        else:
            centroids[j] = old[j]
    if (counts == 0).any():
        stealable = d2min.copy()
        for j in np.flatnonzero(counts == 0):
            victim = int(np.argmax(stealable))
            centroids[j] = X[victim].astype(np.float64)
            stealable[victim] = -1.0
    return centroids


def kmeans(points: EmbeddingSet, cfg: KMeansConfig) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding and a deterministic PRNG.

    Stops on an assignment fixpoint, when no centroid moves more than
    `tol` (L2), or after `max_iters`. The recorded inertia history is
    checked to be non-increasing every iteration.
    """
    n = len(points)
    if cfg.k > n:
        raise DataError(f"k={cfg.k} exceeds the number of points ({n})")
    X = points.matrix
    if cfg.normalize:
        norms = np.sqrt(np.einsum("ij,ij->i", X, X, dtype=np.float64))
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise DataError(f"cannot normalize zero vector for id {points.ids[zero[0]]}")
        X = (X.astype(np.float64) / norms[:, None]).astype(np.float32)

    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    centroids = _kmeanspp_init(X, cfg.k, rng)
    d2 = _sq_distances(X, centroids)
    assignment = np.argmin(d2, axis=1)
    d2min = d2[np.arange(n), assignment]
    history = [float(d2min.sum())]

    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        new_centroids = _update_centroids(X, assignment, cfg.k, d2min, centroids)
        d2 = _sq_distances(X, new_centroids)
        new_assignment = np.argmin(d2, axis=1)
        d2min = d2[np.arange(n), new_assignment]
        inertia = float(d2min.sum())
        if inertia > history[-1] * (1.0 + 1e-12) + 1e-12:
            raise RuntimeError(
                f"k-means inertia increased at iteration {iterations}: "
                f"{history[-1]!r} -> {inertia!r}"
            )
        history.append(inertia)
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        if shift < cfg.tol:
            break

    mapping = {points.ids[i]: int(assignment[i]) for i in range(n)}
    return KMeansResult(
        centroids=centroids,
        assignment=mapping,
        inertia=history[-1],
        history=tuple(history),
        iterations=iterations,
    )


def _round_robin_union(neighbor_lists) -> list[str]:
    """Dedup neighbors column by column: rank 1 of every test query, then rank 2, ..."""
    seq: list[str] = []
    seen: set[str] = set()
    depth = max((len(nl.neighbors) for nl in neighbor_lists), default=0)
    for rank in range(depth):
        for nl in neighbor_lists:
            if rank < len(nl.neighbors):
                nid = nl.neighbors[rank][0]
                if nid not in seen:
                    seen.add(nid)
                    seq.append(nid)
    return seq


def restrain_interpolation(
    train: QuerySet,
    test: QuerySet,
    train_emb: EmbeddingSet,
    test_emb: EmbeddingSet,
    cfg: ReSTrainConfig,
    threads: int = 1,
) -> SplitSpec:
    """Training set = nearest training queries of the test set, exactly target_size.

    Per-test neighbor lists are merged in round-robin rank order and
    deduplicated; the list is deepened as needed, so for a fixed config a
    smaller target yields a prefix of a larger one.
    """
    if len(test) == 0:
        raise DataError("test set is empty")
    n_train = len(train)
    if cfg.target_size > n_train:
        raise DataError(
            f"target_size {cfg.target_size} exceeds the {n_train} available training queries"
        )
    tr = train_emb.subset(train.ids)
    te = test_emb.subset(test.ids)
    depth = min(n_train, max(cfg.include_depth, math.ceil(cfg.target_size / len(test))))
    while True:
        lists = knn(te, tr, depth, measure=cfg.measure, threads=threads)
        seq = _round_robin_union(lists)
        if len(seq) >= cfg.target_size:
            break
        if depth >= n_train:
            raise DataError(
                f"only {len(seq)} training queries reachable; need {cfg.target_size}"
            )
        depth = min(n_train, depth * 2)
    return SplitSpec(
        regime="interpolation",
        training_ids=tuple(seq[: cfg.target_size]),
        test_ids=test.ids,
        provenance=cfg.provenance(),
    )


def restrain_extrapolation(
    train: QuerySet,
    test: QuerySet,
    train_emb: EmbeddingSet,
    test_emb: EmbeddingSet,
    cfg: ReSTrainConfig,
    threads: int = 1,
) -> SplitSpec:
    """Training set sampled from queries outside every test query's neighborhood."""
    if len(test) == 0:
        raise DataError("test set is empty")
    tr = train_emb.subset(train.ids)
    te = test_emb.subset(test.ids)
    depth = min(cfg.exclude_depth, len(train))
    lists = knn(te, tr, depth, measure=cfg.measure, threads=threads)
    excluded = {nid for nl in lists for nid, _ in nl.neighbors}
    remaining = [qid for qid in train.ids if qid not in excluded]
    if len(remaining) < cfg.target_size:
        raise DataError(
            f"excluding top-{cfg.exclude_depth} neighborhoods leaves {len(remaining)} "
            f"training queries; max feasible target_size is {len(remaining)}"
        )
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    picks = rng.choice(len(remaining), size=cfg.target_size, replace=False)
    return SplitSpec(
        regime="extrapolation",
        training_ids=tuple(remaining[int(i)] for i in picks),
        test_ids=test.ids,
        provenance=cfg.provenance(),
    )


def resttest_split(
    train: QuerySet,
    test: QuerySet,
    train_emb: EmbeddingSet,
    test_emb: EmbeddingSet,
    cfg: KMeansConfig,
) -> FoldSpec:
    """Cluster training and test queries together and derive leave-one-bucket-out folds."""
    if cfg.k < 2:
        raise DataError("k must be >= 2: a single bucket leaves no training data")
    overlap = set(train.ids) & set(test.ids)
    if overlap:
        raise DataError(f"train and test query ids overlap: {sorted(overlap)[:5]}")
    tr = train_emb.subset(train.ids)
    te = test_emb.subset(test.ids)
    if tr.dim != te.dim:
        raise DataError(f"dimension mismatch: train dim {tr.dim}, test dim {te.dim}")
    combined = EmbeddingSet(list(train.ids) + list(test.ids), np.vstack([tr.matrix, te.matrix]))
    result = kmeans(combined, cfg)
    buckets: list[list[str]] = [[] for _ in range(cfg.k)]
    for eid in combined.ids:
        buckets[result.assignment[eid]].append(eid)
    train_set = set(train.ids)
    for b, bucket in enumerate(buckets):
        if not any(i not in train_set for i in bucket):
            logger.warning("bucket %d contains no test queries; fold %d contributes no extrapolation scores", b, b)
    return FoldSpec(
        k=cfg.k,
        buckets=tuple(tuple(b) for b in buckets),
        train_ids=train.ids,
        provenance={
            "seed": str(cfg.seed),
            "max_iters": str(cfg.max_iters),
            "tol": repr(cfg.tol),
            "normalize": str(cfg.normalize).lower(),
            "rng": RNG_ALGORITHM,
        },
    )


@dataclass
class AggregateReport:
    """Fold-averaged scores: one extrapolation score per test query, the
    mean of k-1 interpolation scores per test query, and their means."""

    label: str
    interpolation: float
    extrapolation: float
    per_query: dict[str, tuple[float, float]]
    skipped_ids: list[str] = field(default_factory=list)


def resttest_aggregate(
    fold_runs: Sequence[RunSet],
    fold_spec: FoldSpec,
    qrels: QrelSet,
    spec: MetricSpec,
) -> AggregateReport:
    """Score every fold's run and combine per the leave-one-bucket-out protocol."""
    if len(fold_runs) != fold_spec.k:
        raise DataError(f"expected {fold_spec.k} fold runs, got {len(fold_runs)}")
    reports = [score_run(run, qrels, spec) for run in fold_runs]
    bucket_of = fold_spec.bucket_of
    per_query: dict[str, tuple[float, float]] = {}
    skipped: list[str] = []
    missing = 0
    for qid in fold_spec.test_ids:
        if spec.kind == "recall":
            evaluable = qrels.relevant_count(qid, spec.rel_threshold) > 0
        else:
            evaluable = qrels.has_query(qid)
        if not evaluable:
            skipped.append(qid)
            continue
        extra_fold = bucket_of[qid]
        scores = []
        for fold in range(fold_spec.k):
            if qid in reports[fold].per_query:
                scores.append(reports[fold].per_query[qid])
            else:
                scores.append(0.0)
                missing += 1
        inter_folds = [scores[f] for f in range(fold_spec.k) if f != extra_fold]
        per_query[qid] = (sum(inter_folds) / len(inter_folds), scores[extra_fold])
    if missing:
        logger.warning("%d fold-query scores missing from the runs; scored 0", missing)
    if skipped:
        logger.warning("%s: skipped %d test queries without usable judgments", spec.label, len(skipped))
    count = len(per_query)
    interpolation = sum(per_query[q][0] for q in sorted(per_query)) / count if count else 0.0
    extrapolation = sum(per_query[q][1] for q in sorted(per_query)) / count if count else 0.0
    return AggregateReport(
        label=spec.label,
        interpolation=interpolation,
        extrapolation=extrapolation,
        per_query=per_query,
        skipped_ids=skipped,
    )


def write_aggregate_report(report: AggregateReport, path) -> None:
    """TSV `metric<TAB>qid<TAB>interpolation<TAB>extrapolation` plus an ALL row."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for qid in sorted(report.per_query):
            inter, extra = report.per_query[qid]
            f.write(f"{report.label}\t{qid}\t{inter:.4f}\t{extra:.4f}\n")
        f.write(f"{report.label}\tALL\t{report.interpolation:.4f}\t{report.extrapolation:.4f}\n")


def _check_manifest_id(eid: str) -> str:
    if eid.startswith("#") or eid.startswith("["):
        raise DataError(f"id {eid!r} cannot be written to a manifest (reserved prefix)")
    return eid


def write_manifest(spec: SplitSpec | FoldSpec, path) -> None:
    """Write a split/fold manifest.

    Header lines `#key=value` (regime first, then seed, then `#k` for
    fold manifests, then the remaining provenance keys sorted), followed
    by one id per line under `[training]`, `[test-interpolation]`,
    `[test-extrapolation]`, or `[bucket i]` sections. LF line endings.
    """
    lines: list[str] = []
    if isinstance(spec, SplitSpec):
        prov = dict(spec.provenance)
        lines.append(f"#regime={spec.regime}")
        if "seed" in prov:
            lines.append(f"#seed={prov.pop('seed')}")
        for key in sorted(prov):
            lines.append(f"#{key}={prov[key]}")
        lines.append("[training]")
        lines.extend(_check_manifest_id(i) for i in spec.training_ids)
        section = "test-interpolation" if spec.regime == "interpolation" else "test-extrapolation"
        lines.append(f"[{section}]")
        lines.extend(_check_manifest_id(i) for i in spec.test_ids)
    elif isinstance(spec, FoldSpec):
        prov = dict(spec.provenance)
        lines.append("#regime=resttest")
        if "seed" in prov:
            lines.append(f"#seed={prov.pop('seed')}")
        lines.append(f"#k={spec.k}")
        for key in sorted(prov):
            lines.append(f"#{key}={prov[key]}")
        lines.append("[training]")
        lines.extend(_check_manifest_id(i) for i in spec.train_ids)
        for b, bucket in enumerate(spec.buckets):
            lines.append(f"[bucket {b}]")
            lines.extend(_check_manifest_id(i) for i in bucket)
    else:
        raise TypeError(f"cannot serialize {type(spec).__name__}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path) -> SplitSpec | FoldSpec:
    """Read back a manifest written by :func:`write_manifest`."""
    headers: dict[str, str] = {}
    sections: dict[str, list[str]] = {}
    order: list[str] = []
    current: str | None = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\r\n")
            if not line:
                continue
            if line.startswith("#"):
                if current is not None:
                    raise ParseError(path, "header line after a section started", lineno)
                key, sep, value = line[1:].partition("=")
                if not sep:
                    raise ParseError(path, "header must look like #key=value", lineno)
                headers[key] = value
            elif line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                if current in sections:
                    raise ParseError(path, f"duplicate section [{current}]", lineno)
                sections[current] = []
                order.append(current)
            else:
                if current is None:
                    raise ParseError(path, "id line before any section header", lineno)
                sections[current].append(line)
    regime = headers.pop("regime", None)
    if regime is None:
        raise ParseError(path, "missing #regime header")
    if regime in ("interpolation", "extrapolation"):
        section = "test-interpolation" if regime == "interpolation" else "test-extrapolation"
        if "training" not in sections or section not in sections:
            raise ParseError(path, f"expected [training] and [{section}] sections")
        return SplitSpec(
            regime=regime,
            training_ids=tuple(sections["training"]),
            test_ids=tuple(sections[section]),
            provenance=headers,
        )
    if regime == "resttest":
        if "k" not in headers:
            raise ParseError(path, "missing #k header")
        try:
            k = int(headers.pop("k"))
        except ValueError:
            raise ParseError(path, "#k must be an integer") from None
        if "training" not in sections:
            raise ParseError(path, "expected a [training] section")
        buckets = []
        for b in range(k):
            name = f"bucket {b}"
            if name not in sections:
                raise ParseError(path, f"missing [{name}] section")
            buckets.append(tuple(sections[name]))
        return FoldSpec(
            k=k,
            buckets=tuple(buckets),
            train_ids=tuple(sections["training"]),
            provenance=headers,
        )
    raise ParseError(path, f"unknown regime {regime!r}")

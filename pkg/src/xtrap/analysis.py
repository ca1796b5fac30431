"""Auditing and meta-analysis: train-test judgment overlap, rank
correlations, inter-annotator agreement, and 2-D PCA for split plots.

The overlap audit answers "how many test queries share at least one
relevant passage with the training judgments" at configurable grade
thresholds. Correlations follow the tie-corrected textbook definitions
(average ranks for Spearman, tau-b tie terms for Kendall). PCA is a
small power-iteration eigensolver so projections are reproducible
bit-for-bit; it is meant for plotting, not for the resampling protocol
itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataio import DataError, EmbeddingSet, ParseError, QrelSet, _iter_lines

# fixed internal seed for power-iteration start vectors (reproducibility)
_PCA_SEED = 0x9A7E11


@dataclass(frozen=True)
class GradeThreshold:
    """Binarization rule for graded judgments: grade == value or grade >= value."""

    mode: str
    value: int

    def __post_init__(self):
        if self.mode not in ("geq", "eq"):
            raise ValueError(f"threshold mode must be 'geq' or 'eq', got {self.mode!r}")
        if self.value < 0:
            raise ValueError("threshold value must be >= 0")

    @classmethod
    def parse(cls, text: str) -> "GradeThreshold":
        mode, sep, value = text.strip().partition(":")
        if not sep:
            raise ValueError(f"bad threshold {text!r}, expected 'geq:N' or 'eq:N'")
        try:
            return cls(mode=mode, value=int(value))
        except ValueError as e:
            raise ValueError(f"bad threshold {text!r}: {e}") from None

    def matches(self, grade: int) -> bool:
        return grade == self.value if self.mode == "eq" else grade >= self.value

    @property
    def label(self) -> str:
        return f"{self.mode}:{self.value}"


DEFAULT_THRESHOLDS = (
    GradeThreshold("geq", 1),
    GradeThreshold("geq", 2),
    GradeThreshold("eq", 3),
)


@dataclass(frozen=True)
class OverlapRow:
    threshold: GradeThreshold
    count: int
    total: int

    @property
    def percent(self) -> float:
        return 100.0 * self.count / self.total


@dataclass(frozen=True)
class OverlapReport:
    rows: tuple[OverlapRow, ...]


def relevant_overlap(
    test_qrels: QrelSet,
    train_qrels: QrelSet,
    thresholds: Sequence[GradeThreshold] = DEFAULT_THRESHOLDS,
) -> OverlapReport:
    """Fraction of test queries sharing a relevant doc with the training judgments.

    A test query counts at a threshold when one of its docs both satisfies
    the threshold in the test qrels and is relevant (grade >= 1) for any
    training query.
    """
    test_ids = test_qrels.query_ids()
    if not test_ids:
        raise DataError("test qrels are empty")
    train_relevant = {docid for _, docid, rel in train_qrels.pairs() if rel >= 1}
    rows = []
    for th in thresholds:
        count = 0
        for qid in test_ids:
            for docid, rel in test_qrels.docs(qid).items():
                if th.matches(rel) and docid in train_relevant:
                    count += 1
                    break
        rows.append(OverlapRow(threshold=th, count=count, total=len(test_ids)))
    return OverlapReport(rows=tuple(rows))


def write_overlap_report(report: OverlapReport, path) -> None:
    """TSV `threshold<TAB>count<TAB>total<TAB>percent`."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in report.rows:
            f.write(f"{row.threshold.label}\t{row.count}\t{row.total}\t{row.percent:.2f}\n")


PairedScores = Sequence[tuple[str, float, float]]


def read_pairs(path) -> list[tuple[str, float, float]]:
    """TSV `label<TAB>x<TAB>y` with finite decimal values."""
    pairs: list[tuple[str, float, float]] = []
    for lineno, line in _iter_lines(path):
        fields = line.split("\t")
        if len(fields) != 3:
            raise ParseError(path, f"expected 'label<TAB>x<TAB>y', got {len(fields)} fields", lineno)
        label, xs, ys = fields
        try:
            x, y = float(xs), float(ys)
        except ValueError:
            raise ParseError(path, "x and y must be decimal numbers", lineno) from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ParseError(path, "x and y must be finite", lineno)
        pairs.append((label, x, y))
    return pairs


def _check_pairs(pairs: PairedScores) -> tuple[np.ndarray, np.ndarray]:
    if len(pairs) < 2:
        raise DataError("correlation needs at least 2 pairs")
    x = np.asarray([p[1] for p in pairs], dtype=np.float64)
    y = np.asarray([p[2] for p in pairs], dtype=np.float64)
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise DataError("correlation inputs must be finite")
    return x, y


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, tied values assigned the mean of their rank range."""
    n = len(values)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(pairs: PairedScores) -> float:
    """Pearson correlation of the two rank vectors (average ranks for ties)."""
    x, y = _check_pairs(pairs)
    rx, ry = _average_ranks(x), _average_ranks(y)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise DataError("undefined correlation: zero variance in a rank vector")
    return float(dx @ dy) / (sx * sy)


def _tie_term(values: np.ndarray) -> float:
    """Sum of t*(t-1)/2 over tie groups."""
    _, counts = np.unique(values, return_counts=True)
    return float((counts * (counts - 1) // 2).sum())


def kendall_tau_b(pairs: PairedScores) -> float:
    """Tau-b: (concordant - discordant) normalized with tie corrections."""
    x, y = _check_pairs(pairs)
    n = len(x)
    sx = np.sign(np.subtract.outer(x, x))
    sy = np.sign(np.subtract.outer(y, y))
    concordant_minus_discordant = float((sx * sy).sum()) / 2.0
    n0 = n * (n - 1) / 2.0
    denom = math.sqrt((n0 - _tie_term(x)) * (n0 - _tie_term(y)))
    if denom == 0.0:
        raise DataError("undefined correlation: all values tied in a coordinate")
    return concordant_minus_discordant / denom


def read_labels(path) -> list[tuple[str, str]]:
    """TSV `item_id<TAB>label`, one labeled item per line."""
    items: list[tuple[str, str]] = []
    seen: set[str] = set()
    for lineno, line in _iter_lines(path):
        if "\t" not in line:
            raise ParseError(path, "expected 'item_id<TAB>label'", lineno)
        item, label = line.split("\t", 1)
        if item in seen:
            raise ParseError(path, f"duplicate item id {item}", lineno)
        seen.add(item)
        items.append((item, label))
    return items


def cohens_kappa(labels_a: Sequence, labels_b: Sequence) -> float:
    """Chance-corrected agreement between two raters over the same items."""
    if len(labels_a) != len(labels_b):
        raise DataError(f"label vectors differ in length: {len(labels_a)} vs {len(labels_b)}")
    n = len(labels_a)
    if n == 0:
        raise DataError("label vectors are empty")
    observed = sum(1 for a, b in zip(labels_a, labels_b) if a == b) / n
    counts_a: dict = {}
    counts_b: dict = {}
    for a in labels_a:
        counts_a[a] = counts_a.get(a, 0) + 1
    for b in labels_b:
        counts_b[b] = counts_b.get(b, 0) + 1
    expected = sum(counts_a[c] * counts_b.get(c, 0) for c in counts_a) / (n * n)
    if expected == 1.0:
        if observed == 1.0:
            return 1.0
        raise DataError("kappa undefined: expected agreement is 1 but raters disagree")
    return (observed - expected) / (1.0 - expected)


def median_label(labels: Sequence) -> object:
    """Middle element after sorting; requires an odd number of labels."""
    if len(labels) == 0 or len(labels) % 2 == 0:
        raise DataError(f"median label needs an odd number of labels, got {len(labels)}")
    return sorted(labels)[len(labels) // 2]


def _covariance(points: EmbeddingSet) -> np.ndarray:
    """Sample covariance (divisor n-1) accumulated in float64, chunked."""
    n, dim = len(points), points.dim
    step = max(1, (16 * 1024 * 1024) // max(1, dim))
    total = np.zeros(dim, dtype=np.float64)
    for lo in range(0, n, step):
        total += points.matrix[lo : lo + step].sum(axis=0, dtype=np.float64)
    mean = total / n
    cov = np.zeros((dim, dim), dtype=np.float64)
    for lo in range(0, n, step):
        centered = points.matrix[lo : lo + step].astype(np.float64) - mean
        cov += centered.T @ centered
    return cov / (n - 1)


def _orthonormal_completion(components: list[np.ndarray], dim: int) -> np.ndarray:
    """Deterministic unit vector orthogonal to the found components."""
    for axis in range(dim):
        v = np.zeros(dim, dtype=np.float64)
        v[axis] = 1.0
        for c in components:
            v -= (c @ v) * c
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            return v / norm
    raise DataError("no orthogonal direction left for a zero-variance component")


def pca_components(
    points: EmbeddingSet, out_dims: int = 2, tol: float = 1e-9, max_iters: int = 1000
) -> tuple[np.ndarray, tuple[float, ...]]:
    """Top principal axes by power iteration with deflation.

    Returns (components matrix of shape (out_dims, dim), eigenvalues in
    descending order). Each component's largest-magnitude coordinate is
    made positive so outputs are reproducible.
    """
    n, dim = len(points), points.dim
    if n < 2:
        raise DataError("PCA needs at least 2 points")
    if out_dims < 1 or out_dims > dim:
        raise DataError(f"out_dims must be in [1, {dim}], got {out_dims}")
    deflated = _covariance(points)
    rng = np.random.Generator(np.random.PCG64(_PCA_SEED))
    components: list[np.ndarray] = []
    eigenvalues: list[float] = []
    for index in range(out_dims):
        v = rng.standard_normal(dim)
        for c in components:
            v -= (c @ v) * c
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            v = _orthonormal_completion(components, dim)
        else:
            v /= norm
        converged = False
        for _ in range(max_iters):
            w = deflated @ v
            for c in components:
                w -= (c @ w) * c
            norm = np.linalg.norm(w)
            if norm < 1e-30:
                # zero-variance residual: any orthogonal direction works
                v = _orthonormal_completion(components, dim)
                converged = True
                break
            w /= norm
            if w @ v < 0.0:
                w = -w
            if np.linalg.norm(w - v) < tol:
                v = w
                converged = True
                break
            v = w
        if not converged:
            raise DataError(f"power iteration failed to converge for component {index}")
        peak = int(np.argmax(np.abs(v)))
        if v[peak] < 0.0:
            v = -v
        eigenvalue = float(v @ deflated @ v)
        components.append(v)
        eigenvalues.append(max(eigenvalue, 0.0))
        deflated -= eigenvalue * np.outer(v, v)
    return np.vstack(components), tuple(eigenvalues)


def pca_project(points: EmbeddingSet, out_dims: int = 2) -> dict[str, np.ndarray]:
    """Project every embedding onto the top principal axes; id -> coordinates."""
    components, _ = pca_components(points, out_dims=out_dims)
    n, dim = len(points), points.dim
    step = max(1, (16 * 1024 * 1024) // max(1, dim))
    total = np.zeros(dim, dtype=np.float64)
    for lo in range(0, n, step):
        total += points.matrix[lo : lo + step].sum(axis=0, dtype=np.float64)
    mean = total / n
    out: dict[str, np.ndarray] = {}
    for lo in range(0, n, step):
        block = (points.matrix[lo : lo + step].astype(np.float64) - mean) @ components.T
        for i, row in enumerate(block):
            out[points.ids[lo + i]] = row
    return out


def write_pca_projection(
    projection: dict[str, np.ndarray], groups: dict[str, str] | None, path
) -> None:
    """TSV `id<TAB>x<TAB>y<TAB>group`; ids without a group get 'none'."""
    groups = groups or {}
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for eid, coords in projection.items():
            values = "\t".join(f"{v:.6g}" for v in coords)
            f.write(f"{eid}\t{values}\t{groups.get(eid, 'none')}\n")

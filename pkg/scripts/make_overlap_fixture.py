#!/usr/bin/env python3
"""Regenerate the synthetic overlap fixtures under tests/fixtures/.

The fixtures are fully synthetic qrels built to have the same shape and
overlap statistics as the public TREC 2019/2020 Deep Learning passage
judgments against the MS MARCO training judgments: 43 and 54 test
queries whose shared-relevant-doc counts reproduce the published overlap
percentages at the geq:1 / geq:2 / eq:3 thresholds. They exist so the
overlap pipeline can be exercised end to end without downloading the
real data (see scripts/download_qrels.py for that).
"""

from __future__ import annotations

import random
from pathlib import Path

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"

# (queries, shared grade-3, shared grade-2, shared grade-1) per collection;
# remaining queries share nothing. Counts chosen so the percentages round
# to the published values: 79/60/26 (2019) and 76/46/31 (2020).
SHAPES = {
    "trec19": (43, 11, 15, 8),
    "trec20": (54, 17, 8, 16),
}


def build(name: str, total: int, shared3: int, shared2: int, shared1: int, rng: random.Random):
    test_lines = []
    train_entries = []
    categories = ["s3"] * shared3 + ["s2"] * shared2 + ["s1"] * shared1
    categories += ["none"] * (total - len(categories))
    rng.shuffle(categories)
    for i, category in enumerate(categories):
        qid = f"{name}-q{i + 1:03d}"
        docs = []
        if category != "none":
            grade = {"s3": 3, "s2": 2, "s1": 1}[category]
            shared_doc = f"{name}-shared-{i + 1:03d}"
            docs.append((shared_doc, grade))
            train_entries.append((f"{name}-train-{i + 1:03d}", shared_doc))
        # unshared padding docs; never referenced by the training qrels
        docs.append((f"{name}-only-{i + 1:03d}-a", rng.choice([0, 1])))
        docs.append((f"{name}-only-{i + 1:03d}-b", rng.choice([0, 1, 2, 3])))
        for docid, grade in docs:
            test_lines.append(f"{qid} 0 {docid} {grade}")
    return test_lines, train_entries


def main():
    rng = random.Random(7041)
    FIXTURES.mkdir(parents=True, exist_ok=True)
    train_lines = []
    for name, (total, s3, s2, s1) in SHAPES.items():
        test_lines, train_entries = build(name, total, s3, s2, s1, rng)
        (FIXTURES / f"{name}-fixture.qrels").write_text("\n".join(test_lines) + "\n")
        for tqid, docid in train_entries:
            train_lines.append(f"{tqid} 0 {docid} 1")
        # training-only judgments, irrelevant noise for the overlap audit
        for j in range(40):
            train_lines.append(f"{name}-train-x{j:03d} 0 {name}-corpus-{j:03d} 1")
    (FIXTURES / "train-fixture.qrels").write_text("\n".join(train_lines) + "\n")
    print(f"wrote fixtures to {FIXTURES}")


if __name__ == "__main__":
    main()

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import make_embeddings, make_queries, random_embeddings
from xtrap.dataio import DataError, QrelSet
from xtrap.metrics import MetricSpec
from xtrap.simindex import (
    Bm25Params,
    bm25_build,
    bm25_grid_search,
    bm25_search,
    knn,
    recall_candidates,
    tokenize,
    write_neighbor_lists,
)


class TestTokenize:
    def test_punctuation_and_case(self):
        assert tokenize("How tall—is Everest?") == ["how", "tall", "is", "everest"]

    def test_empty(self):
        assert tokenize("") == []

    def test_alphanumeric_split(self):
        assert tokenize("a1-b2") == ["a1", "b2"]

    def test_underscore_splits(self):
        assert tokenize("a_b") == ["a", "b"]


class TestKnn:
    def test_orthogonal_basis(self):
        train = make_embeddings(["a", "b"], [[1, 0], [0, 1]])
        test = make_embeddings(["q"], [[1, 0]])
        (nl,) = knn(test, train, 1)
        assert nl.neighbors == (("a", 1.0),)
        (nl,) = knn(test, train, 2)
        assert nl.neighbors == (("a", 1.0), ("b", 0.0))

    def test_k_larger_than_train_warns(self, caplog):
        train = make_embeddings(["a"], [[1.0]])
        test = make_embeddings(["q"], [[1.0]])
        with caplog.at_level("WARNING"):
            (nl,) = knn(test, train, 5)
        assert len(nl.neighbors) == 1
        assert any("exceeds" in r.message for r in caplog.records)

    def test_dim_mismatch(self):
        with pytest.raises(DataError):
            knn(make_embeddings(["q"], [[1, 0]]), make_embeddings(["a"], [[1.0]]), 1)

    def test_cosine_zero_vector_rejected(self):
        train = make_embeddings(["a", "z"], [[1, 0], [0, 0]])
        test = make_embeddings(["q"], [[1, 0]])
        with pytest.raises(DataError) as exc:
            knn(test, train, 1, measure="cosine")
        assert "z" in str(exc.value)

    def test_tie_break_ascending_id(self):
        # three identical vectors must rank by id
        train = make_embeddings(["c", "a", "b"], [[1, 0]] * 3)
        test = make_embeddings(["q"], [[2, 0]])
        (nl,) = knn(test, train, 3)
        assert [n for n, _ in nl.neighbors] == ["a", "b", "c"]

    def test_exclude_self(self):
        train = make_embeddings(["q", "a"], [[1, 0], [0.9, 0]])
        test = make_embeddings(["q"], [[1, 0]])
        (nl,) = knn(test, train, 2, exclude_self=True)
        assert [n for n, _ in nl.neighbors] == ["a"]

    @pytest.mark.parametrize("measure", ["inner_product", "cosine"])
    def test_matches_all_pairs_oracle(self, rng, measure):
        for trial in range(25):
            n_train = int(rng.integers(1, 60))
            n_test = int(rng.integers(1, 10))
            dim = int(rng.integers(1, 9))
            k = int(rng.integers(1, n_train + 1))
            train = random_embeddings(rng, "t", n_train, dim)
            test = random_embeddings(rng, "q", n_test, dim)
            got = knn(test, train, k, measure=measure)
            want = oracles.knn_all_pairs(test.ids, test.matrix, train.ids, train.matrix, k, measure)
            for nl, (qid, expected) in zip(got, want):
                assert nl.query_id == qid
                assert [n for n, _ in nl.neighbors] == [n for n, _ in expected]
                np.testing.assert_allclose(
                    [s for _, s in nl.neighbors], [s for _, s in expected], rtol=1e-12, atol=1e-12
                )

    def test_ties_within_one_block_match_oracle(self, rng):
        # duplicated integer vectors force exact score ties
        base = rng.integers(-3, 4, size=(20, 4)).astype(np.float32)
        mat = np.vstack([base, base, base])
        train = make_embeddings([f"t{i:03d}" for i in range(60)], mat)
        test = make_embeddings(["q0", "q1"], rng.integers(-3, 4, size=(2, 4)))
        got = knn(test, train, 17)
        want = oracles.knn_all_pairs(test.ids, test.matrix, train.ids, train.matrix, 17, "inner_product")
        for nl, (_, expected) in zip(got, want):
            assert [n for n, _ in nl.neighbors] == [n for n, _ in expected]

    def test_ties_across_scan_blocks_match_oracle(self, rng, monkeypatch):
        # tiny blocks force the candidate merge to span many block boundaries,
        # with exact ties landing in different blocks
        monkeypatch.setattr("xtrap.simindex._KNN_BLOCK_MIN_ROWS", 1)
        monkeypatch.setattr("xtrap.simindex._KNN_BLOCK_ELEMENTS", 7)
        base = rng.integers(-2, 3, size=(15, 3)).astype(np.float32)
        mat = np.vstack([base, base, base, base])
        train = make_embeddings([f"t{i:03d}" for i in range(60)], mat)
        test = make_embeddings(["q0", "q1", "q2"], rng.integers(-2, 3, size=(3, 3)))
        for k in (1, 7, 23, 60):
            got = knn(test, train, k)
            want = oracles.knn_all_pairs(
                test.ids, test.matrix, train.ids, train.matrix, k, "inner_product"
            )
            for nl, (_, expected) in zip(got, want):
                assert [n for n, _ in nl.neighbors] == [n for n, _ in expected]
                assert [s for _, s in nl.neighbors] == [s for _, s in expected]

    def test_threads_with_many_blocks(self, rng, monkeypatch):
        monkeypatch.setattr("xtrap.simindex._KNN_BLOCK_MIN_ROWS", 1)
        monkeypatch.setattr("xtrap.simindex._KNN_BLOCK_ELEMENTS", 16)
        train = random_embeddings(rng, "t", 90, 4)
        test = make_embeddings([f"q{i}" for i in range(8)], rng.normal(size=(8, 4)))
        assert knn(test, train, 12) == knn(test, train, 12, threads=3)

    def test_exclude_self_across_blocks(self, rng, monkeypatch):
        monkeypatch.setattr("xtrap.simindex._KNN_BLOCK_MIN_ROWS", 1)
        monkeypatch.setattr("xtrap.simindex._KNN_BLOCK_ELEMENTS", 5)
        ids = [f"x{i:02d}" for i in range(30)]
        emb = random_embeddings(rng, "x", 30, 3)
        emb = make_embeddings(ids, emb.matrix)
        results = knn(emb, emb, 30, exclude_self=True)
        for nl in results:
            assert nl.query_id not in [n for n, _ in nl.neighbors]
            assert len(nl.neighbors) == 29

    def test_threads_do_not_change_results(self, rng):
        train = random_embeddings(rng, "t", 150, 6)
        test = random_embeddings(rng, "q", 64, 6)
        sequential = knn(test, train, 10)
        threaded = knn(test, train, 10, threads=3)
        assert sequential == threaded

    def test_scaling_train_by_power_of_two_is_exact(self, rng):
        train = random_embeddings(rng, "t", 40, 5)
        test = random_embeddings(rng, "q", 6, 5)
        scaled = make_embeddings(train.ids, train.matrix * np.float32(2.0))
        base = knn(test, train, 7)
        doubled = knn(test, scaled, 7)
        for a, b in zip(base, doubled):
            assert [n for n, _ in a.neighbors] == [n for n, _ in b.neighbors]
            assert [2.0 * s for _, s in a.neighbors] == [s for _, s in b.neighbors]

    def test_scaling_leaves_cosine_scores_unchanged(self, rng):
        train = random_embeddings(rng, "t", 40, 5)
        test = random_embeddings(rng, "q", 6, 5)
        scaled = make_embeddings(train.ids, train.matrix * np.float32(2.0))
        assert knn(test, train, 7, measure="cosine") == knn(test, scaled, 7, measure="cosine")

    def test_arbitrary_scaling_keeps_order(self, rng):
        train = random_embeddings(rng, "t", 50, 4)
        test = random_embeddings(rng, "q", 5, 4)
        scaled = make_embeddings(train.ids, train.matrix * np.float32(3.7))
        for a, b in zip(knn(test, train, 8), knn(test, scaled, 8)):
            assert [n for n, _ in a.neighbors] == [n for n, _ in b.neighbors]
            np.testing.assert_allclose(
                [3.7 * s for _, s in a.neighbors], [s for _, s in b.neighbors], rtol=1e-6
            )


class TestBm25:
    def test_hand_evaluated_score(self):
        index = bm25_build(make_queries(["d1", "d2"], ["cat", "dog"]))
        (doc,) = bm25_search(index, "cat", 5, Bm25Params(k1=1.2, b=0.75)).neighbors
        assert doc[0] == "d1"
        assert doc[1] == pytest.approx(np.log(2.0), abs=1e-12)

    def test_no_match_is_empty(self):
        index = bm25_build(make_queries(["d1", "d2"], ["cat", "dog"]))
        assert bm25_search(index, "bird", 5).neighbors == ()

    def test_empty_query_is_empty(self):
        index = bm25_build(make_queries(["d1"], ["cat"]))
        assert bm25_search(index, "", 5).neighbors == ()

    def test_empty_corpus_rejected(self):
        with pytest.raises(DataError):
            bm25_build(make_queries([], []))

    def test_scores_match_formula_oracle(self, rng):
        vocab = ["cat", "dog", "fish", "bird", "tree", "car"]
        ids = [f"d{i:02d}" for i in range(20)]
        texts = [
            " ".join(rng.choice(vocab, size=rng.integers(1, 9)).tolist()) for _ in ids
        ]
        index = bm25_build(make_queries(ids, texts))
        corpus = dict(zip(ids, texts))
        for query in ["cat dog", "fish", "bird tree car", "cat cat dog"]:
            params = Bm25Params(k1=float(rng.uniform(0.5, 2.0)), b=float(rng.uniform(0, 1)))
            got = dict(bm25_search(index, query, 20, params).neighbors)
            want = oracles.bm25_scores(corpus, query, params.k1, params.b)
            assert set(got) == set(want)
            for d in want:
                assert got[d] == pytest.approx(want[d], abs=1e-9)

    def test_tie_breaks_by_doc_id(self):
        index = bm25_build(make_queries(["b", "a"], ["cat", "cat"]))
        result = bm25_search(index, "cat", 2)
        assert [d for d, _ in result.neighbors] == ["a", "b"]

    def test_more_occurrences_never_decrease_score_b0(self, rng):
        params = Bm25Params(k1=1.4, b=0.0)
        for _ in range(20):
            reps = int(rng.integers(1, 5))
            others = [f"filler {i}" for i in range(int(rng.integers(1, 6)))]
            texts = ["cat " * reps + "dog", *others]
            more = ["cat " * (reps + 1) + "dog", *others]
            ids = [f"d{i}" for i in range(len(texts))]
            base = dict(bm25_search(bm25_build(make_queries(ids, texts)), "cat", 10, params).neighbors)
            bumped = dict(bm25_search(bm25_build(make_queries(ids, more)), "cat", 10, params).neighbors)
            assert bumped["d0"] >= base["d0"]

    def test_params_validated(self):
        with pytest.raises(ValueError):
            Bm25Params(k1=0.0)
        with pytest.raises(ValueError):
            Bm25Params(b=1.5)


class TestGridSearch:
    def make_instance(self, rng):
        vocab = ["alpha", "beta", "gamma", "delta", "epsi"]
        doc_ids = [f"d{i:02d}" for i in range(12)]
        docs = make_queries(
            doc_ids,
            [" ".join(rng.choice(vocab, size=rng.integers(2, 7)).tolist()) for _ in doc_ids],
        )
        queries = make_queries(
            [f"q{i}" for i in range(10)],
            [" ".join(rng.choice(vocab, size=2).tolist()) for _ in range(10)],
        )
        records = []
        for q in queries.ids:
            picks = rng.choice(doc_ids, size=2, replace=False)
            records += [(q, picks[0], 1), (q, picks[1], 1)]
        return docs, queries, QrelSet.from_records(records)

    def test_singleton_grid(self, rng):
        docs, queries, qrels = self.make_instance(rng)
        only = Bm25Params(1.0, 0.5)
        assert bm25_grid_search(bm25_build(docs), queries, qrels, [only], MetricSpec("mrr")) == only

    def test_tie_prefers_lower_k1_then_b(self):
        # one doc, one query, scores identical across params: metric constant
        docs = make_queries(["d1"], ["cat"])
        queries = make_queries(["q1"], ["cat"])
        qrels = QrelSet.from_records([("q1", "d1", 1)])
        grid = [Bm25Params(1.5, 0.75), Bm25Params(1.2, 0.75), Bm25Params(1.2, 0.9)]
        best = bm25_grid_search(bm25_build(docs), queries, qrels, grid, MetricSpec("mrr"))
        assert (best.k1, best.b) == (1.2, 0.75)

    def test_matches_exhaustive_oracle(self, rng):
        from xtrap.dataio import RunSet
        from xtrap.metrics import mrr

        docs, queries, qrels = self.make_instance(rng)
        index = bm25_build(docs)
        spec = MetricSpec("mrr")
        grid = [Bm25Params(k1, b) for k1 in (0.8, 1.2, 1.6) for b in (0.0, 0.4, 0.8)]
        best = bm25_grid_search(index, queries, qrels, grid, spec)

        scored = []
        for params in grid:
            run = RunSet(
                {
                    q.id: bm25_search(index, q.text, spec.cutoff, params).neighbors
                    for q in queries
                }
            )
            scored.append((mrr(run, qrels, spec).mean, params))
        best_mean = max(m for m, _ in scored)
        want = min((p for m, p in scored if m == best_mean), key=lambda p: (p.k1, p.b))
        assert best == want


class TestRecallCandidates:
    def test_union_bounds(self, rng):
        train_ids = [f"t{i:02d}" for i in range(30)]
        train = make_queries(train_ids, [f"topic {i} words" for i in range(30)])
        test = make_queries(["q1", "q2"], ["topic 3 words", "unrelated text"])
        train_emb = make_embeddings(train_ids, rng.normal(size=(30, 4)))
        test_emb = make_embeddings(["q1", "q2"], rng.normal(size=(2, 4)))
        pools = recall_candidates(test, train, test_emb, train_emb, per_channel=5)
        for pool in pools.values():
            assert 5 <= len(pool) <= 10
            assert len(set(pool)) == len(pool)

    def test_identical_channels_collapse(self, rng):
        # embeddings aligned with lexical overlap so both channels agree
        train = make_queries(["t1", "t2"], ["red fox", "blue whale"])
        test = make_queries(["q"], ["red fox"])
        train_emb = make_embeddings(["t1", "t2"], [[1, 0], [0, 1]])
        test_emb = make_embeddings(["q"], [[1, 0]])
        pools = recall_candidates(test, train, test_emb, train_emb, per_channel=1)
        assert pools["q"] == ["t1"]

    def test_disjoint_channels_concatenate(self):
        # embedding channel prefers t1, lexical only matches t2
        train = make_queries(["t1", "t2"], ["zzz nothing", "red fox"])
        test = make_queries(["q"], ["red fox"])
        train_emb = make_embeddings(["t1", "t2"], [[1, 0], [0, 1]])
        test_emb = make_embeddings(["q"], [[1, 0]])
        pools = recall_candidates(test, train, test_emb, train_emb, per_channel=1)
        assert pools["q"] == ["t1", "t2"]

    def test_matches_set_union_oracle(self, rng):
        train_ids = [f"t{i:02d}" for i in range(30)]
        vocab = ["sun", "moon", "star", "rain", "wind", "snow"]
        train_texts = [" ".join(rng.choice(vocab, size=3).tolist()) for _ in train_ids]
        test_ids = [f"q{i}" for i in range(6)]
        test_texts = [" ".join(rng.choice(vocab, size=2).tolist()) for _ in test_ids]
        train = make_queries(train_ids, train_texts)
        test = make_queries(test_ids, test_texts)
        train_emb = make_embeddings(train_ids, rng.normal(size=(30, 6)))
        test_emb = make_embeddings(test_ids, rng.normal(size=(6, 6)))
        pools = recall_candidates(test, train, test_emb, train_emb, per_channel=4)

        dense = {
            qid: [n for n, _ in lst]
            for qid, lst in (
                (nl.query_id, nl.neighbors) for nl in knn(test_emb, train_emb, 4)
            )
        }
        index = bm25_build(train)
        for qid, text in zip(test_ids, test_texts):
            lexical = [n for n, _ in bm25_search(index, text, 4).neighbors]
            assert set(pools[qid]) == set(dense[qid]) | set(lexical)
            assert pools[qid][: len(dense[qid])] == dense[qid]

    def test_missing_embedding_names_id(self, rng):
        train = make_queries(["t1"], ["a"])
        test = make_queries(["q1"], ["a"])
        train_emb = make_embeddings(["other"], [[1.0]])
        test_emb = make_embeddings(["q1"], [[1.0]])
        with pytest.raises(DataError) as exc:
            recall_candidates(test, train, test_emb, train_emb)
        assert "t1" in str(exc.value)


class TestSerialization:
    def test_neighbor_tsv_format_and_determinism(self, tmp_path, rng):
        train = random_embeddings(rng, "t", 20, 3)
        test = random_embeddings(rng, "q", 3, 3)
        lists = knn(test, train, 4)
        p1, p2 = tmp_path / "a.tsv", tmp_path / "b.tsv"
        write_neighbor_lists(lists, p1)
        write_neighbor_lists(knn(test, train, 4), p2)
        assert p1.read_bytes() == p2.read_bytes()
        line = p1.read_text().splitlines()[0].split("\t")
        assert len(line) == 4
        assert line[0] == "q0000" and line[1] == "1"

    def test_scores_use_six_significant_digits(self, tmp_path):
        from xtrap.simindex import NeighborList

        lists = [NeighborList("q", (("a", 0.123456789), ("b", 123456789.0)))]
        path = tmp_path / "n.tsv"
        write_neighbor_lists(lists, path)
        assert path.read_text() == "q\t1\ta\t0.123457\nq\t2\tb\t1.23457e+08\n"


@settings(max_examples=40, deadline=None)
@given(
    st.lists(
        st.lists(st.integers(-5, 5), min_size=3, max_size=3), min_size=2, max_size=25
    ),
    st.integers(1, 8),
)
def test_knn_property_matches_oracle(vectors, k):
    mat = np.asarray(vectors, dtype=np.float32)
    train = make_embeddings([f"t{i:02d}" for i in range(len(vectors))], mat)
    test = make_embeddings(["q"], [[1, 2, 3]])
    (nl,) = knn(test, train, min(k, len(vectors)))
    (want,) = oracles.knn_all_pairs(
        test.ids, test.matrix, train.ids, train.matrix, min(k, len(vectors)), "inner_product"
    )
    assert [n for n, _ in nl.neighbors] == [n for n, _ in want[1]]

import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from draftrefine.corpus import CodeCommentPair, subtokenize_code
from draftrefine.retrieval import Bm25Params, RetrievalIndex, bm25_score, build_index, idf, retrieve_top1, score_all
from oracles import argmax_first, bm25_brute_force, code_terms


def pair(code: str, comment: str = "c", i: int = 0) -> CodeCommentPair:
    return CodeCommentPair(tuple(code.split()), (), tuple(comment.split()), source_id=str(i))


# frozen: ln((1 - 1 + 0.5)/(1 + 0.5) + 1) * (2*2.2/(2+1.2) + 1*2.2/(1+1.2))
SINGLE_DOC_SCORE = 0.6832449220729795


class TestBuildIndex:
    def test_three_pairs(self):
        idx = build_index([pair("a b", i=0), pair("a b c", i=1), pair("d", i=2)])
        assert idx.n_docs == 3
        assert idx.avg_doc_len == pytest.approx((2 + 3 + 1) / 3)

    def test_single_pair(self):
        idx = build_index([pair("a b c d e")])
        assert idx.avg_doc_len == 5

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty retrieval corpus"):
            build_index([])

    def test_postings_match_naive_build(self):
        pairs = [pair("x y x", i=0), pair("y z", i=1), pair("x z z", i=2)]
        idx = build_index(pairs)
        naive: dict[str, list[tuple[int, int]]] = {}
        for doc_id, p in enumerate(pairs):
            for term in sorted(set(p.code_tokens)):
                naive.setdefault(term, []).append((doc_id, p.code_tokens.count(term)))
        assert idx.postings == naive
        for plist in idx.postings.values():
            assert [d for d, _ in plist] == sorted(d for d, _ in plist)

    def test_documents_are_subtokenized(self):
        idx = build_index([pair("getUserName ( )")])
        assert set(idx.postings) == {"get", "user", "name", "(", ")"}

    def test_save_load(self, tmp_path):
        idx = build_index([pair("a b", i=0), pair("b c", i=1)])
        idx.save(tmp_path / "i.json")
        back = RetrievalIndex.load(tmp_path / "i.json")
        assert back.postings == idx.postings and back.doc_lengths == idx.doc_lengths
        assert back.doc_store[1].code_tokens == ("b", "c")

    def test_load_rejects_other_files(self, tmp_path):
        (tmp_path / "x.json").write_text('{"format": "other"}')
        with pytest.raises(ValueError):
            RetrievalIndex.load(tmp_path / "x.json")


class TestScore:
    def test_no_overlap(self):
        idx = build_index([pair("a b"), pair("c d", i=1)])
        assert bm25_score(["z"], 0, idx) == 0.0

    def test_single_doc_hand_value(self):
        idx = build_index([pair("alpha beta alpha")])
        assert bm25_score(["alpha", "beta", "alpha"], 0, idx) == pytest.approx(SINGLE_DOC_SCORE, abs=1e-12)
        assert idf(1, 1) == pytest.approx(math.log(4 / 3))

    def test_non_matching_term_is_neutral(self):
        idx = build_index([pair("a b c"), pair("b d", i=1)])
        assert bm25_score(["a", "b"], 0, idx) == bm25_score(["a", "b", "zz"], 0, idx)

    def test_unknown_doc(self):
        idx = build_index([pair("a")])
        with pytest.raises(KeyError):
            bm25_score(["a"], 3, idx)

    def test_params_validated(self):
        with pytest.raises(ValueError):
            Bm25Params(k1=0)
        with pytest.raises(ValueError):
            Bm25Params(b=1.5)

    @given(st.integers(1, 6), st.integers(0, 4))
    def test_monotone_in_tf(self, tf, extra):
        # raising tf of a matched term, doc length held fixed by swapping filler
        base = ["q"] * tf + ["f"] * (extra + 1)
        more = ["q"] * (tf + 1) + ["f"] * extra
        other = pair("f g h", i=2)
        lo = build_index([pair(" ".join(base)), pair(" ".join(more), i=1), other])
        assert bm25_score(["q"], 1, lo) >= bm25_score(["q"], 0, lo)

    @given(st.lists(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=6), min_size=1, max_size=6), st.lists(st.sampled_from("abcdefgh"), max_size=6))
    def test_nonnegative_and_matches_postings_path(self, docs, query):
        idx = build_index([pair(" ".join(d), i=i) for i, d in enumerate(docs)])
        all_scores = score_all(query, idx)
        for doc_id in range(idx.n_docs):
            s = bm25_score(query, doc_id, idx)
            assert s >= 0.0
            assert s == all_scores[doc_id]


class TestRetrieve:
    def test_identical_query(self):
        pairs = [pair("open file read", "reads"), pair("close socket now", "closes", 1), pair("sort list fast", "sorts", 2)]
        idx = build_index(pairs)
        hit, score, doc_id = retrieve_top1(["close", "socket", "now"], idx)
        assert doc_id == 1 and hit.comment_tokens == ("closes",)
        brute = bm25_brute_force(code_terms(["close", "socket", "now"]), [code_terms(p.code_tokens) for p in pairs])
        assert argmax_first(brute) == 1 and score == pytest.approx(brute[1])

    def test_all_zero_returns_first(self):
        idx = build_index([pair("a"), pair("b", i=1)])
        _, score, doc_id = retrieve_top1(["zz"], idx)
        assert doc_id == 0 and score == 0.0

    def test_superset_wins(self):
        idx = build_index([pair("a x y z"), pair("a b x y", i=1)])
        brute = bm25_brute_force(["a", "b"], [["a", "x", "y", "z"], ["a", "b", "x", "y"]])
        _, _, doc_id = retrieve_top1(["a", "b"], idx)
        assert doc_id == argmax_first(brute) == 1

    def test_exclude_self(self):
        idx = build_index([pair("a b"), pair("a c", i=1)])
        _, _, doc_id = retrieve_top1(["a", "b"], idx, exclude=0)
        assert doc_id == 1

    def test_query_is_subtokenized(self):
        idx = build_index([pair("getName ( )"), pair("setValue ( x )", i=1)])
        assert retrieve_top1(["getName"], idx)[2] == 0
        assert subtokenize_code(["getName"]) == ["get", "name"]

    def test_deterministic(self):
        rng = random.Random(3)
        pairs = [pair(" ".join(rng.choices("abcdefgh", k=5)), i=i) for i in range(30)]
        q = list("abc")
        assert retrieve_top1(q, build_index(pairs))[2] == retrieve_top1(q, build_index(pairs))[2]

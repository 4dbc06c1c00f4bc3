import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmmr_rag.errors import (
    CorruptIndexFile,
    DimensionMismatch,
    DuplicateRecordId,
    InvalidInput,
)
from vmmr_rag.index import VectorIndex, index_load, index_save


def unit_rows(rng, n, dim):
    m = rng.standard_normal((n, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def oracle_top_k(ids, vectors, query, k):
    """Score every entry with a plain Python dot product, then sort."""
    scored = []
    for pos, (rid, vec) in enumerate(zip(ids, vectors)):
        s = sum(float(a) * float(b) for a, b in zip(vec, query))
        scored.append((-s, pos, rid))
    scored.sort()
    return [rid for _, _, rid in scored[:k]]


def build(vectors, prefix="r"):
    index = VectorIndex(vectors.shape[1])
    for i, v in enumerate(vectors):
        index.add(f"{prefix}{i}", v)
    return index


def test_add_and_duplicates():
    index = VectorIndex(4)
    index.add("a", np.eye(4)[0])
    assert len(index) == 1
    with pytest.raises(DuplicateRecordId):
        index.add("a", np.eye(4)[1])
    with pytest.raises(DimensionMismatch):
        index.add("b", np.ones(3) / np.sqrt(3))
    with pytest.raises(InvalidInput):
        index.add("c", np.ones(4))


def test_self_match():
    v = np.array([0.6, 0.8])
    index = VectorIndex(2)
    index.add("only", v)
    [hit] = index.search(v, 1)
    assert (hit.record_id, hit.rank) == ("only", 1)
    assert hit.score == pytest.approx(1.0, abs=1e-12)


def test_orthonormal_entries():
    index = build(np.eye(4), prefix="e")
    hits = index.search(np.eye(4)[1], 2)
    assert hits[0].record_id == "e1" and hits[0].score == 1.0
    assert hits[1].score == 0.0 and hits[1].rank == 2
    # Remaining zero-score entries come back in insertion order.
    assert [h.record_id for h in index.search(np.eye(4)[1], 4)] == ["e1", "e0", "e2", "e3"]


def test_k_at_least_n_returns_everything():
    rng = np.random.default_rng(3)
    index = build(unit_rows(rng, 10, 8))
    assert len(index.search(unit_rows(rng, 1, 8)[0], 10)) == 10
    assert len(index.search(unit_rows(rng, 1, 8)[0], 50)) == 10


def test_empty_index_returns_no_hits():
    assert VectorIndex(3).search(np.array([1.0, 0.0, 0.0]), 5) == []


def test_search_errors():
    index = build(np.eye(3))
    with pytest.raises(DimensionMismatch):
        index.search(np.ones(2), 1)
    with pytest.raises(InvalidInput):
        index.search(np.eye(3)[0], 0)


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(20240601)
    vectors = unit_rows(rng, 200, 32)
    ids = [f"r{i}" for i in range(200)]
    index = build(vectors)
    for q in unit_rows(rng, 50, 32):
        hits = index.search(q, 5)
        assert [h.record_id for h in hits] == oracle_top_k(ids, vectors, q, 5)
        assert [h.rank for h in hits] == [1, 2, 3, 4, 5]
        for h in hits:
            assert h.score == pytest.approx(float(vectors[int(h.record_id[1:])] @ q), abs=1e-9)


def test_ties_follow_insertion_order():
    v = np.array([1.0, 0.0])
    index = VectorIndex(2)
    for rid in ["z", "a", "m"]:
        index.add(rid, v)
    assert [h.record_id for h in index.search(v, 3)] == ["z", "a", "m"]


# Signed basis vectors and (+-1/2, ...) vectors in dim 4: every dot product is
# exact in binary floating point, so ties are real ties on both code paths.
_basis = st.tuples(st.integers(0, 3), st.sampled_from([-1.0, 1.0])).map(
    lambda t: np.eye(4)[t[0]] * t[1]
)
_halves = st.lists(st.sampled_from([-0.5, 0.5]), min_size=4, max_size=4).map(np.array)
small_unit = st.one_of(_basis, _halves)


@settings(max_examples=150, deadline=None)
@given(st.lists(small_unit, min_size=1, max_size=25), small_unit, st.integers(1, 30))
def test_property_exact_and_prefix(vecs, query, k):
    vectors = np.vstack(vecs)
    ids = [f"r{i}" for i in range(len(vecs))]
    index = build(vectors)
    got = [h.record_id for h in index.search(query, k)]
    assert got == oracle_top_k(ids, vectors, query, k)
    longer = [h.record_id for h in index.search(query, k + 1)]
    assert longer[: len(got)] == got
    scores = [h.score for h in index.search(query, k)]
    assert scores == sorted(scores, reverse=True)


@settings(max_examples=100, deadline=None)
@given(st.lists(small_unit, min_size=1, max_size=20), small_unit, small_unit, st.integers(1, 10))
def test_property_insertion_keeps_relative_order(vecs, new, query, k):
    index = build(np.vstack(vecs))
    before = [h.record_id for h in index.search(query, k)]
    index.add("new", new)
    after = [h.record_id for h in index.search(query, k)]
    survivors = [rid for rid in after if rid != "new"]
    assert survivors == before[: len(survivors)]


def test_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    index = build(unit_rows(rng, 10, 16))
    path = tmp_path / "kb.idx"
    index_save(index, path)
    loaded = index_load(path)
    assert loaded == index
    for q in unit_rows(rng, 5, 16):
        assert loaded.search(q, 4) == index.search(q, 4)
    assert path.read_text().splitlines()[0] == "RAGIDX 1 16 10"


def test_round_trip_empty(tmp_path):
    path = tmp_path / "empty.idx"
    index_save(VectorIndex(7), path)
    loaded = index_load(path)
    assert loaded.dim == 7 and len(loaded) == 0


@pytest.mark.parametrize(
    "text",
    [
        "",
        "NOTIDX 1 2 0\n",
        "RAGIDX 1 x 0\n",
        "RAGIDX 1 2 2\na\t1.0,0.0\n",
        "RAGIDX 1 2 1\na\t1.0\n",
        "RAGIDX 1 2 1\na 1.0,0.0\n",
        "RAGIDX 1 0 0\n",
        "RAGIDX 9 2 0\n",
    ],
)
def test_corrupt_files(tmp_path, text):
    path = tmp_path / "bad.idx"
    path.write_text(text)
    with pytest.raises(CorruptIndexFile):
        index_load(path)


def test_truncated_file(tmp_path):
    rng = np.random.default_rng(5)
    path = tmp_path / "t.idx"
    index_save(build(unit_rows(rng, 6, 8)), path)
    data = path.read_text()
    path.write_text(data[: len(data) // 2])
    with pytest.raises(CorruptIndexFile):
        index_load(path)

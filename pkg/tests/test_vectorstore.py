import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from llmbroker.errors import CorruptStore, DimMismatch, ZeroQuery
from llmbroker.vectorstore import VectorStore, cosine

from oracles import brute_top_k


def unit(i, dim=4):
    v = [0.0] * dim
    v[i] = 1.0
    return v


def test_fresh_store_is_empty(tmp_path):
    store = VectorStore.open(tmp_path / "s.vecdb", 4)
    assert len(store) == 0
    assert store.search(unit(0), 3) == []


def test_first_ids_and_seq(tmp_path):
    with VectorStore.open(tmp_path / "s.vecdb", 4) as store:
        assert store.insert("a", unit(0)) == "00000000"
        assert store.insert("b", unit(1)) == "00000001"
        assert [r.seq for r in store.records] == [0, 1]


def test_persistence_round_trip(tmp_path):
    path = tmp_path / "s.vecdb"
    with VectorStore.open(path, 4) as store:
        store.insert("alpha", [0.1, 0.2, 0.3, 0.4], {"source": "x"})
        store.insert("béta", [1, 0, 0, 0])
        before = list(store.records)
    reopened = VectorStore.open(path)
    assert reopened.records == before
    assert reopened.dim == 4 and reopened.warnings == []
    lines = path.read_text(encoding="utf-8").splitlines()
    assert json.loads(lines[0]) == {"version": 1, "dim": 4}


def test_dim_mismatch(tmp_path):
    store = VectorStore.open(tmp_path / "s.vecdb", 64)
    with pytest.raises(DimMismatch):
        store.insert("x", [1.0] * 65)
    store.insert("y", [1.0] * 64)
    with pytest.raises(DimMismatch):
        store.search([1.0] * 3, 1)
    store.close()
    with pytest.raises(DimMismatch):
        VectorStore.open(tmp_path / "s.vecdb", 32)


def test_self_match_scores_one(tmp_path):
    store = VectorStore.open(tmp_path / "s.vecdb", 3)
    e = [0.3, -0.2, 0.9]
    store.insert("e", e)
    (hit,) = store.search(e, 1)
    assert abs(hit.score - 1.0) < 1e-9


def test_zero_query(tmp_path):
    store = VectorStore.open(tmp_path / "s.vecdb", 2)
    store.insert("a", [1, 0])
    with pytest.raises(ZeroQuery):
        store.search([0, 0], 1)


def test_ties_broken_by_insertion_order(tmp_path):
    store = VectorStore.open(tmp_path / "s.vecdb", 2)
    for name in "abc":
        store.insert(name, [1.0, 1.0])
    store.insert("d", [1.0, 0.0])
    assert [h.record.text for h in store.search([1.0, 1.0], 3)] == ["a", "b", "c"]


def test_fewer_results_than_k(tmp_path):
    store = VectorStore.open(tmp_path / "s.vecdb", 2)
    store.insert("a", [1, 0])
    assert len(store.search([1, 1], 10)) == 1


def test_matches_brute_force_on_200_records(tmp_path):
    rng = random.Random(11)
    store = VectorStore.open(tmp_path / "s.vecdb", 16)
    records = []
    for i in range(200):
        emb = [rng.gauss(0, 1) for _ in range(16)]
        records.append((store.insert(f"r{i}", emb), emb))
    for _ in range(20):
        q = [rng.gauss(0, 1) for _ in range(16)]
        hits = store.search(q, 5)
        expected = brute_top_k(records, q, 5)
        assert [h.record.id for h in hits] == [rid for rid, _ in expected]
        for h, (_, score) in zip(hits, expected):
            assert abs(h.score - score) < 1e-9


def test_truncated_last_line_dropped(tmp_path):
    path = tmp_path / "s.vecdb"
    with VectorStore.open(path, 2) as store:
        store.insert("a", [1, 0])
        store.insert("b", [0, 1])
    data = path.read_bytes()
    path.write_bytes(data[:-7])
    store = VectorStore.open(path)
    assert [r.text for r in store.records] == ["a"]
    assert store.warnings
    # the torn tail is cut off, so the next insert lands on a clean line
    store.insert("c", [1, 1])
    store.close()
    assert [r.text for r in VectorStore.open(path).records] == ["a", "c"]


def test_missing_final_newline_dropped(tmp_path):
    path = tmp_path / "s.vecdb"
    with VectorStore.open(path, 2) as store:
        store.insert("a", [1, 0])
        store.insert("b", [0, 1])
    path.write_bytes(path.read_bytes()[:-1])
    assert [r.text for r in VectorStore.open(path).records] == ["a"]


def test_corrupt_header(tmp_path):
    path = tmp_path / "s.vecdb"
    path.write_text('{"version": 9, "dim": 2}\n')
    with pytest.raises(CorruptStore):
        VectorStore.open(path)
    path.write_text("not json\n")
    with pytest.raises(CorruptStore):
        VectorStore.open(path)


def test_corrupt_middle_record(tmp_path):
    path = tmp_path / "s.vecdb"
    with VectorStore.open(path, 2) as store:
        for t in "abc":
            store.insert(t, [1, 0])
    lines = path.read_bytes().split(b"\n")
    lines[2] = b'{"broken'
    path.write_bytes(b"\n".join(lines))
    with pytest.raises(CorruptStore):
        VectorStore.open(path)


def test_torn_writes_at_every_cut(tmp_path):
    """Truncating the file anywhere keeps every fully written record intact."""
    path = tmp_path / "s.vecdb"
    with VectorStore.open(path, 3) as store:
        for i in range(6):
            store.insert(f"t{i}", [i, 1, -i], {"i": str(i)})
        full = list(store.records)
    data = path.read_bytes()
    ends = [i + 1 for i, b in enumerate(data) if b == 0x0A]
    rng = random.Random(5)
    for cut in sorted(rng.sample(range(len(data) + 1), 60)):
        path.write_bytes(data[:cut])
        store = VectorStore.open(path)
        complete = sum(1 for e in ends[1:] if e <= cut)
        assert store.records == full[:complete]


coords = st.integers(-1000, 1000).map(lambda n: n / 7)


@given(st.lists(st.lists(coords, min_size=4, max_size=4), min_size=1, max_size=30),
       st.lists(coords, min_size=4, max_size=4), st.integers(1, 8))
@settings(max_examples=100, deadline=None)
def test_search_properties(tmp_path_factory, embs, query, k):
    if not all(any(v) for v in embs + [query]):
        return
    store = VectorStore(tmp_path_factory.mktemp("p") / "s.vecdb", 4)
    for i, e in enumerate(embs):
        store.insert(str(i), e)
    hits = store.search(query, k)
    assert len(hits) == min(k, len(embs))
    for a, b in zip(hits, hits[1:]):
        assert a.score > b.score or (a.score == b.score and a.record.seq < b.record.seq)
    for h in hits:
        assert -1 - 1e-9 <= h.score <= 1 + 1e-9
        assert h.score == cosine(query, h.record.embedding)
    store.close()

import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sglayout.errors import EmptyDataset, ParseError, UnknownVocab
from sglayout.geometry import BoundingBox, ExtremePoints, trivial_extreme_points
from sglayout.retrieval import (RETRIEVAL_CATEGORIES, REFERENCE_COUNTS, PatchRecord, RetrievalQuery,
                                baseline_bbox_query, baseline_random_query, build_index,
                                evaluate_retrieval, query_descriptor, query_topk, read_index,
                                write_index)
from sglayout.synth import synth_patch_corpus

UNIT = [0, 0.5, 0.5, 0, 1, 0.5, 0.5, 1, 0.5, 0.5]


def rec(pid, cat, desc=UNIT, box=(0, 0, 10, 10), size=(100, 100)):
    return PatchRecord(pid, cat, pid, BoundingBox(*box), np.array(desc, dtype=float), size)


def random_records(n, seed=0, cats=("a", "b", "c")):
    rng = np.random.default_rng(seed)
    out = []
    for pid in rng.permutation(n):
        x, y = rng.uniform(0, 50, 2)
        out.append(rec(int(pid), cats[int(rng.integers(len(cats)))], rng.uniform(size=10),
                       (x, y, x + rng.uniform(1, 50), y + rng.uniform(1, 50))))
    return out


def test_grouping_counts():
    idx = build_index([rec(0, "cat"), rec(1, "dog"), rec(2, "cat")])
    assert dict(idx.counts) == {"cat": 2, "dog": 1}
    assert idx.group("cat").ids.tolist() == [0, 2]


def test_empty_and_unknown():
    with pytest.raises(EmptyDataset):
        build_index([])
    with pytest.raises(UnknownVocab):
        build_index([rec(0, "cat")], vocab=["dog"])
    idx = build_index([rec(0, "cat")])
    for call in (lambda: query_topk(idx, "dog", UNIT, 1),
                 lambda: baseline_bbox_query(idx, "dog", (0.1, 0.1), 1),
                 lambda: baseline_random_query(idx, "dog", 1, 0)):
        with pytest.raises(UnknownVocab):
            call()


def test_checksum_stable_and_index_immutable():
    recs = random_records(40)
    a, b = build_index(recs), build_index(list(reversed(recs)))
    assert a.checksum == b.checksum
    g = a.group("a")
    with pytest.raises(ValueError):
        g.descriptors[0, 0] = 5.0
    query_topk(a, "a", UNIT, 3)
    baseline_bbox_query(a, "a", (0.1, 0.2), 3)
    baseline_random_query(a, "a", 3, 1)
    assert a._checksum() == a.checksum


def test_self_retrieval_every_patch():
    recs = random_records(60, seed=1)
    idx = build_index(recs)
    for r in recs:
        pid, dist = query_topk(idx, r.category, r.descriptor, 1)[0]
        assert dist == 0.0
        assert pid == r.patch_id


def test_distances_by_hand_and_tie_break():
    d1 = np.zeros(10)
    d2 = d1.copy()
    d2[3] = 0.1
    idx = build_index([rec(7, "x", d2), rec(5, "x", d1), rec(3, "x", d1)])
    res = query_topk(idx, "x", d1, 3)
    assert [p for p, _ in res] == [3, 5, 7]
    assert res[0][1] == 0.0 and res[2][1] == pytest.approx(0.1, abs=1e-15)
    assert len(query_topk(idx, "x", d1, 50)) == 3
    with pytest.raises(ValueError):
        query_topk(idx, "x", d1, 0)


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.integers(1, 30))
def test_ranking_matches_sort_oracle(seed, k):
    recs = random_records(30, seed)
    idx = build_index(recs)
    q = np.random.default_rng(seed + 1).uniform(size=10)
    got = query_topk(idx, "a", q, k)
    cands = sorted((float(np.linalg.norm(r.descriptor - q)), r.patch_id)
                   for r in recs if r.category == "a")
    assert [p for p, _ in got] == [p for _, p in cands[:k]]
    dists = [d for _, d in got]
    assert dists == sorted(dists)


def test_bbox_baseline():
    idx = build_index([rec(0, "x", box=(0, 0, 20, 40)), rec(1, "x", box=(0, 0, 20, 10))])
    res = baseline_bbox_query(idx, "x", (0.2, 0.1), 2)
    assert res[0] == (1, 0.0)
    assert res[1][0] == 0 and res[1][1] == pytest.approx(0.3, abs=1e-15)


def test_bbox_baseline_resolution_independent():
    small = [rec(i, "x", box=(0, 0, 10 + 3 * i, 30 - 2 * i), size=(100, 100)) for i in range(8)]
    big = [rec(i, "x", box=(0, 0, 4 * (10 + 3 * i), 4 * (30 - 2 * i)), size=(400, 400))
           for i in range(8)]
    q = (0.17, 0.21)
    a = baseline_bbox_query(build_index(small), "x", q, 8)
    b = baseline_bbox_query(build_index(big), "x", q, 8)
    assert [p for p, _ in a] == [p for p, _ in b]


def test_random_baseline_seeded_and_permutation():
    idx = build_index([rec(i, "x") for i in range(12)])
    a = baseline_random_query(idx, "x", 4, seed=9)
    assert [p for p, _ in a] == [p for p, _ in baseline_random_query(idx, "x", 4, seed=9)]
    assert all(np.isnan(d) for _, d in a)
    full = baseline_random_query(idx, "x", 12, seed=3)
    assert sorted(p for p, _ in full) == list(range(12))
    assert len(baseline_random_query(idx, "x", 40, seed=3)) == 12


def test_random_baseline_uniform_chi_square():
    idx = build_index([rec(i, "x") for i in range(5)])
    draws = 10_000
    counts = Counter(baseline_random_query(idx, "x", 1, seed=s)[0][0] for s in range(draws))
    expected = draws / 5
    chi2 = sum((counts[i] - expected) ** 2 / expected for i in range(5))
    assert chi2 < 18.47   # 4 degrees of freedom, p = 0.001


def test_query_descriptor_falls_back_on_collapse():
    flat = ExtremePoints((0.3, 0.5), (0.3, 0.5), (0.3, 0.5), (0.3, 0.5), (0.3, 0.5), "normalized")
    np.testing.assert_allclose(query_descriptor(flat), UNIT)
    ep = trivial_extreme_points(BoundingBox(0.1, 0.2, 0.5, 0.9, "normalized"))
    np.testing.assert_allclose(query_descriptor(ep), UNIT)


def test_evaluate_self_retrieval_iou_one():
    corpus = synth_patch_corpus(seed=0, per_category=6)
    idx = build_index([r for r, _ in corpus])
    masks = {r.patch_id: m for r, m in corpus}
    queries = [RetrievalQuery(r.category, r.descriptor, r.bbox_dims, m) for r, m in corpus]
    report = evaluate_retrieval(idx, queries, "ep", masks)
    assert report.top1 == 1.0 and report.top5 == 1.0
    assert set(report.per_category) == set(idx.vocab)
    d = report.to_dict()
    assert d["method"] == "ep" and d["top1_iou"] == 1.0
    with pytest.raises(UnknownVocab):
        evaluate_retrieval(idx, [RetrievalQuery("ghost", queries[0].descriptor, (0.1, 0.1),
                                                queries[0].mask)], "ep", masks)
    with pytest.raises(ValueError):
        evaluate_retrieval(idx, queries[:1], "nearest", masks)


def test_evaluate_top5_at_least_top1():
    db = synth_patch_corpus(seed=1, per_category=8)
    held_out = synth_patch_corpus(seed=2, per_category=3, first_id=10_000)
    idx = build_index([r for r, _ in db])
    masks = {r.patch_id: m for r, m in db}
    queries = [RetrievalQuery(r.category, r.descriptor, r.bbox_dims, m) for r, m in held_out]
    for method in ("ep", "bb", "random"):
        rep = evaluate_retrieval(idx, queries, method, masks)
        assert 0 <= rep.top1 <= rep.top5 <= 1


def test_index_file_round_trip(tmp_path):
    recs = random_records(25, seed=4)
    idx = build_index(recs)
    path = tmp_path / "index.jsonl"
    write_index(path, idx)
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    assert header["format"] == "sgl-index-v1" and header["counts"] == dict(idx.counts)
    first = json.loads(lines[1])
    assert {"id", "cat", "bbox", "desc", "mask"} <= set(first)
    back = read_index(path)
    assert back.checksum == idx.checksum
    for pid, r in idx.records.items():
        assert back.records[pid].descriptor.tobytes() == r.descriptor.tobytes()
        assert back.records[pid].bbox == r.bbox


def test_index_file_errors(tmp_path):
    idx = build_index(random_records(5))
    path = tmp_path / "i.jsonl"
    write_index(path, idx)
    lines = path.read_text().splitlines()
    d = json.loads(lines[1])
    d["desc"][0] = 0.123456
    (tmp_path / "tampered.jsonl").write_text("\n".join([lines[0], json.dumps(d)] + lines[2:]))
    with pytest.raises(ParseError):
        read_index(tmp_path / "tampered.jsonl")
    (tmp_path / "bad.jsonl").write_text(lines[0] + "\n{not json\n")
    with pytest.raises(ParseError):
        read_index(tmp_path / "bad.jsonl")
    (tmp_path / "fmt.jsonl").write_text('{"format": "other"}\n')
    with pytest.raises(ParseError):
        read_index(tmp_path / "fmt.jsonl")


def test_reference_patch_reference_counts():
    assert len(RETRIEVAL_CATEGORIES) == 23
    assert REFERENCE_COUNTS["bear"] == 1152 and REFERENCE_COUNTS["chair"] == 15292
    assert min(REFERENCE_COUNTS.values()) == 1051 and max(REFERENCE_COUNTS.values()) == 15292

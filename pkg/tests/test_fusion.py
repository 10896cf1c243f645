import pytest
from hypothesis import given, settings, strategies as st

from odpkit.annotations import Annotation
from odpkit.fusion import (
    MaskBB,
    MergeBB,
    SmallBB,
    VoteFilter,
    mask_bb,
    merge_bb,
    run_filter_chain,
    small_bb,
    stage_from_dict,
    stage_to_dict,
    vote_filter,
)
from odpkit.geometry import BoundingBox, expand, giou, iou
from oracles import box_iou, hull, transitive_closure


def det(x1, y1, x2, y2, cls=0, score=0.5, image=1, source="m"):
    return Annotation(image, BoundingBox(x1, y1, x2, y2), cls, score=score, source=source)


# --- SmallBB ----------------------------------------------------------------


def test_small_bb_examples():
    dets = [det(0, 0, 2, 2), det(0, 0, 10, 10), det(0, 0, 10, 3)]
    assert small_bb(dets, 5, 5) == [dets[1]]
    assert small_bb(dets, 0, 0) == dets


# --- MergeBB ----------------------------------------------------------------


def test_merge_single_edge_gives_hull():
    a, b = det(0, 0, 10, 10, score=0.4), det(0, 0, 10, 5, score=0.9, source="n")
    (m,) = merge_bb([a, b], threshold=0.3)
    assert m.box == BoundingBox(0, 0, 10, 10) and m.score == 0.9 and m.source == "merged(m,n)"


def test_merge_below_threshold_untouched():
    a, b = det(0, 0, 10, 10), det(8, 0, 18, 10)
    assert iou(a.box, b.box) < 0.3
    assert merge_bb([a, b], threshold=0.3) == [a, b]


def test_merge_chain_transitive():
    a, b, c = det(0, 0, 10, 10), det(4, 0, 14, 10), det(8, 0, 18, 10)
    assert iou(a.box, b.box) >= 0.4 and iou(a.box, c.box) == pytest.approx(2 / 18)
    (m,) = merge_bb([a, b, c], threshold=0.4)
    assert m.box == BoundingBox(0, 0, 18, 10)


def test_merge_class_modes():
    a, b = det(0, 0, 10, 10, cls=0, score=0.3), det(1, 1, 10, 10, cls=1, score=0.8)
    assert len(merge_bb([a, b], class_mode="same_class")) == 2
    (m,) = merge_bb([a, b], class_mode="all_classes")
    assert m.category_id == 1


def test_merge_threshold_inclusive():
    a, b = det(0, 0, 10, 10), det(5, 0, 15, 10)
    assert merge_bb([a, b], threshold=iou(a.box, b.box)) != [a, b]


def test_merge_giou_metric_accepts_negative_threshold():
    a, b = det(0, 0, 10, 10), det(12, 0, 22, 10)
    assert len(merge_bb([a, b], metric="giou", threshold=-0.2)) == 1
    with pytest.raises(ValueError):
        MergeBB("giou", -1.5)
    with pytest.raises(ValueError):
        MergeBB("iou", -0.1)


def _reference_merge(boxes, classes, threshold, same_class):
    """Closure-based clustering repeated until no two clusters link."""
    items = list(zip(boxes, classes))
    while True:
        def linked(i, j):
            if same_class and items[i][1] != items[j][1]:
                return False
            return box_iou(items[i][0], items[j][0]) >= threshold

        reach = transitive_closure(len(items), linked)
        seen, merged = set(), []
        for i in range(len(items)):
            if i in seen:
                continue
            members = [j for j in range(len(items)) if reach[i][j]]
            seen.update(members)
            merged.append((hull([items[j][0] for j in members]), items[members[0]][1]))
        if len(merged) == len(items):
            return sorted(items)
        items = merged


small_box = st.tuples(st.integers(0, 40), st.integers(0, 40), st.integers(1, 15), st.integers(1, 15)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3])
)


@settings(max_examples=150)
@given(st.lists(st.tuples(small_box, st.integers(0, 1)), max_size=8), st.sampled_from([0.1, 0.3, 0.5]), st.booleans())
def test_merge_matches_closure_oracle(items, thr, same_class):
    dets = [det(*b, cls=c, score=0.5) for b, c in items]
    out = merge_bb(dets, threshold=thr, class_mode="same_class" if same_class else "all_classes")
    got = sorted((d.box.as_tuple(), d.category_id) for d in out)
    ref = _reference_merge([b for b, _ in items], [c for _, c in items], thr, same_class)
    if same_class:
        assert got == ref
    else:
        assert [g[0] for g in got] == [r[0] for r in ref]


@settings(max_examples=150)
@given(st.lists(st.tuples(small_box, st.integers(0, 2), st.floats(0, 1)), max_size=12), st.sampled_from(["iou", "giou"]))
def test_merge_invariants(items, metric):
    thr = 0.3 if metric == "iou" else -0.1
    fn = iou if metric == "iou" else giou
    dets = [det(*b, cls=c, score=s) for b, c, s in items]
    out = merge_bb(dets, metric=metric, threshold=thr)
    assert len(out) <= len(dets)
    for d in dets:
        assert any(o.category_id == d.category_id and o.box.contains(d.box) for o in out)
    for i, a in enumerate(out):
        for b in out[i + 1 :]:
            if a.category_id == b.category_id:
                assert fn(a.box, b.box) < thr
    again = merge_bb(out, metric=metric, threshold=thr)
    assert [(d.box, d.category_id) for d in again] == [(d.box, d.category_id) for d in out]


# --- MaskBB -----------------------------------------------------------------


def test_mask_empty():
    assert mask_bb([]) == []


def test_mask_single_centered_box():
    d = det(400, 300, 440, 340)
    (out,) = mask_bb([d], 1.5, (3, 3), BoundingBox(0, 0, 800, 600))
    # direct simulation: expanded box split into 20 px cells, all of which touch the original
    e = expand(d.box, 1.5)
    assert out.box == e and out.box.contains(d.box) and out.source == "maskbb"


def test_mask_drops_cells_missing_the_original():
    # two boxes far apart merge into one hull only after expansion; the empty middle column of cells is discarded
    a, b = det(0, 0, 10, 10), det(20, 0, 30, 10)
    out = mask_bb([a, b], 2.0, (3, 3))
    assert len(out) == 2
    assert all(any(o.box.contains(x.box) for o in out) for x in (a, b))


def test_mask_figure_topology():
    layout = [det(100, 100, 104, 104), det(115, 115, 119, 119), det(300, 300, 320, 320), det(305, 310, 330, 328), det(310, 305, 325, 325)]
    assert len(mask_bb(layout, 4.0, (3, 3), BoundingBox(0, 0, 640, 480))) == 3


@settings(max_examples=100)
@given(st.lists(st.tuples(small_box, st.integers(0, 1)), min_size=1, max_size=8), st.sampled_from([1.0, 1.5, 3.0]))
def test_mask_invariants(items, factor):
    bounds = BoundingBox(0, 0, 50, 50)
    dets = [det(*b, cls=c) for b, c in items]
    out = mask_bb(dets, factor, (3, 3), bounds)
    for o in out:
        assert bounds.contains(o.box)
        assert any(d.category_id == o.category_id and box_iou(o.box.as_tuple(), d.box.as_tuple()) > 0 for d in dets)
    for d in dets:
        cx, cy = d.box.center
        assert any(o.category_id == d.category_id and o.box.contains_point(cx, cy) for o in out)


# --- VoteFilter -------------------------------------------------------------


def test_vote_three_of_five():
    car = (100, 100, 140, 120)
    per_model = {
        "a": [det(*car, source="a")],
        "b": [det(101, 100, 141, 120, source="b")],
        "c": [det(100, 101, 140, 121, source="c")],
        "d": [],
        "e": [det(400, 400, 420, 420, source="e")],
    }
    (out,) = vote_filter(per_model, 3, 0.5)
    assert out.box == BoundingBox(100, 100, 141, 121)


def test_vote_single_model_and_class_split():
    assert vote_filter({"a": [det(0, 0, 9, 9)], "b": []}, 2) == []
    per_model = {m: [det(0, 0, 10, 10, cls=0 if m in "ab" else 2)] for m in "abcd"}
    assert vote_filter(per_model, 3) == []
    with pytest.raises(ValueError):
        vote_filter(per_model, 5)


@settings(max_examples=60)
@given(st.lists(st.tuples(st.integers(0, 3), small_box, st.integers(0, 1)), max_size=10), st.integers(1, 3), st.permutations("wxyz"))
def test_vote_model_renaming_invariant(items, k, names):
    per_model = {m: [] for m in "abcd"}
    for m, b, c in items:
        per_model["abcd"[m]].append(det(*b, cls=c))
    renamed = {names[i]: per_model[m] for i, m in enumerate("abcd")}
    strip = lambda ds: sorted((d.box.as_tuple(), d.category_id) for d in ds)
    assert strip(vote_filter(per_model, k)) == strip(vote_filter(renamed, k))


# --- chain ------------------------------------------------------------------


def test_chain_identity_and_composition():
    dets = [det(0, 0, 2, 2), det(10, 10, 30, 30), det(12, 12, 30, 30)]
    assert run_filter_chain(dets, []).detections == dets
    stages = [SmallBB(5, 5), MergeBB(threshold=0.3)]
    res = run_filter_chain(dets, stages)
    assert res.detections == merge_bb(small_bb(dets, 5, 5), threshold=0.3)
    assert res.counts == [("input", 3), ("1:SmallBB", 2), ("2:MergeBB", 1)]


@settings(max_examples=60)
@given(st.lists(st.tuples(small_box, st.integers(0, 2)), max_size=15))
def test_chain_counts_non_increasing(items):
    dets = [det(*b, cls=c) for b, c in items]
    res = run_filter_chain(dets, [SmallBB(3, 3), MergeBB(threshold=0.3, class_mode="all_classes")])
    ns = [n for _, n in res.counts]
    assert ns == sorted(ns, reverse=True)


def test_stage_dict_round_trip():
    for stage in (SmallBB(3, 4), MergeBB("giou", 0.1, "all_classes"), MaskBB(2.0, (2, 4)), VoteFilter(3, 0.6)):
        assert stage_from_dict(stage_to_dict(stage)) == stage
    with pytest.raises(ValueError):
        stage_from_dict({"type": "Blur"})
    with pytest.raises(ValueError):
        stage_from_dict({"type": "SmallBB", "min_x": 3})

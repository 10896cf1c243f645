
import pytest
from hypothesis import given, settings, strategies as st

from odpkit.annotations import Annotation, ClassLabel, ImageRecord
from odpkit.consensus import ConsensusConfig, InsufficientModelsError, build_consensus
from odpkit.evaluation import ImageMismatchError
from odpkit.geometry import BoundingBox
from oracles import consensus_oracle

IMAGES = [ImageRecord(1, "a.png", 200, 200), ImageRecord(2, "b.png", 200, 200)]
CLASSES = [ClassLabel(0, "vehicle"), ClassLabel(1, "human")]


def d(x1, y1, x2, y2, score, cls=0, image=1):
    return Annotation(image, BoundingBox(x1, y1, x2, y2), cls, score=score)


def run(per_model, **cfg):
    return build_consensus(per_model, IMAGES, CLASSES, ConsensusConfig(**cfg))


def test_two_of_four_agree():
    per_model = {"a": [d(10, 10, 50, 30, 0.6)], "b": [d(12, 10, 52, 30, 0.7)], "c": [], "e": []}
    out = run(per_model)
    assert len(out.annotations) == 1
    ann = out.annotations[0]
    assert ann.box == BoundingBox(12, 10, 52, 30) and ann.score is None and ann.category_id == 0


def test_lone_detection_dropped():
    assert run({"a": [d(0, 0, 10, 10, 0.9)], "b": [], "c": []}).annotations == []


def test_same_model_pair_dropped():
    assert run({"a": [d(0, 0, 10, 10, 0.9), d(0, 0, 10, 11, 0.8)], "b": []}).annotations == []


def test_class_and_confidence_requirements():
    assert run({"a": [d(0, 0, 10, 10, 0.9, cls=0)], "b": [d(0, 0, 10, 10, 0.9, cls=1)]}).annotations == []
    assert run({"a": [d(0, 0, 10, 10, 0.9)], "b": [d(0, 0, 10, 10, 0.49)]}).annotations == []
    assert len(run({"a": [d(0, 0, 10, 10, 0.9)], "b": [d(0, 0, 10, 10, 0.5)]}).annotations) == 1


def test_errors():
    with pytest.raises(InsufficientModelsError):
        run({"a": []})
    with pytest.raises(ImageMismatchError):
        run({"a": [d(0, 0, 1, 1, 0.9, image=9)], "b": []})
    with pytest.raises(ValueError):
        ConsensusConfig(iou_min=1.5)


def test_output_covers_all_images():
    out = run({"a": [], "b": []})
    assert [im.id for im in out.images] == [1, 2]


@st.composite
def instances(draw, max_models=4, max_dets=8):
    models = [f"m{i}" for i in range(draw(st.integers(2, max_models)))]
    per_model = {m: [] for m in models}
    centres = [(40, 40), (48, 44), (120, 120)]
    for _ in range(draw(st.integers(0, max_dets))):
        cx, cy = draw(st.sampled_from(centres))
        dx, dy = draw(st.integers(-6, 6)), draw(st.integers(-6, 6))
        per_model[draw(st.sampled_from(models))].append(
            d(cx + dx - 15, cy + dy - 10, cx + dx + 15, cy + dy + 10, draw(st.floats(0.3, 1.0)), draw(st.integers(0, 1)), draw(st.integers(1, 2)))
        )
    return per_model


def _as_tuples(per_model):
    return [(m, x.image_id, x.category_id, x.box.as_tuple(), x.score) for m, xs in per_model.items() for x in xs]


def _emitted(ds):
    return sorted((a.image_id, a.category_id, a.box.as_tuple()) for a in ds.annotations)


@settings(max_examples=150, deadline=None)
@given(instances(), st.sampled_from([0.3, 0.5]), st.sampled_from([0.3, 0.5, 0.7]), st.integers(1, 3))
def test_matches_subset_oracle(per_model, conf, iou_min, k):
    if len(per_model) < k:
        return
    got = _emitted(build_consensus(per_model, IMAGES, CLASSES, ConsensusConfig(conf, iou_min, k)))
    assert got == consensus_oracle(_as_tuples(per_model), conf, iou_min, k)


@settings(max_examples=100, deadline=None)
@given(instances(), st.data())
def test_renaming_and_permutation_invariant(per_model, data):
    names = list(per_model)
    perm = data.draw(st.permutations(names))
    renamed = {f"z{perm.index(m)}": list(reversed(per_model[m])) for m in names}
    assert _emitted(run(per_model)) == _emitted(run(renamed))


@settings(max_examples=100, deadline=None)
@given(instances())
def test_seed_box_policy(per_model):
    inputs = {(x.image_id, x.category_id, x.box.as_tuple()) for xs in per_model.values() for x in xs}
    assert set(_emitted(run(per_model))) <= inputs


@settings(max_examples=100, deadline=None)
@given(instances())
def test_min_models_monotone(per_model):
    counts = [len(run(per_model, min_models=k).annotations) for k in range(1, len(per_model) + 1)]
    assert counts == sorted(counts, reverse=True)

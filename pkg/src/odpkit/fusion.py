"""Bounding-box filters and the filter chain.

The filters operate on detections of any number of images; work is done per
image and outputs are returned grouped by ascending image id. All overlap
comparisons are inclusive (``metric >= threshold``).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, fields, replace
from typing import Iterable, Mapping, Sequence, Union

from .annotations import Annotation
from .geometry import BoundingBox, expand, giou, intersection_area, iou, split_grid, union_box

METRICS = {"iou": iou, "giou": giou}
CLASS_MODES = ("same_class", "all_classes")


@dataclass(frozen=True)
class SmallBB:
    min_w: float = 0.0
    min_h: float = 0.0


@dataclass(frozen=True)
class MergeBB:
    metric: str = "iou"
    threshold: float = 0.3
    class_mode: str = "same_class"

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.class_mode not in CLASS_MODES:
            raise ValueError(f"unknown class_mode {self.class_mode!r}")
        lo = 0.0 if self.metric == "iou" else -1.0
        if not lo <= self.threshold <= 1.0:
            raise ValueError(f"{self.metric} threshold {self.threshold} outside [{lo}, 1]")


@dataclass(frozen=True)
class MaskBB:
    expand_factor: float = 1.5
    grid: tuple[int, int] = (3, 3)

    def __post_init__(self):
        if not self.expand_factor >= 1:
            raise ValueError("expand_factor must be >= 1")
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise ValueError(f"grid dimensions must be >= 1, got {self.grid}")


@dataclass(frozen=True)
class VoteFilter:
    min_votes: int = 1
    iou_threshold: float = 0.5

    def __post_init__(self):
        if self.min_votes < 1:
            raise ValueError("min_votes must be >= 1")
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must be within [0, 1]")


Stage = Union[SmallBB, MergeBB, MaskBB, VoteFilter]
STAGE_TYPES = {cls.__name__: cls for cls in (SmallBB, MergeBB, MaskBB, VoteFilter)}


def stage_from_dict(raw: Mapping) -> Stage:
    """Build a stage from ``{"type": "MergeBB", "threshold": 0.3, ...}``."""
    raw = dict(raw)
    kind = raw.pop("type", None)
    if kind not in STAGE_TYPES:
        raise ValueError(f"unknown filter type {kind!r}; expected one of {sorted(STAGE_TYPES)}")
    cls = STAGE_TYPES[kind]
    unknown = set(raw) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {kind} parameters: {sorted(unknown)}")
    if "grid" in raw:
        raw["grid"] = tuple(raw["grid"])
    return cls(**raw)


def stage_to_dict(stage: Stage) -> dict:
    out = {"type": type(stage).__name__}
    for f in fields(stage):
        v = getattr(stage, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def _by_image(dets: Iterable[Annotation]) -> dict[int, list[Annotation]]:
    groups: dict[int, list[Annotation]] = {}
    for d in dets:
        groups.setdefault(d.image_id, []).append(d)
    return dict(sorted(groups.items()))


def _contributors(source: str | None) -> list[str]:
    if not source:
        return []
    for prefix in ("merged(", "votes("):
        if source.startswith(prefix) and source.endswith(")"):
            return source[len(prefix) : -1].split(",")
    return [source]


def _max_score(scores: Iterable[float | None]) -> float | None:
    present = [s for s in scores if s is not None]
    return max(present) if present else None


# --- SmallBB ----------------------------------------------------------------


def small_bb(dets: Sequence[Annotation], min_w: float, min_h: float) -> list[Annotation]:
    """Drop boxes narrower than ``min_w`` or shorter than ``min_h``."""
    return [d for d in dets if d.box.width >= min_w and d.box.height >= min_h]


# --- MergeBB ----------------------------------------------------------------


def _components(n: int, linked) -> list[list[int]]:
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if linked(i, j):
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def _fuse(members: list[Annotation], tag: str = "merged") -> Annotation:
    if len(members) == 1:
        return members[0]
    best = max(members, key=lambda d: -1.0 if d.score is None else d.score)
    names = sorted({n for d in members for n in _contributors(d.source)})
    return Annotation(
        image_id=best.image_id,
        box=union_box(d.box for d in members),
        category_id=best.category_id,
        score=_max_score(d.score for d in members),
        source=f"{tag}({','.join(names)})",
    )


def _merge_image(dets: list[Annotation], metric, threshold: float, same_class: bool) -> list[Annotation]:
    current = list(dets)
    while True:
        def linked(i, j):
            a, b = current[i], current[j]
            if same_class and a.category_id != b.category_id:
                return False
            return metric(a.box, b.box) >= threshold

        groups = _components(len(current), linked)
        if all(len(g) == 1 for g in groups):
            return current
        # fused hulls can newly overlap each other, so repeat until stable
        current = [_fuse([current[i] for i in g]) for g in groups]


def merge_bb(
    dets: Sequence[Annotation], metric: str = "iou", threshold: float = 0.3, class_mode: str = "same_class"
) -> list[Annotation]:
    """Replace every cluster of overlapping boxes with its hull.

    Boxes are linked when ``metric(a, b) >= threshold`` (and, in
    ``same_class`` mode, they share a class). Each connected cluster becomes
    one box: the union hull, the highest member confidence and the class of
    the most confident member. Clustering is repeated on the hulls until no
    links remain, so no two outputs of a compatible class reach the
    threshold.
    """
    cfg = MergeBB(metric, threshold, class_mode)
    fn = METRICS[cfg.metric]
    out = []
    for group in _by_image(dets).values():
        out.extend(_merge_image(group, fn, cfg.threshold, cfg.class_mode == "same_class"))
    return out


# --- MaskBB -----------------------------------------------------------------


def _overlap_hulls(boxes: list[BoundingBox]) -> list[BoundingBox]:
    current = list(boxes)
    while True:
        groups = _components(len(current), lambda i, j: intersection_area(current[i], current[j]) > 0)
        if all(len(g) == 1 for g in groups):
            return current
        current = [union_box(current[i] for i in g) for g in groups]


def _touching_groups(keep: list[list[bool]]) -> list[list[tuple[int, int]]]:
    """4-connected groups of kept cells, discovered in row-major order."""
    rows, cols = len(keep), len(keep[0])
    seen = [[False] * cols for _ in range(rows)]
    groups = []
    for r in range(rows):
        for c in range(cols):
            if not keep[r][c] or seen[r][c]:
                continue
            seen[r][c] = True
            queue, group = deque([(r, c)]), []
            while queue:
                cr, cc = queue.popleft()
                group.append((cr, cc))
                for nr, nc in ((cr - 1, cc), (cr + 1, cc), (cr, cc - 1), (cr, cc + 1)):
                    if 0 <= nr < rows and 0 <= nc < cols and keep[nr][nc] and not seen[nr][nc]:
                        seen[nr][nc] = True
                        queue.append((nr, nc))
            groups.append(group)
    return groups


def _mask_class(
    originals: list[Annotation], expand_factor: float, grid: tuple[int, int], bounds: BoundingBox | None
) -> list[Annotation]:
    boxes = [d.box for d in originals]
    hulls = _overlap_hulls([expand(b, expand_factor, bounds) for b in boxes])
    out = []
    for hull in sorted(hulls, key=BoundingBox.as_tuple):
        cells = split_grid(hull, *grid)
        keep = [[any(intersection_area(cell, b) > 0 for b in boxes) for cell in row] for row in cells]
        for group in _touching_groups(keep):
            box = union_box(cells[r][c] for r, c in group)
            touching = [d for d in originals if intersection_area(box, d.box) > 0]
            out.append(
                Annotation(
                    originals[0].image_id,
                    box,
                    originals[0].category_id,
                    score=_max_score(d.score for d in touching),
                    source="maskbb",
                )
            )
    return out


def mask_bb(
    dets: Sequence[Annotation],
    expand_factor: float = 1.5,
    grid: tuple[int, int] = (3, 3),
    image_bounds: Mapping[int, BoundingBox] | BoundingBox | None = None,
) -> list[Annotation]:
    """Four-step mask filter, applied per image and class.

    1. Enlarge every box by ``expand_factor`` (clipped to the image) and
       merge overlapping enlarged boxes into hulls.
    2. Split each hull into a ``grid`` of equal cells.
    3. Discard cells that do not overlap any original box of the class.
    4. Join edge-adjacent surviving cells and emit one hull per group.

    ``image_bounds`` is either a single rectangle for all images or a map
    from image id to its rectangle; missing entries disable clipping.
    """
    MaskBB(expand_factor, tuple(grid))
    out = []
    for image_id, group in _by_image(dets).items():
        if isinstance(image_bounds, BoundingBox):
            bounds = image_bounds
        else:
            bounds = (image_bounds or {}).get(image_id)
        by_class: dict[int, list[Annotation]] = {}
        for d in group:
            by_class.setdefault(d.category_id, []).append(d)
        for cls in sorted(by_class):
            out.extend(_mask_class(by_class[cls], expand_factor, tuple(grid), bounds))
    return out


# --- voting -----------------------------------------------------------------


def _canonical(d: Annotation):
    return (d.image_id, d.category_id, -(d.score or 0.0), d.box.as_tuple())


def vote_filter(per_model: Mapping[str, Sequence[Annotation]], min_votes: int, iou_threshold: float = 0.5) -> list[Annotation]:
    """Keep boxes confirmed by at least ``min_votes`` distinct models.

    A detection's votes are the models (its own included) that have a
    same-class box on the same image with IoU >= ``iou_threshold`` to it.
    Surviving boxes are then merged like :func:`merge_bb` in same-class mode.
    """
    VoteFilter(min_votes, iou_threshold)
    if min_votes > len(per_model):
        raise ValueError(f"min_votes={min_votes} exceeds the number of models ({len(per_model)})")
    tagged = [(model, d) for model, dets in per_model.items() for d in dets]
    buckets: dict[tuple[int, int], list[tuple[str, Annotation]]] = {}
    for model, d in tagged:
        buckets.setdefault((d.image_id, d.category_id), []).append((model, d))

    survivors = []
    for members in buckets.values():
        for model, d in members:
            voters = {m for m, e in members if iou(d.box, e.box) >= iou_threshold}
            if len(voters) >= min_votes:
                survivors.append(replace(d, source=model))
    survivors.sort(key=_canonical)
    out = []
    for group in _by_image(survivors).values():
        out.extend(_merge_image(group, iou, iou_threshold, same_class=True))
    return out


# --- chain ------------------------------------------------------------------


@dataclass
class ChainResult:
    detections: list[Annotation]
    counts: list[tuple[str, int]]

    def report(self) -> dict:
        return {"stages": [{"stage": name, "boxes": n} for name, n in self.counts]}


def apply_stage(
    stage: Stage, dets: Sequence[Annotation], image_bounds: Mapping[int, BoundingBox] | None = None
) -> list[Annotation]:
    if isinstance(stage, SmallBB):
        return small_bb(dets, stage.min_w, stage.min_h)
    if isinstance(stage, MergeBB):
        return merge_bb(dets, stage.metric, stage.threshold, stage.class_mode)
    if isinstance(stage, MaskBB):
        return mask_bb(dets, stage.expand_factor, stage.grid, image_bounds)
    if isinstance(stage, VoteFilter):
        per_model: dict[str, list[Annotation]] = {}
        for d in dets:
            per_model.setdefault(d.source or "", []).append(d)
        return vote_filter(per_model, stage.min_votes, stage.iou_threshold)
    raise TypeError(f"not a filter stage: {stage!r}")


def run_filter_chain(
    dets: Sequence[Annotation], stages: Sequence[Stage], image_bounds: Mapping[int, BoundingBox] | None = None
) -> ChainResult:
    """Apply ``stages`` in order, recording the box count after each one."""
    current = list(dets)
    counts = [("input", len(current))]
    for i, stage in enumerate(stages, start=1):
        current = apply_stage(stage, current, image_bounds)
        counts.append((f"{i}:{type(stage).__name__}", len(current)))
    return ChainResult(current, counts)

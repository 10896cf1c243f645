import json
from pathlib import Path

import numpy as np
import pytest

from odpkit.annotations import AnnotatedDataset, Annotation, ClassLabel, ImageRecord
from odpkit.geometry import BoundingBox

_acceptance: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(id, text): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    ac_id, text = marker.args
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when == "call" or failed:
        prev = _acceptance.get(ac_id, (None, text))[0]
        status = "FAIL" if failed or prev == "FAIL" else "PASS"
        _acceptance[ac_id] = (status, text)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for ac_id in sorted(_acceptance):
        status, text = _acceptance[ac_id]
        terminalreporter.write_line(f"{ac_id} {status}  {text}")


CLASSES = [ClassLabel(0, "vehicle"), ClassLabel(1, "human"), ClassLabel(2, "fire")]


@pytest.fixture
def classes():
    return list(CLASSES)


def make_dataset(boxes, width=640, height=480, classes=CLASSES):
    """``boxes``: {image_id: [(x1, y1, x2, y2, class_id), ...]}."""
    images = [ImageRecord(i, f"img_{i:04d}.png", width, height) for i in sorted(boxes)]
    anns = [
        Annotation(i, BoundingBox(*b[:4]), b[4])
        for i in sorted(boxes)
        for b in boxes[i]
    ]
    return AnnotatedDataset(images, anns, list(classes)).renumbered()


@pytest.fixture
def small_dataset():
    return make_dataset(
        {
            1: [(10, 10, 50, 40, 0), (100, 100, 120, 140, 1)],
            2: [(200, 50, 260, 90, 0)],
            3: [],
        }
    )


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj))
    return path


def rgb(h, w, value=(40, 90, 40)):
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[...] = value
    return img


def random_detection_problem(rng, n_classes=3, max_boxes=20, integer=False):
    """Random gt/prediction pair for metric cross-checks.

    Returns ``(gts, preds, image_ids, class_ids)`` as plain tuples:
    gts ``(image, class, box)``, preds ``(image, class, box, score)``.
    """
    n_images = int(rng.integers(1, 5))
    image_ids = list(range(1, n_images + 1))
    class_ids = list(range(n_classes))
    n_gt = int(rng.integers(1, max_boxes + 1))

    def box():
        w = float(np.exp(rng.uniform(np.log(4), np.log(160))))
        h = float(np.exp(rng.uniform(np.log(4), np.log(160))))
        x, y = rng.uniform(0, 300 - w), rng.uniform(0, 300 - h)
        b = (x, y, x + w, y + h)
        return tuple(float(round(v)) for v in b) if integer else b

    gts = []
    for _ in range(n_gt):
        b = box()
        if integer and (b[2] <= b[0] or b[3] <= b[1]):
            continue
        gts.append((int(rng.choice(image_ids)), int(rng.choice(class_ids)), b))
    preds = []
    for im, c, b in gts:
        for _ in range(int(rng.integers(0, 3))):
            w, h = b[2] - b[0], b[3] - b[1]
            j = rng.normal(0, 0.12, 4) * np.array([w, h, w, h])
            nb = (b[0] + j[0], b[1] + j[1], max(b[2] + j[2], b[0] + j[0] + 1), max(b[3] + j[3], b[1] + j[1] + 1))
            if integer:
                nb = tuple(float(round(v)) for v in nb)
            cls = c if rng.random() > 0.15 else int(rng.choice(class_ids))
            preds.append((im, cls, nb, float(rng.uniform(0.01, 1.0))))
    for _ in range(int(rng.integers(0, 6))):
        preds.append((int(rng.choice(image_ids)), int(rng.choice(class_ids)), box(), float(rng.uniform(0.01, 1.0))))
    return gts, preds, image_ids, class_ids


def problem_to_objects(gts, preds, image_ids, class_ids):
    images = [ImageRecord(i, f"{i}.png", 300, 300) for i in image_ids]
    classes = [ClassLabel(c, f"c{c}") for c in class_ids]
    gt_ds = AnnotatedDataset(images, [Annotation(i, BoundingBox(*b), c) for i, c, b in gts], classes).renumbered()
    dets = [Annotation(i, BoundingBox(*b), c, score=s) for i, c, b, s in preds]
    return gt_ds, dets


def build_workspace(root: Path, n_images: int = 6) -> dict:
    """Small on-disk project: images, ground truth, three prediction files, an object library and a config."""
    from odpkit.annotations import FlightMeta, serialize_coco, serialize_coco_results
    from odpkit.detectors import NoiseSpec, synthetic_detect
    from odpkit.imaging import save_image

    rng = np.random.default_rng(1234)
    meta = FlightMeta(40.0, 8.8, 13.2)
    images, boxes = [], {}
    for i in range(1, n_images + 1):
        img = rng.integers(60, 110, (120, 160, 3), dtype=np.uint8)
        img[..., 1] = np.clip(img[..., 1].astype(int) + 20, 0, 255)
        boxes[i] = []
        for _ in range(int(rng.integers(1, 4))):
            w, h = int(rng.integers(8, 30)), int(rng.integers(8, 30))
            x, y = int(rng.integers(0, 160 - w)), int(rng.integers(0, 120 - h))
            boxes[i].append((x, y, x + w, y + h, int(rng.integers(0, 2))))
        if i % 2:
            img[10:22, 120:140] = (240, 90, 20)
            boxes[i].append((120, 10, 140, 22, 2))
        save_image(img, root / "images" / f"frame_{i:03d}.png")
        images.append(ImageRecord(i, f"frame_{i:03d}.png", 160, 120, meta))
    anns = [Annotation(i, BoundingBox(*b[:4]), b[4]) for i in boxes for b in boxes[i]]
    gt = AnnotatedDataset(images, anns, list(CLASSES)).renumbered()
    (root / "gt.json").write_bytes(serialize_coco(gt))
    (root / "images.json").write_bytes(serialize_coco(AnnotatedDataset(images, [], list(CLASSES))))

    noises = {
        "tood": NoiseSpec(jitter_sigma=1.0, miss_prob=0.1, fp_rate=1.0, score_sigma=0.2),
        "vfnet": NoiseSpec(jitter_sigma=1.5, miss_prob=0.2, fp_rate=1.5, confusion_prob=0.2, score_sigma=0.3),
        "yolox": NoiseSpec(jitter_sigma=0.5, miss_prob=0.15, fp_rate=0.5, score_sigma=0.1),
    }
    preds = {}
    for k, (name, noise) in enumerate(noises.items()):
        path = root / "preds" / f"{name}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(serialize_coco_results(synthetic_detect(gt, noise, seed=k)))
        preds[name] = path

    for cls, name, size, width_m, colour in (
        ("vehicle", "car", (40, 20), 1.8, (30, 30, 200)),
        ("human", "person", (10, 24), 0.6, (230, 210, 190)),
        ("fire", "flame", (16, 20), 1.0, (250, 110, 10)),
    ):
        w, h = size
        rgba = np.zeros((h + 4, w + 4, 4), np.uint8)
        rgba[2 : 2 + h, 2 : 2 + w] = (*colour, 255)
        rgba[2, 2, 3] = 0
        save_image(rgba, root / "objects" / cls / f"{name}.png")
        (root / "objects" / cls / f"{name}.json").write_text(json.dumps({"max_width_m": width_m}))

    config = {
        "seed": 7,
        "image_root": "images",
        "detectors": [
            {"name": "tood", "kind": "file_backed", "params": {"path": "preds/tood.json"}},
            {"name": "vfnet", "kind": "file_backed", "params": {"path": "preds/vfnet.json"}},
            {"name": "fire_rule", "kind": "color_rule", "params": {"category_id": 2, "min_area": 20}},
            {"name": "synth", "kind": "synthetic", "params": {"ground_truth": "gt.json", "seed": 3, "noise": {"jitter_sigma": 2.0, "fp_rate": 1.0}}},
        ],
        "filters": [
            {"type": "SmallBB", "min_w": 4, "min_h": 4},
            {"type": "MergeBB", "metric": "iou", "threshold": 0.3, "class_mode": "all_classes"},
            {"type": "MaskBB", "expand_factor": 1.5, "grid": [3, 3]},
        ],
        "consensus": {"confidence_min": 0.5, "iou_min": 0.5, "min_models": 2},
        "mosaic": {"variant": "square", "target_side": 180},
        "paste": {"objects_per_image": [1, 4], "class_mix": {"vehicle": 3, "human": 2, "fire": 1}, "margin": 2},
        "predictions": {name: f"preds/{name}.json" for name in noises},
    }
    import yaml

    (root / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=False))
    return {"root": root, "config": root / "config.yaml", "preds": preds, "gt": root / "gt.json", "images": root / "images.json"}

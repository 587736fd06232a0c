"""Synthetic scene generation, dataset files, and the offline teacher-box pipeline.

Scenes live on the unit square in normalized coordinates. Datasets and
teacher-box files are JSON lines, one record per line:

    dataset:  {"id": str, "objects": [{"cx","cy","w","h","class"}, ...]}
    teachers: {"scene_id": str, "teacher_id": str,
               "boxes": [{"cx","cy","w","h","class","score"}, ...]}

Teacher boxes are produced offline: a trained model runs over a dataset,
keeps per-query (box, argmax class, max class probability as score),
drops low-score boxes and caps the rest at the top-k by score. The same
derivation is reused verbatim for online teachers, so the two modes see
identical supervision.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .geometry import Box
from .model import ModelParams, forward, rasterize
from .supervision import TeacherBox, TeacherSet, filter_top_scores


class InvalidSpec(ValueError):
    pass


class ParseError(ValueError):
    pass


class DuplicateSceneId(ValueError):
    pass


@dataclass(frozen=True)
class Scene:
    """One annotated scene: unique id plus (box, class) objects."""

    id: str
    objects: list  # list[tuple[Box, int]]


@dataclass(frozen=True)
class DatasetSpec:
    num_scenes: int
    n_classes: int
    object_count_range: tuple[int, int] = (1, 5)
    size_range: tuple[float, float] = (0.1, 0.4)
    min_center_separation: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        lo, hi = self.object_count_range
        slo, shi = self.size_range
        if self.num_scenes < 0:
            raise InvalidSpec("num_scenes must be >= 0")
        if self.n_classes < 1:
            raise InvalidSpec("need at least one class")
        if not (0 <= lo <= hi):
            raise InvalidSpec(f"bad object_count_range {self.object_count_range}")
        if not (0.0 < slo <= shi <= 1.0):
            raise InvalidSpec(f"bad size_range {self.size_range}")
        if self.min_center_separation < 0:
            raise InvalidSpec("min_center_separation must be >= 0")


_CENTER_RETRIES = 100


def generate_dataset(spec: DatasetSpec) -> list[Scene]:
    """Sample scenes reproducibly from ``spec.seed``.

    Object counts and sizes are uniform over their ranges; centers are
    rejection-sampled until they respect the separation (bounded retries,
    after which the last candidate is accepted).
    """
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.object_count_range
    slo, shi = spec.size_range
    scenes = []
    for i in range(spec.num_scenes):
        count = int(rng.integers(lo, hi + 1))
        objects = []
        centers: list[tuple[float, float]] = []
        for _ in range(count):
            w = float(rng.uniform(slo, shi))
            h = float(rng.uniform(slo, shi))
            label = int(rng.integers(spec.n_classes))
            for _ in range(_CENTER_RETRIES):
                cx = float(rng.uniform(w / 2, 1 - w / 2)) if w < 1 else 0.5
                cy = float(rng.uniform(h / 2, 1 - h / 2)) if h < 1 else 0.5
                if all((cx - ox) ** 2 + (cy - oy) ** 2 >= spec.min_center_separation**2
                       for ox, oy in centers):
                    break
            centers.append((cx, cy))
            objects.append((Box(cx, cy, w, h), label))
        scenes.append(Scene(id=f"scene-{i:06d}", objects=objects))
    return scenes


def save_dataset(path, scenes: list[Scene]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in scenes:
            rec = {
                "id": s.id,
                "objects": [
                    {"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h, "class": c}
                    for b, c in s.objects
                ],
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_dataset(path) -> list[Scene]:
    scenes = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                objects = [
                    (Box(o["cx"], o["cy"], o["w"], o["h"]), int(o["class"]))
                    for o in rec["objects"]
                ]
                scenes.append(Scene(id=rec["id"], objects=objects))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from exc
    return scenes


def scene_noise_rng(scene_id: str, noise_seed: int) -> np.random.Generator:
    """Per-scene RNG derived from a stable hash, identical across commands."""
    digest = hashlib.sha256(f"{noise_seed}:{scene_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "big"))


def scene_grid(scene: Scene, n_classes: int, grid_h: int, grid_w: int,
               noise_sigma: float, noise_seed: int) -> np.ndarray:
    """Deterministic rasterization: the pixel noise depends only on the
    scene id and ``noise_seed``, never on training state."""
    return rasterize(scene, noise_sigma, scene_noise_rng(scene.id, noise_seed),
                     n_classes, grid_h, grid_w)


def derive_teacher_boxes(params: ModelParams, grid: np.ndarray,
                         score_threshold: float = 0.05,
                         max_boxes: int = 50) -> list[TeacherBox]:
    """Per-query (box, argmax class, max probability) above the score floor.

    Zero-probability queries are dropped unconditionally; survivors are
    capped at the top ``max_boxes`` by score.
    """
    preds = forward(params, grid)
    probs = preds.probs
    boxes = preds.boxes
    labels = probs.argmax(axis=1)
    scores = probs.max(axis=1)
    out = []
    for q in range(boxes.shape[0]):
        s = float(scores[q])
        if s < score_threshold or s <= 0.0:
            continue
        out.append(TeacherBox(Box(*boxes[q]), int(labels[q]), s))
    return filter_top_scores(TeacherSet("tmp", out), max_boxes).boxes


def export_teacher_boxes(params: ModelParams, scenes: list[Scene], path,
                         score_threshold: float = 0.05, max_boxes: int = 50,
                         teacher_id: str = "teacher",
                         noise_sigma: float = 0.0, noise_seed: int = 0) -> None:
    """Run a trained model over every scene and write its TeacherBoxFile."""
    d = params.dims
    with open(path, "w", encoding="utf-8") as f:
        for s in scenes:
            grid = scene_grid(s, d.n_classes, d.grid_h, d.grid_w, noise_sigma, noise_seed)
            boxes = derive_teacher_boxes(params, grid, score_threshold, max_boxes)
            rec = {
                "scene_id": s.id,
                "teacher_id": teacher_id,
                "boxes": [
                    {"cx": tb.box.cx, "cy": tb.box.cy, "w": tb.box.w, "h": tb.box.h,
                     "class": tb.label, "score": tb.score}
                    for tb in boxes
                ],
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_teacher_boxes(path) -> dict[str, TeacherSet]:
    """Map scene_id -> TeacherSet. Scenes absent from the file are simply
    absent from the map (callers substitute an empty TeacherSet)."""
    out: dict[str, TeacherSet] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                scene_id = rec["scene_id"]
                boxes = [
                    TeacherBox(Box(o["cx"], o["cy"], o["w"], o["h"]),
                               int(o["class"]), float(o["score"]))
                    for o in rec["boxes"]
                ]
                ts = TeacherSet(rec["teacher_id"], boxes)
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from exc
            if scene_id in out:
                raise DuplicateSceneId(f"{path}: line {lineno}: duplicate scene_id {scene_id!r}")
            out[scene_id] = ts
    return out

"""Detection metrics: COCO-style AP, matching instability, corpus statistics.

AP follows the COCO protocol: greedy per-class matching at each IoU
threshold in {0.50, 0.55, ..., 0.95}, 101-point interpolated
precision-recall, averaged over classes that have ground truth.

The instability score (IS) measures how much the query-target matching
changes between adjacent epochs: per scene, the number of queries whose
stored target index differs, divided by the scene's GT count (scenes
without GT are skipped), averaged over scenes. The reattributed variant
first maps queries matched to an auxiliary box onto the GT box that the
auxiliary box overlaps with IoU > 0.5, merging GT/teacher alternations
that supervise the same object.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, boxes_to_array, pairwise_iou

COCO_IOU_THRESHOLDS = (0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95)
_RECALL_GRID = np.linspace(0.0, 1.0, 101)


class EpochMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    scene_id: str
    box: Box
    label: int
    score: float


@dataclass
class SceneMatches:
    """Per-scene matching snapshot: one target index (or -1) per query."""

    gt_match: np.ndarray          # (N,) int, GT index or -1
    gt_count: int
    aux_match: list = field(default_factory=list)  # per teacher: (N,) int, box index or -1
    effective: np.ndarray | None = None  # gt_match after aux reattribution, if resolved


@dataclass
class MatchLog:
    epoch: int
    scenes: dict[str, SceneMatches]
    teacher_ids: list[str] = field(default_factory=list)


def average_precision(dets: list[Detection], scenes,
                      iou_thresholds=COCO_IOU_THRESHOLDS) -> dict[str, float]:
    """{"AP", "AP50", "AP75"} over a detection set and ground-truth scenes.

    Only classes with at least one GT instance enter the mean. AP50/AP75
    are always evaluated at 0.5/0.75 regardless of ``iou_thresholds``.
    """
    thresholds = tuple(iou_thresholds)
    eval_points = sorted(set(thresholds) | {0.5, 0.75})
    per_class = _per_class_ap(dets, scenes, eval_points)
    if not per_class:
        return {"AP": 0.0, "AP50": 0.0, "AP75": 0.0}

    def mean_at(ts) -> float:
        return float(np.mean([[ap[t] for t in ts] for ap in per_class.values()]))

    return {"AP": mean_at(thresholds), "AP50": mean_at([0.5]), "AP75": mean_at([0.75])}


def _per_class_ap(dets, scenes, thresholds) -> dict[int, dict[float, float]]:
    """class -> {threshold -> AP}; classes with zero GT are excluded."""
    gt_by_class: dict[int, dict[str, np.ndarray]] = {}
    for s in scenes:
        for c in {label for _, label in s.objects}:
            boxes = boxes_to_array(b for b, label in s.objects if label == c)
            gt_by_class.setdefault(c, {})[s.id] = boxes

    out: dict[int, dict[float, float]] = {}
    for c, gt_map in sorted(gt_by_class.items()):
        n_gt = sum(arr.shape[0] for arr in gt_map.values())
        cdets = [d for d in dets if d.label == c]
        cdets.sort(key=lambda d: -d.score)  # stable: ties keep input order
        ious = []
        for d in cdets:
            gt_boxes = gt_map.get(d.scene_id)
            if gt_boxes is None or gt_boxes.shape[0] == 0:
                ious.append(None)
            else:
                ious.append(pairwise_iou(d.box.as_array()[None], gt_boxes)[0])
        out[c] = {
            t: _single_threshold_ap(cdets, ious, gt_map, n_gt, t) for t in thresholds
        }
    return out


def _single_threshold_ap(cdets, ious, gt_map, n_gt: int, thr: float) -> float:
    """Greedy matching at one IoU threshold, then 101-point interpolated AP."""
    if not cdets or n_gt == 0:
        return 0.0
    available = {sid: np.ones(arr.shape[0], dtype=bool) for sid, arr in gt_map.items()}
    tp = np.zeros(len(cdets))
    for k, (d, iou_row) in enumerate(zip(cdets, ious)):
        if iou_row is None:
            continue
        avail = available[d.scene_id]
        cand = np.where(avail, iou_row, -1.0)
        best = int(np.argmax(cand))
        if cand[best] >= thr:
            tp[k] = 1.0
            avail[best] = False
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # precision envelope from the right, sampled on the 101-point grid
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, _RECALL_GRID, side="left")
    sampled = np.where(idx < len(cdets), envelope[np.minimum(idx, len(cdets) - 1)], 0.0)
    return float(sampled.mean())


def _check_logs(log_t: MatchLog, log_t1: MatchLog) -> None:
    if set(log_t.scenes) != set(log_t1.scenes):
        raise EpochMismatch("logs cover different scene sets")
    for sid, a in log_t.scenes.items():
        b = log_t1.scenes[sid]
        if a.gt_match.shape != b.gt_match.shape:
            raise EpochMismatch(f"scene {sid}: query counts differ")
        if a.gt_count != b.gt_count:
            raise EpochMismatch(f"scene {sid}: GT counts differ")


def instability_score(log_t: MatchLog, log_t1: MatchLog,
                      normalize: str = "gt_count") -> float:
    """Mean per-scene fraction of queries whose matched index changed.

    normalize: "gt_count" (default, per-scene change count over GT count)
    or "query_count" (over the number of queries). Scenes with zero GT
    are skipped either way; with no eligible scene the score is 0.
    """
    _check_logs(log_t, log_t1)
    return _instability(
        {sid: m.gt_match for sid, m in log_t.scenes.items()},
        {sid: m.gt_match for sid, m in log_t1.scenes.items()},
        {sid: m.gt_count for sid, m in log_t.scenes.items()},
        normalize,
    )


def _instability(idx_t, idx_t1, gt_counts, normalize: str) -> float:
    if normalize not in ("gt_count", "query_count"):
        raise ValueError(f"unknown normalization {normalize!r}")
    scores = []
    for sid, a in idx_t.items():
        g = gt_counts[sid]
        if g == 0:
            continue
        changed = int((a != idx_t1[sid]).sum())
        denom = g if normalize == "gt_count" else a.shape[0]
        scores.append(changed / denom)
    return float(np.mean(scores)) if scores else 0.0


def reattribution_maps(teacher_boxes, scenes) -> list[dict[str, np.ndarray]]:
    """Per teacher, per scene: auxiliary box index -> GT index (or -1).

    Box j maps to the GT box of highest IoU when that IoU is strictly
    above 0.5 (ties to the lower GT index); otherwise -1.
    """
    gt_arrays = {s.id: boxes_to_array(b for b, _ in s.objects) for s in scenes}
    maps = []
    for tmap in teacher_boxes:
        per_scene = {}
        for sid, gt in gt_arrays.items():
            ts = tmap.get(sid)
            if ts is None or not ts.boxes:
                per_scene[sid] = np.zeros(0, dtype=np.int64)
                continue
            if gt.shape[0] == 0:
                per_scene[sid] = np.full(len(ts.boxes), -1, dtype=np.int64)
                continue
            ious = pairwise_iou(boxes_to_array(tb.box for tb in ts.boxes), gt)
            best = ious.argmax(axis=1)
            ok = ious[np.arange(len(ts.boxes)), best] > 0.5
            per_scene[sid] = np.where(ok, best, -1).astype(np.int64)
        maps.append(per_scene)
    return maps


def effective_indices(m: SceneMatches, scene_maps: list[np.ndarray]) -> np.ndarray:
    """GT-branch indices with negative queries reattributed through their
    matched auxiliary boxes; teachers are consulted in declared order and
    the first matched box that reattributes wins. GT-positive queries are
    never overridden."""
    eff = m.gt_match.copy()
    needs = eff == -1
    if not needs.any():
        return eff
    for k, aux in enumerate(m.aux_match):
        remap = scene_maps[k]
        take = needs & (aux >= 0)
        if take.any():
            mapped = np.where(remap[aux[take]] >= 0, remap[aux[take]], -1)
            eff[take] = np.where(mapped >= 0, mapped, eff[take])
            needs = eff == -1
    return eff


def instability_score_reattributed(log_t: MatchLog, log_t1: MatchLog,
                                   maps: list[dict[str, np.ndarray]],
                                   normalize: str = "gt_count") -> float:
    _check_logs(log_t, log_t1)

    def eff(log: MatchLog) -> dict[str, np.ndarray]:
        return {
            sid: effective_indices(m, [maps[k][sid] for k in range(len(m.aux_match))])
            for sid, m in log.scenes.items()
        }

    return _instability(eff(log_t), eff(log_t1),
                        {sid: m.gt_count for sid, m in log_t.scenes.items()}, normalize)


def instability_score_aux(log_t: MatchLog, log_t1: MatchLog,
                          teacher_boxes, scenes,
                          normalize: str = "gt_count") -> float:
    """Instability after reattributing aux-matched queries to overlapping GT."""
    maps = reattribution_maps(teacher_boxes, scenes)
    return instability_score_reattributed(log_t, log_t1, maps, normalize)


def instability_score_effective(log_t: MatchLog, log_t1: MatchLog,
                                normalize: str = "gt_count") -> float:
    """Instability over reattributed indices already stored in the logs
    (falls back to the plain GT indices where none were resolved)."""
    _check_logs(log_t, log_t1)

    def eff(log: MatchLog) -> dict[str, np.ndarray]:
        return {sid: m.effective if m.effective is not None else m.gt_match
                for sid, m in log.scenes.items()}

    return _instability(eff(log_t), eff(log_t1),
                        {sid: m.gt_count for sid, m in log_t.scenes.items()}, normalize)


def category_box_ratio(teacher_boxes: dict, scenes,
                       iou_min: float = 0.5) -> dict[int, float]:
    """Per class: teacher boxes overlapping a same-class GT above ``iou_min``,
    divided by the class's GT box count. Classes without GT are absent."""
    gt_count: dict[int, int] = {}
    box_count: dict[int, int] = {}
    for s in scenes:
        for _, c in s.objects:
            gt_count[c] = gt_count.get(c, 0) + 1
        ts = teacher_boxes.get(s.id)
        if ts is None or not ts.boxes:
            continue
        for tb in ts.boxes:
            same = [b for b, c in s.objects if c == tb.label]
            if not same:
                continue
            ious = pairwise_iou(tb.box.as_array()[None], boxes_to_array(same))[0]
            if ious.max() > iou_min:
                box_count[tb.label] = box_count.get(tb.label, 0) + 1
    return {c: box_count.get(c, 0) / n for c, n in sorted(gt_count.items())}


def newly_annotated_fraction(teacher_boxes, scenes) -> float | None:
    """Fraction of teacher boxes with zero IoU to every GT box; None when
    the teacher contributed no boxes at all."""
    total = 0
    zero = 0
    gt_arrays = {s.id: boxes_to_array(b for b, _ in s.objects) for s in scenes}
    for sid, gt in gt_arrays.items():
        ts = teacher_boxes.get(sid)
        if ts is None or not ts.boxes:
            continue
        total += len(ts.boxes)
        if gt.shape[0] == 0:
            zero += len(ts.boxes)
            continue
        ious = pairwise_iou(boxes_to_array(tb.box for tb in ts.boxes), gt)
        zero += int((ious.max(axis=1) == 0.0).sum())
    if total == 0:
        return None
    return zero / total


def write_report(path, ap: dict[str, float],
                 is_per_epoch=None, is_aux_per_epoch=None) -> None:
    """Metrics report JSON: AP triple plus optional per-epoch IS series."""
    rec = {
        "AP": ap["AP"],
        "AP50": ap["AP50"],
        "AP75": ap["AP75"],
        "IS_per_epoch": list(is_per_epoch or []),
        "IS_aux_per_epoch": list(is_aux_per_epoch or []),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(rec, f, indent=2)
        f.write("\n")

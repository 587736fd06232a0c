"""Parallel per-teacher matchings and confidence-weighted training losses.

Ground truth and each teacher's box set get their own independent
Hungarian matching against the same query outputs. A matched teacher box
contributes its classification/L1/GIoU losses scaled by the teacher's
confidence score for that box; negative queries in teacher branches carry
a fixed moderate weight (0.5 by default); the ground-truth branch is
always weighted 1. The final loss is the plain sum over all branches.

Classification is per-class sigmoid focal loss with hard labels; "no
object" is the all-zeros target vector. Teacher scores never participate
in the matching cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, boxes_to_array, giou_with_grad, pairwise_iou
from .matching import Assignment, CostWeights, TooManyTargets, cost_matrix_arrays, hungarian

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


class AssignmentMismatch(ValueError):
    pass


@dataclass(frozen=True)
class TeacherBox:
    """One auxiliary supervision box: geometry, hard label, confidence."""

    box: Box
    label: int
    score: float

    def __post_init__(self) -> None:
        if self.label < 0:
            raise ValueError(f"negative class label {self.label}")
        if not (0.0 < self.score <= 1.0):
            raise ValueError(f"teacher box score must be in (0, 1], got {self.score}")


@dataclass
class TeacherSet:
    """All boxes one teacher contributes to one scene."""

    teacher_id: str
    boxes: list[TeacherBox] = field(default_factory=list)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(boxes (M,4), labels (M,), scores (M,)) for the loss hot path."""
        b = boxes_to_array(tb.box for tb in self.boxes)
        labels = np.array([tb.label for tb in self.boxes], dtype=np.int64)
        scores = np.array([tb.score for tb in self.boxes], dtype=np.float64)
        return b, labels, scores


@dataclass(frozen=True)
class SupervisionConfig:
    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    negative_score: float = 0.5
    max_boxes_per_teacher: int = 50
    mode: str = "parallel"  # parallel | concat | gt_only
    score_weighting: bool = True
    cost_weights: CostWeights = field(default_factory=CostWeights)

    def __post_init__(self) -> None:
        if not (0.0 < self.negative_score <= 1.0):
            raise ValueError(f"negative_score must be in (0, 1], got {self.negative_score}")
        if self.max_boxes_per_teacher < 1:
            raise ValueError("max_boxes_per_teacher must be >= 1")
        if self.mode not in ("parallel", "concat", "gt_only"):
            raise ValueError(f"unknown supervision mode {self.mode!r}")


@dataclass
class BranchLoss:
    """Loss totals of one branch, per-box score weights already applied."""

    branch_id: str
    cls_loss: float
    l1_loss: float
    giou_loss: float


@dataclass
class LossBreakdown:
    branches: list[BranchLoss]
    total: float
    grad_raw: np.ndarray  # (N, 4 + C) d total / d raw prediction outputs


@dataclass(frozen=True)
class BranchTargets:
    """Array form of one branch's target list, precomputable per scene."""

    branch_id: str
    boxes: np.ndarray        # (T, 4)
    labels: np.ndarray       # (T,)
    scores: np.ndarray | None  # (T,) teacher confidences; None = GT-like branch

    @classmethod
    def from_gt(cls, gt, branch_id: str = "gt") -> "BranchTargets":
        return cls(branch_id,
                   boxes_to_array(b for b, _ in gt),
                   np.array([c for _, c in gt], dtype=np.int64),
                   None)

    @classmethod
    def from_teacher(cls, t: TeacherSet) -> "BranchTargets":
        b, labels, scores = t.arrays()
        return cls(t.teacher_id, b, labels, scores)


def prepare_branches(gt, teachers, cfg: SupervisionConfig) -> list[BranchTargets]:
    """Resolve the branch structure implied by the supervision mode."""
    if cfg.mode == "gt_only":
        return [BranchTargets.from_gt(gt)]
    if cfg.mode == "concat":
        return [BranchTargets.from_gt(concat_targets(gt, teachers), branch_id="concat")]
    return [BranchTargets.from_gt(gt)] + [BranchTargets.from_teacher(t) for t in teachers]


def match_branches(probs: np.ndarray, boxes: np.ndarray,
                   branches: list[BranchTargets], cfg: SupervisionConfig) -> list[Assignment]:
    """One independent Hungarian assignment per prepared branch."""
    out = []
    for br in branches:
        cost = cost_matrix_arrays(probs, boxes, br.boxes, br.labels, cfg.cost_weights)
        out.append(hungarian(cost))
    return out


def match_all(preds, gt, teachers, cfg: SupervisionConfig) -> list[Assignment]:
    """Match the GT branch and every teacher branch independently.

    Returns K+1 assignments in parallel mode (GT first, teachers in
    declared order); a single assignment in gt_only and concat modes.
    """
    branches = prepare_branches(gt, teachers, cfg)
    return match_branches(preds.probs, preds.boxes, branches, cfg)


def compute_loss(preds, gt, teachers, assignments: list[Assignment],
                 cfg: SupervisionConfig) -> LossBreakdown:
    """Summed per-branch losses and their gradient w.r.t. raw outputs."""
    branches = prepare_branches(gt, teachers, cfg)
    return loss_from_branches(preds, branches, assignments, cfg)


def loss_from_branches(preds, branches: list[BranchTargets],
                       assignments: list[Assignment], cfg: SupervisionConfig) -> LossBreakdown:
    if len(assignments) != len(branches):
        raise AssignmentMismatch(f"{len(assignments)} assignments for {len(branches)} branches")
    logits = preds.logits
    boxes_sig = preds.boxes
    n, c = logits.shape

    total = 0.0
    records = []
    g_logits = np.zeros_like(logits)
    g_boxsig = np.zeros_like(boxes_sig)

    for br, assign in zip(branches, assignments):
        ti = assign.target_index
        t = br.boxes.shape[0]
        if ti.shape[0] != n:
            raise AssignmentMismatch(f"assignment covers {ti.shape[0]} queries, model has {n}")
        if t and ti.max() >= t:
            raise AssignmentMismatch(f"assignment references target {ti.max()} of {t}")

        matched_q = np.nonzero(ti >= 0)[0]
        tj = ti[matched_q]

        if br.scores is None:
            w_pos = np.ones(matched_q.shape[0])
            w_neg = 1.0
        else:
            w_pos = br.scores[tj] if cfg.score_weighting else np.ones(matched_q.shape[0])
            w_neg = cfg.negative_score

        wq = np.full(n, w_neg)
        wq[matched_q] = w_pos

        targets = np.zeros((n, c))
        if matched_q.size:
            targets[matched_q, br.labels[tj]] = 1.0
        cls_each, dz = focal_loss_with_grad(logits, targets)
        cls_loss = float((cls_each.sum(axis=1) * wq).sum())
        g_logits += cfg.lambda_cls * wq[:, None] * dz

        l1_loss = 0.0
        giou_loss = 0.0
        if matched_q.size:
            pb = boxes_sig[matched_q]
            tb = br.boxes[tj]
            diff = pb - tb
            l1_loss = float((w_pos * np.abs(diff).sum(axis=1)).sum())
            gv, gg = giou_with_grad(pb, tb)
            giou_loss = float((w_pos * (1.0 - gv)).sum())
            g_matched = w_pos[:, None] * (cfg.lambda_l1 * np.sign(diff) - cfg.lambda_giou * gg)
            g_boxsig[matched_q] += g_matched  # matched_q has no duplicates

        records.append(BranchLoss(br.branch_id, cls_loss, l1_loss, giou_loss))
        total += cfg.lambda_cls * cls_loss + cfg.lambda_l1 * l1_loss + cfg.lambda_giou * giou_loss

    g_rawbox = g_boxsig * boxes_sig * (1.0 - boxes_sig)
    grad_raw = np.concatenate([g_rawbox, g_logits], axis=1)
    return LossBreakdown(branches=records, total=float(total), grad_raw=grad_raw)


def focal_loss_with_grad(logits: np.ndarray, targets: np.ndarray,
                         alpha: float = FOCAL_ALPHA,
                         gamma: float = FOCAL_GAMMA) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise sigmoid focal loss and its gradient w.r.t. the logits.

    targets holds hard {0, 1} labels; an all-zero row is the no-object
    target.
    """
    z = logits
    p = 1.0 / (1.0 + np.exp(-np.abs(z)))
    p = np.where(z >= 0, p, 1.0 - p)
    log_p = -_softplus(-z)
    log_1p = -_softplus(z)

    pos = targets > 0.5
    loss = np.where(
        pos,
        -alpha * (1.0 - p) ** gamma * log_p,
        -(1.0 - alpha) * p**gamma * log_1p,
    )
    grad = np.where(
        pos,
        alpha * gamma * (1.0 - p) ** gamma * p * log_p - alpha * (1.0 - p) ** (gamma + 1),
        -(1.0 - alpha) * gamma * p**gamma * (1.0 - p) * log_1p + (1.0 - alpha) * p ** (gamma + 1),
    )
    return loss, grad


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def concat_targets(gt, teachers, max_targets: int | None = None) -> list[tuple[Box, int]]:
    """Merge GT and all teacher boxes into one GT-like target list."""
    merged = list(gt)
    for t in teachers:
        merged.extend((tb.box, tb.label) for tb in t.boxes)
    if max_targets is not None and len(merged) > max_targets:
        raise TooManyTargets(f"{len(merged)} merged targets exceed capacity {max_targets}")
    return merged


def filter_top_scores(t: TeacherSet, max_count: int) -> TeacherSet:
    """Keep the max_count highest-score boxes, preserving original order."""
    if max_count < 1:
        raise ValueError("max_count must be >= 1")
    if len(t.boxes) <= max_count:
        return TeacherSet(t.teacher_id, list(t.boxes))
    order = sorted(range(len(t.boxes)), key=lambda i: (-t.boxes[i].score, i))
    keep = sorted(order[:max_count])
    return TeacherSet(t.teacher_id, [t.boxes[i] for i in keep])


def _max_iou_to_gt(t: TeacherSet, gt) -> np.ndarray:
    """(M,) best IoU of each teacher box against any GT box; -inf if no GT."""
    if not t.boxes:
        return np.zeros(0)
    if not gt:
        return np.full(len(t.boxes), -np.inf)
    ious = pairwise_iou(boxes_to_array(tb.box for tb in t.boxes),
                        boxes_to_array(b for b, _ in gt))
    return ious.max(axis=1)


def filter_by_iou(t: TeacherSet, gt, threshold: float) -> TeacherSet:
    """Keep boxes whose best IoU against any GT box strictly exceeds threshold."""
    if not (0.0 <= threshold <= 1.0):
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    best = _max_iou_to_gt(t, gt)
    return TeacherSet(t.teacher_id, [tb for tb, m in zip(t.boxes, best) if m > threshold])


def newly_annotated(t: TeacherSet, gt) -> TeacherSet:
    """Boxes with zero IoU to every GT box: objects the annotations miss."""
    if not gt:
        return TeacherSet(t.teacher_id, list(t.boxes))
    best = _max_iou_to_gt(t, gt)
    return TeacherSet(t.teacher_id, [tb for tb, m in zip(t.boxes, best) if m == 0.0])


def replace_labels_with_gt(t: TeacherSet, gt) -> TeacherSet:
    """Give each overlapping box the label of its highest-IoU GT box.

    Zero-overlap boxes keep their own labels. IoU ties resolve to the
    lower GT index.
    """
    if not t.boxes or not gt:
        return TeacherSet(t.teacher_id, list(t.boxes))
    ious = pairwise_iou(boxes_to_array(tb.box for tb in t.boxes),
                        boxes_to_array(b for b, _ in gt))
    out = []
    for tb, row in zip(t.boxes, ious):
        if row.max() > 0.0:
            out.append(TeacherBox(tb.box, gt[int(np.argmax(row))][1], tb.score))
        else:
            out.append(tb)
    return TeacherSet(t.teacher_id, out)


def replace_scores_with_iou(t: TeacherSet, gt) -> TeacherSet:
    """Overwrite scores with the best IoU to GT; zero-overlap boxes keep theirs."""
    best = _max_iou_to_gt(t, gt)
    out = []
    for tb, m in zip(t.boxes, best):
        if m > 0.0:
            out.append(TeacherBox(tb.box, tb.label, float(m)))
        else:
            out.append(tb)
    return TeacherSet(t.teacher_id, out)


def gen_noisy_boxes(gt, groups: int = 3, shift: float = 0.4, scale: float = 0.4,
                    rng: np.random.Generator | None = None,
                    teacher_id: str = "noisy") -> TeacherSet:
    """Jittered GT copies standing in for a teacher, scored by IoU to source.

    Per replica: centers shift by Uniform(-1,1) * shift * box size, sizes
    scale by 1 + Uniform(-1,1) * scale. shift and scale must stay below 1
    so every output box keeps positive size and source overlap.
    """
    if groups < 1:
        raise ValueError("groups must be >= 1")
    if not (0.0 <= shift < 1.0 and 0.0 <= scale < 1.0):
        raise ValueError("shift and scale must lie in [0, 1)")
    if rng is None:
        rng = np.random.default_rng()
    out = []
    for _ in range(groups):
        for box, label in gt:
            u1, u2, v1, v2 = rng.uniform(-1.0, 1.0, size=4)
            noisy = Box(
                cx=box.cx + u1 * shift * box.w,
                cy=box.cy + u2 * shift * box.h,
                w=box.w * (1.0 + v1 * scale),
                h=box.h * (1.0 + v2 * scale),
            )
            score = float(pairwise_iou(noisy.as_array()[None], box.as_array()[None])[0, 0])
            out.append(TeacherBox(noisy, label, score))
    return TeacherSet(teacher_id, out)


def nms_fuse(teachers: list[TeacherSet], iou_threshold: float,
             teacher_id: str = "fused") -> TeacherSet:
    """Classwise greedy NMS over the union of all teachers' boxes.

    Boxes are visited in descending score (ties resolve to earlier
    teacher, then earlier box); a visited box suppresses same-class boxes
    whose IoU with it strictly exceeds the threshold.
    """
    if not (0.0 < iou_threshold < 1.0):
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    pool = [(tb, k, i) for k, t in enumerate(teachers) for i, tb in enumerate(t.boxes)]
    pool.sort(key=lambda item: (-item[0].score, item[1], item[2]))
    kept: list[TeacherBox] = []
    for tb, _, _ in pool:
        suppressed = False
        for kb in kept:
            if kb.label == tb.label and pairwise_iou(
                    tb.box.as_array()[None], kb.box.as_array()[None])[0, 0] > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(tb)
    return TeacherSet(teacher_id, kept)

"""Deterministic training loop: Adam over the toy detector with GT plus
teacher-branch supervision, per-epoch matching snapshots, EMA teachers.

Reproducibility contract: everything derives from TrainConfig.seed (model
init, shuffling) and noise_seed (per-scene rasterization noise, stable
across commands), gradients accumulate in ascending scene-index order
within a batch, and the epoch-end MatchLog comes from a matching-only
pass over the training scenes in dataset order, so two runs with the same
config are bitwise identical.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .data import Scene, derive_teacher_boxes, load_teacher_boxes, scene_grid
from .geometry import Box
from .metrics import Detection, MatchLog, SceneMatches
from .model import ModelDims, ModelParams, ParamGrads, ShapeMismatch, backward, forward, init_params
from .supervision import (BranchTargets, SupervisionConfig, TeacherSet, filter_top_scores,
                          loss_from_branches, match_branches, prepare_branches)

_PARAM_FIELDS = ("w1", "b1", "w2", "b2")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    n_classes: int = 3
    grid_h: int = 16
    grid_w: int = 16
    hidden: int = 256
    n_queries: int = 20
    noise_sigma: float = 0.0
    noise_seed: int = 0
    supervision: SupervisionConfig = field(default_factory=SupervisionConfig)
    teacher_mode: str = "offline"  # offline | online | mean_teacher
    teacher_box_paths: tuple = ()
    online_checkpoints: tuple = ()
    mean_teacher_momentum: float = 0.999
    teacher_score_threshold: float = 0.05
    eval_every: int = 0  # 0 = evaluate on the final epoch only

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.teacher_mode not in ("offline", "online", "mean_teacher"):
            raise ValueError(f"unknown teacher_mode {self.teacher_mode!r}")
        if self.teacher_mode == "mean_teacher" and not (0.0 < self.mean_teacher_momentum < 1.0):
            raise ValueError("mean teacher momentum must lie in (0, 1)")

    @property
    def dims(self) -> ModelDims:
        return ModelDims(n_classes=self.n_classes, grid_h=self.grid_h,
                         grid_w=self.grid_w, hidden=self.hidden,
                         n_queries=self.n_queries)


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    branch_means: dict[str, float]
    val_ap: dict[str, float] | None
    instability: float | None
    instability_aux: float | None
    wall_seconds: float


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(getattr(params, k)) for k in _PARAM_FIELDS},
            v={k: np.zeros_like(getattr(params, k)) for k in _PARAM_FIELDS},
        )


@dataclass
class TrainResult:
    params: ModelParams
    logs: list[EpochLog]
    match_history: list[MatchLog]


def adam_step(params: ModelParams, grads: ParamGrads, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[ModelParams, AdamState]:
    """One standard Adam update with bias correction."""
    t = state.t + 1
    new_m, new_v, new_p = {}, {}, {}
    for k in _PARAM_FIELDS:
        g = getattr(grads, k)
        p = getattr(params, k)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient {k} has shape {g.shape}, parameter {p.shape}")
        m = beta1 * state.m[k] + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_m[k] = m
        new_v[k] = v
        new_p[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return (
        ModelParams(params.dims, new_p["w1"], new_p["b1"], new_p["w2"], new_p["b2"]),
        AdamState(m=new_m, v=new_v, t=t),
    )


def ema_update(teacher: ModelParams, student: ModelParams, m: float) -> ModelParams:
    """teacher <- m * teacher + (1 - m) * student, elementwise."""
    if teacher.dims != student.dims:
        raise ShapeMismatch("teacher and student dims differ")
    if not (0.0 < m <= 1.0):
        raise ValueError(f"momentum must lie in (0, 1], got {m}")
    out = {k: m * getattr(teacher, k) + (1 - m) * getattr(student, k) for k in _PARAM_FIELDS}
    return ModelParams(teacher.dims, out["w1"], out["b1"], out["w2"], out["b2"])


def run_online_teachers(checkpoints: list[ModelParams], scene: Scene,
                        noise_sigma: float = 0.0, noise_seed: int = 0,
                        score_threshold: float = 0.05, max_boxes: int = 50,
                        teacher_ids=None) -> list[TeacherSet]:
    """Forward each frozen teacher on the scene; same derivation (threshold
    and top-k cap) as the offline export path."""
    out = []
    for k, params in enumerate(checkpoints):
        d = params.dims
        grid = scene_grid(scene, d.n_classes, d.grid_h, d.grid_w, noise_sigma, noise_seed)
        boxes = derive_teacher_boxes(params, grid, score_threshold, max_boxes)
        tid = teacher_ids[k] if teacher_ids else f"teacher-{k}"
        out.append(TeacherSet(tid, boxes))
    return out


def detections_from_params(params: ModelParams, scenes: list[Scene],
                           noise_sigma: float = 0.0, noise_seed: int = 0) -> list[Detection]:
    """Every query of every scene as a scored detection (no thresholding)."""
    d = params.dims
    dets = []
    for s in scenes:
        grid = scene_grid(s, d.n_classes, d.grid_h, d.grid_w, noise_sigma, noise_seed)
        preds = forward(params, grid)
        probs = preds.probs
        boxes = preds.boxes
        labels = probs.argmax(axis=1)
        scores = probs.max(axis=1)
        for q in range(boxes.shape[0]):
            dets.append(Detection(s.id, Box(*boxes[q]), int(labels[q]), float(scores[q])))
    return dets


def evaluate(params: ModelParams, scenes: list[Scene],
             noise_sigma: float = 0.0, noise_seed: int = 0) -> dict[str, float]:
    dets = detections_from_params(params, scenes, noise_sigma, noise_seed)
    return metrics.average_precision(dets, scenes)


def _materialize_teachers(cfg: TrainConfig, scenes: list[Scene],
                          teacher_maps) -> list[dict[str, TeacherSet]]:
    """Resolve offline/online supervision into per-scene teacher maps."""
    if teacher_maps is not None:
        maps = list(teacher_maps)
    elif cfg.teacher_mode == "offline":
        maps = [load_teacher_boxes(p) for p in cfg.teacher_box_paths]
    elif cfg.teacher_mode == "online":
        from .model import load_checkpoint

        teachers = [load_checkpoint(p) for p in cfg.online_checkpoints]
        maps = [{} for _ in teachers]
        for s in scenes:
            sets = run_online_teachers(teachers, s, cfg.noise_sigma, cfg.noise_seed,
                                       cfg.teacher_score_threshold,
                                       cfg.supervision.max_boxes_per_teacher)
            for k, ts in enumerate(sets):
                maps[k][s.id] = ts
    else:  # mean_teacher boxes are regenerated per epoch inside train()
        return []
    capped = []
    for tmap in maps:
        capped.append({
            sid: filter_top_scores(ts, cfg.supervision.max_boxes_per_teacher)
            for sid, ts in tmap.items()
        })
    return capped


def _scene_teachers(maps, scene_id: str) -> list[TeacherSet]:
    return [m.get(scene_id, TeacherSet("missing")) for m in maps]


def _prepare_all(scenes, maps, sup: SupervisionConfig) -> dict[str, list[BranchTargets]]:
    return {
        s.id: prepare_branches(s.objects, _scene_teachers(maps, s.id), sup)
        for s in scenes
    }


def _snapshot_matching(params, scenes, grids, prepared, sup: SupervisionConfig,
                       epoch: int, teacher_ids, reattr_maps) -> MatchLog:
    """Matching-only pass in dataset order; no parameter updates.

    The reattributed index vector is resolved here, against this epoch's
    own teacher boxes, so adjacent-epoch comparisons stay meaningful even
    when the teacher evolves (mean-teacher mode).
    """
    records = {}
    for s in scenes:
        preds = forward(params, grids[s.id])
        assigns = match_branches(preds.probs, preds.boxes, prepared[s.id], sup)
        n_gt = len(s.objects)
        if sup.mode == "concat":
            merged = assigns[0].target_index
            gt_match = np.where(merged < n_gt, merged, -1)
            aux = []
        else:
            gt_match = assigns[0].target_index.copy()
            aux = [a.target_index.copy() for a in assigns[1:]]
        m = SceneMatches(gt_match=gt_match, gt_count=n_gt, aux_match=aux)
        if reattr_maps:
            m.effective = metrics.effective_indices(
                m, [reattr_maps[k][s.id] for k in range(len(aux))])
        records[s.id] = m
    return MatchLog(epoch=epoch, scenes=records, teacher_ids=list(teacher_ids))


def train(train_scenes: list[Scene], val_scenes: list[Scene], cfg: TrainConfig,
          teacher_maps=None) -> TrainResult:
    """Run the full loop and return final parameters, per-epoch logs, and
    the per-epoch MatchLog history (IS is computable for adjacent pairs).

    teacher_maps optionally injects pre-built per-scene TeacherSet maps
    (one dict per teacher), bypassing cfg.teacher_box_paths; this is how
    the CLI feeds filtered/replaced/fused/noisy supervision in.
    """
    ss = np.random.SeedSequence(cfg.seed)
    init_seed, shuffle_seed = ss.spawn(2)
    dims = cfg.dims
    params = init_params(np.random.default_rng(init_seed), dims)
    shuffle_rng = np.random.default_rng(shuffle_seed)

    grids = {
        s.id: scene_grid(s, dims.n_classes, dims.grid_h, dims.grid_w,
                         cfg.noise_sigma, cfg.noise_seed)
        for s in train_scenes
    }

    sup = cfg.supervision
    mean_teacher = cfg.teacher_mode == "mean_teacher" and sup.mode != "gt_only"
    maps = _materialize_teachers(cfg, train_scenes, teacher_maps)
    teacher_ids = [next(iter(m.values())).teacher_id if m else f"teacher-{k}"
                   for k, m in enumerate(maps)]
    if mean_teacher:
        teacher_params = params.copy()
        teacher_ids = ["mean-teacher"]
    prepared = _prepare_all(train_scenes, maps, sup)
    reattr_maps = metrics.reattribution_maps(maps, train_scenes) if maps else []

    state = AdamState.zeros_like(params)
    logs: list[EpochLog] = []
    history: list[MatchLog] = []

    for epoch in range(1, cfg.epochs + 1):
        t_start = time.perf_counter()

        if mean_teacher:
            maps = [{
                s.id: TeacherSet("mean-teacher", derive_teacher_boxes(
                    teacher_params, grids[s.id], cfg.teacher_score_threshold,
                    sup.max_boxes_per_teacher))
                for s in train_scenes
            }]
            prepared = _prepare_all(train_scenes, maps, sup)
            reattr_maps = metrics.reattribution_maps(maps, train_scenes)

        order = shuffle_rng.permutation(len(train_scenes))
        loss_sum = 0.0
        branch_sums: dict[str, float] = {}
        for start in range(0, len(order), cfg.batch_size):
            batch = np.sort(order[start:start + cfg.batch_size])
            acc = None
            for idx in batch:
                s = train_scenes[idx]
                preds = forward(params, grids[s.id])
                assigns = match_branches(preds.probs, preds.boxes, prepared[s.id], sup)
                lb = loss_from_branches(preds, prepared[s.id], assigns, sup)
                g = backward(params, grids[s.id], lb.grad_raw)
                if acc is None:
                    acc = g
                else:
                    for k in _PARAM_FIELDS:
                        a = getattr(acc, k)
                        a += getattr(g, k)
                loss_sum += lb.total
                for b in lb.branches:
                    w = (sup.lambda_cls * b.cls_loss + sup.lambda_l1 * b.l1_loss
                         + sup.lambda_giou * b.giou_loss)
                    branch_sums[b.branch_id] = branch_sums.get(b.branch_id, 0.0) + w
            scale = 1.0 / len(batch)
            for k in _PARAM_FIELDS:
                a = getattr(acc, k)
                a *= scale
            params, state = adam_step(params, acc, state, cfg.learning_rate,
                                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            if mean_teacher:
                teacher_params = ema_update(teacher_params, params,
                                            cfg.mean_teacher_momentum)

        log = _snapshot_matching(params, train_scenes, grids, prepared, sup,
                                 epoch, teacher_ids if maps else [], reattr_maps)
        history.append(log)

        is_score = is_aux = None
        if len(history) >= 2:
            prev, cur = history[-2], history[-1]
            is_score = metrics.instability_score(prev, cur)
            is_aux = metrics.instability_score_effective(prev, cur)

        val_ap = None
        if val_scenes and (epoch == cfg.epochs
                           or (cfg.eval_every > 0 and epoch % cfg.eval_every == 0)):
            val_ap = evaluate(params, val_scenes, cfg.noise_sigma, cfg.noise_seed)

        n_scenes = max(1, len(train_scenes))
        logs.append(EpochLog(
            epoch=epoch,
            mean_loss=loss_sum / n_scenes,
            branch_means={k: v / n_scenes for k, v in sorted(branch_sums.items())},
            val_ap=val_ap,
            instability=is_score,
            instability_aux=is_aux,
            wall_seconds=time.perf_counter() - t_start,
        ))

    return TrainResult(params=params, logs=logs, match_history=history)


def epoch_log_rows(logs: list[EpochLog]) -> list[dict]:
    """JSON-safe epoch rows. Wall-clock time is deliberately excluded so
    that log files are byte-identical across reruns of the same config."""
    rows = []
    for log in logs:
        rows.append({
            "epoch": log.epoch,
            "mean_loss": log.mean_loss,
            "branch_means": log.branch_means,
            "val_ap": log.val_ap,
            "instability": log.instability,
            "instability_aux": log.instability_aux,
        })
    return rows


def write_epoch_logs(path, logs: list[EpochLog]) -> None:
    import json

    with open(path, "w", encoding="utf-8") as f:
        for row in epoch_log_rows(logs):
            f.write(json.dumps(row, separators=(",", ":")) + "\n")

"""Incremental training protocol.

For each task: pseudo-label the training scenes with the current model,
train heads and prompt generators on ground truth plus pseudo labels with a
focal + L1 box loss and the L1 sparsity penalty, fuse the new prompt
parameters into the previous ones (from the second task on), and evaluate
AP50 on every class seen so far with the fused prompts.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .detector import (
    RenderedBatch,
    TaskSequence,
    TaskSpec,
    ToyDetector,
    build_toy_detector,
    compute_ap50,
    generate_task_sequence,
    infer_batch,
    iou_matrix,
    merge_labels,
    nms,
    pseudo_label,
)
from .params import FusionAudit, FusionConfig, ParameterVector, fuse, save_checkpoint, sparse_loss
from .tensor import GradTape, Tensor

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, task_id: int):
        super().__init__(f"non-finite loss at step {step} of task {task_id}")
        self.step = step
        self.task_id = task_id


class FreezeViolation(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    learning_rate_main: float = 3e-3
    learning_rate_box: float = 3e-4
    learning_rate_prompt: float | None = None  # None: use learning_rate_main
    epochs_per_task: int = 60
    lr_drop_epoch: int = 48
    lr_drop_factor: float = 0.1
    lambda_sparse: float = 1e-5
    tau_pseudo: float = 0.65
    focal_alpha: float = 0.5
    focal_gamma: float = 3.0
    fusion: FusionConfig | None = field(default_factory=FusionConfig)
    seed: int = 0
    # protocol toggles
    use_prompts: bool = True
    use_pseudo: bool = True
    warm_start_heads: bool = True
    # optimizer
    optimizer: str = "adam"
    weight_decay: float = 1e-4
    batch_size: int = 20
    box_loss_weight: float = 1.0
    # model size
    embed_dim: int = 32
    heads: int = 4
    hidden_dim: int = 8
    prompt_length: int = 8
    decoder_layers: int = 3
    query_slots: int = 10
    project_prompt_keys: bool = False

    def __post_init__(self):
        if self.learning_rate_main <= 0 or self.learning_rate_box <= 0 or (
                self.learning_rate_prompt is not None and self.learning_rate_prompt <= 0):
            raise ValueError("learning rates must be positive")
        if not 0 <= self.lr_drop_epoch <= self.epochs_per_task:
            raise ValueError("lr_drop_epoch must lie in [0, epochs_per_task]")
        if self.optimizer not in ("adam", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.prompt_length % 2:
            raise ValueError("prompt_length must be even")
        if isinstance(self.fusion, dict):
            self.fusion = FusionConfig(**self.fusion)

    @property
    def use_fusion(self) -> bool:
        return self.fusion is not None

    def replace(self, **kw) -> "TrainingConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["fusion"] = None if self.fusion is None else dataclasses.asdict(self.fusion)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        if d.get("fusion") is not None:
            d["fusion"] = FusionConfig(**d["fusion"])
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizers


class Adam:
    """Adam with bias correction and decoupled weight decay, per-group learning rates."""

    def __init__(self, lrs: dict[str, float], weight_decay: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.lrs = lrs
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr_mult: float = 1.0) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            lr = self.lrs[name] * lr_mult
            out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps) - lr * self.wd * p
        return out


class GradientDescent:
    """Plain per-group gradient descent (deterministic fallback)."""

    def __init__(self, lrs: dict[str, float], weight_decay: float = 0.0):
        self.lrs = lrs
        self.wd = weight_decay

    def step(self, params, grads, lr_mult: float = 1.0):
        return {n: p - self.lrs[n] * lr_mult * (grads[n] + self.wd * p) for n, p in params.items()}


# ---------------------------------------------------------------------------
# targets and loss


@dataclass
class SlotTargets:
    """Per-slot training targets for a batch, flattened to ``S*N`` rows."""

    cls: np.ndarray  # int, num_classes means no-object
    boxes: np.ndarray  # S*N x 4
    matched: np.ndarray  # bool

    def take(self, scene_idx: np.ndarray, N: int) -> "SlotTargets":
        rows = (np.asarray(scene_idx)[:, None] * N + np.arange(N)[None, :]).reshape(-1)
        return SlotTargets(self.cls[rows], self.boxes[rows], self.matched[rows])


def assign_slots(ref_boxes: np.ndarray, targets: Sequence[tuple[int, tuple]],
                 scores: np.ndarray | None = None) -> list[int]:
    """Greedy one-to-one target -> slot assignment by best IoU, ties by slot score.

    Returns the slot per target, or -1 where no free slot overlaps it.
    """
    if not targets:
        return []
    ious = iou_matrix(np.array([b for _, b in targets]), ref_boxes)
    key = ious.copy()
    if scores is not None:
        key = key + 1e-9 * np.asarray(scores)[None, :]
    out = [-1] * len(targets)
    key[ious <= 0] = -np.inf
    for _ in range(len(targets)):
        i, j = np.unravel_index(np.argmax(key), key.shape)
        if not np.isfinite(key[i, j]):
            break
        out[i] = int(j)
        key[i, :] = -np.inf
        key[:, j] = -np.inf
    return out


def build_slot_targets(batch: RenderedBatch, targets_per_scene: Sequence[Sequence[tuple[int, tuple]]],
                       num_classes: int) -> SlotTargets:
    S, N = batch.ref_boxes.shape[:2]
    cls = np.full(S * N, num_classes, dtype=np.int64)
    boxes = np.zeros((S * N, 4))
    matched = np.zeros(S * N, dtype=bool)
    for s, targets in enumerate(targets_per_scene):
        for (c, b), slot in zip(targets, assign_slots(batch.ref_boxes[s], targets)):
            if slot < 0:
                continue
            r = s * N + slot
            cls[r], boxes[r], matched[r] = c, b, True
    return SlotTargets(cls, boxes, matched)


def detection_loss(logits: Tensor, boxes: Tensor, targets: SlotTargets, alpha: float = 0.5,
                   gamma: float = 3.0, box_weight: float = 1.0) -> Tensor:
    """Focal classification loss over all slots plus mean L1 box loss on matched slots.

    Unmatched slots take the no-object column as their class, so their
    focal term is the background term. The classification part is
    averaged over slots.
    """
    n, K1 = logits.shape
    onehot = np.zeros((n, K1))
    onehot[np.arange(n), targets.cls] = 1.0
    logp = T.log_softmax(logits, axis=1)
    p = T.exp(logp)
    logp_t = (logp * Tensor(onehot)).sum(axis=1)
    # 1 - p_t as a sum of the other probabilities keeps it non-negative
    q = (p * Tensor(1.0 - onehot)).sum(axis=1)
    focal = T.power(q, gamma) * logp_t if gamma != 0 else logp_t
    cls_loss = T.scale(focal.sum(), -alpha / n)
    n_matched = int(targets.matched.sum())
    if n_matched == 0:
        return cls_loss
    mask = np.repeat(targets.matched[:, None], 4, axis=1).astype(np.float64)
    diff = T.abs_(boxes - Tensor(targets.boxes)) * Tensor(mask)
    box_loss = T.scale(diff.sum(), box_weight / (4.0 * n_matched))
    return cls_loss + box_loss


# ---------------------------------------------------------------------------
# run state


@dataclass
class TaskMetrics:
    task_id: int
    stage: str  # provenance of the prompt parameters evaluated
    current: float | None
    previous: float | None
    all: float | None
    per_task: dict[int, float | None]
    per_class: dict[int, float | None]
    pseudo_labels: int = 0


@dataclass
class IncrementalRunState:
    theta_init: ParameterVector
    trained: dict[int, ParameterVector] = field(default_factory=dict)
    fused: dict[int, ParameterVector] = field(default_factory=dict)
    heads: dict[int, ParameterVector] = field(default_factory=dict)
    audits: dict[int, FusionAudit] = field(default_factory=dict)
    metrics: list[TaskMetrics] = field(default_factory=list)
    frozen_hashes: list[str] = field(default_factory=list)
    loss_history: dict[int, list[float]] = field(default_factory=dict)

    def eval_params(self, task_id: int) -> ParameterVector:
        return self.fused.get(task_id, self.trained[task_id])


@dataclass
class RunContext:
    specs: list[TaskSpec]
    cfg: TrainingConfig
    sequence: TaskSequence
    detector: ToyDetector
    train_batches: list[RenderedBatch]
    test_batches: list[RenderedBatch]
    out_dir: str | None = None


def make_context(specs: Sequence[TaskSpec], cfg: TrainingConfig, out_dir: str | None = None) -> RunContext:
    seq = generate_task_sequence(cfg.seed, specs)
    num_classes = max(c for s in specs for c in s.class_ids) + 1
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    det = build_toy_detector(num_classes, rng, D=cfg.embed_dim, heads=cfg.heads, hidden_dim=cfg.hidden_dim,
                             prompt_length=cfg.prompt_length, layers=cfg.decoder_layers,
                             num_slots=cfg.query_slots, use_prompts=cfg.use_prompts,
                             project_prompt_keys=cfg.project_prompt_keys)
    train = [det.backbone.render_batch(sc) for sc in seq.train]
    test = [det.backbone.render_batch(sc) for sc in seq.test]
    return RunContext(list(specs), cfg, seq, det, train, test, out_dir)


def _trainable(det: ToyDetector) -> dict[str, np.ndarray]:
    return {n: t.data for n, t in det.trainable_named()}


def _prompt_names(det: ToyDetector) -> list[str]:
    return [n for n, _ in det.prompt_named()]


def task_targets(ctx: RunContext, task_index: int, seen_before: set[int]) -> tuple[SlotTargets, int]:
    """Slot targets for a task's training scenes, with pseudo labels if enabled."""
    cfg, det = ctx.cfg, ctx.detector
    batch = ctx.train_batches[task_index]
    spec = ctx.specs[task_index]
    gts = [sc.labeled() for sc in batch.scenes]
    n_pseudo = 0
    if cfg.use_pseudo and task_index > 0:
        dets = infer_batch(det, batch)
        merged = []
        for gt, ds in zip(gts, dets):
            pls = [p for p in pseudo_label(ds, cfg.tau_pseudo) if p.class_id in seen_before]
            m = merge_labels(gt, pls, spec.class_ids)
            n_pseudo += len(m) - len(gt)
            merged.append(m)
        gts = merged
    return build_slot_targets(batch, gts, det.num_classes), n_pseudo


def train_task(ctx: RunContext, task_index: int, targets: SlotTargets) -> tuple[ParameterVector, list[float]]:
    """Train heads (and prompts) on one task; returns the trained prompt parameters."""
    cfg, det = ctx.cfg, ctx.detector
    batch = ctx.train_batches[task_index]
    task_id = ctx.specs[task_index].task_id
    N = det.num_slots
    named = _trainable(det)
    prompt_names = set(_prompt_names(det)) if cfg.use_prompts else set()
    lr_prompt = cfg.learning_rate_prompt or cfg.learning_rate_main
    lrs = {n: (cfg.learning_rate_box if n == "box_head" else lr_prompt if n in prompt_names
               else cfg.learning_rate_main) for n in named}
    opt = Adam(lrs, cfg.weight_decay) if cfg.optimizer == "adam" else GradientDescent(lrs)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, task_index]))
    S = len(batch)
    bs = min(cfg.batch_size, S) if cfg.batch_size > 0 else S
    history = []
    step = 0
    for epoch in range(cfg.epochs_per_task):
        lr_mult = cfg.lr_drop_factor if epoch >= cfg.lr_drop_epoch else 1.0
        order = rng.permutation(S)
        epoch_loss = 0.0
        for start in range(0, S, bs):
            idx = order[start:start + bs]
            sub = batch.take(idx)
            tg = targets.take(idx, N)
            tensors = dict(det.trainable_named())
            with GradTape() as tape:
                logits, boxes = det.forward(sub)
                loss = detection_loss(logits, boxes, tg, cfg.focal_alpha, cfg.focal_gamma, cfg.box_loss_weight)
                if prompt_names and cfg.lambda_sparse > 0:
                    loss = loss + sparse_loss([[tensors[n]] for n in sorted(prompt_names)], cfg.lambda_sparse)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(step, task_id)
            names = list(tensors)
            grads = dict(zip(names, tape.gradient(loss, [tensors[n] for n in names])))
            new = opt.step({n: tensors[n].data for n in names}, grads, lr_mult)
            det.set_trainable(new)
            epoch_loss += value * len(idx)
            step += 1
        history.append(epoch_loss / S)
    return det.prompt_params(), history


def evaluate(ctx: RunContext, upto: int, pseudo_count: int = 0, stage: str = "trained") -> TaskMetrics:
    """AP50 over the held-out scenes of tasks ``0..upto`` for all classes seen so far."""
    det = ctx.detector
    specs = ctx.specs[:upto + 1]
    seen = [c for s in specs for c in s.class_ids]
    seen_set = set(seen)
    dets_all, gts_all = [], []
    for k in range(upto + 1):
        batch = ctx.test_batches[k]
        for sc, ds in zip(batch.scenes, infer_batch(det, batch)):
            dets_all.append(nms([d for d in ds if d.class_id in seen_set]))
            gts_all.append([(o.class_id, o.box) for o in sc.objects if o.class_id in seen_set])
    res = compute_ap50(dets_all, gts_all, seen)
    current = ctx.specs[upto].class_ids
    prev = [c for s in specs[:-1] for c in s.class_ids]
    return TaskMetrics(
        task_id=ctx.specs[upto].task_id,
        stage=stage,
        current=res.group_mean(current),
        previous=res.group_mean(prev) if prev else None,
        all=res.mean,
        per_task={s.task_id: res.group_mean(s.class_ids) for s in specs},
        per_class=res.per_class,
        pseudo_labels=pseudo_count,
    )


def run_incremental(specs: Sequence[TaskSpec], cfg: TrainingConfig, out_dir: str | None = None,
                    ctx: RunContext | None = None) -> tuple[IncrementalRunState, list[dict]]:
    """Run every task in order and return the run state plus metrics rows."""
    if not specs:
        raise ValueError("at least one task is required")
    ctx = ctx or make_context(specs, cfg, out_dir)
    det = ctx.detector
    state = IncrementalRunState(theta_init=det.prompt_params())
    state.frozen_hashes.append(det.frozen_hash())
    if out_dir:
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
        _save(out_dir, state.theta_init, specs[0].task_id, "init")
    init_heads = det.head_params()
    seen: set[int] = set()
    for t, spec in enumerate(specs):
        if not cfg.warm_start_heads:
            det.load_head_params(init_heads)
        targets, n_pseudo = task_targets(ctx, t, seen)
        theta_t, history = train_task(ctx, t, targets)
        state.trained[spec.task_id] = theta_t
        state.heads[spec.task_id] = det.head_params()
        state.loss_history[spec.task_id] = history
        if out_dir:
            _save(out_dir, theta_t, spec.task_id, "trained")
        stage = "trained"
        if t >= 1 and cfg.use_fusion and cfg.use_prompts:
            prev_id = specs[t - 1].task_id
            prev = state.fused.get(prev_id, state.trained[prev_id])
            fused, audit = fuse(theta_t, prev, state.theta_init, cfg.fusion)
            det.load_prompt_params(fused)
            state.fused[spec.task_id] = fused
            state.audits[spec.task_id] = audit
            stage = "fused"
            if out_dir:
                _save(out_dir, fused, spec.task_id, "fused")
        seen.update(spec.class_ids)
        h = det.frozen_hash()
        if h != state.frozen_hashes[0]:
            raise FreezeViolation(f"frozen parameters changed during task {spec.task_id}")
        state.frozen_hashes.append(h)
        m = evaluate(ctx, t, n_pseudo, stage)
        state.metrics.append(m)
        log.info("task %d (%s): current=%s previous=%s all=%s", spec.task_id, stage,
                 _fmt(m.current), _fmt(m.previous), _fmt(m.all))
    rows = metrics_rows(state.metrics)
    if out_dir:
        from .params import atomic_write_text
        atomic_write_text(os.path.join(out_dir, "metrics.csv"), metrics_csv(rows))
    return state, rows


def _fmt(v):
    return "-" if v is None else f"{v:.4f}"


def _save(out_dir: str, pv: ParameterVector, task_id: int, stage: str) -> None:
    save_checkpoint(os.path.join(out_dir, "checkpoints", f"task{task_id}_{stage}.json"), pv, task_id, stage)


def metrics_rows(metrics: Sequence[TaskMetrics]) -> list[dict]:
    rows = []
    for m in metrics:
        for group, val in (("current", m.current), ("previous", m.previous), ("all", m.all)):
            rows.append({"task": m.task_id, "stage": m.stage, "class_group": group, "ap50": val})
        for tid, val in m.per_task.items():
            rows.append({"task": m.task_id, "stage": m.stage, "class_group": f"task{tid}", "ap50": val})
    return rows


def metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "stage", "class_group", "ap50"])
    for r in rows:
        w.writerow([r["task"], r["stage"], r["class_group"], "" if r["ap50"] is None else repr(r["ap50"])])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# ablation grid


ABLATIONS: dict[str, dict] = {
    # name: (pseudo, prompts, fusion, sparse)
    "a": dict(use_pseudo=False, use_prompts=False, fusion=False, sparse=False),
    "b": dict(use_pseudo=True, use_prompts=False, fusion=False, sparse=False),
    "c": dict(use_pseudo=True, use_prompts=True, fusion=False, sparse=False),
    "d": dict(use_pseudo=True, use_prompts=True, fusion=True, sparse=False),
    "e": dict(use_pseudo=False, use_prompts=True, fusion=True, sparse=True),
    "f": dict(use_pseudo=True, use_prompts=True, fusion=True, sparse=True),
    "prompts_only": dict(use_pseudo=False, use_prompts=True, fusion=False, sparse=False),
}


def ablation_config(base: TrainingConfig, name: str) -> TrainingConfig:
    a = ABLATIONS[name]
    return base.replace(
        use_pseudo=a["use_pseudo"],
        use_prompts=a["use_prompts"],
        fusion=(base.fusion or FusionConfig()) if a["fusion"] else None,
        lambda_sparse=(base.lambda_sparse if base.lambda_sparse > 0 else 1e-5) if a["sparse"] else 0.0,
    )


def final_old_task_ap(state: IncrementalRunState) -> float | None:
    return state.metrics[-1].previous

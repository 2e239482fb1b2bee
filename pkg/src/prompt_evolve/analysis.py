"""Prompt-diversity metrics and hyperparameter sweeps."""

from __future__ import annotations

import csv
import io
import itertools
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .detector import TaskSpec, similarity_heatmap
from .incremental import RunContext, TrainingConfig, make_context, run_incremental
from .params import FusionConfig

THREADS_ENV = "PROMPT_EVOLVE_THREADS"


# ---------------------------------------------------------------------------
# MMD


@dataclass(frozen=True)
class MMDConfig:
    bandwidth: float | str = "median"

    def __post_init__(self):
        if self.bandwidth != "median" and not (isinstance(self.bandwidth, (int, float)) and self.bandwidth > 0):
            raise ValueError(f"bandwidth must be positive or 'median', got {self.bandwidth!r}")


def _as_samples(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x.reshape(x.shape[0], -1)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # direct differences keep d(x, y) == d(y, x) bit for bit
    out = np.empty((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        diff = b - a[i]
        out[i] = np.einsum("ij,ij->i", diff, diff)
    return out


def median_bandwidth(*sample_sets) -> float:
    """Median pairwise Euclidean distance over the pooled samples (1.0 if degenerate)."""
    pooled = np.concatenate([_as_samples(s) for s in sample_sets], axis=0)
    if pooled.shape[0] < 2:
        return 1.0
    d = _sq_dists(pooled, pooled)
    iu = np.triu_indices(pooled.shape[0], k=1)
    med = float(np.sqrt(np.median(d[iu])))
    return med if med > 0 else 1.0


def _kernel_mean(a: np.ndarray, b: np.ndarray, bw: float) -> float:
    k = np.exp(-_sq_dists(a, b) / (2.0 * bw * bw))
    # fsum is exactly rounded, so the result does not depend on sample order
    return math.fsum(k.ravel()) / k.size


def mmd2(samples_a, samples_b, cfg: MMDConfig | None = None) -> float:
    """Biased (V-statistic) squared MMD with a Gaussian kernel, clamped at 0."""
    cfg = cfg or MMDConfig()
    a, b = _as_samples(samples_a), _as_samples(samples_b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("MMD needs non-empty sample sets")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"sample dims differ: {a.shape[1]} vs {b.shape[1]}")
    bw = median_bandwidth(a, b) if cfg.bandwidth == "median" else float(cfg.bandwidth)
    val = _kernel_mean(a, a, bw) + _kernel_mean(b, b, bw) - 2.0 * _kernel_mean(a, b, bw)
    return max(0.0, val)


def a_mmd(samples_per_task: Sequence, cfg: MMDConfig | None = None) -> float:
    """Average squared MMD over all unordered task pairs.

    With the median heuristic one bandwidth is taken from all tasks pooled,
    so every pair is measured with the same kernel.
    """
    cfg = cfg or MMDConfig()
    if len(samples_per_task) < 2:
        raise ValueError("A-MMD needs at least two tasks")
    if cfg.bandwidth == "median":
        cfg = MMDConfig(median_bandwidth(*samples_per_task))
    vals = [mmd2(a, b, cfg) for a, b in itertools.combinations(samples_per_task, 2)]
    return math.fsum(sorted(vals)) / len(vals)


# ---------------------------------------------------------------------------
# run-level analyses


def prompt_samples(ctx: RunContext) -> list[list[np.ndarray]]:
    """``[layer][task]`` flattened prompts on each task's held-out scenes."""
    det = ctx.detector
    per_task = [det.layer_prompts(b) for b in ctx.test_batches]  # [task][layer] S x Lp x D
    layers = len(det.generators)
    return [[per_task[t][j].reshape(per_task[t][j].shape[0], -1) for t in range(len(per_task))]
            for j in range(layers)]


def ammd_per_layer(ctx: RunContext, cfg: MMDConfig | None = None) -> list[float]:
    return [a_mmd(samples, cfg) for samples in prompt_samples(ctx)]


def object_queries(ctx: RunContext, task_index: int) -> np.ndarray:
    """Proposal features of the task's own objects in its held-out scenes."""
    b = ctx.test_batches[task_index]
    own = set(ctx.specs[task_index].class_ids)
    rows = []
    for s, sc in enumerate(b.scenes):
        for n, o in enumerate(b.slot_obj[s]):
            if o >= 0 and sc.objects[o].class_id in own:
                rows.append(b.proposals[s, n])
    return np.array(rows).reshape(-1, b.proposals.shape[-1])


def run_heatmap(ctx: RunContext, layer: int = -1) -> np.ndarray:
    """Object-vs-prompt similarity per task pair using the current detector."""
    det = ctx.detector
    feats = [object_queries(ctx, t) for t in range(len(ctx.specs))]
    prompts = []
    for b in ctx.test_batches:
        p = det.layer_prompts(b)[layer]
        prompts.append(p.reshape(-1, p.shape[-1]))
    return similarity_heatmap(feats, prompts)


def ammd_csv(values: Sequence[float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "a_mmd"])
    for j, v in enumerate(values):
        w.writerow([j + 1, repr(float(v))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# sweeps


SWEEP_PARAMETERS = ("hidden_dim", "lambda_sparse", "top_k", "top_l", "fusion")

LAMBDA_GRID = [0.0, 1e-6, 3e-6, 1e-5, 3e-5, 1e-4]
HIDDEN_DIM_GRID = [2, 4, 8, 16, 32]
# (top_k, top_l); None means no fusion
FUSION_GRID: list[tuple[float, float] | None] = [
    None, (0.0, 0.0), (0.0, 0.3), (0.0, 0.7), (0.3, 0.3), (0.3, 0.7), (0.7, 0.3), (0.7, 0.7), (1.0, 0.0),
]


@dataclass
class SweepSpec:
    parameter: str
    values: list[Any]
    base: TrainingConfig = field(default_factory=TrainingConfig)
    tasks: list[TaskSpec] | None = None

    def __post_init__(self):
        if self.parameter not in SWEEP_PARAMETERS:
            raise ValueError(f"unknown sweep parameter {self.parameter!r}")
        for v in self.values:
            self.config_for(v)

    def config_for(self, value) -> TrainingConfig:
        base = self.base
        fusion = base.fusion or FusionConfig()
        if self.parameter == "hidden_dim":
            if int(value) < 1:
                raise ValueError("hidden_dim must be >= 1")
            return base.replace(hidden_dim=int(value))
        if self.parameter == "lambda_sparse":
            if value < 0:
                raise ValueError("lambda_sparse must be >= 0")
            return base.replace(lambda_sparse=float(value))
        if self.parameter == "top_k":
            return base.replace(fusion=FusionConfig(float(value), fusion.top_l))
        if self.parameter == "top_l":
            return base.replace(fusion=FusionConfig(fusion.top_k, float(value)))
        if value is None:
            return base.replace(fusion=None)
        k, l = value
        return base.replace(fusion=FusionConfig(float(k), float(l)))


def table7_sweep(base: TrainingConfig | None = None, tasks=None) -> SweepSpec:
    return SweepSpec("fusion", list(FUSION_GRID[:-1]), base or TrainingConfig(), tasks)


def value_label(parameter: str, value) -> str:
    if parameter == "fusion":
        return "no_fusion" if value is None else f"{value[0]:g}/{value[1]:g}"
    return repr(value)


def _sweep_cell(args) -> dict:
    parameter, value, cfg, tasks = args
    state, _ = run_incremental(tasks, cfg)
    final = state.metrics[-1]
    first = tasks[0].task_id
    later = [s.task_id for s in tasks[1:]]
    later_vals = [final.per_task[t] for t in later if final.per_task.get(t) is not None]
    ctx_params = sum(a.size for _, a in state.trained[tasks[-1].task_id]) if cfg.use_prompts else 0
    head_params = sum(a.size for _, a in state.heads[tasks[-1].task_id])
    return {
        "parameter": parameter,
        "value": value_label(parameter, value),
        "ap50_all": final.all,
        "ap50_first_task": final.per_task.get(first),
        "ap50_later_tasks": float(np.mean(later_vals)) if later_vals else None,
        "ap50_previous": final.previous,
        "ap50_current": final.current,
        "prompt_params": ctx_params,
        "trainable_params": ctx_params + head_params,
    }


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def run_sweep(spec: SweepSpec, workers: int | None = None) -> list[dict]:
    """Run one incremental run per value with shared seeds; rows keep value order."""
    from .detector import default_task_specs
    tasks = spec.tasks or default_task_specs()
    cells = [(spec.parameter, v, spec.config_for(v), tasks) for v in spec.values]
    n = workers or _workers()
    if n > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=min(n, len(cells))) as ex:
            return list(ex.map(_sweep_cell, cells))
    return [_sweep_cell(c) for c in cells]


SWEEP_COLUMNS = ["parameter", "value", "ap50_all", "ap50_first_task", "ap50_later_tasks", "ap50_previous",
                 "ap50_current", "prompt_params", "trainable_params"]


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in SWEEP_COLUMNS])
    return buf.getvalue()


def trained_context(tasks: Sequence[TaskSpec], cfg: TrainingConfig) -> RunContext:
    """Run the protocol and return the context holding the final detector."""
    ctx = make_context(tasks, cfg)
    run_incremental(tasks, cfg, ctx=ctx)
    return ctx


__all__ = [
    "FUSION_GRID", "HIDDEN_DIM_GRID", "LAMBDA_GRID", "MMDConfig", "SweepSpec", "a_mmd", "ammd_csv",
    "ammd_per_layer", "median_bandwidth", "mmd2", "object_queries", "prompt_samples", "run_heatmap",
    "run_sweep", "sweep_csv", "table7_sweep", "trained_context",
]

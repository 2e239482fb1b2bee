"""Synthetic incremental detection world and a toy prompt-tuned detector.

Scenes are sets of boxed objects whose appearance features are drawn from
class-conditional Gaussians. A frozen random backbone turns a scene into a
fixed number of proposals (one per object, the rest background), each with
a reference box. The detector runs a frozen prompted decoder over the
proposals and reads class scores and box refinements from trainable heads.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .params import ParameterVector
from .prompting import (
    ConfigurationError,
    DecoderStack,
    PromptGenerator,
    build_decoder_stack,
    generate_prompts,
    query_function,
)
from .tensor import Tensor

Box = tuple[float, float, float, float]  # cx, cy, w, h


# ---------------------------------------------------------------------------
# geometry


def box_to_corners(b) -> tuple[float, float, float, float]:
    cx, cy, w, h = b
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def iou(a, b) -> float:
    """Intersection over union of two ``(cx, cy, w, h)`` boxes."""
    ax0, ay0, ax1, ay1 = box_to_corners(a)
    bx0, by0, bx1, by1 = box_to_corners(b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``n x 4`` and ``m x 4`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    a0, a1 = a[:, :2] - a[:, 2:] / 2, a[:, :2] + a[:, 2:] / 2
    b0, b1 = b[:, :2] - b[:, 2:] / 2, b[:, :2] + b[:, 2:] / 2
    lo = np.maximum(a0[:, None, :], b0[None, :, :])
    hi = np.minimum(a1[:, None, :], b1[None, :, :])
    wh = np.clip(hi - lo, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# scenes and tasks


@dataclass
class SceneObject:
    class_id: int
    box: Box
    feature_seed: int


@dataclass
class SyntheticScene:
    objects: list[SceneObject]
    labeled_mask: list[bool]
    seed: int

    @property
    def class_ids(self) -> list[int]:
        return [o.class_id for o in self.objects]

    @property
    def boxes(self) -> np.ndarray:
        return np.array([o.box for o in self.objects], dtype=np.float64).reshape(-1, 4)

    def labeled(self) -> list[tuple[int, Box]]:
        return [(o.class_id, o.box) for o, m in zip(self.objects, self.labeled_mask) if m]

    def to_json(self) -> str:
        return json.dumps({
            "class_ids": self.class_ids,
            "boxes": [list(o.box) for o in self.objects],
            "labeled_mask": list(self.labeled_mask),
            "seed": self.seed,
            "feature_seeds": [o.feature_seed for o in self.objects],
        })

    @classmethod
    def from_json(cls, line: str) -> "SyntheticScene":
        d = json.loads(line)
        fseeds = d.get("feature_seeds") or [d["seed"] * 1000 + i for i in range(len(d["class_ids"]))]
        objs = [SceneObject(int(c), tuple(float(v) for v in b), int(s))
                for c, b, s in zip(d["class_ids"], d["boxes"], fseeds)]
        return cls(objs, [bool(m) for m in d["labeled_mask"]], int(d["seed"]))


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    class_ids: tuple[int, ...]
    scene_count: int = 200
    co_occurrence_rate: float = 0.5
    test_scene_count: int = 60

    def __post_init__(self):
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))
        if not 0.0 <= self.co_occurrence_rate <= 1.0:
            raise ConfigurationError(f"co_occurrence_rate must lie in [0, 1], got {self.co_occurrence_rate}")

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "class_ids": list(self.class_ids), "scene_count": self.scene_count,
                "co_occurrence_rate": self.co_occurrence_rate, "test_scene_count": self.test_scene_count}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(int(d["task_id"]), tuple(d["class_ids"]), int(d.get("scene_count", 200)),
                   float(d.get("co_occurrence_rate", 0.5)), int(d.get("test_scene_count", 60)))


def default_task_specs(tasks: int = 4, classes_per_task: int = 3, scene_count: int = 200,
                       co_occurrence_rate: float = 0.5, test_scene_count: int = 60) -> list[TaskSpec]:
    return [TaskSpec(t + 1, tuple(range(t * classes_per_task, (t + 1) * classes_per_task)),
                     scene_count, co_occurrence_rate, test_scene_count) for t in range(tasks)]


@dataclass
class TaskSequence:
    specs: list[TaskSpec]
    train: list[list[SyntheticScene]]
    test: list[list[SyntheticScene]]
    seed: int

    @property
    def all_classes(self) -> list[int]:
        return [c for s in self.specs for c in s.class_ids]

    def to_jsonl(self) -> str:
        return "\n".join(s.to_json() for scenes in self.train for s in scenes) + "\n"


def _random_box(rng: np.random.Generator, lo: float = 0.12, hi: float = 0.3) -> Box:
    w, h = rng.uniform(lo, hi, size=2)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return (float(cx), float(cy), float(w), float(h))


def _scene(rng, own: Sequence[int], others: Sequence[int], rate: float, seed: int,
           label_others: bool, max_own: int = 2, max_other: int = 2) -> SyntheticScene:
    objs, mask = [], []
    for _ in range(rng.integers(1, max_own + 1)):
        objs.append(int(rng.choice(own)))
        mask.append(True)
    if others and rng.random() < rate:
        for _ in range(rng.integers(1, max_other + 1)):
            objs.append(int(rng.choice(others)))
            mask.append(label_others)
    boxes = [_random_box(rng) for _ in objs]
    fseeds = rng.integers(0, 2**31 - 1, size=len(objs))
    return SyntheticScene([SceneObject(c, b, int(s)) for c, b, s in zip(objs, boxes, fseeds)], mask, seed)


def generate_task_sequence(seed: int, spec_list: Sequence[TaskSpec]) -> TaskSequence:
    """Deterministic training and held-out scenes for each task.

    Training scenes label only the task's own classes; with probability
    ``co_occurrence_rate`` a scene also contains unlabeled objects from the
    other tasks. Held-out scenes are drawn the same way but fully labeled.
    """
    seen: set[int] = set()
    for s in spec_list:
        overlap = seen.intersection(s.class_ids)
        if overlap:
            raise ConfigurationError(f"task {s.task_id} reuses classes {sorted(overlap)}")
        seen.update(s.class_ids)
    root = np.random.SeedSequence(seed)
    train, test = [], []
    for spec, child in zip(spec_list, root.spawn(len(spec_list))):
        rng = np.random.default_rng(child)
        others = [c for s in spec_list if s.task_id != spec.task_id for c in s.class_ids]
        train.append([_scene(rng, spec.class_ids, others, spec.co_occurrence_rate,
                             int(rng.integers(2**31 - 1)), label_others=False)
                      for _ in range(spec.scene_count)])
        test.append([_scene(rng, spec.class_ids, others, spec.co_occurrence_rate,
                            int(rng.integers(2**31 - 1)), label_others=True)
                     for _ in range(spec.test_scene_count)])
    return TaskSequence(list(spec_list), train, test, seed)


# ---------------------------------------------------------------------------
# frozen backbone


@dataclass
class Backbone:
    """Frozen appearance model plus random affine map to proposals.

    Object appearance is ``prototype[class] + noise``; a proposal is
    ``A_feat @ appearance + A_box @ (ref_box - 0.5) + bias + noise`` where
    the reference box is a jittered copy of the object's box. Slots left
    over after the objects are background proposals with random boxes.
    """

    prototypes: np.ndarray  # num_classes x F
    A_feat: np.ndarray  # F x D
    A_box: np.ndarray  # 4 x D
    bias: np.ndarray  # D
    num_slots: int
    appearance_noise: float = 0.5
    proposal_noise: float = 0.1
    box_jitter: float = 0.06

    @classmethod
    def random(cls, num_classes: int, D: int, num_slots: int, rng: np.random.Generator,
               separation: float = 2.0, feature_dim: int | None = None, **kw) -> "Backbone":
        F = feature_dim or D
        protos = rng.normal(size=(num_classes, F))
        protos *= separation / np.linalg.norm(protos, axis=1, keepdims=True)
        return cls(protos, rng.normal(0, 1 / math.sqrt(F), size=(F, D)),
                   rng.normal(0, 1.0, size=(4, D)), rng.normal(0, 0.1, size=D), num_slots, **kw)

    @property
    def D(self) -> int:
        return self.A_feat.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [self.prototypes, self.A_feat, self.A_box, self.bias]

    def render(self, scene: SyntheticScene) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Proposals ``N x D``, reference boxes ``N x 4`` and slot -> object index (-1 background)."""
        N = self.num_slots
        if len(scene.objects) > N:
            raise ConfigurationError(f"scene has {len(scene.objects)} objects but only {N} slots")
        F = self.prototypes.shape[1]
        feats = np.zeros((N, F))
        boxes = np.zeros((N, 4))
        slot_obj = np.full(N, -1, dtype=np.int64)
        for i, obj in enumerate(scene.objects):
            orng = np.random.default_rng(obj.feature_seed)
            feats[i] = self.prototypes[obj.class_id] + self.appearance_noise * orng.normal(size=F)
            cx, cy, w, h = obj.box
            j = orng.uniform(-self.box_jitter, self.box_jitter, size=4)
            boxes[i] = (cx + j[0] * w, cy + j[1] * h, w * (1 + j[2]), h * (1 + j[3]))
            slot_obj[i] = i
        srng = np.random.default_rng(scene.seed)
        for i in range(len(scene.objects), N):
            feats[i] = self.appearance_noise * srng.normal(size=F)
            boxes[i] = _random_box(srng, 0.05, 0.35)
        boxes = np.clip(boxes, 1e-3, 1 - 1e-3)
        props = feats @ self.A_feat + (boxes - 0.5) @ self.A_box + self.bias
        props = props + self.proposal_noise * srng.normal(size=props.shape)
        return props, boxes, slot_obj

    def render_batch(self, scenes: Sequence[SyntheticScene]) -> "RenderedBatch":
        out = [self.render(s) for s in scenes]
        return RenderedBatch(np.stack([o[0] for o in out]), np.stack([o[1] for o in out]),
                             np.stack([o[2] for o in out]), list(scenes))


@dataclass
class RenderedBatch:
    proposals: np.ndarray  # S x N x D
    ref_boxes: np.ndarray  # S x N x 4
    slot_obj: np.ndarray  # S x N
    scenes: list[SyntheticScene]

    def __len__(self) -> int:
        return len(self.scenes)

    def take(self, idx) -> "RenderedBatch":
        idx = np.asarray(idx)
        return RenderedBatch(self.proposals[idx], self.ref_boxes[idx], self.slot_obj[idx],
                             [self.scenes[i] for i in idx])


# ---------------------------------------------------------------------------
# detector


@dataclass
class Detection:
    score: float
    class_id: int
    box: Box
    slot: int = -1


@dataclass
class PseudoLabel:
    class_id: int
    box: Box
    score: float = 1.0


@dataclass
class ToyDetector:
    """Frozen backbone and decoder with trainable class/box heads and prompt generators.

    The class head scores ``num_classes`` object classes plus a final
    no-object column.
    """

    backbone: Backbone
    decoder: DecoderStack
    class_head: Tensor  # C x (num_classes + 1)
    class_bias: Tensor  # 1 x (num_classes + 1)
    box_head: Tensor  # C x 4
    use_prompts: bool = True

    @property
    def num_classes(self) -> int:
        return self.class_head.shape[1] - 1

    @property
    def num_slots(self) -> int:
        return self.backbone.num_slots

    @property
    def generators(self) -> list[PromptGenerator]:
        return self.decoder.generators

    # parameter groups ----------------------------------------------------
    def prompt_named(self) -> list[tuple[str, Tensor]]:
        out = []
        for j, g in enumerate(self.generators):
            out += [(f"layer{j}.W1", g.W1), (f"layer{j}.W2", g.W2)]
        return out

    def head_named(self) -> list[tuple[str, Tensor]]:
        return [("class_head", self.class_head), ("class_bias", self.class_bias), ("box_head", self.box_head)]

    def prompt_params(self) -> ParameterVector:
        return ParameterVector.from_tensors(self.prompt_named())

    def head_params(self) -> ParameterVector:
        return ParameterVector.from_tensors(self.head_named())

    def trainable_named(self) -> list[tuple[str, Tensor]]:
        return self.head_named() + (self.prompt_named() if self.use_prompts else [])

    def load_prompt_params(self, pv: ParameterVector) -> None:
        self.prompt_params().check_aligned(pv)
        for j, g in enumerate(self.generators):
            g.W1 = Tensor(pv[f"layer{j}.W1"], requires_grad=True)
            g.W2 = Tensor(pv[f"layer{j}.W2"], requires_grad=True)

    def load_head_params(self, pv: ParameterVector) -> None:
        self.head_params().check_aligned(pv)
        self.class_head = Tensor(pv["class_head"], requires_grad=True)
        self.class_bias = Tensor(pv["class_bias"], requires_grad=True)
        self.box_head = Tensor(pv["box_head"], requires_grad=True)

    def set_trainable(self, named: dict[str, np.ndarray]) -> None:
        heads = {n: named[n] for n, _ in self.head_named() if n in named}
        if heads:
            self.load_head_params(self.head_params().with_flat(
                np.concatenate([np.asarray(heads[n]).reshape(-1) for n, _ in self.head_named()])))
        prompts = [n for n, _ in self.prompt_named()]
        if all(n in named for n in prompts) and prompts:
            self.load_prompt_params(ParameterVector((n, named[n]) for n in prompts))

    def frozen_arrays(self) -> list[np.ndarray]:
        arrs = list(self.backbone.arrays())
        for layer in self.decoder.layers:
            arrs += [t.data for t in layer.tensors()]
        return arrs

    def frozen_hash(self) -> str:
        h = hashlib.sha256()
        for a in self.frozen_arrays():
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        return h.hexdigest()

    # forward ---------------------------------------------------------------
    def forward(self, batch: RenderedBatch, use_prompts: bool | None = None):
        """Class logits ``(S*N) x (K+1)`` and boxes ``(S*N) x 4``."""
        use_prompts = self.use_prompts if use_prompts is None else use_prompts
        props = Tensor(batch.proposals)
        S, N, C = props.shape
        query = query_function(props) if use_prompts else None
        h = self.decoder(props, query, use_prompts=use_prompts and bool(self.generators))
        h2 = h.reshape(S * N, C)
        ones = Tensor(np.ones((S * N, 1)))
        logits = h2 @ self.class_head + ones @ self.class_bias
        ref = np.clip(batch.ref_boxes.reshape(S * N, 4), 1e-4, 1 - 1e-4)
        ref_logit = Tensor(np.log(ref) - np.log1p(-ref))
        boxes = T.sigmoid(ref_logit + h2 @ self.box_head)
        return logits, boxes

    def layer_prompts(self, batch: RenderedBatch) -> list[np.ndarray]:
        """Generated prompts per layer, each ``S x L_p x D``."""
        query = query_function(Tensor(batch.proposals))
        return [generate_prompts(g, query).p.data for g in self.generators]


def build_toy_detector(num_classes: int, rng: np.random.Generator, *, D: int = 32, heads: int = 4,
                       hidden_dim: int = 8, prompt_length: int = 8, layers: int = 3, num_slots: int = 10,
                       use_prompts: bool = True, project_prompt_keys: bool = False,
                       separation: float = 3.0, backbone_kw: dict | None = None,
                       prompt_up_scale: float = 0.1, attn_gain: float = 0.4,
                       ffn_gain: float = 0.2) -> ToyDetector:
    """Construct a detector; frozen parts and initial trainable parts all come from ``rng``."""
    backbone = Backbone.random(num_classes, D, num_slots, rng, separation=separation, **(backbone_kw or {}))
    gens = [PromptGenerator.random(D, hidden_dim, prompt_length, rng, up_scale=prompt_up_scale)
            for _ in range(layers)]
    decoder = build_decoder_stack(layers, D, heads, gens, rng, attn_gain=attn_gain, ffn_gain=ffn_gain,
                                  project_prompt_keys=project_prompt_keys)
    class_head = Tensor(np.zeros((D, num_classes + 1)), requires_grad=True)
    class_bias = Tensor(np.zeros((1, num_classes + 1)), requires_grad=True)
    box_head = Tensor(np.zeros((D, 4)), requires_grad=True)
    return ToyDetector(backbone, decoder, class_head, class_bias, box_head, use_prompts)


def _probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def infer_batch(det: ToyDetector, batch: RenderedBatch) -> list[list[Detection]]:
    """One detection per query slot per scene.

    The score is the highest object-class probability (the no-object column
    is excluded from the argmax but included in the softmax).
    """
    logits, boxes = det.forward(batch)
    p = _probs(logits.data)[:, :-1]
    cls = p.argmax(axis=1)
    score = p[np.arange(p.shape[0]), cls]
    S, N = len(batch), det.num_slots
    b = boxes.data
    out = []
    for s in range(S):
        out.append([Detection(float(score[s * N + n]), int(cls[s * N + n]), tuple(float(v) for v in b[s * N + n]), n)
                    for n in range(N)])
    return out


def infer(det: ToyDetector, scene: SyntheticScene) -> list[Detection]:
    return infer_batch(det, det.backbone.render_batch([scene]))[0]


# ---------------------------------------------------------------------------
# pseudo labels


def pseudo_label(dets: Iterable[Detection], tau: float = 0.65) -> list[PseudoLabel]:
    """Keep detections whose score is strictly above ``tau``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return [PseudoLabel(d.class_id, d.box, d.score) for d in dets if d.score > tau]


def merge_labels(ground_truth: Sequence[tuple[int, Box]], pseudo: Sequence[PseudoLabel],
                 current_classes: Iterable[int], iou_threshold: float = 0.5) -> list[tuple[int, Box]]:
    """Ground truth plus pseudo labels for classes outside the current task.

    A pseudo label is dropped when it overlaps a ground-truth box with IoU
    above the threshold, or a higher-scoring kept pseudo label of the same
    class.
    """
    current = set(current_classes)
    targets = [(int(c), tuple(b)) for c, b in ground_truth]
    kept: list[tuple[int, Box]] = []
    for pl in sorted(pseudo, key=lambda x: -x.score):
        if pl.class_id in current:
            continue
        if any(iou(pl.box, gb) > iou_threshold for _, gb in targets):
            continue
        if any(c == pl.class_id and iou(pl.box, kb) > iou_threshold for c, kb in kept):
            continue
        kept.append((pl.class_id, tuple(pl.box)))
    return targets + kept


# ---------------------------------------------------------------------------
# evaluation


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Per-class greedy duplicate suppression."""
    kept: list[Detection] = []
    for d in sorted(dets, key=lambda x: -x.score):
        if all(k.class_id != d.class_id or iou(k.box, d.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-points area under the precision-recall curve for score-sorted hits."""
    tp = np.asarray(tp, dtype=np.float64)
    if n_gt <= 0:
        raise ValueError("AP undefined without ground truth")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    # precision envelope, right to left
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


@dataclass
class APResult:
    per_class: dict[int, float | None]
    mean: float | None

    def group_mean(self, classes: Iterable[int]) -> float | None:
        vals = [self.per_class[c] for c in classes if self.per_class.get(c) is not None]
        return float(np.mean(vals)) if vals else None


def compute_ap50(dets_per_scene: Sequence[Sequence[Detection]],
                 gt_per_scene: Sequence[Sequence[tuple[int, Box]]],
                 class_set: Iterable[int], iou_threshold: float = 0.5) -> APResult:
    """Per-class AP at IoU 0.5 and its mean over classes with ground truth.

    Detections are visited in descending score order (ties keep input
    order) and matched to the best-overlapping unmatched ground truth in
    the same scene.
    """
    per_class: dict[int, float | None] = {}
    for c in class_set:
        gts = [[np.asarray(b) for k, b in g if k == c] for g in gt_per_scene]
        n_gt = sum(len(g) for g in gts)
        if n_gt == 0:
            per_class[c] = None
            continue
        cand = [(d.score, s, i) for s, ds in enumerate(dets_per_scene) for i, d in enumerate(ds) if d.class_id == c]
        cand.sort(key=lambda x: -x[0])
        used = [np.zeros(len(g), dtype=bool) for g in gts]
        hits = []
        for _, s, i in cand:
            box = dets_per_scene[s][i].box
            best, best_j = -1.0, -1
            for j, gb in enumerate(gts[s]):
                if used[s][j]:
                    continue
                v = iou(box, gb)
                if v > best:
                    best, best_j = v, j
            if best_j >= 0 and best >= iou_threshold:
                used[s][best_j] = True
                hits.append(1.0)
            else:
                hits.append(0.0)
        per_class[c] = average_precision(np.array(hits), n_gt)
    defined = [v for v in per_class.values() if v is not None]
    return APResult(per_class, float(np.mean(defined)) if defined else None)


def ap_csv(result: APResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["class_id", "ap50"])
    for c, v in sorted(result.per_class.items()):
        w.writerow([c, "" if v is None else repr(v)])
    w.writerow(["mean", "" if result.mean is None else repr(result.mean)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# similarity diagnostic


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def similarity_heatmap(object_features: Sequence[np.ndarray], prompt_sets: Sequence[np.ndarray]) -> np.ndarray:
    """Mean cosine similarity between task-i object queries and task-j prompts.

    Zero-norm vectors contribute a similarity of 0.
    """
    rows = []
    for feats in object_features:
        f = _unit_rows(np.asarray(feats).reshape(-1, np.shape(feats)[-1]))
        row = []
        for prompts in prompt_sets:
            p = _unit_rows(np.asarray(prompts).reshape(-1, np.shape(prompts)[-1]))
            if f.shape[1] != p.shape[1]:
                raise ValueError(f"feature dim {f.shape[1]} != prompt dim {p.shape[1]}")
            row.append(float((f @ p.T).mean()) if f.size and p.size else 0.0)
        rows.append(row)
    return np.array(rows)


def heatmap_csv(mat: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["object_task"] + [f"prompt_task_{j + 1}" for j in range(mat.shape[1])])
    for i, row in enumerate(mat):
        w.writerow([i + 1] + [repr(float(v)) for v in row])
    return buf.getvalue()

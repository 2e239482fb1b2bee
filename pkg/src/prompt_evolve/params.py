"""Parameter-vector algebra used by prompt fusion.

A :class:`ParameterVector` is an ordered, named collection of arrays that is
viewed as one flat vector. Fusion compares two snapshots through their task
vectors, keeps the largest-magnitude entries of each, averages entries whose
update directions agree and falls back to the previous values elsewhere.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .tensor import Tensor, abs_sum, scale

CHECKPOINT_FORMAT_VERSION = 1
STAGES = ("init", "trained", "fused")


class AlignmentError(ValueError):
    """Two parameter vectors do not share names, order and entry sizes."""


class CheckpointError(ValueError):
    """A checkpoint document is malformed."""


class ParameterVector:
    """Ordered named arrays with a flat view.

    Entries keep their original shapes (for checkpoints and model loading);
    all arithmetic happens on the flattened concatenation.
    """

    def __init__(self, entries: Iterable[tuple[str, np.ndarray]]):
        self._names: list[str] = []
        self._arrays: list[np.ndarray] = []
        for name, values in entries:
            if name in self._names:
                raise ValueError(f"duplicate parameter name {name!r}")
            arr = np.array(values, dtype=np.float64, copy=True)
            arr.setflags(write=False)
            self._names.append(name)
            self._arrays.append(arr)

    @classmethod
    def from_tensors(cls, named: Iterable[tuple[str, Tensor]]) -> "ParameterVector":
        return cls((n, t.data) for n, t in named)

    @property
    def names(self) -> list[str]:
        return list(self._names)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [a.shape for a in self._arrays]

    @property
    def total_len(self) -> int:
        return sum(a.size for a in self._arrays)

    def __len__(self) -> int:
        return self.total_len

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(zip(self._names, self._arrays))

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._arrays[self._names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return self.aligned(other) and bool(np.array_equal(self.flat(), other.flat()))

    def __repr__(self) -> str:
        return f"ParameterVector({len(self._names)} entries, total_len={self.total_len})"

    def flat(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([a.reshape(-1) for a in self._arrays])

    def with_flat(self, flat: np.ndarray) -> "ParameterVector":
        """A vector aligned with ``self`` holding ``flat`` values."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.total_len,):
            raise AlignmentError(f"flat length {flat.shape} does not match total_len {self.total_len}")
        out, pos = [], 0
        for name, arr in self:
            out.append((name, flat[pos:pos + arr.size].reshape(arr.shape)))
            pos += arr.size
        return ParameterVector(out)

    def subset(self, names: Sequence[str]) -> "ParameterVector":
        return ParameterVector((n, self[n]) for n in names)

    def mismatch(self, other: "ParameterVector") -> str | None:
        """Description of the first misaligned entry, or None when aligned."""
        for i, ((na, a), (nb, b)) in enumerate(zip(self, other)):
            if na != nb:
                return f"entry {i}: name {na!r} vs {nb!r}"
            if a.size != b.size:
                return f"entry {i} ({na!r}): length {a.size} vs {b.size}"
        if len(self._names) != len(other._names):
            k = min(len(self._names), len(other._names))
            extra = (self._names + other._names)[k] if len(self._names) > k else other._names[k]
            return f"entry {k} ({extra!r}): present in only one vector"
        return None

    def aligned(self, other: "ParameterVector") -> bool:
        return self.mismatch(other) is None

    def check_aligned(self, other: "ParameterVector") -> None:
        msg = self.mismatch(other)
        if msg is not None:
            raise AlignmentError(f"parameter vectors are not aligned: {msg}")


# ---------------------------------------------------------------------------
# task vectors


@dataclass(frozen=True)
class TaskVector:
    values: np.ndarray
    magnitude: np.ndarray
    sign: np.ndarray  # int8 in {-1, 0, +1}

    @classmethod
    def from_values(cls, values: np.ndarray) -> "TaskVector":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.abs(values), np.sign(values).astype(np.int8))


def task_vector(current: ParameterVector, base: ParameterVector) -> TaskVector:
    current.check_aligned(base)
    return TaskVector.from_values(current.flat() - base.flat())


def top_fraction_indices(magnitude: np.ndarray, fraction: float) -> np.ndarray:
    """Indices of the ``floor(fraction * n)`` largest magnitudes.

    Ties go to the lower index. The result is sorted ascending.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    magnitude = np.asarray(magnitude, dtype=np.float64)
    n = magnitude.size
    # guard against 0.7 * 10 == 6.999...
    count = min(n, int(math.floor(fraction * n + 1e-9)))
    order = np.argsort(-magnitude, kind="stable")
    return np.sort(order[:count])


# ---------------------------------------------------------------------------
# fusion


@dataclass(frozen=True)
class FusionConfig:
    top_k: float = 0.7
    top_l: float = 0.3

    def __post_init__(self):
        for name in ("top_k", "top_l"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class FusionAudit:
    preserved_prev: int
    preserved_curr: int
    averaged: int
    fallback: int
    I_prev: np.ndarray = field(repr=False)
    I_curr: np.ndarray = field(repr=False)
    branch: np.ndarray = field(repr=False)  # per index: 1..4

    @property
    def total(self) -> int:
        return self.preserved_prev + self.preserved_curr + self.averaged + self.fallback

    def to_dict(self) -> dict:
        return {
            "preserved_prev": self.preserved_prev,
            "preserved_curr": self.preserved_curr,
            "averaged": self.averaged,
            "fallback": self.fallback,
            "total": self.total,
            "I_prev_size": int(self.I_prev.size),
            "I_curr_size": int(self.I_curr.size),
        }


BRANCH_PREV, BRANCH_CURR, BRANCH_AVG, BRANCH_FALLBACK = 1, 2, 3, 4


def fuse_flat(curr: np.ndarray, prev: np.ndarray, init: np.ndarray,
              cfg: FusionConfig) -> tuple[np.ndarray, FusionAudit]:
    """Fusion on raw flat arrays; see :func:`fuse`."""
    v_curr = TaskVector.from_values(curr - prev)
    v_prev = TaskVector.from_values(prev - init)
    I_prev = top_fraction_indices(v_prev.magnitude, cfg.top_k)
    I_curr = top_fraction_indices(v_curr.magnitude, cfg.top_l)

    n = curr.size
    in_prev = np.zeros(n, dtype=bool)
    in_prev[I_prev] = True
    in_curr = np.zeros(n, dtype=bool)
    in_curr[I_curr] = True

    take_prev = in_prev
    take_curr = in_curr & ~in_prev
    undecided = ~(in_prev | in_curr)
    # sgn(0) == 0 never counts as agreement
    agree = (v_curr.sign == v_prev.sign) & (v_curr.sign != 0)
    take_avg = undecided & agree
    fallback = undecided & ~agree

    out = prev.copy()
    out[take_curr] = curr[take_curr]
    out[take_avg] = 0.5 * (curr[take_avg] + prev[take_avg])

    branch = np.full(n, BRANCH_FALLBACK, dtype=np.int8)
    branch[take_prev] = BRANCH_PREV
    branch[take_curr] = BRANCH_CURR
    branch[take_avg] = BRANCH_AVG
    audit = FusionAudit(
        preserved_prev=int(take_prev.sum()),
        preserved_curr=int(take_curr.sum()),
        averaged=int(take_avg.sum()),
        fallback=int(fallback.sum()),
        I_prev=I_prev,
        I_curr=I_curr,
        branch=branch,
    )
    return out, audit


def fuse(theta_curr: ParameterVector, theta_prev_fused: ParameterVector,
         theta_init: ParameterVector, cfg: FusionConfig | None = None
         ) -> tuple[ParameterVector, FusionAudit]:
    """Fuse freshly trained prompt parameters into the previous fused ones.

    Per index, in priority order: keep the previous value where the
    cumulative update since ``theta_init`` is among the top ``top_k``
    fraction; keep the current value where the latest update is among the
    top ``top_l`` fraction; average where both updates point the same
    (nonzero) way; otherwise keep the previous value.
    """
    cfg = cfg or FusionConfig()
    theta_curr.check_aligned(theta_prev_fused)
    theta_curr.check_aligned(theta_init)
    out, audit = fuse_flat(theta_curr.flat(), theta_prev_fused.flat(), theta_init.flat(), cfg)
    return theta_prev_fused.with_flat(out), audit


# ---------------------------------------------------------------------------
# sparsity


def sparse_loss(layer_params: Sequence, lam: float) -> Tensor:
    """L1 penalty ``lam * sum_j sum_i |theta_j[i]|`` over decoder layers.

    ``layer_params`` holds, per layer, either a ParameterVector, a Tensor or
    a sequence of Tensors. Tensors stay on the active gradient tape.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    total = None
    for layer in layer_params:
        if isinstance(layer, ParameterVector):
            parts = [Tensor(layer.flat())]
        elif isinstance(layer, Tensor):
            parts = [layer]
        else:
            parts = list(layer)
        for t in parts:
            term = abs_sum(t)
            total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    return scale(total, lam)


def sparsity_report(pv: ParameterVector | np.ndarray, eps: float = 1e-4) -> float:
    """Fraction of entries with ``|value| < eps``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    flat = pv.flat() if isinstance(pv, ParameterVector) else np.asarray(pv, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        return 0.0
    return float(np.mean(np.abs(flat) < eps))


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_dict(pv: ParameterVector, task_id: int, stage: str) -> dict:
    if stage not in STAGES:
        raise CheckpointError(f"stage must be one of {STAGES}, got {stage!r}")
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "task_id": int(task_id),
        "stage": stage,
        "entries": [
            {"name": n, "shape": list(a.shape), "values": [float(x) for x in a.reshape(-1)]}
            for n, a in pv
        ],
    }


def parse_checkpoint(doc: dict) -> tuple[ParameterVector, int, str]:
    try:
        if doc["format_version"] != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(f"unsupported format_version {doc['format_version']!r}")
        stage = doc["stage"]
        if stage not in STAGES:
            raise CheckpointError(f"unknown stage {stage!r}")
        entries = []
        for i, e in enumerate(doc["entries"]):
            shape = tuple(int(s) for s in e["shape"])
            values = np.asarray(e["values"], dtype=np.float64)
            if values.size != math.prod(shape):
                raise CheckpointError(f"entry {i} ({e['name']!r}): {values.size} values for shape {shape}")
            entries.append((str(e["name"]), values.reshape(shape)))
        return ParameterVector(entries), int(doc["task_id"]), stage
    except KeyError as e:
        raise CheckpointError(f"checkpoint missing field {e.args[0]!r}") from None


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, pv: ParameterVector, task_id: int, stage: str) -> None:
    atomic_write_text(path, json.dumps(checkpoint_dict(pv, task_id, stage)))


def load_checkpoint(path) -> tuple[ParameterVector, int, str]:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    return parse_checkpoint(doc)

"""Prompt generation and prompt-injected attention.

Shapes follow the detector convention: features are rows, so a set of
``n`` query slots with model width ``C`` is an ``n x C`` tensor. Every
attention function also accepts one leading batch axis (``B x n x C``),
with a prompt per batch element.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


class ConfigurationError(ValueError):
    pass


class EmptyProposalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# positional embeddings


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    """Fixed sine/cosine embeddings of positions ``0..n-1``, shape ``n x dim``."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    freq = 1.0 / (10000.0 ** (2.0 * i / dim))
    out = np.zeros((n, dim))
    out[:, 0:2 * (dim // 2):2] = np.sin(pos * freq)
    out[:, 1:2 * (dim // 2):2] = np.cos(pos * freq)
    return out


# ---------------------------------------------------------------------------
# attention weights


@dataclass
class AttentionWeights:
    """Per-head projections.

    ``U``, ``V`` and ``Wp`` (the value projection W') are ``M x C_v x C``;
    ``W`` (the output projection) is ``M x C x C_v``.
    """

    U: Tensor
    V: Tensor
    Wp: Tensor
    W: Tensor

    def __post_init__(self):
        M, Cv, C = self.U.shape
        if Cv * M != C:
            raise ConfigurationError(f"model dim {C} is not heads {M} x head dim {Cv}")
        for name in ("V", "Wp"):
            if getattr(self, name).shape != (M, Cv, C):
                raise ConfigurationError(f"{name} has shape {getattr(self, name).shape}, expected {(M, Cv, C)}")
        if self.W.shape != (M, C, Cv):
            raise ConfigurationError(f"W has shape {self.W.shape}, expected {(M, C, Cv)}")

    @property
    def M(self) -> int:
        return self.U.shape[0]

    @property
    def C(self) -> int:
        return self.U.shape[2]

    @property
    def C_v(self) -> int:
        return self.U.shape[1]

    @classmethod
    def random(cls, C: int, M: int, rng: np.random.Generator, gain: float = 1.0,
               requires_grad: bool = False) -> "AttentionWeights":
        if C % M:
            raise ConfigurationError(f"model dim {C} not divisible by head count {M}")
        Cv = C // M
        def w(*shape, fan_in):
            return Tensor(rng.normal(0.0, gain / math.sqrt(fan_in), size=shape), requires_grad)
        return cls(U=w(M, Cv, C, fan_in=C), V=w(M, Cv, C, fan_in=C),
                   Wp=w(M, Cv, C, fan_in=C), W=w(M, C, Cv, fan_in=C))

    def tensors(self) -> list[Tensor]:
        return [self.U, self.V, self.Wp, self.W]


def _split_heads(x: Tensor, proj: Tensor) -> Tensor:
    """(..., n, C) x (M, C_v, C) -> (..., M, n, C_v)."""
    M, Cv, C = proj.shape
    lead = x.shape[:-1]
    flat = x.reshape(-1, C) @ proj.reshape(M * Cv, C).T
    h = flat.reshape(*lead, M, Cv)
    nd = h.ndim
    # (..., n, M, Cv) -> (..., M, n, Cv)
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return h.transpose(axes)


def _prompt_heads(p: Tensor, M: int) -> Tensor:
    """Pre-projected prompt rows (..., L, C) -> (..., M, L, C_v)."""
    lead, L, C = p.shape[:-2], p.shape[-2], p.shape[-1]
    h = p.reshape(*lead, L, M, C // M)
    nd = h.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return h.transpose(axes)


def _merge_heads(out: Tensor, W: Tensor) -> Tensor:
    """(..., M, n, C_v) -> sum_m W_m out_m, shape (..., n, C)."""
    M, C, Cv = W.shape
    nd = out.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    h = out.transpose(axes)  # (..., n, M, Cv)
    lead = h.shape[:-2]
    W_all = W.transpose((1, 0, 2)).reshape(C, M * Cv)
    y = h.reshape(-1, M * Cv) @ W_all.T
    return y.reshape(*lead, C)


def _attend(Q: Tensor, K: Tensor, Vals: Tensor, Cv: int, mask: np.ndarray | None = None):
    KT_axes = list(range(K.ndim - 2)) + [K.ndim - 1, K.ndim - 2]
    logits = (Q @ K.transpose(KT_axes)) / math.sqrt(Cv)
    if mask is not None:
        logits = logits + Tensor(np.broadcast_to(mask, logits.shape))
    A = T.softmax(logits, axis=-1)
    return A @ Vals, A, logits


def multi_head_attention(weights: AttentionWeights, z_q: Tensor, x: Tensor,
                         pos_q: np.ndarray | None = None, pos_k: np.ndarray | None = None) -> Tensor:
    """Standard multi-head attention of queries ``z_q`` over keys/values ``x``."""
    C = weights.C
    if z_q.shape[-1] != C or x.shape[-1] != C:
        raise DimensionError(f"feature dims {z_q.shape[-1]}, {x.shape[-1]} do not match model dim {C}")
    if z_q.shape[:-2] != x.shape[:-2]:
        raise DimensionError(f"batch dims differ: {z_q.shape} vs {x.shape}")
    zq_in = z_q if pos_q is None else z_q + Tensor(np.broadcast_to(pos_q, z_q.shape))
    x_in = x if pos_k is None else x + Tensor(np.broadcast_to(pos_k, x.shape))
    Q = _split_heads(zq_in, weights.U)
    K = _split_heads(x_in, weights.V)
    Vals = _split_heads(x, weights.Wp)
    out, _, _ = _attend(Q, K, Vals, weights.C_v)
    return _merge_heads(out, weights.W)


# ---------------------------------------------------------------------------
# prompts


@dataclass
class Prompt:
    """Generated prompt rows split into key-side and value-side halves."""

    p: Tensor

    def __post_init__(self):
        L = self.p.shape[-2]
        if L % 2:
            raise ConfigurationError(f"prompt length must be even, got {L}")

    @property
    def length(self) -> int:
        return self.p.shape[-2]

    @property
    def p_k(self) -> Tensor:
        return T.slice_axis(self.p, 0, self.length // 2, axis=-2)

    @property
    def p_v(self) -> Tensor:
        return T.slice_axis(self.p, self.length // 2, self.length, axis=-2)


@dataclass
class PromptGenerator:
    """Two-layer MLP bottleneck mapping a pooled query to ``L_p`` prompt rows."""

    W1: Tensor  # D x d
    W2: Tensor  # d x (D * L_p)
    prompt_length: int

    def __post_init__(self):
        if self.prompt_length % 2:
            raise ConfigurationError(f"prompt length must be even, got {self.prompt_length}")
        D, d = self.W1.shape
        if self.W2.shape != (d, D * self.prompt_length):
            raise ConfigurationError(f"W2 shape {self.W2.shape} != {(d, D * self.prompt_length)}")

    @property
    def D(self) -> int:
        return self.W1.shape[0]

    @property
    def d(self) -> int:
        return self.W1.shape[1]

    @classmethod
    def random(cls, D: int, d: int, prompt_length: int, rng: np.random.Generator,
               up_scale: float = 0.1, requires_grad: bool = True) -> "PromptGenerator":
        W1 = rng.normal(0.0, 1.0 / math.sqrt(D), size=(D, d))
        W2 = rng.normal(0.0, up_scale / math.sqrt(d), size=(d, D * prompt_length))
        return cls(Tensor(W1, requires_grad), Tensor(W2, requires_grad), prompt_length)

    def tensors(self) -> list[Tensor]:
        return [self.W1, self.W2]

    def param_count(self) -> int:
        return self.W1.size + self.W2.size


def query_function(proposals: Tensor) -> Tensor:
    """Average the ``N`` proposals: ``N x D -> 1 x D`` (or ``B x N x D -> B x D``)."""
    N = proposals.shape[-2]
    if N == 0:
        raise EmptyProposalError("query function needs at least one proposal")
    if proposals.ndim == 2:
        return T.mean(proposals, axis=0).reshape(1, proposals.shape[-1])
    return T.mean(proposals, axis=-2)


def generate_prompt(gen: PromptGenerator, query: Tensor) -> Prompt:
    """``ReLU(query @ W1) @ W2`` reshaped row-major to ``L_p x D``.

    ``query`` is ``1 x D`` (one prompt) or ``B x D`` (a batch of prompts).
    """
    if query.ndim != 2 or query.shape[-1] != gen.D:
        raise DimensionError(f"query shape {query.shape} incompatible with generator dim D={gen.D}")
    hidden = T.relu(query @ gen.W1)
    flat = hidden @ gen.W2
    B = query.shape[0]
    if B == 1 and query.ndim == 2:
        p = flat.reshape(gen.prompt_length, gen.D)
    else:
        p = flat.reshape(B, gen.prompt_length, gen.D)
    return Prompt(p)


def generate_prompts(gen: PromptGenerator, queries: Tensor) -> Prompt:
    """Batched variant that always keeps the batch axis (``B x L_p x D``)."""
    hidden = T.relu(queries @ gen.W1)
    return Prompt((hidden @ gen.W2).reshape(queries.shape[0], gen.prompt_length, gen.D))


@dataclass
class AttentionTrace:
    queries: Tensor
    keys: Tensor
    values: Tensor
    logits: Tensor
    weights: Tensor


def prompted_attention(weights: AttentionWeights, q_o: Tensor, prompt: Prompt, *,
                       project_prompt_keys: bool = False, mask_prompt: bool = False,
                       pos_q: np.ndarray | None = None, return_trace: bool = False):
    """Self-attention over object queries with prompt rows appended to keys and values.

    Queries are projected from ``q_o`` alone. Keys are ``[V q_o : p_k]`` and
    values ``[W' q_o : p_v]``; by default the prompt halves are taken as
    already projected (split per head), with ``project_prompt_keys`` they
    go through ``V`` / ``W'`` like the object queries. ``mask_prompt`` sets
    the prompt-key logits to -inf.
    """
    C, M = weights.C, weights.M
    p = prompt.p
    if p.shape[-1] != C:
        raise DimensionError(f"prompt row dim {p.shape[-1]} != model dim {C}")
    if p.shape[:-2] != q_o.shape[:-2]:
        raise DimensionError(f"prompt batch dims {p.shape[:-2]} do not match queries {q_o.shape[:-2]}")
    qk_in = q_o if pos_q is None else q_o + Tensor(np.broadcast_to(pos_q, q_o.shape))
    Q = _split_heads(qk_in, weights.U)
    K_obj = _split_heads(qk_in, weights.V)
    V_obj = _split_heads(q_o, weights.Wp)
    if project_prompt_keys:
        K_p = _split_heads(prompt.p_k, weights.V)
        V_p = _split_heads(prompt.p_v, weights.Wp)
    else:
        K_p = _prompt_heads(prompt.p_k, M)
        V_p = _prompt_heads(prompt.p_v, M)
    K = T.concat(K_obj, K_p, axis=-2)
    Vals = T.concat(V_obj, V_p, axis=-2)
    mask = None
    if mask_prompt:
        n_obj, n_p = K_obj.shape[-2], K_p.shape[-2]
        mask = np.concatenate([np.zeros(n_obj), np.full(n_p, -np.inf)])
    out, A, logits = _attend(Q, K, Vals, weights.C_v, mask)
    y = _merge_heads(out, weights.W)
    if return_trace:
        return y, AttentionTrace(Q, K, Vals, logits, A)
    return y


# ---------------------------------------------------------------------------
# deformable attention


def bilinear_sample(feature_map: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample a ``C x H x W`` map at pixel coordinates, clamped to the border.

    Returns an array of shape ``x.shape + (C,)``.
    """
    C, H, W = feature_map.shape
    x = np.clip(x, 0.0, W - 1.0)
    y = np.clip(y, 0.0, H - 1.0)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (x - x0)[..., None]
    wy = (y - y0)[..., None]
    fm = np.moveaxis(feature_map, 0, -1)  # H x W x C
    top = (1 - wx) * fm[y0, x0] + wx * fm[y0, x1]
    bot = (1 - wx) * fm[y1, x0] + wx * fm[y1, x1]
    return (1 - wy) * top + wy * bot


def deformable_sampling(z_q: np.ndarray, offset_proj: np.ndarray, attn_proj: np.ndarray,
                        M: int, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Linear projections of the query features to sampling offsets and weights.

    ``offset_proj`` is ``C x (M*K*2)``, ``attn_proj`` is ``C x (M*K)``.
    Returns offsets ``n_q x M x K x 2`` and weights ``n_q x M x K`` (softmax over K).
    """
    n_q = z_q.shape[0]
    offsets = (z_q @ offset_proj).reshape(n_q, M, K, 2)
    logits = (z_q @ attn_proj).reshape(n_q, M, K)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return offsets, e / e.sum(axis=-1, keepdims=True)


def deformable_attention(z_q, ref_points, feature_map, offsets, attn_weights,
                         weights: AttentionWeights, K: int) -> np.ndarray:
    """Single-scale deformable attention.

    For each head m and query q, ``K`` points ``ref_points[q] + offsets[q, m, k]``
    (pixel ``(x, y)``) are bilinearly sampled from ``feature_map`` (``C x H x W``),
    projected by ``W'_m``, weighted by ``attn_weights[q, m, k]``, summed, and
    projected back by ``W_m``; heads are summed.
    """
    z_q = np.asarray(getattr(z_q, "data", z_q), dtype=np.float64)
    fm = np.asarray(getattr(feature_map, "data", feature_map), dtype=np.float64)
    ref = np.asarray(ref_points, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    A = np.asarray(attn_weights, dtype=np.float64)
    M, Cv, C = weights.Wp.shape
    n_q = z_q.shape[0]
    if K < 1:
        raise ValueError("K must be at least 1")
    if fm.shape[0] != C or z_q.shape[1] != C:
        raise DimensionError(f"feature dim mismatch: map {fm.shape}, queries {z_q.shape}, model dim {C}")
    if offsets.shape != (n_q, M, K, 2) or A.shape != (n_q, M, K) or ref.shape != (n_q, 2):
        raise DimensionError(
            f"expected ref {(n_q, 2)}, offsets {(n_q, M, K, 2)}, weights {(n_q, M, K)}; "
            f"got {ref.shape}, {offsets.shape}, {A.shape}")
    loc = ref[:, None, None, :] + offsets
    samples = bilinear_sample(fm, loc[..., 0], loc[..., 1])  # n_q x M x K x C
    pooled = np.einsum("qmk,qmkc->qmc", A, samples)
    per_head = np.einsum("mvc,qmc->qmv", weights.Wp.data, pooled)
    return np.einsum("mcv,qmv->qc", weights.W.data, per_head)


# ---------------------------------------------------------------------------
# decoder


@dataclass
class DecoderLayer:
    """Prompted self-attention followed by a two-layer feed-forward block, both residual."""

    attn: AttentionWeights
    ffn_in: Tensor  # C x F
    ffn_out: Tensor  # F x C

    def __call__(self, q: Tensor, prompt: Prompt | None, **attn_kw) -> Tensor:
        if prompt is None:
            a = multi_head_attention(self.attn, q, q)
        else:
            a = prompted_attention(self.attn, q, prompt, **attn_kw)
        h = q + a
        C = h.shape[-1]
        f = T.relu(h.reshape(-1, C) @ self.ffn_in) @ self.ffn_out
        return h + f.reshape(h.shape)

    def tensors(self) -> list[Tensor]:
        return self.attn.tensors() + [self.ffn_in, self.ffn_out]


@dataclass
class DecoderStack:
    layers: list[DecoderLayer]
    generators: list[PromptGenerator] = field(default_factory=list)
    project_prompt_keys: bool = False

    def __post_init__(self):
        if self.generators and len(self.generators) != len(self.layers):
            raise ConfigurationError(
                f"{len(self.generators)} prompt generators for {len(self.layers)} decoder layers")

    def prompts(self, query: Tensor) -> list[Prompt]:
        """One prompt per layer from the pooled query (``B x D``)."""
        return [generate_prompts(g, query) for g in self.generators]

    def __call__(self, q_o: Tensor, query: Tensor | None = None, use_prompts: bool = True,
                 prompts: Sequence[Prompt] | None = None) -> Tensor:
        """Run the stack on ``B x n x C`` object queries.

        ``query`` (``B x D``) feeds the prompt generators; pass ``prompts``
        to inject precomputed prompts instead.
        """
        if use_prompts and self.generators and prompts is None:
            if query is None:
                raise ValueError("prompted decoder needs a pooled query")
            prompts = self.prompts(query)
        h = q_o
        for j, layer in enumerate(self.layers):
            pr = prompts[j] if (use_prompts and prompts is not None) else None
            h = layer(h, pr, project_prompt_keys=self.project_prompt_keys) if pr is not None else layer(h, None)
        return h

    def prompt_tensors(self) -> list[Tensor]:
        return [t for g in self.generators for t in g.tensors()]


def build_decoder_stack(layer_count: int, C: int, M: int, generators: Sequence[PromptGenerator],
                        rng: np.random.Generator, ffn_dim: int | None = None,
                        attn_gain: float = 1.0, ffn_gain: float = 0.5,
                        project_prompt_keys: bool = False) -> DecoderStack:
    """Frozen random decoder with one independent prompt generator per layer."""
    if len(generators) != layer_count:
        raise ConfigurationError(f"expected {layer_count} prompt generators, got {len(generators)}")
    F = ffn_dim or 2 * C
    layers = []
    for _ in range(layer_count):
        attn = AttentionWeights.random(C, M, rng, gain=attn_gain)
        f1 = Tensor(rng.normal(0, 1 / math.sqrt(C), size=(C, F)))
        f2 = Tensor(rng.normal(0, ffn_gain / math.sqrt(F), size=(F, C)))
        layers.append(DecoderLayer(attn, f1, f2))
    return DecoderStack(layers, list(generators), project_prompt_keys)

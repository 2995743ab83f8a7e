"""Attention variants used by the generator, reference network and discriminator.

All variants are single-head. Inputs may be unbatched ``[tokens, width]`` or
batched ``[batch, tokens, width]``; the batch axis is never broadcast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import Linear, Module
from .tensor import ContractError, ShapeError, Tensor

DEFAULT_IDENTITY_SCALE = 1.6
DEFAULT_MASK_THRESHOLD = 0.6


class AttentionParams(Module):
    """Projections of one attention layer: queries from the hidden state,
    keys/values from the conditioning (the hidden state itself for self-attention)."""

    def __init__(self, rng: np.random.Generator, hidden: int, d: int, cond: int | None = None,
                 rank: int = 0, alpha: float | None = None, out_std: float | None = None):
        cond = hidden if cond is None else cond
        self.Wq = Linear(rng, hidden, d, rank=rank, alpha=alpha)
        self.Wk = Linear(rng, cond, d, rank=rank, alpha=alpha)
        self.Wv = Linear(rng, cond, d, rank=rank, alpha=alpha)
        self.Wout = Linear(rng, d, hidden, rank=rank, alpha=alpha, std=out_std)
        self.d = d


class DecoupledAdapterParams(Module):
    """Image-branch key/value projections plus the identity scale."""

    def __init__(self, rng: np.random.Generator, image_width: int, d: int, s_x: float = 1.0,
                 init_from: AttentionParams | None = None):
        if s_x < 0:
            raise ContractError(f"identity scale must be non-negative, got {s_x}")
        wk = wv = None
        if init_from is not None and init_from.Wk.d_in == image_width:
            # warm start from the text projections, as image-prompt adapters usually do
            wk, wv = init_from.Wk.W.data.copy(), init_from.Wv.W.data.copy()
        self.Wkx = Linear(rng, image_width, d, weight=wk, trainable=True)
        self.Wvx = Linear(rng, image_width, d, weight=wv, trainable=True)
        self._s_x = float(s_x)

    @property
    def s_x(self) -> float:
        return self._s_x


@dataclass
class ReferenceKV:
    """Keys/values harvested from each self-attention layer of the reference network."""

    keys: list[Tensor] = field(default_factory=list)
    values: list[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.keys)

    def layer(self, l: int) -> tuple[Tensor, Tensor]:
        return self.keys[l], self.values[l]

    @property
    def n_ref(self) -> int:
        return 0 if not self.keys else self.keys[0].shape[-2]

    @classmethod
    def empty(cls) -> "ReferenceKV":
        return cls()


@dataclass
class LayerMask:
    """Binary subject mask for one layer, ``M[batch, H, W]`` with entries in {0, 1}."""

    M: np.ndarray
    tau: float = DEFAULT_MASK_THRESHOLD

    @property
    def grid(self) -> tuple[int, int]:
        return self.M.shape[-2], self.M.shape[-1]

    def tokens(self) -> np.ndarray:
        """Flatten to ``[batch, H*W]`` in row-major token order."""
        return self.M.reshape(self.M.shape[0], -1)


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return T.transpose(x, axes)


def attend(q: Tensor, k: Tensor, v: Tensor, return_probs: bool = False):
    """``softmax(q k^T / sqrt(d)) v``."""
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError(f"attend: widths differ, Q {q.shape}, K {k.shape}, V {v.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attend: K {k.shape} and V {v.shape} have different token counts")
    if k.shape[-2] < 1:
        raise ContractError("attend: need at least one key")
    scores = T.matmul(q, _swap_last(k)) * (1.0 / math.sqrt(d))
    probs = T.softmax(scores, axis=-1)
    out = T.matmul(probs, v)
    return (out, probs) if return_probs else out


def project_qkv(h: Tensor, p: AttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    return p.Wq(h), p.Wk(h), p.Wv(h)


def self_attention(h: Tensor, p: AttentionParams) -> Tensor:
    q, k, v = project_qkv(h, p)
    return p.Wout(attend(q, k, v))


def inject_self_attention(h: Tensor, p: AttentionParams, ref_k: Tensor | None, ref_v: Tensor | None,
                          return_kv: bool = False):
    """Self-attention over the augmented triplet ``(Q, K ⊕ K_ref, V ⊕ V_ref)``.

    Concatenation is along the token axis. With no reference tokens this is
    exactly :func:`self_attention`.
    """
    q, k, v = project_qkv(h, p)
    if ref_k is not None and ref_k.shape[-2] > 0:
        if ref_k.shape[-1] != p.d or ref_v.shape[-1] != p.d:
            raise ShapeError(f"reference KV width {ref_k.shape[-1]} does not match layer width {p.d}")
        if ref_k.ndim != k.ndim or ref_k.shape[:-2] != k.shape[:-2]:
            raise ShapeError(f"reference KV batch shape {ref_k.shape} vs layer {k.shape}")
        k_all = T.concat([k, ref_k], axis=-2)
        v_all = T.concat([v, ref_v], axis=-2)
    else:
        k_all, v_all = k, v
    out = p.Wout(attend(q, k_all, v_all))
    return (out, k, v) if return_kv else out


def cross_attention(h: Tensor, c_y: Tensor, p: AttentionParams) -> Tensor:
    """Plain text cross-attention."""
    return p.Wout(attend(p.Wq(h), p.Wk(c_y), p.Wv(c_y)))


def _mask_tokens(mask, like: Tensor) -> Tensor:
    m = mask.tokens() if isinstance(mask, LayerMask) else np.asarray(mask)
    if like.ndim == 2:
        m = m.reshape(-1)
        if m.shape[0] != like.shape[0]:
            raise ShapeError(f"mask has {m.shape[0]} tokens, layer has {like.shape[0]}")
        arr = m[:, None]
    else:
        m = m.reshape(like.shape[0], -1)
        if m.shape[1] != like.shape[1]:
            raise ShapeError(f"mask has {m.shape[1]} tokens, layer has {like.shape[1]}")
        arr = m[:, :, None]
    return T.expand(Tensor(arr.astype(like.dtype)), like.shape)


def decoupled_cross_attention(h: Tensor, c_y: Tensor, c_x: Tensor | None, p: AttentionParams,
                              a: DecoupledAdapterParams | None, s_x: float | None = None,
                              mask=None, return_probs: bool = False):
    """``Attn(Q, K_y, V_y) + s_x * [M ⊙] Attn(Q, K_x, V_x)`` followed by the output projection.

    ``mask`` (a :class:`LayerMask` or ``[batch, tokens]`` array) gates the
    image term per spatial token. ``c_x=None`` or ``a=None`` drops the image
    branch entirely. With ``return_probs`` the text-branch attention
    probabilities are returned as well (used for subject-mask extraction).
    """
    if c_y is None or c_y.shape[-2] == 0:
        raise ContractError("decoupled cross-attention needs at least one text token")
    q = p.Wq(h)
    text, probs = attend(q, p.Wk(c_y), p.Wv(c_y), return_probs=True)
    mixed = text
    if c_x is not None and a is not None:
        scale = a.s_x if s_x is None else float(s_x)
        if scale < 0:
            raise ContractError(f"identity scale must be non-negative, got {scale}")
        img = attend(q, a.Wkx(c_x), a.Wvx(c_x))
        if mask is not None:
            img = img * _mask_tokens(mask, img)
        mixed = text + img * scale
    out = p.Wout(mixed)
    return (out, probs) if return_probs else out


def masked_decoupled_cross_attention(h: Tensor, c_y: Tensor, c_x: Tensor, p: AttentionParams,
                                     a: DecoupledAdapterParams, mask: LayerMask,
                                     s_x: float | None = None) -> Tensor:
    return decoupled_cross_attention(h, c_y, c_x, p, a, s_x=s_x, mask=mask)


def normalize_minmax(m: np.ndarray) -> np.ndarray | None:
    """Scale to [0, 1]; None when the map is constant."""
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        return None
    return (m - lo) / (hi - lo)


def binarize_map(raw: np.ndarray, tau: float = DEFAULT_MASK_THRESHOLD) -> np.ndarray:
    """Min-max normalize a single ``[H, W]`` map and threshold at ``tau``.

    A constant map yields an all-ones mask so identity guidance is kept.
    """
    norm = normalize_minmax(raw)
    if norm is None:
        return np.ones_like(raw, dtype=np.float32)
    return (norm >= tau).astype(np.float32)


def resize_mask(m: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    ri = T.nearest_indices(m.shape[-2], size[0])
    ci = T.nearest_indices(m.shape[-1], size[1])
    return m[..., ri, :][..., ci]


def extract_subject_mask(attn_maps, subject_token: int, tau: float = DEFAULT_MASK_THRESHOLD,
                         target_grids=None) -> list[LayerMask]:
    """Binary subject masks from text cross-attention probabilities.

    ``attn_maps`` is a list of ``(probs, (H, W))`` pairs, one per layer, where
    ``probs`` is ``[batch, H*W, n_text]`` or ``[batch, heads, H*W, n_text]``.
    The subject-token column is averaged over heads and over every layer at
    the finest available resolution, normalized per sample, thresholded, and
    resized to each grid in ``target_grids`` (default: the source grids).
    """
    if not attn_maps:
        raise ContractError("extract_subject_mask needs at least one attention map")
    prepared = []
    for probs, grid in attn_maps:
        arr = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim == 3:
            arr = arr[:, None]
        n_text = arr.shape[-1]
        if not 0 <= subject_token < n_text:
            raise ContractError(f"subject token {subject_token} out of range for {n_text} text tokens")
        h, w = grid
        if arr.shape[-2] != h * w:
            raise ShapeError(f"attention map has {arr.shape[-2]} queries, grid {grid} needs {h * w}")
        col = arr[..., subject_token].astype(np.float64).mean(axis=1)  # heads
        prepared.append((col.reshape(arr.shape[0], h, w), (h, w)))
    finest = max(g[0] * g[1] for _, g in prepared)
    sel = [m for m, g in prepared if g[0] * g[1] == finest]
    agg = np.mean(sel, axis=0)
    binary = np.stack([binarize_map(agg[b], tau) for b in range(agg.shape[0])])
    grids = target_grids if target_grids is not None else [g for _, g in prepared]
    return [LayerMask(resize_mask(binary, tuple(g)).astype(np.float32), tau) for g in grids]

"""Inference with mask-guided rescaling, and the desk-scale evaluation proxies."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import DEFAULT_IDENTITY_SCALE, DEFAULT_MASK_THRESHOLD
from .losses import FeaturePyramid
from .networks import DualBranchModel, delatentize
from .synthdata import BACKGROUNDS, Context, SceneSample, render
from .tensor import ContractError

# ctx_proxy: a background matches when its mean colour is within 15% of the RGB cube diagonal
CTX_TOLERANCE = 0.15 * math.sqrt(3.0)
# heldout target context: same placement, background shifted by half the palette
BACKGROUND_SHIFT = len(BACKGROUNDS) // 2
CHUNK = 16


def noise_for_seed(seed: int, shape) -> tuple[np.ndarray, np.ndarray]:
    """Generator noise and reference-perturbation noise for one seed."""
    eps = np.random.default_rng([seed, 0]).standard_normal(shape).astype(np.float32)
    eps_ref = np.random.default_rng([seed, 1]).standard_normal(shape).astype(np.float32)
    return eps, eps_ref


def uses_reference(mode: str) -> bool:
    return mode in ("full", "single-refkv")


def uses_adapter(mode: str) -> bool:
    return mode != "single-refkv"


def generate_batch(model: DualBranchModel, ref_images, ref_masks, codes, seeds, mode: str = "full",
                   s_x: float = DEFAULT_IDENTITY_SCALE, tau: float = DEFAULT_MASK_THRESHOLD,
                   mask_enabled: bool = True, mask_source: str = "same-pass") -> np.ndarray:
    """Images ``[N, 3, H, W]`` for ``N`` (reference, mask, context codes, seed) tuples."""
    ref_images = np.asarray(ref_images, dtype=np.float32)
    ref_masks = np.asarray(ref_masks, dtype=np.float32)
    codes = np.asarray(codes, dtype=np.int64).reshape(-1, 2)
    seeds = list(seeds)
    n = len(seeds)
    if not (len(ref_images) == len(ref_masks) == len(codes) == n):
        raise ContractError("generate: references, masks, codes and seeds must have equal length")
    arch = model.arch
    lshape = (arch.latent_channels, arch.latent_size, arch.latent_size)
    out = []
    with T.no_grad():
        for lo in range(0, n, CHUNK):
            sl = slice(lo, min(n, lo + CHUNK))
            noise = [noise_for_seed(s, lshape) for s in seeds[sl]]
            eps = np.stack([e for e, _ in noise])
            eps_ref = np.stack([r for _, r in noise])
            x = ref_images[sl]
            ref = model.reference_kv(x * ref_masks[sl][:, None], eps_ref) if uses_reference(mode) else None
            c_x = model.encode_image_tokens(x) if uses_adapter(mode) else None
            c_y = model.embed_context(codes[sl])
            masks = mask_source if mask_enabled else None
            z = model.generator_forward(T.Tensor(eps), c_y, c_x, ref, mode=mode, s_x=s_x, masks=masks, mask_tau=tau)
            out.append(delatentize(z).data)
    return np.concatenate(out, axis=0)


def generate(model: DualBranchModel, ref_image: np.ndarray, context_codes, seed: int,
             ref_mask: np.ndarray | None = None, **kw) -> np.ndarray:
    """One image ``[3, H, W]``; without a foreground mask the whole reference is used."""
    if ref_mask is None:
        ref_mask = np.ones(ref_image.shape[1:], np.float32)
    return generate_batch(model, ref_image[None], ref_mask[None], [context_codes], [seed], **kw)[0]


# -- proxies ---------------------------------------------------------------------------------

class SubjectEmbedder:
    """Per-stage pyramid features of a masked image, offset so an all-black input embeds to zero."""

    def __init__(self, pyramid: FeaturePyramid | None = None):
        self.pyramid = pyramid or FeaturePyramid()
        self._zero: list[np.ndarray] | None = None

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        with T.no_grad():
            feats = [f.data for f in self.pyramid(T.Tensor(images))]
            if self._zero is None:
                self._zero = [f.data[:1] for f in self.pyramid(T.Tensor(np.zeros_like(images[:1])))]
        parts = []
        for f, z in zip(feats, self._zero):
            v = (f - z).reshape(len(images), -1).astype(np.float64)
            norm = np.linalg.norm(v, axis=1, keepdims=True)
            parts.append(v / np.maximum(norm, 1e-12))
        return np.concatenate(parts, axis=1) / math.sqrt(len(parts))


def id_similarity(embedder: SubjectEmbedder, generated, gen_masks, references, ref_masks) -> np.ndarray:
    """Cosine similarity of subject-region embeddings, one value per pair."""
    g = embedder(np.asarray(generated) * np.asarray(gen_masks)[:, None])
    r = embedder(np.asarray(references) * np.asarray(ref_masks)[:, None])
    return np.sum(g * r, axis=1) / np.maximum(np.linalg.norm(g, axis=1) * np.linalg.norm(r, axis=1), 1e-12)


def background_match(images, masks, background_codes) -> np.ndarray:
    """1 where the mean background colour is within :data:`CTX_TOLERANCE` of the coded colour."""
    images = np.asarray(images, dtype=np.float64)
    keep = 1.0 - np.asarray(masks, dtype=np.float64)
    out = []
    for img, k, bg in zip(images, keep, background_codes):
        area = k.sum()
        if area == 0:
            out.append(0.0)
            continue
        mean = (img * k[None]).reshape(3, -1).sum(axis=1) / area
        out.append(float(np.linalg.norm(mean - BACKGROUNDS[bg]) <= CTX_TOLERANCE))
    return np.asarray(out)


def target_scene(s: SceneSample) -> tuple[Context, np.ndarray]:
    """Heldout target: same placement and jitter, a different background."""
    ctx = Context((s.context.background + BACKGROUND_SHIFT) % len(BACKGROUNDS), s.context.position)
    _, mask = render(s.identity, ctx, s.jitter)
    return ctx, mask


@dataclass
class EvalResult:
    id_proxy: float
    ctx_proxy: float
    per_sample_id: np.ndarray
    per_sample_ctx: np.ndarray


def evaluate(model: DualBranchModel, heldout: list[SceneSample], mode: str = "full",
             s_x: float = DEFAULT_IDENTITY_SCALE, tau: float = DEFAULT_MASK_THRESHOLD, mask_enabled: bool = True,
             mask_source: str = "same-pass", embedder: SubjectEmbedder | None = None,
             seed_offset: int = 0) -> EvalResult:
    if not heldout:
        raise ContractError("evaluate: heldout set is empty")
    embedder = embedder or SubjectEmbedder()
    targets = [target_scene(s) for s in heldout]
    refs = np.stack([s.image for s in heldout])
    ref_masks = np.stack([s.mask for s in heldout])
    codes = np.array([c.codes for c, _ in targets])
    gen = generate_batch(model, refs, ref_masks, codes, [seed_offset + s.index for s in heldout], mode=mode,
                         s_x=s_x, tau=tau, mask_enabled=mask_enabled, mask_source=mask_source)
    tmasks = np.stack([m for _, m in targets])
    ids = id_similarity(embedder, gen, tmasks, refs, ref_masks)
    ctx = background_match(gen, tmasks, codes[:, 0])
    return EvalResult(float(ids.mean()), float(ctx.mean()), ids, ctx)


def subject_occupancy(images, background_code: int) -> np.ndarray:
    """Soft per-pixel subject indicator: distance from the coded background colour over the cube diagonal."""
    images = np.asarray(images, dtype=np.float64)
    d = np.linalg.norm(images - BACKGROUNDS[background_code][None, :, None, None], axis=1)
    return np.clip(d / math.sqrt(3.0), 0.0, 1.0)


def placement_variance(model: DualBranchModel, reference: SceneSample, context: Context, seeds,
                       mode: str = "full", **kw) -> float:
    """Mean over pixels of the across-seed variance of subject occupancy."""
    seeds = list(seeds)
    n = len(seeds)
    imgs = generate_batch(model, np.repeat(reference.image[None], n, 0), np.repeat(reference.mask[None], n, 0),
                          [context.codes] * n, seeds, mode=mode, **kw)
    occ = subject_occupancy(imgs, context.background)
    return float(occ.var(axis=0).mean())

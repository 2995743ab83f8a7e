"""Toy one-step generator, its frozen reference twin, encoders and the latent discriminator."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .attention import (
    AttentionParams,
    DecoupledAdapterParams,
    LayerMask,
    ReferenceKV,
    decoupled_cross_attention,
    extract_subject_mask,
    inject_self_attention,
)
from .diffusion import NoiseSchedule, forward_perturb_batch
from .layers import Conv2d, Linear, Module, grid_position_embedding, sinusoidal_embedding
from .synthdata import BACKGROUNDS, N_CONTEXT_TOKENS, POSITIONS, SUBJECT_TOKEN_INDEX
from .tensor import ContractError, ShapeError, Tensor

MODES = ("full", "direct-ipa", "finetune-ipa", "single-refkv")
PATCH = 2


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 32
    hidden: int = 64
    d: int = 64
    blocks: int = 4
    n_tok: int = 4
    lora_rank: int = 8
    lora_alpha: float = 8.0
    disc_blocks: int = 2
    mlp_ratio: int = 2
    seed: int = 0

    @property
    def latent_channels(self) -> int:
        return 3 * PATCH * PATCH

    @property
    def latent_size(self) -> int:
        return self.image_size // PATCH

    @property
    def grid(self) -> tuple[int, int]:
        return self.latent_size // 2, self.latent_size // 2

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=np.float32)

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "ArchConfig":
        kw = {}
        for f, x in zip(fields(cls), v):
            kw[f.name] = float(x) if f.type in ("float", float) else int(round(float(x)))
        return cls(**kw)


# -- latentizer ---------------------------------------------------------------------------

def latentize(x) -> Tensor:
    """2x2 space-to-depth: ``[B, 3, H, W] -> [B, 12, H/2, W/2]`` (exactly invertible)."""
    x = T.as_tensor(x)
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    b, c, h, w = x.shape
    if h % PATCH or w % PATCH:
        raise ShapeError(f"latentize: image size {h}x{w} not divisible by {PATCH}")
    y = T.reshape(x, (b, c, h // PATCH, PATCH, w // PATCH, PATCH))
    y = T.transpose(y, (0, 1, 3, 5, 2, 4))
    return T.reshape(y, (b, c * PATCH * PATCH, h // PATCH, w // PATCH))


def delatentize(z) -> Tensor:
    z = T.as_tensor(z)
    if z.ndim == 3:
        z = T.reshape(z, (1,) + z.shape)
    b, cz, h, w = z.shape
    if cz % (PATCH * PATCH):
        raise ShapeError(f"delatentize: {cz} channels not divisible by {PATCH * PATCH}")
    c = cz // (PATCH * PATCH)
    y = T.reshape(z, (b, c, PATCH, PATCH, h, w))
    y = T.transpose(y, (0, 1, 4, 2, 5, 3))
    return T.reshape(y, (b, c, h * PATCH, w * PATCH))


# -- transformer pieces -------------------------------------------------------------------

def _ln(x: Tensor) -> Tensor:
    return T.layer_norm(x)


class Block(Module):
    def __init__(self, rng, arch: ArchConfig, lora: bool):
        rank = arch.lora_rank if lora else 0
        w = arch.hidden
        self.selfattn = AttentionParams(rng, w, arch.d, rank=rank, alpha=arch.lora_alpha, out_std=0.5 / math.sqrt(arch.d))
        self.crossattn = AttentionParams(rng, w, arch.d, cond=w, rank=rank, alpha=arch.lora_alpha,
                                  out_std=0.5 / math.sqrt(arch.d))
        self.adapter = DecoupledAdapterParams(rng, w, arch.d, s_x=1.0, init_from=self.crossattn)
        self.mlp1 = Linear(rng, w, w * arch.mlp_ratio, bias=True)
        self.mlp2 = Linear(rng, w * arch.mlp_ratio, w, bias=True, std=0.5 / math.sqrt(w * arch.mlp_ratio))


class ForwardTrace:
    """What one network pass exposes besides its output."""

    def __init__(self):
        self.keys: list[Tensor] = []
        self.values: list[Tensor] = []
        self.text_maps: list[tuple[np.ndarray, tuple[int, int]]] = []
        self.masks: list[LayerMask | None] = []


def _tokens_to_grid(h: Tensor, grid) -> Tensor:
    b, n, c = h.shape
    return T.reshape(T.transpose(h, (0, 2, 1)), (b, c) + tuple(grid))


def _grid_to_tokens(x: Tensor) -> Tensor:
    b, c, gh, gw = x.shape
    return T.transpose(T.reshape(x, (b, c, gh * gw)), (0, 2, 1))


class Generator(Module):
    """Latent-to-latent transformer: stride-2 conv in, B blocks, nearest-up + conv out.

    Each block runs (reference-injected) self-attention, decoupled text/image
    cross-attention and an MLP, all pre-norm with residuals.
    """

    def __init__(self, rng, arch: ArchConfig, lora: bool = True):
        c = arch.latent_channels
        self.conv_in = Conv2d(rng, c, arch.hidden, k=3, stride=2, std=1.0 / math.sqrt(9 * c))
        self.blocks = [Block(rng, arch, lora) for _ in range(arch.blocks)]
        self.conv_out = Conv2d(rng, arch.hidden, c, k=3, stride=1, std=0.25 / math.sqrt(9 * arch.hidden))
        self.conv_out.b.data[:] = 0.5
        self._arch = arch
        self._pos = Tensor(grid_position_embedding(*arch.grid, arch.hidden))

    @property
    def arch(self) -> ArchConfig:
        return self._arch

    def embed(self, z: Tensor) -> Tensor:
        h = _grid_to_tokens(self.conv_in(z))
        b, n, w = h.shape
        return h + T.expand(T.reshape(self._pos, (1, n, w)), h.shape)

    def forward(self, z: Tensor, c_y: Tensor, c_x: Tensor | None = None, ref: ReferenceKV | None = None,
                s_x: float | None = None, masks=None, mask_tau: float = 0.6,
                trace: ForwardTrace | None = None) -> Tensor:
        """One pass. ``masks`` is None, a list of per-layer :class:`LayerMask`, or
        ``"same-pass"`` to derive them on the fly from earlier layers' text maps."""
        if z.ndim != 4 or z.shape[1] != self.arch.latent_channels:
            raise ShapeError(f"generator expects latents [B, {self.arch.latent_channels}, h, w], got {z.shape}")
        if ref is not None and len(ref) and len(ref) != len(self.blocks):
            raise ContractError(f"reference KV has {len(ref)} layers, generator has {len(self.blocks)}")
        trace = trace if trace is not None else ForwardTrace()
        grid = self.arch.grid
        h = self.embed(z)
        for l, blk in enumerate(self.blocks):
            rk, rv = ref.layer(l) if ref is not None and len(ref) else (None, None)
            sa, k, v = inject_self_attention(_ln(h), blk.selfattn, rk, rv, return_kv=True)
            trace.keys.append(k)
            trace.values.append(v)
            h = h + sa
            m = None
            if c_x is not None:
                if masks == "same-pass":
                    if trace.text_maps:
                        m = extract_subject_mask(trace.text_maps, SUBJECT_TOKEN_INDEX, mask_tau, [grid])[0]
                    else:
                        m = LayerMask(np.ones((h.shape[0],) + grid, np.float32), mask_tau)
                elif masks is not None:
                    m = masks[l]
            trace.masks.append(m)
            ca, probs = decoupled_cross_attention(_ln(h), c_y, c_x, blk.crossattn, blk.adapter if c_x is not None else None,
                                                  s_x=s_x, mask=m, return_probs=True)
            trace.text_maps.append((probs.data, grid))
            h = h + ca
            h = h + blk.mlp2(T.gelu(blk.mlp1(_ln(h))))
        up = T.resize_nearest(_tokens_to_grid(_ln(h), grid), (self.arch.latent_size, self.arch.latent_size))
        return self.conv_out(up)


# -- conditioning encoders --------------------------------------------------------------------

class ContextEmbedding(Module):
    """Frozen lookup table: one token per context code plus a subject-slot token.

    Rows are ``[backgrounds..., positions..., subject slot]``; the output
    token order is ``(background, position, subject)`` so the subject slot
    sits at :data:`SUBJECT_TOKEN_INDEX`.
    """

    def __init__(self, rng, width: int):
        n = len(BACKGROUNDS) + len(POSITIONS) + 1
        self.table = Tensor(rng.standard_normal((n, width)).astype(np.float32))
        self._width = width

    def __call__(self, codes) -> Tensor:
        codes = np.asarray(codes, dtype=np.int64)
        if codes.ndim == 1:
            codes = codes[None]
        if codes.shape[-1] != 2:
            raise ContractError(f"expected (background, position) codes, got shape {codes.shape}")
        bg, pos = codes[:, 0], codes[:, 1]
        if (bg < 0).any() or (bg >= len(BACKGROUNDS)).any():
            raise IndexError(f"background code out of range: {bg.tolist()}")
        if (pos < 0).any() or (pos >= len(POSITIONS)).any():
            raise IndexError(f"position code out of range: {pos.tolist()}")
        rows = np.stack([bg, len(BACKGROUNDS) + pos,
                         np.full_like(bg, len(BACKGROUNDS) + len(POSITIONS))], axis=1)
        assert rows.shape[1] == N_CONTEXT_TOKENS
        return Tensor(self.table.data[rows])


class ImageEncoder(Module):
    """Frozen seeded conv pyramid, then a trainable projection to ``n_tok`` tokens."""

    def __init__(self, rng, arch: ArchConfig, channels=(3, 16, 32, 64)):
        self.pyramid = [Conv2d(rng, channels[i], channels[i + 1], k=3, stride=2,
                               std=math.sqrt(2.0 / (9 * channels[i]))) for i in range(len(channels) - 1)]
        side = arch.image_size // 2 ** (len(channels) - 1)
        feat = channels[-1] * side * side
        self.proj = Linear(rng, feat, arch.n_tok * arch.hidden, bias=True, std=1.0 / math.sqrt(feat),
                           trainable=True)
        self._n_tok, self._width = arch.n_tok, arch.hidden

    def features(self, x: Tensor) -> Tensor:
        h = x
        for conv in self.pyramid:
            h = T.silu(conv(h))
        return T.reshape(h, (h.shape[0], -1))

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        tok = T.reshape(self.proj(self.features(x)), (x.shape[0], self._n_tok, self._width))
        return T.layer_norm(tok)


class Discriminator(Module):
    """Latent encoder with decoupled cross-attention on reference-image tokens and a logit head."""

    def __init__(self, rng, arch: ArchConfig, schedule: NoiseSchedule):
        c = arch.latent_channels
        self.conv_in = Conv2d(rng, c, arch.hidden, k=3, stride=2, std=1.0 / math.sqrt(9 * c))
        self.blocks = [Block(rng, arch, lora=True) for _ in range(arch.disc_blocks)]
        self.null_text = Tensor(rng.standard_normal((1, 1, arch.hidden)).astype(np.float32))
        self.image_encoder = ImageEncoder(rng, arch)
        self.head = Linear(rng, arch.hidden, 1, bias=True, std=0.02, trainable=True)
        self._arch = arch
        self._schedule = schedule
        self._pos = Tensor(grid_position_embedding(*arch.grid, arch.hidden))

    def time_embedding(self, ts) -> np.ndarray:
        return sinusoidal_embedding(np.asarray(ts, dtype=np.float64) / self._schedule.T * 1000.0,
                                    self._arch.hidden)

    def __call__(self, z_t: Tensor, ts, c_x: Tensor) -> Tensor:
        ts = np.atleast_1d(np.asarray(ts))
        for t in ts:
            self._schedule.check(t)
        if len(ts) != z_t.shape[0]:
            raise ContractError(f"{len(ts)} timesteps for a batch of {z_t.shape[0]}")
        h = _grid_to_tokens(self.conv_in(z_t))
        b, n, w = h.shape
        h = h + T.expand(T.reshape(self._pos, (1, n, w)), h.shape)
        temb = Tensor(self.time_embedding(ts).reshape(b, 1, w).astype(h.dtype))
        h = h + T.expand(temb, h.shape)
        text = T.expand(self.null_text, (b, 1, w))
        for blk in self.blocks:
            h = h + inject_self_attention(_ln(h), blk.selfattn, None, None)
            h = h + decoupled_cross_attention(_ln(h), text, c_x, blk.crossattn, blk.adapter)
            h = h + blk.mlp2(T.gelu(blk.mlp1(_ln(h))))
        pooled = T.mean(_ln(h), axis=1)
        return T.reshape(self.head(pooled), (b,))


# -- full model ----------------------------------------------------------------------------------

class DualBranchModel(Module):
    """Everything needed for training and inference, plus instrumentation counters."""

    def __init__(self, arch: ArchConfig = ArchConfig(), schedule: NoiseSchedule = NoiseSchedule()):
        rng = np.random.default_rng(arch.seed)
        self.generator = Generator(rng, arch, lora=True)
        self.reference = Generator(np.random.default_rng(arch.seed), arch, lora=False)
        self._snapshot_reference()
        self.context = ContextEmbedding(rng, arch.hidden)
        self.image_encoder = ImageEncoder(rng, arch)
        self.discriminator = Discriminator(rng, arch, schedule)
        self._arch = arch
        self._schedule = schedule
        self.counters: Counter = Counter()

    def _snapshot_reference(self) -> None:
        """Copy the generator's pre-adaptation base weights into the reference twin."""
        src = dict(self.generator.named_tensors())
        for name, t in self.reference.named_tensors():
            t.data = src[name].data.copy()
            t.requires_grad = False

    @property
    def arch(self) -> ArchConfig:
        return self._arch

    @property
    def schedule(self) -> NoiseSchedule:
        return self._schedule

    def generator_parameters(self, mode: str = "full") -> list[Tensor]:
        """Trainable tensors for ``mode``; the direct-plug ablation leaves LoRA untouched."""
        lora = [p for blk in self.generator.blocks for p in blk.selfattn.parameters() + blk.crossattn.parameters()]
        if mode == "single-refkv":
            return lora
        adapter = list(self.image_encoder.proj.parameters())
        for blk in self.generator.blocks:
            adapter += blk.adapter.parameters()
        return adapter if mode == "direct-ipa" else adapter + lora

    def discriminator_parameters(self) -> list[Tensor]:
        return self.discriminator.parameters()

    # -- the three conditioning paths ------------------------------------------------------------
    def embed_context(self, codes) -> Tensor:
        return self.context(codes)

    def encode_image_tokens(self, x) -> Tensor:
        self.counters["adapter_encode"] += 1
        return self.image_encoder(x)

    def reference_kv(self, x_fg, eps_ref, codes=None) -> ReferenceKV:
        """Foreground image -> latent -> perturb at t=1 -> frozen reference pass -> per-layer KV."""
        self.counters["reference_kv"] += 1
        x_fg = T.as_tensor(x_fg)
        if x_fg.ndim == 3:
            x_fg = T.reshape(x_fg, (1,) + x_fg.shape)
        b = x_fg.shape[0]
        with T.no_grad():
            z = latentize(x_fg)
            z1 = forward_perturb_batch(z, [1] * b, eps_ref, self._schedule)
            c_y = self.embed_context(codes) if codes is not None else \
                T.expand(T.reshape(self.context.table[-1:], (1, 1, self.arch.hidden)), (b, 1, self.arch.hidden))
            trace = ForwardTrace()
            self.reference.forward(z1, c_y, None, None, trace=trace)
        return ReferenceKV([Tensor(k.data) for k in trace.keys], [Tensor(v.data) for v in trace.values])

    def generator_forward(self, eps, c_y: Tensor, c_x: Tensor | None, ref: ReferenceKV | None,
                          mode: str = "full", s_x: float | None = None, masks=None, mask_tau: float = 0.6,
                          trace: ForwardTrace | None = None) -> Tensor:
        """One step from noise to latent, with the branches ``mode`` enables.

        ``masks`` may be a per-layer list, ``"same-pass"``, or ``"aux-pass"``
        (masks taken from an extra pass with the image branch disabled).
        """
        if mode not in MODES:
            raise ContractError(f"unknown mode {mode!r}; expected one of {MODES}")
        use_ref = mode in ("full", "single-refkv")
        use_ip = mode != "single-refkv"
        if use_ref and ref is None:
            raise ContractError(f"mode {mode!r} needs reference KV")
        if use_ip and c_x is None:
            raise ContractError(f"mode {mode!r} needs image tokens")
        eps = T.as_tensor(eps)
        self.counters["generator_forward"] += 1
        if use_ip:
            self.counters["adapter_branch"] += 1
        if masks == "aux-pass" and use_ip:
            probe = ForwardTrace()
            with T.no_grad():
                self.generator.forward(eps, c_y, None, ref if use_ref else None, trace=probe)
            masks = extract_subject_mask(probe.text_maps, SUBJECT_TOKEN_INDEX, mask_tau,
                                         [self.arch.grid] * len(self.generator.blocks))
        elif masks == "aux-pass":
            masks = None
        return self.generator.forward(eps, c_y, c_x if use_ip else None, ref if use_ref else None,
                                      s_x=s_x, masks=masks if use_ip else None, mask_tau=mask_tau, trace=trace)

    def discriminator_forward(self, z_t: Tensor, ts, c_x: Tensor) -> Tensor:
        return self.discriminator(z_t, ts, c_x)

    # -- state ---------------------------------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"meta.arch": self.arch.to_vector()}
        for name, t in self.named_tensors():
            out[name] = t.data
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        missing = [k for k in own if k not in state]
        if missing:
            raise KeyError(f"checkpoint is missing tensors: {', '.join(missing[:5])}"
                           + (" ..." if len(missing) > 5 else ""))
        for name, t in own.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != t.shape:
                raise ShapeError(f"tensor {name}: checkpoint shape {arr.shape} vs model {t.shape}")
            t.data = arr.copy()

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "DualBranchModel":
        if "meta.arch" not in state:
            raise KeyError("checkpoint is missing tensors: meta.arch")
        model = cls(ArchConfig.from_vector(state["meta.arch"]))
        model.load_state_dict(state)
        return model

    def base_tensors(self) -> list[Tensor]:
        """Everything that must stay frozen during training."""
        trainable = {id(t) for t in self.generator_parameters("full") + self.discriminator_parameters()}
        return [t for t in self.tensors() if id(t) not in trainable]


def arch_as_dict(arch: ArchConfig) -> dict:
    return asdict(arch)

"""Procedural (image, context codes, mask) scenes and binary PPM IO.

A scene is a solid background of a coded color with one textured subject at
a coded position. Subject identity (shape, hue, stripe period, stripe phase)
only ever appears in pixels; the context codes carry background and position.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ContractError

IMAGE_SIZE = 32

BACKGROUNDS = np.array([
    [0.85, 0.85, 0.80],
    [0.15, 0.15, 0.20],
    [0.55, 0.70, 0.85],
    [0.75, 0.85, 0.60],
    [0.90, 0.75, 0.55],
    [0.50, 0.45, 0.60],
    [0.35, 0.55, 0.45],
    [0.80, 0.60, 0.70],
], dtype=np.float64)

SUBJECT_HUES = np.array([
    [0.95, 0.15, 0.10],
    [0.10, 0.75, 0.20],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.05],
    [0.75, 0.10, 0.85],
    [0.05, 0.85, 0.90],
], dtype=np.float64)

SHAPES = ("circle", "square", "triangle")
STRIPE_PERIODS = (3.0, 4.5, 7.0)
STRIPE_PHASES = (0.0, np.pi)

# subject centres in pixel coordinates (row, col)
POSITIONS = ((9, 9), (9, 23), (23, 9), (23, 23))
MAX_JITTER = 1

CIRCLE_R2 = 42.25
SQUARE_HALF = 6.0
TRI_HALF_HEIGHT = 6.0
TRI_HALF_BASE = 6.5

# code sequence layout: [background, position, subject slot]
SUBJECT_TOKEN_INDEX = 2
N_CONTEXT_TOKENS = 3

N_IDENTITIES = len(SHAPES) * len(SUBJECT_HUES) * len(STRIPE_PERIODS) * len(STRIPE_PHASES)


def is_heldout_identity(identity_id: int) -> bool:
    return identity_id % 5 == 0


TRAIN_IDENTITIES = tuple(i for i in range(N_IDENTITIES) if not is_heldout_identity(i))
HELDOUT_IDENTITIES = tuple(i for i in range(N_IDENTITIES) if is_heldout_identity(i))


@dataclass(frozen=True)
class Identity:
    shape: int
    hue: int
    period: int
    phase: int

    def __post_init__(self):
        limits = (len(SHAPES), len(SUBJECT_HUES), len(STRIPE_PERIODS), len(STRIPE_PHASES))
        for v, lim, nm in zip((self.shape, self.hue, self.period, self.phase), limits,
                              ("shape", "hue", "period", "phase")):
            if not 0 <= v < lim:
                raise ContractError(f"identity {nm} id {v} outside [0, {lim})")

    @property
    def id(self) -> int:
        return ((self.shape * len(SUBJECT_HUES) + self.hue) * len(STRIPE_PERIODS) + self.period) \
            * len(STRIPE_PHASES) + self.phase

    @classmethod
    def from_id(cls, k: int) -> "Identity":
        if not 0 <= k < N_IDENTITIES:
            raise ContractError(f"identity id {k} outside [0, {N_IDENTITIES})")
        k, phase = divmod(k, len(STRIPE_PHASES))
        k, period = divmod(k, len(STRIPE_PERIODS))
        shape, hue = divmod(k, len(SUBJECT_HUES))
        return cls(shape, hue, period, phase)


@dataclass(frozen=True)
class Context:
    background: int
    position: int

    def __post_init__(self):
        if not 0 <= self.background < len(BACKGROUNDS):
            raise ContractError(f"background id {self.background} outside [0, {len(BACKGROUNDS)})")
        if not 0 <= self.position < len(POSITIONS):
            raise ContractError(f"position id {self.position} outside [0, {len(POSITIONS)})")

    @property
    def codes(self) -> tuple[int, int]:
        return (self.background, self.position)


@dataclass
class SceneSample:
    image: np.ndarray            # [3, H, W] float32 in [0, 1], already 8-bit quantized
    mask: np.ndarray             # [H, W] float32 in {0, 1}
    context: Context
    identity: Identity
    jitter: tuple[int, int] = (0, 0)
    index: int = -1
    subject_token_index: int = SUBJECT_TOKEN_INDEX

    @property
    def context_codes(self) -> tuple[int, int]:
        return self.context.codes


def subject_center(context: Context, jitter=(0, 0)) -> tuple[int, int]:
    cy, cx = POSITIONS[context.position]
    return cy + jitter[0], cx + jitter[1]


def shape_mask(shape: int, center: tuple[int, int], size: int = IMAGE_SIZE) -> np.ndarray:
    """Pixels whose centres fall inside the shape."""
    ys, xs = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    v, u = ys - center[0], xs - center[1]
    name = SHAPES[shape]
    if name == "circle":
        inside = u * u + v * v <= CIRCLE_R2
    elif name == "square":
        inside = (np.abs(u) <= SQUARE_HALF) & (np.abs(v) <= SQUARE_HALF)
    else:
        inside = (v >= -TRI_HALF_HEIGHT) & (v <= TRI_HALF_HEIGHT) & \
                 (np.abs(u) <= TRI_HALF_BASE * (v + TRI_HALF_HEIGHT) / (2 * TRI_HALF_HEIGHT))
    return inside.astype(np.float32)


def subject_texture(identity: Identity, center: tuple[int, int], size: int = IMAGE_SIZE) -> np.ndarray:
    """Striped subject colour for every pixel, in subject-local coordinates. ``[3, H, W]``."""
    ys, xs = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    v, u = ys - center[0], xs - center[1]
    period = STRIPE_PERIODS[identity.period]
    stripe = 0.5 + 0.5 * np.cos(2 * np.pi * (u + v) / (period * np.sqrt(2)) + STRIPE_PHASES[identity.phase])
    shade = 0.35 + 0.65 * stripe
    return SUBJECT_HUES[identity.hue][:, None, None] * shade[None]


def quantize(image: np.ndarray) -> np.ndarray:
    """Round half-up to 8 bits and back to float32."""
    return (to_u8(image).astype(np.float32) / np.float32(255.0)).astype(np.float32)


def to_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def render(identity: Identity, context: Context, jitter=(0, 0)) -> tuple[np.ndarray, np.ndarray]:
    center = subject_center(context, jitter)
    mask = shape_mask(identity.shape, center)
    bg = np.broadcast_to(BACKGROUNDS[context.background][:, None, None], (3, IMAGE_SIZE, IMAGE_SIZE))
    img = np.where(mask[None] > 0, subject_texture(identity, center), bg)
    return quantize(img), mask


def generate_sample(rng: np.random.Generator, identity: Identity, context: Context,
                    index: int = -1) -> SceneSample:
    """Render one scene; ``rng`` only picks the +-1 pixel placement jitter."""
    jitter = tuple(int(j) for j in rng.integers(-MAX_JITTER, MAX_JITTER + 1, size=2))
    image, mask = render(identity, context, jitter)
    return SceneSample(image, mask, context, identity, jitter, index)


def foreground_extract(s: SceneSample) -> np.ndarray:
    return s.image * s.mask[None]


def sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0 if split == "train" else 1, index])


def make_sample(seed: int, split: str, index: int) -> SceneSample:
    """``(seed, split, index)`` fully determines the sample."""
    rng = sample_rng(seed, split, index)
    pool = TRAIN_IDENTITIES if split == "train" else HELDOUT_IDENTITIES
    identity = Identity.from_id(int(pool[rng.integers(len(pool))]))
    context = Context(int(rng.integers(len(BACKGROUNDS))), int(rng.integers(len(POSITIONS))))
    return generate_sample(rng, identity, context, index)


def make_dataset(n: int, seed: int, split: str = "train") -> list[SceneSample]:
    if split not in ("train", "heldout"):
        raise ContractError(f"unknown split {split!r}")
    return [make_sample(seed, split, i) for i in range(n)]


# -- PPM IO -------------------------------------------------------------------------------

class PPMError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def encode_ppm(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError(f"expected a [3, H, W] image, got {img.shape}")
    _, h, w = img.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + to_u8(img).transpose(1, 2, 0).tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    pos = 0

    def skip_ws():
        nonlocal pos
        while pos < len(buf):
            ch = buf[pos : pos + 1]
            if ch == b"#":
                while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break

    def token() -> int:
        nonlocal pos
        skip_ws()
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise PPMError("expected a decimal number in header", start)
        return int(buf[start:pos])

    if buf[:2] != b"P6":
        raise PPMError("missing P6 magic", 0)
    pos = 2
    dims_at = pos
    w, h = token(), token()
    if w < 1 or h < 1:
        raise PPMError(f"invalid dimensions {w}x{h}", dims_at)
    skip_ws()
    maxval_at = pos
    maxval = token()
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval}", maxval_at)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise PPMError("expected a single whitespace byte after maxval", pos)
    pos += 1
    need = w * h * 3
    if len(buf) - pos < need:
        raise PPMError(f"truncated pixel data: need {need} bytes, have {len(buf) - pos}", len(buf))
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    return (px.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)).astype(np.float32)


def write_ppm(image: np.ndarray, path) -> None:
    _atomic_write(Path(path), encode_ppm(image))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# -- manifests ------------------------------------------------------------------------------

def write_dataset(samples: list[SceneSample], out_dir, name: str) -> Path:
    """Write images/masks as PPM plus a JSON-lines manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        img_name, mask_name = f"{name}_{s.index:05d}.ppm", f"{name}_{s.index:05d}_mask.ppm"
        write_ppm(s.image, out / img_name)
        write_ppm(np.repeat(s.mask[None], 3, axis=0), out / mask_name)
        lines.append(json.dumps({
            "index": s.index,
            "identity": s.identity.id,
            "identity_parts": {"shape": s.identity.shape, "hue": s.identity.hue,
                               "period": s.identity.period, "phase": s.identity.phase},
            "context": {"background": s.context.background, "position": s.context.position},
            "jitter": list(s.jitter),
            "image": img_name,
            "mask": mask_name,
        }, sort_keys=True))
    manifest = out / f"{name}.jsonl"
    _atomic_write(manifest, ("\n".join(lines) + "\n").encode())
    return manifest


def read_manifest(path) -> list[SceneSample]:
    path = Path(path)
    samples = []
    for line_no, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            ctx = Context(rec["context"]["background"], rec["context"]["position"])
            ident = Identity.from_id(rec["identity"])
            image = read_ppm(path.parent / rec["image"])
            mask = read_ppm(path.parent / rec["mask"])[0]
        except (KeyError, json.JSONDecodeError) as exc:
            raise ContractError(f"{path}:{line_no}: bad manifest record ({exc})") from exc
        samples.append(SceneSample(image, (mask > 0.5).astype(np.float32), ctx, ident,
                                   tuple(rec.get("jitter", (0, 0))), rec["index"]))
    return samples

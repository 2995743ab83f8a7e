"""Central finite-difference checks of every differentiable op, in float64."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import (
    AttentionParams,
    DecoupledAdapterParams,
    LayerMask,
    attend,
    decoupled_cross_attention,
    inject_self_attention,
    masked_decoupled_cross_attention,
)
from .diffusion import NoiseSchedule, forward_perturb, forward_perturb_batch
from .layers import Linear
from .losses import FeaturePyramid, LossWeights, adv_d, adv_g, dist_loss, perceptual_loss, softplus, ssim, \
    total_generator_loss
from .networks import ArchConfig, DualBranchModel, delatentize, latentize
from .tensor import ContractError, Tensor

REL_TOL = 1e-4
STEP = 1e-3
MAX_COORDS = 12


@dataclass
class GradReport:
    component: str
    max_rel_err: float
    n_coords: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < REL_TOL

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.component:<28} rel_err={self.max_rel_err:.3e} coords={self.n_coords}"


def check(fn: Callable[[], Tensor], wrt: list[Tensor], rng: np.random.Generator,
          max_coords: int = MAX_COORDS, step: float = STEP) -> tuple[float, int]:
    """Compare tape gradients of scalar ``fn()`` with central differences on sampled coordinates.

    Error per tensor is ``||g_tape - g_fd|| / max(||g_tape||, ||g_fd||, 1e-6)``; the worst is returned.
    """
    for t in wrt:
        if t.dtype != np.float64:
            raise ContractError("gradcheck runs on float64 tensors only")
        t.grad = None
    loss = fn()
    T.backward(loss)
    tape = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]
    worst, count = 0.0, 0
    with T.no_grad():
        for t, g in zip(wrt, tape):
            flat = t.data.reshape(-1)
            n = flat.size
            coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
            ga, gn = [], []
            for i in coords:
                keep = flat[i]
                flat[i] = keep + step
                up = float(fn().data)
                flat[i] = keep - step
                down = float(fn().data)
                flat[i] = keep
                gn.append((up - down) / (2 * step))
                ga.append(g.reshape(-1)[i])
            ga, gn = np.asarray(ga), np.asarray(gn)
            err = np.linalg.norm(ga - gn) / max(np.linalg.norm(ga), np.linalg.norm(gn), 1e-6)
            worst = max(worst, float(err))
            count += len(coords)
    for t in wrt:
        t.grad = None
    return worst, count


def _leaf(rng, shape, lo=None, hi=None) -> Tensor:
    a = rng.uniform(lo, hi, shape) if lo is not None else rng.standard_normal(shape)
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _contract(out: Tensor, rng) -> Tensor:
    """Scalarize a non-scalar output with a fixed random weighting."""
    w = Tensor(rng.standard_normal(out.shape))
    return T.sum_(out * w)


def _unary(op, lo=None, hi=None):
    def build(rng):
        x = _leaf(rng, (3, 5), lo, hi)
        return (lambda: _contract(op(x), np.random.default_rng(1))), [x]
    return build


def _binary(op, lo=None, hi=None):
    def build(rng):
        a, b = _leaf(rng, (4, 3)), _leaf(rng, (4, 3), lo, hi)
        return (lambda: _contract(op(a, b), np.random.default_rng(1))), [a, b]
    return build


def _build_matmul(rng):
    a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (4, 5))
    return (lambda: _contract(T.matmul(a, b), np.random.default_rng(1))), [a, b]


def _build_bmm(rng):
    a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (2, 4, 5))
    return (lambda: _contract(T.matmul(a, b), np.random.default_rng(1))), [a, b]


def _build_softmax(rng):
    x = _leaf(rng, (3, 6))
    return (lambda: _contract(T.softmax(x, axis=-1), np.random.default_rng(1))), [x]


def _build_layer_norm(rng):
    x, g, b = _leaf(rng, (2, 3, 8)), _leaf(rng, (8,)), _leaf(rng, (8,))
    return (lambda: _contract(T.layer_norm(x, g, b), np.random.default_rng(1))), [x, g, b]


def _build_conv(stride, padding):
    def build(rng):
        x, w, b = _leaf(rng, (2, 3, 7, 7)), _leaf(rng, (4, 3, 3, 3)), _leaf(rng, (4,))
        return (lambda: _contract(T.conv2d(x, w, b, stride=stride, padding=padding),
                                  np.random.default_rng(1))), [x, w, b]
    return build


def _build_resize(rng):
    x = _leaf(rng, (2, 3, 4, 4))
    return (lambda: _contract(T.resize_nearest(x, (8, 6)), np.random.default_rng(1))), [x]


def _build_shape_ops(rng):
    x, y = _leaf(rng, (2, 3, 4)), _leaf(rng, (2, 1, 4))

    def fn():
        z = T.concat([x, T.expand(y, (2, 3, 4))], axis=1)
        z = T.transpose(T.reshape(z, (2, 4, 6)), (2, 0, 1))
        return _contract(T.slice_(z, (slice(1, 5), 0)), np.random.default_rng(1)) + T.mean(x, axis=1).sum()
    return fn, [x, y]


def _build_latentize(rng):
    x = _leaf(rng, (2, 3, 4, 6))
    return (lambda: _contract(delatentize(latentize(x) * 2.0) + x, np.random.default_rng(1))), [x]


def _build_lora(rng):
    lin = Linear(np.random.default_rng(3), 6, 5, bias=True, rank=2, alpha=4.0)
    lin.loraB.data = rng.standard_normal(lin.loraB.shape) * 0.3
    lin.W.data, lin.loraA.data, lin.b.data = (t.data.astype(np.float64) for t in (lin.W, lin.loraA, lin.b))
    lin.b.requires_grad = True
    x = _leaf(rng, (3, 6))
    return (lambda: _contract(lin(x), np.random.default_rng(1))), [x, lin.loraA, lin.loraB, lin.b]


def _build_attend(rng):
    q, k, v = _leaf(rng, (2, 5, 4)), _leaf(rng, (2, 7, 4)), _leaf(rng, (2, 7, 4))
    return (lambda: _contract(attend(q, k, v), np.random.default_rng(1))), [q, k, v]


def _attn_params(rng, width=6, d=4, cond=None):
    p = AttentionParams(np.random.default_rng(5), width, d, cond=cond, rank=2, alpha=2.0)
    for lin in (p.Wq, p.Wk, p.Wv, p.Wout):
        lin.W.data = lin.W.data.astype(np.float64)
        lin.loraA.data = lin.loraA.data.astype(np.float64)
        lin.loraB.data = rng.standard_normal(lin.loraB.shape) * 0.3
    return p


def _build_inject(rng):
    p = _attn_params(rng)
    h, rk, rv = _leaf(rng, (2, 5, 6)), _leaf(rng, (2, 3, 4)), _leaf(rng, (2, 3, 4))
    fn = lambda: _contract(inject_self_attention(h, p, rk, rv), np.random.default_rng(1))
    return fn, [h, rk, rv, p.Wq.loraB, p.Wk.loraA, p.Wout.loraB]


def _adapter(rng, p):
    a = DecoupledAdapterParams(np.random.default_rng(6), 6, 4, init_from=p)
    a.Wkx.W.data = a.Wkx.W.data.astype(np.float64) + rng.standard_normal(a.Wkx.W.shape) * 0.1
    a.Wvx.W.data = a.Wvx.W.data.astype(np.float64)
    return a


def _build_decoupled(masked: bool):
    def build(rng):
        p = _attn_params(rng, cond=6)
        a = _adapter(rng, p)
        h, cy, cx = _leaf(rng, (2, 4, 6)), _leaf(rng, (2, 3, 6)), _leaf(rng, (2, 2, 6))
        if masked:
            m = LayerMask((rng.uniform(size=(2, 2, 2)) > 0.5).astype(np.float64), 0.6)
            fn = lambda: _contract(masked_decoupled_cross_attention(h, cy, cx, p, a, m, s_x=1.6),
                                   np.random.default_rng(1))
        else:
            fn = lambda: _contract(decoupled_cross_attention(h, cy, cx, p, a, s_x=1.3), np.random.default_rng(1))
        return fn, [h, cy, cx, a.Wkx.W, a.Wvx.W, p.Wq.loraB, p.Wv.loraB]
    return build


def _build_ssim(window):
    def build(rng):
        x, y = _leaf(rng, (2, 3, 12, 12), 0, 1), _leaf(rng, (2, 3, 12, 12), 0, 1)
        return (lambda: ssim(x, y, window=window)), [x, y]
    return build


def _pyramid64() -> FeaturePyramid:
    p = FeaturePyramid()
    for t in p.tensors():
        t.data = t.data.astype(np.float64)
    return p


def _build_dist(rng):
    pyr = _pyramid64()
    x, y = _leaf(rng, (2, 3, 8, 8), 0, 1), _leaf(rng, (2, 3, 8, 8), 0, 1)
    return (lambda: dist_loss(x, y, pyr)), [x, y]


def _build_perceptual(rng):
    pyr = _pyramid64()
    x, y = _leaf(rng, (2, 3, 8, 8), 0, 1), _leaf(rng, (2, 3, 8, 8), 0, 1)
    return (lambda: perceptual_loss(x, y, LossWeights(), pyr)), [x, y]


def _build_adv(rng):
    lr, lf = _leaf(rng, (5,)), _leaf(rng, (5,))
    return (lambda: adv_d(lr, lf) + adv_g(lf) * 0.7), [lr, lf]


def _build_perturb(rng):
    sched = NoiseSchedule()
    z, eps = _leaf(rng, (3, 4, 4, 4)), rng.standard_normal((3, 4, 4, 4))
    e1 = rng.standard_normal((4, 4, 4))
    fn = lambda: _contract(forward_perturb_batch(z, [0, 1, 731], eps, sched), np.random.default_rng(1)) + \
        _contract(forward_perturb(T.slice_(z, 0), 500, e1, sched), np.random.default_rng(2))
    return fn, [z]


TINY_ARCH = ArchConfig(image_size=16, hidden=16, d=8, blocks=2, n_tok=2, lora_rank=2, lora_alpha=2.0,
                       disc_blocks=1, seed=11)


def _build_end_to_end(rng):
    """Whole generator objective on a tiny network: reference KV, both branches, discriminator, DIST, SSIM."""
    model = DualBranchModel(TINY_ARCH)
    for t in model.tensors():
        t.data = t.data.astype(np.float64)
    trainable = model.generator_parameters("full") + model.discriminator_parameters()
    for t in trainable:
        if t.data.ndim == 2 and not t.data.any():
            t.data = rng.standard_normal(t.shape) * 0.2
    pyr = _pyramid64()
    n = 2
    a = model.arch
    lshape = (n, a.latent_channels, a.latent_size, a.latent_size)
    x_ref = rng.uniform(0, 1, (n, 3, a.image_size, a.image_size))
    mask = (rng.uniform(size=(n, a.image_size, a.image_size)) > 0.4).astype(np.float64)
    eps, eps_ref, noise = (rng.standard_normal(lshape) for _ in range(3))
    codes = np.array([[1, 2], [5, 0]])
    ts = [1, 600]
    ref = model.reference_kv(x_ref * mask[:, None], eps_ref)
    masks = [LayerMask((rng.uniform(size=(n,) + a.grid) > 0.5).astype(np.float64), 0.6) for _ in range(a.blocks)]

    def fn():
        c_x = model.encode_image_tokens(x_ref)
        z = model.generator_forward(Tensor(eps), model.embed_context(codes), c_x, ref, mode="full", s_x=1.0,
                                    masks=masks)
        logit = model.discriminator_forward(forward_perturb_batch(z, ts, noise, model.schedule), ts,
                                            model.discriminator.image_encoder(Tensor(x_ref)))
        return total_generator_loss(Tensor(x_ref), delatentize(z), logit, LossWeights(), pyr)

    picks = [t for t in model.generator_parameters("full") if t.data.ndim == 2][::3]
    picks += [model.discriminator.head.W, model.image_encoder.proj.W]
    return fn, picks


REGISTRY: dict[str, Callable] = {
    "add": _binary(T.add), "sub": _binary(T.sub), "mul": _binary(T.mul), "div": _binary(T.div, 0.5, 2.0),
    "neg": _unary(T.neg), "exp": _unary(T.exp), "log": _unary(T.log, 0.2, 3.0), "sqrt": _unary(T.sqrt, 0.2, 3.0),
    "reciprocal": _unary(T.reciprocal, 0.5, 2.0), "power": _unary(lambda x: T.power(x, 2.5), 0.2, 2.0),
    "tanh": _unary(T.tanh), "sigmoid": _unary(T.sigmoid), "log_sigmoid": _unary(T.log_sigmoid),
    "silu": _unary(T.silu), "gelu": _unary(T.gelu), "softplus": _unary(softplus),
    "sum_mean": _unary(lambda x: T.sum_(x, axis=0) * T.mean(x, axis=0, keepdims=False)),
    "matmul": _build_matmul, "matmul_batched": _build_bmm, "softmax": _build_softmax,
    "layer_norm": _build_layer_norm, "conv2d": _build_conv(1, 1), "conv2d_stride2": _build_conv(2, 1),
    "conv2d_nopad": _build_conv(1, 0), "resize_nearest": _build_resize, "shape_ops": _build_shape_ops,
    "latentize": _build_latentize, "lora_linear": _build_lora, "attend": _build_attend,
    "inject_self_attention": _build_inject, "decoupled_cross_attention": _build_decoupled(False),
    "masked_decoupled_cross_attention": _build_decoupled(True), "ssim": _build_ssim("uniform"),
    "ssim_gaussian": _build_ssim("gaussian"), "dist_loss": _build_dist, "perceptual_loss": _build_perceptual,
    "adversarial": _build_adv, "forward_perturb": _build_perturb, "total_generator_loss": _build_end_to_end,
}


def run(component: str, seed: int = 0) -> GradReport:
    if component not in REGISTRY:
        raise KeyError(f"unknown gradcheck component {component!r}; known: {', '.join(sorted(REGISTRY))}")
    rng = np.random.default_rng(seed)
    fn, wrt = REGISTRY[component](rng)
    err, n = check(fn, wrt, rng)
    if not math.isfinite(err):
        err = float("inf")
    return GradReport(component, err, n)


def run_all(seed: int = 0) -> list[GradReport]:
    return [run(name, seed) for name in REGISTRY]

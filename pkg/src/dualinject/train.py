"""Two-stage adversarial training loop."""

from __future__ import annotations

import csv
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from . import tensor as T
from .config import TrainConfig
from .curriculum import crop_lower_bound, random_crop, sample_crop_scale
from .diffusion import forward_perturb_batch
from .inference import evaluate, uses_adapter, uses_reference
from .losses import FeaturePyramid, adv_d, total_generator_loss
from .networks import DualBranchModel, delatentize, latentize
from .synthdata import SceneSample, make_dataset, read_manifest
from .tensor import ContractError, Tensor

METRIC_FIELDS = ("step", "loss_total", "loss_dist", "loss_ssim", "loss_adv_g", "loss_adv_d", "id_proxy", "ctx_proxy")


class NumericError(FloatingPointError):
    pass


class AdamW:
    """Adam with decoupled weight decay, state kept in float64."""

    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            w = p.data.astype(np.float64) * (1 - self.lr * self.weight_decay)
            w -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = w.astype(p.data.dtype)


@contextmanager
def frozen(params: list[Tensor]):
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


@dataclass
class StepDraws:
    """All randomness for one iteration, derived from ``(train_seed, stage, step)``."""
    indices: np.ndarray
    eps: np.ndarray
    eps_ref: np.ndarray
    ts: np.ndarray
    noise_real: np.ndarray
    noise_fake: np.ndarray
    crop_scales: np.ndarray
    adapter_inputs: np.ndarray


@dataclass
class StageResult:
    model: DualBranchModel
    rows: list[dict] = field(default_factory=list)
    crop_bounds: list[float] = field(default_factory=list)
    checkpoint_path: Path | None = None


def load_samples(cfg: TrainConfig) -> tuple[list[SceneSample], list[SceneSample]]:
    train = read_manifest(cfg.manifest) if cfg.manifest else make_dataset(cfg.n_train, cfg.data_seed, "train")
    held = read_manifest(cfg.heldout_manifest) if cfg.heldout_manifest else \
        make_dataset(cfg.n_heldout, cfg.data_seed, "heldout")
    if not train:
        raise ContractError("training set is empty")
    return train, held


class Trainer:
    def __init__(self, cfg: TrainConfig, model: DualBranchModel, samples: list[SceneSample], stage: int,
                 heldout: list[SceneSample] | None = None, pyramid: FeaturePyramid | None = None):
        if stage not in (1, 2):
            raise ContractError(f"stage must be 1 or 2, got {stage}")
        self.cfg, self.model, self.samples, self.stage = cfg, model, samples, stage
        self.heldout = (heldout or [])[: cfg.log_eval_samples]
        self.pyramid = pyramid or FeaturePyramid()
        self.weights = cfg.loss_weights()
        self.curriculum = cfg.curriculum_params()
        self.mode = cfg.mode
        # the adapter-only ablations are trained without a discriminator
        self.adversarial = cfg.mode not in ("direct-ipa", "finetune-ipa") and cfg.lambda3 > 0
        self.iterations = cfg.stage1_iters if stage == 1 else cfg.stage2_iters
        lr = cfg.lr_stage1 if stage == 1 else cfg.lr_stage2
        self.g_params = model.generator_parameters(cfg.mode)
        self.d_params = model.discriminator_parameters()
        self.g_opt = AdamW(self.g_params, lr, weight_decay=cfg.weight_decay)
        self.d_opt = AdamW(self.d_params, lr, weight_decay=cfg.weight_decay)
        self._images = np.stack([s.image for s in samples])
        self._masks = np.stack([s.mask for s in samples])
        self._codes = np.array([s.context_codes for s in samples], dtype=np.int64)

    # -- randomness ----------------------------------------------------------------------------
    def crop_bound(self, step: int) -> float:
        if self.stage == 1 or not self.cfg.curriculum:
            return self.cfg.r_max
        return crop_lower_bound(step, self.curriculum)

    def draws(self, step: int) -> StepDraws:
        cfg = self.cfg
        n = cfg.batch_size * cfg.grad_accum
        if n > len(self.samples):
            raise ContractError(f"need {n} samples per step, dataset has {len(self.samples)}")
        idx = np.random.default_rng([cfg.train_seed, self.stage, step]).permutation(len(self.samples))[:n]
        a = self.model.arch
        lshape = (a.latent_channels, a.latent_size, a.latent_size)
        r_i = self.crop_bound(step)
        eps, eps_ref, ts, real, fake, scales, adapter_in = [], [], [], [], [], [], []
        for j, k in enumerate(idx):
            rng = np.random.default_rng([cfg.train_seed, self.stage, step, j])
            eps.append(rng.standard_normal(lshape))
            eps_ref.append(rng.standard_normal(lshape))
            ts.append(self.model.schedule.sample_timestep(rng))
            real.append(rng.standard_normal(lshape))
            fake.append(rng.standard_normal(lshape))
            img = self._images[k]
            if self.stage == 2 and cfg.curriculum:
                r = sample_crop_scale(rng, r_i, cfg.r_max)
                img = random_crop(img, r, rng, cfg.crop_interpolation)
            else:
                r = 1.0
            scales.append(r)
            adapter_in.append(img)
        f32 = lambda xs: np.stack(xs).astype(np.float32)
        return StepDraws(idx, f32(eps), f32(eps_ref), np.array(ts), f32(real), f32(fake), np.array(scales),
                         f32(adapter_in))

    # -- objective pieces ----------------------------------------------------------------------
    def _micro_batches(self, d: StepDraws):
        b = self.cfg.batch_size
        for lo in range(0, len(d.indices), b):
            yield slice(lo, lo + b)

    def _generator_pass(self, d: StepDraws, sl: slice):
        m = self.model
        idx = d.indices[sl]
        x_ref = Tensor(self._images[idx])
        codes = self._codes[idx]
        ref = m.reference_kv(self._images[idx] * self._masks[idx][:, None], d.eps_ref[sl]) \
            if uses_reference(self.mode) else None
        c_x = m.encode_image_tokens(d.adapter_inputs[sl]) if uses_adapter(self.mode) else None
        z_in = Tensor(d.eps[sl])
        if self.mode == "direct-ipa":
            # denoiser-style adapter training: the input is a noised clean latent at a random t,
            # while inference still starts from pure noise
            z_in = forward_perturb_batch(latentize(x_ref), d.ts[sl], d.eps[sl], m.schedule)
        z_rec = m.generator_forward(z_in, m.embed_context(codes), c_x, ref, mode=self.mode,
                                    s_x=self.cfg.s_x_train, masks=None)
        x_rec = delatentize(z_rec)
        logit_fake = None
        if self.adversarial:
            c_d = m.discriminator.image_encoder(x_ref)
            zt = forward_perturb_batch(z_rec, d.ts[sl], d.noise_fake[sl], m.schedule)
            logit_fake = m.discriminator_forward(zt, d.ts[sl], c_d)
        parts: dict = {}
        loss = total_generator_loss(x_ref, x_rec, logit_fake, self.weights, self.pyramid, parts)
        return loss, parts, z_rec

    def _discriminator_loss(self, d: StepDraws, sl: slice, z_fake: np.ndarray) -> Tensor:
        m = self.model
        x_ref = Tensor(self._images[d.indices[sl]])
        c_d = m.discriminator.image_encoder(x_ref)
        ts = d.ts[sl]
        real = forward_perturb_batch(latentize(x_ref), ts, d.noise_real[sl], m.schedule)
        fake = forward_perturb_batch(Tensor(z_fake), ts, d.noise_fake[sl], m.schedule)
        return adv_d(m.discriminator_forward(real, ts, c_d), m.discriminator_forward(fake, ts, c_d))

    # -- one iteration -------------------------------------------------------------------------
    def step(self, step: int) -> dict:
        """One G update then one D update. Returned losses describe the state before the step."""
        d = self.draws(step)
        total_n = len(d.indices)
        self.g_opt.zero_grad()
        self.d_opt.zero_grad()
        acc = {"loss_total": 0.0, "loss_dist": 0.0, "loss_ssim": 0.0, "loss_adv_g": 0.0, "loss_adv_d": 0.0}
        fakes = []
        with frozen(self.d_params):
            for sl in self._micro_batches(d):
                loss, parts, z_rec = self._generator_pass(d, sl)
                w = (sl.stop - sl.start) / total_n
                self._accumulate(acc, loss, parts, w)
                T.backward(loss * w)
                fakes.append(z_rec.data.copy())
        self._check_finite(acc, step)
        self.g_opt.step()
        if self.adversarial:
            for sl, z_fake in zip(self._micro_batches(d), fakes):
                w = len(z_fake) / total_n
                loss = self._discriminator_loss(d, sl, z_fake)
                acc["loss_adv_d"] += float(loss.data) * w
                T.backward(loss * w)
            self._check_finite(acc, step)
            self.d_opt.step()
        return acc

    def losses_at(self, step: int) -> dict:
        """Loss values of ``step`` for the current state, without updating anything."""
        d = self.draws(step)
        total_n = len(d.indices)
        acc = {"loss_total": 0.0, "loss_dist": 0.0, "loss_ssim": 0.0, "loss_adv_g": 0.0, "loss_adv_d": 0.0}
        with T.no_grad():
            for sl in self._micro_batches(d):
                loss, parts, z_rec = self._generator_pass(d, sl)
                w = len(z_rec.data) / total_n
                self._accumulate(acc, loss, parts, w)
                if self.adversarial:
                    acc["loss_adv_d"] += float(self._discriminator_loss(d, sl, z_rec.data).data) * w
        return acc

    @staticmethod
    def _accumulate(acc: dict, loss: Tensor, parts: dict, w: float) -> None:
        acc["loss_total"] += float(loss.data) * w
        acc["loss_dist"] += float(parts["dist"].data) * w
        acc["loss_ssim"] += float(parts["ssim"].data) * w
        if "adv_g" in parts:
            acc["loss_adv_g"] += float(parts["adv_g"].data) * w

    @staticmethod
    def _check_finite(acc: dict, step: int) -> None:
        bad = [k for k, v in acc.items() if not math.isfinite(v)]
        if bad:
            raise NumericError(f"non-finite loss at step {step}: {', '.join(bad)}")

    def proxies(self) -> tuple[float, float]:
        if not self.heldout:
            return float("nan"), float("nan")
        r = evaluate(self.model, self.heldout, mode=self.mode, s_x=self.cfg.s_x, tau=self.cfg.tau,
                     mask_source=self.cfg.mask_source)
        return r.id_proxy, r.ctx_proxy

    def is_log_step(self, step: int) -> bool:
        return step % self.cfg.log_every == 0 or step == self.iterations - 1


def _write_rows(path: Path, rows: list[dict], append: bool) -> None:
    new = not (append and path.exists())
    with open(path, "w" if new else "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k != "step" else int(r[k])) for k in METRIC_FIELDS})


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != METRIC_FIELDS:
        raise ContractError(f"metrics header {tuple(rows[0].keys())} differs from {METRIC_FIELDS}")
    return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in rows]


def stage_checkpoint_name(stage: int) -> str:
    return f"stage{stage}.spc"


def log_checkpoint_path(out_dir: Path, stage: int, step: int) -> Path:
    return out_dir / "log_checkpoints" / f"stage{stage}_step{step:06d}.spc"


def train_stage(cfg: TrainConfig, stage: int, model: DualBranchModel | None = None,
                samples: list[SceneSample] | None = None, heldout: list[SceneSample] | None = None,
                out_dir=None, keep_log_checkpoints: bool = True,
                progress: Callable[[dict], None] | None = None) -> StageResult:
    """Run one stage; writes metrics, (stage 2) crop bounds and the final checkpoint under ``out_dir``.

    On a non-finite loss the last good state is saved and :class:`NumericError` propagates.
    """
    if samples is None or heldout is None:
        tr, he = load_samples(cfg)
        samples = tr if samples is None else samples
        heldout = he if heldout is None else heldout
    model = model or DualBranchModel(cfg.arch())
    tr = Trainer(cfg, model, samples, stage, heldout)
    out = Path(out_dir) if out_dir is not None else None
    result = StageResult(model)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = out / f"metrics_stage{stage}.csv"
        if metrics.exists():
            metrics.unlink()
    last_good = model.state_dict()
    last_good = {k: v.copy() for k, v in last_good.items()}
    for step in range(tr.iterations):
        result.crop_bounds.append(tr.crop_bound(step))
        row = None
        if tr.is_log_step(step):
            if out is not None and keep_log_checkpoints:
                checkpoint.save(model.state_dict(), log_checkpoint_path(out, stage, step))
            idp, ctxp = tr.proxies()
            row = {"step": step, "id_proxy": idp, "ctx_proxy": ctxp}
        try:
            losses = tr.step(step)
        except FloatingPointError:
            if out is not None:
                checkpoint.save(last_good, out / stage_checkpoint_name(stage))
            raise
        if row is not None:
            row.update(losses)
            result.rows.append(row)
            if out is not None:
                _write_rows(out / f"metrics_stage{stage}.csv", [row], append=True)
            if progress is not None:
                progress(row)
            last_good = {k: v.copy() for k, v in model.state_dict().items()}
    if out is not None:
        if stage == 2:
            (out / "crop_bounds.csv").write_text(
                "step,r_i\n" + "".join(f"{i},{r!r}\n" for i, r in enumerate(result.crop_bounds)))
        result.checkpoint_path = out / stage_checkpoint_name(stage)
        checkpoint.save(model.state_dict(), result.checkpoint_path)
    return result


def train_stage1(cfg: TrainConfig, **kw) -> StageResult:
    return train_stage(cfg, 1, **kw)


def train_stage2(cfg: TrainConfig, state: dict[str, np.ndarray], **kw) -> StageResult:
    return train_stage(cfg, 2, model=DualBranchModel.from_state(state), **kw)


def train_both(cfg: TrainConfig, samples=None, heldout=None, out_dir=None, **kw) -> tuple[StageResult, StageResult]:
    s1 = train_stage1(cfg, samples=samples, heldout=heldout, out_dir=out_dir, **kw)
    stage1_state = {k: v.copy() for k, v in s1.model.state_dict().items()}
    s2 = train_stage2(cfg, stage1_state, samples=samples, heldout=heldout, out_dir=out_dir, **kw)
    return s1, s2

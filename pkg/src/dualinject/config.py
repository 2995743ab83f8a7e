"""Training configuration and its JSON form."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .attention import DEFAULT_IDENTITY_SCALE, DEFAULT_MASK_THRESHOLD
from .curriculum import CurriculumParams
from .losses import LossWeights
from .networks import MODES, ArchConfig
from .tensor import ContractError


@dataclass
class TrainConfig:
    # objective
    lambda1: float = 1.0
    lambda2: float = 0.2
    lambda3: float = 0.1
    # identity scale: plain decoupled attention while training, rescaled at inference
    s_x_train: float = 1.0
    s_x: float = DEFAULT_IDENTITY_SCALE
    tau: float = DEFAULT_MASK_THRESHOLD
    mask_source: str = "same-pass"
    # curriculum (stage 2 only)
    r_min: float = 0.1
    r_max: float = 1.0
    lambda_curr: float = 0.025
    curriculum: bool = True
    crop_interpolation: str = "nearest"
    # schedule; the toy values are active, full-scale values kept for reference
    stage1_iters: int = 2000
    stage2_iters: int = 800
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-4
    fullscale_stage1_iters: int = 100_000
    fullscale_stage2_iters: int = 60_000
    fullscale_lr_stage1: float = 1e-5
    fullscale_lr_stage2: float = 1e-6
    batch_size: int = 4
    grad_accum: int = 2
    weight_decay: float = 0.01
    # architecture
    lora_rank: int = 8
    lora_alpha: float = 8.0
    hidden: int = 64
    blocks: int = 4
    n_tok: int = 4
    disc_blocks: int = 2
    # data and seeds
    n_train: int = 512
    n_heldout: int = 64
    manifest: str = ""
    heldout_manifest: str = ""
    model_seed: int = 0
    data_seed: int = 7
    train_seed: int = 1234
    mode: str = "full"
    # bookkeeping
    out_dir: str = "runs/default"
    log_every: int = 100
    log_eval_samples: int = 8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mask_source not in ("same-pass", "aux-pass"):
            raise ContractError(f"mask_source must be 'same-pass' or 'aux-pass', got {self.mask_source!r}")
        if self.batch_size < 1 or self.grad_accum < 1:
            raise ContractError("batch_size and grad_accum must be positive")
        self.loss_weights()
        self.curriculum_params()

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)

    def curriculum_params(self) -> CurriculumParams:
        return CurriculumParams(self.r_min, self.r_max, self.lambda_curr, max(1, self.stage2_iters))

    def arch(self) -> ArchConfig:
        return ArchConfig(hidden=self.hidden, d=self.hidden, blocks=self.blocks, n_tok=self.n_tok,
                          lora_rank=self.lora_rank, lora_alpha=self.lora_alpha,
                          disc_blocks=self.disc_blocks, seed=self.model_seed)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ContractError(f"unknown config keys: {', '.join(unknown)}")
        kw = {}
        for k, v in data.items():
            typ = known[k].type
            if typ == "int" and isinstance(v, bool) or typ == "int" and not isinstance(v, int):
                raise ContractError(f"config key {k!r} must be an integer, got {v!r}")
            if typ == "float" and not isinstance(v, (int, float)):
                raise ContractError(f"config key {k!r} must be a number, got {v!r}")
            if typ == "bool" and not isinstance(v, bool):
                raise ContractError(f"config key {k!r} must be true/false, got {v!r}")
            if typ == "str" and not isinstance(v, str):
                raise ContractError(f"config key {k!r} must be a string, got {v!r}")
            kw[k] = float(v) if typ == "float" else v
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ContractError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ContractError("config must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

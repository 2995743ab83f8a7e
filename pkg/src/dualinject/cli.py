"""Command-line entry point: synth, train, generate, eval, gradcheck."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, gradcheck
from .attention import DEFAULT_IDENTITY_SCALE, DEFAULT_MASK_THRESHOLD
from .checkpoint import CheckpointError
from .config import TrainConfig
from .inference import evaluate, generate
from .networks import MODES, DualBranchModel
from .synthdata import BACKGROUNDS, POSITIONS, PPMError, make_dataset, read_manifest, read_ppm, write_dataset, \
    write_ppm
from .tensor import ContractError, ShapeError
from .train import METRIC_FIELDS, train_stage

EXIT_OK, EXIT_CONTRACT, EXIT_NUMERIC = 0, 1, 2


def parse_context(text: str) -> tuple[int, int]:
    """``"bg=3,pos=1"`` -> ``(3, 1)``."""
    vals = {}
    for part in text.split(","):
        key, sep, val = part.partition("=")
        key = key.strip()
        if not sep or key not in ("bg", "pos") or key in vals:
            raise ContractError(f"bad context {text!r}; expected 'bg=<int>,pos=<int>'")
        try:
            vals[key] = int(val)
        except ValueError:
            raise ContractError(f"bad context value {val!r} in {text!r}") from None
    if set(vals) != {"bg", "pos"}:
        raise ContractError(f"context {text!r} must give both bg and pos")
    if not 0 <= vals["bg"] < len(BACKGROUNDS) or not 0 <= vals["pos"] < len(POSITIONS):
        raise ContractError(f"context {text!r} out of range (bg < {len(BACKGROUNDS)}, pos < {len(POSITIONS)})")
    return vals["bg"], vals["pos"]


def load_model(path) -> DualBranchModel:
    return DualBranchModel.from_state(checkpoint.load(path))


def cmd_synth(args) -> int:
    out = Path(args.out)
    write_dataset(make_dataset(args.n, args.seed, "train"), out, "train")
    write_dataset(make_dataset(args.n_heldout, args.seed, "heldout"), out, "heldout")
    print(f"wrote {args.n} training and {args.n_heldout} heldout samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = TrainConfig.load(args.config)
    out = Path(cfg.out_dir)
    model = None
    if args.resume:
        model = load_model(args.resume)
    elif args.stage == 2:
        default = out / "stage1.spc"
        if not default.exists():
            raise ContractError(f"stage 2 needs a stage-1 checkpoint: pass --resume or create {default}")
        model = load_model(default)
    report = lambda row: print(" ".join(f"{k}={row[k]:.5g}" if k != "step" else f"step={row[k]}"
                                        for k in METRIC_FIELDS), flush=True)
    res = train_stage(cfg, args.stage, model=model, out_dir=out, progress=report)
    print(f"checkpoint: {res.checkpoint_path}")
    return EXIT_OK


def cmd_generate(args) -> int:
    model = load_model(args.ckpt)
    ref = read_ppm(args.ref)
    mask = None
    if args.ref_mask:
        mask = (read_ppm(args.ref_mask).mean(axis=0) > 0.5).astype(np.float32)
    img = generate(model, ref, parse_context(args.context), args.seed, ref_mask=mask, mode=args.mode,
                   s_x=args.sx, tau=args.tau, mask_enabled=not args.no_mask)
    if not np.isfinite(img).all():
        raise FloatingPointError("generated image contains non-finite values")
    write_ppm(img, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.ckpt)
    held = read_manifest(args.manifest)
    r = evaluate(model, held, mode=args.mode, s_x=args.sx, tau=args.tau, mask_enabled=not args.no_mask)
    row = {k: "nan" for k in METRIC_FIELDS}
    row.update(step=-1, id_proxy=repr(r.id_proxy), ctx_proxy=repr(r.ctx_proxy))
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        w.writerow(row)
    print(f"id_proxy={r.id_proxy:.4f} ctx_proxy={r.ctx_proxy:.4f} (n={len(held)})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = list(gradcheck.REGISTRY) if args.component == "all" else [args.component]
    if args.component != "all" and args.component not in gradcheck.REGISTRY:
        raise ContractError(f"unknown component {args.component!r}; known: {', '.join(sorted(gradcheck.REGISTRY))}")
    reports = [gradcheck.run(n) for n in names]
    for r in reports:
        print(r.line())
    return EXIT_OK if all(r.passed for r in reports) else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualinject")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic dataset with manifests")
    s.add_argument("--n", type=int, default=512)
    s.add_argument("--n-heldout", type=int, default=64)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config", required=True)
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="personalize one reference into a context")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--ref", required=True)
    g.add_argument("--ref-mask", help="PPM whose bright pixels mark the subject; default all ones")
    g.add_argument("--context", required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--sx", type=float, default=DEFAULT_IDENTITY_SCALE)
    g.add_argument("--tau", type=float, default=DEFAULT_MASK_THRESHOLD)
    g.add_argument("--no-mask", action="store_true")
    g.add_argument("--mode", choices=MODES, default="full")
    g.add_argument("--out", default="out.ppm")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval", help="identity and context proxies on a heldout manifest")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--mode", choices=MODES, default="full")
    e.add_argument("--sx", type=float, default=DEFAULT_IDENTITY_SCALE)
    e.add_argument("--tau", type=float, default=DEFAULT_MASK_THRESHOLD)
    e.add_argument("--no-mask", action="store_true")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of a registered component")
    c.add_argument("--component", required=True, help="component name or 'all'")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONTRACT
    try:
        return args.func(args)
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractError, ShapeError, CheckpointError, PPMError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())

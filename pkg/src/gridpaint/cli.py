"""Command-line pipeline: make-data, build-vocab, pretrain, sample, eval,
ablate, and a gan-demo that prints every generator/discriminator loss on a
seeded pair of feature stacks.

Exit codes: 0 success, 2 usage/config error, 3 missing or mismatched
artifact, 4 numeric failure. GRIDPAINT_THREADS caps ablation workers.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from .evalpipe import cmd_ablate, cmd_eval, cmd_sample
from .experiment import (
    ArtifactError,
    ConfigError,
    cmd_build_vocab,
    cmd_make_data,
    cmd_pretrain,
    load_config,
)
from .ganlosses import (
    GanLossParts,
    LossWeights,
    acgan_loss,
    feature_match_loss,
    hinge_d,
    hinge_g,
    total_losses,
)
from .pretrain import NumericError
from .samplers import SamplerSchedule
from .tensor import Tensor

_STRATEGY_NAMES = {
    "tlbr": "tlbr",
    "random": "random",
    "easy-first": "easy_first",
    "mask-predict": "mask_predict",
}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="gridpaint",
        description="Text-to-grid generation pipeline on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("make-data", "build-vocab", "pretrain", "sample", "eval",
                 "ablate"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment JSON")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out", help="override the output directory")
        if name in ("sample", "eval", "ablate"):
            p.add_argument("--strategy", choices=sorted(_STRATEGY_NAMES))
            p.add_argument("--k-iters", type=int, dest="k_iters")
            p.add_argument("--temperature", type=float)
    demo = sub.add_parser("gan-demo")
    demo.add_argument("--seed", type=int, default=0)
    return parser


def _apply_overrides(cfg, args):
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out_dir=args.out)
    sampler = cfg.sampler
    if getattr(args, "strategy", None) is not None:
        sampler = replace(sampler, strategy=_STRATEGY_NAMES[args.strategy])
    if getattr(args, "k_iters", None) is not None:
        sampler = replace(sampler, k_iters=args.k_iters)
    if getattr(args, "temperature", None) is not None:
        sampler = replace(sampler, temperature=args.temperature)
    if sampler is not cfg.sampler:
        cfg = replace(cfg, sampler=sampler)
    return cfg


def _gan_demo(seed: int):
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n = 4
    d_fake = Tensor(rng.normal(-0.5, 1.0, 8).astype(np.float32))
    d_real = Tensor(rng.normal(0.5, 1.0, 8).astype(np.float32))
    k = 8
    ids = rng.integers(0, k, (n, n))
    logits_fake = Tensor(rng.normal(0, 1, (n, n, k)).astype(np.float32))
    logits_real = Tensor(rng.normal(0, 1, (n, n, k)).astype(np.float32))
    stacks = []
    for side in range(2):
        stack = [Tensor(rng.normal(0, 0.3, (8 >> i, 8 >> i, 4)).astype(np.float32))
                 for i in range(3)]
        stacks.append(stack)
    parts = GanLossParts(
        adv_g=hinge_g(d_fake),
        adv_d=hinge_d(d_fake, d_real),
        acgan=acgan_loss(logits_fake, logits_real, ids),
        fm=feature_match_loss(stacks[0], stacks[1]),
        fm_e=feature_match_loss(stacks[1], stacks[0]),
    )
    weights = LossWeights()
    l_g, l_d = total_losses(parts, weights)
    print(f"hinge_g            = {float(parts.adv_g.data):.6f}")
    print(f"hinge_d            = {float(parts.adv_d.data):.6f}")
    print(f"acgan              = {float(parts.acgan.data):.6f}")
    print(f"feature_match      = {float(parts.fm.data):.6f}")
    print(f"feature_match(E)   = {float(parts.fm_e.data):.6f}")
    print(f"weights            = ({weights.adv}, {weights.acgan}, "
          f"{weights.fm}, {weights.fm_e})")
    print(f"total generator    = {float(l_g.data):.6f}")
    print(f"total discriminator= {float(l_d.data):.6f}")


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command == "gan-demo":
        _gan_demo(args.seed)
        return 0
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "make-data":
            counts = cmd_make_data(cfg)
            print(f"wrote {counts['train']} train / {counts['eval']} eval "
                  f"records to {cfg.out_dir}/dataset")
        elif args.command == "build-vocab":
            info = cmd_build_vocab(cfg)
            print(f"codebook k={info['k']} inertia={info['inertia']:.6f} "
                  f"purity={info['purity']:.4f}")
        elif args.command == "pretrain":
            info = cmd_pretrain(cfg)
            print(f"trained {info['steps']} steps; "
                  f"final image-task loss {info['final_image_loss']}")
        elif args.command == "sample":
            paths = cmd_sample(cfg)
            print(f"wrote {len(paths)} samples under {cfg.out_dir}/samples")
        elif args.command == "eval":
            report = cmd_eval(cfg)
            print(json.dumps(report, indent=2, sort_keys=True))
        else:
            rows = cmd_ablate(cfg)
            for row in rows:
                print(f"{row['row']:40s} acc={row['acc_mean']:.3f} "
                      f"+-{row['acc_std']:.3f}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 2
    except ArtifactError as e:
        print(f"artifact error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())

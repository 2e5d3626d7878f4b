"""Fit a single corrupted phantom stack for a few hundred steps and print the loss curve."""

import argparse

import numpy as np

from vamos_octa.corruption import CorruptionConfig
from vamos_octa.loss import LossConfig
from vamos_octa.network import ModelConfig, TrainConfig, build_model, corrupted_sample, overfit
from vamos_octa.volume import PhantomConfig, generate_phantom


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--target", type=int, default=32)
    args = ap.parse_args()

    v = generate_phantom(PhantomConfig(), args.seed)
    stack = corrupted_sample(v, args.target, 9, CorruptionConfig(), np.random.default_rng(args.seed))
    target = v.data[args.target]
    hist = overfit(build_model(ModelConfig()), stack[None], target[None], LossConfig(),
                   steps=args.steps, tc=TrainConfig(deterministic=True))
    for i in range(0, args.steps, max(1, args.steps // 15)):
        print(f"step {i:>4}  total {hist[i].total:9.4f}  wmse {hist[i].wmse:9.4f}")
    print(f"final {hist[-1].total:.4f} = {hist[-1].total / hist[0].total:.2%} of initial")


if __name__ == "__main__":
    main()

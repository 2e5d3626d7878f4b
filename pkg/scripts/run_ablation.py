"""Loss ablation on synthetic phantoms: wMSE vs wMSE+axial vs full VAMOS.

    python scripts/run_ablation.py --steps 1500 --fold 0 --out results/ablation.json

Prints the pooled en face MIP metrics of each variant next to the unrestored
(corrupted) baseline and writes them as JSON.
"""

import argparse
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from vamos_octa.experiments import ABLATIONS, AblationConfig, run_ablation
from vamos_octa.network import TrainConfig, set_deterministic

COLUMNS = ("mip_l1", "mip_mie", "mip_ssim", "mip_ncc", "mip_psnr")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=1500, help="optimizer steps per variant")
    ap.add_argument("--fold", type=int, default=0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--events", type=int, default=6, help="motion events per test mask")
    ap.add_argument("--variants", nargs="+", default=list(ABLATIONS))
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    set_deterministic(True)

    cfg = AblationConfig(train=TrainConfig(epochs=10_000, max_steps=args.steps, seed=args.seed),
                         fold=args.fold, seed=args.seed, test_events=args.events,
                         variants=tuple(args.variants))
    cfg = replace(cfg, model=replace(cfg.model, seed=args.seed))

    def progress(step, bd):
        if step % 250 == 0:
            logging.info("step %d total %.4f wmse %.4f", step, bd.total, bd.wmse)

    t0 = time.time()
    result = run_ablation(cfg, progress=progress)
    rows = {"corrupted": result["corrupted"], **result["variants"]}
    print(f"{'variant':<12}" + "".join(f"{c:>12}" for c in COLUMNS))
    for name, row in rows.items():
        print(f"{name:<12}" + "".join(f"{row[c]:>12.5f}" for c in COLUMNS))
    print(f"total {time.time() - t0:.0f}s")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps({"split": result["split"], "steps": args.steps, "metrics": rows},
                                       indent=2, default=str) + "\n")


if __name__ == "__main__":
    main()

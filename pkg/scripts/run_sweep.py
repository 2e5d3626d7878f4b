"""MIE versus corruption block length for a trained checkpoint.

    python scripts/run_sweep.py --checkpoint runs/vamos/checkpoint.vck --volume data/phantom_00.octav

Writes ``sweep.csv`` (block_length, mie_corrupted, mie_restored) and prints a
small text chart; the same numbers come out of ``vamos-octa sweep``.
"""

import argparse
import csv
from pathlib import Path

from vamos_octa.experiments import severity_sweep
from vamos_octa.network import load_checkpoint, set_deterministic
from vamos_octa.volume import load_volume


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--volume", required=True)
    ap.add_argument("--lengths", type=int, nargs="+", default=list(range(1, 11)))
    ap.add_argument("--out", type=Path, default=Path("sweep.csv"))
    args = ap.parse_args()
    set_deterministic(True)

    model, _ = load_checkpoint(args.checkpoint)
    rows = severity_sweep(model, load_volume(args.volume), args.lengths)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)

    top = max(r["mie_corrupted"] for r in rows) or 1.0
    for r in rows:
        bar_c = "#" * round(40 * r["mie_corrupted"] / top)
        bar_r = "=" * round(40 * r["mie_restored"] / top)
        print(f"L={r['block_length']:>2}  corrupted {bar_c:<40} {r['mie_corrupted']:.4f}")
        print(f"      restored  {bar_r:<40} {r['mie_restored']:.4f}")


if __name__ == "__main__":
    main()

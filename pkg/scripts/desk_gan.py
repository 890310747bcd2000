"""Train the desk-scale GAN on phantom masses and print its health checks.

    python3 scripts/desk_gan.py [--config configs/desk.toml] [--out out/desk_gan]
"""

import argparse
import csv
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from ganaug import cli
from ganaug.data import Label
from ganaug.gan import checkerboard_score, memorization_distance, synthesize
from ganaug.models import load_checkpoint
from ganaug.storage import load_patch_directory, tile_grid, write_pgm

REPO = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(REPO / "configs" / "desk.toml"))
    ap.add_argument("--out", default="out/desk_gan")
    ap.add_argument("--samples", type=int, default=256)
    args = ap.parse_args()

    out = Path(args.out)
    data = out / "phantom"
    if cli.main(["phantom", "--config", args.config, "--out", str(data)]):
        return 1
    t0 = time.perf_counter()
    if cli.main(["train-gan", "--config", args.config, "--data", str(data), "--out", str(out / "gan"), "--sample-every", "50"]):
        return 1
    minutes = (time.perf_counter() - t0) / 60

    with open(out / "gan" / "train_log.csv", newline="") as fh:
        tail = list(csv.DictReader(fh))[-10:]
    reals = load_patch_directory(data).with_label(Label.MASS)
    synth = synthesize(load_checkpoint(out / "gan" / "generator.ckpt"), args.samples, seed=0)
    write_pgm(out / "synthetic_grid.pgm", tile_grid(synth.pixels()))
    write_pgm(out / "real_grid.pgm", tile_grid(reals.pixels()))
    mem = memorization_distance(synth, reals)

    print(f"training time         {minutes:.1f} min")
    print(f"D(x), last 10 epochs  {statistics.fmean(float(r['d_real_mean']) for r in tail):.3f}")
    print(f"D(G(z)), last 10      {statistics.fmean(float(r['d_fake_mean']) for r in tail):.3f}")
    print(f"checkerboard median   {np.median([checkerboard_score(p) for p in synth]):.2e}")
    print(f"memorization min/mean {mem.min:.3f} / {mem.mean:.3f}")
    print(f"grids                 {out / 'synthetic_grid.pgm'}, {out / 'real_grid.pgm'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

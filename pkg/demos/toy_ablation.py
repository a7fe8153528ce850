"""Synthetic-data ablation on the toy forward task.

Trains a semi-supervised B-C CycleGAN and an A-B CycleGAN, synthesizes
long/short video pairs from procedural moving scenes, then trains the
forward model with and without those clips using a small slice of real
static clips.

    python demos/toy_ablation.py --fractions 0.02 0.1 --out ablation.csv
"""

import argparse

from sidgan import toybench
from sidgan.experiments import plot_ablation, write_ablation_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fractions", type=float, nargs="+", default=[0.02])
    ap.add_argument("--bc-epochs", type=int, default=200)
    ap.add_argument("--out", default="toy_ablation.csv")
    args = ap.parse_args()

    bc = toybench.bc_recovery(10.0, toybench.BcSetup(epochs=args.bc_epochs))
    print(f"G_BC: {bc.psnr:.2f} dB vs analytic mapping")
    setup = toybench.AblationSetup()
    ab = toybench.train_toy_ab(setup)

    rows = []
    for f in args.fractions:
        rows += toybench.ablation_direction(ab.g_ab, bc.bundle.g_bc, toybench.AblationSetup(fraction=f))
    for r in rows:
        print(f"{r['fraction']:5.2f} {r['arm']:>10}  n_real={r['n_real']:3d}  psnr={r['psnr']:6.2f}  ssim={r['ssim']:.3f}")
    write_ablation_csv(args.out, rows)
    plot_ablation(args.out.rsplit(".", 1)[0] + ".png", rows)


if __name__ == "__main__":
    main()

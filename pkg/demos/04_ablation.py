"""Noise-schedule and sampling ablation at desk scale.

Trains one model per (final mask ratio, seed); the AS on/off cells reuse the same weights.
About an hour per seed on one core with the defaults.

    python3 demos/04_ablation.py [--seeds 3] [--steps 800] [--out ablation.csv]
"""
import argparse

from pianodiff import trainer as TR
from pianodiff.synthdata import Corpus, CorpusConfig

ap = argparse.ArgumentParser()
ap.add_argument("--seeds", type=int, default=3)
ap.add_argument("--steps", type=int)
ap.add_argument("--out", default="ablation.csv")
args = ap.parse_args()

extra = {"max_steps": args.steps} if args.steps else {}
grid = [TR.desk_config(gamma_bar_final=0.9, as_sampling=True, **extra),
        TR.desk_config(gamma_bar_final=0.9, as_sampling=False, **extra),
        TR.desk_config(gamma_bar_final=1.0, **extra)]
rows = TR.ablate(grid, Corpus(CorpusConfig()), seeds=tuple(range(args.seeds)), csv_path=args.out)

print(f"{'gamma_bar':>9s} {'AS':>4s}  {'F1':>15s}  {'F1 offsets':>10s}  status")
for r in rows:
    print(f"{r['gamma_bar_final']:9.1f} {'on' if r['as_sampling'] else 'off':>4s}  "
          f"{r['mean_f1']:.4f} +- {r['std_f1']:.4f}  {r['mean_f1_offsets']:10.4f}  {r['status']}")
print(f"table written to {args.out}")

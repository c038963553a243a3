"""Train the desk-scale model on the synthetic corpus, then transcribe the held-out pieces.

Takes about ten minutes on one core at the default step count.

    python3 demos/03_train_and_transcribe.py [--steps 800] [--seed 0] [--out runs/desk]
"""
import argparse
import time

from pianodiff import trainer as TR
from pianodiff.schedule import ScheduleKind
from pianodiff.synthdata import Corpus, CorpusConfig

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int)
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--out", default="runs/desk")
args = ap.parse_args()

corpus = Corpus(CorpusConfig())
cfg = TR.desk_config(seed=args.seed, **({"max_steps": args.steps} if args.steps else {}))
print(f"config {cfg.config_hash()}: {cfg.max_steps} steps, hidden {cfg.denoiser.hidden_dim}, "
      f"{cfg.denoiser.num_blocks} blocks, encoder {cfg.encoder_init}")

t = time.perf_counter()
res = TR.train(cfg, corpus, args.out)
print(f"trained in {time.perf_counter() - t:.0f}s, checkpoint {res.checkpoint}")
for row in res.log[::max(1, len(res.log) // 8)]:
    print(f"  step {row['step']:5d}  l_vlb {row['l_vlb']:.4f}  l_aux {row['l_aux']:.4f}  lr {row['lr']:.2e}")

test = corpus.split("test")
for kind in (ScheduleKind.ABSORBING_INFERENCE, ScheduleKind.TRAIN_REPLACE):
    t = time.perf_counter()
    r = TR.evaluate(res.model, test, cfg, kind, seed=args.seed)
    print(f"{kind.value:20s} F1 {r.f1:.4f}  with offsets {r.f1_offsets:.4f}  ({time.perf_counter() - t:.0f}s)")

# reload from disk and transcribe one piece
model, cfg2 = TR.load_model(res.checkpoint)
roll, notes = TR.transcribe(model, test[0].features, cfg2, seed=0)
print(f"piece {test[0].index}: {len(notes)} notes transcribed, {len(test[0].notes)} in the reference")

"""Command line front end.

Verbs::

    schedule inspect   noise schedule as CSV
    diffuse corrupt    forward-corrupt a note file at one step
    diffuse sample     run the reverse chain (oracle or checkpoint denoiser)
    data synth         write a synthetic corpus
    train              train a model on a corpus
    transcribe         sample notes for one feature dump or corpus piece
    eval               score estimated note files against references
    ablate             train and score a grid of configurations

Exit codes: 0 ok, 2 configuration error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import diffusion as D
from . import kvtext
from .checkpoint import CheckpointError
from .denoiser import ConfigError
from .encoder import FeatureGrid
from .metrics import NoteMatchConfig, evaluate_corpus
from .pianoroll import (DEFAULT_HOP_S, InvalidRollError, MultiStateRoll, decode_notes, encode_roll,
                        read_notes_csv, render_roll, write_notes_csv)
from .schedule import ScheduleError, ScheduleKind, build_schedule
from .synthdata import Corpus, CorpusConfig, CorpusError, read_corpus, write_corpus
from .trainer import (NumericalAbort, TrainConfig, ablate, desk_config, load_model, train,
                      transcribe)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _on_off(text: str) -> bool:
    low = text.lower()
    if low not in ("on", "off", "true", "false", "1", "0"):
        raise argparse.ArgumentTypeError(f"expected on|off, got {text!r}")
    return low in ("on", "true", "1")


def _kind(as_sampling: bool) -> ScheduleKind:
    return ScheduleKind.ABSORBING_INFERENCE if as_sampling else ScheduleKind.TRAIN_REPLACE


def _writer(path):
    if path in (None, "-"):
        return csv.writer(sys.stdout), None
    f = open(path, "w", newline="")
    return csv.writer(f), f


# ---------------------------------------------------------------- schedule


def cmd_schedule_inspect(args) -> int:
    s = build_schedule(args.steps, args.gamma_bar_final)
    if args.as_sampling:
        s = D.resolve_schedule(s, ScheduleKind.ABSORBING_INFERENCE)
    w, f = _writer(args.out)
    w.writerow(("tau", "alpha_bar", "beta_bar", "gamma_bar", "alpha", "beta", "gamma"))
    for row in s.rows():
        if args.tau is None or row[0] == args.tau:
            w.writerow((row[0], *(f"{v:.12g}" for v in row[1:])))
    if f:
        f.close()
    return EXIT_OK


# ---------------------------------------------------------------- diffuse


def _roll_from_notes(path, frames, hop):
    return encode_roll(read_notes_csv(path), hop, frames)


def cmd_diffuse_corrupt(args) -> int:
    s = D.resolve_schedule(build_schedule(args.steps, args.gamma_bar_final), _kind(args.as_sampling))
    roll = _roll_from_notes(args.notes, args.frames, args.hop)
    gen = torch.Generator().manual_seed(args.seed)
    y = D.forward_corrupt(torch.as_tensor(roll.states), args.tau, s, gen).states.numpy()
    w, f = _writer(args.out)
    w.writerow(("state", "count", "fraction"))
    for k in range(s.num_states):
        n = int((y == k).sum())
        w.writerow((k, n, f"{n / y.size:.6f}"))
    if f:
        f.close()
    if args.states_out:
        np.savetxt(args.states_out, y, fmt="%d", delimiter=",")
    return EXIT_OK


def cmd_diffuse_sample(args) -> int:
    s = build_schedule(args.steps, args.gamma_bar_final)
    gen = torch.Generator().manual_seed(args.seed)
    traj: list = []
    if args.checkpoint:
        model, cfg = load_model(args.checkpoint)
        cfg = replace(cfg, diffusion_steps=args.steps, gamma_bar_final=args.gamma_bar_final)
        grid = FeatureGrid.from_bytes(Path(args.features).read_bytes())
        roll, notes = transcribe(model, grid, cfg, _kind(args.as_sampling), args.seed, traj, args.hop)
    else:
        truth = torch.as_tensor(_roll_from_notes(args.notes, args.frames, args.hop).states)
        oracle = torch.nn.functional.one_hot(truth, 5).double()
        states = D.sample(lambda y, tau, c: oracle, oracle, s, _kind(args.as_sampling), gen,
                          shape=tuple(truth.shape), trajectory=traj)
        roll = MultiStateRoll(states.numpy(), args.hop)
        notes = decode_notes(roll)
    if args.trajectory:
        write_trajectory(args.trajectory, traj, s.mask_index)
    if args.out_notes:
        write_notes_csv(args.out_notes, notes)
    if args.image:
        render_roll(roll, args.image)
    print(f"{len(notes)} notes")
    return EXIT_OK


def write_trajectory(path, traj, mask_index: int) -> None:
    """One row per step: the masked fraction and the fraction changed by that step."""
    w, f = _writer(path)
    w.writerow(("tau", "masked_fraction", "changed_fraction"))
    prev = None
    for tau, y in traj:
        y = y.numpy() if hasattr(y, "numpy") else np.asarray(y)
        changed = 0.0 if prev is None else float((y != prev).mean())
        w.writerow((tau, f"{float((y == mask_index).mean()):.6f}", f"{changed:.6f}"))
        prev = y
    if f:
        f.close()


# ---------------------------------------------------------------- data


def _corpus_config(args) -> CorpusConfig:
    d = CorpusConfig().to_dict()
    if args.config:
        d.update(kvtext.load(args.config))
    for key, attr in (("num_pieces", "num_pieces"), ("seed", "seed"), ("frames", "frames"),
                      ("density", "density"), ("render.noise_sigma", "noise_sigma")):
        v = getattr(args, attr, None)
        if v is not None:
            d[key] = v
    d.update(_overrides(args.set))
    return CorpusConfig.from_dict(d)


def cmd_data_synth(args) -> int:
    cfg = _corpus_config(args)
    manifest = write_corpus(cfg, args.out)
    if args.dump_features:
        corpus = Corpus(cfg)
        for i in range(cfg.num_pieces):
            Path(args.out, f"piece_{i:05d}.f32").write_bytes(corpus.piece(i).features.to_bytes())
    print(f"wrote {cfg.num_pieces} pieces to {args.out} (hash {manifest['config_hash'][:12]})")
    return EXIT_OK


# ---------------------------------------------------------------- train / transcribe


def _overrides(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = kvtext.parse_value(v)
    return out


def _train_config(args) -> TrainConfig:
    base = desk_config() if args.preset == "desk" else TrainConfig()
    d = base.to_dict()
    if args.config:
        d.update(kvtext.load(args.config))
    direct = {"max_steps": args.max_steps, "seed": args.seed, "gamma_bar_final": args.gamma_bar_final,
              "as_sampling": args.as_sampling, "encoder_init": args.encoder_init}
    d.update({k: v for k, v in direct.items() if v is not None})
    if args.conditioning is not None:
        d["cross_attention"] = args.conditioning == "cross"
        d["denoiser.cross_attention"] = d["cross_attention"]
    d.update(_overrides(args.set))
    return TrainConfig.from_dict(d)


def _load_corpus(path) -> Corpus:
    return read_corpus(path) if path else Corpus(CorpusConfig())


def cmd_train(args) -> int:
    cfg = _train_config(args)
    result = train(cfg, _load_corpus(args.corpus), args.out, resume=args.resume)
    last = result.log[-1] if result.log else {}
    print(f"trained {result.step} steps; final total loss {last.get('total', float('nan')):.6g}; "
          f"checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_transcribe(args) -> int:
    model, cfg = load_model(args.checkpoint)
    if args.as_sampling is not None:
        cfg = replace(cfg, as_sampling=args.as_sampling)
    if args.features:
        grid = FeatureGrid.from_bytes(Path(args.features).read_bytes())
        hop = args.hop
    else:
        corpus = read_corpus(args.corpus)
        piece = corpus.piece(args.piece)
        grid, hop = piece.features, corpus.cfg.hop_s
    traj: list = []
    roll, notes = transcribe(model, grid, cfg, seed=args.seed, trajectory=traj, hop_s=hop)
    write_notes_csv(args.out, notes)
    if args.image:
        render_roll(roll, args.image)
    if args.trajectory:
        write_trajectory(args.trajectory, traj, 5)
    print(f"{len(notes)} notes -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- eval / ablate


def cmd_eval(args) -> int:
    ref_dir, est_dir = Path(args.ref_dir), Path(args.est_dir)
    names = sorted(p.name for p in ref_dir.glob("*.csv"))
    if not names:
        raise ConfigError(f"no reference CSVs in {ref_dir}")
    pairs = []
    for name in names:
        est = est_dir / name
        pairs.append((read_notes_csv(ref_dir / name), read_notes_csv(est) if est.exists() else []))
    score = evaluate_corpus(pairs, NoteMatchConfig(use_offsets=args.offsets))
    w, f = _writer(args.out)
    w.writerow(("piece", "P", "R", "F1"))
    for name, s in zip(names, score.pieces):
        w.writerow((Path(name).stem, f"{s.precision:.6f}", f"{s.recall:.6f}", f"{s.f1:.6f}"))
    w.writerow(("mean", f"{score.precision:.6f}", f"{score.recall:.6f}", f"{score.f1:.6f}"))
    if f:
        f.close()
    return EXIT_OK


def _split_list(text, cast):
    return [cast(t) for t in text.split(",") if t.strip()]


def cmd_ablate(args) -> int:
    base = _train_config(args)
    grid = []
    for g, a, cond, enc in itertools.product(
            _split_list(args.gamma_bar_finals, float), _split_list(args.as_sampling_values, _on_off),
            _split_list(args.conditionings, str), _split_list(args.encoder_inits, str)):
        if cond not in ("cross", "in-context"):
            raise ConfigError(f"conditioning must be cross or in-context, got {cond!r}")
        grid.append(replace(base, gamma_bar_final=g, as_sampling=a, cross_attention=cond == "cross",
                            encoder_init=enc))
    rows = ablate(grid, _load_corpus(args.corpus), seeds=tuple(range(args.seeds)), csv_path=args.out)
    for r in rows:
        print(f"{r['config_hash']} gamma_bar={r['gamma_bar_final']} as={r['as_sampling']} "
              f"{r['conditioning']} {r['encoder_init']}: F1 {r['mean_f1']:.4f} +- {r['std_f1']:.4f} "
              f"({r['status']})")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _schedule_flags(p, steps=100):
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--gamma-bar-final", type=float, default=0.9)


def _train_flags(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", choices=("desk", "full"), default="desk")
    p.add_argument("--corpus", help="corpus directory (default: generate the default corpus)")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--gamma-bar-final", type=float)
    p.add_argument("--as-sampling", type=_on_off)
    p.add_argument("--conditioning", choices=("cross", "in-context"))
    p.add_argument("--encoder-init", choices=("pretrained", "scratch"))
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pianodiff", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sch = sub.add_parser("schedule").add_subparsers(dest="action", required=True)
    p = sch.add_parser("inspect", help="print the schedule as CSV")
    _schedule_flags(p)
    p.add_argument("--tau", type=int)
    p.add_argument("--as-sampling", type=_on_off, default=False,
                   help="show the absorbing view used for sampling")
    p.add_argument("--out")
    p.set_defaults(func=cmd_schedule_inspect)

    dif = sub.add_parser("diffuse").add_subparsers(dest="action", required=True)
    p = dif.add_parser("corrupt", help="forward-corrupt a note file")
    _schedule_flags(p)
    p.add_argument("--notes", required=True)
    p.add_argument("--tau", type=int, required=True)
    p.add_argument("--frames", type=int)
    p.add_argument("--hop", type=float, default=DEFAULT_HOP_S)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--as-sampling", type=_on_off, default=False)
    p.add_argument("--out")
    p.add_argument("--states-out")
    p.set_defaults(func=cmd_diffuse_corrupt)
    p = dif.add_parser("sample", help="run the reverse chain")
    _schedule_flags(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--notes", help="ground-truth notes for an oracle denoiser")
    src.add_argument("--checkpoint")
    p.add_argument("--features", help="feature dump for --checkpoint")
    p.add_argument("--frames", type=int)
    p.add_argument("--hop", type=float, default=DEFAULT_HOP_S)
    p.add_argument("--as-sampling", type=_on_off, default=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trajectory")
    p.add_argument("--out-notes")
    p.add_argument("--image")
    p.set_defaults(func=cmd_diffuse_sample)

    dat = sub.add_parser("data").add_subparsers(dest="action", required=True)
    p = dat.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--num-pieces", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--density", type=float)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--dump-features", action="store_true")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_data_synth)

    p = sub.add_parser("train", help="train a model")
    _train_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transcribe", help="transcribe one piece")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--features")
    src.add_argument("--corpus")
    p.add_argument("--piece", type=int, default=0)
    p.add_argument("--hop", type=float, default=DEFAULT_HOP_S)
    p.add_argument("--as-sampling", type=_on_off)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--image")
    p.add_argument("--trajectory")
    p.set_defaults(func=cmd_transcribe)

    p = sub.add_parser("eval", help="score note files")
    p.add_argument("--ref-dir", required=True)
    p.add_argument("--est-dir", required=True)
    p.add_argument("--offsets", type=_on_off, default=False)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score a configuration grid")
    _train_flags(p)
    p.add_argument("--gamma-bar-finals", default="0.9,1.0")
    p.add_argument("--as-sampling-values", default="on,off")
    p.add_argument("--conditionings", default="cross")
    p.add_argument("--encoder-inits", default="pretrained")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ScheduleError, CorpusError, CheckpointError, InvalidRollError,
            D.DiffusionInputError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

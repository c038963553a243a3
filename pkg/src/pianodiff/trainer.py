"""Training, transcription, evaluation and ablation for the diffusion transcriber."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import diffusion as D
from . import kvtext
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .denoiser import ConfigError, Denoiser, DenoiserConfig, set_fast_attention
from .encoder import ConvEncoder, FeatureGrid, baseline_train_eval, cache_features
from .metrics import NoteMatchConfig, evaluate_corpus
from .pianoroll import MultiStateRoll, decode_notes
from .schedule import ScheduleKind, build_schedule
from .synthdata import Corpus

LOG_FIELDS = ("step", "l_vlb", "l_aux", "total", "lr", "valid_l_vlb")
ENCODER_INIT = ("scratch", "pretrained")


class NumericalAbort(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 4.5e-4
    betas: tuple = (0.9, 0.96)
    weight_decay: float = 0.01
    warmup_steps: int = 1000
    plateau_factor: float = 0.8
    plateau_patience: int = 2000
    eval_every: int = 200
    batch_size: int = 8
    max_steps: int = 2000
    crop_frames: int = 0            # 0 trains on whole pieces
    aux_weight: float = D.DEFAULT_AUX_WEIGHT
    diffusion_steps: int = 100
    gamma_bar_final: float = 0.9
    as_sampling: bool = True
    cross_attention: bool = True
    encoder_init: str = "scratch"
    baseline_steps: int = 300
    seed: int = 0
    dtype: str = "float32"
    fast_attention: bool = False
    checkpoint_every: int = 0
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr <= 0 or self.weight_decay < 0 or not 0 < self.plateau_factor <= 1:
            raise ConfigError("lr must be > 0, weight_decay >= 0, plateau_factor in (0, 1]")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if min(self.batch_size, self.diffusion_steps, self.eval_every, self.plateau_patience) < 1:
            raise ConfigError("batch_size, diffusion_steps, eval_every and plateau_patience must be >= 1")
        if self.max_steps < 0 or self.warmup_steps < 0 or self.crop_frames < 0:
            raise ConfigError("step counts must be >= 0")
        if self.encoder_init not in ENCODER_INIT:
            raise ConfigError(f"encoder_init must be one of {ENCODER_INIT}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if isinstance(self.denoiser, dict):
            self.denoiser = DenoiserConfig.from_dict(self.denoiser)
        if self.denoiser.cross_attention != self.cross_attention:
            self.denoiser = replace(self.denoiser, cross_attention=self.cross_attention)

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("denoiser")
        d.update({f"denoiser.{k}": v for k, v in self.denoiser.to_dict().items()})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)} - {"denoiser"}
        unknown = [k for k in d if k not in known and not k.startswith("denoiser.")]
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        den = {k.split(".", 1)[1]: v for k, v in d.items() if k.startswith("denoiser.")}
        if "dilations" in den and not isinstance(den["dilations"], tuple):
            den["dilations"] = (den["dilations"],)
        try:
            den_cfg = DenoiserConfig.from_dict({**DenoiserConfig().to_dict(), **den})
            return cls(denoiser=den_cfg, **{k: v for k, v in d.items() if k in known})
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def config_hash(self) -> str:
        return kvtext.content_hash(self.to_dict())[:12]


def desk_config(**overrides) -> TrainConfig:
    """Settings sized for a single CPU core and the default synthetic corpus."""
    den = DenoiserConfig(hidden_dim=32, num_blocks=4, dilations=(1, 2, 4, 8), lstm_hidden=32,
                         timestep_embed_dim=32, heads=2, ffn_mult=2)
    base = dict(lr=2e-3, warmup_steps=100, max_steps=800, crop_frames=32, eval_every=200,
                encoder_init="pretrained", baseline_steps=500,
                plateau_patience=2000, fast_attention=True, denoiser=den)
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------- model


class TranscriptionModel(nn.Module):
    """Trainable conv encoder over the feature grid plus the denoising decoder."""

    def __init__(self, den_cfg: DenoiserConfig, feature_channels: int = 16):
        super().__init__()
        self.encoder = ConvEncoder(feature_channels, 32, den_cfg.cond_channels)
        self.denoiser = Denoiser(den_cfg)

    def forward(self, y_tau, tau, features) -> torch.Tensor:
        return self.denoiser(y_tau, tau, self.encoder(features)).logits


class LRController:
    """Linear warmup, then multiply by ``factor`` whenever the monitored value stalls."""

    def __init__(self, base_lr: float, warmup: int, factor: float, patience: int):
        self.base_lr, self.warmup, self.factor, self.patience = base_lr, warmup, factor, patience
        self.scale = 1.0
        self.best = math.inf
        self.last_improvement = 0

    def lr(self, step: int) -> float:
        ramp = min(1.0, step / self.warmup) if self.warmup else 1.0
        return self.base_lr * ramp * self.scale

    def observe(self, step: int, value: float) -> None:
        if value < self.best:
            self.best, self.last_improvement = value, step
        elif step - self.last_improvement >= self.patience:
            self.scale *= self.factor
            self.last_improvement = step

    def state(self) -> dict:
        return {"scale": self.scale, "best": self.best, "last_improvement": self.last_improvement}

    def load_state(self, st: dict) -> None:
        self.scale, self.best, self.last_improvement = st["scale"], st["best"], int(st["last_improvement"])


def step_generator(seed: int, step: int, stream: int = 0) -> torch.Generator:
    """Independent generator per (seed, step): resuming never shifts the random stream."""
    state = np.random.SeedSequence([seed, step, stream]).generate_state(2, dtype=np.uint64)
    return torch.Generator().manual_seed(int(state[0] >> np.uint64(1)))


def _stack(pieces, dtype):
    feats = torch.as_tensor(np.stack([p.features.data for p in pieces])).to(dtype)
    rolls = torch.as_tensor(np.stack([p.roll.states for p in pieces]))
    return feats, rolls


@dataclass
class TrainResult:
    model: TranscriptionModel
    log: list
    step: int
    checkpoint: Path | None = None


class Trainer:
    def __init__(self, cfg: TrainConfig, corpus: Corpus, out_dir=None):
        self.cfg, self.corpus = cfg, corpus
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.schedule = build_schedule(cfg.diffusion_steps, cfg.gamma_bar_final)
        set_fast_attention(cfg.fast_attention)
        dtype = cfg.torch_dtype
        train = corpus.split("train")
        valid = corpus.split("valid") or train[:4]
        self.train_x, self.train_y = _stack(train, dtype)
        self.valid_x, self.valid_y = _stack(valid, dtype)
        C = self.train_x.shape[-1]
        torch.manual_seed(cfg.seed)
        self.model = TranscriptionModel(cfg.denoiser, C).to(dtype)
        if cfg.encoder_init == "pretrained":
            base = baseline_train_eval([(p.roll, p.features) for p in train], steps=cfg.baseline_steps,
                                       seed=cfg.seed, out_channels=cfg.denoiser.cond_channels)
            self.model.encoder.load_state_dict(base.model.encoder.to(dtype).state_dict())
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=cfg.lr, betas=cfg.betas,
                                           weight_decay=cfg.weight_decay)
        self.lr = LRController(cfg.lr, cfg.warmup_steps, cfg.plateau_factor, cfg.plateau_patience)
        self.step = 0
        self.log: list[dict] = []

    # -- one optimisation step
    def _batch(self, gen):
        cfg = self.cfg
        N, T = self.train_y.shape[:2]
        idx = torch.randint(0, N, (cfg.batch_size,), generator=gen)
        x, y = self.train_x[idx], self.train_y[idx]
        crop = cfg.crop_frames
        if crop and crop < T:
            start = torch.randint(0, T - crop + 1, (cfg.batch_size,), generator=gen)
            rows = start[:, None] + torch.arange(crop)
            b = torch.arange(cfg.batch_size)[:, None]
            x, y = x[b, rows], y[b, rows]
        return x, y

    def losses(self, x, y0, gen) -> D.LossBreakdown:
        tau = torch.randint(1, self.schedule.steps + 1, (y0.shape[0],), generator=gen)
        y_tau = D.forward_corrupt(y0, tau, self.schedule, gen)
        p0 = torch.softmax(self.model(y_tau.states, tau, x), dim=-1)
        return D.loss(p0, y0, y_tau, self.schedule, self.cfg.aux_weight, tau)

    def train_step(self) -> dict:
        self.step += 1
        gen = step_generator(self.cfg.seed, self.step)
        self.model.train()
        x, y = self._batch(gen)
        lr = self.lr.lr(self.step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        out = self.losses(x, y, gen)
        if not torch.isfinite(out.total):
            self._abort(f"non-finite loss at step {self.step}")
        self.optimizer.zero_grad()
        out.total.backward()
        self.optimizer.step()
        row = {"step": self.step, "l_vlb": out.l_vlb.item(), "l_aux": out.l_aux.item(),
               "total": out.total.item(), "lr": lr, "valid_l_vlb": ""}
        if self.step % self.cfg.eval_every == 0:
            row["valid_l_vlb"] = self.validation_vlb()
            self.lr.observe(self.step, row["valid_l_vlb"])
        if self.out_dir is not None and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
            self.save(self.out_dir / f"step_{self.step:06d}.ckpt")
        self.log.append(row)
        return row

    def validation_vlb(self) -> float:
        self.model.eval()
        with torch.no_grad():
            out = self.losses(self.valid_x, self.valid_y, step_generator(self.cfg.seed, 0, stream=1))
        return out.l_vlb.item()

    def _abort(self, why: str):
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.save(self.out_dir / "diagnostic.ckpt")
        raise NumericalAbort(why)

    def run(self, steps: int | None = None) -> TrainResult:
        target = self.cfg.max_steps if steps is None else self.step + steps
        while self.step < target:
            self.train_step()
        path = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            path = self.out_dir / "final.ckpt"
            self.save(path)
            write_log(self.out_dir / "train_log.csv", self.log, self.cfg)
        return TrainResult(self.model, self.log, self.step, path)

    # -- persistence
    def state_tensors(self) -> dict[str, torch.Tensor]:
        tensors = {f"model/{k}": v for k, v in self.model.state_dict().items()}
        names = {id(p): n for n, p in self.model.named_parameters()}
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                for k, v in self.optimizer.state.get(p, {}).items():
                    tensors[f"optim/{names[id(p)]}/{k}"] = torch.as_tensor(v)
        meta = {"step": self.step, **self.lr.state()}
        tensors.update({f"meta/{k}": torch.tensor(float(v), dtype=torch.float64) for k, v in meta.items()})
        return tensors

    def save(self, path) -> None:
        save_checkpoint(path, self.state_tensors(), self.cfg)

    def restore(self, path) -> None:
        tensors = load_tensors(path)
        _load_model_tensors(self.model, tensors)
        params = dict(self.model.named_parameters())
        for key, v in tensors.items():
            if key.startswith("optim/"):
                name, slot = key[len("optim/"):].rsplit("/", 1)
                self.optimizer.state[params[name]][slot] = v.clone()
        meta = {k[len("meta/"):]: v.item() for k, v in tensors.items() if k.startswith("meta/")}
        self.step = int(meta.pop("step"))
        self.lr.load_state(meta)


def save_checkpoint(path, tensors: dict, cfg: TrainConfig) -> None:
    path = Path(path)
    save_tensors(path, tensors)
    kvtext.dump(config_path(path), cfg.to_dict())


def config_path(ckpt) -> Path:
    ckpt = Path(ckpt)
    return ckpt.with_name(ckpt.name + ".cfg")


def _load_model_tensors(model: nn.Module, tensors: dict) -> None:
    state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    own = model.state_dict()
    if set(state) != set(own):
        raise CheckpointError("checkpoint tensors do not match the model layout")
    for k, v in state.items():
        if v.shape != own[k].shape:
            raise CheckpointError(f"{k}: checkpoint shape {tuple(v.shape)} vs model {tuple(own[k].shape)}")
    model.load_state_dict(state)


def load_model(path, feature_channels: int = 16) -> tuple[TranscriptionModel, TrainConfig]:
    cfg_file = config_path(path)
    if not cfg_file.exists():
        raise CheckpointError(f"missing config next to {path}")
    cfg = TrainConfig.from_dict(kvtext.load(cfg_file))
    tensors = load_tensors(path)
    enc_w = tensors.get("model/encoder.conv1.weight")
    if enc_w is not None:
        feature_channels = enc_w.shape[1]
    model = TranscriptionModel(cfg.denoiser, feature_channels).to(cfg.torch_dtype)
    _load_model_tensors(model, tensors)
    return model, cfg


def write_log(path, rows: list, cfg: TrainConfig) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# plateau patience {cfg.plateau_patience} steps on validation l_vlb every "
                f"{cfg.eval_every} steps; patience is scaled down for desk-size corpora\n")
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS)
        w.writeheader()
        w.writerows(rows)


def train(cfg: TrainConfig, corpus: Corpus, out_dir=None, resume=None) -> TrainResult:
    trainer = Trainer(cfg, corpus, out_dir)
    if resume is not None:
        trainer.restore(resume)
    return trainer.run()


# ---------------------------------------------------------------- inference


def transcribe(model: TranscriptionModel, features, cfg: TrainConfig, kind: ScheduleKind | None = None,
               seed: int = 0, trajectory: list | None = None, hop_s: float = 0.02):
    """Sample rolls for one grid ``(T, 88, C)`` or a batch; returns ``(rolls, notes)``."""
    if kind is None:
        kind = ScheduleKind.ABSORBING_INFERENCE if cfg.as_sampling else ScheduleKind.TRAIN_REPLACE
    x = features.data if isinstance(features, FeatureGrid) else features
    x = torch.as_tensor(x)
    single = x.dim() == 3
    if single:
        x = x[None]
    expected = getattr(getattr(model.encoder, "conv1", None), "in_channels", x.shape[-1])
    if x.shape[-1] != expected:
        raise ConfigError(f"model expects {expected} feature channels, got {x.shape[-1]}")
    dtype = next(model.parameters()).dtype
    schedule = build_schedule(cfg.diffusion_steps, cfg.gamma_bar_final)
    model.eval()
    with torch.no_grad():
        cond = cache_features(model.encoder, x.to(dtype))
        gen = torch.Generator().manual_seed(seed)
        states = D.sample(lambda y, tau, c: model.denoiser(y, tau, c).probabilities,
                          cond, schedule, kind, gen, trajectory=trajectory)
    rolls = [MultiStateRoll(s.numpy(), hop_s) for s in states]
    notes = [decode_notes(r) for r in rolls]
    return (rolls[0], notes[0]) if single else (rolls, notes)


@dataclass
class EvalResult:
    f1: float
    f1_offsets: float
    precision: float
    recall: float


def evaluate(model, pieces, cfg: TrainConfig, kind: ScheduleKind | None = None, seed: int = 0,
             batch_size: int = 20) -> EvalResult:
    pairs = []
    for i in range(0, len(pieces), batch_size):
        chunk = pieces[i:i + batch_size]
        feats = np.stack([p.features.data for p in chunk])
        _, notes = transcribe(model, feats, cfg, kind, seed + i, hop_s=chunk[0].roll.hop_s)
        pairs.extend((p.notes, n) for p, n in zip(chunk, notes))
    on = evaluate_corpus(pairs, NoteMatchConfig())
    off = evaluate_corpus(pairs, NoteMatchConfig(use_offsets=True))
    return EvalResult(on.f1, off.f1, on.precision, on.recall)


# ---------------------------------------------------------------- ablation

ABLATION_FIELDS = ("config_hash", "gamma_bar_final", "as_sampling", "conditioning", "encoder_init",
                   "seeds", "mean_f1", "std_f1", "mean_f1_offsets", "status")


def ablate(grid: list[TrainConfig], corpus: Corpus, seeds=(0, 1, 2), csv_path=None,
           split: str = "test") -> list[dict]:
    """Train and score every grid cell over ``seeds``.

    Cells that differ only in the sampling kind share their trained models.
    A failing cell is reported with its error instead of stopping the sweep.
    """
    trained: dict = {}
    pieces = corpus.split(split)
    rows = []
    for cfg in grid:
        f1s, f1o, status = [], [], "ok"
        try:
            for seed in seeds:
                run = replace(cfg, seed=seed)
                key = replace(run, as_sampling=True).config_hash()
                if key not in trained:
                    trained[key] = train(run, corpus).model
                r = evaluate(trained[key], pieces, run)
                f1s.append(r.f1)
                f1o.append(r.f1_offsets)
        except Exception as exc:  # noqa: BLE001 - reported per cell
            status = f"failed: {type(exc).__name__}: {exc}"
        rows.append({
            "config_hash": cfg.config_hash(), "gamma_bar_final": cfg.gamma_bar_final,
            "as_sampling": cfg.as_sampling,
            "conditioning": "cross" if cfg.cross_attention else "in-context",
            "encoder_init": cfg.encoder_init, "seeds": len(f1s),
            "mean_f1": float(np.mean(f1s)) if f1s else float("nan"),
            "std_f1": float(np.std(f1s)) if f1s else float("nan"),
            "mean_f1_offsets": float(np.mean(f1o)) if f1o else float("nan"),
            "status": status,
        })
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=ABLATION_FIELDS)
            w.writeheader()
            w.writerows(rows)
    return rows

"""Conditioning features for the denoiser.

Audio is replaced by a synthetic renderer that turns a clean roll into a
``frames x 88 x C`` grid with the same local structure an acoustic model's
penultimate features have: note activity, onset impulses, and energy
leaking onto harmonically related pitch rows, plus Gaussian noise.  A small
trainable conv stack sits on top and is finetuned with the decoder.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.ndimage import convolve1d

from .metrics import NoteMatchConfig, evaluate_corpus
from .pianoroll import MultiStateRoll, NoteState, decode_notes

FEATURE_MAGIC_HEADER = struct.Struct("<III")


@dataclass(frozen=True)
class SynthRenderConfig:
    channels: int = 16
    harmonic_offsets: tuple = (12, 19, 24)
    harmonic_weights: tuple = (0.5, 0.35, 0.25)
    temporal_blur: int = 1
    noise_sigma: float = 0.25

    def __post_init__(self):
        if len(self.harmonic_offsets) != len(self.harmonic_weights):
            raise ValueError("one weight per harmonic offset")
        if any(w < 0 for w in self.harmonic_weights) or self.noise_sigma < 0:
            raise ValueError("weights and noise_sigma must be non-negative")
        if self.channels < 2 + len(self.harmonic_offsets):
            raise ValueError("need room for activity, onset and one channel per harmonic")
        if self.temporal_blur < 0:
            raise ValueError("temporal_blur must be >= 0")


@dataclass
class FeatureGrid:
    data: np.ndarray  # (frames, 88, channels) float32
    provenance: str = "synthetic-render"

    @property
    def channels(self) -> int:
        return self.data.shape[-1]

    def to_bytes(self) -> bytes:
        T, P, C = self.data.shape
        return FEATURE_MAGIC_HEADER.pack(T, P, C) + self.data.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes, provenance: str = "synthetic-render") -> "FeatureGrid":
        T, P, C = FEATURE_MAGIC_HEADER.unpack_from(raw)
        body = raw[FEATURE_MAGIC_HEADER.size:]
        if len(body) != 4 * T * P * C:
            raise ValueError(f"feature dump holds {len(body)} bytes, header promises {4 * T * P * C}")
        return cls(np.frombuffer(body, dtype="<f4").reshape(T, P, C).astype(np.float32), provenance)


def _shift_up(x: np.ndarray, offset: int) -> np.ndarray:
    """Move energy from pitch row p to row p + offset."""
    out = np.zeros_like(x)
    if offset < x.shape[1]:
        out[:, offset:] = x[:, :x.shape[1] - offset]
    return out


def render_features(roll: MultiStateRoll, cfg: SynthRenderConfig = SynthRenderConfig(),
                    rng: np.random.Generator | int | None = None) -> FeatureGrid:
    states = np.asarray(roll.states)
    if np.any(states == NoteState.MASK):
        raise ValueError("cannot render features for a roll with mask states")
    rng = np.random.default_rng(rng)
    active = np.isin(states, (NoteState.ONSET, NoteState.SUSTAIN, NoteState.REONSET)).astype(np.float64)
    onset = np.isin(states, (NoteState.ONSET, NoteState.REONSET)).astype(np.float64)
    r = cfg.temporal_blur
    if r:
        kernel = 1.0 - np.abs(np.arange(-r, r + 1)) / (r + 1)
        active = convolve1d(active, kernel / kernel.sum(), axis=0, mode="constant")

    T = states.shape[0]
    out = np.zeros((T, states.shape[1], cfg.channels))
    out[..., 0] = active
    out[..., 1] = onset
    for m, (h, w) in enumerate(zip(cfg.harmonic_offsets, cfg.harmonic_weights)):
        spill = w * _shift_up(active, h)
        out[..., 0] += spill
        out[..., 1] += w * _shift_up(onset, h)
        out[..., 2 + m] = spill
    if cfg.noise_sigma > 0:
        out += rng.normal(0.0, cfg.noise_sigma, size=out.shape)
    return FeatureGrid(out.astype(np.float32), "synthetic-render")


# ---------------------------------------------------------------- trainable encoder


class ConvEncoder(nn.Module):
    """Two 3x3 convolutions over the (frame, pitch) grid."""

    def __init__(self, in_channels: int = 16, mid_channels: int = 32, out_channels: int = 16):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, mid_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(mid_channels, out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            return self.forward(x[None])[0]
        h = x.permute(0, 3, 1, 2)
        h = self.conv2(F.gelu(self.conv1(h)))
        return h.permute(0, 2, 3, 1)


def conv_encoder_forward(features: FeatureGrid | torch.Tensor, params: ConvEncoder) -> torch.Tensor:
    x = features.data if isinstance(features, FeatureGrid) else features
    x = torch.as_tensor(x, dtype=params.conv1.weight.dtype)
    if x.shape[-1] != params.conv1.in_channels:
        raise ValueError(f"encoder expects {params.conv1.in_channels} channels, got {x.shape[-1]}")
    return params(x)


def cache_features(encoder: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Run the encoder once; the result is reused for every reverse step."""
    with torch.no_grad():
        return encoder(x).detach()


# ---------------------------------------------------------------- focal-loss baseline


def focal_loss(logits: torch.Tensor, target: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    logp = torch.log_softmax(logits, dim=-1)
    logp_t = torch.gather(logp, -1, target.unsqueeze(-1)).squeeze(-1)
    return (-(1 - logp_t.exp()) ** gamma * logp_t).mean()


class BaselineModel(nn.Module):
    """Conv encoder plus a per-pixel linear 5-way head."""

    def __init__(self, in_channels: int = 16, out_channels: int = 16):
        super().__init__()
        self.encoder = ConvEncoder(in_channels, 32, out_channels)
        self.head = nn.Linear(out_channels, 5)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x))


@dataclass
class BaselineResult:
    model: BaselineModel
    train_f1: float
    eval_f1: float
    eval_f1_offsets: float
    losses: list = field(default_factory=list)


def predict_rolls(model: BaselineModel, features: torch.Tensor, hop_s: float) -> list[MultiStateRoll]:
    with torch.no_grad():
        pred = model(features).argmax(-1)
    return [MultiStateRoll(p.numpy(), hop_s) for p in pred]


def _f1(model, rolls, feats, use_offsets=False):
    if not rolls:
        return float("nan")
    est = predict_rolls(model, feats, rolls[0].hop_s)
    cfg = NoteMatchConfig(use_offsets=use_offsets)
    return evaluate_corpus([(decode_notes(r), decode_notes(e)) for r, e in zip(rolls, est)], cfg).f1


def baseline_train_eval(train: list, evaluation: list | None = None, focal_gamma: float = 2.0,
                        steps: int = 300, batch_size: int = 8, lr: float = 3e-3, seed: int = 0,
                        out_channels: int = 16) -> BaselineResult:
    """Fit the focal-loss baseline on ``(roll, FeatureGrid)`` pairs and score it."""
    if not train:
        raise ValueError("empty training set")
    torch.manual_seed(seed)
    rolls = [r for r, _ in train]
    feats = torch.as_tensor(np.stack([f.data for _, f in train]))
    targets = torch.as_tensor(np.stack([r.states for r in rolls]))
    model = BaselineModel(feats.shape[-1], out_channels)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, betas=(0.9, 0.96))
    gen = torch.Generator().manual_seed(seed)
    losses = []
    for _ in range(steps):
        idx = torch.randint(0, len(train), (min(batch_size, len(train)),), generator=gen)
        loss = focal_loss(model(feats[idx]), targets[idx], focal_gamma)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    evaluation = evaluation or []
    eval_rolls = [r for r, _ in evaluation]
    eval_feats = torch.as_tensor(np.stack([f.data for _, f in evaluation])) if evaluation else None
    return BaselineResult(model, _f1(model, rolls, feats), _f1(model, eval_rolls, eval_feats),
                          _f1(model, eval_rolls, eval_feats, use_offsets=True), losses)

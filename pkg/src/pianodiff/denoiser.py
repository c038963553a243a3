"""Denoising decoder: predicts clean note states from a corrupted roll.

Pipeline per call::

    state embedding (6 -> 4)  [+ conditioning channels when in-context]
    pitchwise BiLSTM (weights shared over the 88 pitch columns)
    N x block:  AdaLN -> NA2D self  -> AdaLN -> NA2D cross (conditioning)
                -> AdaLN -> feed-forward, each with a residual connection
    LayerNorm -> linear head -> logits over the 5 label states

All grids are laid out ``(batch, frames, pitches, channels)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.checkpoint import checkpoint

from . import tensorcore as tc


class ConfigError(ValueError):
    pass


@dataclass
class DenoiserConfig:
    embed_dim: int = 4
    hidden_dim: int = 48
    num_blocks: int = 8
    window: int = 3
    dilations: tuple = (1, 2, 4, 8, 1, 2, 4, 8)
    in_states: int = 6
    out_states: int = 5
    timestep_embed_dim: int = 48
    cross_attention: bool = True
    cond_channels: int = 16
    lstm_hidden: int = 128
    heads: int = 4
    ffn_mult: int = 2

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if len(self.dilations) != self.num_blocks:
            raise ConfigError(f"{self.num_blocks} blocks need {self.num_blocks} dilations, "
                              f"got {len(self.dilations)}")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"window must be odd and >= 1, got {self.window}")
        if self.hidden_dim % self.heads:
            raise ConfigError("hidden_dim must be divisible by heads")
        if self.timestep_embed_dim % 2:
            raise ConfigError("timestep_embed_dim must be even")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------- timestep


def sinusoidal_embedding(tau: torch.Tensor, dim: int) -> torch.Tensor:
    """Half sin, half cos over a geometric frequency ladder with base 10000."""
    tau = torch.as_tensor(tau, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = tau[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TimestepEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, tau) -> torch.Tensor:
        e = sinusoidal_embedding(tau, self.dim).to(self.fc1.weight.dtype)
        return self.fc2(F.silu(self.fc1(e)))


# ---------------------------------------------------------------- BiLSTM


class PitchwiseBiLSTM(nn.Module):
    """Bidirectional LSTM along time, run independently for every pitch column."""

    def __init__(self, in_dim: int, lstm_hidden: int, out_dim: int):
        super().__init__()
        self.lstm = nn.LSTM(in_dim, lstm_hidden, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * lstm_hidden, out_dim)
        with torch.no_grad():
            for name, p in self.lstm.named_parameters():
                if name.startswith("bias"):
                    p.zero_()
                    if name.startswith("bias_ih"):
                        p[lstm_hidden:2 * lstm_hidden] = 1.0  # forget gate

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, P, D = x.shape
        seq = x.permute(0, 2, 1, 3).reshape(B * P, T, D)
        out, _ = self.lstm(seq)
        out = out.reshape(B, P, T, -1).permute(0, 2, 1, 3)
        return self.proj(out)


# ---------------------------------------------------------------- neighborhood attention


def effective_dilation(length: int, window: int, dilation: int) -> int:
    """Largest dilation <= ``dilation`` that still fits a full window on this axis."""
    if window > length:
        raise ConfigError(f"axis of length {length} is shorter than window {window}")
    d = dilation
    while d > 1 and length // d < window:
        d -= 1
    return d


def neighborhood_indices(length: int, window: int, dilation: int) -> torch.Tensor:
    """Clamped dilated neighborhoods along one axis, shape ``(length, window)``.

    Positions sharing a residue modulo the dilation form a sub-sequence; each
    position takes the window of that sub-sequence centred on it, shifted
    inward at the borders so it always holds exactly ``window`` members.
    """
    d = effective_dilation(length, window, dilation)
    out = torch.empty(length, window, dtype=torch.long)
    for i in range(length):
        r, local = i % d, i // d
        n = (length - r + d - 1) // d
        start = min(max(local - window // 2, 0), n - window)
        out[i] = r + d * (start + torch.arange(window))
    return out


def neighborhood_2d(T: int, P: int, window: int, dilation: int) -> torch.Tensor:
    """Flat key indices ``(T * P, window**2)`` into a row-major ``T x P`` grid."""
    rows = neighborhood_indices(T, window, dilation)
    cols = neighborhood_indices(P, window, dilation)
    flat = rows[:, None, :, None] * P + cols[None, :, None, :]
    return flat.reshape(T * P, window * window)


def _neighborhood_core(q, k, v, idx):
    k = k[:, idx]  # (B, TP, w*w, heads, dh)
    v = v[:, idx]
    logits = (q.unsqueeze(2) * k).sum(-1) / math.sqrt(q.shape[-1])
    attn = torch.softmax(logits, dim=2)
    return (attn.unsqueeze(-1) * v).sum(2)


def _separable_core(q, k, v, rows, cols):
    """Same result as the flat core for ``(B, T, P, heads, dh)`` inputs.

    Gathers along time, then pitch, so every read is a contiguous slab.  Much
    faster when compiled for inference, slower in backward.
    """
    B, T, P, nh, dh = q.shape
    w = rows.shape[1]
    kk = k[:, rows][:, :, :, cols]  # (B, T, w, P, w, heads, dh)
    vv = v[:, rows][:, :, :, cols]
    logits = (q[:, :, None, :, None] * kk).sum(-1) / math.sqrt(dh)
    logits = logits.permute(0, 1, 3, 5, 2, 4).reshape(B, T, P, nh, w * w)
    attn = torch.softmax(logits, -1).reshape(B, T, P, nh, w, w).permute(0, 1, 4, 2, 5, 3)
    return (attn.unsqueeze(-1) * vv).sum((2, 4))


_compiled_core = None
_compiled_separable = None
_use_compiled = False


def set_fast_attention(enabled: bool = True) -> None:
    """Route float32 attention through a ``torch.compile``d core.

    The fused kernel avoids materialising the gathered neighbourhoods and is
    several times faster on CPU.  Float64 calls always stay eager.
    """
    global _compiled_core, _compiled_separable, _use_compiled
    if enabled and _compiled_core is None:
        _compiled_core = torch.compile(_neighborhood_core, dynamic=False)
        _compiled_separable = torch.compile(_separable_core, dynamic=False)
    _use_compiled = enabled


def fast_attention_enabled() -> bool:
    return _use_compiled


class NeighborhoodAttention2D(nn.Module):
    """Dilated 2D neighborhood attention; cross-attention when ``kv`` differs from ``q``."""

    def __init__(self, dim: int, window: int, dilation: int, heads: int = 1):
        super().__init__()
        self.dim, self.window, self.dilation, self.heads = dim, window, dilation, heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self._index_cache: dict = {}

    def indices(self, T: int, P: int) -> torch.Tensor:
        key = (T, P)
        if key not in self._index_cache:
            self._index_cache[key] = neighborhood_2d(T, P, self.window, self.dilation)
        return self._index_cache[key]

    def axis_indices(self, T: int, P: int) -> tuple[torch.Tensor, torch.Tensor]:
        key = ("axes", T, P)
        if key not in self._index_cache:
            self._index_cache[key] = (neighborhood_indices(T, self.window, self.dilation),
                                      neighborhood_indices(P, self.window, self.dilation))
        return self._index_cache[key]

    def attend(self, query: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        """Attention output before the output projection and residual."""
        if query.shape[:3] != kv.shape[:3]:
            raise tc.ShapeError("na2d", query.shape, kv.shape)
        B, T, P, H = query.shape
        nh, dh = self.heads, H // self.heads
        q = self.q(query).reshape(B, T, P, nh, dh)
        k = self.k(kv).reshape(B, T, P, nh, dh)
        v = self.v(kv).reshape(B, T, P, nh, dh)
        if _use_compiled and q.dtype == torch.float32 and not torch.is_grad_enabled():
            return _compiled_separable(q, k, v, *self.axis_indices(T, P)).reshape(B, T, P, H)
        idx = self.indices(T, P)
        q, k, v = (t.reshape(B, T * P, nh, dh) for t in (q, k, v))
        if _use_compiled and q.dtype == torch.float32:
            out = _compiled_core(q, k, v, idx)
        elif torch.is_grad_enabled() and self.training:
            # the gathered neighborhoods are window**2 times the grid; rebuild them
            # during backward instead of keeping them alive
            out = checkpoint(_neighborhood_core, q, k, v, idx, use_reentrant=False)
        else:
            out = _neighborhood_core(q, k, v, idx)
        return out.reshape(B, T, P, H)

    def forward(self, query: torch.Tensor, kv: torch.Tensor | None = None,
                residual: torch.Tensor | None = None) -> torch.Tensor:
        kv = query if kv is None else kv
        residual = query if residual is None else residual
        return residual + self.o(self.attend(query, kv))


def na2d(query_grid, key_value_grid, window, dilation, params: NeighborhoodAttention2D):
    if (params.window, params.dilation) != (window, dilation):
        raise ConfigError("window/dilation do not match the parameter set")
    return params(query_grid, key_value_grid)


# ---------------------------------------------------------------- AdaLN and block


class AdaLN(nn.Module):
    def __init__(self, dim: int, temb_dim: int, eps: float = tc.DEFAULT_LN_EPS):
        super().__init__()
        self.eps = eps
        self.proj = nn.Linear(temb_dim, 2 * dim)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        s, b = self.proj(temb).chunk(2, dim=-1)
        s = s[:, None, None, :]
        b = b[:, None, None, :]
        return F.layer_norm(x, x.shape[-1:], eps=self.eps) * (1 + s) + b


class NABlock(nn.Module):
    def __init__(self, cfg: DenoiserConfig, dilation: int):
        super().__init__()
        H, E = cfg.hidden_dim, cfg.timestep_embed_dim
        self.norm_self = AdaLN(H, E)
        self.self_attn = NeighborhoodAttention2D(H, cfg.window, dilation, cfg.heads)
        self.cross = cfg.cross_attention
        if self.cross:
            self.norm_cross = AdaLN(H, E)
            self.cross_attn = NeighborhoodAttention2D(H, cfg.window, dilation, cfg.heads)
        self.norm_ff = AdaLN(H, E)
        self.ff = nn.Sequential(nn.Linear(H, cfg.ffn_mult * H), nn.GELU(),
                                nn.Linear(cfg.ffn_mult * H, H))

    def forward(self, x, temb, cond=None):
        h = self.norm_self(x, temb)
        x = self.self_attn(h, h, residual=x)
        if self.cross:
            h = self.norm_cross(x, temb)
            x = self.cross_attn(h, cond, residual=x)
        return x + self.ff(self.norm_ff(x, temb))


# ---------------------------------------------------------------- decoder


@dataclass
class DenoiserOutput:
    logits: torch.Tensor

    @property
    def probabilities(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        H = cfg.hidden_dim
        self.embed = nn.Embedding(cfg.in_states, cfg.embed_dim)
        lstm_in = cfg.embed_dim + (0 if cfg.cross_attention else cfg.cond_channels)
        self.bilstm = PitchwiseBiLSTM(lstm_in, cfg.lstm_hidden, H)
        self.temb = TimestepEmbedding(cfg.timestep_embed_dim)
        if cfg.cross_attention:
            self.cond_proj = nn.Linear(cfg.cond_channels, H)
        self.blocks = nn.ModuleList(NABlock(cfg, d) for d in cfg.dilations)
        self.out_norm = nn.LayerNorm(H)
        self.head = nn.Linear(H, cfg.out_states)

    def forward(self, y_tau: torch.Tensor, tau, cond: torch.Tensor) -> DenoiserOutput:
        if y_tau.dim() == 2:
            return DenoiserOutput(self.forward(y_tau[None], tau, cond[None]).logits[0])
        if cond.shape[:3] != y_tau.shape:
            raise tc.ShapeError("denoiser", y_tau.shape, cond.shape)
        B = y_tau.shape[0]
        tau = torch.as_tensor(tau).reshape(-1).expand(B)
        x = self.embed(y_tau)
        if not self.cfg.cross_attention:
            x = torch.cat([x, cond.to(x.dtype)], dim=-1)
        x = self.bilstm(x)
        temb = self.temb(tau)
        c = self.cond_proj(cond.to(x.dtype)) if self.cfg.cross_attention else None
        for block in self.blocks:
            x = block(x, temb, c)
        return DenoiserOutput(self.head(self.out_norm(x)))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

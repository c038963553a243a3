"""Forward corruption, exact posteriors, reverse sampling and the training loss.

State grids are integer tensors whose last two axes are (frames, pitches);
any leading axes are batch axes.  Clean-state predictions ``p0_hat`` carry a
trailing axis of size K = 5, noisy-state distributions one of size 6.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .schedule import (MaskReplaceSchedule, ScheduleKind, absorbing_view,
                       cumulative_apply, cumulative_columns, transition_matrix)

LOG_FLOOR = 1e-30
DEFAULT_AUX_WEIGHT = 0.0005


class DiffusionInputError(ValueError):
    pass


@dataclass
class CorruptedRoll:
    states: torch.Tensor
    tau: int | torch.Tensor


@dataclass
class LossBreakdown:
    l_vlb: torch.Tensor
    l_aux: torch.Tensor
    lam: float
    total: torch.Tensor
    prior_kl: torch.Tensor
    clamped: bool = False


# ---------------------------------------------------------------- tables


@functools.lru_cache(maxsize=64)
def _tables(s: MaskReplaceSchedule):
    """Cumulative columns ``[tau, j, :] = Q_bar_tau e_j`` and the posterior table.

    ``post[tau, k, j, i] = q(y_{tau-1} = i | y_tau = k, y_0 = j)`` for tau >= 1.
    Forward-impossible pairs (denominator < 1e-30) keep state k.
    """
    S, K = s.num_states, s.num_label_states
    cum = np.stack([cumulative_columns(s, t) for t in range(s.steps + 1)])  # [tau, r, c]
    step = np.stack([np.eye(S)] + [transition_matrix(s, t) for t in range(1, s.steps + 1)])
    post = np.zeros((s.steps + 1, S, K, S))
    for t in range(1, s.steps + 1):
        # num[k, j, i] = Q_t[k, i] * Q_bar_{t-1}[i, j]
        num = step[t][:, None, :] * cum[t - 1][:, :K].T[None, :, :]
        den = cum[t][:, :K]
        ok = den >= 1e-30
        post[t] = np.where(ok[..., None], num / np.where(ok, den, 1.0)[..., None], 0.0)
        for k in range(S):
            for j in range(K):
                if not ok[k, j]:
                    post[t, k, j, k] = 1.0
    return np.transpose(cum, (0, 2, 1)).copy(), post


@functools.lru_cache(maxsize=64)
def _torch_tables(s: MaskReplaceSchedule, dtype: torch.dtype):
    cum, post = _tables(s)
    return torch.as_tensor(cum, dtype=dtype), torch.as_tensor(post, dtype=dtype)


def posterior(s: MaskReplaceSchedule, tau: int, y_tau: int, y0: int) -> np.ndarray:
    """``q(y_{tau-1} | y_tau, y_0)`` as a 6-vector."""
    tau = s.check_step(tau, lo=1)
    if not 0 <= int(y0) < s.num_label_states:
        raise DiffusionInputError(f"clean state must be a label state, got {y0}")
    k, j = int(y_tau), int(y0)
    if not 0 <= k < s.num_states:
        raise DiffusionInputError(f"state out of range: {k}")
    num = transition_matrix(s, tau)[k] * cumulative_apply(s, tau - 1, j)
    den = cumulative_apply(s, tau, j)[k]
    if den < 1e-30:
        return np.eye(s.num_states)[k]
    return num / den


def resolve_schedule(s: MaskReplaceSchedule, kind) -> MaskReplaceSchedule:
    kind = ScheduleKind(kind)
    if kind is ScheduleKind.ABSORBING_INFERENCE and s.kind is ScheduleKind.TRAIN_REPLACE:
        return absorbing_view(s)
    if kind is ScheduleKind.TRAIN_REPLACE and s.kind is not ScheduleKind.TRAIN_REPLACE:
        raise DiffusionInputError("cannot recover a replace schedule from an absorbing one")
    return s


# ---------------------------------------------------------------- sampling helpers


def _as_states(y) -> torch.Tensor:
    if hasattr(y, "states"):
        y = y.states
    return torch.as_tensor(np.asarray(y) if not torch.is_tensor(y) else y).long()


def _tau_index(tau, states: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or per-batch-element step to ``states.shape``."""
    tau = torch.as_tensor(tau, dtype=torch.long)
    while tau.dim() < states.dim():
        tau = tau.unsqueeze(-1)
    return tau.expand_as(states)


def _categorical(probs: torch.Tensor, generator: torch.Generator | None) -> torch.Tensor:
    u = torch.rand(probs.shape[:-1], generator=generator, dtype=torch.float64)
    cdf = torch.cumsum(probs.double(), dim=-1)
    cdf = cdf / cdf[..., -1:]
    idx = (cdf < u.unsqueeze(-1)).sum(-1)
    return idx.clamp_max(probs.shape[-1] - 1)


def forward_corrupt(y0, tau, s: MaskReplaceSchedule,
                    generator: torch.Generator | None = None) -> CorruptedRoll:
    """Sample ``y_tau ~ Q_bar_tau y_0`` independently per pixel."""
    states = _as_states(y0)
    if torch.any(states == s.mask_index) or torch.any(states < 0):
        raise DiffusionInputError("clean roll must not contain mask states")
    taus = _tau_index(tau, states)
    if torch.any(taus < 0) or torch.any(taus > s.steps):
        raise DiffusionInputError(f"step outside [0, {s.steps}]")
    cum, _ = _torch_tables(s, torch.float64)
    probs = cum[taus, states]
    out = _categorical(probs, generator)
    out = torch.where(taus == 0, states, out)
    return CorruptedRoll(out, tau)


def posterior_mixture(s: MaskReplaceSchedule, tau, y_tau: torch.Tensor,
                      p0_hat: torch.Tensor) -> torch.Tensor:
    """``sum_j q(y_{tau-1} | y_tau, j) p0_hat(j)`` per pixel, shape ``(..., 6)``."""
    _, post = _torch_tables(s, p0_hat.dtype)
    taus = _tau_index(tau, y_tau)
    table = post[taus, y_tau]  # (..., K, S)
    return torch.einsum("...j,...ji->...i", p0_hat, table)


def reverse_step(s: MaskReplaceSchedule, tau: int, y_tau, p0_hat: torch.Tensor,
                 generator: torch.Generator | None = None) -> CorruptedRoll:
    states = _as_states(y_tau)
    tau = s.check_step(int(tau), lo=1)
    if p0_hat.shape != states.shape + (s.num_label_states,):
        raise DiffusionInputError(f"p0_hat shape {tuple(p0_hat.shape)} does not match "
                                  f"{tuple(states.shape)} x {s.num_label_states}")
    if torch.any((p0_hat.sum(-1) - 1).abs() > 1e-6) or torch.any(p0_hat < 0):
        raise DiffusionInputError("p0_hat is not normalized over the label states")
    mix = posterior_mixture(s, tau, states, p0_hat.double())
    mix = mix / mix.sum(-1, keepdim=True)
    return CorruptedRoll(_categorical(mix, generator), tau - 1)


def prior_probs(s: MaskReplaceSchedule) -> np.ndarray:
    p = np.full(s.num_states, s.beta_bar[s.steps])
    p[s.mask_index] = s.gamma_bar[s.steps]
    p[: s.num_label_states] += s.alpha_bar[s.steps] / s.num_label_states
    return p / p.sum()


def prior_sample(s: MaskReplaceSchedule, shape, generator: torch.Generator | None = None
                 ) -> CorruptedRoll:
    probs = torch.as_tensor(prior_probs(s)).expand(*tuple(shape), s.num_states)
    return CorruptedRoll(_categorical(probs, generator), s.steps)


Denoiser = Callable[[torch.Tensor, int, object], torch.Tensor]


def sample(denoiser: Denoiser, features, s: MaskReplaceSchedule,
           kind=ScheduleKind.ABSORBING_INFERENCE, generator: torch.Generator | None = None,
           shape=None, trajectory: list | None = None) -> torch.Tensor:
    """Run the reverse chain from the prior down to a mask-free roll.

    ``denoiser(y_tau, tau, features)`` returns clean-state probabilities of
    shape ``y_tau.shape + (5,)``.  ``shape`` defaults to ``features.shape[:-1]``.
    With ``kind`` absorbing, the replace schedule ``s`` is swapped for its
    absorbing view, so revealed pixels are never changed again.  Pixels still
    masked after the last step take the argmax of the final prediction.
    ``trajectory``, when given, receives ``(tau, states)`` after every step.
    """
    s = resolve_schedule(s, kind)
    if shape is None:
        shape = tuple(features.shape[:-1])
    y = prior_sample(s, shape, generator).states
    if trajectory is not None:
        trajectory.append((s.steps, y.clone()))
    p0 = None
    for tau in range(s.steps, 0, -1):
        p0 = denoiser(y, tau, features)
        y = reverse_step(s, tau, y, p0.detach(), generator).states
        if trajectory is not None:
            trajectory.append((tau - 1, y.clone()))
    masked = y == s.mask_index
    if p0 is not None and torch.any(masked):
        y = torch.where(masked, p0.argmax(-1), y)
    return y


# ---------------------------------------------------------------- loss


def _xlogy_kl(q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    logq = torch.log(q.clamp_min(LOG_FLOOR))
    logp = torch.log(p.clamp_min(LOG_FLOOR))
    return torch.where(q > 0, q * (logq - logp), torch.zeros_like(q)).sum(-1)


def loss(p0_hat: torch.Tensor, y0, y_tau, s: MaskReplaceSchedule,
         lam: float = DEFAULT_AUX_WEIGHT, tau=None) -> LossBreakdown:
    """Variational bound term plus the weighted auxiliary denoising NLL.

    ``tau`` defaults to ``y_tau.tau``; it may be a per-batch-element tensor.
    For tau = 1 the bound term is the decoder NLL ``-log p(y_0 | y_1)``, which
    the general KL expression reduces to because the true posterior is one-hot.
    """
    if tau is None:
        tau = y_tau.tau
    y0 = _as_states(y0)
    yt = _as_states(y_tau)
    taus = _tau_index(tau, yt)
    if torch.any(taus < 1) or torch.any(taus > s.steps):
        raise DiffusionInputError("loss is defined for steps 1..T only")
    cum, post = _torch_tables(s, p0_hat.dtype)
    q_true = post[taus, yt, y0]
    p_model = posterior_mixture(s, taus, yt, p0_hat)
    l_vlb = _xlogy_kl(q_true, p_model).mean()

    p_true = torch.gather(p0_hat, -1, y0.unsqueeze(-1)).squeeze(-1)
    clamped = bool(torch.any(p_true < LOG_FLOOR))
    l_aux = -torch.log(p_true.clamp_min(LOG_FLOOR)).mean()

    with torch.no_grad():
        q_T = cum[s.steps][y0]
        prior = torch.as_tensor(prior_probs(s), dtype=p0_hat.dtype)
        prior_kl = _xlogy_kl(q_T, prior.expand_as(q_T)).mean().clamp_min(0)

    total = lam * l_aux + l_vlb
    return LossBreakdown(l_vlb, l_aux, lam, total, prior_kl, clamped)

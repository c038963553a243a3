"""Mask-and-replace diffusion schedules.

A schedule holds, for every diffusion step ``tau`` in ``0..steps``, the
cumulative corruption constants

    alpha_bar  probability that a label state is kept
    beta_bar   probability of being replaced by each of the K label states
    gamma_bar  probability of being masked

and the per-step constants ``alpha``, ``beta``, ``gamma`` whose products
reproduce them.  Index 0 of the per-step arrays holds the identity step
(1, 0, 0) so that every array can be indexed directly by ``tau``.

Matrices use the column-stochastic convention
``M[r, c] = P(state_tau = r | state_{tau-1} = c)`` with the mask state last.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .pianoroll import NUM_LABEL_STATES, NoteState

NUM_STATES = NUM_LABEL_STATES + 1
MASK = int(NoteState.MASK)


class ScheduleKind(enum.Enum):
    TRAIN_REPLACE = "train-replace"
    ABSORBING_INFERENCE = "absorbing-inference"


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MaskReplaceSchedule:
    steps: int
    num_label_states: int
    gamma_bar_final: float
    alpha_bar: np.ndarray
    beta_bar: np.ndarray
    gamma_bar: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    kind: ScheduleKind = ScheduleKind.TRAIN_REPLACE

    @property
    def num_states(self) -> int:
        return self.num_label_states + 1

    @property
    def mask_index(self) -> int:
        return self.num_label_states

    def check_step(self, tau: int, lo: int = 0) -> int:
        tau = int(tau)
        if not lo <= tau <= self.steps:
            raise ScheduleError(f"step {tau} outside [{lo}, {self.steps}]")
        return tau

    def rows(self):
        """Yield ``(tau, alpha_bar, beta_bar, gamma_bar, alpha, beta, gamma)``."""
        for tau in range(self.steps + 1):
            yield (tau, self.alpha_bar[tau], self.beta_bar[tau], self.gamma_bar[tau],
                   self.alpha[tau], self.beta[tau], self.gamma[tau])


def _per_step(alpha_bar, gamma_bar, K):
    steps = len(alpha_bar) - 1
    alpha = np.ones(steps + 1)
    gamma = np.zeros(steps + 1)
    for tau in range(1, steps + 1):
        # alpha_bar only reaches 0 at the final step, so the previous value is > 0
        alpha[tau] = alpha_bar[tau] / alpha_bar[tau - 1]
        keep_prev = 1.0 - gamma_bar[tau - 1]
        if keep_prev <= 0.0:
            gamma[tau] = 1.0
        else:
            gamma[tau] = 1.0 - (1.0 - gamma_bar[tau]) / keep_prev
    beta = (1.0 - alpha - gamma) / K
    beta[0] = 0.0
    # clip round-off below zero; exact zeros matter for the absorbing case
    beta = np.where(np.abs(beta) < 1e-15, 0.0, beta)
    return alpha, beta, gamma


def build_schedule(steps: int = 100, gamma_bar_final: float = 0.9,
                   K: int = NUM_LABEL_STATES) -> MaskReplaceSchedule:
    """Linear schedule: alpha_bar falls 1 -> 0, gamma_bar rises 0 -> gamma_bar_final."""
    if int(steps) != steps or steps < 1:
        raise ScheduleError(f"steps must be a positive integer, got {steps!r}")
    if not 0.0 < gamma_bar_final <= 1.0:
        raise ScheduleError(f"gamma_bar_final must lie in (0, 1], got {gamma_bar_final!r}")
    if int(K) != K or K < 2:
        raise ScheduleError(f"K must be an integer >= 2, got {K!r}")
    steps, K = int(steps), int(K)
    frac = np.arange(steps + 1, dtype=np.float64) / steps
    alpha_bar = 1.0 - frac
    gamma_bar = gamma_bar_final * frac
    beta_bar = (1.0 - alpha_bar - gamma_bar) / K
    beta_bar = np.where(np.abs(beta_bar) < 1e-15, 0.0, beta_bar)
    alpha, beta, gamma = _per_step(alpha_bar, gamma_bar, K)
    kind = ScheduleKind.TRAIN_REPLACE
    return MaskReplaceSchedule(steps, K, float(gamma_bar_final), alpha_bar, beta_bar,
                               gamma_bar, alpha, beta, gamma, kind)


def absorbing_view(s: MaskReplaceSchedule) -> MaskReplaceSchedule:
    """Same keep probabilities, but every corruption is a mask (beta = 0)."""
    gamma_bar = 1.0 - s.alpha_bar
    alpha = s.alpha.copy()
    gamma = np.zeros_like(alpha)
    gamma[1:] = 1.0 - alpha[1:]
    zeros = np.zeros_like(alpha)
    return replace(s, gamma_bar=gamma_bar, beta_bar=zeros.copy(), alpha=alpha,
                   beta=zeros, gamma=gamma, kind=ScheduleKind.ABSORBING_INFERENCE)


def transition_matrix(s: MaskReplaceSchedule, tau: int) -> np.ndarray:
    tau = s.check_step(tau, lo=1)
    K, m = s.num_label_states, s.mask_index
    Q = np.zeros((K + 1, K + 1))
    Q[:K, :K] = s.beta[tau]
    Q[np.arange(K), np.arange(K)] += s.alpha[tau]
    Q[m, :K] = s.gamma[tau]
    Q[m, m] = 1.0
    return Q


def cumulative_apply(s: MaskReplaceSchedule, tau: int, state: int) -> np.ndarray:
    """Closed-form ``Q_bar_tau @ e_state``."""
    tau = s.check_step(tau)
    K, m = s.num_label_states, s.mask_index
    out = np.zeros(K + 1)
    if int(state) == m:
        out[m] = 1.0
        return out
    out[:K] = s.beta_bar[tau]
    out[int(state)] += s.alpha_bar[tau]
    out[m] = s.gamma_bar[tau]
    return out


def cumulative_columns(s: MaskReplaceSchedule, tau: int) -> np.ndarray:
    """Closed-form ``Q_bar_tau`` assembled column by column."""
    return np.stack([cumulative_apply(s, tau, c) for c in range(s.num_states)], axis=1)


def cumulative_matrix(s: MaskReplaceSchedule, tau: int) -> np.ndarray:
    """Explicit left product ``Q_tau ... Q_1`` (identity at tau = 0)."""
    tau = s.check_step(tau)
    Q = np.eye(s.num_states)
    for i in range(1, tau + 1):
        Q = transition_matrix(s, i) @ Q
    return Q

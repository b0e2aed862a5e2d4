"""Noise schedules and the deterministic (sigma = 0) DDIM recurrences.

All functions are shape-generic: ``x`` may be a batch of images or of code
vectors.  A step ``t`` is either a scalar or a length-B integer array indexing
the leading axis.  ``alpha_bar[0] == 1`` denotes clean data.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

# predictor(x, t[B], z) -> noise estimate shaped like x
Predictor = Callable[[np.ndarray, np.ndarray, "np.ndarray | None"], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray        # beta[t - 1] = beta_t, t = 1..T
    alpha_bar: np.ndarray   # alpha_bar[t], t = 0..T

    @property
    def T(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        beta = np.asarray(betas, dtype=np.float64).reshape(-1)
        if beta.size == 0:
            raise ValueError("schedule needs at least one step")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every beta_t must lie strictly inside (0, 1)")
        ab = np.empty(beta.size + 1)
        ab[0] = 1.0
        for t in range(1, beta.size + 1):
            ab[t] = ab[t - 1] * (1.0 - beta[t - 1])
        beta.setflags(write=False)
        ab.setflags(write=False)
        return cls(beta, ab)

    def check_step(self, t) -> np.ndarray:
        arr = np.asarray(t)
        if arr.dtype.kind not in "iu":
            if not np.all(np.asarray(arr) == np.round(arr)):
                raise ValueError(f"steps must be integers, got {t!r}")
            arr = arr.astype(np.int64)
        if np.any(arr < 0) or np.any(arr > self.T):
            raise ValueError(f"step {t!r} outside [0, {self.T}]")
        return arr


def make_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02,
                  kind: str = "linear") -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule.from_betas(np.linspace(beta_min, beta_max, T, dtype=np.float64))


@dataclass(frozen=True)
class StepPlan:
    """Strictly increasing subset of 1..T visited by the sampler (descending) or encoder (ascending)."""

    steps: tuple[int, ...]

    def __post_init__(self):
        s = self.steps
        if not s or s[0] < 1 or any(b <= a for a, b in zip(s, s[1:])):
            raise ValueError(f"invalid step plan {s!r}: need strictly increasing steps >= 1")

    def validate(self, schedule: NoiseSchedule) -> None:
        if self.steps[-1] > schedule.T:
            raise ValueError(f"plan reaches step {self.steps[-1]} beyond T={schedule.T}")

    def descending_pairs(self) -> list[tuple[int, int]]:
        seq = (0,) + self.steps
        return [(seq[i], seq[i - 1]) for i in range(len(seq) - 1, 0, -1)]

    def ascending_pairs(self) -> list[tuple[int, int]]:
        seq = (0,) + self.steps
        return [(seq[i], seq[i + 1]) for i in range(len(seq) - 1)]


def make_plan(T: int, n_steps: int) -> StepPlan:
    """Evenly strided plan from 1 to T with ``n_steps`` entries (fewer if T is small)."""
    if n_steps < 1:
        raise ValueError("n_steps must be positive")
    if n_steps == 1:
        return StepPlan((T,))
    steps = np.unique(np.round(np.linspace(1, T, min(n_steps, T))).astype(int))
    return StepPlan(tuple(int(s) for s in steps))


def _coef(values: np.ndarray, t: np.ndarray, like: np.ndarray) -> np.ndarray:
    c = values[t]
    if np.ndim(c) == 0:
        return np.asarray(c, dtype=np.float64)
    return c.reshape((-1,) + (1,) * (like.ndim - 1))


def _cast(out: np.ndarray, like: np.ndarray) -> np.ndarray:
    return out.astype(like.dtype, copy=False) if like.dtype.kind == "f" else out


def forward_marginal(x0, t, eps, s: NoiseSchedule) -> np.ndarray:
    """Sample of q(x_t | x_0) for caller-supplied noise ``eps``."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match data shape {x0.shape}")
    t = s.check_step(t)
    ab = _coef(s.alpha_bar, t, x0)
    return _cast(np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, x0)


def forward_step(x_prev, t, eps, s: NoiseSchedule) -> np.ndarray:
    """One Markov step of q(x_t | x_{t-1})."""
    x_prev = np.asarray(x_prev)
    t = s.check_step(t)
    if np.any(t < 1):
        raise ValueError("forward_step needs t >= 1")
    b = _coef(s.beta, t - 1, x_prev)
    return _cast(np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * np.asarray(eps), x_prev)


def predict_x0(x_t, eps_hat, t, s: NoiseSchedule) -> np.ndarray:
    """Invert the marginal: (x_t - sqrt(1 - a_t) eps_hat) / sqrt(a_t)."""
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(eps_hat)
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"noise estimate shape {eps_hat.shape} does not match {x_t.shape}")
    t = s.check_step(t)
    ab = _coef(s.alpha_bar, t, x_t)
    return _cast((x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab), x_t)


def ddim_step(x_t, eps_hat, t, t_prev, s: NoiseSchedule, clip_x0: bool = False) -> np.ndarray:
    """Deterministic jump from level ``t`` to level ``t_prev`` (either direction is algebraically valid;
    the sampler requires ``t_prev < t``)."""
    t_arr, tp_arr = s.check_step(t), s.check_step(t_prev)
    if np.any(tp_arr >= t_arr):
        raise ValueError(f"ddim_step needs t_prev < t, got t={t}, t_prev={t_prev}")
    return _jump(x_t, eps_hat, t_arr, tp_arr, s, clip_x0)


def _jump(x_t, eps_hat, t, t_to, s: NoiseSchedule, clip_x0: bool) -> np.ndarray:
    x_t = np.asarray(x_t)
    x0 = predict_x0(x_t, eps_hat, t, s)
    if clip_x0:
        x0 = np.clip(x0, -1.0, 1.0)
    ab = _coef(s.alpha_bar, t_to, x_t)
    return _cast(np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps_hat), x_t)


def _predict(predictor: Predictor, x: np.ndarray, t: int, z) -> np.ndarray:
    tt = np.full(x.shape[0], t, dtype=np.int64)
    eps = np.asarray(predictor(x, tt, z))
    if eps.shape != x.shape:
        raise ValueError(f"predictor returned shape {eps.shape}, expected {x.shape}")
    return eps


def ddim_sample(x_T, predictor: Predictor, z, plan: StepPlan, s: NoiseSchedule,
                clip_x0: bool = False) -> np.ndarray:
    """Run the deterministic reverse chain from the top plan step down to clean data."""
    plan.validate(s)
    x = np.asarray(x_T)
    for t, t_prev in plan.descending_pairs():
        eps = _predict(predictor, x, t, z)
        x = _jump(x, eps, np.asarray(t), np.asarray(t_prev), s, clip_x0)
    return x


def ddim_encode(x0, predictor: Predictor, z, plan: StepPlan, s: NoiseSchedule) -> np.ndarray:
    """Run the same recurrence upward, mapping clean data to its noise map at the top plan step.

    The noise estimate for a jump is taken at the current level; the first jump
    leaves clean data, so the network is queried at level 1 there.
    """
    plan.validate(s)
    x = np.asarray(x0)
    for t, t_next in plan.ascending_pairs():
        eps = _predict(predictor, x, max(t, 1), z)
        x = _jump(x, eps, np.asarray(t), np.asarray(t_next), s, False)
    return x

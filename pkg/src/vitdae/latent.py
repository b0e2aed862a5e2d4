"""Skip-connected MLP diffusion model over normalized semantic codes."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .diffusion import NoiseSchedule, StepPlan, ddim_sample, forward_marginal
from .encoder import SemanticCode
from .nn import Adam, Linear, Module, sinusoidal_embedding
from .tensor import Tensor


@dataclass
class LatentConfig:
    code_dim: int = 64
    layers: int = 10
    width: int = 256
    time_dim: int = 64
    loss_norm: str = "l1"

    def __post_init__(self):
        if not 2 <= self.layers <= 20:
            raise ValueError(f"latent denoiser depth {self.layers} outside [2, 20]")
        if self.loss_norm not in ("l1", "l2"):
            raise ValueError(f"loss_norm must be 'l1' or 'l2', got {self.loss_norm!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class LatentDenoiser(Module):
    """Every layer sees [hidden, noisy code, time embedding]; the last layer maps back to d."""

    def __init__(self, cfg: LatentConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        side = cfg.code_dim + cfg.time_dim
        self.fcs = [Linear(side, cfg.width, rng, dtype)]
        for _ in range(cfg.layers - 2):
            self.fcs.append(Linear(cfg.width + side, cfg.width, rng, dtype))
        self.out = Linear(cfg.width + side, cfg.code_dim, rng, dtype, zero=True)

    def __call__(self, z_t, t) -> Tensor:
        dtype = self.out.w.dtype
        z = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=dtype))
        if z.ndim != 2 or z.shape[1] != self.cfg.code_dim:
            raise ValueError(f"latent denoiser expects (B, {self.cfg.code_dim}), got {z.shape}")
        t = np.broadcast_to(np.asarray(t), (z.shape[0],))
        side = T.concat([z, Tensor(sinusoidal_embedding(t, self.cfg.time_dim, dtype=dtype))], axis=1)
        h = T.silu(self.fcs[0](side))
        for fc in self.fcs[1:]:
            h = T.silu(fc(T.concat([h, side], axis=1)))
        return self.out(T.concat([h, side], axis=1))

    def predictor(self):
        def eps(x, t, _z=None):
            with T.no_grad():
                return self(x, t).data
        return eps


def _as_tensor(out, dtype) -> Tensor:
    return out if isinstance(out, Tensor) else Tensor(np.asarray(out, dtype=dtype))


def latent_loss_at(z: np.ndarray, t: np.ndarray, eps: np.ndarray,
                   eps_model: Callable, s: NoiseSchedule, norm: str = "l1") -> Tensor:
    """Mean per-entry error between predicted and true noise for fixed (z, t, eps).

    ``norm="l1"`` is the absolute error; ``"l2"`` the squared error.
    """
    z_t = forward_marginal(z, t, eps, s)
    pred = _as_tensor(eps_model(z_t, t), z.dtype)
    if pred.shape != z.shape:
        raise ValueError(f"latent model returned {pred.shape}, expected {z.shape}")
    diff = pred - Tensor(eps.astype(pred.dtype, copy=False))
    return (T.abs_(diff) if norm == "l1" else T.square(diff)).mean()


def latent_loss(codes: SemanticCode, eps_model: Callable, s: NoiseSchedule,
                rng: np.random.Generator, norm: str = "l1") -> Tensor:
    """Noise-prediction loss with t ~ U{1..T} and eps ~ N(0, I) drawn per code."""
    if not codes.normalized:
        raise ValueError("latent loss expects normalized codes")
    z = np.atleast_2d(codes.values)
    t = rng.integers(1, s.T + 1, size=z.shape[0])
    eps = rng.standard_normal(z.shape).astype(z.dtype)
    return latent_loss_at(z, t, eps, eps_model, s, norm)


def sample_code(eps_model: Callable, plan: StepPlan, s: NoiseSchedule, seed: int, n: int = 1,
                code_dim: int | None = None) -> SemanticCode:
    """Deterministic DDIM draw of ``n`` normalized codes from seeded Gaussian starts."""
    d = code_dim if code_dim is not None else eps_model.cfg.code_dim
    if n == 0:
        return SemanticCode(np.zeros((0, d)), normalized=True)
    rng = np.random.default_rng(seed)
    z_T = rng.standard_normal((n, d))
    fn = eps_model.predictor() if isinstance(eps_model, LatentDenoiser) else eps_model
    if isinstance(eps_model, LatentDenoiser):
        z_T = z_T.astype(eps_model.out.w.dtype)
    return SemanticCode(ddim_sample(z_T, fn, None, plan, s, clip_x0=False), normalized=True)


def fit_latent(codes: SemanticCode, cfg: LatentConfig, s: NoiseSchedule, *, steps: int, batch_size: int,
               lr: float, seed: int, cosine_decay: bool = True, log_every: int = 0,
               logger=None) -> tuple[LatentDenoiser, list[float]]:
    """Train one denoiser on a fixed set of normalized codes; returns per-epoch mean losses.

    With ``cosine_decay`` the learning rate anneals from ``lr`` to zero over ``steps``.
    """
    if not codes.normalized:
        raise ValueError("latent training expects normalized codes")
    rng = np.random.default_rng(seed)
    model = LatentDenoiser(cfg, rng)
    data = np.asarray(codes.values, dtype=np.float32)
    opt = Adam(model.parameters(), lr=lr)
    n = len(data)
    batch_size = min(batch_size, n)
    per_epoch = max(1, int(np.ceil(n / batch_size)))
    history, running = [], []
    order = rng.permutation(n)
    pos = 0
    for step in range(steps):
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        if cosine_decay:
            opt.lr = 0.5 * lr * (1.0 + np.cos(np.pi * step / steps))
        loss = latent_loss(SemanticCode(data[idx], normalized=True), model, s, rng, cfg.loss_norm)
        opt.zero_grad()
        loss.backward()
        opt.step()
        running.append(loss.item())
        if len(running) == per_epoch or step == steps - 1:
            history.append(float(np.mean(running)))
            running = []
        if logger and log_every and (step + 1) % log_every == 0:
            logger.info("latent step %d/%d loss %.4f", step + 1, steps, history[-1] if history else loss.item())
    return model, history

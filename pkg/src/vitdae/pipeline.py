"""Two-stage training, generation and reconstruction, plus run bookkeeping.

Stage 1 trains the semantic encoder and the conditional noise predictor
jointly. Stage 2 freezes the encoder and fits latent denoisers to the
normalized codes of the training set (one per class by default). Generation
samples a code, draws a noise image and decodes; reconstruction inverts an
image to its noise map under its own code and decodes it back.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import Dataset
from .diffusion import NoiseSchedule, ddim_encode, ddim_sample, forward_marginal, make_plan, make_schedule
from .encoder import CodeStats, SemanticCode, ViTConfig, ViTEncoder, encode, normalize_code, unnormalize_code
from .latent import LatentConfig, LatentDenoiser, fit_latent, sample_code
from .nn import EMA, Adam
from .tensor import Tensor
from .unet import UNet, UNetConfig, predict_noise

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0          # epochs between intermediate checkpoints; 0 keeps only the final one
    data: str | None = None
    classes: list[str] | None = None
    resolution: int = 16
    timesteps: int = 1000
    ema_decay: float = 0.0             # 0 disables the parameter EMA
    zero_condition: bool = False       # ablation: feed an all-zero code to the decoder
    # semantic encoder
    code_dim: int = 32
    patch_size: int = 4
    vit_dim: int = 64
    vit_depth: int = 2
    vit_heads: int = 4
    # noise predictor
    unet_channels: int = 32
    unet_mults: list[int] = field(default_factory=lambda: [1, 2, 2])
    unet_res_blocks: int = 1
    unet_groups: int = 8
    unet_attention: bool = True
    # stage 2
    per_class: bool = True
    latent_layers: int = 10
    latent_width: int = 256
    latent_loss: str = "l1"
    latent_steps: int = 4000
    latent_batch: int = 128
    latent_lr: float = 1e-3

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        for name in ("epochs", "batch_size", "resolution", "timesteps", "code_dim", "latent_steps",
                     "latent_batch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr <= 0 or self.latent_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        self.unet_mults = list(self.unet_mults)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown training config keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def encoder_config(self) -> ViTConfig:
        return ViTConfig(image_size=self.resolution, patch_size=self.patch_size, embed_dim=self.vit_dim,
                         depth=self.vit_depth, heads=self.vit_heads, code_dim=self.code_dim)

    def unet_config(self) -> UNetConfig:
        return UNetConfig(image_size=self.resolution, base_channels=self.unet_channels,
                          channel_mults=tuple(self.unet_mults), num_res_blocks=self.unet_res_blocks,
                          mid_attention=self.unet_attention, time_dim=4 * self.unet_channels,
                          cond_dim=self.code_dim, groups=self.unet_groups)

    def latent_config(self) -> LatentConfig:
        return LatentConfig(code_dim=self.code_dim, layers=self.latent_layers, width=self.latent_width,
                            loss_norm=self.latent_loss)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------


class RunManifest:
    """Append-only record of every command run against one output directory.

    Each entry holds the effective config (and its hash), the seeds, the loss
    series, wall-clock seconds, checkpoint paths and content hashes of outputs.
    """

    def __init__(self, path, entries: list[dict] | None = None):
        self.path = Path(path)
        self.entries = list(entries or [])

    @classmethod
    def open(cls, path) -> "RunManifest":
        path = Path(path)
        if path.exists():
            return cls(path, json.loads(path.read_text())["entries"])
        return cls(path)

    def append(self, command: str, config: dict, *, seeds: dict | None = None, losses: dict | None = None,
               wall_clock: float = 0.0, checkpoints: list[str] | None = None,
               outputs: dict[str, str] | None = None) -> dict:
        entry = {
            "command": command,
            "config": config,
            "config_hash": config_hash(config),
            "seeds": seeds or {},
            "losses": losses or {},
            "wall_clock_s": round(float(wall_clock), 3),
            "checkpoints": list(checkpoints or []),
            "outputs": dict(sorted((outputs or {}).items())),
        }
        self.entries.append(entry)
        self._write()
        return entry

    def _write(self) -> None:
        if self.path.exists():
            on_disk = json.loads(self.path.read_text())["entries"]
            if on_disk != self.entries[:len(on_disk)]:
                raise RuntimeError(f"{self.path}: manifest changed underneath this run; it is append-only")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"entries": self.entries}, indent=1, sort_keys=True) + "\n")
        tmp.replace(self.path)

    def latest(self, command: str) -> dict:
        for entry in reversed(self.entries):
            if entry["command"] == command:
                return entry
        raise KeyError(f"{self.path}: no {command!r} entry")


def append_losses(path, rows: list[tuple]) -> None:
    """Append (stage, model, epoch, loss) rows to a CSV, writing the header once."""
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["stage", "model", "epoch", "loss"])
        for stage, model, epoch, loss in rows:
            w.writerow([stage, model, epoch, repr(float(loss))])


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------


@dataclass
class Stage1Model:
    encoder: ViTEncoder
    unet: UNet
    stats: CodeStats | None
    config: TrainConfig
    class_names: list[str]
    history: list[float] = field(default_factory=list)

    @property
    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.config.timesteps)

    def codes(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        if len(images) == 0:
            return np.zeros((0, self.config.code_dim), dtype=np.float32)
        return np.concatenate([encode(images[i:i + batch_size], self.encoder).values
                               for i in range(0, len(images), batch_size)])

    def predictor(self, batch_size: int = 256):
        def eps(x, t, z):
            return predict_noise(x, t, z, self.unet, batch_size)
        return eps


def build_stage1(cfg: TrainConfig, rng: np.random.Generator) -> tuple[ViTEncoder, UNet]:
    return ViTEncoder(cfg.encoder_config(), rng), UNet(cfg.unet_config(), rng)


def _check_dataset(cfg: TrainConfig, ds: Dataset) -> None:
    if len(ds) == 0:
        raise ValueError("training dataset is empty")
    if ds.images.shape[1:] != (3, cfg.resolution, cfg.resolution):
        raise ValueError(f"dataset images are {ds.images.shape[1:]}, config expects "
                         f"(3, {cfg.resolution}, {cfg.resolution})")


def filter_classes(ds: Dataset, classes: list[str] | None) -> Dataset:
    if not classes:
        return ds
    missing = sorted(set(classes) - set(ds.class_names))
    if missing:
        raise ValueError(f"class filter names unknown classes: {missing}")
    keep = np.isin(ds.labels, [ds.class_names.index(c) for c in classes])
    return ds.subset(keep)


def train_stage1(cfg: TrainConfig, ds: Dataset, *, on_epoch=None) -> Stage1Model:
    """Jointly optimize encoder and decoder on the L1 noise-prediction objective.

    ``on_epoch(epoch, model)`` is called after every epoch (used for periodic
    checkpoints). Code-normalization stats are fitted over the full training
    set after the last epoch.
    """
    _check_dataset(cfg, ds)
    rng = np.random.default_rng(cfg.seed)
    encoder, unet = build_stage1(cfg, rng)
    params = encoder.parameters() + unet.parameters()
    opt = Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay,
               grad_clip=cfg.grad_clip or None)
    ema = (EMA(encoder, cfg.ema_decay), EMA(unet, cfg.ema_decay)) if cfg.ema_decay else None
    s = make_schedule(cfg.timesteps)
    images = ds.images
    n = len(images)
    bs = min(cfg.batch_size, n)
    model = Stage1Model(encoder, unet, None, cfg, list(ds.class_names))
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n - bs + 1, bs):
            x0 = images[order[lo:lo + bs]]
            t = rng.integers(1, s.T + 1, size=bs)
            eps = rng.standard_normal(x0.shape).astype(np.float32)
            x_t = forward_marginal(x0, t, eps, s)
            if cfg.zero_condition:
                z = Tensor(np.zeros((bs, cfg.code_dim), dtype=np.float32))
            else:
                z = encoder(x0)
            loss = T.abs_(unet(x_t, t, z) - Tensor(eps)).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            if ema:
                ema[0].update(encoder)
                ema[1].update(unet)
            losses.append(loss.item())
        model.history.append(float(np.mean(losses)))
        log.info("stage-1 epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, model.history[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, model)
    if ema:
        encoder.load_state_dict(ema[0].shadow)
        unet.load_state_dict(ema[1].shadow)
    model.stats = CodeStats.fit(model.codes(images))
    return model


def stage1_arrays(model: Stage1Model) -> dict[str, np.ndarray]:
    arrays = {f"encoder.{k}": v for k, v in model.encoder.state_dict().items()}
    arrays.update({f"unet.{k}": v for k, v in model.unet.state_dict().items()})
    if model.stats is not None:
        arrays["code_stats.mean"] = model.stats.mean
        arrays["code_stats.std"] = model.stats.std
    return arrays


def save_stage1(model: Stage1Model, path, **meta) -> Path:
    header = {"kind": "stage1", "config": model.config.to_dict(), "class_names": model.class_names,
              "history": model.history, **meta}
    return checkpoint.save(path, stage1_arrays(model), header)


def load_stage1(path) -> Stage1Model:
    arrays, header = checkpoint.load(path)
    if header.get("kind") != "stage1":
        raise ValueError(f"{path}: not a stage-1 checkpoint")
    cfg = TrainConfig.from_dict(header["config"])
    encoder, unet = build_stage1(cfg, np.random.default_rng(0))
    encoder.load_state_dict({k[8:]: v for k, v in arrays.items() if k.startswith("encoder.")})
    unet.load_state_dict({k[5:]: v for k, v in arrays.items() if k.startswith("unet.")})
    stats = None
    if "code_stats.mean" in arrays:
        # stats are stored as float32; keep them exactly as saved so reloads agree
        stats = CodeStats(arrays["code_stats.mean"], arrays["code_stats.std"])
    return Stage1Model(encoder, unet, stats, cfg, list(header["class_names"]), list(header.get("history", [])))


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------


@dataclass
class LatentModel:
    denoiser: LatentDenoiser
    label: int | None          # None for a single unconditional model
    class_name: str | None
    history: list[float]
    n_codes: int


def _parameter_digest(module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


def normalized_codes(stage1: Stage1Model, images: np.ndarray) -> SemanticCode:
    if stage1.stats is None:
        raise ValueError("stage-1 checkpoint has no code-normalization stats")
    return normalize_code(SemanticCode(stage1.codes(images)), stage1.stats)


def train_stage2(cfg: TrainConfig, stage1: Stage1Model, ds: Dataset) -> list[LatentModel]:
    """Fit latent denoisers on frozen-encoder codes; the encoder is verified untouched afterwards."""
    _check_dataset(cfg, ds)
    if ds.resolution != stage1.config.resolution:
        raise ValueError("dataset resolution does not match the stage-1 checkpoint")
    before = _parameter_digest(stage1.encoder)
    codes = normalized_codes(stage1, ds.images).values.astype(np.float32)
    lcfg = LatentConfig(code_dim=stage1.config.code_dim, layers=cfg.latent_layers, width=cfg.latent_width,
                        loss_norm=cfg.latent_loss)
    s = make_schedule(stage1.config.timesteps)
    groups = ([(c, ds.class_names[c]) for c in range(len(ds.class_names)) if np.any(ds.labels == c)]
              if cfg.per_class else [(None, None)])
    out = []
    for i, (label, name) in enumerate(groups):
        sel = codes if label is None else codes[ds.labels == label]
        model, hist = fit_latent(SemanticCode(sel, normalized=True), lcfg, s, steps=cfg.latent_steps,
                                 batch_size=cfg.latent_batch, lr=cfg.latent_lr, seed=cfg.seed * 1000 + i)
        log.info("stage-2 %s: %d codes, loss %.4f -> %.4f", name or "all", len(sel), hist[0], hist[-1])
        out.append(LatentModel(model, label, name, hist, len(sel)))
    if _parameter_digest(stage1.encoder) != before:
        raise RuntimeError("stage 2 modified the frozen encoder")
    return out


def save_latent(lm: LatentModel, path, stage1_digest: str, config: TrainConfig, **meta) -> Path:
    header = {"kind": "latent", "label": lm.label, "class_name": lm.class_name, "n_codes": lm.n_codes,
              "latent": lm.denoiser.cfg.to_dict(), "config": config.to_dict(), "history": lm.history,
              "stage1_digest": stage1_digest, **meta}
    return checkpoint.save(path, lm.denoiser.state_dict(), header)


def load_latent(path) -> tuple[LatentModel, dict]:
    arrays, header = checkpoint.load(path)
    if header.get("kind") != "latent":
        raise ValueError(f"{path}: not a latent checkpoint")
    model = LatentDenoiser(LatentConfig(**header["latent"]), np.random.default_rng(0))
    model.load_state_dict(arrays)
    return LatentModel(model, header["label"], header["class_name"], header["history"], header["n_codes"]), header


def stage1_digest(stage1: Stage1Model) -> str:
    h = hashlib.sha256()
    for k, v in stage1_arrays(stage1).items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# sampling and reconstruction
# ---------------------------------------------------------------------------


def _check_compatible(stage1: Stage1Model, latent: LatentModel) -> None:
    if latent.denoiser.cfg.code_dim != stage1.config.code_dim:
        raise ValueError(f"latent code dim {latent.denoiser.cfg.code_dim} does not match stage-1 code dim "
                         f"{stage1.config.code_dim}")
    if stage1.stats is None:
        raise ValueError("stage-1 checkpoint has no code-normalization stats")


def decode(stage1: Stage1Model, codes: np.ndarray, x_T: np.ndarray, steps: int, clip: bool = True) -> np.ndarray:
    """Deterministic decode of noise images ``x_T`` under unnormalized codes."""
    plan = make_plan(stage1.config.timesteps, steps)
    x = ddim_sample(x_T.astype(np.float32), stage1.predictor(), codes.astype(np.float32), plan, stage1.schedule,
                    clip_x0=clip)
    return np.clip(x, -1.0, 1.0) if clip else x


def generate(stage1: Stage1Model, latent: LatentModel, n: int, seed: int, steps: int = 20,
             latent_steps: int = 50) -> np.ndarray:
    """Sample ``n`` images: draw normalized codes, unnormalize, draw x_T, decode. Deterministic per seed."""
    _check_compatible(stage1, latent)
    res = stage1.config.resolution
    if n == 0:
        return np.zeros((0, 3, res, res), dtype=np.float32)
    s = stage1.schedule
    z = sample_code(latent.denoiser, make_plan(s.T, latent_steps), s, seed=seed, n=n)
    codes = unnormalize_code(z, stage1.stats).values
    x_T = np.random.default_rng([seed, 1]).standard_normal((n, 3, res, res))
    return decode(stage1, codes, x_T, steps)


def reconstruct(stage1: Stage1Model, images: np.ndarray, steps: int) -> tuple[np.ndarray, float]:
    """Invert images to noise maps under their own codes, decode them back and report the MSE."""
    x0 = np.asarray(images, dtype=np.float32)
    if x0.ndim == 3:
        x0 = x0[None]
    codes = stage1.codes(x0).astype(np.float32)
    plan = make_plan(stage1.config.timesteps, steps)
    x_T = ddim_encode(x0, stage1.predictor(), codes, plan, stage1.schedule)
    out = np.clip(ddim_sample(x_T, stage1.predictor(), codes, plan, stage1.schedule), -1.0, 1.0)
    mse = float(np.mean((out.astype(np.float64) - x0) ** 2))
    return out.reshape(np.shape(images)), mse


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0

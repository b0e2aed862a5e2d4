"""Small convolutional classifier used for downstream evaluation and as the default feature extractor."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from . import tensor as T
from .nn import Adam, Conv2d, Linear, Module
from .tensor import Tensor


@dataclass
class ClassifierConfig:
    n_classes: int = 4
    in_channels: int = 3
    width: int = 16
    feature_dim: int = 32

    def to_dict(self) -> dict:
        return asdict(self)


class ToyClassifier(Module):
    def __init__(self, cfg: ClassifierConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        w = cfg.width
        self.conv1 = Conv2d(cfg.in_channels, w, 3, rng, dtype)
        self.conv2 = Conv2d(w, 2 * w, 3, rng, dtype)
        self.fc = Linear(2 * w, cfg.feature_dim, rng, dtype)
        self.head = Linear(cfg.feature_dim, cfg.n_classes, rng, dtype)

    def features(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.fc.w.dtype))
        h = T.avg_pool2d(T.silu(self.conv1(x)))
        h = T.avg_pool2d(T.silu(self.conv2(h)))
        return T.silu(self.fc(T.mean(h, axis=(2, 3))))

    def __call__(self, images) -> Tensor:
        return self.head(self.features(images))


def fit_classifier(images: np.ndarray, labels: np.ndarray, n_classes: int, *, epochs: int = 15,
                   batch_size: int = 64, lr: float = 3e-3, seed: int = 0,
                   cfg: ClassifierConfig | None = None) -> ToyClassifier:
    cfg = cfg or ClassifierConfig(n_classes=n_classes, in_channels=images.shape[1])
    rng = np.random.default_rng(seed)
    model = ToyClassifier(cfg, rng)
    opt = Adam(model.parameters(), lr=lr)
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            loss = T.cross_entropy(model(images[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model


def predict(model: ToyClassifier, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for lo in range(0, len(images), batch_size):
            out.append(model(images[lo:lo + batch_size]).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def extract_features(model: ToyClassifier, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for lo in range(0, len(images), batch_size):
            out.append(model.features(images[lo:lo + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.feature_dim), dtype=np.float32)


def save_classifier(model: ToyClassifier, path, **meta):
    return checkpoint.save(path, model.state_dict(), {"kind": "classifier", "config": model.cfg.to_dict(), **meta})


def load_classifier(path) -> ToyClassifier:
    arrays, header = checkpoint.load(path)
    if header.get("kind") != "classifier":
        raise ValueError(f"{path}: not a classifier checkpoint")
    model = ToyClassifier(ClassifierConfig(**header["config"]), np.random.default_rng(0))
    model.load_state_dict(arrays)
    return model

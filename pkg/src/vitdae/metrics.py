"""Generative-model evaluation: Fréchet distance, improved precision/recall,
PCA manifold plots and downstream classification metrics."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import _kernels
from .classifier import ToyClassifier, extract_features, fit_classifier, predict
from .data import Dataset

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Fréchet distance
# ---------------------------------------------------------------------------


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        D = self.mean.shape[0]
        if self.cov.shape != (D, D):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean length {D}")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.cov))):
            raise ValueError("feature statistics contain non-finite values")
        if np.max(np.abs(self.cov - self.cov.T), initial=0.0) > 1e-10 * max(1.0, np.abs(self.cov).max()):
            raise ValueError("covariance is not symmetric")

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "FeatureStats":
        x = np.asarray(feats, dtype=np.float64)
        if x.ndim != 2 or len(x) < 2:
            raise ValueError("need at least two feature vectors of shape (n, D)")
        cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
        return cls(x.mean(axis=0), 0.5 * (cov + cov.T), len(x))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def trace_sqrt_product(a: np.ndarray, b: np.ndarray) -> float:
    """Tr((a b)^{1/2}) for PSD a, b via the similar symmetric matrix a^{1/2} b a^{1/2}."""
    ra = _sym_sqrt(a)
    m = ra @ b @ ra
    w = np.linalg.eigvalsh(0.5 * (m + m.T))
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_distance(a: FeatureStats, b: FeatureStats, eps: float = 1e-6) -> float:
    """|mu_a - mu_b|^2 + Tr(A + B - 2 (A B)^{1/2}) with A, B regularized by ``eps * I``."""
    if a.dim != b.dim:
        raise ValueError(f"feature dimension mismatch: {a.dim} vs {b.dim}")
    reg = eps * np.eye(a.dim)
    ca, cb = a.cov + reg, b.cov + reg
    diff = a.mean - b.mean
    fd = float(diff @ diff) + float(np.trace(ca) + np.trace(cb)) - 2.0 * trace_sqrt_product(ca, cb)
    return max(fd, 0.0)


# ---------------------------------------------------------------------------
# improved precision / recall
# ---------------------------------------------------------------------------


class ManifoldEstimate:
    """Points with the radius of each point's k-NN hypersphere (self excluded)."""

    def __init__(self, points: np.ndarray, k: int = 3):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        if self.points.ndim != 2:
            raise ValueError("manifold points must be (n, D)")
        if k >= len(self.points):
            raise ValueError(f"k={k} must be smaller than the number of points n={len(self.points)}")
        self.k = k
        self.sq_radii = _kernels.knn_sq_radii(self.points, k)
        self.radii = np.sqrt(self.sq_radii)

    def contains(self, queries: np.ndarray) -> np.ndarray:
        q = np.ascontiguousarray(queries, dtype=np.float64)
        if q.shape[1] != self.points.shape[1]:
            raise ValueError(f"feature dimension mismatch: {q.shape[1]} vs {self.points.shape[1]}")
        return _kernels.in_any_ball(q, self.points, self.sq_radii)


def improved_pr(real: ManifoldEstimate, gen: ManifoldEstimate) -> tuple[float, float]:
    """(precision, recall): share of generated points inside the real manifold, and vice versa."""
    precision = float(real.contains(gen.points).mean())
    recall = float(gen.contains(real.points).mean())
    return precision, recall


# ---------------------------------------------------------------------------
# PCA manifold visualisation
# ---------------------------------------------------------------------------


@dataclass
class PCA:
    mean: np.ndarray
    eigenvalues: np.ndarray   # descending
    components: np.ndarray    # (D, D) columns, matching eigenvalues

    @classmethod
    def fit(cls, x: np.ndarray) -> "PCA":
        x = np.asarray(x, dtype=np.float64)
        mu = x.mean(axis=0)
        xc = x - mu
        cov = xc.T @ xc / len(x)
        if np.trace(cov) <= 0:
            raise ValueError("degenerate covariance: all feature vectors are identical")
        w, v = np.linalg.eigh(0.5 * (cov + cov.T))
        order = np.argsort(w)[::-1]
        w, v = w[order], v[:, order]
        # deterministic sign: largest-magnitude loading positive
        signs = np.sign(v[np.abs(v).argmax(axis=0), np.arange(v.shape[1])])
        signs[signs == 0] = 1.0
        return cls(mu, w, v * signs)

    def transform(self, x: np.ndarray, n_components: int = 2) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components[:, :n_components]

    def reconstruct(self, y: np.ndarray) -> np.ndarray:
        return y @ self.components[:, :y.shape[1]].T + self.mean


_COLORS = {"real": "#1f77b4", "gen": "#d62728"}


def manifold_plot(real_feats: np.ndarray, gen_feats: np.ndarray, k: int = 3, svg_path=None, csv_path=None,
                  size: int = 480) -> dict:
    """Project both sets on the top-2 PCs of their union and draw each point's 2-D k-NN circle."""
    real_feats = np.asarray(real_feats, dtype=np.float64)
    gen_feats = np.asarray(gen_feats, dtype=np.float64)
    if len(real_feats) < 3 or len(gen_feats) < 3:
        raise ValueError("manifold plot needs at least 3 points per set")
    pca = PCA.fit(np.concatenate([real_feats, gen_feats]))
    out = {"pca": pca}
    rows = []
    for label, feats in (("real", real_feats), ("gen", gen_feats)):
        xy = pca.transform(feats, 2)
        if xy.shape[1] < 2:
            xy = np.concatenate([xy, np.zeros((len(xy), 1))], axis=1)
        radii = ManifoldEstimate(xy, min(k, len(xy) - 1)).radii
        out[label] = (xy, radii)
        rows.extend((float(x), float(y), float(r), label) for (x, y), r in zip(xy, radii))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "r", "set"])
            for x, y, r, label in rows:
                w.writerow([repr(x), repr(y), repr(r), label])
    if svg_path is not None:
        Path(svg_path).write_text(_render_svg(rows, size))
    return out


def _render_svg(rows, size: int) -> str:
    xs = np.array([r[0] for r in rows])
    ys = np.array([r[1] for r in rows])
    rs = np.array([r[2] for r in rows])
    lo_x, hi_x = (xs - rs).min(), (xs + rs).max()
    lo_y, hi_y = (ys - rs).min(), (ys + rs).max()
    span = max(hi_x - lo_x, hi_y - lo_y, 1e-12)
    s = (size - 20) / span
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for label in ("real", "gen"):
        parts.append(f'<g fill="{_COLORS[label]}" fill-opacity="0.15" stroke="{_COLORS[label]}" '
                     f'stroke-opacity="0.6" stroke-width="0.5">')
        for x, y, r, lab in rows:
            if lab != label:
                continue
            cx = 10 + (x - lo_x) * s
            cy = size - 10 - (y - lo_y) * s
            parts.append(f'<circle cx="{cx:.3f}" cy="{cy:.3f}" r="{r * s:.3f}"/>')
        parts.append("</g>")
    parts.append(f'<text x="12" y="20" font-size="12" fill="{_COLORS["real"]}">real</text>')
    parts.append(f'<text x="12" y="36" font-size="12" fill="{_COLORS["gen"]}">generated</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# feature extractors and caches
# ---------------------------------------------------------------------------


class FeatureExtractor:
    """Deterministic image -> feature map with a stable identifier."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], ident: str):
        self.fn = fn
        self.id = ident

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(images, dtype=np.float32)), dtype=np.float64)


def classifier_extractor(model: ToyClassifier, ident: str = "toy-classifier") -> FeatureExtractor:
    return FeatureExtractor(lambda x: extract_features(model, x), ident)


def encoder_extractor(encoder, ident: str = "semantic-encoder") -> FeatureExtractor:
    from .encoder import encode

    def fn(x):
        return np.concatenate([encode(x[i:i + 256], encoder).values for i in range(0, len(x), 256)])

    return FeatureExtractor(fn, ident)


def save_features(path, feats: np.ndarray, extractor_id: str) -> None:
    path = Path(path).with_suffix(".bin")
    feats = np.ascontiguousarray(feats, dtype="<f4")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(feats.tobytes())
    meta = {"n": int(feats.shape[0]), "D": int(feats.shape[1]), "extractor": extractor_id}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_features(path) -> tuple[np.ndarray, dict]:
    path = Path(path).with_suffix(".bin")
    meta = json.loads(path.with_suffix(".json").read_text())
    feats = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["n"], meta["D"])
    return feats.astype(np.float32), meta


# ---------------------------------------------------------------------------
# downstream classification
# ---------------------------------------------------------------------------


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    """F1 per class from a (true x predicted) confusion matrix; 0 where a class never occurs or is predicted."""
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    return float(np.trace(cm) / total) if total else 0.0


MODES = ("real", "synthetic", "hybrid")


def downstream_eval(train: Dataset | None, test: Dataset, mode: str, synthetic: Dataset | None = None, *,
                    epochs: int = 10, seed: int = 0, batch_size: int = 64, lr: float = 3e-3) -> dict:
    """Train the toy classifier from scratch on real, synthetic or combined data and score the test set."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    K = len(test.class_names)
    if K < 2:
        raise ValueError("downstream evaluation needs at least two classes")
    parts = []
    if mode in ("real", "hybrid"):
        if train is None:
            raise ValueError(f"mode {mode!r} needs real training data")
        parts.append(train)
    if mode in ("synthetic", "hybrid"):
        if synthetic is None:
            raise ValueError(f"mode {mode!r} needs synthetic training data")
        parts.append(synthetic)
    images = np.concatenate([p.images for p in parts])
    labels = np.concatenate([p.labels for p in parts])
    absent = sorted(set(range(K)) - set(labels.tolist()))
    if absent:
        raise ValueError(f"classes absent from training data: {[test.class_names[c] for c in absent]}")
    if train is not None and set(train.ids) & set(test.ids):
        log.warning("downstream test set overlaps the real training set")
    model = fit_classifier(images, labels, K, epochs=epochs, batch_size=batch_size, lr=lr, seed=seed)
    cm = confusion_matrix(test.labels, predict(model, test.images), K)
    return {
        "mode": mode,
        "accuracy": accuracy(cm),
        "f1": per_class_f1(cm).tolist(),
        "confusion": cm.tolist(),
        "class_names": list(test.class_names),
        "n_train": int(len(labels)),
    }

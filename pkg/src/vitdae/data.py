"""Image datasets: PNG ingestion, PNG export and the procedural toy corpus.

Images live in [-1, 1] as float32 (N, 3, H, W) arrays.  The toy generator
renders four coarse histology-like textures (nuclei blobs, stroma stripes,
smooth mucus, dense tumour noise) and quantizes them to 8 bits so that a
dataset written to PNG and read back is identical.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    images: np.ndarray          # (N, C, H, W) float32 in [-1, 1]
    labels: np.ndarray          # (N,) int64
    ids: list[str]
    class_names: list[str]
    skipped: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels) or len(self.ids) != len(self.labels):
            raise ValueError("images, labels and ids must have matching lengths and images must be (N, C, H, W)")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("dataset ids must be unique")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("labels outside class-name range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    def items(self) -> Iterator[tuple[np.ndarray, int, str]]:
        for img, lab, i in zip(self.images, self.labels, self.ids):
            yield img, int(lab), i

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return Dataset(self.images[index], self.labels[index], [self.ids[i] for i in index],
                       list(self.class_names))

    def only_class(self, label: int) -> "Dataset":
        return self.subset(self.labels == label)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.class_names))


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(images, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return (np.asarray(pixels, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def save_png(image: np.ndarray, path) -> None:
    """Write one (3, H, W) image in [-1, 1] as an 8-bit RGB PNG."""
    Image.fromarray(np.ascontiguousarray(to_uint8(image).transpose(1, 2, 0))).save(path, format="PNG")


def write_dataset(ds: Dataset, root) -> list[Path]:
    """Write class-named subfolders of PNGs; file names follow the dataset ids."""
    root = Path(root)
    paths = []
    for img, lab, ident in ds.items():
        name = ident.split("/")[-1]
        p = root / ds.class_names[lab] / f"{name}.png"
        p.parent.mkdir(parents=True, exist_ok=True)
        save_png(img, p)
        paths.append(p)
    return paths


def _load_png(path: Path, resolution: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        side = min(w, h)
        left, top = (w - side) // 2, (h - side) // 2
        if (w, h) != (side, side):
            im = im.crop((left, top, left + side, top + side))
        if side != resolution:
            im = im.resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.uint8)
    return from_uint8(arr.transpose(2, 0, 1))


def ingest(root, resolution: int, classes: list[str] | None = None) -> Dataset:
    """Read ``root/<class>/*.png`` in lexicographic path order.

    Unreadable files are skipped with a warning and counted in ``Dataset.skipped``.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"no classes found: {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if classes is not None:
        class_dirs = [p for p in class_dirs if p.name in set(classes)]
    if not class_dirs:
        raise ValueError(f"no classes found under {root}")
    images, labels, ids = [], [], []
    skipped = 0
    for label, cdir in enumerate(class_dirs):
        n_before = len(images)
        for path in sorted(cdir.glob("*.png")):
            try:
                images.append(_load_png(path, resolution))
            except Exception as exc:  # PIL raises several unrelated types for bad files
                log.warning("skipping unreadable image %s: %s", path, exc)
                skipped += 1
                continue
            labels.append(label)
            ids.append(f"{cdir.name}/{path.stem}")
        if len(images) == n_before:
            raise ValueError(f"empty class {cdir.name!r}: no readable PNG images")
    ds = Dataset(np.stack(images), np.array(labels), ids, [p.name for p in class_dirs])
    ds.skipped = skipped
    return ds


# ---------------------------------------------------------------------------
# toy corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TextureRecipe:
    name: str
    kind: str                      # blob | stripe | smooth | dense
    base: tuple[float, float, float]
    accent: tuple[float, float, float]
    blob_density: float = 0.0      # expected blobs per image
    stripe_freq: float = 0.0       # cycles across the image
    noise_amp: float = 0.03


DEFAULT_RECIPES = (
    TextureRecipe("nuclei", "blob", (0.93, 0.70, 0.82), (0.35, 0.18, 0.55), blob_density=5.0),
    TextureRecipe("stroma", "stripe", (0.90, 0.55, 0.65), (0.70, 0.25, 0.40), stripe_freq=3.0),
    TextureRecipe("mucus", "smooth", (0.80, 0.82, 0.95), (0.62, 0.68, 0.90)),
    TextureRecipe("tumor", "dense", (0.55, 0.30, 0.60), (0.28, 0.12, 0.40), noise_amp=0.05),
)


@dataclass
class ToySpec:
    class_count: int = 4
    resolution: int = 16
    count: int = 400               # images per class
    seed: int = 0
    recipes: tuple[TextureRecipe, ...] = field(default=DEFAULT_RECIPES)

    def __post_init__(self):
        if self.count <= 0:
            raise ValueError("toy count per class must be positive")
        if self.class_count < 1 or self.class_count > len(self.recipes):
            raise ValueError(f"class_count {self.class_count} needs that many recipes (have {len(self.recipes)})")
        if self.resolution < 4:
            raise ValueError("toy resolution must be at least 4")
        chosen = self.recipes[:self.class_count]
        for i in range(len(chosen)):
            for j in range(i + 1, len(chosen)):
                if _recipe_key(chosen[i]) == _recipe_key(chosen[j]):
                    raise ValueError(
                        f"degenerate recipe collision: {chosen[i].name!r} and {chosen[j].name!r} are identical"
                    )


def _recipe_key(r: TextureRecipe):
    return (r.kind, r.base, r.accent, r.blob_density, r.stripe_freq, r.noise_amp)


def render_texture(recipe: TextureRecipe, res: int, rng: np.random.Generator) -> np.ndarray:
    """One (3, res, res) RGB image in [0, 1]."""
    yy, xx = np.meshgrid(np.arange(res) + 0.5, np.arange(res) + 0.5, indexing="ij")
    yy, xx = yy / res, xx / res
    base = np.array(recipe.base)[:, None, None]
    accent = np.array(recipe.accent)[:, None, None]
    if recipe.kind == "blob":
        mask = np.zeros((res, res))
        for _ in range(max(1, rng.poisson(recipe.blob_density))):
            cy, cx = rng.uniform(0, 1, 2)
            rad = rng.uniform(0.10, 0.18)
            d2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / rad**2
            mask = np.maximum(mask, np.clip(1.0 - d2, 0.0, 1.0))
        mix = mask
    elif recipe.kind == "stripe":
        theta = rng.uniform(0, np.pi)
        freq = recipe.stripe_freq * rng.uniform(0.85, 1.15)
        phase = rng.uniform(0, 2 * np.pi)
        mix = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    elif recipe.kind == "smooth":
        theta = rng.uniform(0, 2 * np.pi)
        ramp = xx * np.cos(theta) + yy * np.sin(theta)
        mix = 0.6 * (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    elif recipe.kind == "dense":
        mix = rng.uniform(0, 1, (res, res))
    else:
        raise ValueError(f"unknown texture kind {recipe.kind!r}")
    img = base * (1.0 - mix) + accent * mix
    img = img * rng.uniform(0.95, 1.05) + recipe.noise_amp * rng.standard_normal((3, res, res))
    return np.clip(img, 0.0, 1.0)


def generate_toy(spec: ToySpec) -> Dataset:
    """Seed-deterministic toy dataset; each image's RNG depends only on (seed, class, index)."""
    recipes = spec.recipes[:spec.class_count]
    images, labels, ids = [], [], []
    for c, recipe in enumerate(recipes):
        for i in range(spec.count):
            rng = np.random.default_rng([spec.seed, c, i])
            rgb = render_texture(recipe, spec.resolution, rng)
            images.append(from_uint8(np.round(rgb * 255).astype(np.uint8)))
            labels.append(c)
            ids.append(f"{recipe.name}/{i:05d}")
    return Dataset(np.stack(images), np.array(labels), ids, [r.name for r in recipes])

"""Procedural (image, caption, complexity) triples.

A scene is a background plus up to ``k_max`` axis-aligned rectangles and
discs whose grey level is fixed by their category, with uniform pixel noise
on top.  Ground truth is a clamped weighted sum of object count, distinct
category count and noise level.  Captions are bags of token ids from four
facet blocks laid out consecutively in the vocabulary::

    [count 0..k_max][category 0..C-1][background 0..B-1][bucket 0..9]
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import derive_seed, make_rng

GT_EPS = 1e-3


class DatasetFormatError(ValueError):
    """A dataset file contains a malformed record."""


@dataclass(frozen=True)
class GenConfig:
    image_size: int = 32
    patch_size: int = 8
    k_max: int = 8
    n_categories: int = 6
    n_backgrounds: int = 4
    n_buckets: int = 10
    weights: tuple[float, float, float] = (0.5, 0.3, 0.2)
    noise_amplitude: float = 0.2
    min_size: int = 4
    max_size: int = 10

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    def validate(self) -> None:
        if self.image_size < 1 or self.patch_size < 1 or self.image_size % self.patch_size:
            raise ValueError("data.image_size must be a positive multiple of data.patch_size")
        if self.k_max < 1:
            raise ValueError("data.k_max must be >= 1")
        if self.n_categories < 1 or self.n_backgrounds < 1 or self.n_buckets < 1:
            raise ValueError("vocabulary block sizes must be >= 1")
        if not 1 <= self.min_size <= self.max_size <= self.image_size:
            raise ValueError("need 1 <= data.min_size <= data.max_size <= data.image_size")
        if not 0 <= self.noise_amplitude <= 0.2:
            raise ValueError("data.noise_amplitude must lie in [0, 0.2]")
        check_weights(self.weights)

    # vocabulary layout
    @property
    def count_offset(self) -> int:
        return 0

    @property
    def category_offset(self) -> int:
        return self.k_max + 1

    @property
    def background_offset(self) -> int:
        return self.category_offset + self.n_categories

    @property
    def bucket_offset(self) -> int:
        return self.background_offset + self.n_backgrounds

    @property
    def vocab_size(self) -> int:
        return self.bucket_offset + self.n_buckets


@dataclass(frozen=True)
class SceneSpec:
    n_objects: int
    object_categories: tuple[int, ...]
    noise_level: float
    background_id: int
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "object_categories", tuple(int(c) for c in self.object_categories))
        if len(self.object_categories) != self.n_objects:
            raise ValueError("object_categories must have n_objects entries")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError("noise_level must lie in [0, 1]")

    @property
    def distinct_categories(self) -> int:
        return len(set(self.object_categories))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["object_categories"] = list(self.object_categories)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(int(d["n_objects"]), tuple(d["object_categories"]), float(d["noise_level"]),
                   int(d["background_id"]), int(d["seed"]))


@dataclass(eq=False)
class SyntheticSample:
    seed: int
    spec: SceneSpec
    image: np.ndarray
    caption: list[int]
    gt: float

    def __eq__(self, other):
        if not isinstance(other, SyntheticSample):
            return NotImplemented
        return (self.seed == other.seed and self.spec == other.spec
                and list(self.caption) == list(other.caption) and self.gt == other.gt
                and self.image.shape == other.image.shape
                and np.array_equal(self.image, other.image))

    def to_record(self) -> dict:
        return {
            "seed": self.seed,
            "spec": self.spec.to_dict(),
            "image": self.image.ravel().tolist(),
            "caption": list(self.caption),
            "gt": self.gt,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SyntheticSample":
        flat = np.asarray(rec["image"], dtype=np.float64)
        side = math.isqrt(flat.size)
        if side * side != flat.size:
            raise ValueError(f"image has {flat.size} values, not a square grid")
        return cls(int(rec["seed"]), SceneSpec.from_dict(rec["spec"]), flat.reshape(side, side),
                   [int(t) for t in rec["caption"]], float(rec["gt"]))


def check_weights(weights) -> None:
    w = tuple(float(x) for x in weights)
    if len(w) != 3 or any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
        raise ValueError(f"complexity weights must be 3 non-negative values summing to 1, got {w}")


def gt_complexity(spec: SceneSpec, weights, k_max: int, c_max: int) -> float:
    check_weights(weights)
    w1, w2, w3 = (float(x) for x in weights)
    raw = (w1 * spec.n_objects / k_max + w2 * spec.distinct_categories / c_max
           + w3 * spec.noise_level)
    return float(min(max(raw, GT_EPS), 1.0 - GT_EPS))


def complexity_bucket(gt: float, n_buckets: int = 10) -> int:
    return min(int(gt * n_buckets), n_buckets - 1)


def draw_spec(seed: int, cfg: GenConfig) -> SceneSpec:
    rng = make_rng(seed, "scene")
    n = int(rng.integers(0, cfg.k_max + 1))
    cats = tuple(int(c) for c in rng.integers(0, cfg.n_categories, size=n))
    noise = float(rng.random())
    background = int(rng.integers(0, cfg.n_backgrounds))
    return SceneSpec(n, cats, noise, background, int(seed))


def background_level(background_id: int, cfg: GenConfig) -> float:
    return 0.2 + 0.15 * background_id / max(cfg.n_backgrounds - 1, 1)


def category_level(category: int, cfg: GenConfig) -> float:
    return 0.45 + 0.35 * category / max(cfg.n_categories - 1, 1)


def render_image(spec: SceneSpec, cfg: GenConfig) -> np.ndarray:
    """Rasterise a scene; geometry and noise come from the scene's own seed."""
    G = cfg.image_size
    img = np.full((G, G), background_level(spec.background_id, cfg))
    geo = make_rng(spec.seed, "geometry")
    yy, xx = np.mgrid[0:G, 0:G]
    for cat in spec.object_categories:
        h, w = (int(s) for s in geo.integers(cfg.min_size, cfg.max_size + 1, size=2))
        top = int(geo.integers(0, G - h + 1))
        left = int(geo.integers(0, G - w + 1))
        level = category_level(cat, cfg)
        if cat % 2 == 0:
            img[top:top + h, left:left + w] = level
        else:
            cy, cx = top + (h - 1) / 2.0, left + (w - 1) / 2.0
            radius = min(h, w) / 2.0
            img[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2] = level
    noise = make_rng(spec.seed, "noise").random((G, G)) * 2.0 - 1.0
    img = img + spec.noise_level * cfg.noise_amplitude * noise
    return np.clip(img, 0.0, 1.0)


def make_caption(spec: SceneSpec, gt: float, cfg: GenConfig) -> list[int]:
    tokens = [cfg.count_offset + spec.n_objects]
    tokens += [cfg.category_offset + c for c in spec.object_categories]
    tokens.append(cfg.background_offset + spec.background_id)
    tokens.append(cfg.bucket_offset + complexity_bucket(gt, cfg.n_buckets))
    return tokens


def sample_from_spec(spec: SceneSpec, cfg: GenConfig) -> SyntheticSample:
    gt = gt_complexity(spec, cfg.weights, cfg.k_max, cfg.n_categories)
    return SyntheticSample(spec.seed, spec, render_image(spec, cfg), make_caption(spec, gt, cfg), gt)


def generate_sample(seed: int, cfg: GenConfig) -> SyntheticSample:
    cfg.validate()
    return sample_from_spec(draw_spec(seed, cfg), cfg)


def sample_seed(base_seed: int, split: str, index: int) -> int:
    return derive_seed(base_seed, "sample", split, index)


def generate_dataset(n: int, base_seed: int, cfg: GenConfig, split: str = "train") -> list[SyntheticSample]:
    """``n`` samples, each from its own derived seed (order-independent)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    cfg.validate()
    return [sample_from_spec(draw_spec(sample_seed(base_seed, split, i), cfg), cfg)
            for i in range(n)]


def total_variation(image: np.ndarray) -> float:
    image = np.asarray(image, dtype=np.float64)
    return float(np.abs(np.diff(image, axis=0)).sum() + np.abs(np.diff(image, axis=1)).sum())


def decile_histogram(gts) -> list[int]:
    counts = [0] * 10
    for g in gts:
        counts[min(int(g * 10), 9)] += 1
    return counts


def write_dataset(samples, path) -> None:
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for s in samples:
                fh.write(json.dumps(s.to_record(), sort_keys=True))
                fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset {path}: {exc.strerror or exc}") from exc


def read_dataset(path) -> list[SyntheticSample]:
    path = Path(path)
    samples = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc.strerror or exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                samples.append(SyntheticSample.from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(f"{path}: malformed record at line {lineno}: {exc}") from exc
    return samples


@dataclass
class Dataset:
    """In-memory dataset with cached array views for training."""

    samples: list[SyntheticSample]
    images: np.ndarray = field(init=False)
    gts: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.samples:
            self.images = np.stack([s.image for s in self.samples])
        else:
            self.images = np.zeros((0, 0, 0))
        self.gts = np.array([s.gt for s in self.samples], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def captions(self) -> list[list[int]]:
        return [s.caption for s in self.samples]

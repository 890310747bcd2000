"""Patches, pools, phantom data, splits, nested subsets and flip augmentation."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy import ndimage

from ganaug.errors import InfeasibleError, InvalidInputError

ALLOWED_SIZES = (32, 64, 128)


class Label(str, enum.Enum):
    MASS = "mass"
    NORMAL = "normal"


class Source(str, enum.Enum):
    REAL = "real"
    SYNTHETIC = "synthetic"


class StrategyId(str, enum.Enum):
    """The four training-set strategies of the augmentation experiment."""

    ORG = "ORG"
    AUG_ORG = "AugORG"
    GAN = "GAN"
    AUG_GAN = "AugGAN"

    @property
    def flip(self) -> bool:
        return self in (StrategyId.AUG_ORG, StrategyId.AUG_GAN)

    @property
    def uses_synthetic(self) -> bool:
        return self in (StrategyId.GAN, StrategyId.AUG_GAN)

    @property
    def display_name(self) -> str:
        return {"ORG": "ORG", "AugORG": "Aug ORG", "GAN": "GAN", "AugGAN": "Aug GAN"}[self.value]


@dataclass(frozen=True, eq=False)
class Patch:
    """One square grayscale patch with pixel values in [0, 1]."""

    pixels: np.ndarray
    label: Label
    source: Source = Source.REAL
    id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2 or px.shape[0] != px.shape[1]:
            raise InvalidInputError(f"patch must be square 2-D, got shape {px.shape}")
        if px.size == 0 or not (np.all(px >= 0.0) and np.all(px <= 1.0)):
            raise InvalidInputError(f"patch {self.id!r} has pixels outside [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "label", Label(self.label))
        object.__setattr__(self, "source", Source(self.source))

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    def same_as(self, other: "Patch") -> bool:
        return (
            self.id == other.id
            and self.label == other.label
            and self.source == other.source
            and np.array_equal(self.pixels, other.pixels)
        )


class PatchPool(Sequence[Patch]):
    """Immutable ordered collection of patches with unique ids."""

    def __init__(self, patches: Iterable[Patch] = ()):
        self._patches = tuple(patches)
        self._index = {}
        for i, p in enumerate(self._patches):
            if p.id in self._index:
                raise InvalidInputError(f"duplicate patch id {p.id!r}")
            self._index[p.id] = i
        sizes = {p.size for p in self._patches}
        if len(sizes) > 1:
            raise InvalidInputError(f"mixed patch sizes in pool: {sorted(sizes)}")

    def __len__(self) -> int:
        return len(self._patches)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return PatchPool(self._patches[i])
        return self._patches[i]

    def __iter__(self) -> Iterator[Patch]:
        return iter(self._patches)

    def __repr__(self) -> str:
        return f"PatchPool(n={len(self)}, class_counts={self.class_counts})"

    @property
    def class_counts(self) -> dict[Label, int]:
        counts = {Label.MASS: 0, Label.NORMAL: 0}
        for p in self._patches:
            counts[p.label] += 1
        return counts

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self._patches]

    @property
    def image_size(self) -> int | None:
        return self._patches[0].size if self._patches else None

    def get(self, patch_id: str) -> Patch:
        return self._patches[self._index[patch_id]]

    def select(self, ids: Iterable[str]) -> "PatchPool":
        return PatchPool(self.get(i) for i in ids)

    def with_label(self, label: Label) -> "PatchPool":
        return PatchPool(p for p in self._patches if p.label == label)

    def __add__(self, other: "PatchPool") -> "PatchPool":
        return PatchPool(self._patches + tuple(other))

    def pixels(self) -> np.ndarray:
        """Stacked pixels, shape (N, S, S), float32."""
        if not self._patches:
            return np.zeros((0, 0, 0), dtype=np.float32)
        return np.stack([p.pixels for p in self._patches])

    def targets(self) -> np.ndarray:
        """1.0 for Mass, 0.0 for Normal."""
        return np.array([p.label == Label.MASS for p in self._patches], dtype=np.float32)

    def same_as(self, other: "PatchPool") -> bool:
        return len(self) == len(other) and all(a.same_as(b) for a, b in zip(self, other))


@dataclass(frozen=True)
class DatasetSplit:
    train: PatchPool
    validation: PatchPool
    test: PatchPool
    fractions: tuple[float, float, float]
    seed: int


@dataclass(frozen=True)
class SubsetLadder:
    sizes: tuple[int, ...]
    subsets: dict[int, tuple[str, ...]]

    def __getitem__(self, k: int) -> tuple[str, ...]:
        if k not in self.subsets:
            raise InvalidInputError(f"ladder has no subset of size {k}; sizes are {self.sizes}")
        return self.subsets[k]


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 32
    n_positive: int = 500
    n_negative: int = 5000
    lesion_radius_range: tuple[float, float] = (3.0, 7.0)
    lesion_contrast_range: tuple[float, float] = (0.1, 0.3)
    background_correlation_length: float = 1.5
    background_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lesion_radius_range", tuple(self.lesion_radius_range))
        object.__setattr__(self, "lesion_contrast_range", tuple(self.lesion_contrast_range))
        if self.image_size not in ALLOWED_SIZES:
            raise InvalidInputError(f"image_size must be one of {ALLOWED_SIZES}")
        if self.n_positive < 0 or self.n_negative < 0:
            raise InvalidInputError("patch counts must be non-negative")
        rmin, rmax = self.lesion_radius_range
        if not 0 < rmin <= rmax < self.image_size / 2:
            raise InvalidInputError("need 0 < min radius <= max radius < image_size/2")
        cmin, cmax = self.lesion_contrast_range
        if not 0 < cmin <= cmax <= 1:
            raise InvalidInputError("contrast range must satisfy 0 < min <= max <= 1")
        if self.background_correlation_length < 0 or self.background_std < 0:
            raise InvalidInputError("background parameters must be non-negative")


@dataclass(frozen=True)
class AnnotatedImage:
    """A larger image with mass boxes given as half-open (x0, y0, x1, y1)."""

    pixels: np.ndarray
    mass_boxes: tuple[tuple[int, int, int, int], ...] = ()
    background_mask: np.ndarray | None = None
    image_id: str = "img"

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2 or px.size == 0:
            raise InvalidInputError("image must be a non-empty 2-D matrix")
        if px.min() < 0 or px.max() > 1:
            raise InvalidInputError("image pixels must lie in [0, 1]")
        h, w = px.shape
        boxes = tuple(tuple(int(v) for v in b) for b in self.mass_boxes)
        for x0, y0, x1, y1 in boxes:
            if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
                raise InvalidInputError(f"mass box {(x0, y0, x1, y1)} outside {w}x{h} image")
        mask = self.background_mask
        mask = np.ones_like(px, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if mask.shape != px.shape:
            raise InvalidInputError("background_mask shape differs from image")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "mass_boxes", boxes)
        object.__setattr__(self, "background_mask", mask)


def histogram_normalize(raw) -> np.ndarray:
    """Clip at the 1st/99th percentiles, then min-max onto [0, 1].

    Constant input (or input whose percentiles coincide) maps to zeros.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise InvalidInputError("cannot normalize an empty matrix")
    lo, hi = np.percentile(raw, [1.0, 99.0])
    if hi <= lo:
        return np.zeros_like(raw)
    return (np.clip(raw, lo, hi) - lo) / (hi - lo)


def normalize_to_range(values, lo: float, hi: float):
    """Affine map from the data's own [min, max] onto [lo, hi].

    Works on numpy arrays and torch tensors alike. Constant input maps to
    the midpoint (lo + hi) / 2.
    """
    if not lo < hi:
        raise InvalidInputError(f"need lo < hi, got {lo}, {hi}")
    vmin, vmax = values.min(), values.max()
    span = float(vmax - vmin)
    if span == 0.0:
        return values * 0 + (lo + hi) / 2
    return (values - vmin) * ((hi - lo) / span) + lo


def _correlated_background(rng: np.random.Generator, size: int, corr: float, std: float) -> np.ndarray:
    noise = rng.standard_normal((size, size))
    if corr > 0:
        noise = ndimage.gaussian_filter(noise, sigma=corr, mode="wrap")
    sd = noise.std()
    if sd > 0:
        noise = (noise - noise.mean()) / sd
    return 0.5 + std * noise


def _elliptical_blob(rng: np.random.Generator, size: int, config: PhantomConfig) -> np.ndarray:
    # radius is the 2-sigma extent of the semi-major axis
    radius = rng.uniform(*config.lesion_radius_range)
    minor = radius * rng.uniform(0.6, 1.0)
    theta = rng.uniform(0.0, math.pi)
    contrast = rng.uniform(*config.lesion_contrast_range)
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) - c
    u = xx * math.cos(theta) + yy * math.sin(theta)
    v = -xx * math.sin(theta) + yy * math.cos(theta)
    return contrast * np.exp(-2.0 * ((u / radius) ** 2 + (v / minor) ** 2))


def generate_phantom_dataset(config: PhantomConfig) -> PatchPool:
    """Procedural stand-in for a mass/normal patch collection.

    Masses are a correlated-noise background plus one centred elliptical
    Gaussian blob; normals are the background alone.
    """
    rng = np.random.default_rng(config.seed)
    s = config.image_size
    corr, std = config.background_correlation_length, config.background_std
    patches = []
    for i in range(config.n_positive):
        img = _correlated_background(rng, s, corr, std) + _elliptical_blob(rng, s, config)
        patches.append(Patch(np.clip(img, 0.0, 1.0), Label.MASS, Source.REAL, f"phantom-mass-{i:05d}"))
    for i in range(config.n_negative):
        img = _correlated_background(rng, s, corr, std)
        patches.append(Patch(np.clip(img, 0.0, 1.0), Label.NORMAL, Source.REAL, f"phantom-normal-{i:05d}"))
    return PatchPool(patches)


def rect_intersection_area(a, b) -> int:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    return max(0, min(ax1, bx1) - max(ax0, bx0)) * max(0, min(ay1, by1) - max(ay0, by0))


def extract_patches(image: AnnotatedImage, patch_size: int, n_negative: int, seed: int) -> PatchPool:
    """Cut one Mass patch per annotated box and ``n_negative`` random Normal patches.

    Negatives must not touch any mass box and must have at least 95% of
    their pixels inside the tissue mask. Positions are drawn by rejection
    sampling with a budget of ``patch_size**2 * 100`` attempts.
    """
    h, w = image.pixels.shape
    if patch_size > min(h, w) or patch_size < 1:
        raise InvalidInputError(f"patch_size {patch_size} does not fit a {w}x{h} image")
    if n_negative < 0:
        raise InvalidInputError("n_negative must be non-negative")
    patches = []
    for i, (x0, y0, x1, y1) in enumerate(image.mass_boxes):
        cx, cy = (x0 + x1) // 2, (y0 + y1) // 2
        left = min(max(cx - patch_size // 2, 0), w - patch_size)
        top = min(max(cy - patch_size // 2, 0), h - patch_size)
        crop = image.pixels[top : top + patch_size, left : left + patch_size]
        patches.append(Patch(crop, Label.MASS, Source.REAL, f"{image.image_id}-mass-{i}"))
    if n_negative == 0:
        return PatchPool(patches)

    # integral image of the tissue mask gives O(1) coverage per candidate
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    integral[1:, 1:] = image.background_mask.astype(np.int64).cumsum(0).cumsum(1)
    need = math.ceil(0.95 * patch_size * patch_size)
    boxes = np.array(image.mass_boxes, dtype=np.int64).reshape(-1, 4)

    rng = np.random.default_rng(seed)
    budget = patch_size * patch_size * 100
    chosen: dict[tuple[int, int], None] = {}
    attempts = 0
    while len(chosen) < n_negative and attempts < budget:
        m = min(4096, budget - attempts)
        attempts += m
        tops = rng.integers(0, h - patch_size + 1, size=m)
        lefts = rng.integers(0, w - patch_size + 1, size=m)
        bottoms, rights = tops + patch_size, lefts + patch_size
        ok = np.ones(m, dtype=bool)
        for bx0, by0, bx1, by1 in boxes:
            ox = np.minimum(rights, bx1) - np.maximum(lefts, bx0)
            oy = np.minimum(bottoms, by1) - np.maximum(tops, by0)
            ok &= ~((ox > 0) & (oy > 0))
        covered = (
            integral[bottoms, rights] - integral[tops, rights] - integral[bottoms, lefts] + integral[tops, lefts]
        )
        ok &= covered >= need
        for t, l in zip(tops[ok], lefts[ok]):
            chosen.setdefault((int(t), int(l)), None)
            if len(chosen) == n_negative:
                break
    if len(chosen) < n_negative:
        raise InfeasibleError(
            f"found {len(chosen)} of {n_negative} negative positions after {attempts} attempts"
        )
    for t, l in chosen:
        crop = image.pixels[t : t + patch_size, l : l + patch_size]
        patches.append(Patch(crop, Label.NORMAL, Source.REAL, f"{image.image_id}-normal-{t}-{l}"))
    return PatchPool(patches)


def split_dataset(pool: PatchPool, fractions: Sequence[float], seed: int) -> DatasetSplit:
    """Shuffle, then take floor(f*N) for train and validation; the rest is test."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidInputError(f"fractions must be three positive reals summing to 1, got {fractions}")
    n = len(pool)
    order = np.random.default_rng(seed).permutation(n)
    # small epsilon keeps e.g. 1/3 * 3 from flooring to 0
    n_train = math.floor(fractions[0] * n + 1e-9)
    n_val = math.floor(fractions[1] * n + 1e-9)
    shuffled = [pool[int(i)] for i in order]
    return DatasetSplit(
        train=PatchPool(shuffled[:n_train]),
        validation=PatchPool(shuffled[n_train : n_train + n_val]),
        test=PatchPool(shuffled[n_train + n_val :]),
        fractions=fractions,
        seed=seed,
    )


def sample_nested_subsets(pool: PatchPool, sizes: Sequence[int], seed: int) -> SubsetLadder:
    """One shuffle, then prefixes: every subset contains all smaller ones."""
    sizes = tuple(int(k) for k in sizes)
    if not sizes or any(a >= b for a, b in zip(sizes, sizes[1:])) or sizes[0] < 1:
        raise InvalidInputError(f"sizes must be positive and strictly ascending, got {sizes}")
    if sizes[-1] > len(pool):
        raise InvalidInputError(f"largest subset {sizes[-1]} exceeds pool of {len(pool)}")
    order = np.random.default_rng(seed).permutation(len(pool))
    ids = [pool[int(i)].id for i in order]
    return SubsetLadder(sizes=sizes, subsets={k: tuple(ids[:k]) for k in sizes})


@dataclass(frozen=True)
class TrainingSet:
    pool: PatchPool
    flip: bool
    n_real_positive: int = 0
    n_synthetic: int = 0
    n_negative: int = 0


def n_synthetic_for(k: int, multiplier: float) -> int:
    # half-up rounding, so 1.5 * 25 -> 38
    return int(math.floor(multiplier * k + 0.5))


def build_training_set(
    k: int,
    ladder: SubsetLadder,
    positives: PatchPool,
    negatives: PatchPool,
    synthetic: PatchPool,
    strategy: StrategyId,
    ratio: int = 10,
    multiplier: float = 1.5,
    negative_seed: int = 0,
) -> TrainingSet:
    """Assemble the classifier training set for one (strategy, k) cell.

    Negatives are the first ``ratio * k`` of a ``negative_seed`` shuffle of
    ``negatives``, so they nest across k exactly like the positives.
    Synthetic positives are the first ``round(multiplier * k)`` entries of
    ``synthetic``.
    """
    strategy = StrategyId(strategy)
    real_ids = ladder[k]
    n_neg = ratio * k
    if len(negatives) < n_neg:
        raise InvalidInputError(f"need {n_neg} negatives, pool has {len(negatives)}")
    n_syn = n_synthetic_for(k, multiplier) if strategy.uses_synthetic else 0
    if len(synthetic) < n_syn:
        raise InvalidInputError(f"need {n_syn} synthetic positives, pool has {len(synthetic)}")
    order = np.random.default_rng(negative_seed).permutation(len(negatives))[:n_neg]
    parts = list(positives.select(real_ids))
    parts += list(synthetic)[:n_syn]
    parts += [negatives[int(i)] for i in order]
    return TrainingSet(PatchPool(parts), strategy.flip, len(real_ids), n_syn, n_neg)


def flip_patch(patch: Patch, horizontal: bool, vertical: bool) -> Patch:
    px = patch.pixels
    if horizontal:
        px = px[:, ::-1]
    if vertical:
        px = px[::-1, :]
    return Patch(np.ascontiguousarray(px), patch.label, patch.source, patch.id)


def flip_augment(patch: Patch, rng: np.random.Generator) -> Patch:
    """Independent horizontal and vertical flips, each with probability 0.5."""
    h, v = rng.random(2) < 0.5
    return flip_patch(patch, bool(h), bool(v))


def flip_batch(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-sample random flips of an (N, ..., S, S) array; same law as flip_augment."""
    out = np.array(batch, copy=True)
    draws = rng.random((out.shape[0], 2)) < 0.5
    for i, (h, v) in enumerate(draws):
        if h:
            out[i] = out[i][..., :, ::-1]
        if v:
            out[i] = out[i][..., ::-1, :]
    return out

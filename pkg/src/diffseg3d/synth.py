"""Procedural cell-like volumes with three nested label levels.

Level 1: background / cell. Level 2 adds vesicles and mitochondria.
Level 3 adds four protein-aggregate classes placed in the cytoplasm.
Labels describe the noiseless geometry; pink noise is added afterwards and
the image is clamped to [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

# Level-3 label ids; Level 2 maps aggregates back to CELL, Level 1 maps
# everything non-background to 1.
BACKGROUND, CELL, VESICLE, MITOCHONDRION = 0, 1, 2, 3
AGGREGATES = (4, 5, 6, 7)
CLASS_NAMES = ("background", "cell", "vesicle", "mitochondrion",
               "aggregate_a", "aggregate_b", "aggregate_c", "aggregate_d")
LEVEL_K = {1: 2, 2: 4, 3: 8}

MAX_PLACEMENT_ATTEMPTS = 500
IRREGULAR_AMPLITUDE = 0.3
# Half-width of a cube with the same volume as a unit sphere.
CUBE_HALF_WIDTH = (np.pi / 6) ** (1 / 3)


class PlacementError(RuntimeError):
    def __init__(self, object_class: str, attempts: int):
        super().__init__(f"could not place a {object_class} inside the cell after {attempts} attempts")
        self.object_class = object_class


@dataclass(frozen=True)
class SceneConfig:
    extent: int = 32
    variant: Literal["regular", "irregular"] = "regular"
    n_vesicles: int = 2
    n_mitochondria: int = 2
    n_aggregates_per_class: int = 1
    cell_radius: tuple[float, float] = (10.0, 13.0)
    vesicle_radius: tuple[float, float] = (2.5, 3.5)
    mitochondrion_radius: tuple[float, float] = (2.5, 3.5)
    aggregate_radius: tuple[float, float] = (1.0, 1.6)
    background_intensity: tuple[float, float] = (0.18, 0.28)
    cell_intensity: tuple[float, float] = (0.34, 0.44)
    vesicle_intensity: tuple[float, float] = (0.75, 0.95)
    mitochondrion_intensity: tuple[float, float] = (0.55, 0.7)
    aggregate_intensity: tuple[float, float] = (0.05, 1.0)
    noise_magnitude: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        """Raise ``ValueError`` naming the first offending field."""
        if self.extent < 4:
            raise ValueError(f"extent: must be >= 4, got {self.extent}")
        if self.variant not in ("regular", "irregular"):
            raise ValueError(f"variant: must be 'regular' or 'irregular', got {self.variant!r}")
        for name in ("n_vesicles", "n_mitochondria", "n_aggregates_per_class"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name}: must be >= 0")
        for name in ("cell_radius", "vesicle_radius", "mitochondrion_radius", "aggregate_radius"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name}: need 0 < min <= max, got ({lo}, {hi})")
        for name in ("background_intensity", "cell_intensity", "vesicle_intensity",
                     "mitochondrion_intensity", "aggregate_intensity"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"{name}: need 0 <= min <= max <= 1, got ({lo}, {hi})")
        if self.noise_magnitude < 0:
            raise ValueError(f"noise_magnitude: must be >= 0, got {self.noise_magnitude}")
        if self.cell_radius[1] > self.extent / 2:
            raise ValueError(f"cell_radius: max radius {self.cell_radius[1]} exceeds half the extent")
        for name in ("vesicle_radius", "mitochondrion_radius", "aggregate_radius"):
            if getattr(self, name)[1] >= self.cell_radius[0]:
                raise ValueError(f"{name}: organelles must be strictly smaller than the cell")


@dataclass
class LabeledVolume:
    image: np.ndarray  # float32 (D, H, W) in [0, 1]
    labels: dict[int, np.ndarray] = field(default_factory=dict)  # level -> uint8 (D, H, W)
    intensities: dict[int, float] = field(default_factory=dict)  # level-3 class -> base intensity


def level_labels(fine: np.ndarray) -> dict[int, np.ndarray]:
    """Derive the three nested label volumes from the Level-3 map."""
    l2 = fine.copy()
    l2[np.isin(fine, AGGREGATES)] = CELL
    l1 = (fine != BACKGROUND).astype(np.uint8)
    return {1: l1, 2: l2.astype(np.uint8), 3: fine.astype(np.uint8)}


def _grid(extent: int) -> np.ndarray:
    ax = np.arange(extent, dtype=np.float64)
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)


def _random_unit(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _shape_mask(grid: np.ndarray, center: np.ndarray, radius: float, kind: str,
                rng: np.random.Generator) -> np.ndarray:
    d = grid - center
    if kind == "cube":
        return np.abs(d).max(axis=-1) <= radius
    dist = np.linalg.norm(d, axis=-1)
    if kind == "sphere":
        return dist <= radius
    # Star-convex blob: radius modulated by low-order Legendre terms along
    # random axes; sum of |coefficients| <= IRREGULAR_AMPLITUDE.
    axes = _random_unit(rng, 3)
    coef = rng.dirichlet(np.ones(3)) * IRREGULAR_AMPLITUDE * rng.uniform(0.6, 1.0)
    coef *= rng.choice([-1.0, 1.0], size=3)
    unit = d / np.maximum(dist, 1e-9)[..., None]
    r = np.ones(dist.shape)
    for j, a in enumerate(axes):
        c = unit @ a
        legendre = (0.5 * (3 * c**2 - 1)) if j % 2 == 0 else (0.5 * (5 * c**3 - 3 * c))
        r += coef[j] * legendre
    return dist <= radius * r


def _erode(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    for ax in range(3):
        out &= np.roll(mask, 1, axis=ax) & np.roll(mask, -1, axis=ax)
    # Voxels on the volume boundary are never interior.
    out[0, :, :] = out[-1, :, :] = False
    out[:, 0, :] = out[:, -1, :] = False
    out[:, :, 0] = out[:, :, -1] = False
    return out


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    for ax in range(3):
        for shift in (1, -1):
            rolled = np.roll(mask, shift, axis=ax)
            if shift == 1:
                rolled[(slice(None),) * ax + (0,)] = False
            else:
                rolled[(slice(None),) * ax + (-1,)] = False
            out |= rolled
    return out


def pink_noise(extent: int, magnitude: float, seed) -> np.ndarray:
    """1/f-amplitude noise, zero mean, max |value| == magnitude."""
    if extent < 4:
        raise ValueError(f"extent must be >= 4, got {extent}")
    if magnitude < 0:
        raise ValueError(f"magnitude must be >= 0, got {magnitude}")
    if magnitude == 0:
        return np.zeros((extent,) * 3, dtype=np.float32)
    rng = np.random.default_rng(seed)
    white = rng.normal(size=(extent,) * 3)
    spectrum = np.fft.rfftn(white)
    f = np.fft.fftfreq(extent)
    fr = np.fft.rfftfreq(extent)
    fz, fy, fx = np.meshgrid(f, f, fr, indexing="ij")
    norm = np.sqrt(fz**2 + fy**2 + fx**2)
    norm[0, 0, 0] = 1.0
    spectrum /= norm
    spectrum[0, 0, 0] = 0.0
    field = np.fft.irfftn(spectrum, s=(extent,) * 3, axes=(0, 1, 2))
    field -= field.mean()
    field /= np.abs(field).max()
    return (field * magnitude).astype(np.float32)


def gamma_transform(x, gamma: float):
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    return x**gamma


def sample_gamma(gamma_range: tuple[float, float], rng) -> float:
    lo, hi = gamma_range
    if not 0 < lo <= hi:
        raise ValueError(f"invalid gamma range ({lo}, {hi}); need 0 < min <= max")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _draw_intensities(config: SceneConfig, rng: np.random.Generator) -> dict[int, float]:
    ranges = {
        BACKGROUND: config.background_intensity,
        CELL: config.cell_intensity,
        VESICLE: config.vesicle_intensity,
        MITOCHONDRION: config.mitochondrion_intensity,
        **{a: config.aggregate_intensity for a in AGGREGATES},
    }
    out: dict[int, float] = {}
    for cls, (lo, hi) in ranges.items():
        for _ in range(1000):
            v = float(rng.uniform(lo, hi))
            if all(abs(v - u) > 1e-6 for u in out.values()):
                break
        else:
            raise ValueError(f"cannot draw a distinct intensity for {CLASS_NAMES[cls]} from ({lo}, {hi})")
        out[cls] = v
    return out


def generate_volume(config: SceneConfig) -> LabeledVolume:
    config.validate()
    rng = np.random.default_rng(config.seed)
    n = config.extent
    grid = _grid(n)
    center0 = (n - 1) / 2.0

    if config.variant == "regular":
        cell_kind = str(rng.choice(["sphere", "cube"]))
        organelle_kinds = ["sphere", "cube"]
    else:
        cell_kind = "blob"
        organelle_kinds = ["blob"]

    cell_r = rng.uniform(*config.cell_radius)
    if cell_kind == "cube":
        cell_r *= CUBE_HALF_WIDTH
    jitter = rng.uniform(-1.5, 1.5, size=3)
    cell = _shape_mask(grid, center0 + jitter, cell_r, cell_kind, rng)
    cell &= _erode(np.ones_like(cell))

    fine = np.zeros((n, n, n), dtype=np.uint8)
    fine[cell] = CELL
    # Organelles keep one voxel of cytoplasm between them and the membrane.
    allowed = _erode(cell)
    occupied = np.zeros_like(cell)

    def place(cls: int, radius_range: tuple[float, float]) -> None:
        idx = np.argwhere(allowed)
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            if len(idx) == 0:
                break
            c = idx[rng.integers(len(idx))].astype(np.float64) + rng.uniform(-0.5, 0.5, size=3)
            r = rng.uniform(*radius_range)
            kind = str(rng.choice(organelle_kinds))
            if kind == "cube":
                r *= CUBE_HALF_WIDTH
            obj = _shape_mask(grid, c, r, kind, rng)
            if not obj.any():
                continue
            if (obj & ~allowed).any() or (obj & _dilate(occupied)).any():
                continue
            fine[obj] = cls
            occupied[obj] = True
            return
        raise PlacementError(CLASS_NAMES[cls], MAX_PLACEMENT_ATTEMPTS)

    for _ in range(config.n_vesicles):
        place(VESICLE, config.vesicle_radius)
    for _ in range(config.n_mitochondria):
        place(MITOCHONDRION, config.mitochondrion_radius)
    for cls in AGGREGATES:
        for _ in range(config.n_aggregates_per_class):
            place(cls, config.aggregate_radius)

    intensities = _draw_intensities(config, rng)
    lut = np.array([intensities[c] for c in range(len(CLASS_NAMES))], dtype=np.float32)
    image = lut[fine]
    if config.noise_magnitude > 0:
        image = image + pink_noise(n, config.noise_magnitude, rng.integers(2**63))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return LabeledVolume(image=image, labels=level_labels(fine), intensities=intensities)


def volume_seed(dataset_seed: int, index: int) -> int:
    """Independent per-volume seed derived from (dataset seed, index)."""
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1, dtype=np.uint64)[0] >> 1)


def split_counts(count: int) -> tuple[int, int, int]:
    """2/3 train, 1/6 validation, 1/6 test (test gets any rounding slack)."""
    n_val = count // 6
    n_test = count // 6
    n_train = count - n_val - n_test
    return n_train, n_val, n_test


def generate_dataset(base: SceneConfig, count: int, dataset_seed: int) -> list[tuple[str, SceneConfig, LabeledVolume]]:
    n_train, n_val, _ = split_counts(count)
    out = []
    for i in range(count):
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        cfg = replace(base, seed=volume_seed(dataset_seed, i))
        out.append((split, cfg, generate_volume(cfg)))
    return out

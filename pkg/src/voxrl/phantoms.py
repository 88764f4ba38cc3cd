"""Procedural phantom volumes: a smooth "brain" ellipsoid, optional bright
lesion blobs with Gaussian falloff and value-noise texture, low-amplitude
background noise, per-volume min-max normalization to [0, 1].

Volume content is a pure function of (seed, label, size); the sampled
geometry is exposed through :func:`phantom_params` so tests can rebuild
lesion masks independently of the rasterizer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .util import derive_seed
from .volumes import DatasetSplit, Volume, VolumeMeta, VolumeStore

MIN_SIZE = 16
CLASSES = (0, 1)


@dataclass
class Ellipsoid:
    center: np.ndarray  # (3,) in normalized [-1, 1] coords
    axes: np.ndarray    # (3,) semi-axes in normalized units
    rot: np.ndarray     # (3, 3) rotation matrix
    amplitude: float = 0.0

    def radius_sq(self, coords: np.ndarray) -> np.ndarray:
        """Squared ellipsoidal radius (1.0 on the surface) at coords (..., 3)."""
        local = (coords - self.center) @ self.rot.T
        return np.sum((local / self.axes) ** 2, axis=-1)


@dataclass
class PhantomParams:
    size: int
    label: int
    brain: Ellipsoid
    lesions: list[Ellipsoid]
    texture_seed: int
    noise_seed: int
    base_intensity: float
    texture_amp: float
    noise_amp: float


def _rotation_matrix(rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _value_noise(seed: int, size: int, cells: int) -> np.ndarray:
    """Smooth value noise: a coarse random grid upsampled trilinearly."""
    rng = np.random.default_rng(seed)
    grid = rng.standard_normal((cells, cells, cells))
    pos = np.linspace(0.0, cells - 1.0, size)
    lo = np.minimum(pos.astype(int), cells - 2)
    frac = pos - lo

    def lerp_axis(arr, axis):
        a = np.take(arr, lo, axis=axis)
        b = np.take(arr, lo + 1, axis=axis)
        shape = [1, 1, 1]
        shape[axis] = size
        f = frac.reshape(shape)
        return a * (1 - f) + b * f

    out = grid
    for ax in range(3):
        out = lerp_axis(out, ax)
    return out


def phantom_params(seed: int, label: int, size: int) -> PhantomParams:
    """Sample the full phantom geometry for (seed, label, size)."""
    if size < MIN_SIZE:
        raise ValueError(f"size must be >= {MIN_SIZE}, got {size}")
    if label not in CLASSES:
        raise ValueError(f"label must be one of {CLASSES}, got {label}")
    rng = np.random.default_rng(derive_seed("phantom", seed, label, size))

    brain = Ellipsoid(
        center=rng.uniform(-0.06, 0.06, size=3),
        axes=rng.uniform(0.68, 0.82, size=3),
        rot=_rotation_matrix(rng),
    )
    lesions: list[Ellipsoid] = []
    if label == 1:
        for _ in range(int(rng.integers(1, 4))):
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            radius = rng.uniform(0.0, 0.45)
            lesions.append(Ellipsoid(
                center=brain.center + direction * radius * brain.axes,
                axes=rng.uniform(0.10, 0.20, size=3),
                rot=_rotation_matrix(rng),
                amplitude=float(rng.uniform(0.45, 0.65)),
            ))
    return PhantomParams(
        size=size,
        label=label,
        brain=brain,
        lesions=lesions,
        texture_seed=int(rng.integers(0, 2**62)),
        noise_seed=int(rng.integers(0, 2**62)),
        base_intensity=float(rng.uniform(0.52, 0.62)),
        texture_amp=float(rng.uniform(0.05, 0.09)),
        noise_amp=float(rng.uniform(0.010, 0.018)),
    )


def _coord_grid(size: int) -> np.ndarray:
    ax = np.linspace(-1.0, 1.0, size)
    zz, yy, xx = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([zz, yy, xx], axis=-1)


def lesion_mask(params: PhantomParams, scale: float = 1.0) -> np.ndarray:
    """Boolean union of the lesion ellipsoids, optionally scaled."""
    coords = _coord_grid(params.size)
    mask = np.zeros((params.size,) * 3, dtype=bool)
    for les in params.lesions:
        mask |= les.radius_sq(coords) <= scale**2
    return mask


def rasterize(params: PhantomParams) -> np.ndarray:
    coords = _coord_grid(params.size)
    size = params.size

    # smooth brain boundary: ~2 voxels of falloff in ellipsoidal radius
    r = np.sqrt(params.brain.radius_sq(coords))
    edge = 2.0 / size * 2.0
    brain_soft = np.clip((1.0 - r) / edge + 0.5, 0.0, 1.0)

    texture = _value_noise(params.texture_seed, size, cells=6)
    intensity = (params.base_intensity + params.texture_amp * texture) * brain_soft
    # mild radial brightening toward the core
    intensity += 0.08 * np.clip(1.0 - r, 0.0, 1.0) * brain_soft

    for les in params.lesions:
        rho2 = les.radius_sq(coords)
        falloff = np.exp(-3.0 * rho2)
        boundary_tex = 1.0 + 0.18 * _value_noise(params.texture_seed ^ 0x5EED, size, cells=8)
        intensity += les.amplitude * falloff * boundary_tex * brain_soft

    noise = np.random.default_rng(params.noise_seed).standard_normal((size,) * 3)
    intensity += params.noise_amp * noise

    lo, hi = intensity.min(), intensity.max()
    return ((intensity - lo) / (hi - lo)).astype(np.float32)


def generate_phantom(seed: int, label: int, size: int = 32) -> Volume:
    """Deterministic phantom volume for (seed, label, size)."""
    params = phantom_params(seed, label, size)
    voxels = rasterize(params)
    return Volume(voxels=voxels, label=label, meta=VolumeMeta(source="real", seed=seed))


@dataclass
class DatasetConfig:
    size: int = 32
    train_counts: dict = field(default_factory=lambda: {0: 230, 1: 46})
    test_counts: dict = field(default_factory=lambda: {0: 30, 1: 30})
    base_seed: int = 0

    def to_json(self) -> dict:
        return {
            "size": self.size,
            "train_counts": {str(k): v for k, v in self.train_counts.items()},
            "test_counts": {str(k): v for k, v in self.test_counts.items()},
            "base_seed": self.base_seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DatasetConfig":
        return cls(
            size=d.get("size", 32),
            train_counts={int(k): v for k, v in d.get("train_counts", {"0": 230, "1": 46}).items()},
            test_counts={int(k): v for k, v in d.get("test_counts", {"0": 30, "1": 30}).items()},
            base_seed=d.get("base_seed", 0),
        )


SPLIT_FILE = "split.json"


def build_dataset(config: DatasetConfig, out_dir: Path, overwrite: bool = False) -> DatasetSplit:
    """Generate the phantom dataset into a volume store and return the split.

    Volume RNG streams derive from (base_seed, split, label, index), so the
    result is independent of generation order.
    """
    out_dir = Path(out_dir)
    manifest = out_dir / VolumeStore.MANIFEST
    if manifest.exists():
        if not overwrite:
            raise FileExistsError(f"{out_dir} already holds a dataset (pass overwrite)")
        for f in out_dir.glob("*.vol"):
            f.unlink()
        manifest.unlink()
        (out_dir / SPLIT_FILE).unlink(missing_ok=True)

    out_dir.mkdir(parents=True, exist_ok=True)
    store = VolumeStore(out_dir)
    split = DatasetSplit(store_root=str(out_dir))
    for split_name, counts, id_list in (
        ("train", config.train_counts, split.train),
        ("test", config.test_counts, split.test),
    ):
        for label in sorted(counts):
            for i in range(counts[label]):
                vol_seed = derive_seed("dataset", config.base_seed, split_name, label, i)
                vol = generate_phantom(vol_seed, label, config.size)
                vol_id = f"{split_name}_c{label}_{i:04d}"
                store.add(vol_id, vol)
                id_list.append(vol_id)
    split.class_counts = {
        "train": {str(k): v for k, v in config.train_counts.items()},
        "test": {str(k): v for k, v in config.test_counts.items()},
    }
    split.validate()
    store.save_manifest()
    split.save(out_dir / SPLIT_FILE)
    (out_dir / "dataset_config.json").write_text(json.dumps(config.to_json(), indent=1))
    return split

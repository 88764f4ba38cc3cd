"""Fréchet distance between feature distributions of volume sets.

The feature extractor is a fixed, seeded, untrained convolutional stack
(3D for whole volumes, 2D for axial slices) with global average pooling.
Absolute distances therefore live on an arbitrary scale; every comparison
in this project is an ordering or ratio between sets scored with the same
extractor seed.

Fréchet distance between Gaussian fits (mu, sigma):

    d^2 = ||mu_a - mu_b||^2 + Tr(sigma_a + sigma_b - 2 (sigma_a sigma_b)^{1/2})

with the matrix square root taken through the symmetric product
sigma_a^{1/2} sigma_b sigma_a^{1/2}, negative eigenvalues clamped at zero,
which keeps the result finite for rank-deficient covariances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

DEFAULT_FEATURE_DIM = 64
DEFAULT_EXTRACTOR_SEED = 17

_ZERO_TOL = 1e-10


@dataclass
class FeatureMoments:
    mu: np.ndarray      # (d,)
    sigma: np.ndarray   # (d, d), symmetric
    n: int


def moments(features: np.ndarray) -> FeatureMoments:
    """Mean and unbiased covariance of row features, symmetrized."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError("need at least 2 feature vectors")
    mu = features.mean(axis=0)
    sigma = np.cov(features, rowvar=False)
    sigma = np.atleast_2d(sigma)
    sigma = (sigma + sigma.T) / 2.0
    return FeatureMoments(mu=mu, sigma=sigma, n=features.shape[0])


def _psd_sqrt(sym: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    root = (vecs * np.sqrt(vals)) @ vecs.T
    return (root + root.T) / 2.0


def frechet_distance(a: FeatureMoments, b: FeatureMoments) -> float:
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    mean_term = float(np.sum((a.mu - b.mu) ** 2))
    root_a = _psd_sqrt(a.sigma)
    inner = root_a @ b.sigma @ root_a
    inner = (inner + inner.T) / 2.0
    vals = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    d2 = mean_term + float(np.trace(a.sigma) + np.trace(b.sigma)) - 2.0 * float(np.sum(np.sqrt(vals)))
    if d2 < _ZERO_TOL:
        return 0.0
    return d2


class FeatureExtractor:
    """Frozen random conv features for one input shape.

    Weights are drawn once from the given seed, so identical inputs always
    map to identical features; safe to share across threads read-only.
    """

    CHANNELS = (16, 32)

    def __init__(self, mode: str, shape: tuple[int, ...], seed: int = DEFAULT_EXTRACTOR_SEED,
                 dim: int = DEFAULT_FEATURE_DIM):
        if mode not in ("3d", "2d"):
            raise ValueError(f"mode must be '3d' or '2d', got {mode!r}")
        ndim = 3 if mode == "3d" else 2
        if len(shape) != ndim:
            raise ValueError(f"{mode} extractor needs {ndim}D shape, got {shape}")
        self.mode = mode
        self.shape = tuple(shape)
        self.seed = seed
        self.dim = dim
        gen = torch.Generator().manual_seed(seed)
        chans = (1,) + self.CHANNELS + (dim,)
        kshape = (3,) * ndim
        self.weights = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            w = torch.empty(cout, cin, *kshape)
            fan_in = cin * 3**ndim
            w.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
            b = torch.empty(cout).uniform_(-0.1, 0.1, generator=gen)
            self.weights.append((w, b))

    def extract(self, batch: np.ndarray) -> np.ndarray:
        """Features for a batch of inputs, shape (n, *self.shape) -> (n, dim)."""
        batch = np.asarray(batch, dtype=np.float32)
        if batch.shape[1:] != self.shape:
            raise ValueError(f"expected inputs of shape {self.shape}, got {batch.shape[1:]}")
        conv = F.conv3d if self.mode == "3d" else F.conv2d
        with torch.no_grad():
            x = torch.from_numpy(batch).unsqueeze(1)
            for w, b in self.weights:
                x = conv(x, w, b, stride=2, padding=1)
                x = F.leaky_relu(x, 0.2)
            feats = x.flatten(2).mean(dim=2)
        return feats.double().numpy()


_EXTRACTOR_CACHE: dict[tuple, FeatureExtractor] = {}


def get_extractor(mode: str, shape: tuple[int, ...], seed: int = DEFAULT_EXTRACTOR_SEED,
                  dim: int = DEFAULT_FEATURE_DIM) -> FeatureExtractor:
    key = (mode, tuple(shape), seed, dim)
    if key not in _EXTRACTOR_CACHE:
        _EXTRACTOR_CACHE[key] = FeatureExtractor(mode, shape, seed, dim)
    return _EXTRACTOR_CACHE[key]


def _as_voxel_array(volumes) -> np.ndarray:
    arrs = [v.voxels if hasattr(v, "voxels") else np.asarray(v) for v in volumes]
    return np.stack(arrs)


def _slices_of(batch: np.ndarray, stride: int) -> np.ndarray:
    # axial slices along the first (depth) axis, pooled as independent samples
    return batch[:, ::stride].reshape(-1, *batch.shape[2:])


def set_features(volumes, mode: str = "3d", seed: int = DEFAULT_EXTRACTOR_SEED,
                 dim: int = DEFAULT_FEATURE_DIM, slice_stride: int = 1,
                 batch_size: int = 64) -> np.ndarray:
    batch = _as_voxel_array(volumes)
    if mode == "2d":
        batch = _slices_of(batch, slice_stride)
    ex = get_extractor(mode, batch.shape[1:], seed, dim)
    chunks = [ex.extract(batch[i:i + batch_size]) for i in range(0, len(batch), batch_size)]
    return np.concatenate(chunks, axis=0)


def fid_between_sets(real, gen, mode: str = "3d", seed: int = DEFAULT_EXTRACTOR_SEED,
                     dim: int = DEFAULT_FEATURE_DIM, slice_stride: int = 1) -> float:
    """FID between two sets of volumes (or raw voxel arrays)."""
    if len(real) == 0 or len(gen) == 0:
        raise ValueError("both volume sets must be nonempty")
    fr = set_features(real, mode, seed, dim, slice_stride)
    fg = set_features(gen, mode, seed, dim, slice_stride)
    if len(fr) < 2 or len(fg) < 2:
        raise ValueError("need at least 2 samples per side after slicing")
    return frechet_distance(moments(fr), moments(fg))

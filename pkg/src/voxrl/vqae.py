"""3D vector-quantized autoencoder.

Compresses volumes into a discrete latent grid and defines the
reconstruction fidelity limit that latent diffusion cannot surpass.
Codebook entries are updated by exponential moving average; the encoder
receives gradients through the straight-through estimator, plus a
commitment term pulling encoder outputs toward their assigned entries.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import fid as fid_mod
from .checkpoint import arrays_to_torch_state, load_archive, make_meta, save_archive, torch_state_to_arrays
from .nets import VolumeDecoder, VolumeEncoder
from .volumes import DatasetSplit, VolumeStore


@dataclass
class VQAEConfig:
    volume_size: int = 32
    factor: int = 4
    latent_channels: int = 8
    codebook_size: int = 128
    hidden: int = 32
    commitment: float = 0.25
    ema_decay: float = 0.99
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0

    @property
    def latent_size(self) -> int:
        return self.volume_size // self.factor


@dataclass
class LatentGrid:
    values: np.ndarray               # (C, d, h, w) float32
    quantized: bool
    indices: np.ndarray | None = None  # (d, h, w) int64 when quantized


class Codebook:
    """K entries of dimension C with EMA statistics and usage counters."""

    def __init__(self, size: int, dim: int):
        if size < 2:
            raise ValueError("codebook needs at least 2 entries")
        self.entries = torch.zeros(size, dim)
        self.ema_counts = torch.zeros(size)
        self.ema_sums = torch.zeros(size, dim)
        self.usage_counts = np.zeros(size, dtype=np.int64)
        self.initialized = False

    def init_from(self, vectors: torch.Tensor, gen: torch.Generator) -> None:
        k = self.entries.shape[0]
        idx = torch.randint(0, vectors.shape[0], (k,), generator=gen)
        self.entries = vectors[idx].clone()
        self.ema_counts = torch.ones(k)
        self.ema_sums = self.entries.clone()
        self.initialized = True

    def nearest(self, vectors: torch.Tensor) -> torch.Tensor:
        """Index of the nearest entry per row; ties resolve to the lowest index."""
        d2 = (vectors.square().sum(1, keepdim=True)
              - 2.0 * vectors @ self.entries.T
              + self.entries.square().sum(1))
        return d2.argmin(dim=1)

    def ema_update(self, vectors: torch.Tensor, indices: torch.Tensor, decay: float) -> None:
        k = self.entries.shape[0]
        onehot = torch.zeros(vectors.shape[0], k).scatter_(1, indices[:, None], 1.0)
        counts = onehot.sum(0)
        sums = onehot.T @ vectors
        self.ema_counts.mul_(decay).add_(counts, alpha=1 - decay)
        self.ema_sums.mul_(decay).add_(sums, alpha=1 - decay)
        active = self.ema_counts > 1e-6
        self.entries[active] = self.ema_sums[active] / self.ema_counts[active, None]

    def record_usage(self, indices: torch.Tensor) -> None:
        self.usage_counts += np.bincount(indices.numpy(), minlength=len(self.usage_counts))

    def reset_usage(self) -> None:
        self.usage_counts[:] = 0


class VQAutoencoder:
    def __init__(self, config: VQAEConfig):
        self.config = config
        torch.manual_seed(config.seed)
        self.encoder = VolumeEncoder(config.latent_channels, config.hidden, config.factor)
        self.decoder = VolumeDecoder(config.latent_channels, config.hidden, config.factor)
        self.codebook = Codebook(config.codebook_size, config.latent_channels)
        self.epochs_trained = 0
        self.loss_log: list[float] = []
        self.eval()

    def eval(self) -> "VQAutoencoder":
        self.encoder.eval()
        self.decoder.eval()
        return self

    @property
    def trained(self) -> bool:
        return self.epochs_trained > 0

    # --- tensor-level ops (batched, torch) -------------------------------

    def encode_batch(self, voxels: torch.Tensor) -> torch.Tensor:
        s = self.config.volume_size
        if voxels.shape[-3:] != (s, s, s):
            raise ValueError(f"expected {s}^3 volumes, got {tuple(voxels.shape[-3:])}")
        return self.encoder(voxels[:, None])

    def quantize_batch(self, z: torch.Tensor, straight_through: bool = False,
                       update_ema: bool = False):
        b, c = z.shape[0], z.shape[1]
        flat = z.permute(0, 2, 3, 4, 1).reshape(-1, c)
        idx = self.codebook.nearest(flat)
        self.codebook.record_usage(idx)
        if update_ema:
            self.codebook.ema_update(flat.detach(), idx, self.config.ema_decay)
        q = self.codebook.entries[idx].reshape(b, *z.shape[2:], c).permute(0, 4, 1, 2, 3)
        if straight_through:
            q = z + (q - z).detach()
        return q, idx.reshape(b, *z.shape[2:])

    def decode_batch(self, z: torch.Tensor) -> torch.Tensor:
        d = self.config.latent_size
        if z.shape[1:] != (self.config.latent_channels, d, d, d):
            raise ValueError(f"latent shape {tuple(z.shape[1:])} does not match "
                             f"({self.config.latent_channels}, {d}, {d}, {d})")
        return self.decoder(z)[:, 0]

    # --- volume-level ops (numpy in / numpy out) --------------------------

    def encode(self, volume) -> LatentGrid:
        voxels = volume.voxels if hasattr(volume, "voxels") else np.asarray(volume)
        with torch.no_grad():
            z = self.encode_batch(torch.from_numpy(voxels.astype(np.float32))[None])
        return LatentGrid(values=z[0].numpy(), quantized=False)

    def quantize(self, z: LatentGrid) -> LatentGrid:
        values = torch.from_numpy(np.asarray(z.values, dtype=np.float32))[None]
        with torch.no_grad():
            q, idx = self.quantize_batch(values)
        return LatentGrid(values=q[0].numpy(), quantized=True, indices=idx[0].numpy())

    def decode(self, z: LatentGrid) -> np.ndarray:
        values = torch.from_numpy(np.asarray(z.values, dtype=np.float32))[None]
        with torch.no_grad():
            out = self.decode_batch(values)
        return out[0].numpy()

    def reconstruct_batch(self, voxels: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            z = self.encode_batch(torch.from_numpy(voxels.astype(np.float32)))
            q, _ = self.quantize_batch(z)
            out = self.decode_batch(q)
        return out.numpy()

    # --- persistence -------------------------------------------------------

    def save(self, path: Path) -> None:
        arrays = {}
        arrays.update({f"encoder/{k}": v for k, v in torch_state_to_arrays(self.encoder.state_dict()).items()})
        arrays.update({f"decoder/{k}": v for k, v in torch_state_to_arrays(self.decoder.state_dict()).items()})
        arrays["codebook/entries"] = self.codebook.entries.numpy().copy()
        arrays["codebook/ema_counts"] = self.codebook.ema_counts.numpy().copy()
        arrays["codebook/ema_sums"] = self.codebook.ema_sums.numpy().copy()
        arrays["rng/torch"] = torch.get_rng_state().numpy().copy()
        meta = make_meta("vqae", asdict(self.config), epochs=self.epochs_trained,
                         loss_log=self.loss_log)
        save_archive(path, arrays, meta)

    @classmethod
    def load(cls, path: Path) -> "VQAutoencoder":
        arrays, meta = load_archive(path)
        model = cls(VQAEConfig(**meta["config"]))
        model.encoder.load_state_dict(arrays_to_torch_state(
            {k[len("encoder/"):]: v for k, v in arrays.items() if k.startswith("encoder/")}))
        model.decoder.load_state_dict(arrays_to_torch_state(
            {k[len("decoder/"):]: v for k, v in arrays.items() if k.startswith("decoder/")}))
        model.codebook.entries = torch.from_numpy(arrays["codebook/entries"].copy())
        model.codebook.ema_counts = torch.from_numpy(arrays["codebook/ema_counts"].copy())
        model.codebook.ema_sums = torch.from_numpy(arrays["codebook/ema_sums"].copy())
        model.codebook.initialized = True
        model.epochs_trained = meta["epochs"]
        model.loss_log = list(meta.get("loss_log", []))
        return model.eval()


def train_autoencoder(split: DatasetSplit, store: VolumeStore, config: VQAEConfig,
                      out_path: Path | None = None) -> tuple[VQAutoencoder, list[float]]:
    """Train on the split's train volumes; returns the model and per-epoch losses."""
    if not split.train:
        raise ValueError("train split is empty")
    torch.manual_seed(config.seed)
    model = VQAutoencoder(config)
    model.encoder.train()
    model.decoder.train()
    voxels = np.stack([store.get(v).voxels for v in split.train])
    data = torch.from_numpy(voxels.astype(np.float32))
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(list(model.encoder.parameters()) + list(model.decoder.parameters()),
                           lr=config.lr)
    n = data.shape[0]
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=gen)
        epoch_loss, batches = 0.0, 0
        for start in range(0, n, config.batch_size):
            batch = data[order[start:start + config.batch_size]]
            z = model.encode_batch(batch)
            if not model.codebook.initialized:
                flat = z.detach().permute(0, 2, 3, 4, 1).reshape(-1, config.latent_channels)
                model.codebook.init_from(flat, gen)
            q, _ = model.quantize_batch(z, straight_through=True, update_ema=True)
            recon = model.decode_batch(q)
            rec_loss = (recon - batch).square().mean()
            commit = (z - q.detach()).square().mean()
            loss = rec_loss + config.commitment * commit
            if not torch.isfinite(loss):
                raise RuntimeError(f"autoencoder loss diverged at epoch {epoch}, "
                                   f"batch {batches}: {loss.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            batches += 1
        model.loss_log.append(epoch_loss / batches)
        model.epochs_trained = epoch + 1
    model.eval()
    if out_path is not None:
        model.save(out_path)
    return model, model.loss_log


def reconstruction_limit_fid(model: VQAutoencoder, split: DatasetSplit, store: VolumeStore,
                             extractor_seed: int = fid_mod.DEFAULT_EXTRACTOR_SEED,
                             feature_dim: int = fid_mod.DEFAULT_FEATURE_DIM) -> float:
    """FID between real test volumes and their encode-quantize-decode round trips.

    This is the fidelity limit no diffusion model sharing this autoencoder
    can beat; the reward mapping anchors to it.
    """
    if not model.trained:
        raise RuntimeError("reconstruction limit requires a trained autoencoder")
    real = np.stack([store.get(v).voxels for v in split.test])
    recon = model.reconstruct_batch(real)
    return fid_mod.fid_between_sets(real, recon, mode="3d", seed=extractor_seed, dim=feature_dim)

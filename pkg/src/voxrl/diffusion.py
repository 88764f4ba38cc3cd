"""Latent denoising diffusion: schedule, forward noising, ancestral reverse
steps (stride-aware), MSE pretraining, and the two trajectory primitives
used for reward learning (sample from pure noise; noise-then-reconstruct).

The reverse step follows the eta=1 strided form, which reduces exactly to
the DDPM posterior for stride 1:

    x0_hat = (x_t - sqrt(1 - abar_cur) * eps_hat) / sqrt(abar_cur)
    sigma^2 = (1 - abar_prev) / (1 - abar_cur) * (1 - abar_cur / abar_prev)
    mean    = sqrt(abar_prev) * x0_hat + sqrt(1 - abar_prev - sigma^2) * eps_eff
    x_prev  = mean + sigma * noise

sigma is 0 for the final step onto t=0, so the last action is deterministic
and every stochastic step has a well-defined Gaussian transition density.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import arrays_to_torch_state, load_archive, make_meta, save_archive, torch_state_to_arrays
from .nets import LatentDenoiser
from .util import derive_seed
from .vqae import VQAutoencoder
from .volumes import DatasetSplit, Volume, VolumeMeta, VolumeStore


@dataclass
class DiffusionSchedule:
    T: int
    betas: np.ndarray       # (T,) in (0, 1); betas[i] is beta_{i+1}
    alpha_bars: np.ndarray  # (T+1,) with alpha_bars[0] = 1, strictly decreasing

    @classmethod
    def linear(cls, T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.2) -> "DiffusionSchedule":
        betas = np.linspace(beta_start, beta_end, T)
        alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(T=T, betas=betas, alpha_bars=alpha_bars)

    def validate(self) -> None:
        if not (np.all(self.betas > 0) and np.all(self.betas < 1)):
            raise ValueError("betas must lie in (0, 1)")
        direct = np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])
        if np.max(np.abs(direct - self.alpha_bars)) > 1e-12:
            raise ValueError("alpha_bars inconsistent with product of (1 - beta)")
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise ValueError("alpha_bars must be strictly decreasing")
        if self.alpha_bars[-1] >= 0.01:
            raise ValueError(f"terminal alpha_bar {self.alpha_bars[-1]:.4f} >= 0.01")

    def posterior_sigma(self, cur: int, prev: int) -> float:
        """Ancestral transition std for the (cur -> prev) step; 0 when prev == 0."""
        ab_c, ab_p = self.alpha_bars[cur], self.alpha_bars[prev]
        var = (1.0 - ab_p) / (1.0 - ab_c) * (1.0 - ab_c / ab_p)
        return float(np.sqrt(max(var, 0.0)))


def timestep_plan(T: int, steps: int, mode: str = "strided") -> list[tuple[int, int]]:
    """(cur, prev) pairs for a `steps`-length reverse chain ending at 0.

    strided: evenly spaced subset of [T..0] (the default); truncated: the
    first `steps` consecutive steps from T, finishing with the clean-volume
    prediction at the stop point.
    """
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    if mode == "strided":
        ts = np.floor(np.linspace(T, 0, steps + 1) + 0.5).astype(int)
    elif mode == "truncated":
        ts = np.concatenate([np.arange(T, T - steps, -1), [0]]).astype(int)
    else:
        raise ValueError(f"unknown plan mode {mode!r}")
    if np.any(np.diff(ts) >= 0):
        raise ValueError("timestep plan is not strictly decreasing")
    return [(int(ts[i]), int(ts[i + 1])) for i in range(len(ts) - 1)]


def forward_noise(x0: np.ndarray, t: int, noise: np.ndarray,
                  schedule: DiffusionSchedule) -> np.ndarray:
    """Closed-form corruption x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    if not 0 <= t <= schedule.T:
        raise ValueError(f"t must be in [0, {schedule.T}], got {t}")
    if np.shape(noise) != np.shape(x0):
        raise ValueError("noise shape must match x0")
    ab = schedule.alpha_bars[t]
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(noise)


@dataclass
class DiffusionConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.2
    hidden: int = 48
    emb_dim: int = 64
    n_classes: int = 2
    steps: int = 5000
    batch_size: int = 16
    lr: float = 2e-4
    clip_denoised: float = 4.0
    seed: int = 0


@dataclass
class StepRecord:
    """One reverse transition, enough to recompute its log-density later."""
    t_cur: int
    t_prev: int
    x_t: torch.Tensor
    mean: torch.Tensor
    sigma: float
    x_next: torch.Tensor


class LatentDiffusion:
    """Denoiser + schedule bound to a frozen autoencoder for decode."""

    def __init__(self, config: DiffusionConfig, vqae: VQAutoencoder):
        self.config = config
        self.vqae = vqae
        self.schedule = DiffusionSchedule.linear(config.T, config.beta_start, config.beta_end)
        torch.manual_seed(config.seed)
        self.denoiser = LatentDenoiser(vqae.config.latent_channels, config.hidden,
                                       config.n_classes, config.emb_dim)
        self.denoiser.eval()
        self.latent_scale = 1.0
        self.steps_trained = 0
        self.loss_log: list[float] = []

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        d = self.vqae.config.latent_size
        return (self.vqae.config.latent_channels, d, d, d)

    def clone(self) -> "LatentDiffusion":
        other = LatentDiffusion(self.config, self.vqae)
        other.denoiser.load_state_dict({k: v.clone() for k, v in self.denoiser.state_dict().items()})
        other.latent_scale = self.latent_scale
        other.steps_trained = self.steps_trained
        return other

    # --- core reverse dynamics -------------------------------------------

    def predict_mean(self, x: torch.Tensor, t_cur: int, t_prev: int,
                     class_ids: torch.Tensor) -> tuple[torch.Tensor, float]:
        """Posterior mean of x_{t_prev} given x_{t_cur}; differentiable in the denoiser."""
        ab = self.schedule.alpha_bars
        t_batch = torch.full((x.shape[0],), float(t_cur))
        eps = self.denoiser(x, t_batch, class_ids)
        if not torch.isfinite(eps).all():
            raise RuntimeError(f"non-finite denoiser output at t={t_cur}")
        ab_c, ab_p = float(ab[t_cur]), float(ab[t_prev])
        x0 = (x - np.sqrt(1.0 - ab_c) * eps) / np.sqrt(ab_c)
        c = self.config.clip_denoised
        x0 = x0.clamp(-c, c)
        eps_eff = (x - np.sqrt(ab_c) * x0) / np.sqrt(1.0 - ab_c)
        sigma = self.schedule.posterior_sigma(t_cur, t_prev)
        dir_coef = np.sqrt(max(1.0 - ab_p - sigma**2, 0.0))
        mean = np.sqrt(ab_p) * x0 + dir_coef * eps_eff
        return mean, sigma

    def reverse_step(self, x_t: np.ndarray, t: int, noise: np.ndarray, class_id: int = 0,
                     t_prev: int | None = None) -> tuple[np.ndarray, np.ndarray, float]:
        """Single ancestral step; returns (x_prev, mean, sigma)."""
        if not 1 <= t <= self.schedule.T:
            raise ValueError(f"t must be in [1, {self.schedule.T}], got {t}")
        t_prev = t - 1 if t_prev is None else t_prev
        x = torch.from_numpy(np.asarray(x_t, dtype=np.float32))[None]
        with torch.no_grad():
            mean, sigma = self.predict_mean(x, t, t_prev, torch.tensor([class_id]))
        mean = mean[0].numpy()
        x_prev = mean + sigma * np.asarray(noise, dtype=np.float32) if sigma > 0 else mean.copy()
        return x_prev, mean, sigma

    def run_chain(self, x: torch.Tensor, plan: list[tuple[int, int]], class_ids: torch.Tensor,
                  gens: list[torch.Generator], record: list[StepRecord] | None = None) -> torch.Tensor:
        """Run a reverse chain with one RNG stream per batch element."""
        shape = x.shape[1:]
        for cur, prev in plan:
            with torch.no_grad():
                mean, sigma = self.predict_mean(x, cur, prev, class_ids)
            if sigma > 0:
                noise = torch.stack([torch.randn(shape, generator=g) for g in gens])
                x_next = mean + sigma * noise
            else:
                x_next = mean
            if record is not None:
                record.append(StepRecord(cur, prev, x, mean, sigma, x_next))
            x = x_next
            if not torch.isfinite(x).all():
                raise RuntimeError(f"non-finite latent after step t={cur}")
        return x

    # --- volume-level sampling --------------------------------------------

    def decode_latents(self, x: torch.Tensor) -> np.ndarray:
        """Scaled diffusion latents -> volumes (snap to codebook, then decode)."""
        with torch.no_grad():
            z = x / self.latent_scale
            q, _ = self.vqae.quantize_batch(z)
            vols = self.vqae.decode_batch(q)
        return vols.numpy()

    def sample_synthetic(self, n: int, steps: int, class_id: int, seed: int,
                         plan_mode: str = "strided") -> list[Volume]:
        """Denoise pure Gaussian noise for `steps` steps, decode to volumes."""
        plan = timestep_plan(self.schedule.T, steps, plan_mode)
        gens = [torch.Generator().manual_seed(derive_seed(seed, "syn", class_id, i))
                for i in range(n)]
        x = torch.stack([torch.randn(self.latent_shape, generator=g) for g in gens])
        class_ids = torch.full((n,), class_id, dtype=torch.long)
        x = self.run_chain(x, plan, class_ids, gens)
        vols = self.decode_latents(x)
        return [Volume(voxels=vols[i], label=class_id,
                       meta=VolumeMeta(source="synthetic", seed=derive_seed(seed, "syn", class_id, i),
                                       step_count=steps))
                for i in range(n)]

    def noised_reconstruction_batch(self, volumes: list[Volume], k: int, seed: int) -> list[Volume]:
        """Forward-noise real volumes to step k, then denoise back k steps."""
        if not 1 <= k <= self.schedule.T - 1:
            raise ValueError(f"k must be in [1, {self.schedule.T - 1}], got {k}")
        voxels = np.stack([v.voxels for v in volumes])
        with torch.no_grad():
            z = self.vqae.encode_batch(torch.from_numpy(voxels.astype(np.float32)))
            q, _ = self.vqae.quantize_batch(z)
            x0 = q * self.latent_scale
        gens = [torch.Generator().manual_seed(derive_seed(seed, "rec", k, i))
                for i in range(len(volumes))]
        ab_k = float(self.schedule.alpha_bars[k])
        noise = torch.stack([torch.randn(self.latent_shape, generator=g) for g in gens])
        x = np.sqrt(ab_k) * x0 + np.sqrt(1.0 - ab_k) * noise
        plan = [(t, t - 1) for t in range(k, 0, -1)]
        class_ids = torch.tensor([v.label for v in volumes], dtype=torch.long)
        x = self.run_chain(x, plan, class_ids, gens)
        out = self.decode_latents(x)
        return [Volume(voxels=out[i], label=volumes[i].label,
                       meta=VolumeMeta(source="reconstruction",
                                       seed=derive_seed(seed, "rec", k, i), step_count=k))
                for i in range(len(volumes))]

    def noised_reconstruction(self, volume: Volume, k: int, seed: int) -> Volume:
        return self.noised_reconstruction_batch([volume], k, seed)[0]

    # --- persistence -------------------------------------------------------

    def save(self, path: Path) -> None:
        arrays = {f"denoiser/{k}": v
                  for k, v in torch_state_to_arrays(self.denoiser.state_dict()).items()}
        arrays["rng/torch"] = torch.get_rng_state().numpy().copy()
        meta = make_meta("diffusion", asdict(self.config),
                         latent_scale=self.latent_scale, steps_trained=self.steps_trained,
                         loss_log=self.loss_log,
                         vqae_config=asdict(self.vqae.config))
        save_archive(path, arrays, meta)

    @classmethod
    def load(cls, path: Path, vqae: VQAutoencoder) -> "LatentDiffusion":
        arrays, meta = load_archive(path)
        model = cls(DiffusionConfig(**meta["config"]), vqae)
        model.denoiser.load_state_dict(arrays_to_torch_state(
            {k[len("denoiser/"):]: v for k, v in arrays.items() if k.startswith("denoiser/")}))
        model.denoiser.eval()
        model.latent_scale = meta["latent_scale"]
        model.steps_trained = meta["steps_trained"]
        model.loss_log = list(meta.get("loss_log", []))
        return model


def encode_split_latents(vqae: VQAutoencoder, split: DatasetSplit, store: VolumeStore,
                         which: str = "train") -> tuple[torch.Tensor, torch.Tensor]:
    """Quantized latents and labels for one side of a split."""
    ids = split.train if which == "train" else split.test
    voxels = np.stack([store.get(v).voxels for v in ids])
    labels = torch.tensor([store.get(v).label for v in ids], dtype=torch.long)
    lats = []
    with torch.no_grad():
        for i in range(0, len(voxels), 32):
            z = vqae.encode_batch(torch.from_numpy(voxels[i:i + 32].astype(np.float32)))
            q, _ = vqae.quantize_batch(z)
            lats.append(q)
    return torch.cat(lats), labels


def pretrain_diffusion(split: DatasetSplit, store: VolumeStore, vqae: VQAutoencoder,
                       config: DiffusionConfig, out_path: Path | None = None
                       ) -> tuple[LatentDiffusion, list[float]]:
    """Standard epsilon-prediction MSE training; the result is the reference policy."""
    if not vqae.trained:
        raise RuntimeError("diffusion pretraining requires a trained autoencoder")
    torch.manual_seed(config.seed)
    model = LatentDiffusion(config, vqae)
    model.denoiser.train()
    latents, labels = encode_split_latents(vqae, split, store, "train")
    model.latent_scale = float(1.0 / (latents.std().item() + 1e-8))
    x0_all = latents * model.latent_scale
    n = x0_all.shape[0]
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.denoiser.parameters(), lr=config.lr)
    ab = torch.from_numpy(model.schedule.alpha_bars).float()
    for step in range(config.steps):
        idx = torch.randint(0, n, (min(config.batch_size, n),), generator=gen)
        x0 = x0_all[idx]
        t = torch.randint(1, config.T + 1, (x0.shape[0],), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        ab_t = ab[t][:, None, None, None, None]
        x_t = ab_t.sqrt() * x0 + (1 - ab_t).sqrt() * eps
        pred = model.denoiser(x_t, t.float(), labels[idx])
        loss = (pred - eps).square().mean()
        if not torch.isfinite(loss):
            raise RuntimeError(f"diffusion loss diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        model.loss_log.append(loss.item())
    model.denoiser.eval()
    model.steps_trained = config.steps
    if out_path is not None:
        model.save(out_path)
    return model, model.loss_log

"""Denoising diffusion over the autoencoder's continuous latent volumes.

The noise schedule is the squared-cosine profile with offset s, renormalized
so the signal fraction is exactly 1 at step 0; per-step betas are clipped
at 0.999 to keep the terminal signal fraction positive.  Forward noising is
variance preserving, the training objective is mean squared error on the
injected noise, and sampling runs the ancestral reverse chain from pure
Gaussian noise.

Latents are standardized per channel before diffusion; the statistics
travel with the checkpoint so that sampled latents are mapped back, snapped
to the codebook, and decoded into teeth models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from orthosynth import autodiff as ad
from orthosynth.autodiff import Tensor, backward
from orthosynth.geometry import TeethModel
from orthosynth.layers import ConfigError, Module, VolumeNet, timestep_embedding
from orthosynth.optim import AdamW


class ScheduleError(ValueError):
    pass


class SamplingDivergenceError(RuntimeError):
    pass


class CheckpointCompatError(ValueError):
    pass


DEFAULT_T = 200
COSINE_OFFSET = 0.008
MAX_BETA = 0.999


def _cosine_profile(t: np.ndarray, T: int, s: float) -> np.ndarray:
    return np.cos((t / T + s) / (1.0 + s) * np.pi / 2.0) ** 2


@dataclass
class NoiseSchedule:
    """Tabulated signal fractions and derived per-step quantities.

    ``alpha_bar[t]`` is the squared signal coefficient after t steps:
    strictly decreasing, exactly 1 at t=0, tiny but positive at t=T.
    """

    T: int
    alpha_bar: np.ndarray  # (T+1,)
    betas: np.ndarray  # (T,) indexed by t-1

    @classmethod
    def cosine(cls, T: int = DEFAULT_T, s: float = COSINE_OFFSET) -> "NoiseSchedule":
        if T < 1:
            raise ScheduleError(f"T must be >= 1, got {T}")
        t = np.arange(T + 1, dtype=np.float64)
        f = _cosine_profile(t, T, s)
        raw = f / f[0]
        betas = np.minimum(1.0 - raw[1:] / raw[:-1], MAX_BETA)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(T=T, alpha_bar=alpha_bar, betas=betas)

    def signal(self, t) -> np.ndarray:
        """alpha coefficient sqrt(alpha_bar[t])."""
        return np.sqrt(self.alpha_bar[t])

    def sigma(self, t) -> np.ndarray:
        """noise coefficient sqrt(1 - alpha_bar[t])."""
        return np.sqrt(1.0 - self.alpha_bar[t])


def cosine_alpha_bar(t: int, T: int = DEFAULT_T, s: float = COSINE_OFFSET) -> float:
    """Signal fraction after ``t`` of ``T`` steps under the cosine schedule."""
    if not 0 <= t <= T:
        raise ScheduleError(f"t must be in [0,{T}], got {t}")
    return float(NoiseSchedule.cosine(T, s).alpha_bar[t])


def forward_noise(x0: np.ndarray, t: int, noise: np.ndarray,
                  schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ScheduleError(f"shape mismatch {x0.shape} vs {noise.shape}")
    if not 0 <= t <= schedule.T:
        raise ScheduleError(f"t must be in [0,{schedule.T}], got {t}")
    return schedule.signal(t) * x0 + schedule.sigma(t) * noise


def diffusion_loss(denoiser, x0_batch: np.ndarray, schedule: NoiseSchedule,
                   rng: np.random.Generator) -> Tensor:
    """Noise-prediction objective: draw t uniform in [1,T] and unit noise
    per sample, return the mean squared prediction error."""
    x0 = np.asarray(x0_batch, dtype=np.float64)
    b = x0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=b)
    noise = rng.standard_normal(x0.shape)
    sig = schedule.signal(t).reshape((b,) + (1,) * (x0.ndim - 1))
    sg = schedule.sigma(t).reshape((b,) + (1,) * (x0.ndim - 1))
    x_t = sig * x0 + sg * noise
    pred = denoiser(x_t, t)
    err = pred - Tensor(noise)
    return (err * err).mean()


def sample(denoiser, schedule: NoiseSchedule, shape, seed: int) -> np.ndarray:
    """Ancestral reverse chain from x_T ~ N(0, I); deterministic per seed.

    ``denoiser(x_t, t_array)`` must return the noise estimate as an array
    or Tensor of the same shape.  Raises
    :class:`SamplingDivergenceError` (with the step index) if the chain
    leaves the finite range.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    b = shape[0]
    ab = schedule.alpha_bar
    for t in range(schedule.T, 0, -1):
        eps_hat = denoiser(x, np.full(b, t))
        if isinstance(eps_hat, Tensor):
            eps_hat = eps_hat.data
        beta = schedule.betas[t - 1]
        alpha = 1.0 - beta
        mean = (x - beta / np.sqrt(1.0 - ab[t]) * eps_hat) / np.sqrt(alpha)
        if t > 1:
            post_var = beta * (1.0 - ab[t - 1]) / (1.0 - ab[t])
            x = mean + np.sqrt(post_var) * rng.standard_normal(shape)
        else:
            x = mean
        if not np.all(np.isfinite(x)):
            raise SamplingDivergenceError(f"non-finite state at step t={t}")
    return x


@dataclass
class DiffusionConfig:
    T: int = DEFAULT_T
    width: int = 24
    temb_dim: int = 16
    epochs: int = 300
    batch_size: int = 20
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0

    @classmethod
    def desk(cls, **overrides) -> "DiffusionConfig":
        base = dict(T=DEFAULT_T, width=16, temb_dim=16, epochs=240,
                    batch_size=20, lr=2e-3)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dict(vars(self))


class LatentDenoiser(Module):
    """Residual volume network conditioned on a sinusoidal step embedding."""

    def __init__(self, channels: int, config: DiffusionConfig, rng):
        self.net = VolumeNet(channels, channels, config.width, rng,
                             residual=True, temb_dim=config.temb_dim)
        self.temb_dim = config.temb_dim
        self.channels = channels

    def __call__(self, x_t, t) -> Tensor:
        x_t = ad.as_tensor(x_t)
        temb = Tensor(timestep_embedding(t, self.temb_dim))
        return self.net(x_t, temb)


@dataclass
class DiffusionCheckpoint:
    config: DiffusionConfig
    channels: int
    latent_shape: tuple
    latent_mean: np.ndarray  # per channel
    latent_std: np.ndarray  # per channel
    params: dict[str, np.ndarray]
    loss_curve: list = field(default_factory=list)

    def build(self) -> LatentDenoiser:
        net = LatentDenoiser(self.channels, self.config,
                             np.random.default_rng(self.config.seed))
        net.net.load_state({k.removeprefix("net."): v for k, v in self.params.items()})
        return net


def train_diffusion(latents: np.ndarray, config: DiffusionConfig,
                    seed: int | None = None) -> DiffusionCheckpoint:
    """Fit the denoiser to a stack of latent volumes (N, D0, D1, D2, F).

    Latents are standardized per channel; the chain length, capacity and
    optimizer settings come from ``config``.  Deterministic per seed.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 5:
        raise ConfigError(f"latents must be (N,D0,D1,D2,F), got {latents.shape}")
    if seed is None:
        seed = config.seed
    n = latents.shape[0]
    channels = latents.shape[-1]
    mean = latents.mean(axis=(0, 1, 2, 3))
    std = np.maximum(latents.std(axis=(0, 1, 2, 3)), 1e-6)
    z = (latents - mean) / std

    rng = np.random.default_rng(seed)
    schedule = NoiseSchedule.cosine(config.T)
    denoiser = LatentDenoiser(channels, config, rng)
    opt = AdamW(denoiser.net.named_parameters(), lr=config.lr,
                weight_decay=config.weight_decay)
    curve = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        steps = 0
        for lo in range(0, n, config.batch_size):
            batch = z[order[lo:lo + config.batch_size]]
            loss = diffusion_loss(denoiser, batch, schedule, rng)
            opt.zero_grad()
            backward(loss)
            opt.step()
            epoch_loss += float(loss.data)
            steps += 1
        curve.append(epoch_loss / steps)
    return DiffusionCheckpoint(
        config=config,
        channels=channels,
        latent_shape=tuple(latents.shape[1:]),
        latent_mean=mean,
        latent_std=std,
        params={f"net.{k}": v for k, v in denoiser.net.state().items()},
        loss_curve=curve,
    )


def sample_latents(ckpt: DiffusionCheckpoint, count: int, seed: int) -> np.ndarray:
    """Draw latent volumes from the trained chain (un-standardized)."""
    if count == 0:
        return np.zeros((0,) + ckpt.latent_shape)
    denoiser = ckpt.build()
    schedule = NoiseSchedule.cosine(ckpt.config.T)
    z = sample(denoiser, schedule, (count,) + ckpt.latent_shape, seed)
    return z * ckpt.latent_std + ckpt.latent_mean


def generate_post_model(diffusion_ckpt: DiffusionCheckpoint, vqvae_ckpt,
                        count: int, seed: int):
    """Sample latents, quantize them with the frozen codebook, and decode
    aligned teeth models plus validity masks.

    Returns ``(models, provenance)`` where provenance records the seed and
    both checkpoint content hashes when available.
    """
    from orthosynth.vqvae import VqVae  # deferred: avoids import cycle

    if tuple(diffusion_ckpt.latent_shape) != tuple(vqvae_ckpt.latent_shape()):
        raise CheckpointCompatError(
            f"latent shapes differ: diffusion {diffusion_ckpt.latent_shape} "
            f"vs autoencoder {vqvae_ckpt.latent_shape()}")
    vq = VqVae.from_checkpoint(vqvae_ckpt)
    latents = sample_latents(diffusion_ckpt, count, seed)
    models: list[TeethModel] = []
    if count:
        quant, _ = vq.quantize_array(latents)
        points, mask_logits = vq.decode_array(quant)
        for i in range(count):
            models.append(vq.assemble_model(points[i], mask_logits[i]))
    provenance = {
        "seed": int(seed),
        "count": int(count),
        "diffusion_config": diffusion_ckpt.config.to_dict(),
        "unit_scale": float(vqvae_ckpt.unit_scale),
    }
    return models, provenance

"""Discrete-latent autoencoder for structured teeth point clouds.

The encoder turns a normalized model into tooth-wise voxel features, runs
them through a volume network, and emits a continuous latent volume over
the macro lattice.  A learned codebook snaps each voxel's latent to its
nearest entry (ties to the lowest code index) with a straight-through
gradient; the decoder maps quantized volumes back to per-tooth point
clouds anchored at learned slot centers, plus one validity logit per
slot.

Training minimizes per-tooth Chamfer reconstruction over the valid slots,
the codebook and commitment terms, and a binary cross-entropy on the mask
logits.  Codebook entries unused for an entire epoch are reseeded from
the epoch's encoder outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from orthosynth import autodiff as ad
from orthosynth import metrics
from orthosynth.autodiff import Tensor, backward
from orthosynth.geometry import K_SLOTS, TeethModel, ToothMask
from orthosynth.layers import MLP, ConfigError, Module, PointEncoder, VolumeNet
from orthosynth.optim import AdamW, TrainingDivergenceError
from orthosynth.voxelize import (
    arrange_tooth_blocks,
    extract_tooth_blocks,
    macro_dims,
    voxelize_tooth_wise_batch,
)

MASK_THRESHOLD_LOGIT = 0.0  # sigmoid 0.5


@dataclass
class VqVaeConfig:
    r: int = 4
    layout: str = "2x2x8"
    n_points: int = 128
    point_feat: int = 32
    width: int = 32
    latent_dim: int = 64
    codebook_size: int = 256
    beta: float = 0.25
    decoder_width: int = 32
    head_hidden: int = 96
    mask_hidden: int = 16
    epochs: int = 200
    batch_size: int = 10
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0

    @classmethod
    def desk(cls, **overrides) -> "VqVaeConfig":
        base = dict(r=2, point_feat=12, width=14, latent_dim=6,
                    codebook_size=64, decoder_width=16, head_hidden=96,
                    epochs=200, batch_size=10, lr=2e-3)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dict(vars(self))

    def macro(self) -> tuple[int, int, int]:
        return macro_dims(self.layout, self.r)


@dataclass
class Codebook:
    entries: np.ndarray  # (C, F)
    usage: np.ndarray  # (C,) int

    @classmethod
    def init(cls, size: int, dim: int, rng) -> "Codebook":
        return cls(entries=rng.normal(scale=0.5, size=(size, dim)),
                   usage=np.zeros(size, dtype=np.int64))


@dataclass
class LatentVolume:
    """Continuous latents over the macro lattice, with quantization
    results filled in by :func:`quantize`."""

    continuous: np.ndarray  # (D0, D1, D2, F)
    code_indices: np.ndarray | None = None
    quantized: np.ndarray | None = None


@dataclass
class ReconstructionOutput:
    model: TeethModel
    mask_logits: np.ndarray  # (32,)


@dataclass
class VqVaeLossComponents:
    reconstruction: float
    codebook: float
    commitment: float
    mask_bce: float

    @property
    def total(self) -> float:
        return self.reconstruction + self.codebook + self.commitment + self.mask_bce


def nearest_code_indices(flat_latents: np.ndarray, entries: np.ndarray,
                         chunk: int = 4096) -> np.ndarray:
    """Index of the nearest codebook entry per row (lowest index on ties)."""
    out = np.empty(flat_latents.shape[0], dtype=np.int64)
    for lo in range(0, flat_latents.shape[0], chunk):
        block = flat_latents[lo:lo + chunk]
        d = ((block[:, None, :] - entries[None, :, :]) ** 2).sum(axis=-1)
        out[lo:lo + chunk] = d.argmin(axis=1)
    return out


class VqVae(Module):
    def __init__(self, config: VqVaeConfig, rng=None):
        if rng is None:
            rng = np.random.default_rng(config.seed)
        self.config = config
        self.point_encoder = PointEncoder(config.point_feat, rng)
        self.enc_net = VolumeNet(config.point_feat + 1, config.latent_dim,
                                 config.width, rng)
        self.codebook = Tensor(
            Codebook.init(config.codebook_size, config.latent_dim, rng).entries,
            requires_grad=True)
        self.dec_net = VolumeNet(config.latent_dim, config.decoder_width,
                                 config.width, rng)
        pooled = 2 * config.decoder_width
        self.point_head = MLP([pooled, config.head_hidden, 3 * config.n_points], rng)
        self.mask_head = MLP([pooled, config.mask_hidden, 1], rng)
        self.anchors = Tensor(np.zeros((K_SLOTS, 3)), requires_grad=True)
        self.usage = np.zeros(config.codebook_size, dtype=np.int64)

    # --------------------------------------------------------------- encode

    def encode_batch(self, models: list[TeethModel]) -> Tensor:
        cfg = self.config
        volume, occ, _ = voxelize_tooth_wise_batch(models, cfg.r,
                                                   self.point_encoder, cfg.layout)
        occ_feat = Tensor(occ[..., None] / cfg.n_points)
        stacked = ad.concat([volume, occ_feat], axis=-1)
        return self.enc_net(stacked)

    def encode(self, model: TeethModel) -> LatentVolume:
        z = self.encode_batch([model])
        return LatentVolume(continuous=z.data[0])

    # ------------------------------------------------------------- quantize

    def quantize_array(self, latents: np.ndarray):
        """Nearest-entry snap of (..., F) latents; returns (quantized, indices)."""
        entries = self.codebook.data
        flat = latents.reshape(-1, entries.shape[1])
        idx = nearest_code_indices(flat, entries)
        quant = entries[idx].reshape(latents.shape)
        return quant, idx.reshape(latents.shape[:-1])

    def quantize_tensor(self, z: Tensor):
        """Training path: straight-through quantized tensor plus the
        gathered entries (graph node, so the codebook learns) and indices."""
        quant_data, idx = self.quantize_array(z.data)
        gathered = self.codebook[idx.reshape(-1)]
        st = ad.straight_through(z, quant_data)
        return st, gathered, idx

    # --------------------------------------------------------------- decode

    def decode_features(self, z_q: Tensor):
        cfg = self.config
        dec = self.dec_net(z_q)
        blocks = extract_tooth_blocks(dec, cfg.layout, cfg.r)
        b = blocks.shape[0]
        flat = blocks.reshape((b, K_SLOTS, cfg.r ** 3, cfg.decoder_width))
        pooled = ad.concat([flat.max(axis=2), flat.mean(axis=2)], axis=-1)
        offsets = self.point_head(pooled).reshape((b, K_SLOTS, cfg.n_points, 3))
        points = offsets + self.anchors.reshape((1, K_SLOTS, 1, 3))
        logits = self.mask_head(pooled).reshape((b, K_SLOTS))
        return points, logits

    def decode_array(self, quantized: np.ndarray):
        if quantized.ndim == 4:
            quantized = quantized[None]
        points, logits = self.decode_features(Tensor(quantized))
        return points.data, logits.data

    def assemble_model(self, points: np.ndarray, mask_logits: np.ndarray,
                       unit_scale: float = 1.0) -> TeethModel:
        valid = mask_logits > MASK_THRESHOLD_LOGIT
        pts = points.copy()
        pts[~valid] = 0.0
        return TeethModel(pts, ToothMask(valid), unit_scale=unit_scale)

    def decode(self, latent: LatentVolume, unit_scale: float = 1.0) -> ReconstructionOutput:
        source = latent.quantized if latent.quantized is not None else latent.continuous
        points, logits = self.decode_array(source)
        return ReconstructionOutput(
            model=self.assemble_model(points[0], logits[0], unit_scale),
            mask_logits=logits[0],
        )

    @classmethod
    def from_checkpoint(cls, ckpt: "VqVaeCheckpoint") -> "VqVae":
        vq = cls(ckpt.config)
        vq.load_state(ckpt.params)
        return vq

    # --------------------------------------------------------------- losses

    def loss_batch(self, models: list[TeethModel]):
        cfg = self.config
        z_e = self.encode_batch(models)
        z_q, gathered, idx = self.quantize_tensor(z_e)
        np.add.at(self.usage, idx.reshape(-1), 1)
        points, logits = self.decode_features(z_q)

        targets = np.stack([m.points for m in models])
        valid = np.stack([m.mask.valid for m in models]).astype(np.float64)

        recon = _chamfer_loss(points, targets, valid)
        flat_e = z_e.reshape((-1, cfg.latent_dim))
        diff_cb = gathered - flat_e.detach()
        codebook_term = (diff_cb * diff_cb).mean()
        diff_commit = flat_e - gathered.detach()
        commit_term = (diff_commit * diff_commit).mean() * cfg.beta
        bce = _mask_bce(logits, valid)
        total = recon + codebook_term + commit_term + bce
        parts = VqVaeLossComponents(
            reconstruction=float(recon.data),
            codebook=float(codebook_term.data),
            commitment=float(commit_term.data),
            mask_bce=float(bce.data),
        )
        return total, parts


def _chamfer_loss(pred: Tensor, targets: np.ndarray, valid: np.ndarray) -> Tensor:
    """Summed per-tooth Chamfer distance over valid slots, averaged over
    the batch.  ``pred`` is (B, 32, N, 3); ``targets`` constant."""
    tgt = Tensor(targets)
    pn = (pred * pred).sum(axis=-1)  # (B,32,N)
    tn = (targets * targets).sum(axis=-1)  # const
    cross = pred @ tgt.transpose((0, 1, 3, 2))
    d = pn.reshape(pn.shape + (1,)) + Tensor(tn[:, :, None, :]) - 2.0 * cross
    cd = d.min(axis=-1).mean(axis=-1) + d.min(axis=-2).mean(axis=-1)  # (B,32)
    masked = cd * Tensor(valid)
    return masked.sum(axis=1).mean()


def _mask_bce(logits: Tensor, valid: np.ndarray) -> Tensor:
    """Stable binary cross-entropy of validity logits."""
    y = Tensor(valid)
    return (ad.softplus(logits) - logits * y).mean()


def vqvae_loss(input_model: TeethModel, output: ReconstructionOutput,
               latent: LatentVolume, codebook: Codebook,
               beta: float = 0.25):
    """Reference (non-differentiable) loss for a single model; the same
    composition the training path optimizes.  Returns (total, components).
    """
    if latent.quantized is None or latent.code_indices is None:
        raise ConfigError("latent must be quantized first")
    recon = 0.0
    for slot in input_model.valid_slots():
        recon += metrics.chamfer_distance(input_model.points[slot],
                                          output.model.points[slot])
    z = latent.continuous.reshape(-1, codebook.entries.shape[1])
    e = codebook.entries[latent.code_indices.reshape(-1)]
    codebook_term = float(((e - z) ** 2).mean())
    commit_term = float(beta * ((z - e) ** 2).mean())
    y = input_model.mask.valid.astype(np.float64)
    logits = output.mask_logits
    bce = float((np.logaddexp(0.0, logits) - logits * y).mean())
    parts = VqVaeLossComponents(recon, codebook_term, commit_term, bce)
    return parts.total, parts


def quantize(latent: LatentVolume, codebook: Codebook) -> LatentVolume:
    """Snap a latent volume to its nearest codebook entries."""
    flat = latent.continuous.reshape(-1, codebook.entries.shape[1])
    idx = nearest_code_indices(flat, codebook.entries)
    np.add.at(codebook.usage, idx, 1)
    return LatentVolume(
        continuous=latent.continuous,
        code_indices=idx.reshape(latent.continuous.shape[:-1]),
        quantized=codebook.entries[idx].reshape(latent.continuous.shape),
    )


@dataclass
class VqVaeCheckpoint:
    config: VqVaeConfig
    params: dict[str, np.ndarray]
    loss_curve: list = field(default_factory=list)
    unit_scale: float = 1.0

    def latent_shape(self) -> tuple:
        return self.config.macro() + (self.config.latent_dim,)


def encode_dataset(vq: VqVae, models: list[TeethModel], batch_size: int = 20) -> np.ndarray:
    """Continuous latents for a list of models, stacked (N, D0, D1, D2, F)."""
    out = []
    for lo in range(0, len(models), batch_size):
        out.append(vq.encode_batch(models[lo:lo + batch_size]).data)
    return np.concatenate(out, axis=0)


def train_vqvae(dataset: list[TeethModel], config: VqVaeConfig,
                seed: int | None = None) -> VqVaeCheckpoint:
    """Fit the autoencoder; deterministic per seed.

    The loss curve records per-epoch component means.  Codebook entries
    with zero usage over an epoch are reseeded from that epoch's encoder
    outputs.
    """
    if not dataset:
        raise ConfigError("dataset must be nonempty")
    if seed is None:
        seed = config.seed
    rng = np.random.default_rng(seed)
    vq = VqVae(config, np.random.default_rng(seed))
    opt = AdamW(vq.named_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    n = len(dataset)
    curve = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        vq.usage[:] = 0
        sums = np.zeros(4)
        steps = 0
        for lo in range(0, n, config.batch_size):
            batch = [dataset[i] for i in order[lo:lo + config.batch_size]]
            loss, parts = vq.loss_batch(batch)
            if not np.isfinite(loss.data):
                raise TrainingDivergenceError("non-finite autoencoder loss")
            opt.zero_grad()
            backward(loss)
            opt.step()
            sums += [parts.reconstruction, parts.codebook, parts.commitment, parts.mask_bce]
            steps += 1
        dead = np.flatnonzero(vq.usage == 0)
        if dead.size:
            latent_pool = vq.encode_batch(
                [dataset[i] for i in order[:min(config.batch_size, n)]]
            ).data.reshape(-1, config.latent_dim)
            picks = rng.integers(0, latent_pool.shape[0], size=dead.size)
            vq.codebook.data[dead] = latent_pool[picks]
        curve.append({
            "reconstruction": sums[0] / steps,
            "codebook": sums[1] / steps,
            "commitment": sums[2] / steps,
            "mask_bce": sums[3] / steps,
        })
    unit_scale = float(np.mean([m.unit_scale for m in dataset]))
    return VqVaeCheckpoint(config=config, params=vq.state(),
                           loss_curve=curve, unit_scale=unit_scale)

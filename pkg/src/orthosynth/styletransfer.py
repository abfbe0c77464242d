"""Conditional rigid-transform generation for pre-treatment arrangement.

A per-tooth style encoding is pooled from the style model: mean and
standard deviation over each tooth's voxel features, each through its
own MLP, then summed.  One global shape vector (max pool over a
whole-model voxel grid, then an MLP) summarizes the target model.  Style tokens plus
learned slot embeddings run through conditioned transformer blocks; a
zero-initialized head emits per-tooth 9-vectors as deltas from the
identity transform, so an untrained network moves nothing.

Training pairs use the disturbed model both as style input and as ground
truth: the predicted transforms are applied to the aligned model and
penalized by corresponded point distance plus a Lennard-Jones-shaped
collision term over adjacent and occlusal tooth pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from orthosynth import autodiff as ad
from orthosynth.autodiff import Tensor, backward
from orthosynth.geometry import (
    IDENTITY_6D,
    K_SLOTS,
    GridIndex,
    TeethModel,
    TransformParams,
    apply_transform,
    rotation_from_6d,
)
from orthosynth.layers import MLP, AttentionBlock, ConfigError, Linear, Module, PointEncoder
from orthosynth.metrics import MaskMismatchError
from orthosynth.optim import AdamW, TrainingDivergenceError
from orthosynth.voxelize import (
    extract_tooth_blocks,
    voxelize_global_batch,
    voxelize_tooth_wise_batch,
)


@dataclass
class StyleConfig:
    r: int = 4
    shape_dims: tuple[int, int, int] = (8, 8, 32)
    n_points: int = 128
    point_feat: int = 16
    style_feat: int = 48
    shape_feat: int = 24
    d_model: int = 64
    heads: int = 8
    blocks: int = 12
    mlp_ratio: int = 2
    head_hidden: int = 64
    s: float = 0.05
    delta: float = 0.01
    w_dis: float = 1.0
    w_ca: float = 1.0
    swap_extractors: bool = False
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-3
    lr_final_frac: float = 1.0  # linear decay of lr to lr*frac by the last epoch
    weight_decay: float = 0.0
    seed: int = 0

    @classmethod
    def desk(cls, **overrides) -> "StyleConfig":
        # w_ca rebalances the printed 1:1 loss weights for the per-point
        # normalized distance term (the unnormalized sum would be N times
        # larger, which is what the 1:1 weighting was written against)
        base = dict(r=3, shape_dims=(4, 4, 16), point_feat=20, style_feat=48,
                    shape_feat=32, d_model=64, heads=4, blocks=3,
                    head_hidden=64, epochs=80, batch_size=16, lr=2e-3,
                    lr_final_frac=0.1, w_ca=1.0 / 128)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["shape_dims"] = list(self.shape_dims)
        return d


@dataclass
class StyleEncoding:
    """Per-tooth style vectors; invalid teeth carry zeros."""

    vectors: np.ndarray  # (32, F_style)


@dataclass
class ShapeEncoding:
    """Single global conditioning vector."""

    vector: np.ndarray  # (F_shape,)


def collision_pairs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Slot pairs checked for interpenetration: within-jaw neighbours
    (consecutive positions plus the cross-midline pair at position 0) and
    occlusal pairs (same side/position across jaws).  Pairs touching
    invalid slots are dropped; no duplicates."""
    mask = np.asarray(mask, dtype=bool)
    pairs = []
    for jaw in (0, 1):
        for side in (0, 1):
            for pos in range(7):
                pairs.append((GridIndex(jaw, side, pos).flat,
                              GridIndex(jaw, side, pos + 1).flat))
        pairs.append((GridIndex(jaw, 0, 0).flat, GridIndex(jaw, 1, 0).flat))
    for side in (0, 1):
        for pos in range(8):
            pairs.append((GridIndex(0, side, pos).flat,
                          GridIndex(1, side, pos).flat))
    return [(a, b) for a, b in pairs if mask[a] and mask[b]]


class StyleExtractor(Module):
    """Mean/std pooling over per-tooth voxel features, two MLPs, summed."""

    def __init__(self, config: StyleConfig, rng):
        self.point_encoder = PointEncoder(config.point_feat, rng)
        self.mlp_mean = MLP([config.point_feat, config.style_feat, config.style_feat], rng)
        self.mlp_std = MLP([config.point_feat, config.style_feat, config.style_feat], rng)
        self.config = config

    def pooled(self, blocks: Tensor) -> Tensor:
        """(B, 32, V, F) voxel blocks -> (B, 32, F_style) encodings."""
        mu = blocks.mean(axis=2)
        centered = blocks - blocks.mean(axis=2, keepdims=True)
        std = ad.sqrt((centered * centered).mean(axis=2))
        return self.mlp_mean(mu) + self.mlp_std(std)

    def forward(self, models: list[TeethModel]) -> Tensor:
        cfg = self.config
        if cfg.swap_extractors:
            # ablation: pool over a whole-model grid instead; every tooth
            # then shares one style vector
            volume, _, _ = voxelize_global_batch(models, cfg.shape_dims,
                                                 self.point_encoder)
            b = volume.shape[0]
            flat = volume.reshape((b, 1, -1, cfg.point_feat))
            enc = self.pooled(flat)  # (B, 1, F_style)
            enc = ad.broadcast_to(enc, (b, K_SLOTS, cfg.style_feat))
        else:
            volume, _, _ = voxelize_tooth_wise_batch(models, cfg.r,
                                                     self.point_encoder)
            blocks = extract_tooth_blocks(volume, "2x2x8", cfg.r)
            b = blocks.shape[0]
            flat = blocks.reshape((b, K_SLOTS, cfg.r ** 3, cfg.point_feat))
            enc = self.pooled(flat)
        valid = np.stack([m.mask.valid for m in models]).astype(np.float64)
        return enc * Tensor(valid[:, :, None])

    __call__ = forward


class ShapeExtractor(Module):
    """Max pool across all voxels of a whole-model grid, then an MLP."""

    def __init__(self, config: StyleConfig, rng):
        self.point_encoder = PointEncoder(config.point_feat, rng)
        self.mlp = MLP([config.point_feat, config.shape_feat, config.shape_feat], rng)
        self.config = config

    def forward(self, models: list[TeethModel]) -> Tensor:
        cfg = self.config
        if cfg.swap_extractors:
            volume, _, _ = voxelize_tooth_wise_batch(models, cfg.r,
                                                     self.point_encoder)
        else:
            volume, _, _ = voxelize_global_batch(models, cfg.shape_dims,
                                                 self.point_encoder)
        b = volume.shape[0]
        flat = volume.reshape((b, -1, cfg.point_feat))
        return self.mlp(flat.max(axis=1))

    __call__ = forward


class StyleTransferNet(Module):
    def __init__(self, config: StyleConfig, rng=None):
        if rng is None:
            rng = np.random.default_rng(config.seed)
        self.config = config
        self.style_extractor = StyleExtractor(config, rng)
        self.shape_extractor = ShapeExtractor(config, rng)
        self.in_proj = Linear(config.style_feat, config.d_model, rng)
        self.pos_emb = Tensor(0.02 * rng.normal(size=(K_SLOTS, config.d_model)),
                              requires_grad=True)
        self.blocks = [
            AttentionBlock(config.d_model, config.heads, config.shape_feat, rng,
                           mlp_ratio=config.mlp_ratio)
            for _ in range(config.blocks)
        ]
        self.head = MLP([config.d_model, config.head_hidden, 9], rng, zero_last=True)

    def raw_params(self, post_models: list[TeethModel],
                   style_models: list[TeethModel]) -> Tensor:
        """Delta-from-identity 9-vectors, (B, 32, 9); rows of teeth invalid
        in the post models are zeroed."""
        style = self.style_extractor(style_models)
        shape = self.shape_extractor(post_models)
        tokens = self.in_proj(style) + self.pos_emb
        for block in self.blocks:
            tokens = block(tokens, shape)
        raw = self.head(tokens)
        post_valid = np.stack([m.mask.valid for m in post_models]).astype(np.float64)
        return raw * Tensor(post_valid[:, :, None])

    @classmethod
    def from_checkpoint(cls, ckpt: "StyleCheckpoint") -> "StyleTransferNet":
        net = cls(ckpt.config)
        net.load_state(ckpt.params)
        return net


def extract_style(net: StyleTransferNet, style_model: TeethModel) -> StyleEncoding:
    return StyleEncoding(vectors=net.style_extractor([style_model]).data[0])


def extract_shape(net: StyleTransferNet, post_model: TeethModel) -> ShapeEncoding:
    return ShapeEncoding(vector=net.shape_extractor([post_model]).data[0])


def raw_to_params(raw: np.ndarray) -> TransformParams:
    """Delta-from-identity rows -> absolute per-tooth parameters."""
    x = np.asarray(raw, dtype=np.float64).copy()
    x[:, 3:9] += IDENTITY_6D
    return TransformParams(x)


def predict_transform_params(post_model: TeethModel, style_model: TeethModel,
                             net: StyleTransferNet) -> TransformParams:
    raw = net.raw_params([post_model], [style_model]).data[0]
    return raw_to_params(raw)


def generate_pre_model(post_model: TeethModel, style_model: TeethModel,
                       net: StyleTransferNet):
    """Predict transforms and apply them; the result is rigidly consistent
    with the post model per tooth by construction and shares its mask."""
    params = predict_transform_params(post_model, style_model, net)
    return apply_transform(post_model, params), params


# ------------------------------------------------------------------ losses


def l_dis(pred_pre: TeethModel, style_gt: TeethModel) -> float:
    """Corresponded distance: per valid tooth, the mean squared pointwise
    distance under index correspondence, summed over teeth."""
    if not np.array_equal(pred_pre.mask.valid, style_gt.mask.valid):
        raise MaskMismatchError("corresponded distance requires identical masks")
    valid = pred_pre.mask.valid
    diff = pred_pre.points[valid] - style_gt.points[valid]
    return float((diff ** 2).sum(axis=-1).mean(axis=-1).sum())


def l_ca(model: TeethModel, pairs: list[tuple[int, int]] | None = None,
         s: float = 0.05, delta: float = 0.01) -> float:
    """Collision term: for each tooth pair, with d the nearest point-pair
    distance plus the clearance margin, u = 1/(1 + d/s) enters the
    Lennard-Jones form u^12 - 2 u^6 (minimum -1 at d = 0, -> 0 as d grows)."""
    if s <= 0:
        raise ConfigError(f"interaction range s must be positive, got {s}")
    if delta < 0:
        raise ConfigError(f"clearance delta must be >= 0, got {delta}")
    if pairs is None:
        pairs = collision_pairs(model.mask.valid)
    total = 0.0
    for a, b in pairs:
        pa = model.points[a]
        pb = model.points[b]
        d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=-1)
        d = np.sqrt(d2.min()) + delta
        u = 1.0 / (1.0 + d / s)
        total += u ** 12 - 2.0 * u ** 6
    return float(total)


def _rotation6d_tensor(r6: Tensor) -> Tensor:
    """(..., 6) -> (..., 3, 3) rotation with columns from Gram-Schmidt."""
    a1 = r6[..., 0:3]
    a2 = r6[..., 3:6]
    n1 = ad.sqrt(ad.clamp_min((a1 * a1).sum(axis=-1, keepdims=True), 1e-24))
    b1 = a1 / n1
    proj = (a2 * b1).sum(axis=-1, keepdims=True)
    ortho = a2 - proj * b1
    n2 = ad.sqrt(ad.clamp_min((ortho * ortho).sum(axis=-1, keepdims=True), 1e-24))
    b2 = ortho / n2
    b3 = _cross_tensor(b1, b2)
    cols = ad.concat([
        b1.reshape(b1.shape + (1,)),
        b2.reshape(b2.shape + (1,)),
        b3.reshape(b3.shape + (1,)),
    ], axis=-1)
    return cols


def _cross_tensor(u: Tensor, v: Tensor) -> Tensor:
    ux, uy, uz = u[..., 0:1], u[..., 1:2], u[..., 2:3]
    vx, vy, vz = v[..., 0:1], v[..., 1:2], v[..., 2:3]
    return ad.concat([uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx], axis=-1)


def _apply_transform_tensor(post_points: np.ndarray, raw: Tensor) -> Tensor:
    """Apply delta-from-identity params to constant post points.

    post_points is (B, 32, N, 3); raw is (B, 32, 9).  Rotation acts about
    each tooth's centroid, then the translation is added.
    """
    r6 = raw[..., 3:9] + Tensor(IDENTITY_6D)
    m = raw[..., 0:3]
    R = _rotation6d_tensor(r6)  # (B, 32, 3, 3)
    c = post_points.mean(axis=2, keepdims=True)
    centered = Tensor(post_points - c)
    moved = centered @ R.transpose((0, 1, 3, 2))
    return moved + Tensor(c) + m.reshape((m.shape[0], K_SLOTS, 1, 3))


def _l_dis_tensor(pred: Tensor, target: np.ndarray, valid: np.ndarray) -> Tensor:
    diff = pred - Tensor(target)
    per_tooth = (diff * diff).sum(axis=-1).mean(axis=-1)  # (B, 32)
    return (per_tooth * Tensor(valid)).sum(axis=-1).mean()


def _l_ca_tensor(pred: Tensor, batch_pairs: list[list[tuple[int, int]]],
                 s: float, delta: float) -> Tensor:
    b_idx, a_idx, c_idx = [], [], []
    for b, pairs in enumerate(batch_pairs):
        for a, c in pairs:
            b_idx.append(b)
            a_idx.append(a)
            c_idx.append(c)
    if not b_idx:
        return Tensor(0.0)
    b_idx = np.asarray(b_idx)
    pa = pred[(b_idx, np.asarray(a_idx))]  # (P, N, 3)
    pb = pred[(b_idx, np.asarray(c_idx))]
    pan = (pa * pa).sum(axis=-1)
    pbn = (pb * pb).sum(axis=-1)
    cross = pa @ pb.transpose((0, 2, 1))
    d2 = pan.reshape(pan.shape + (1,)) + pbn.reshape((pbn.shape[0], 1, -1)) - 2.0 * cross
    d2min = d2.min(axis=-1).min(axis=-1)  # (P,)
    d = ad.sqrt(ad.clamp_min(d2min, 1e-12)) + delta
    u = 1.0 / (1.0 + d * (1.0 / s))
    lj = u ** 12 - 2.0 * (u ** 6)
    return lj.sum() * (1.0 / len(batch_pairs))


# ---------------------------------------------------------------- training


@dataclass
class StyleCheckpoint:
    config: StyleConfig
    params: dict[str, np.ndarray]
    loss_curve: list = field(default_factory=list)
    unit_scale: float = 1.0


def train_style_module(paired_dataset: list[tuple[TeethModel, TeethModel]],
                       config: StyleConfig, seed: int | None = None) -> StyleCheckpoint:
    """Fit the transform generator on (post, pre) pairs.

    The pre model serves as both the style input and the ground truth;
    per-epoch component means are recorded.  Deterministic per seed.
    """
    if not paired_dataset:
        raise ConfigError("paired dataset must be nonempty")
    for post, pre in paired_dataset:
        if not np.array_equal(post.mask.valid, pre.mask.valid):
            raise MaskMismatchError("pairs must share tooth masks")
    if seed is None:
        seed = config.seed
    rng = np.random.default_rng(seed)
    net = StyleTransferNet(config, np.random.default_rng(seed))
    opt = AdamW(net.named_parameters(), lr=config.lr,
                weight_decay=config.weight_decay)
    n = len(paired_dataset)
    curve = []
    for epoch in range(config.epochs):
        if config.epochs > 1:
            frac = epoch / (config.epochs - 1)
            opt.lr = config.lr * (1.0 - (1.0 - config.lr_final_frac) * frac)
        order = rng.permutation(n)
        sums = np.zeros(2)
        steps = 0
        for lo in range(0, n, config.batch_size):
            batch = [paired_dataset[i] for i in order[lo:lo + config.batch_size]]
            posts = [p for p, _ in batch]
            pres = [q for _, q in batch]
            raw = net.raw_params(posts, pres)
            post_pts = np.stack([p.points for p in posts])
            pred = _apply_transform_tensor(post_pts, raw)
            valid = np.stack([p.mask.valid for p in posts]).astype(np.float64)
            dis = _l_dis_tensor(pred, np.stack([q.points for q in pres]), valid)
            ca = _l_ca_tensor(pred, [collision_pairs(p.mask.valid) for p in posts],
                              config.s, config.delta)
            loss = config.w_dis * dis + config.w_ca * ca
            if not np.isfinite(loss.data):
                raise TrainingDivergenceError("non-finite style loss")
            opt.zero_grad()
            backward(loss)
            opt.step()
            sums += [float(dis.data), float(ca.data)]
            steps += 1
        curve.append({"distance": sums[0] / steps, "collision": sums[1] / steps})
    unit_scale = float(np.mean([p.unit_scale for p, _ in paired_dataset]))
    return StyleCheckpoint(config=config, params=net.state(),
                           loss_curve=curve, unit_scale=unit_scale)


def transform_errors(pred: TransformParams, truth: TransformParams,
                     mask: np.ndarray):
    """Per-tooth geodesic rotation errors (radians) and translation errors
    (model units) over the valid slots."""
    mask = np.asarray(mask, dtype=bool)
    rot_err = []
    trans_err = []
    for slot in np.flatnonzero(mask):
        Rp = rotation_from_6d(pred.rotations_6d[slot])
        Rt = rotation_from_6d(truth.rotations_6d[slot])
        c = np.clip((np.trace(Rp.T @ Rt) - 1.0) / 2.0, -1.0, 1.0)
        rot_err.append(float(np.arccos(c)))
        trans_err.append(float(np.linalg.norm(
            pred.translations[slot] - truth.translations[slot])))
    return np.asarray(rot_err), np.asarray(trans_err)

"""Point-cloud to voxel feature volumes and back.

Two lattice families are supported: a tooth-wise scheme that splits every
tooth's own bounding cube into r^3 cells and tiles the 32 tooth grids
into one macro volume, and a global scheme that spans the whole model's
bounding box.  Per-voxel features are the elementwise maximum of the
per-point features produced by a learned encoder; empty voxels are zero
and a separate occupancy count disambiguates them from true zeros.

Boundary points exactly on a voxel face belong to the lower-index voxel.
Macro tiling follows the slot grid: layout "2x2x8" places tooth
(jaw, side, pos) at block (jaw*r, side*r, pos*r); layout "1x1x32" chains
the 32 slots along the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from orthosynth import autodiff as ad
from orthosynth.autodiff import Tensor
from orthosynth.geometry import K_SLOTS, TeethModel
from orthosynth.layers import ConfigError, PointEncoder

LAYOUTS = ("2x2x8", "1x1x32")
MIN_R, MAX_R = 2, 8
_EDGE_EPS = 1e-9


class SchemeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class VoxelScheme:
    """Lattice description: tooth-wise r^3 cells or a global grid."""

    kind: str  # "tooth_wise" | "global"
    r: int = 4
    dims: tuple[int, int, int] = (8, 8, 32)

    def __post_init__(self):
        if self.kind not in ("tooth_wise", "global"):
            raise ConfigError(f"unknown voxel scheme kind {self.kind!r}")
        if self.kind == "tooth_wise" and not MIN_R <= self.r <= MAX_R:
            raise ConfigError(f"voxel resolution r must be in [{MIN_R},{MAX_R}], got {self.r}")
        if self.kind == "global" and any(d < 1 for d in self.dims):
            raise ConfigError(f"global dims must be >= 1, got {self.dims}")

    @classmethod
    def tooth_wise(cls, r: int) -> "VoxelScheme":
        return cls(kind="tooth_wise", r=r)

    @classmethod
    def global_grid(cls, dims) -> "VoxelScheme":
        return cls(kind="global", dims=tuple(int(d) for d in dims))


@dataclass
class VoxelFeatureVolume:
    """Dense feature lattice plus per-voxel occupancy counts.

    For tooth-wise schemes the per-tooth cube geometry is retained so
    that interpolation back to points uses the same frames.
    """

    scheme: VoxelScheme
    features: np.ndarray  # (D0, D1, D2, F)
    occupancy: np.ndarray  # (D0, D1, D2) int
    layout: str = "2x2x8"
    cube_centers: np.ndarray | None = None  # (32, 3) tooth-wise only
    cube_edges: np.ndarray | None = None  # (32,) tooth-wise only
    origin: np.ndarray | None = None  # (3,) global only
    extent: np.ndarray | None = None  # (3,) global only


@dataclass
class PointFeatureTable:
    """Per-point features aligned with TeethModel point order (32*N rows)."""

    features: np.ndarray


def macro_dims(layout: str, r: int) -> tuple[int, int, int]:
    if layout == "2x2x8":
        return (2 * r, 2 * r, 8 * r)
    if layout == "1x1x32":
        return (r, r, 32 * r)
    raise ConfigError(f"unknown layout {layout!r}")


def tooth_bounding_cubes(model: TeethModel):
    """Axis-aligned cube per slot: max extent across axes, centered on the
    tooth's bounding-box center.  Degenerate teeth get a tiny cube."""
    lo = model.points.min(axis=1)
    hi = model.points.max(axis=1)
    centers = 0.5 * (lo + hi)
    edges = np.maximum((hi - lo).max(axis=1), _EDGE_EPS)
    return centers, edges


def _cell_index(x: np.ndarray, h: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Half-open cell assignment with face points going to the lower cell."""
    idx = np.ceil(x / h).astype(np.int64) - 1
    return np.clip(idx, 0, n - 1)


def tooth_voxel_indices(model: TeethModel, r: int):
    """Flat r^3 cell index for every point, indexed per tooth."""
    centers, edges = tooth_bounding_cubes(model)
    h = (edges / r)[:, None, None]
    rel = model.points - (centers - edges[:, None] / 2)[:, None, :]
    ijk = _cell_index(rel, h, np.int64(r))
    return (ijk[..., 0] * r + ijk[..., 1]) * r + ijk[..., 2], centers, edges


def _quad_products(u: np.ndarray) -> np.ndarray:
    return np.stack([
        u[..., 0] * u[..., 0],
        u[..., 1] * u[..., 1],
        u[..., 2] * u[..., 2],
        u[..., 0] * u[..., 1],
        u[..., 1] * u[..., 2],
        u[..., 2] * u[..., 0],
    ], axis=-1)


def _with_quadratic(global_xyz: np.ndarray, local: np.ndarray,
                    centered: np.ndarray) -> np.ndarray:
    """Encoder input rows: global coords, box-local coords, rms-normalized
    centroid offsets, and the offsets' second-order products.  The
    products make pooled second moments (and therefore orientation)
    linearly readable downstream."""
    return np.concatenate([global_xyz, local, centered,
                           _quad_products(centered)], axis=-1)


def encoder_point_features(model: TeethModel) -> np.ndarray:
    """(32*N, 15) encoder input rows per tooth: global coords, coords in
    the bounding cube, and centroid offsets normalized by the tooth's rms
    radius plus their quadratic products."""
    centers, edges = tooth_bounding_cubes(model)
    local = (model.points - centers[:, None, :]) / (edges[:, None, None] / 2)
    cent = model.points.mean(axis=1, keepdims=True)
    offs = model.points - cent
    rms = np.maximum(np.sqrt((offs ** 2).sum(axis=-1).mean(axis=-1)), _EDGE_EPS)
    u = offs / rms[:, None, None]
    return _with_quadratic(model.points, local, u).reshape(-1, 15)


def arrange_tooth_blocks(blocks: Tensor, layout: str, r: int) -> Tensor:
    """(B, 32, r, r, r, F) tooth grids -> (B, D0, D1, D2, F) macro volume."""
    b = blocks.shape[0]
    f = blocks.shape[-1]
    if layout == "2x2x8":
        t = blocks.reshape((b, 2, 2, 8, r, r, r, f))
        t = t.transpose((0, 1, 4, 2, 5, 3, 6, 7))
        return t.reshape((b, 2 * r, 2 * r, 8 * r, f))
    if layout == "1x1x32":
        t = blocks.transpose((0, 2, 3, 1, 4, 5))
        return t.reshape((b, r, r, 32 * r, f))
    raise ConfigError(f"unknown layout {layout!r}")


def extract_tooth_blocks(volume: Tensor, layout: str, r: int) -> Tensor:
    """Inverse of :func:`arrange_tooth_blocks`: -> (B, 32, r, r, r, F)."""
    b = volume.shape[0]
    f = volume.shape[-1]
    if layout == "2x2x8":
        t = volume.reshape((b, 2, r, 2, r, 8, r, f))
        t = t.transpose((0, 1, 3, 5, 2, 4, 6, 7))
        return t.reshape((b, K_SLOTS, r, r, r, f))
    if layout == "1x1x32":
        t = volume.reshape((b, r, r, 32, r, f))
        t = t.transpose((0, 3, 1, 2, 4, 5))
        return t.reshape((b, K_SLOTS, r, r, r, f))
    raise ConfigError(f"unknown layout {layout!r}")


def voxelize_tooth_wise_batch(models: list[TeethModel], r: int, encoder: PointEncoder,
                              layout: str = "2x2x8"):
    """Training-path voxelization of a batch.

    Returns the macro feature Tensor (B, D0, D1, D2, F), the occupancy
    counts (B, D0, D1, D2), and the per-model cube geometry.  Invalid
    teeth contribute all-zero blocks.
    """
    if not MIN_R <= r <= MAX_R:
        raise ConfigError(f"voxel resolution r must be in [{MIN_R},{MAX_R}], got {r}")
    bsz = len(models)
    n = models[0].n_points
    r3 = r ** 3
    rows = []
    segs = []
    occ = np.zeros((bsz, K_SLOTS, r3), dtype=np.int64)
    valid = np.zeros((bsz, K_SLOTS), dtype=bool)
    centers_all = np.zeros((bsz, K_SLOTS, 3))
    edges_all = np.zeros((bsz, K_SLOTS))
    for bi, model in enumerate(models):
        ids, centers, edges = tooth_voxel_indices(model, r)
        rows.append(encoder_point_features(model))
        base = (bi * K_SLOTS + np.arange(K_SLOTS)[:, None]) * r3
        segs.append((base + ids).reshape(-1))
        np.add.at(occ[bi], (np.repeat(np.arange(K_SLOTS), n), ids.reshape(-1)), 1)
        valid[bi] = model.mask.valid
        centers_all[bi] = centers
        edges_all[bi] = edges
    feats = encoder(Tensor(np.concatenate(rows, axis=0)))
    pooled = ad.scatter_max(feats, np.concatenate(segs), bsz * K_SLOTS * r3)
    blocks = pooled.reshape((bsz, K_SLOTS, r, r, r, encoder.fdim))
    gate = valid.astype(np.float64)[:, :, None, None, None, None]
    blocks = blocks * Tensor(gate)
    occ = occ * valid[:, :, None]
    occ_blocks = occ.reshape(bsz, K_SLOTS, r, r, r, 1).astype(np.float64)
    occ_macro = arrange_tooth_blocks(Tensor(occ_blocks), layout, r).data[..., 0]
    volume = arrange_tooth_blocks(blocks, layout, r)
    return volume, occ_macro.astype(np.int64), (centers_all, edges_all)


def voxelize_tooth_wise(model: TeethModel, r: int, per_point_encoder: PointEncoder,
                        layout: str = "2x2x8") -> VoxelFeatureVolume:
    """Tooth-wise voxel features for one model (numpy result)."""
    volume, occ, (centers, edges) = voxelize_tooth_wise_batch(
        [model], r, per_point_encoder, layout)
    return VoxelFeatureVolume(
        scheme=VoxelScheme.tooth_wise(r),
        features=volume.data[0],
        occupancy=occ[0],
        layout=layout,
        cube_centers=centers[0],
        cube_edges=edges[0],
    )


def _global_frame(model: TeethModel):
    pts = model.valid_points()
    if pts.size == 0:
        raise SchemeMismatchError("global voxelization needs at least one valid tooth")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = np.maximum(hi - lo, _EDGE_EPS)
    return lo, extent


def voxelize_global_batch(models: list[TeethModel], dims, encoder: PointEncoder):
    dims = tuple(int(d) for d in dims)
    if any(d < 1 for d in dims):
        raise ConfigError(f"global dims must be >= 1, got {dims}")
    bsz = len(models)
    n = models[0].n_points
    ncells = int(np.prod(dims))
    dims_arr = np.asarray(dims, dtype=np.int64)
    rows = []
    segs = []
    keep = []
    occ = np.zeros((bsz, ncells), dtype=np.int64)
    frames = np.zeros((bsz, 2, 3))
    for bi, model in enumerate(models):
        lo, extent = _global_frame(model)
        frames[bi, 0] = lo
        frames[bi, 1] = extent
        h = extent / dims_arr
        ijk = _cell_index(model.points - lo, h, dims_arr)
        flat = (ijk[..., 0] * dims[1] + ijk[..., 1]) * dims[2] + ijk[..., 2]
        center = lo + extent / 2
        local = (model.points - center) / (extent / 2)
        cent = model.points.mean(axis=1, keepdims=True)
        offs = model.points - cent
        rms = np.maximum(np.sqrt((offs ** 2).sum(axis=-1).mean(axis=-1)), _EDGE_EPS)
        u = offs / rms[:, None, None]
        feats = _with_quadratic(model.points, local, u).reshape(-1, 15)
        vmask = np.repeat(model.mask.valid, n)
        rows.append(feats[vmask])
        segs.append(bi * ncells + flat.reshape(-1)[vmask])
        keep.append(vmask)
        np.add.at(occ[bi], flat.reshape(-1)[vmask], 1)
    feats = encoder(Tensor(np.concatenate(rows, axis=0)))
    pooled = ad.scatter_max(feats, np.concatenate(segs), bsz * ncells)
    volume = pooled.reshape((bsz,) + dims + (encoder.fdim,))
    return volume, occ.reshape((bsz,) + dims), frames


def voxelize_global(model: TeethModel, dims, per_point_encoder: PointEncoder) -> VoxelFeatureVolume:
    """Voxel features over the whole model's bounding box (numpy result).

    Only points of valid teeth contribute.
    """
    volume, occ, frames = voxelize_global_batch([model], dims, per_point_encoder)
    return VoxelFeatureVolume(
        scheme=VoxelScheme.global_grid(dims),
        features=volume.data[0],
        occupancy=occ[0],
        layout="global",
        origin=frames[0, 0].copy(),
        extent=frames[0, 1].copy(),
    )


def _trilinear(features: np.ndarray, rel: np.ndarray, extent: np.ndarray,
               dims: np.ndarray) -> np.ndarray:
    """Interpolate lattice ``features`` (d0,d1,d2,F) at positions ``rel``
    (M,3) given in lattice frame coordinates (0..extent per axis).  Voxel
    centers sit at (k + 0.5) * h; queries outside clamp to the edge."""
    h = extent / dims
    u = rel / h - 0.5
    out = np.zeros((rel.shape[0], features.shape[-1]))
    i0 = np.floor(u).astype(np.int64)
    i0 = np.clip(i0, 0, np.maximum(dims - 2, 0))
    frac = np.clip(u - i0, 0.0, 1.0)
    frac = np.where(dims > 1, frac, 0.0)
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = np.minimum(i0 + off, dims - 1)
        w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1)
        out += w[:, None] * features[idx[:, 0], idx[:, 1], idx[:, 2]]
    return out


def devoxelize(volume: VoxelFeatureVolume, model: TeethModel) -> PointFeatureTable:
    """Per-point features by trilinear interpolation of the 8 surrounding
    voxels, within each tooth's own lattice (tooth-wise) or the global
    lattice.  Raises :class:`SchemeMismatchError` when the volume was not
    built over this model's geometry."""
    n = model.n_points
    f = volume.features.shape[-1]
    out = np.zeros((K_SLOTS * n, f))
    if volume.scheme.kind == "tooth_wise":
        r = volume.scheme.r
        if volume.features.shape[:3] != macro_dims(volume.layout, r):
            raise SchemeMismatchError(
                f"macro volume {volume.features.shape[:3]} does not match layout "
                f"{volume.layout} at r={r}")
        centers, edges = tooth_bounding_cubes(model)
        if (volume.cube_centers is None
                or np.abs(centers - volume.cube_centers).max() > 1e-6
                or np.abs(edges - volume.cube_edges).max() > 1e-6):
            raise SchemeMismatchError("volume cube geometry does not match the model")
        blocks = extract_tooth_blocks(
            Tensor(volume.features[None]), volume.layout, r).data[0]
        dims = np.array([r, r, r])
        for slot in range(K_SLOTS):
            if not model.mask.valid[slot]:
                continue
            rel = model.points[slot] - (centers[slot] - edges[slot] / 2)
            vals = _trilinear(blocks[slot], rel, np.full(3, edges[slot]), dims)
            out[slot * n:(slot + 1) * n] = vals
    elif volume.scheme.kind == "global":
        lo, extent = _global_frame(model)
        if (volume.origin is None or np.abs(lo - volume.origin).max() > 1e-6
                or np.abs(extent - volume.extent).max() > 1e-6):
            raise SchemeMismatchError("volume frame does not match the model")
        dims = np.asarray(volume.scheme.dims, dtype=np.int64)
        for slot in range(K_SLOTS):
            if not model.mask.valid[slot]:
                continue
            rel = model.points[slot] - lo
            out[slot * n:(slot + 1) * n] = _trilinear(volume.features, rel, extent, dims)
    else:
        raise SchemeMismatchError(f"unknown scheme {volume.scheme.kind!r}")
    return PointFeatureTable(features=out)

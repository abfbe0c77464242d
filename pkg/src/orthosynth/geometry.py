"""Structured teeth point-cloud data model.

A full dentition is held as 32 fixed slots addressed either by FDI label
(quadrant 1-4, position 1-8) or by a (jaw, side, pos) grid index laid out
as 2 x 2 x 8.  Slot conventions:

    jaw  = 0 for quadrants {1, 2} (upper), 1 for {3, 4} (lower)
    side = 0 for quadrants {1, 4} (patient right), 1 for {2, 3}
    pos  = FDI position - 1

Coordinates are in model units; ``unit_scale`` on a model converts one
model unit to millimetres.  Rigid motions are parameterized per tooth by a
3-vector translation plus a 6-vector rotation representation that is
orthonormalized by Gram-Schmidt.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

K_SLOTS = 32
DEFAULT_POINTS = 128

# identity value of the 6-vector rotation representation
IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


class GeometryError(ValueError):
    pass


class InvalidLabelError(GeometryError):
    pass


class DegenerateModelError(GeometryError):
    pass


class DegenerateRotationError(GeometryError):
    pass


class InsufficientPointsError(GeometryError):
    pass


class RankDeficiencyError(GeometryError):
    pass


@dataclass(frozen=True)
class FdiLabel:
    """Two-digit dental notation: quadrant 1-4, position 1-8."""

    quadrant: int
    position: int

    def __post_init__(self):
        if self.quadrant not in (1, 2, 3, 4):
            raise InvalidLabelError(f"quadrant must be 1..4, got {self.quadrant}")
        if not 1 <= self.position <= 8:
            raise InvalidLabelError(f"position must be 1..8, got {self.position}")

    @property
    def code(self) -> int:
        """Clinical two-digit code, e.g. 11 or 48."""
        return self.quadrant * 10 + self.position

    @classmethod
    def from_code(cls, code: int) -> "FdiLabel":
        return cls(code // 10, code % 10)


@dataclass(frozen=True)
class GridIndex:
    """Slot address in the 2 (jaw) x 2 (side) x 8 (pos) arrangement."""

    jaw: int
    side: int
    pos: int

    def __post_init__(self):
        if self.jaw not in (0, 1) or self.side not in (0, 1) or not 0 <= self.pos <= 7:
            raise InvalidLabelError(f"invalid grid index ({self.jaw},{self.side},{self.pos})")

    @property
    def flat(self) -> int:
        """Slot number in 0..31 (jaw-major, then side, then pos)."""
        return self.jaw * 16 + self.side * 8 + self.pos

    @classmethod
    def from_flat(cls, i: int) -> "GridIndex":
        if not 0 <= i < K_SLOTS:
            raise InvalidLabelError(f"flat slot index out of range: {i}")
        return cls(i // 16, (i % 16) // 8, i % 8)


_QUAD_TO_JAW_SIDE = {1: (0, 0), 2: (0, 1), 3: (1, 1), 4: (1, 0)}
_JAW_SIDE_TO_QUAD = {v: k for k, v in _QUAD_TO_JAW_SIDE.items()}


def fdi_to_grid(label: FdiLabel) -> GridIndex:
    """Map an FDI label to its grid slot (bijective over the 32 teeth)."""
    jaw, side = _QUAD_TO_JAW_SIDE[label.quadrant]
    return GridIndex(jaw, side, label.position - 1)


def grid_to_fdi(idx: GridIndex) -> FdiLabel:
    """Inverse of :func:`fdi_to_grid`."""
    quadrant = _JAW_SIDE_TO_QUAD[(idx.jaw, idx.side)]
    return FdiLabel(quadrant, idx.pos + 1)


def slot_of(label: FdiLabel) -> int:
    return fdi_to_grid(label).flat


def label_of_slot(i: int) -> FdiLabel:
    return grid_to_fdi(GridIndex.from_flat(i))


ALL_LABELS = tuple(label_of_slot(i) for i in range(K_SLOTS))


@dataclass
class ToothCloud:
    """Fixed-size point cloud of one tooth together with its FDI label."""

    points: np.ndarray  # (N, 3)
    label: FdiLabel

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise GeometryError(f"tooth cloud must be (N,3) with N>0, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise GeometryError("tooth cloud contains non-finite coordinates")

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass
class ToothMask:
    """Validity flags for the 32 slots."""

    valid: np.ndarray  # (32,) bool

    def __post_init__(self):
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != (K_SLOTS,):
            raise GeometryError(f"mask must have length {K_SLOTS}, got {self.valid.shape}")

    def count(self) -> int:
        return int(self.valid.sum())


@dataclass
class TeethModel:
    """All 32 tooth slots as one (32, N, 3) array plus validity mask.

    Invalid slots hold N copies of the origin and are excluded from every
    loss and metric.  Slot i always corresponds to ``label_of_slot(i)``.
    """

    points: np.ndarray  # (32, N, 3)
    mask: ToothMask
    unit_scale: float = 1.0  # millimetres per model unit

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 3 or self.points.shape[0] != K_SLOTS or self.points.shape[2] != 3:
            raise GeometryError(f"points must be (32,N,3), got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise GeometryError("model contains non-finite coordinates")
        if isinstance(self.mask, np.ndarray):
            self.mask = ToothMask(self.mask)

    @property
    def n_points(self) -> int:
        return self.points.shape[1]

    def tooth(self, slot: int) -> ToothCloud:
        return ToothCloud(self.points[slot], label_of_slot(slot))

    def valid_slots(self) -> np.ndarray:
        return np.flatnonzero(self.mask.valid)

    def valid_points(self) -> np.ndarray:
        """Flat (M, 3) array of all points of valid teeth."""
        return self.points[self.mask.valid].reshape(-1, 3)

    def centroids(self) -> np.ndarray:
        return self.points.mean(axis=1)

    def copy(self) -> "TeethModel":
        return TeethModel(self.points.copy(), ToothMask(self.mask.valid.copy()), self.unit_scale)

    @classmethod
    def empty(cls, n_points: int = DEFAULT_POINTS, unit_scale: float = 1.0) -> "TeethModel":
        return cls(np.zeros((K_SLOTS, n_points, 3)), ToothMask(np.zeros(K_SLOTS, bool)), unit_scale)


@dataclass(frozen=True)
class NormalizationRecord:
    """Center/scale pair that makes de-normalization exact."""

    center: np.ndarray  # (3,)
    scale: float


def normalize_model(model: TeethModel, extent_eps: float = 1e-9):
    """Center the valid point set at the origin and scale so the maximum
    absolute coordinate equals 1.

    Returns the normalized model and a :class:`NormalizationRecord`.
    Invalid slots are left untouched.  Raises
    :class:`DegenerateModelError` when no tooth is valid or the extent is
    below ``extent_eps``.
    """
    if model.mask.count() == 0:
        raise DegenerateModelError("model has no valid teeth")
    pts = model.valid_points()
    center = pts.mean(axis=0)
    scale = float(np.abs(pts - center).max())
    if scale < extent_eps:
        raise DegenerateModelError(f"point extent {scale:g} below {extent_eps:g}")
    out = model.copy()
    out.points[model.mask.valid] = (out.points[model.mask.valid] - center) / scale
    out.unit_scale = model.unit_scale * scale
    return out, NormalizationRecord(center=center.copy(), scale=scale)


def denormalize_model(model: TeethModel, record: NormalizationRecord) -> TeethModel:
    out = model.copy()
    out.points[model.mask.valid] = out.points[model.mask.valid] * record.scale + record.center
    out.unit_scale = model.unit_scale / record.scale
    return out


def farthest_point_sample(points: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Greedy farthest-point subset of ``points``.

    The first point is drawn with the seeded generator; every following
    point maximizes the minimum distance to the already chosen set (ties
    resolved by lowest index).  Pure function of (points, n, seed).
    """
    points = np.asarray(points, dtype=np.float64)
    m = points.shape[0]
    if n < 1:
        raise InsufficientPointsError(f"n must be >= 1, got {n}")
    if n > m:
        raise InsufficientPointsError(f"requested {n} points from a set of {m}")
    rng = np.random.default_rng(seed)
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = rng.integers(m)
    d2 = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for k in range(1, n):
        idx = int(np.argmax(d2))
        chosen[k] = idx
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return points[chosen].copy()


def rotation_from_6d(r, eps: float = 1e-8, on_degenerate: str = "raise", rng=None) -> np.ndarray:
    """Gram-Schmidt a 6-vector into a proper rotation matrix.

    Accepts shape (..., 6) and returns (..., 3, 3) whose columns are the
    orthonormalized triplets plus their cross product.  Degenerate input
    (first triplet near zero, or triplets near parallel) raises
    :class:`DegenerateRotationError`; with ``on_degenerate='jitter'`` a
    uniform perturbation in [-1e-6, 1e-6] is applied once before retrying,
    which keeps gradients alive during training.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 6:
        raise GeometryError(f"rotation parameter must end in dim 6, got {r.shape}")

    a1 = r[..., 0:3]
    a2 = r[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    ortho = a2 - np.sum(a2 * a1, axis=-1, keepdims=True) * a1 / np.maximum(n1, eps) ** 2
    n2 = np.linalg.norm(ortho, axis=-1, keepdims=True)
    bad = (n1[..., 0] <= eps) | (n2[..., 0] <= eps * np.maximum(np.linalg.norm(a2, axis=-1), 1.0))
    if np.any(bad):
        if on_degenerate == "jitter":
            if rng is None:
                rng = np.random.default_rng(0)
            jittered = r + rng.uniform(-1e-6, 1e-6, size=r.shape)
            return rotation_from_6d(jittered, eps=eps, on_degenerate="raise")
        raise DegenerateRotationError("degenerate 6-D rotation input")

    b1 = a1 / n1
    b2 = ortho / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


@dataclass
class TransformParams:
    """Per-tooth transform parameters, one 9-vector per slot.

    Row layout is (m, r): 3 translation components followed by the
    6-vector rotation representation.
    """

    x: np.ndarray  # (32, 9)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.shape != (K_SLOTS, 9):
            raise GeometryError(f"params must be (32,9), got {self.x.shape}")
        if not np.all(np.isfinite(self.x)):
            raise GeometryError("transform parameters contain non-finite values")

    @property
    def translations(self) -> np.ndarray:
        return self.x[:, 0:3]

    @property
    def rotations_6d(self) -> np.ndarray:
        return self.x[:, 3:9]

    @classmethod
    def identity(cls) -> "TransformParams":
        x = np.zeros((K_SLOTS, 9))
        x[:, 3:9] = IDENTITY_6D
        return cls(x)


@dataclass
class RigidTransform:
    """Rotation about a pivot followed by a translation:
    p' = R (p - pivot) + pivot + t.
    """

    R: np.ndarray  # (3, 3)
    t: np.ndarray  # (3,)
    pivot: np.ndarray  # (3,)

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        self.pivot = np.asarray(self.pivot, dtype=np.float64)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (points - self.pivot) @ self.R.T + self.pivot + self.t

    def orthonormality_error(self) -> float:
        return float(np.abs(self.R.T @ self.R - np.eye(3)).max())


def apply_transform(model: TeethModel, params: TransformParams, eps: float = 1e-8,
                    on_degenerate: str = "raise", rng=None) -> TeethModel:
    """Rigidly move every valid tooth around its own centroid.

    For tooth i with centroid c: p' = R_i (p - c) + c + m_i.  Point order
    is preserved so pre/post correspondence survives.  Invalid slots are
    returned unchanged.
    """
    out = model.copy()
    valid = model.valid_slots()
    if valid.size == 0:
        return out
    R = rotation_from_6d(params.rotations_6d[valid], eps=eps,
                         on_degenerate=on_degenerate, rng=rng)
    # exact-identity rows pass through untouched to avoid roundoff drift
    identity = (np.all(R == np.eye(3), axis=(-2, -1))
                & np.all(params.translations[valid] == 0.0, axis=-1))
    move = valid[~identity]
    if move.size:
        Rm = R[~identity]
        pts = model.points[move]  # (V, N, 3)
        c = pts.mean(axis=1, keepdims=True)
        moved = np.einsum("vij,vnj->vni", Rm, pts - c) + c \
            + params.translations[move][:, None, :]
        out.points[move] = moved
    return out


def kabsch_align(source: ToothCloud | np.ndarray, target: ToothCloud | np.ndarray,
                 rank_eps: float = 1e-9):
    """Least-squares rigid alignment of ordered, same-length point sets.

    Returns ``(RigidTransform, residual)`` with the pivot at the source
    centroid and residual the RMS point distance after alignment.  Raises
    :class:`RankDeficiencyError` when the source points are (near)
    collinear, which leaves the rotation undetermined.
    """
    s = source.points if isinstance(source, ToothCloud) else np.asarray(source, dtype=np.float64)
    t = target.points if isinstance(target, ToothCloud) else np.asarray(target, dtype=np.float64)
    if s.shape != t.shape:
        raise GeometryError(f"point sets must share shape, got {s.shape} vs {t.shape}")
    if s.shape[0] < 3:
        raise RankDeficiencyError("need at least 3 points")
    sc = s.mean(axis=0)
    tc = t.mean(axis=0)
    H = (s - sc).T @ (t - tc)
    U, sing, Vt = np.linalg.svd(H)
    scale = max(float(np.abs(s - sc).max()), 1.0)
    if sing[1] <= rank_eps * scale * s.shape[0]:
        raise RankDeficiencyError("source points are collinear; rotation undetermined")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    transform = RigidTransform(R=R, t=tc - sc, pivot=sc)
    residual = float(np.sqrt(np.mean(np.sum((transform.apply(s) - t) ** 2, axis=1))))
    return transform, residual


def rotation_angle(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle in radians between two rotation matrices."""
    c = (np.trace(np.asarray(Ra).T @ np.asarray(Rb)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))

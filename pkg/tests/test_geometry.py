import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orthosynth.geometry import (
    ALL_LABELS,
    DegenerateModelError,
    DegenerateRotationError,
    FdiLabel,
    GridIndex,
    InsufficientPointsError,
    InvalidLabelError,
    RankDeficiencyError,
    TeethModel,
    ToothMask,
    TransformParams,
    apply_transform,
    denormalize_model,
    farthest_point_sample,
    fdi_to_grid,
    grid_to_fdi,
    kabsch_align,
    normalize_model,
    rotation_angle,
    rotation_from_6d,
)


def random_model(rng, n_points=32, n_missing=0):
    pts = np.zeros((32, n_points, 3))
    valid = np.ones(32, bool)
    if n_missing:
        valid[rng.choice(32, size=n_missing, replace=False)] = False
    for i in range(32):
        if valid[i]:
            center = rng.normal(scale=5.0, size=3)
            pts[i] = center + rng.normal(scale=0.8, size=(n_points, 3))
    return TeethModel(pts, ToothMask(valid))


# ---------------------------------------------------------------- FDI grid


def test_fdi_to_grid_base_case():
    assert fdi_to_grid(FdiLabel(1, 1)) == GridIndex(0, 0, 0)


def test_fdi_to_grid_extreme_case():
    assert fdi_to_grid(FdiLabel(3, 8)) == GridIndex(1, 1, 7)


def test_grid_to_fdi_base_and_derived():
    assert grid_to_fdi(GridIndex(0, 0, 0)) == FdiLabel(1, 1)
    assert grid_to_fdi(GridIndex(1, 0, 3)) == FdiLabel(4, 4)


def test_fdi_grid_roundtrip_all_32():
    # exhaustive enumeration over every label
    labels = [FdiLabel(q, p) for q in range(1, 5) for p in range(1, 9)]
    assert len(labels) == 32
    seen = set()
    for lab in labels:
        idx = fdi_to_grid(lab)
        assert grid_to_fdi(idx) == lab
        seen.add((idx.jaw, idx.side, idx.pos))
    assert len(seen) == 32


def test_grid_to_fdi_all_distinct():
    codes = set()
    for jaw, side, pos in itertools.product((0, 1), (0, 1), range(8)):
        codes.add(grid_to_fdi(GridIndex(jaw, side, pos)).code)
    assert len(codes) == 32


def test_invalid_labels_raise():
    with pytest.raises(InvalidLabelError):
        FdiLabel(0, 1)
    with pytest.raises(InvalidLabelError):
        FdiLabel(5, 1)
    with pytest.raises(InvalidLabelError):
        FdiLabel(1, 9)
    with pytest.raises(InvalidLabelError):
        GridIndex(2, 0, 0)


def test_flat_slot_bijection():
    flats = {GridIndex(j, s, p).flat for j in (0, 1) for s in (0, 1) for p in range(8)}
    assert flats == set(range(32))
    for i in range(32):
        assert GridIndex.from_flat(i).flat == i


# ------------------------------------------------------------ normalization


def test_normalize_already_normalized_identity_record():
    rng = np.random.default_rng(0)
    model = random_model(rng)
    model, _ = normalize_model(model)
    again, rec = normalize_model(model)
    assert np.allclose(rec.center, 0.0, atol=1e-12)
    assert rec.scale == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(again.points, model.points)


def test_normalize_zero_extent_raises():
    pts = np.full((32, 8, 3), 5.0)
    model = TeethModel(pts, ToothMask(np.ones(32, bool)))
    with pytest.raises(DegenerateModelError):
        normalize_model(model)


def test_normalize_no_valid_teeth_raises():
    model = TeethModel(np.zeros((32, 8, 3)), ToothMask(np.zeros(32, bool)))
    with pytest.raises(DegenerateModelError):
        normalize_model(model)


def test_normalize_max_abs_coordinate_is_one():
    rng = np.random.default_rng(7)
    model = random_model(rng, n_missing=5)
    out, _ = normalize_model(model)
    # direct recomputation over the output
    assert np.abs(out.valid_points()).max() == pytest.approx(1.0, abs=1e-6)


def test_normalize_invertible():
    rng = np.random.default_rng(11)
    model = random_model(rng, n_missing=3)
    out, rec = normalize_model(model)
    back = denormalize_model(out, rec)
    scale = np.abs(model.valid_points()).max()
    assert np.abs(back.points - model.points).max() <= 1e-9 * scale
    assert back.unit_scale == pytest.approx(model.unit_scale, rel=1e-12)


def test_normalize_leaves_invalid_slots_untouched():
    rng = np.random.default_rng(3)
    model = random_model(rng, n_missing=6)
    invalid = ~model.mask.valid
    out, _ = normalize_model(model)
    assert np.array_equal(out.points[invalid], model.points[invalid])


# --------------------------------------------------------------------- FPS


def test_fps_full_size_is_permutation():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(17, 3))
    out = farthest_point_sample(pts, 17, seed=5)
    a = np.array(sorted(map(tuple, pts)))
    b = np.array(sorted(map(tuple, out)))
    assert np.array_equal(a, b)


def test_fps_square_corners_picks_diagonal():
    corners = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)

    # brute-force oracle: best 2-subset maximizing min pairwise distance
    best = -1.0
    best_pairs = set()
    for i, j in itertools.combinations(range(4), 2):
        d = np.linalg.norm(corners[i] - corners[j])
        if d > best + 1e-12:
            best = d
            best_pairs = {(i, j)}
        elif abs(d - best) <= 1e-12:
            best_pairs.add((i, j))

    for seed in range(10):
        out = farthest_point_sample(corners, 2, seed=seed)
        ids = tuple(sorted(int(np.where((corners == p).all(axis=1))[0][0]) for p in out))
        assert ids in best_pairs  # a diagonal


def test_fps_beats_random_min_distance_on_average():
    rng = np.random.default_rng(123)
    pts = rng.uniform(size=(1000, 3))

    def min_pair(subset):
        d = np.linalg.norm(subset[:, None] - subset[None, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        return d.min()

    fps_vals, rand_vals = [], []
    for seed in range(100):
        fps_vals.append(min_pair(farthest_point_sample(pts, 16, seed=seed)))
        sub = pts[np.random.default_rng(seed + 10_000).choice(1000, 16, replace=False)]
        rand_vals.append(min_pair(sub))
    assert np.mean(fps_vals) >= np.mean(rand_vals)


def test_fps_deterministic_and_pure():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(50, 3))
    a = farthest_point_sample(pts, 10, seed=42)
    b = farthest_point_sample(pts, 10, seed=42)
    assert np.array_equal(a, b)
    c = farthest_point_sample(pts, 10, seed=43)
    assert not np.array_equal(a, c)


def test_fps_too_many_points_raises():
    with pytest.raises(InsufficientPointsError):
        farthest_point_sample(np.zeros((4, 3)), 5, seed=0)


# ---------------------------------------------------------------- rotation


def test_rotation_identity():
    R = rotation_from_6d(np.array([1, 0, 0, 0, 1, 0], dtype=float))
    assert np.allclose(R, np.eye(3), atol=1e-15)


def test_rotation_scale_invariance():
    R = rotation_from_6d(np.array([2, 0, 0, 0, 3, 0], dtype=float))
    assert np.allclose(R, np.eye(3), atol=1e-15)


def test_rotation_orthonormal_property_1000_seeds():
    rng = np.random.default_rng(99)
    r = rng.normal(size=(1000, 6))
    R = rotation_from_6d(r)
    err = np.abs(np.einsum("nij,nik->njk", R, R) - np.eye(3)).max()
    assert err < 1e-6
    assert np.abs(np.linalg.det(R) - 1.0).max() < 1e-6


@settings(max_examples=50, deadline=None, derandomize=True)
@given(st.integers(min_value=0, max_value=10_000))
def test_rotation_orthonormal_hypothesis(seed):
    r = np.random.default_rng(seed).normal(size=6)
    R = rotation_from_6d(r)
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-6
    assert abs(np.linalg.det(R) - 1.0) < 1e-6


def test_rotation_degenerate_raises():
    with pytest.raises(DegenerateRotationError):
        rotation_from_6d(np.zeros(6))
    with pytest.raises(DegenerateRotationError):
        rotation_from_6d(np.array([1, 0, 0, 2, 0, 0], dtype=float))  # parallel


def test_rotation_degenerate_jitter_recovers():
    rng = np.random.default_rng(5)
    R = rotation_from_6d(np.array([1, 0, 0, 1, 0, 0], dtype=float),
                         on_degenerate="jitter", rng=rng)
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-5


# --------------------------------------------------------- apply_transform


def test_apply_identity_params_is_noop():
    rng = np.random.default_rng(21)
    model = random_model(rng, n_missing=4)
    out = apply_transform(model, TransformParams.identity())
    assert np.array_equal(out.points, model.points)


def test_apply_pure_translation():
    rng = np.random.default_rng(22)
    model = random_model(rng)
    x = np.zeros((32, 9))
    x[:, 0] = 1.0
    x[:, 3:9] = [1, 0, 0, 0, 1, 0]
    out = apply_transform(model, TransformParams(x))
    shift = out.points - model.points
    assert np.allclose(shift[..., 0], 1.0, atol=1e-12)
    assert np.allclose(shift[..., 1:], 0.0, atol=1e-12)
    assert np.allclose(out.centroids() - model.centroids(), [1, 0, 0], atol=1e-12)


def test_apply_preserves_pairwise_distances():
    rng = np.random.default_rng(23)
    model = random_model(rng, n_points=24, n_missing=2)
    x = np.concatenate([rng.normal(scale=0.5, size=(32, 3)),
                        rng.normal(size=(32, 6))], axis=1)
    out = apply_transform(model, TransformParams(x))
    for slot in model.valid_slots():
        a = model.points[slot]
        b = out.points[slot]
        da = np.linalg.norm(a[:, None] - a[None, :], axis=-1)
        db = np.linalg.norm(b[:, None] - b[None, :], axis=-1)
        assert np.abs(da - db).max() < 1e-6


def test_apply_preserves_gram_matrices():
    rng = np.random.default_rng(29)
    model = random_model(rng, n_points=16)
    x = np.concatenate([rng.normal(size=(32, 3)), rng.normal(size=(32, 6))], axis=1)
    out = apply_transform(model, TransformParams(x))
    for slot in range(32):
        a = model.points[slot] - model.points[slot].mean(0)
        b = out.points[slot] - out.points[slot].mean(0)
        assert np.abs(a @ a.T - b @ b.T).max() < 1e-6


def test_apply_leaves_invalid_slots():
    rng = np.random.default_rng(31)
    model = random_model(rng, n_missing=8)
    x = np.concatenate([rng.normal(size=(32, 3)), rng.normal(size=(32, 6))], axis=1)
    out = apply_transform(model, TransformParams(x))
    invalid = ~model.mask.valid
    assert np.array_equal(out.points[invalid], model.points[invalid])


# ------------------------------------------------------------------ kabsch


def test_kabsch_identity():
    rng = np.random.default_rng(40)
    pts = rng.normal(size=(30, 3))
    tf, res = kabsch_align(pts, pts)
    assert res == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(tf.R, np.eye(3), atol=1e-9)
    assert np.allclose(tf.t, 0.0, atol=1e-12)


def test_kabsch_recovers_known_transform():
    rng = np.random.default_rng(41)
    for seed in range(20):
        local = np.random.default_rng(seed)
        pts = local.normal(size=(40, 3))
        R = rotation_from_6d(local.normal(size=6))
        m = local.normal(size=3)
        c = pts.mean(axis=0)
        target = (pts - c) @ R.T + c + m
        tf, res = kabsch_align(pts, target)
        assert res < 1e-6
        assert rotation_angle(tf.R, R) < 1e-5
        assert np.abs(tf.t - m).max() < 1e-5


def test_kabsch_noise_residual_band():
    sigma = 0.01
    resids = []
    for seed in range(30):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(128, 3))
        target = pts + rng.normal(scale=sigma, size=pts.shape)
        _, res = kabsch_align(pts, target)
        resids.append(res)
    mean_res = float(np.mean(resids))
    assert 0.0 < mean_res < 2 * sigma


def test_kabsch_collinear_raises():
    pts = np.zeros((10, 3))
    pts[:, 0] = np.arange(10)
    with pytest.raises(RankDeficiencyError):
        kabsch_align(pts, pts + 1.0)


def test_apply_then_kabsch_roundtrip_error_bounds():
    # rotation error < 1e-5 rad, translation error < 1e-5 units
    for seed in range(50):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(64, 3))
        r6 = rng.normal(size=6)
        R = rotation_from_6d(r6)
        m = rng.normal(scale=0.3, size=3)
        c = pts.mean(axis=0)
        target = (pts - c) @ R.T + c + m
        tf, _ = kabsch_align(pts, target)
        assert rotation_angle(tf.R, R) < 1e-5
        assert np.linalg.norm(tf.t - m) < 1e-5

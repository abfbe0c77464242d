"""Point-cloud distances and generative-model evaluation metrics.

Chamfer distance is the symmetric mean of squared nearest-neighbour
distances.  EMD is the minimum mean Euclidean matching cost under a
bijection; the exact mode solves the assignment problem, the approximate
mode anneals an entropically regularized transport plan until it is
within 1e-3 total variation of a permutation and returns that
permutation's cost.

1-NNA pools two sample sets and reports leave-one-out nearest-neighbour
classification accuracy (50% means the sets are indistinguishable); ties
break to the lowest pooled index, generated samples first.  Uniqueness
scans samples in index order and counts those farther than a threshold
from every earlier sample.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from orthosynth.geometry import TeethModel
from orthosynth.layers import ConfigError

# pair-count threshold between the exact broadcast path and KD-tree queries
_DIRECT_LIMIT = 1 << 20
EXACT_EMD_LIMIT = 512


class EmptyInputError(ValueError):
    pass


class SizeMismatchError(ValueError):
    pass


class EmdModeError(ValueError):
    pass


class MaskMismatchError(ValueError):
    pass


@dataclass
class MetricReport:
    """Evaluation summary with the protocol constants that produced it."""

    one_nna_cd: float | None = None  # percent
    one_nna_emd: float | None = None  # percent
    u_cd: float | None = None  # percent
    n_gen: int = 0
    n_ref: int = 0
    threshold: float = 1.0
    conventions: dict = field(default_factory=dict)

    def __post_init__(self):
        for v in (self.one_nna_cd, self.one_nna_emd, self.u_cd):
            if v is not None and not 0.0 <= v <= 100.0:
                raise ValueError(f"percentage out of range: {v}")


def aggregate_cloud(model: TeethModel, to_cm: bool = False) -> np.ndarray:
    """Flat point array of the valid teeth only (masked slots are dropped
    so they cannot fake similarity).  With ``to_cm`` the coordinates are
    de-normalized to centimetres via the model's unit scale."""
    pts = model.valid_points()
    if to_cm:
        pts = pts * (model.unit_scale / 10.0)
    return pts


def _as_points(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != 3:
        raise ValueError(f"expected (M,3) point array, got {P.shape}")
    if P.shape[0] == 0:
        raise EmptyInputError("empty point set")
    return P


def _min_sq_direct(P, Q):
    diff = P[:, None, :] - Q[None, :, :]
    d = (diff ** 2).sum(axis=-1)
    return d.min(axis=1), d.min(axis=0)


def chamfer_distance(P, Q, trees=None) -> float:
    """Symmetric Chamfer distance:
    mean_p min_q ||p-q||^2 + mean_q min_p ||q-p||^2.

    Small instances use an exact broadcast formulation; large ones use
    KD-tree nearest-neighbour queries (identical up to the last float
    bits).  ``trees`` may carry prebuilt ``(treeP, treeQ)``.
    """
    P = _as_points(P)
    Q = _as_points(Q)
    if P.shape[0] * Q.shape[0] <= _DIRECT_LIMIT:
        d_pq, d_qp = _min_sq_direct(P, Q)
    else:
        treeP, treeQ = trees if trees is not None else (cKDTree(P), cKDTree(Q))
        d_pq = treeQ.query(P, k=1)[0] ** 2
        d_qp = treeP.query(Q, k=1)[0] ** 2
    return float(d_pq.mean() + d_qp.mean())


def emd(P, Q, mode: str = "exact") -> float:
    """Earth mover's distance between equal-size point sets under the
    Euclidean ground cost, normalized by the point count."""
    P = _as_points(P)
    Q = _as_points(Q)
    if P.shape[0] != Q.shape[0]:
        raise SizeMismatchError(f"EMD needs equal sizes, got {P.shape[0]} vs {Q.shape[0]}")
    if mode == "exact":
        if P.shape[0] > EXACT_EMD_LIMIT:
            raise EmdModeError(
                f"exact EMD limited to {EXACT_EMD_LIMIT} points, got {P.shape[0]}")
        C = cdist(P, Q)
        rows, cols = linear_sum_assignment(C)
        return float(C[rows, cols].mean())
    if mode == "approx":
        return _emd_annealed(P, Q)
    raise EmdModeError(f"unknown EMD mode {mode!r}")


def _emd_annealed(P, Q, tv_target: float = 1e-3, max_levels: int = 40,
                  eps0: float = 0.1, factor: float = 0.3, inner: int = 200) -> float:
    """Entropically regularized transport with the regularization annealed
    until the plan is within ``tv_target`` total variation of a
    permutation; returns that permutation's cost (an upper bound on the
    exact value that tightens as the plan sharpens)."""
    n = P.shape[0]
    C = cdist(P, Q)
    scale = max(float(C.max()), 1e-12)
    eps = eps0 * scale
    f = np.zeros(n)
    g = np.zeros(n)
    log_a = -np.log(n)

    def plan_now():
        logP = np.minimum((f[:, None] + g[None, :] - C) / eps, 50.0)
        return np.exp(logP)

    def try_accept(plan):
        row_err = np.abs(plan.sum(axis=1) - 1.0 / n).max()
        col_err = np.abs(plan.sum(axis=0) - 1.0 / n).max()
        if max(row_err, col_err) > 1e-4 / n:
            return None
        perm = plan.argmax(axis=1)
        if len(np.unique(perm)) != n:
            return None
        on_perm = plan[np.arange(n), perm]
        tv = 0.5 * ((plan.sum() - on_perm.sum()) + np.abs(1.0 / n - on_perm).sum())
        if tv < tv_target:
            return float(C[np.arange(n), perm].mean())
        return None

    for _ in range(max_levels):
        for it in range(inner):
            M = (g[None, :] - C) / eps
            mmax = M.max(axis=1, keepdims=True)
            f = eps * (log_a - (mmax[:, 0] + np.log(np.exp(M - mmax).sum(axis=1))))
            M = (f[:, None] - C) / eps
            mmax = M.max(axis=0, keepdims=True)
            g_new = eps * (log_a - (mmax[0] + np.log(np.exp(M - mmax).sum(axis=0))))
            shift = np.abs(g_new - g).max()
            g = g_new
            if (it + 1) % 25 == 0 or shift < 1e-6 * scale:
                value = try_accept(plan_now())
                if value is not None:
                    return value
                if shift < 1e-6 * scale:
                    break
        eps *= factor
    # annealing exhausted: resolve argmax collisions exactly on the
    # remaining small subproblem so the result is a valid bijection
    perm = plan_now().argmax(axis=1)
    counts = np.bincount(perm, minlength=n)
    free_cols = np.flatnonzero(counts == 0)
    seen = set()
    fix_rows = []
    for r in range(n):
        if perm[r] in seen:
            fix_rows.append(r)
        else:
            seen.add(perm[r])
    if fix_rows:
        fix_rows = np.asarray(fix_rows, dtype=np.int64)
        rr, cc = linear_sum_assignment(C[np.ix_(fix_rows, free_cols)])
        perm[fix_rows[rr]] = free_cols[cc]
    return float(C[np.arange(n), perm].mean())


def _equalize_sizes(P, Q):
    """Cycle-repeat the smaller cloud so both sizes match (mass splitting
    surrogate used by 1-NNA when tooth counts differ)."""
    np_, nq = P.shape[0], Q.shape[0]
    if np_ == nq:
        return P, Q
    m = max(np_, nq)
    if np_ < m:
        P = P[np.arange(m) % np_]
    if nq < m:
        Q = Q[np.arange(m) % nq]
    return P, Q


def pairwise_matrix(clouds, metric: str = "cd", workers: int = 1,
                    emd_mode: str | None = None) -> np.ndarray:
    """Symmetric distance matrix over a list of point clouds.

    Pairs are computed independently over disjoint index blocks, so the
    result is bitwise independent of ``workers``.
    """
    n = len(clouds)
    clouds = [np.asarray(c, dtype=np.float64) for c in clouds]
    D = np.zeros((n, n))

    sizes = {c.shape[0] for c in clouds}
    if metric == "cd" and len(sizes) == 1:
        m = clouds[0].shape[0]
        if m * m <= _DIRECT_LIMIT:
            # vectorized row sweep; elementwise identical to the per-pair
            # direct path, so worker count and batching cannot change bits
            stack = np.stack(clouds)
            block = max(1, _DIRECT_LIMIT // max(m * m, 1))
            for i in range(n):
                for j0 in range(i + 1, n, block):
                    j1 = min(j0 + block, n)
                    diff = stack[i][None, :, None, :] - stack[j0:j1][:, None, :, :]
                    d = (diff ** 2).sum(axis=-1)
                    vals = d.min(axis=2).mean(axis=1) + d.min(axis=1).mean(axis=1)
                    D[i, j0:j1] = vals
                    D[j0:j1, i] = vals
            return D

    trees = None
    if metric == "cd":
        need_trees = any(
            clouds[i].shape[0] * clouds[j].shape[0] > _DIRECT_LIMIT
            for i in range(n) for j in range(i + 1, n))
        if need_trees:
            trees = [cKDTree(c) for c in clouds]

    def entry(i, j):
        if metric == "cd":
            tij = (trees[i], trees[j]) if trees is not None else None
            return chamfer_distance(clouds[i], clouds[j], trees=tij)
        if metric == "emd":
            Pi, Qj = _equalize_sizes(clouds[i], clouds[j])
            mode = emd_mode
            if mode is None:
                mode = "exact" if Pi.shape[0] <= EXACT_EMD_LIMIT else "approx"
            return emd(Pi, Qj, mode=mode)
        raise ConfigError(f"unknown metric {metric!r}")

    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(lambda ij: entry(*ij), pairs))
    else:
        values = [entry(i, j) for i, j in pairs]
    for (i, j), v in zip(pairs, values):
        D[i, j] = v
        D[j, i] = v
    return D


def one_nna(gen, ref, dist: str = "cd", workers: int = 1) -> float:
    """Leave-one-out 1-nearest-neighbour two-sample accuracy in percent.

    All samples are pooled (generated first); each one's nearest
    neighbour under ``dist`` (excluding itself, ties to the lowest pooled
    index) votes for its set.  50% indicates indistinguishable sets.
    """
    gen = list(gen)
    ref = list(ref)
    if not gen or not ref:
        raise EmptyInputError("both sample lists must be nonempty")
    clouds = gen + ref
    labels = np.array([0] * len(gen) + [1] * len(ref))
    D = pairwise_matrix(clouds, metric=dist, workers=workers)
    np.fill_diagonal(D, np.inf)
    nn = D.argmin(axis=1)  # argmin takes the first minimum: index tie-break
    correct = labels[nn] == labels
    return float(100.0 * correct.mean())


def uniqueness_ucd(samples, threshold: float, workers: int = 1) -> float:
    """Percentage of samples whose Chamfer distance to every earlier
    sample exceeds ``threshold`` (first-occurrence scan in index order)."""
    samples = list(samples)
    if not samples:
        raise EmptyInputError("empty sample list")
    if threshold <= 0:
        raise ConfigError(f"threshold must be positive, got {threshold}")
    D = pairwise_matrix(samples, metric="cd", workers=workers)
    n = len(samples)
    unique = 0
    for i in range(n):
        if i == 0 or np.all(D[i, :i] > threshold):
            unique += 1
    return float(100.0 * unique / n)


def model_distance(A: TeethModel, B: TeethModel, per_tooth: bool) -> float:
    """Distance between two teeth models.

    ``per_tooth`` sums the Chamfer distance of corresponding valid slots
    and requires identical masks; otherwise the aggregated clouds of the
    valid teeth are compared directly.
    """
    if per_tooth:
        if not np.array_equal(A.mask.valid, B.mask.valid):
            raise MaskMismatchError("per-tooth distance requires identical masks")
        total = 0.0
        for slot in A.valid_slots():
            total += chamfer_distance(A.points[slot], B.points[slot])
        return float(total)
    return chamfer_distance(aggregate_cloud(A), aggregate_cloud(B))

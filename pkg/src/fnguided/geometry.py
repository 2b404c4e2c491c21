"""Essential-matrix algebra for calibrated two-view geometry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .kernels import count_inliers, jacobi_eigh_batch, symmetric_epipolar_distances

JACOBI_TOL = 1e-15
JACOBI_MAX_SWEEPS = 100


class GeometryError(Exception):
    pass


class RankDeficiencyError(GeometryError):
    pass


class ZeroBaselineError(GeometryError):
    pass


class NoModelError(GeometryError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")

    def as_array(self):
        return np.array([self.fx, self.fy, self.cx, self.cy])

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    def is_valid(self, tol=1e-10):
        return (np.allclose(self.R.T @ self.R, np.eye(3), atol=tol)
                and abs(np.linalg.det(self.R) - 1.0) <= tol)


def normalize_coordinates(points, intrinsics):
    """Pixel ``(N, 2)`` points to intrinsics-normalized coordinates."""
    pts = np.asarray(points, dtype=np.float64)
    out = np.empty_like(pts)
    out[..., 0] = (pts[..., 0] - intrinsics.cx) / intrinsics.fx
    out[..., 1] = (pts[..., 1] - intrinsics.cy) / intrinsics.fy
    return out


def skew(v):
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def essential_from_pose(pose):
    """``[t]x R`` scaled to unit Frobenius norm."""
    norm_t = np.linalg.norm(pose.t)
    if norm_t == 0:
        raise ZeroBaselineError("translation has zero length")
    E = skew(pose.t) @ pose.R
    return E / np.linalg.norm(E)


def _split(corrs):
    corrs = np.asarray(corrs, dtype=np.float64)
    if corrs.ndim == 1:
        corrs = corrs[None, :]
    return corrs[:, 0:2], corrs[:, 2:4]


def epipolar_residual(corrs, E):
    """Symmetric epipolar distance; scalar for one correspondence, else ``(N,)``."""
    single = np.ndim(corrs) == 1
    x1, x2 = _split(corrs)
    res = symmetric_epipolar_distances(np.asarray(E, dtype=np.float64)[None], x1, x2)[0]
    return float(res[0]) if single else res


def epipolar_rows(corrs):
    """Rows ``a`` with ``a . vec(E) = x2^T E x1`` (``vec`` row-major)."""
    corrs = np.asarray(corrs, dtype=np.float64)
    x1 = np.concatenate([corrs[..., 0:2], np.ones(corrs.shape[:-1] + (1,))], axis=-1)
    x2 = np.concatenate([corrs[..., 2:4], np.ones(corrs.shape[:-1] + (1,))], axis=-1)
    return (x2[..., :, None] * x1[..., None, :]).reshape(corrs.shape[:-1] + (9,))


def project_to_essential(E):
    """Closest matrix with singular values ``(s, s, 0)``, unit Frobenius norm."""
    U, _, Vt = np.linalg.svd(np.asarray(E, dtype=np.float64).reshape(3, 3))
    P = U @ np.diag([1.0, 1.0, 0.0]) @ Vt
    return P / np.linalg.norm(P)


def _fix_sign(vecs):
    # largest-magnitude entry positive; only used to make outputs repeatable
    idx = np.argmax(np.abs(vecs), axis=-1)
    s = np.sign(np.take_along_axis(vecs, idx[..., None], axis=-1))
    s[s == 0] = 1.0
    return vecs * s


def smallest_eigvecs(mats):
    """Eigenvector of the smallest eigenvalue for each ``(9, 9)`` matrix."""
    evals, evecs, sweeps = jacobi_eigh_batch(mats, JACOBI_TOL, JACOBI_MAX_SWEEPS)
    if np.any(sweeps < 0):
        raise GeometryError("Jacobi eigensolver did not converge")
    return evals, _fix_sign(evecs[:, :, 0]), evecs


def weighted_eight_point(corrs, weights):
    """Weighted least-squares essential matrix.

    Minimizes ``e^T (sum_i w_i a_i a_i^T) e`` over unit ``e``, then projects
    to singular values ``(1, 1, 0)`` and normalizes.
    """
    corrs = np.asarray(corrs, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(corrs),) or not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite, nonnegative and one per correspondence")
    if np.count_nonzero(w > 0) < 8:
        raise RankDeficiencyError(
            f"need >= 8 positively weighted correspondences, got {np.count_nonzero(w > 0)}")
    A = epipolar_rows(corrs)
    M = (A * w[:, None]).T @ A
    evals, e, _ = smallest_eigvecs(M[None])
    if evals[0, 1] <= 1e-14 * max(evals[0, -1], 1e-300):
        raise RankDeficiencyError("fewer than 8 independent epipolar constraints")
    return project_to_essential(e[0].reshape(3, 3))


def _eigvec_backward(g, M, evals, evecs, gap_floor):
    # d v0 = sum_k v_k (v_k^T dM v0) / (l0 - lk)
    v0 = evecs[..., :, 0]
    vk = evecs[..., :, 1:]
    gaps = evals[..., :1] - evals[..., 1:]
    gaps = np.where(np.abs(gaps) < gap_floor, -gap_floor, gaps)
    coef = np.einsum("...ik,...i->...k", vk, g) / gaps
    G = np.einsum("...k,...ik,...j->...ij", coef, vk, v0)
    return 0.5 * (G + np.swapaxes(G, -1, -2))


def smallest_eigvec_node(M):
    """Differentiable smallest-eigenvalue eigenvector of symmetric ``(B, 9, 9)``."""
    M = dc.as_node(M)
    mats = M.value

    def solve(vals):
        evals, _, evecs = smallest_eigvecs(vals)
        v0 = evecs[:, :, 0]
        idx = np.argmax(np.abs(v0), axis=1)
        sign = np.where(v0[np.arange(len(v0)), idx] < 0, -1.0, 1.0)
        return evals, evecs * sign[:, None, None]

    evals, evecs = solve(mats)

    def fwd(vals):
        return solve(vals)[1][:, :, 0]

    def backward(g, vals):
        ev, vec = solve(vals)
        floor = 1e-12 * np.maximum(np.abs(ev[:, -1:]), 1e-300)
        return (_eigvec_backward(g, vals, ev, vec, floor),)

    return dc.custom(evecs[:, :, 0].copy(), [M], fwd, backward, name="smallest_eigvec")


def weighted_eight_point_node(corrs, weights):
    """Batched differentiable eight-point: ``(B, N, 4)`` coords, ``(B, N)`` weights.

    Returns the unit 9-vector ``vec(E)`` before the rank-2 projection.
    """
    A = epipolar_rows(np.asarray(corrs, dtype=np.float64))
    At = dc.constant(np.swapaxes(A, -1, -2))
    w = dc.as_node(weights)
    Aw = dc.mul(dc.constant(A), dc.reshape(w, w.shape + (1,)))
    M = dc.matmul(At, Aw)
    return smallest_eigvec_node(M)


def decompose_essential(E):
    """The four ``(R, t)`` candidates in canonical order."""
    U, _, Vt = np.linalg.svd(np.asarray(E, dtype=np.float64))
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    R1 = U @ W @ Vt
    R2 = U @ W.T @ Vt
    t = U[:, 2]
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def triangulate(corrs, R, t):
    """Linear (DLT) triangulation with ``P1 = [I|0]``, ``P2 = [R|t]``."""
    x1, x2 = _split(corrs)
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([R, np.reshape(t, (3, 1))])
    rows = np.stack([
        x1[:, 0:1] * P1[2] - P1[0],
        x1[:, 1:2] * P1[2] - P1[1],
        x2[:, 0:1] * P2[2] - P2[0],
        x2[:, 1:2] * P2[2] - P2[1],
    ], axis=1)
    _, _, Vt = np.linalg.svd(rows)
    X = Vt[:, -1, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        return X[:, :3] / X[:, 3:4]


def select_pose(E, corrs):
    """Cheirality vote over the four decompositions; first candidate wins ties."""
    best, best_count = None, -1
    for R, t in decompose_essential(E):
        X = triangulate(corrs, R, t)
        z1 = X[:, 2]
        z2 = (X @ R.T + t)[:, 2]
        count = int(np.sum((z1 > 0) & (z2 > 0)))
        if count > best_count:
            best, best_count = (R, t), count
    return best


def rotation_error_deg(R_gt, R_hat):
    cos = (np.trace(R_gt.T @ R_hat) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def translation_error_deg(t_gt, t_hat):
    denom = np.linalg.norm(t_gt) * np.linalg.norm(t_hat)
    if denom == 0:
        return 180.0
    cos = abs(float(np.dot(t_gt, t_hat))) / denom
    return float(np.degrees(np.arccos(min(cos, 1.0))))


def recover_pose_and_angular_errors(E_hat, gt, inlier_corrs):
    """Rotation and translation angular errors (degrees) of ``E_hat``."""
    inlier_corrs = np.asarray(inlier_corrs, dtype=np.float64).reshape(-1, 4)
    if len(inlier_corrs) < 1:
        raise ValueError("need at least one correspondence for the cheirality vote")
    E_hat = np.asarray(E_hat, dtype=np.float64)
    if not np.all(np.isfinite(E_hat)) or np.linalg.norm(E_hat) == 0:
        raise GeometryError("degenerate essential matrix")
    R, t = select_pose(E_hat, inlier_corrs)
    return rotation_error_deg(gt.R, R), translation_error_deg(gt.t, t)


def essential_regression_loss(E_hat, E_gt):
    """``min(|E_hat - E|^2, |E_hat + E|^2)``; differentiable if ``E_hat`` is a Node.

    Works on ``(3, 3)``, flattened ``(9,)`` or batched ``(B, 9)`` inputs; a
    batched input gives the batch mean.
    """
    if not isinstance(E_hat, dc.Node):
        a = np.asarray(E_hat, dtype=np.float64).reshape(-1)
        b = np.asarray(E_gt, dtype=np.float64).reshape(-1)
        return float(min(np.sum((a - b) ** 2), np.sum((a + b) ** 2)))
    e = E_hat
    gt = np.asarray(E_gt, dtype=np.float64).reshape(e.shape)
    minus = dc.reduce_sum(dc.power(dc.sub(e, gt), 2), axis=-1)
    plus = dc.reduce_sum(dc.power(dc.add(e, gt), 2), axis=-1)
    pick = (minus.value <= plus.value).astype(np.float64)
    per_item = dc.add(dc.mul(minus, pick), dc.mul(plus, 1.0 - pick))
    return dc.reduce_mean(per_item)


def ransac_essential(corrs, iterations, threshold, seed, batch=512):
    """Eight-point RANSAC; returns ``(E, inlier_mask)``.

    Hypotheses are scored in batches but the winner is the lowest index
    among those with the maximal inlier count, so the result only depends on
    ``seed``.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    corrs = np.asarray(corrs, dtype=np.float64)
    n = len(corrs)
    if n < 8:
        raise RankDeficiencyError("RANSAC needs at least 8 correspondences")
    rng = np.random.default_rng(seed)
    samples = np.stack([rng.choice(n, 8, replace=False) for _ in range(iterations)])
    x1, x2 = corrs[:, :2], corrs[:, 2:]
    rows = epipolar_rows(corrs)
    best_count, best_E = -1, None
    for start in range(0, iterations, batch):
        A = rows[samples[start:start + batch]]
        M = np.swapaxes(A, 1, 2) @ A
        evals, e, _ = smallest_eigvecs(M)
        ok = evals[:, 1] > 1e-14 * np.maximum(evals[:, -1], 1e-300)
        if not ok.any():
            continue
        U, _, Vt = np.linalg.svd(e[ok].reshape(-1, 3, 3))
        Es = U @ (np.array([1.0, 1.0, 0.0])[:, None] * Vt) / np.sqrt(2.0)
        counts = count_inliers(Es, x1, x2, threshold)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best_E = int(counts[k]), Es[k]
    if best_E is None:
        raise NoModelError("every RANSAC sample was degenerate")
    mask = symmetric_epipolar_distances(best_E[None], x1, x2)[0] < threshold
    if mask.sum() >= 8:
        try:
            refit = weighted_eight_point(corrs, mask.astype(np.float64))
        except RankDeficiencyError:
            refit = best_E
        best_E = refit
        mask = symmetric_epipolar_distances(best_E[None], x1, x2)[0] < threshold
    return best_E, mask

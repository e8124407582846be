"""Point-to-point ICP with a k-d tree and SVD rigid alignment."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .kinematics import Affine3, apply, compose
from .render import PointCloud

log = logging.getLogger(__name__)


class EmptyCloudError(ValueError):
    pass


@dataclass(frozen=True)
class Correspondences:
    source_index: np.ndarray
    target_index: np.ndarray
    distances: np.ndarray

    @property
    def mean_squared_distance(self) -> float:
        return float(np.mean(self.distances**2))


@dataclass
class IcpResult:
    transform: Affine3
    iterations_used: int
    mean_squared_distance: float
    converged: bool
    history: list[float] = field(default_factory=list)
    degenerate: bool = False


def _as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.valid_points
    pts = np.asarray(cloud, dtype=float)
    return pts.reshape(-1, 3)


def nearest_neighbors(source, target, tree: cKDTree | None = None) -> Correspondences:
    """Pair every valid source point with its nearest valid target point.

    Ties are broken toward the lowest target index.
    """
    src, dst = _as_points(source), _as_points(target)
    if len(src) == 0 or len(dst) == 0:
        raise EmptyCloudError("nearest_neighbors needs two nonempty clouds")
    tree = tree if tree is not None else cKDTree(dst)
    k = min(4, len(dst))
    dist, idx = tree.query(src, k=k)
    if k == 1:
        dist, idx = dist[:, None], idx[:, None]
    # among neighbours at the minimum distance keep the lowest index
    tied = dist == dist[:, :1]
    best = np.where(tied, idx, np.iinfo(np.int64).max).min(axis=1)
    return Correspondences(np.arange(len(src)), best, dist[:, 0])


def rigid_fit(source, target) -> tuple[Affine3, bool]:
    """Least-squares rotation + translation mapping ``source`` rows onto ``target`` rows.

    Returns ``(transform, ok)``; a rank-deficient configuration gives the identity and ``ok=False``.
    """
    src, dst = _as_points(source), _as_points(target)
    if src.shape != dst.shape:
        raise ValueError(f"point sets differ in shape: {src.shape} vs {dst.shape}")
    if len(src) < 3:
        log.warning("rigid_fit needs at least 3 pairs, got %d", len(src))
        return Affine3.identity(), False
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= 1e-12 * max(S[0], 1e-300):
        log.warning("rigid_fit: degenerate (collinear or coincident) configuration")
        return Affine3.identity(), False
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return Affine3(R, mu_d - R @ mu_s), True


def icp(source, target, max_iter: int = 100, tol: float = 1e-9) -> IcpResult:
    """Align ``source`` to ``target``; the result maps source points onto the target.

    Stops after ``max_iter`` iterations or when the mean squared correspondence
    distance improves by less than ``tol``. A step that would increase that
    distance is rejected.
    """
    src, dst = _as_points(source), _as_points(target)
    if len(src) == 0 or len(dst) == 0:
        raise EmptyCloudError("icp needs two nonempty clouds")
    tree = cKDTree(dst)
    total = Affine3.identity()
    current = src
    pairs = nearest_neighbors(current, dst, tree)
    mse = pairs.mean_squared_distance
    history = [mse]
    converged = False
    degenerate = False
    used = 0
    while not converged and used < max_iter:
        step, ok = rigid_fit(current, dst[pairs.target_index])
        if not ok:
            degenerate = True
            break
        moved = apply(step, current.T).T
        new_pairs = nearest_neighbors(moved, dst, tree)
        new_mse = new_pairs.mean_squared_distance
        used += 1
        if new_mse > mse:
            log.debug("icp: rejecting step %d (mse %.3g -> %.3g)", used, mse, new_mse)
            converged = True
            break
        total = compose(step, total)
        current, pairs = moved, new_pairs
        improvement = mse - new_mse
        mse = new_mse
        history.append(mse)
        if improvement < tol:
            converged = True
    return IcpResult(total, used, mse, converged, history, degenerate)

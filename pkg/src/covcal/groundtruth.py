"""Ground-truth covariance construction: Monte-Carlo sample covariance,
ergodic sliding-window pseudo-ground-truth with window search, closed-form
rigid alignment of trajectories, velocity backdifferencing, and the
zero-mean-error sanity report.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    DegenerateAlignment,
    InsufficientData,
    InsufficientRuns,
    InvalidInput,
    InvalidWindow,
)
from . import statmath
from .statmath import CovMatrix, NeesSeries, tri_size


@dataclass(frozen=True)
class ErrorSeries:
    """Per-timestep estimation error vectors with their timestep indices."""

    values: np.ndarray  # (N, n)
    index: np.ndarray   # (N,)

    @classmethod
    def from_values(cls, values) -> "ErrorSeries":
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if not np.all(np.isfinite(values)):
            raise InvalidInput("error series contains non-finite entries")
        return cls(values=values, index=np.arange(len(values)))

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class GroundTruthCovSeries:
    """Per-timestep ground-truth covariances with a validity mask.

    Rows of `packed` at masked-out timesteps are zero and must not be used.
    """

    dim: int
    packed: np.ndarray  # (N, n(n+1)/2)
    mask: np.ndarray    # (N,) bool

    def cov_at(self, k: int) -> CovMatrix:
        if not self.mask[k]:
            raise InvalidInput(f"no ground-truth covariance at timestep {k}")
        return CovMatrix.from_packed(self.packed[k], check=False)

    @property
    def valid_count(self) -> int:
        return int(np.sum(self.mask))


def _packed_outer(errors: np.ndarray) -> np.ndarray:
    """Packed upper triangles of e_k e_k^T, shape (N, n(n+1)/2)."""
    iu = np.triu_indices(errors.shape[1])
    return errors[:, iu[0]] * errors[:, iu[1]]


def mc_ground_truth(errors_per_run) -> GroundTruthCovSeries:
    """Per-timestep sample covariance over M Monte-Carlo runs.

    P_k = 1/(M-1) sum_i e_{k,i} e_{k,i}^T with no mean subtraction (errors
    are assumed zero-mean; validate with zero_mean_report).
    """
    runs = [
        e.values if isinstance(e, ErrorSeries) else np.asarray(e, dtype=float)
        for e in errors_per_run
    ]
    if len(runs) < 2:
        raise InsufficientRuns("need at least 2 runs for a sample covariance")
    length = runs[0].shape
    for r in runs:
        if r.shape != length:
            raise InvalidInput("all runs must have identical shape")
    m = len(runs)
    total = np.zeros((length[0], tri_size(length[1])))
    for r in runs:  # fixed accumulation order
        total += _packed_outer(r)
    packed = total / (m - 1)
    return GroundTruthCovSeries(
        dim=length[1], packed=packed, mask=np.ones(length[0], dtype=bool)
    )


def ergodic_ground_truth(errors, window: int) -> GroundTruthCovSeries:
    """Sliding-window sample covariance (ergodic pseudo-ground-truth).

    P_k = 1/(K-1) sum over the centered odd window of e e^T; timesteps whose
    window does not fit inside the series are masked out.
    """
    values = errors.values if isinstance(errors, ErrorSeries) else np.asarray(errors, dtype=float)
    n_steps, dim = values.shape
    if window % 2 == 0 or window < 3:
        raise InvalidWindow(f"window must be odd and >= 3, got {window}")
    if window > n_steps:
        raise InvalidWindow(f"window {window} exceeds series length {n_steps}")
    half = window // 2
    outer = _packed_outer(values)
    csum = np.vstack([np.zeros((1, outer.shape[1])), np.cumsum(outer, axis=0)])
    packed = np.zeros_like(outer)
    mask = np.zeros(n_steps, dtype=bool)
    lo = half
    hi = n_steps - half  # exclusive
    # window sum at k is csum[k + half + 1] - csum[k - half]
    packed[lo:hi] = (
        csum[lo + half + 1 : hi + half + 1] - csum[lo - half : hi - half]
    ) / (window - 1)
    mask[lo:hi] = True
    return GroundTruthCovSeries(dim=dim, packed=packed, mask=mask)


def gt_nees(errors, gt: GroundTruthCovSeries, dof: Optional[int] = None) -> NeesSeries:
    """NEES of an error series against ground-truth covariances (valid mask only)."""
    values = errors.values if isinstance(errors, ErrorSeries) else np.asarray(errors, dtype=float)
    return statmath.nees_series(
        values[gt.mask], gt.packed[gt.mask], dof=dof if dof is not None else gt.dim
    )


def _pooled_window_divergence(series_list, window, dof, bins):
    pooled = []
    for errors in series_list:
        gt = ergodic_ground_truth(errors, window)
        pooled.append(gt_nees(errors, gt, dof=dof).values)
    values = np.concatenate(pooled)
    density = statmath.build_density(NeesSeries(values=values, dof=dof), bins=bins)
    return statmath.l2_divergence(density, dof)


def window_search(
    errors_list,
    windows,
    dof: int,
    bins: Optional[int] = None,
    threads: int = 1,
):
    """Divergence of the ergodic pseudo-ground-truth for each window size.

    NEES values from all series are pooled into one density per candidate
    window.  Returns (best window, table) where table has rows (K,
    divergence) in ascending K and ties go to the smallest K.
    """
    series_list = [
        e if isinstance(e, ErrorSeries) else ErrorSeries.from_values(e)
        for e in errors_list
    ]
    windows = sorted(int(k) for k in windows)
    if not windows:
        raise InvalidWindow("empty window range")
    for k in windows:
        if k % 2 == 0:
            raise InvalidWindow(f"window sizes must be odd, got {k}")

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            divs = list(
                pool.map(
                    lambda k: _pooled_window_divergence(series_list, k, dof, bins),
                    windows,
                )
            )
    else:
        divs = [
            _pooled_window_divergence(series_list, k, dof, bins) for k in windows
        ]
    table = np.column_stack([windows, divs])
    best = int(windows[int(np.argmin(divs))])  # argmin takes the first minimum
    return best, table


# ---------------------------------------------------------------------------
# trajectory alignment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AlignmentTransform:
    """Rigid transform: rotation (det +1) and translation, applied as R p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def inverse(self) -> "AlignmentTransform":
        rt = self.rotation.T
        return AlignmentTransform(rotation=rt, translation=-rt @ self.translation)


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def horn_align(gt_points, est_points) -> AlignmentTransform:
    """Closed-form least-squares rigid transform taking gt onto est.

    Solves min over (R, t) of sum ||R g_i + t - e_i||^2 using the quaternion
    eigenvector formulation of the 4x4 cross-covariance matrix; translation
    comes from the centroids, so the mean residual is zero by construction.
    """
    gt = np.asarray(gt_points, dtype=float)
    est = np.asarray(est_points, dtype=float)
    if gt.shape != est.shape or gt.ndim != 2 or gt.shape[1] != 3:
        raise InvalidInput("point sets must both have shape (N, 3)")
    if len(gt) < 3:
        raise DegenerateAlignment("need at least 3 point pairs")
    gc = gt.mean(axis=0)
    ec = est.mean(axis=0)
    g = gt - gc
    e = est - ec
    for pts, label in ((g, "gt"), (e, "est")):
        sv = np.linalg.svd(pts, compute_uv=False)
        if sv[1] <= 1e-12 * max(sv[0], 1.0):
            raise DegenerateAlignment(f"{label} points are collinear")
    s = g.T @ e
    n_mat = np.array([
        [s[0, 0] + s[1, 1] + s[2, 2], s[1, 2] - s[2, 1], s[2, 0] - s[0, 2], s[0, 1] - s[1, 0]],
        [s[1, 2] - s[2, 1], s[0, 0] - s[1, 1] - s[2, 2], s[0, 1] + s[1, 0], s[2, 0] + s[0, 2]],
        [s[2, 0] - s[0, 2], s[0, 1] + s[1, 0], -s[0, 0] + s[1, 1] - s[2, 2], s[1, 2] + s[2, 1]],
        [s[0, 1] - s[1, 0], s[2, 0] + s[0, 2], s[1, 2] + s[2, 1], -s[0, 0] - s[1, 1] + s[2, 2]],
    ])
    w, v = np.linalg.eigh(n_mat)
    rotation = _quat_to_matrix(v[:, -1])  # eigenvector of the largest eigenvalue
    translation = ec - rotation @ gc
    return AlignmentTransform(rotation=rotation, translation=translation)


def backdifference_velocity(positions, dt: float) -> np.ndarray:
    """Backward-difference velocities; the first sample is duplicated so the
    output has the same length as the input."""
    positions = np.asarray(positions, dtype=float)
    if len(positions) < 2:
        raise InsufficientData("need at least 2 positions to backdifference")
    vel = np.empty_like(positions)
    vel[1:] = (positions[1:] - positions[:-1]) / dt
    vel[0] = vel[1]
    return vel


# ---------------------------------------------------------------------------
# zero-mean validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ZeroMeanBlock:
    """Mean-error summary for one state block."""

    name: str
    mean_error_norm: float
    reference_norm: float
    ratio: float
    flagged: bool


def zero_mean_report(
    errors_list,
    blocks,
    reference_norms,
    threshold: float = 0.02,
) -> list[ZeroMeanBlock]:
    """Check that estimation errors are negligible next to the motion scale.

    Args:
        errors_list: one or more error series (pooled over all timesteps).
        blocks: list of (name, slice) pairs declaring the state blocks.
        reference_norms: mapping name -> mean ground-truth norm of that block.
        threshold: flag blocks whose ratio exceeds this.

    Returns one ZeroMeanBlock per declared block, with the norm of the mean
    error vector, the reference norm, and their ratio.
    """
    series = [
        e.values if isinstance(e, ErrorSeries) else np.asarray(e, dtype=float)
        for e in errors_list
    ]
    pooled = np.vstack(series)
    mean_err = pooled.mean(axis=0)
    report = []
    for name, sl in blocks:
        err_norm = float(np.linalg.norm(mean_err[sl]))
        ref = float(reference_norms[name])
        ratio = err_norm / ref if ref > 0 else np.inf
        report.append(
            ZeroMeanBlock(
                name=name,
                mean_error_norm=err_norm,
                reference_norm=ref,
                ratio=ratio,
                flagged=ratio > threshold,
            )
        )
    return report

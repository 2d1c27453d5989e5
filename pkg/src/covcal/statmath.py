"""Statistical kernel: chi-square distribution, whitening, NEES, sigma-interval
counts, empirical densities, and the L2 divergence goodness-of-fit test.

All functions are pure and deterministic; batch variants reduce in a fixed
order so repeated runs are bit-identical.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .errors import EmptyInput, InvalidInput, SingularCovariance

log = logging.getLogger(__name__)

# Eigenvalue tolerances for covariance matrices.  PSD admission is relative
# (long EKF runs accumulate roundoff asymmetry); the positive-definite
# threshold used by whitening/NEES is absolute.
EPS_PSD = 1e-9
EPS_PD = 1e-12


# ---------------------------------------------------------------------------
# packed symmetric storage
# ---------------------------------------------------------------------------

def tri_size(dim: int) -> int:
    """Number of upper-triangle entries of a dim x dim matrix."""
    return dim * (dim + 1) // 2


def tri_dim(size: int) -> int:
    """Matrix dimension whose upper triangle has `size` entries."""
    dim = int(round((math.sqrt(8 * size + 1) - 1) / 2))
    if tri_size(dim) != size:
        raise InvalidInput(f"{size} is not a triangular number")
    return dim


def pack_upper(mat) -> np.ndarray:
    """Row-major upper triangle of a square matrix as a flat vector."""
    mat = np.asarray(mat, dtype=float)
    n = mat.shape[-1]
    iu = np.triu_indices(n)
    return mat[..., iu[0], iu[1]]


def unpack_upper(packed, dim: int) -> np.ndarray:
    """Symmetric matrix (or stack of matrices) from packed upper triangles."""
    packed = np.asarray(packed, dtype=float)
    iu = np.triu_indices(dim)
    out = np.zeros(packed.shape[:-1] + (dim, dim))
    out[..., iu[0], iu[1]] = packed
    out[..., iu[1], iu[0]] = packed
    return out


@dataclass(frozen=True)
class CovMatrix:
    """Symmetric PSD matrix stored as its row-major upper triangle."""

    dim: int
    packed: np.ndarray

    @classmethod
    def from_matrix(cls, mat, check: bool = True) -> "CovMatrix":
        """Build from a full square matrix; symmetrizes and checks PSD.

        Raises InvalidInput for non-finite/non-square input or eigenvalues
        below -EPS_PSD * ||M||_F.
        """
        mat = np.asarray(mat, dtype=float)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise InvalidInput(f"expected a square matrix, got shape {mat.shape}")
        if not np.all(np.isfinite(mat)):
            raise InvalidInput("covariance contains non-finite entries")
        sym = 0.5 * (mat + mat.T)
        if check:
            norm = float(np.linalg.norm(sym))
            if norm > 0.0:
                min_eig = float(np.linalg.eigvalsh(sym)[0])
                if min_eig < -EPS_PSD * norm:
                    raise InvalidInput(
                        f"matrix is not PSD (min eigenvalue {min_eig:.3e})"
                    )
        packed = pack_upper(sym)
        packed.setflags(write=False)
        return cls(dim=mat.shape[0], packed=packed)

    @classmethod
    def from_packed(cls, packed, check: bool = True) -> "CovMatrix":
        packed = np.asarray(packed, dtype=float)
        dim = tri_dim(packed.shape[0])
        return cls.from_matrix(unpack_upper(packed, dim), check=check)

    @classmethod
    def identity(cls, dim: int) -> "CovMatrix":
        return cls.from_matrix(np.eye(dim), check=False)

    def full(self) -> np.ndarray:
        """Reconstruct the full symmetric matrix."""
        return unpack_upper(self.packed, self.dim)

    @property
    def trace(self) -> float:
        return float(np.trace(self.full()))


def as_cov_array(p) -> np.ndarray:
    """Full symmetric ndarray view of a CovMatrix or array-like."""
    if isinstance(p, CovMatrix):
        return p.full()
    mat = np.asarray(p, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise InvalidInput(f"expected a square matrix, got shape {mat.shape}")
    return mat


# ---------------------------------------------------------------------------
# eigendecomposition and whitening
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EigenDecomposition:
    """Symmetric eigendecomposition with eigenvalues sorted descending."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # columns

    def reconstruct(self) -> np.ndarray:
        x = self.eigenvectors
        return (x * self.eigenvalues) @ x.T


def eig_symmetric(m) -> EigenDecomposition:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending."""
    mat = as_cov_array(m)
    if not np.all(np.isfinite(mat)):
        raise InvalidInput("matrix contains non-finite entries")
    w, x = np.linalg.eigh(0.5 * (mat + mat.T))
    order = np.argsort(-w, kind="stable")
    return EigenDecomposition(eigenvalues=w[order], eigenvectors=x[:, order])


def sigma_coordinates(v, u, sigma) -> np.ndarray:
    """Coordinates of v - u in the orthogonal basis X sqrt(Lambda) of sigma.

    Equivalent to Lambda^{-1/2} X^T (v - u); the result is standard normal
    per dimension when v ~ N(u, sigma).
    """
    dec = eig_symmetric(sigma)
    if np.min(dec.eigenvalues) <= EPS_PD:
        raise SingularCovariance(
            f"covariance not positive definite (min eig {np.min(dec.eigenvalues):.3e})"
        )
    d = np.asarray(v, dtype=float) - np.asarray(u, dtype=float)
    return (dec.eigenvectors.T @ d) / np.sqrt(dec.eigenvalues)


def sigma_coordinates_series(diffs, covs_packed, regularize: bool = False) -> np.ndarray:
    """Whiten a series of difference vectors with per-timestep covariances.

    diffs is (N, n); covs_packed is (N, n(n+1)/2).  Returns (N, n).  With
    `regularize`, isolated non-PD timesteps get +eps*I (eps scaled to the
    trace) and a logged warning instead of aborting the batch; timesteps
    that stay singular still raise.
    """
    diffs = np.asarray(diffs, dtype=float)
    n = diffs.shape[1]
    mats = unpack_upper(np.asarray(covs_packed, dtype=float), n)
    w, x = np.linalg.eigh(mats)  # ascending per slice
    bad = np.nonzero(w[:, 0] <= EPS_PD)[0]
    if bad.size and regularize:
        # floor degenerate eigenvalues at a small epsilon: the whitened
        # coordinate along a collapsed direction becomes huge, which
        # correctly lands it outside every sigma interval.  All-zero
        # covariances stay fatal.
        traces = np.trace(mats, axis1=1, axis2=2)
        floor = np.maximum(2.0 * EPS_PD, 1e-12 * traces[:, None] / n)
        fixable = bad[traces[bad] > 0.0]
        if fixable.size:
            log.warning(
                "whitening floored eigenvalues at %d non-PD timesteps "
                "(first at %d)", fixable.size, int(fixable[0]),
            )
            w[fixable] = np.maximum(w[fixable], floor[fixable])
            bad = np.nonzero(w[:, 0] <= EPS_PD)[0]
    if bad.size:
        raise SingularCovariance(
            f"covariance not positive definite at timestep {int(bad[0])}"
        )
    proj = np.einsum("kji,kj->ki", x, diffs)
    return proj / np.sqrt(w)


@dataclass(frozen=True)
class SigmaIntervalCounts:
    """Per-dimension percentages of whitened samples inside 1/2/3 sigma."""

    per_dim: np.ndarray  # (n, 3), percentages in [0, 100]

    def __post_init__(self):
        p = np.asarray(self.per_dim, dtype=float)
        if p.ndim != 2 or p.shape[1] != 3:
            raise InvalidInput("per_dim must have shape (n, 3)")
        if np.any(p < 0) or np.any(p > 100) or np.any(np.diff(p, axis=1) < 0):
            raise InvalidInput("percentages must satisfy 0 <= p1 <= p2 <= p3 <= 100")


def count_sigma_intervals(nus) -> SigmaIntervalCounts:
    """Percentage of |nu_d| within 1, 2, 3 for each dimension d."""
    nus = np.atleast_2d(np.asarray(nus, dtype=float))
    if nus.size == 0:
        raise EmptyInput("no whitened samples")
    a = np.abs(nus)
    per_dim = np.stack(
        [100.0 * np.mean(a <= b, axis=0) for b in (1.0, 2.0, 3.0)], axis=1
    )
    return SigmaIntervalCounts(per_dim=per_dim)


# ---------------------------------------------------------------------------
# NEES
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NeesSeries:
    """Normalized estimation error squared values with their dof."""

    values: np.ndarray
    dof: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if self.dof < 1:
            raise InvalidInput("dof must be >= 1")
        if v.size and np.min(v) < 0:
            raise InvalidInput("NEES values must be nonnegative")


def _chol_with_regularization(mat: np.ndarray) -> np.ndarray:
    """Cholesky factor; on failure retries once with +eps*I and a warning."""
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        eps = 1e-12 * np.trace(mat) / mat.shape[0]
        if eps <= 0.0 or not np.isfinite(eps):
            raise SingularCovariance("covariance is singular") from None
        try:
            chol = np.linalg.cholesky(mat + eps * np.eye(mat.shape[0]))
        except np.linalg.LinAlgError:
            raise SingularCovariance("covariance is singular") from None
        log.warning("near-singular covariance regularized with eps=%.3e", eps)
        return chol


def nees(e, p) -> float:
    """e^T p^{-1} e via a Cholesky solve (no explicit inverse).

    Near-singular covariances are regularized with +eps*I (eps scaled to the
    trace) and a logged warning; exactly singular ones raise
    SingularCovariance.
    """
    e = np.asarray(e, dtype=float)
    mat = as_cov_array(p)
    chol = _chol_with_regularization(mat)
    z = np.linalg.solve(chol, e)
    return float(z @ z)


def nees_series(errors, covs_packed, dof: int | None = None) -> NeesSeries:
    """NEES for each timestep of an error series against packed covariances.

    Uses a vectorized Cholesky fast path; falls back to per-timestep solves
    (with regularization warnings) when any matrix fails to factor.
    """
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise EmptyInput("empty error series")
    n = errors.shape[1]
    mats = unpack_upper(np.asarray(covs_packed, dtype=float), n)
    try:
        chol = np.linalg.cholesky(mats)
        z = np.linalg.solve(chol, errors[:, :, None])[:, :, 0]
        vals = np.einsum("ki,ki->k", z, z)
    except np.linalg.LinAlgError:
        vals = np.array([nees(errors[k], mats[k]) for k in range(len(errors))])
    return NeesSeries(values=vals, dof=dof if dof is not None else n)


# ---------------------------------------------------------------------------
# chi-square distribution
# ---------------------------------------------------------------------------

def _check_dof(dof: int) -> int:
    if int(dof) != dof or dof < 1:
        raise InvalidInput(f"dof must be an integer >= 1, got {dof!r}")
    return int(dof)


def chi2_pdf(x, dof: int):
    """Density of the chi-square distribution with `dof` degrees of freedom."""
    dof = _check_dof(dof)
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise InvalidInput("chi2_pdf requires x >= 0")
    out = stats.chi2.pdf(x, dof)
    return float(out) if out.ndim == 0 else out


def chi2_cdf(x, dof: int):
    """Cumulative distribution of chi-square with `dof` degrees of freedom."""
    dof = _check_dof(dof)
    x = np.asarray(x, dtype=float)
    out = special.gammainc(dof / 2.0, np.maximum(x, 0.0) / 2.0)
    return float(out) if out.ndim == 0 else out


def chi2_quantile(p, dof: int):
    """Inverse chi-square CDF; p must lie strictly inside (0, 1)."""
    dof = _check_dof(dof)
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise InvalidInput("quantile probability must be in (0, 1)")
    out = 2.0 * special.gammaincinv(dof / 2.0, p)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class McNeesResult:
    """Per-timestep summed NEES with its chi-square confidence interval."""

    sums: np.ndarray
    lower: float
    upper: float
    in_interval: np.ndarray
    dof_total: int

    @property
    def fraction_in_interval(self) -> float:
        return float(np.mean(self.in_interval))


def mc_nees_test(per_run_nees, confidence: float = 0.95) -> McNeesResult:
    """Monte-Carlo aggregated NEES test.

    Sums the NEES across the M runs at each timestep; the sum of M
    chi-square_n variables is chi-square with M*n dof, so each timestep is
    flagged against the (1 +/- confidence)/2 quantiles of that distribution.

    Args:
        per_run_nees: sequence of M NeesSeries of equal length and dof.
        confidence: central interval mass, e.g. 0.95.
    """
    runs = list(per_run_nees)
    if not runs:
        raise EmptyInput("no NEES series supplied")
    if not 0.0 < confidence < 1.0:
        raise InvalidInput("confidence must be in (0, 1)")
    dof = runs[0].dof
    length = len(runs[0].values)
    for r in runs:
        if r.dof != dof or len(r.values) != length:
            raise InvalidInput("all runs must share length and dof")
    sums = np.sum([r.values for r in runs], axis=0)
    dof_total = len(runs) * dof
    lower = chi2_quantile((1.0 - confidence) / 2.0, dof_total)
    upper = chi2_quantile((1.0 + confidence) / 2.0, dof_total)
    inside = (sums >= lower) & (sums <= upper)
    return McNeesResult(
        sums=sums, lower=lower, upper=upper, in_interval=inside, dof_total=dof_total
    )


# ---------------------------------------------------------------------------
# empirical density and L2 divergence
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmpiricalDensity:
    """Normalized histogram: B+1 edges, B nonnegative heights."""

    bin_edges: np.ndarray
    bin_heights: np.ndarray
    sample_count: int

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=float)
        heights = np.asarray(self.bin_heights, dtype=float)
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "bin_heights", heights)
        if edges.ndim != 1 or heights.ndim != 1 or len(edges) != len(heights) + 1:
            raise InvalidInput("need B+1 edges for B heights")
        if np.any(np.diff(edges) <= 0):
            raise InvalidInput("bin edges must be strictly increasing")
        if np.any(heights < 0):
            raise InvalidInput("bin heights must be nonnegative")
        if self.sample_count > 0:
            total = float(np.sum(heights * np.diff(edges)))
            if abs(total - 1.0) > 1e-12:
                raise InvalidInput(f"density integrates to {total!r}, not 1")

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.bin_edges)


def build_density(series: NeesSeries, bins: int | None = None) -> EmpiricalDensity:
    """Normalized histogram of NEES values.

    The support is [0, max(sample max, chi-square 0.999 quantile)] so the
    density always covers the bulk of the reference distribution.  `bins`
    defaults to ceil(sqrt(N)).
    """
    values = np.asarray(series.values, dtype=float)
    if values.size == 0:
        raise EmptyInput("no NEES values to bin")
    if bins is None:
        bins = int(math.ceil(math.sqrt(values.size)))
    if bins < 1:
        raise InvalidInput("bins must be >= 1")
    hi = max(float(np.max(values)), chi2_quantile(0.999, series.dof))
    counts, edges = np.histogram(values, bins=bins, range=(0.0, hi))
    widths = np.diff(edges)
    heights = counts / (values.size * widths)
    return EmpiricalDensity(
        bin_edges=edges, bin_heights=heights, sample_count=values.size
    )


def _chi2_sq_tail(t: float, dof: int) -> float:
    """Integral of chi2_pdf(x, dof)^2 from t to infinity, closed form.

    For dof >= 2 the squared density integrates to
    Gamma(dof-1) Q(dof-1, t) / (2^dof Gamma(dof/2)^2); for dof = 1 it is
    E1(t) / (2 pi), which diverges as t -> 0 (the chi-square_1 density is
    not square-integrable).
    """
    if dof == 1:
        return float(special.exp1(t)) / (2.0 * math.pi)
    log_norm = dof * math.log(2.0) + 2.0 * special.gammaln(dof / 2.0)
    log_gamma = special.gammaln(dof - 1.0)
    return float(special.gammaincc(dof - 1.0, t) * math.exp(log_gamma - log_norm))


def l2_divergence(density: EmpiricalDensity, dof: int) -> float:
    """L2 divergence between an empirical NEES density and the chi2 density.

    Square root of the integrated squared difference.  Because the empirical
    density is piecewise constant and the chi-square CDF and squared-density
    integral have closed forms, the integral is evaluated exactly:

        D^2 = sum_b h_b^2 w_b - 2 sum_b h_b (F(e_{b+1}) - F(e_b)) + int q^2

    with F the chi-square CDF.  When the two densities barely overlap, D
    approaches sqrt(int p^2 + int q^2); the pure chi-square terms are
    sqrt(1/8) ~ 0.3536 for 4 dof and ~ 0.2697 for 9 dof.

    dof = 1 is rejected: the chi-square_1 density is not square-integrable,
    so this divergence is not defined for it.
    """
    dof = _check_dof(dof)
    if dof < 2:
        raise InvalidInput("L2 divergence requires dof >= 2")
    heights = density.bin_heights
    widths = density.widths
    cdf = chi2_cdf(density.bin_edges, dof)
    total = (
        float(np.sum(heights * heights * widths))
        - 2.0 * float(np.sum(heights * np.diff(cdf)))
        + _chi2_sq_tail(0.0, dof)
    )
    return math.sqrt(max(total, 0.0))

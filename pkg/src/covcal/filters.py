"""Discrete-time Kalman filter / EKF over a pluggable system model, plus a
seeded simulation harness that produces truth/measurement/estimate traces.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .errors import (
    DivergedFilter,
    InvalidInput,
    SingularInnovation,
)
from .statmath import CovMatrix, pack_upper, tri_size

TRACE_LIMIT = 1e12  # trace(P) beyond this aborts a run


@dataclass(frozen=True)
class SystemModel:
    """Dynamics/measurement model with Jacobians and noise covariances.

    f(x, u, dt) -> next state, h(x) -> measurement, A(x, u, dt) and C(x) are
    the corresponding Jacobians.  R is the process noise (n x n) and Q the
    measurement noise (m x m); both covariances are used by the filter and by
    the truth simulation.  `wrap_residual`, when given, normalizes innovation
    components (e.g. angle wrapping) before the update.
    """

    n: int
    m: int
    f: Callable
    h: Callable
    A: Callable
    C: Callable
    R: CovMatrix
    Q: CovMatrix
    wrap_residual: Optional[Callable] = None
    name: str = ""

    def __post_init__(self):
        if self.R.dim != self.n:
            raise InvalidInput(f"R must be {self.n}x{self.n}")
        if self.Q.dim != self.m:
            raise InvalidInput(f"Q must be {self.m}x{self.m}")


@dataclass(frozen=True)
class FilterState:
    """Filter mean and covariance at timestep k."""

    x_hat: np.ndarray
    p_hat: CovMatrix
    k: int = 0

    def __post_init__(self):
        x = np.asarray(self.x_hat, dtype=float)
        object.__setattr__(self, "x_hat", x)
        if not np.all(np.isfinite(x)):
            raise DivergedFilter(f"non-finite state at step {self.k}")


@dataclass(frozen=True)
class EstimateTrace:
    """Per-timestep record of one simulated run.

    Covariances are stored as packed upper triangles, which enforces exact
    symmetry of every recorded P.
    """

    t: np.ndarray            # (N,)
    x_true: np.ndarray       # (N, n)
    x_hat: np.ndarray        # (N, n)
    p_hat: np.ndarray        # (N, n(n+1)/2) packed upper triangles
    y: np.ndarray            # (N, m)
    innovation: np.ndarray   # (N, m)
    dt: float
    seed: Optional[int] = None
    model_name: str = ""

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        if len(t) >= 2:
            steps = np.diff(t)
            if np.any(steps <= 0):
                raise InvalidInput("timestamps must be strictly increasing")
            if np.max(np.abs(steps - self.dt)) > 1e-9:
                raise InvalidInput("timestamps must be uniformly spaced by dt")

    @property
    def n(self) -> int:
        return self.x_true.shape[1]

    @property
    def steps(self) -> int:
        return len(self.t)

    def errors(self) -> np.ndarray:
        """Estimation errors e_k = x_true - x_hat."""
        return self.x_true - self.x_hat

    def p_hat_matrix(self, k: int) -> CovMatrix:
        return CovMatrix.from_packed(self.p_hat[k], check=False)


@dataclass(frozen=True)
class SimConfig:
    """Simulation setup: seed, horizon, initial conditions, input schedule.

    `sim_process_noise` / `sim_measurement_noise` override the noise driving
    the truth simulation; by default the truth uses the filter model's R and
    Q (a matched, consistent filter).  Setting them different from the
    model's lets a benchmark exhibit a mis-specified filter.
    """

    seed: int
    steps: int
    dt: float
    x0_true: np.ndarray
    x0_hat: np.ndarray
    p0: CovMatrix
    input_sequence: Optional[np.ndarray] = None  # (steps, u_dim)
    sim_process_noise: Optional[CovMatrix] = None
    sim_measurement_noise: Optional[CovMatrix] = None

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidInput("steps must be >= 1")
        if self.dt <= 0:
            raise InvalidInput("dt must be positive")


def _checked_cov(mat: np.ndarray, k: int) -> CovMatrix:
    if not np.all(np.isfinite(mat)):
        raise DivergedFilter(f"non-finite covariance at step {k}")
    if np.trace(mat) > TRACE_LIMIT:
        raise DivergedFilter(f"covariance trace exploded at step {k}")
    return CovMatrix.from_matrix(mat)


def ekf_predict(state: FilterState, u, model: SystemModel, dt: float) -> FilterState:
    """Propagate mean through f and covariance through A P A^T + R."""
    x_pred = np.asarray(model.f(state.x_hat, u, dt), dtype=float)
    if not np.all(np.isfinite(x_pred)):
        raise DivergedFilter(f"non-finite prediction at step {state.k}")
    a = np.asarray(model.A(state.x_hat, u, dt), dtype=float)
    p_pred = a @ state.p_hat.full() @ a.T + model.R.full()
    return FilterState(
        x_hat=x_pred, p_hat=_checked_cov(p_pred, state.k + 1), k=state.k + 1
    )


def ekf_update(state: FilterState, y, model: SystemModel):
    """Measurement update with the Joseph-form covariance.

    Returns (posterior FilterState, innovation).  The Joseph form
    (I - KC) P (I - KC)^T + K Q K^T keeps the covariance symmetric PSD
    regardless of gain roundoff.
    """
    y = np.asarray(y, dtype=float)
    z = y - np.asarray(model.h(state.x_hat), dtype=float)
    if model.wrap_residual is not None:
        z = model.wrap_residual(z)
    c = np.asarray(model.C(state.x_hat), dtype=float)
    p = state.p_hat.full()
    s = c @ p @ c.T + model.Q.full()
    try:
        chol = np.linalg.cholesky(0.5 * (s + s.T))
    except np.linalg.LinAlgError:
        raise SingularInnovation(
            f"innovation covariance singular at step {state.k}"
        ) from None
    # K = P C^T S^{-1} via two triangular solves
    g = np.linalg.solve(chol, c @ p)
    k_gain = np.linalg.solve(chol.T, g).T
    x_post = state.x_hat + k_gain @ z
    ikc = np.eye(model.n) - k_gain @ c
    p_post = ikc @ p @ ikc.T + k_gain @ model.Q.full() @ k_gain.T
    post = FilterState(
        x_hat=x_post, p_hat=_checked_cov(p_post, state.k), k=state.k
    )
    return post, z


def psd_factor(cov: CovMatrix) -> np.ndarray:
    """Factor F with F F^T = cov, valid for singular PSD matrices."""
    w, x = np.linalg.eigh(cov.full())
    return x * np.sqrt(np.clip(w, 0.0, None))


def simulate(model: SystemModel, cfg: SimConfig) -> EstimateTrace:
    """Run truth + filter in lockstep for cfg.steps and record the trace.

    Truth propagates through f with additive seeded process noise; each
    measurement is h(truth) plus seeded noise.  The same R/Q drive both the
    simulation and the filter.  Identical seeds give bit-identical traces.
    """
    rng = np.random.default_rng(cfg.seed)
    n, m = model.n, model.m
    inputs = cfg.input_sequence
    if inputs is None:
        inputs = np.zeros((cfg.steps, 0))
    inputs = np.asarray(inputs, dtype=float)
    if len(inputs) < cfg.steps:
        raise InvalidInput("input_sequence shorter than steps")

    f_r = psd_factor(cfg.sim_process_noise or model.R)
    f_q = psd_factor(cfg.sim_measurement_noise or model.Q)

    x_true = np.asarray(cfg.x0_true, dtype=float)
    state = FilterState(
        x_hat=np.asarray(cfg.x0_hat, dtype=float), p_hat=cfg.p0, k=0
    )

    t = np.empty(cfg.steps)
    xs_true = np.empty((cfg.steps, n))
    xs_hat = np.empty((cfg.steps, n))
    ps = np.empty((cfg.steps, tri_size(n)))
    ys = np.empty((cfg.steps, m))
    zs = np.empty((cfg.steps, m))

    for k in range(cfg.steps):
        u = inputs[k]
        x_true = np.asarray(model.f(x_true, u, cfg.dt), dtype=float)
        x_true = x_true + f_r @ rng.standard_normal(n)
        if not np.all(np.isfinite(x_true)):
            raise DivergedFilter(f"truth diverged at step {k + 1}")
        y = np.asarray(model.h(x_true), dtype=float) + f_q @ rng.standard_normal(m)

        state = ekf_predict(state, u, model, cfg.dt)
        state, z = ekf_update(state, y, model)

        t[k] = (k + 1) * cfg.dt
        xs_true[k] = x_true
        xs_hat[k] = state.x_hat
        ps[k] = state.p_hat.packed
        ys[k] = y
        zs[k] = z

    return EstimateTrace(
        t=t, x_true=xs_true, x_hat=xs_hat, p_hat=ps, y=ys, innovation=zs,
        dt=cfg.dt, seed=cfg.seed, model_name=model.name,
    )


def derive_run_seeds(master_seed: int, runs: int) -> list[int]:
    """Deterministic per-run seeds for a Monte-Carlo batch."""
    rng = np.random.default_rng(master_seed)
    return [int(s) for s in rng.integers(0, 2**63, size=runs, dtype=np.int64)]


def monte_carlo(
    model: SystemModel, cfg: SimConfig, runs: int, threads: int = 1
) -> list[EstimateTrace]:
    """Independent seeded simulations of the same configuration.

    Runs are embarrassingly parallel; results are assembled in run order so
    the output is identical for any thread count.
    """
    if runs < 1:
        raise InvalidInput("runs must be >= 1")
    seeds = derive_run_seeds(cfg.seed, runs)
    configs = [replace(cfg, seed=s) for s in seeds]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda c: simulate(model, c), configs))
    return [simulate(model, c) for c in configs]


def innovation_autocorrelation(trace: EstimateTrace, lag: int = 1) -> np.ndarray:
    """Lag-l autocorrelation of each innovation component.

    Near zero for a well-specified linear filter (white innovations).
    """
    z = trace.innovation - np.mean(trace.innovation, axis=0)
    num = np.sum(z[:-lag] * z[lag:], axis=0)
    den = np.sum(z * z, axis=0)
    return num / den


def check_jacobians(
    model: SystemModel,
    rng: np.random.Generator,
    count: int = 20,
    dt: float = 0.01,
    scale: float = 1.0,
    u_dim: int = 0,
    rtol: float = 1e-5,
) -> float:
    """Max relative error of A and C vs central finite differences of f and h.

    Probes `count` random states; returns the worst relative error found.
    """
    worst = 0.0
    for _ in range(count):
        x = scale * rng.standard_normal(model.n)
        u = scale * rng.standard_normal(u_dim) if u_dim else np.zeros(0)
        h = 1e-6 * max(1.0, float(np.max(np.abs(x))))
        a_fd = np.empty((model.n, model.n))
        c_fd = np.empty((model.m, model.n))
        for j in range(model.n):
            dx = np.zeros(model.n)
            dx[j] = h
            a_fd[:, j] = (
                np.asarray(model.f(x + dx, u, dt), dtype=float)
                - np.asarray(model.f(x - dx, u, dt), dtype=float)
            ) / (2 * h)
            dh = np.asarray(model.h(x + dx), dtype=float) - np.asarray(
                model.h(x - dx), dtype=float
            )
            if model.wrap_residual is not None:  # angular components
                dh = model.wrap_residual(dh)
            c_fd[:, j] = dh / (2 * h)
        a = np.asarray(model.A(x, u, dt), dtype=float)
        c = np.asarray(model.C(x), dtype=float)
        err_a = np.linalg.norm(a - a_fd) / max(np.linalg.norm(a), 1e-12)
        err_c = np.linalg.norm(c - c_fd) / max(np.linalg.norm(c), 1e-12)
        worst = max(worst, err_a, err_c)
    if worst > rtol:
        raise InvalidInput(f"Jacobian mismatch: relative error {worst:.3e}")
    return worst

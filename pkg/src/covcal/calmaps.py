"""Post-hoc covariance calibration maps.

Four map families, in order of capacity: a nonnegative scalar s with
P = s * Phat (closed form); a constant matrix A with P = A Phat A^T (local
gradient descent with backtracking); and feedforward networks Q = phi(Phat)
or Q = phi(xhat, Phat) with P = Q Q^T, trained with a hand-rolled
reverse-mode gradient and Adam.  Every map emits PSD covariances by
construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    DegenerateFit,
    InvalidInput,
    OptimizerStalled,
    TrainingDiverged,
    UndefinedBaseline,
)
from .statmath import CovMatrix, pack_upper, tri_dim, tri_size, unpack_upper


# ---------------------------------------------------------------------------
# training data and loss weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingSet:
    """Pairs of estimated and target covariances (packed upper triangles).

    `x_hat` is optional and only consumed by state-dependent maps; `seq_id`
    and `timestep` record where each sample came from.
    """

    dim: int
    p_hat: np.ndarray              # (S, n(n+1)/2)
    p_target: np.ndarray           # (S, n(n+1)/2)
    x_hat: Optional[np.ndarray] = None  # (S, state_dim)
    seq_id: Optional[np.ndarray] = None
    timestep: Optional[np.ndarray] = None

    @classmethod
    def from_arrays(
        cls, p_hat, p_target, x_hat=None, seq_id=None, timestep=None,
        check_targets: bool = True,
    ) -> "TrainingSet":
        p_hat = np.atleast_2d(np.asarray(p_hat, dtype=float))
        p_target = np.atleast_2d(np.asarray(p_target, dtype=float))
        if p_hat.shape != p_target.shape:
            raise InvalidInput("p_hat and p_target must have identical shape")
        dim = tri_dim(p_hat.shape[1])
        if check_targets and p_target.size:
            mats = unpack_upper(p_target, dim)
            min_eig = np.min(np.linalg.eigvalsh(mats))
            scale = max(float(np.max(np.abs(p_target))), 1.0)
            if min_eig < -1e-9 * scale:
                raise InvalidInput(f"target covariances not PSD (min eig {min_eig:.3e})")
        if x_hat is not None:
            x_hat = np.atleast_2d(np.asarray(x_hat, dtype=float))
            if len(x_hat) != len(p_hat):
                raise InvalidInput("x_hat length mismatch")
        return cls(
            dim=dim, p_hat=p_hat, p_target=p_target, x_hat=x_hat,
            seq_id=None if seq_id is None else np.asarray(seq_id),
            timestep=None if timestep is None else np.asarray(timestep),
        )

    def __len__(self) -> int:
        return len(self.p_hat)


@dataclass(frozen=True)
class LossWeights:
    """Per-entry weights w_ij for the upper-triangle loss."""

    dim: int
    tri: np.ndarray  # (n(n+1)/2,)

    def __post_init__(self):
        tri = np.asarray(self.tri, dtype=float)
        object.__setattr__(self, "tri", tri)
        if tri.shape != (tri_size(self.dim),):
            raise InvalidInput("weight vector length must match dim")
        if np.any(tri <= 0):
            raise InvalidInput("all loss weights must be positive")

    def matrix(self) -> np.ndarray:
        """Symmetric matrix V with V_ii = w_ii and V_ij = w_ij / 2 off the
        diagonal, so that sum_ij V_ij r_ij^2 equals the upper-triangle sum."""
        full = unpack_upper(self.tri, self.dim)
        off = ~np.eye(self.dim, dtype=bool)
        full[off] *= 0.5
        return full


def uniform_weights(dim: int) -> LossWeights:
    return LossWeights(dim=dim, tri=np.ones(tri_size(dim)))


def ekf2d_weights(dim: int = 4) -> LossWeights:
    """Diagonal entries weighted 5, off-diagonals 1."""
    w = unpack_upper(np.ones(tri_size(dim)), dim)
    np.fill_diagonal(w, 5.0)
    return LossWeights(dim=dim, tri=pack_upper(w))


def vio_weights(dim: int = 9, block: int = 3) -> LossWeights:
    """Diagonals 10, off-diagonals inside each 3x3 state block 2.5, rest 0.5."""
    w = np.full((dim, dim), 0.5)
    for b in range(0, dim, block):
        w[b : b + block, b : b + block] = 2.5
    np.fill_diagonal(w, 10.0)
    return LossWeights(dim=dim, tri=pack_upper(w))


LOSS_WEIGHT_PRESETS = {
    "uniform": uniform_weights,
    "ekf2d": ekf2d_weights,
    "vio": vio_weights,
}


# ---------------------------------------------------------------------------
# hypothesis 1: global scalar
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalarMap:
    """P = s * Phat with s >= 0."""

    s: float

    def __post_init__(self):
        if self.s < 0:
            raise InvalidInput("scalar factor must be nonnegative")

    def apply(self, p_hat, x_hat=None) -> CovMatrix:
        p = p_hat.full() if isinstance(p_hat, CovMatrix) else np.asarray(p_hat, dtype=float)
        return CovMatrix.from_matrix(self.s * p, check=False)

    def apply_packed(self, packed, x_hat=None) -> np.ndarray:
        return self.s * np.asarray(packed, dtype=float)


def fit_scalar(ts: TrainingSet, weights: Optional[LossWeights] = None) -> ScalarMap:
    """Exact minimizer of the (optionally weighted) scalar calibration fit.

    The objective sum w_ij (s Phat_ij - P_ij)^2 over all samples and
    upper-triangle entries is quadratic in s; the minimizer is the weighted
    inner product ratio, clamped at zero.
    """
    if len(ts) == 0:
        raise InvalidInput("empty training set")
    w = weights.tri if weights is not None else 1.0
    denom = float(np.sum(w * ts.p_hat * ts.p_hat))
    if denom <= 0.0:
        raise DegenerateFit("all estimated covariances are zero")
    num = float(np.sum(w * ts.p_hat * ts.p_target))
    return ScalarMap(s=max(0.0, num / denom))


# ---------------------------------------------------------------------------
# hypothesis 2: global matrix congruence
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MatrixMap:
    """P = A Phat A^T for a constant matrix A (PSD by congruence)."""

    a: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        object.__setattr__(self, "a", a)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise InvalidInput("A must be square")
        if not np.all(np.isfinite(a)):
            raise InvalidInput("A must be finite")

    def apply(self, p_hat, x_hat=None) -> CovMatrix:
        p = p_hat.full() if isinstance(p_hat, CovMatrix) else np.asarray(p_hat, dtype=float)
        return CovMatrix.from_matrix(self.a @ p @ self.a.T, check=False)

    def apply_packed(self, packed, x_hat=None) -> np.ndarray:
        mats = unpack_upper(np.asarray(packed, dtype=float), self.a.shape[0])
        out = np.einsum("ij,sjk,lk->sil", self.a, mats, self.a)
        return pack_upper(out)


def _matrix_objective_grad(a, p_hat_mats, p_tgt_mats, vmat):
    """Mean weighted squared residual of A P A^T - P_target and its gradient."""
    apat = np.einsum("ij,sjk,lk->sil", a, p_hat_mats, a)
    r = apat - p_tgt_mats
    obj = float(np.mean(np.sum(vmat * r * r, axis=(1, 2))))
    am = np.einsum("ij,sjk->sik", a, p_hat_mats)  # A P per sample
    grad = 4.0 * np.mean(np.einsum("sij,sjk->sik", vmat * r, am), axis=0)
    return obj, grad


def fit_matrix(
    ts: TrainingSet,
    init: Optional[MatrixMap] = None,
    weights: Optional[LossWeights] = None,
    max_iter: int = 1000,
    grad_tol: float = 1e-8,
):
    """Local minimizer of the matrix congruence fit by descent.

    Plain gradient descent with a backtracking (Armijo) line search on the
    quartic nonconvex objective; the accepted-step objective sequence is
    non-increasing.  The default initial guess is s*I with s from
    fit_scalar, which can only improve on the scalar fit's training
    objective.  Returns (MatrixMap, per-iteration objective curve).
    """
    if len(ts) == 0:
        raise InvalidInput("empty training set")
    n = ts.dim
    if init is None:
        init = MatrixMap(a=fit_scalar(ts).s * np.eye(n))
    vmat = (weights if weights is not None else uniform_weights(n)).matrix()
    p_hat_mats = unpack_upper(ts.p_hat, n)
    p_tgt_mats = unpack_upper(ts.p_target, n)

    a = init.a.copy()
    obj, grad = _matrix_objective_grad(a, p_hat_mats, p_tgt_mats, vmat)
    curve = [obj]
    step = 1.0
    for it in range(max_iter):
        gnorm2 = float(np.sum(grad * grad))
        if math.sqrt(gnorm2) < grad_tol:
            break
        accepted = False
        while step >= 1e-18:
            a_new = a - step * grad
            obj_new, grad_new = _matrix_objective_grad(
                a_new, p_hat_mats, p_tgt_mats, vmat
            )
            if obj_new <= obj - 1e-4 * step * gnorm2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if it == 0:
                raise OptimizerStalled(
                    "no decreasing step found from the initial guess"
                )
            break
        a, obj, grad = a_new, obj_new, grad_new
        curve.append(obj)
        step *= 1.5
    return MatrixMap(a=a), np.asarray(curve)


# ---------------------------------------------------------------------------
# hypotheses 3 and 4: feedforward network maps
# ---------------------------------------------------------------------------

@dataclass
class MlpMap:
    """ReLU network mapping tri(Phat) (optionally with xhat prepended) to a
    matrix Q; the calibrated covariance is Q Q^T."""

    dim: int
    use_state: bool
    state_dim: int
    weights: list  # [(out, in) arrays]
    biases: list   # [(out,) arrays]

    @property
    def hidden_widths(self) -> tuple:
        return tuple(w.shape[0] for w in self.weights[:-1])

    @property
    def input_size(self) -> int:
        return self.weights[0].shape[1]

    def _inputs(self, packed, x_hat):
        packed = np.atleast_2d(np.asarray(packed, dtype=float))
        if self.use_state:
            if x_hat is None:
                raise InvalidInput("this map requires the estimated state")
            x_hat = np.atleast_2d(np.asarray(x_hat, dtype=float))
            if x_hat.shape[1] != self.state_dim:
                raise InvalidInput(
                    f"expected state dim {self.state_dim}, got {x_hat.shape[1]}"
                )
            return np.hstack([x_hat, packed])
        return packed

    def forward(self, packed, x_hat=None) -> np.ndarray:
        """Batch forward pass; returns Q of shape (S, n, n)."""
        act = self._inputs(packed, x_hat)
        if act.shape[1] != self.input_size:
            raise InvalidInput(
                f"expected input size {self.input_size}, got {act.shape[1]}"
            )
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            act = np.maximum(act @ w.T + b, 0.0)
        out = act @ self.weights[-1].T + self.biases[-1]
        return out.reshape(-1, self.dim, self.dim)

    def apply(self, p_hat, x_hat=None) -> CovMatrix:
        packed = p_hat.packed if isinstance(p_hat, CovMatrix) else pack_upper(p_hat)
        q = self.forward(packed[None, :], None if x_hat is None else np.asarray(x_hat)[None, :])[0]
        return CovMatrix.from_matrix(q @ q.T, check=False)

    def apply_packed(self, packed, x_hat=None) -> np.ndarray:
        q = self.forward(packed, x_hat)
        return pack_upper(np.einsum("sij,skj->sik", q, q))


def mlp_forward(mlp: MlpMap, p_hat, x_hat=None) -> CovMatrix:
    """Calibrated covariance Q Q^T for one sample (PSD by construction)."""
    return mlp.apply(p_hat, x_hat)


def _forward_cached(mlp: MlpMap, x: np.ndarray):
    """Forward pass keeping pre-activations for backprop."""
    acts = [x]
    zs = []
    act = x
    for w, b in zip(mlp.weights[:-1], mlp.biases[:-1]):
        z = act @ w.T + b
        zs.append(z)
        act = np.maximum(z, 0.0)
        acts.append(act)
    out = act @ mlp.weights[-1].T + mlp.biases[-1]
    return out, acts, zs


def _loss_terms(mlp, q_flat, p_target_tri, weights):
    n = mlp.dim
    s_batch = q_flat.shape[0]
    q = q_flat.reshape(s_batch, n, n)
    qqt = np.einsum("sij,skj->sik", q, q)
    r = qqt - unpack_upper(p_target_tri, n)
    vmat = weights.matrix()
    data_loss = float(np.mean(np.sum(vmat * r * r, axis=(1, 2))))
    # d(loss_s)/dQ = 4 (V o r) Q; mean over the batch
    dq = 4.0 * np.einsum("sij,sjk->sik", vmat * r, q) / s_batch
    return data_loss, dq.reshape(s_batch, n * n)


def mlp_loss(
    mlp: MlpMap, p_hat, p_target, weights: LossWeights, l2: float = 0.0,
    x_hat=None,
) -> float:
    """Mean weighted upper-triangle loss of Q Q^T against the targets, plus
    l2 times the sum of squared weight-matrix entries (biases excluded)."""
    p_hat = np.atleast_2d(np.asarray(p_hat, dtype=float))
    if p_hat.size == 0:
        raise InvalidInput("empty batch")
    x = mlp._inputs(p_hat, x_hat)
    out, _, _ = _forward_cached(mlp, x)
    p_target = np.atleast_2d(np.asarray(p_target, dtype=float))
    data_loss, _ = _loss_terms(mlp, out, p_target, weights)
    reg = l2 * sum(float(np.sum(w * w)) for w in mlp.weights)
    return data_loss + reg


def mlp_loss_grad(
    mlp: MlpMap, p_hat, p_target, weights: LossWeights, l2: float = 0.0,
    x_hat=None,
):
    """Loss plus its gradient w.r.t. every weight matrix and bias vector."""
    p_hat = np.atleast_2d(np.asarray(p_hat, dtype=float))
    p_target = np.atleast_2d(np.asarray(p_target, dtype=float))
    x = mlp._inputs(p_hat, x_hat)
    return _mlp_batch_grad(mlp, x, p_target, weights, l2)


def _init_mlp(
    dim: int, input_size: int, hidden, use_state: bool, state_dim: int,
    rng: np.random.Generator,
) -> MlpMap:
    """Scaled-uniform fan-in (He-style) initialization; zero biases."""
    sizes = [input_size, *hidden, dim * dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpMap(
        dim=dim, use_state=use_state, state_dim=state_dim,
        weights=weights, biases=biases,
    )


@dataclass(frozen=True)
class AdamParams:
    """Adam optimizer settings (published defaults)."""

    step: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def train_mlp(
    ts: TrainingSet,
    hidden,
    weights: LossWeights,
    l2: float = 0.0,
    epochs: int = 50,
    seed: int = 0,
    use_state: bool = False,
    batch_size: int = 256,
    adam: AdamParams = AdamParams(),
):
    """Train a network calibration map with Adam.

    Inputs are standardized and targets rescaled internally for conditioning;
    both affine transforms are folded back into the first/last layers before
    returning, so the resulting map consumes raw covariances.  Training is
    deterministic given the seed (separate init and shuffle streams).

    Returns (MlpMap, loss curve).  The curve holds the full-training-set loss
    in the trainer's normalized units, evaluated before training and after
    each epoch.

    Raises TrainingDiverged if the loss ever becomes non-finite.
    """
    if len(ts) == 0:
        raise InvalidInput("empty training set")
    if use_state and ts.x_hat is None:
        raise InvalidInput("training set has no estimated states")
    n = ts.dim
    state_dim = ts.x_hat.shape[1] if use_state else 0

    raw_inputs = np.hstack([ts.x_hat, ts.p_hat]) if use_state else ts.p_hat
    in_mean = raw_inputs.mean(axis=0)
    in_std = raw_inputs.std(axis=0)
    in_std[in_std < 1e-12] = 1.0
    x_norm = (raw_inputs - in_mean) / in_std

    # One global scale for the targets keeps Q order-one during training.
    diag_idx = pack_upper(np.diag(np.arange(1.0, n + 1))) > 0
    target_scale = math.sqrt(float(np.mean(np.abs(ts.p_target[:, diag_idx]))))
    if not np.isfinite(target_scale) or target_scale <= 0.0:
        target_scale = 1.0
    p_norm = ts.p_target / target_scale**2

    init_rng, shuffle_rng = [
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)
    ]
    mlp = _init_mlp(n, x_norm.shape[1], tuple(hidden), use_state, state_dim, init_rng)
    # Start the output at the Cholesky factor of the mean target: Q Q^T has
    # a saddle at Q = 0 (gradients are proportional to Q), so a zero-ish
    # output init leaves the smallest covariance direction unlearned for a
    # long time and risks det(Q) branch flips along the input manifold.
    mean_target = unpack_upper(p_norm.mean(axis=0), n)
    try:
        chol0 = np.linalg.cholesky(
            mean_target + 1e-9 * np.trace(mean_target) / n * np.eye(n)
        )
        mlp.biases[-1] = chol0.reshape(-1)
    except np.linalg.LinAlgError:
        pass  # degenerate targets: keep the zero bias

    def full_loss():
        total = 0.0
        for start in range(0, len(x_norm), 4096):
            chunk = slice(start, start + 4096)
            out, _, _ = _forward_cached(mlp, x_norm[chunk])
            d, _ = _loss_terms(mlp, out, p_norm[chunk], weights)
            total += d * (out.shape[0] / len(x_norm))
        return total + l2 * sum(float(np.sum(w * w)) for w in mlp.weights)

    params = mlp.weights + mlp.biases
    m_acc = [np.zeros_like(p) for p in params]
    v_acc = [np.zeros_like(p) for p in params]
    t_step = 0
    curve = [full_loss()]
    num = len(x_norm)
    for epoch in range(epochs):
        perm = shuffle_rng.permutation(num)
        for start in range(0, num, batch_size):
            idx = perm[start : start + batch_size]
            loss, gw, gb = _mlp_batch_grad(mlp, x_norm[idx], p_norm[idx], weights, l2)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {start // batch_size}"
                )
            t_step += 1
            corr1 = 1.0 - adam.beta1**t_step
            corr2 = 1.0 - adam.beta2**t_step
            for p, g, m, v in zip(params, gw + gb, m_acc, v_acc):
                m *= adam.beta1
                m += (1.0 - adam.beta1) * g
                v *= adam.beta2
                v += (1.0 - adam.beta2) * g * g
                p -= adam.step * (m / corr1) / (np.sqrt(v / corr2) + adam.eps)
        curve.append(full_loss())

    # Fold normalization into the trained weights: layer 0 absorbs the input
    # standardization, the output layer absorbs the target scale.
    w0 = mlp.weights[0] / in_std
    b0 = mlp.biases[0] - w0 @ in_mean
    mlp.weights[0] = w0
    mlp.biases[0] = b0
    mlp.weights[-1] = target_scale * mlp.weights[-1]
    mlp.biases[-1] = target_scale * mlp.biases[-1]
    return mlp, np.asarray(curve)


def _mlp_batch_grad(mlp, x, p_target_tri, weights, l2):
    """Gradient step helper on pre-normalized inputs."""
    out, acts, zs = _forward_cached(mlp, x)
    data_loss, dz = _loss_terms(mlp, out, p_target_tri, weights)
    loss = data_loss + l2 * sum(float(np.sum(w * w)) for w in mlp.weights)
    grads_w = [None] * len(mlp.weights)
    grads_b = [None] * len(mlp.biases)
    for layer in range(len(mlp.weights) - 1, -1, -1):
        grads_w[layer] = dz.T @ acts[layer] + 2.0 * l2 * mlp.weights[layer]
        grads_b[layer] = np.sum(dz, axis=0)
        if layer > 0:
            da = dz @ mlp.weights[layer]
            dz = da * (zs[layer - 1] > 0.0)
    return loss, grads_w, grads_b


# ---------------------------------------------------------------------------
# presets and reporting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpPreset:
    hidden: tuple
    l2: float
    epochs: int
    use_state: bool


MLP_PRESETS = {
    "ekf2d-h3": MlpPreset(hidden=(512, 512, 256, 256, 128, 64), l2=1e-4, epochs=50, use_state=False),
    "ekf2d-h4": MlpPreset(hidden=(128, 128, 128, 128, 128), l2=1e-3, epochs=150, use_state=True),
    "vio-h3": MlpPreset(hidden=(1024, 512, 256, 128, 64), l2=1e-3, epochs=25, use_state=False),
    "vio-h4": MlpPreset(hidden=(256, 256, 256, 128, 128), l2=1e-3, epochs=50, use_state=True),
}


def percent_decrease(d_unadj: float, d_method: float, d_gt: float) -> float:
    """Divergence reduction as a percentage of the unadjusted-to-ground-truth
    reduction: 100 (d_unadj - d_method) / (d_unadj - d_gt)."""
    if d_unadj == d_gt:
        raise UndefinedBaseline("unadjusted and ground-truth divergences coincide")
    return 100.0 * (d_unadj - d_method) / (d_unadj - d_gt)

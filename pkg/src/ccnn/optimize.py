"""Convex training: losses, norm-ball projections, and projected SGD.

The parameter is a single matrix A of shape (m, P' * d2) read as d2
horizontal blocks A_l of shape (m, P'); the score of class l on a sample
with pooled feature matrix Z (shape (P', m)) is tr(Z A_l). The objective is
the sum of per-sample losses over the dataset, and the feasible set is a
nuclear-norm (or Frobenius-norm) ball of radius R.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError

LOSS_KINDS = ("multiclass_logistic", "squared")
PROJECTION_KINDS = ("nuclear", "frobenius", "none")
SCHEDULES = ("inv_sqrt", "const")


@dataclass(frozen=True)
class LossSpec:
    """Loss kind plus the output dimension d2."""

    kind: str
    d2: int

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.d2 < 1:
            raise ValueError(f"d2 must be >= 1, got {self.d2}")


@dataclass(frozen=True)
class OptConfig:
    """Projected-SGD settings.

    The step at global step t is step_size / sqrt(1 + t / T0) for the
    "inv_sqrt" schedule (T0 = steps per epoch) and step_size for "const".
    projection selects the feasible set; radius is its R. project_every
    applies the projection every k-th step (always at epoch end).
    early_stop caps the epoch count below `epochs` when set.
    """

    epochs: int = 10
    batch_size: int = 50
    step_size: float = 1.0
    schedule: str = "inv_sqrt"
    projection: str = "nuclear"
    radius: float | None = None
    project_every: int = 1
    early_stop: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.step_size > 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.projection not in PROJECTION_KINDS:
            raise ValueError(f"unknown projection {self.projection!r}")
        if self.projection != "none":
            if self.radius is None or self.radius < 0:
                raise ValueError(
                    f"projection {self.projection!r} needs radius >= 0, "
                    f"got {self.radius!r}"
                )
        if self.project_every < 1:
            raise ValueError(
                f"project_every must be >= 1, got {self.project_every}"
            )
        if self.early_stop is not None and self.early_stop < 1:
            raise ValueError(
                f"early_stop must be >= 1, got {self.early_stop}"
            )


def _score_targets(loss: LossSpec, y: np.ndarray) -> np.ndarray:
    """Targets in score space for the squared loss."""
    if loss.d2 == 1:
        return np.asarray(y, dtype=np.float64).reshape(-1, 1)
    t = np.zeros((len(y), loss.d2))
    t[np.arange(len(y)), np.asarray(y, dtype=np.int64)] = 1.0
    return t


def _batch_loss_grad(loss: LossSpec, scores: np.ndarray, y: np.ndarray):
    """Per-sample loss values and score-space gradients for a batch."""
    if loss.kind == "multiclass_logistic":
        y = np.asarray(y, dtype=np.int64)
        if y.size and (y.min() < 0 or y.max() >= loss.d2):
            raise ValueError(
                f"labels must lie in [0, {loss.d2}), got range "
                f"[{y.min()}, {y.max()}]"
            )
        shift = scores - scores.max(axis=1, keepdims=True)
        expo = np.exp(shift)
        sums = expo.sum(axis=1, keepdims=True)
        lse = np.log(sums[:, 0]) + scores.max(axis=1)
        values = lse - scores[np.arange(len(y)), y]
        grads = expo / sums
        grads[np.arange(len(y)), y] -= 1.0
        return values, grads
    targets = _score_targets(loss, y)
    diff = scores - targets
    return np.sum(diff * diff, axis=1), 2.0 * diff


def loss_and_grad(loss: LossSpec, scores, label):
    """Loss value and gradient in score space for one sample.

    For multiclass logistic the value is -score[label] + logsumexp(scores)
    and the gradient is softmax(scores) minus the label's indicator; for
    squared loss the target is the label itself (d2 = 1) or its one-hot
    encoding.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(1, -1)
    if scores.shape[1] != loss.d2:
        raise ValueError(
            f"scores have length {scores.shape[1]}, expected d2 = {loss.d2}"
        )
    y = np.asarray([label])
    values, grads = _batch_loss_grad(loss, scores, y)
    return float(values[0]), grads[0]


def _scores(A3: np.ndarray, Zs: np.ndarray) -> np.ndarray:
    # A3 is (m, d2, P'), Zs is (b, P', m); scores_{b,l} = tr(Z_b A_l)
    return np.einsum("bpm,mlp->bl", Zs, A3, optimize=True)


def objective_value(A, Zs, y, loss: LossSpec) -> float:
    """Sum of per-sample losses over the dataset at parameter A."""
    Zs = np.asarray(Zs, dtype=np.float64)
    m = Zs.shape[2]
    A3 = np.asarray(A, dtype=np.float64).reshape(m, loss.d2, Zs.shape[1])
    values, _ = _batch_loss_grad(loss, _scores(A3, Zs), y)
    return float(values.sum())


def objective_grad(A, Zs, y, loss: LossSpec):
    """Objective value and gradient for a batch.

    Parameters
    ----------
    A : array (m, P' * d2)
    Zs : array (b, P', m)
        Pooled feature matrices.
    y : array (b,)
    loss : LossSpec

    Returns
    -------
    (value, grad) : (float, array like A)
        value is the summed loss; grad's block l is
        sum_i g_{i,l} Z_i^T.
    """
    Zs = np.asarray(Zs, dtype=np.float64)
    if Zs.ndim != 3:
        raise ValueError(f"Zs must be (b, P', m), got shape {Zs.shape}")
    b, P, m = Zs.shape
    A = np.asarray(A, dtype=np.float64)
    if A.shape != (m, P * loss.d2):
        raise ValueError(
            f"A has shape {A.shape}, expected {(m, P * loss.d2)}"
        )
    A3 = A.reshape(m, loss.d2, P)
    values, G = _batch_loss_grad(loss, _scores(A3, Zs), y)
    grad3 = np.einsum("bl,bpm->mlp", G, Zs, optimize=True)
    return float(values.sum()), grad3.reshape(m, loss.d2 * P)


# ---------------------------------------------------------------------------
# Projections


def project_l1(v, radius: float) -> np.ndarray:
    """Euclidean projection of a nonnegative vector onto the l1 ball.

    Uses the sorted cumulative-sum threshold rule: with v sorted in
    decreasing order, the threshold is theta = (cumsum_rho - radius) / rho
    at the last index rho where v_rho exceeds it, and the projection is
    max(v - theta, 0).
    """
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"v must be 1-D, got shape {v.shape}")
    if v.size and v.min() < -1e-12:
        raise ValueError("v must be nonnegative")
    v = np.maximum(v, 0.0)
    if v.sum() <= radius:
        return v.copy()
    if radius == 0.0:
        return np.zeros_like(v)
    sorted_v = np.sort(v)[::-1]
    cumulative = np.cumsum(sorted_v)
    ranks = np.arange(1, v.size + 1)
    positive = sorted_v - (cumulative - radius) / ranks > 0
    rho = int(np.nonzero(positive)[0][-1])
    theta = (cumulative[rho] - radius) / (rho + 1)
    return np.maximum(v - theta, 0.0)


def project_nuclear(A, radius: float) -> np.ndarray:
    """Euclidean projection onto the nuclear-norm ball of the given radius.

    Returns A unchanged when it is already feasible; otherwise projects the
    singular values onto the l1 ball and recomposes.
    """
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"A must be 2-D, got shape {A.shape}")
    if np.linalg.svd(A, compute_uv=False).sum() <= radius:
        return A
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    s_proj = project_l1(s, radius)
    return (U * s_proj) @ Vt


def project_frobenius(A, radius: float) -> np.ndarray:
    """Euclidean projection onto the Frobenius-norm ball (radial rescale)."""
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    A = np.asarray(A, dtype=np.float64)
    norm = np.linalg.norm(A)
    if norm <= radius:
        return A
    if radius == 0.0:
        return np.zeros_like(A)
    return A * (radius / norm)


def effective_rank(A) -> float:
    """Nuclear norm over spectral norm; requires A != 0."""
    A = np.asarray(A, dtype=np.float64)
    s = np.linalg.svd(A, compute_uv=False)
    top = s.max() if s.size else 0.0
    if top == 0.0:
        raise ValueError("effective rank is undefined for the zero matrix")
    return float(s.sum() / top)


def _project(A: np.ndarray, config: OptConfig) -> np.ndarray:
    if config.projection == "nuclear":
        return project_nuclear(A, config.radius)
    if config.projection == "frobenius":
        return project_frobenius(A, config.radius)
    return A


# ---------------------------------------------------------------------------
# Projected SGD


@dataclass
class EpochRecord:
    """Per-epoch training diagnostics."""

    epoch: int
    objective: float
    train_error: float
    nuclear_norm: float
    effective_rank: float
    wall_ms: float


def records_to_csv(records, path) -> None:
    """Write per-epoch records as CSV.

    Columns: epoch, objective, nuclear_norm, effective_rank, wall_ms.
    All values except wall_ms are deterministic for fixed seeds.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "objective", "nuclear_norm", "effective_rank", "wall_ms"]
        )
        for r in records:
            writer.writerow([
                r.epoch, repr(float(r.objective)), repr(float(r.nuclear_norm)),
                repr(float(r.effective_rank)), repr(float(r.wall_ms)),
            ])


def psgd(Zs, y, loss: LossSpec, config: OptConfig):
    """Projected stochastic gradient descent from A = 0.

    Parameters
    ----------
    Zs : array (n, P', m)
        Pooled feature matrices, one per sample.
    y : array (n,)
        Labels (class indices; real targets for squared loss with d2 = 1).
    loss : LossSpec
    config : OptConfig

    Returns
    -------
    (A, records) : (array (m, P' * d2), list of EpochRecord)
        The final (projected, feasible) iterate and per-epoch diagnostics.
        Steps use the mean gradient of each minibatch; the recorded
        objective is the summed loss over the full dataset.

    Raises
    ------
    NumericalError
        If the objective becomes non-finite.
    """
    Zs = np.asarray(Zs, dtype=np.float64)
    if Zs.ndim != 3:
        raise ValueError(f"Zs must be (n, P', m), got shape {Zs.shape}")
    n, P, m = Zs.shape
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if loss.kind == "multiclass_logistic":
        y = np.asarray(y, dtype=np.int64)
    else:
        y = np.asarray(y, dtype=np.float64)
    if y.shape != (n,):
        raise ValueError(f"y must have shape ({n},), got {y.shape}")

    A = np.zeros((m, P * loss.d2))
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = -(-n // config.batch_size)
    n_epochs = config.epochs
    if config.early_stop is not None:
        n_epochs = min(n_epochs, config.early_stop)

    records: list[EpochRecord] = []
    t = 0
    # divergence shows up as inf/nan in the objective, which is caught and
    # reported below; the intermediate overflow warnings are just noise
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(n_epochs):
            tic = time.perf_counter()
            perm = rng.permutation(n)
            for start in range(0, n, config.batch_size):
                idx = perm[start:start + config.batch_size]
                _, grad = objective_grad(A, Zs[idx], y[idx], loss)
                if config.schedule == "inv_sqrt":
                    eta = config.step_size / np.sqrt(1.0 + t / steps_per_epoch)
                else:
                    eta = config.step_size
                A -= (eta / len(idx)) * grad
                t += 1
                if (config.projection != "none"
                        and t % config.project_every == 0):
                    A = _project(A, config)
            if config.projection != "none":
                A = _project(A, config)
            wall_ms = (time.perf_counter() - tic) * 1e3

            scores = _scores(A.reshape(m, loss.d2, P), Zs)
            values, _ = _batch_loss_grad(loss, scores, y)
            obj = float(values.sum())
            if not np.isfinite(obj):
                raise NumericalError(
                    f"objective became non-finite ({obj}) at epoch {epoch}; "
                    f"reduce the step size or tighten the radius"
                )
            s = np.linalg.svd(A, compute_uv=False)
            nuc = float(s.sum())
            eff = (float(nuc / s.max())
                   if s.size and s.max() > 0 else float("nan"))
            if loss.kind == "multiclass_logistic":
                train_error = float(np.mean(scores.argmax(axis=1) != y))
            else:
                train_error = float("nan")
            records.append(
                EpochRecord(epoch, obj, train_error, nuc, eff, wall_ms))
    return A, records

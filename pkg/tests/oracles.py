"""Independent reference implementations used to check the library.

Everything here is written against the definitions, not the library code:
objectives go through scipy's logsumexp and explicit per-block traces,
the nuclear projection solves its scalar dual by bisection instead of the
sorted-cumulative-sum rule, and pooling is plain per-window loops.
"""

import numpy as np
from scipy.special import logsumexp


def oracle_objective(A, Zs, y, d2: int) -> float:
    """Summed multiclass logistic loss, computed from scratch.

    A is (m, P' * d2) with class blocks A_l = A[:, l*P' : (l+1)*P'];
    the score of class l on sample i is tr(Z_i A_l) with Z_i (P', m).
    """
    A = np.asarray(A, dtype=np.float64)
    Zs = np.asarray(Zs, dtype=np.float64)
    n, P, m = Zs.shape
    scores = np.stack([
        np.sum(Zs * A[:, l * P:(l + 1) * P].T[None], axis=(1, 2))
        for l in range(d2)
    ], axis=1)
    picked = scores[np.arange(n), np.asarray(y)]
    return float(np.sum(logsumexp(scores, axis=1) - picked))


def fd_gradient(A, Zs, y, d2: int, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of oracle_objective in every coordinate."""
    A = np.asarray(A, dtype=np.float64)
    grad = np.zeros_like(A)
    for idx in np.ndindex(A.shape):
        step = np.zeros_like(A)
        step[idx] = h
        grad[idx] = (oracle_objective(A + step, Zs, y, d2)
                     - oracle_objective(A - step, Zs, y, d2)) / (2.0 * h)
    return grad


def nuclear_projection_oracle(A, radius: float, tol: float = 1e-8):
    """Projection onto the nuclear ball via bisection on the dual threshold.

    The projection shrinks singular values by a threshold theta chosen so
    the shrunk values sum to the radius (KKT conditions of the dual scalar
    problem); theta is found by bisection to `tol`, with no reliance on
    the sorted-cumulative-sum rule used by the implementation under test.
    """
    A = np.asarray(A, dtype=np.float64)
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s.sum() <= radius:
        return A.copy()
    if radius == 0.0:
        return np.zeros_like(A)
    lo, hi = 0.0, float(s.max())
    for _ in range(200):
        theta = 0.5 * (lo + hi)
        total = np.maximum(s - theta, 0.0).sum()
        if abs(total - radius) <= tol:
            break
        if total > radius:
            lo = theta
        else:
            hi = theta
    s_proj = np.maximum(s - 0.5 * (lo + hi), 0.0)
    return (U * s_proj) @ Vt


def nuclear_projection_subgradient_oracle(A, radius: float,
                                          tol: float = 1e-8) -> np.ndarray:
    """Projection onto the nuclear ball by projected subgradient ascent.

    Maximizes the concave scalar dual d(theta) = min_s {0.5 ||s - sigma||^2
    + theta (sum(s) - radius), s >= 0} by subgradient steps on theta
    projected onto theta >= 0, halving the step whenever the supergradient
    d'(theta) = sum(max(sigma - theta, 0)) - radius changes sign, until
    both the step and the constraint violation are below `tol`. A primal
    subgradient method would need the very projection being tested, so the
    ascent runs on the dual.
    """
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    A = np.asarray(A, dtype=np.float64)
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s.sum() <= radius:
        return A.copy()
    theta = 0.0
    step = float(s.max())
    prev_sign = None
    for _ in range(10000):
        g = np.maximum(s - theta, 0.0).sum() - radius
        sign = 1.0 if g > 0 else -1.0
        if prev_sign is not None and sign != prev_sign:
            step *= 0.5
        if step <= tol and abs(g) <= tol * max(1.0, radius):
            break
        theta = max(0.0, theta + step * sign)
        prev_sign = sign
    s_proj = np.maximum(s - theta, 0.0)
    return (U * s_proj) @ Vt


def l1_projection_oracle(v, radius: float, tol: float = 1e-10) -> np.ndarray:
    """Projection of a nonnegative vector onto the simplex-scaled l1 ball,
    by bisection on the shared threshold."""
    v = np.asarray(v, dtype=np.float64)
    if v.sum() <= radius:
        return v.copy()
    if radius == 0.0:
        return np.zeros_like(v)
    lo, hi = 0.0, float(v.max())
    for _ in range(200):
        theta = 0.5 * (lo + hi)
        total = np.maximum(v - theta, 0.0).sum()
        if abs(total - radius) <= tol:
            break
        if total > radius:
            lo = theta
        else:
            hi = theta
    return np.maximum(v - 0.5 * (lo + hi), 0.0)


def pool_windows(grid_h: int, grid_w: int, pool_side: int, pool_stride: int):
    """Lists of flat patch indices, one per pooled window, row-major."""
    windows = []
    for oy in range(0, grid_h, pool_stride):
        for ox in range(0, grid_w, pool_stride):
            members = []
            for dy in range(pool_side):
                for dx in range(pool_side):
                    yy, xx = oy + dy, ox + dx
                    if yy < grid_h and xx < grid_w:
                        members.append(yy * grid_w + xx)
            windows.append(members)
    return windows


def pool_matrix_oracle(grid_h: int, grid_w: int, pool_side: int,
                       pool_stride: int) -> np.ndarray:
    """Dense average-pooling matrix built with explicit loops."""
    windows = pool_windows(grid_h, grid_w, pool_side, pool_stride)
    G = np.zeros((len(windows), grid_h * grid_w))
    for row, members in enumerate(windows):
        for p in members:
            G[row, p] = 1.0 / len(members)
    return G


def pooled_trace_oracle(Z, A_block, windows) -> float:
    """tr((GZ)A_l) computed as per-window averages of per-patch responses.

    Z is (P, m), A_block is (m, P') with one column per pooled window;
    entry (GZ A_l)_{p', p'} is the average over window p' of the patch
    responses z_p^T a_{p'}.
    """
    total = 0.0
    for pp, members in enumerate(windows):
        responses = [float(Z[p] @ A_block[:, pp]) for p in members]
        total += sum(responses) / len(members)
    return total


def gaussian_kernel_oracle(x, z, gamma: float) -> float:
    d = np.asarray(x, dtype=np.float64) - np.asarray(z, dtype=np.float64)
    return float(np.exp(-gamma * np.dot(d, d)))


def inverse_poly_kernel_oracle(x, z) -> float:
    return float(1.0 / (2.0 - np.dot(x, z)))


def power_iteration_spectral_norm(A, iters: int = 500, seed: int = 0) -> float:
    """Largest singular value by power iteration on A^T A."""
    A = np.asarray(A, dtype=np.float64)
    rng = np.random.default_rng(seed)
    v = rng.normal(size=A.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = A.T @ (A @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
    return float(np.linalg.norm(A @ v))

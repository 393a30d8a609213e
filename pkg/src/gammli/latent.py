"""Group-regularized soft-impute ALS on the stage residual matrix.

Minimizes  ||P_Omega(M - U V^T)||_F^2 + lam * (||U - U~||_F^2 + ||V - V~||_F^2)
where U~ / V~ replace each row by its cluster mean (memberships are fixed,
taken from feature-space k-means). Factors are kept in the calibrated form
U = U* Sigma, V = V* Sigma with orthonormal U*, V*; each sweep does a ridge
solve against a working matrix held as sparse-plus-low-rank, then restores
the calibration through a thin SVD whose rotation is pushed into the opposite
factor so the reconstruction U V^T is unchanged by the re-parametrization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


@dataclass
class LatentFactors:
    u: np.ndarray  # (m, r) = U* Sigma
    v: np.ndarray  # (n, r) = V* Sigma
    sigma: np.ndarray  # (r,)
    u_star: np.ndarray
    v_star: np.ndarray
    lam: float
    rank: int
    user_assign: np.ndarray | None
    item_assign: np.ndarray | None
    objective_trace: list[float] = field(default_factory=list)
    rmse_trace: list[float] = field(default_factory=list)

    def predict_pairs(self, user_idx: np.ndarray, item_idx: np.ndarray) -> np.ndarray:
        return np.einsum("ij,ij->i", self.u[user_idx], self.v[item_idx])


def centroid_matrix(factors: np.ndarray, assign: np.ndarray | None) -> np.ndarray:
    """Each row replaced by the mean of its cluster's rows.

    ``assign=None`` means singleton clusters, where the centroid matrix is the
    input itself.
    """
    if assign is None:
        return factors.copy()
    k = int(assign.max()) + 1 if len(assign) else 0
    sums = np.zeros((k, factors.shape[1]))
    np.add.at(sums, assign, factors)
    counts = np.bincount(assign, minlength=k).astype(np.float64)
    means = sums / counts[:, None]
    return means[assign]


def cluster_means(factors: np.ndarray, assign: np.ndarray, k: int) -> np.ndarray:
    """(k, r) matrix of per-cluster mean factor rows."""
    sums = np.zeros((k, factors.shape[1]))
    np.add.at(sums, assign, factors)
    counts = np.bincount(assign, minlength=k).astype(np.float64)
    if (counts == 0).any():
        raise ValueError("cluster with no members")
    return sums / counts[:, None]


def working_matrix(
    m_obs: np.ndarray,
    mask: np.ndarray,
    u_hat: np.ndarray,
    v_hat: np.ndarray,
    v_tilde: np.ndarray,
) -> np.ndarray:
    """Dense M* = P_Omega(M - U^ V^^T) + U^ (V^ - V~)^T.

    The user-side analogue is this function on transposed arguments. fit_latent
    never materializes this (it keeps the sparse-plus-low-rank split); the
    dense form exists for small problems and as the test oracle route.
    """
    fit = np.where(mask, m_obs - u_hat @ v_hat.T, 0.0)
    return fit + u_hat @ (v_hat - v_tilde).T


def ridge_update(
    m_star: np.ndarray, u_star: np.ndarray, sigma: np.ndarray, lam: float
) -> np.ndarray:
    """Solve min ||M* - U* Sigma B^T||_F^2 + lam ||B||_F^2 for B (n, r).

    Closed form B^T = (Sigma^2 + lam I)^-1 Sigma U*^T M*, valid because U* has
    orthonormal columns.
    """
    shrink = _shrink(sigma, lam)
    return (shrink[:, None] * (u_star.T @ m_star)).T


def _shrink(sigma: np.ndarray, lam: float) -> np.ndarray:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    denom = sigma * sigma + lam
    if np.any(denom == 0.0):
        raise ValueError("singular ridge system: zero singular value with lambda=0")
    return sigma / denom


def thin_svd(a: np.ndarray):
    """(Q, S, W) with A = Q diag(S) W^T, Q (n, r) and W (r, r) orthonormal."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < a.shape[1]:
        raise ValueError("thin_svd expects a tall (n >= r) matrix")
    if a.shape[1] > 10:
        raise ValueError("latent rank above 10 is not supported")
    q, s, wt = np.linalg.svd(a, full_matrices=False)
    return q, s, wt.T


def fit_latent(
    rows: np.ndarray,
    cols: np.ndarray,
    values: np.ndarray,
    shape: tuple[int, int],
    rank: int,
    lam: float,
    user_assign: np.ndarray | None = None,
    item_assign: np.ndarray | None = None,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-4,
) -> LatentFactors:
    """Alternating ridge sweeps until the observed-entry RMSE stabilizes.

    Convergence: relative RMSE change below ``tol``, a sweep that fails to
    improve the objective (the pre-sweep state is kept), or ``max_iters``
    sweeps. The recorded objective (fit + centroid penalty) is non-increasing
    across sweeps by construction. Deterministic for a fixed seed.
    """
    m, n = shape
    if rank < 1 or rank > min(m, n, 10):
        raise ValueError(f"rank must lie in [1, {min(m, n, 10)}]")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    if not len(values):
        raise ValueError("no observed entries")

    # csr template; keep coordinates in csr data order so residual refills align
    template = sp.csr_matrix(
        (np.arange(len(values), dtype=np.float64), (rows, cols)), shape=shape
    )
    order = template.tocoo()
    c_rows = order.row.astype(np.int64)
    c_cols = order.col.astype(np.int64)
    c_vals = values[order.data.astype(np.int64)]

    rng = np.random.default_rng(seed)
    u_star, _ = np.linalg.qr(rng.standard_normal((m, rank)))
    sigma = np.ones(rank)
    v_star = np.zeros((n, rank))
    u_hat = u_star * sigma
    v_hat = v_star * sigma

    def sparse_residual() -> sp.csr_matrix:
        pred = np.einsum("ij,ij->i", u_hat[c_rows], v_hat[c_cols])
        out = template.copy()
        out.data = c_vals - pred
        return out

    def current_objective() -> tuple[float, float]:
        fit_term = float((sparse_residual().data ** 2).sum())
        pen = 0.0
        if lam > 0:
            pen += float(((u_hat - centroid_matrix(u_hat, user_assign)) ** 2).sum())
            pen += float(((v_hat - centroid_matrix(v_hat, item_assign)) ** 2).sum())
        return fit_term + lam * pen, fit_term

    objective_trace: list[float] = []
    rmse_trace: list[float] = []
    prev_rmse = None
    prev_obj, _ = current_objective()
    for _ in range(max_iters):
        # the ridge solves always descend but the re-orthogonalizations only
        # preserve the reconstruction, not the centroid penalty; near the
        # plateau a sweep can drift the objective up, so keep the pre-sweep
        # state and stop there instead of recording a worse one
        saved = (u_star.copy(), sigma.copy(), v_star.copy(), u_hat.copy(), v_hat.copy())
        # item-factor solve: M* = sparse fit residual + U^ (V^ - V~)^T
        v_tilde = centroid_matrix(v_hat, item_assign)
        resid = sparse_residual()
        rhs = (resid.T @ u_star).T + (u_star.T @ u_hat) @ (v_hat - v_tilde).T
        v_hat = (_shrink(sigma, lam)[:, None] * rhs).T + v_tilde
        q, s, w = thin_svd(v_hat * sigma)
        v_star, sigma = q, np.sqrt(s)
        v_hat = v_star * sigma
        u_star = u_star @ w  # keeps U^ V^^T unchanged by the re-calibration
        u_hat = u_star * sigma

        # user-factor solve, symmetric form
        u_tilde = centroid_matrix(u_hat, user_assign)
        resid = sparse_residual()
        lhs = resid @ v_star + (u_hat - u_tilde) @ (v_hat.T @ v_star)
        u_hat = lhs * _shrink(sigma, lam) + u_tilde
        q, s, w = thin_svd(u_hat * sigma)
        u_star, sigma = q, np.sqrt(s)
        u_hat = u_star * sigma
        v_star = v_star @ w
        v_hat = v_star * sigma

        obj, fit_term = current_objective()
        if obj > prev_obj:
            u_star, sigma, v_star, u_hat, v_hat = saved
            break
        objective_trace.append(obj)
        rmse = float(np.sqrt(fit_term / len(values)))
        rmse_trace.append(rmse)
        if prev_rmse is not None and abs(prev_rmse - rmse) <= tol * max(prev_rmse, 1e-12):
            break
        prev_rmse = rmse
        prev_obj = obj

    return LatentFactors(
        u=u_hat,
        v=v_hat,
        sigma=sigma,
        u_star=u_star,
        v_star=v_star,
        lam=lam,
        rank=rank,
        user_assign=None if user_assign is None else np.asarray(user_assign),
        item_assign=None if item_assign is None else np.asarray(item_assign),
        objective_trace=objective_trace,
        rmse_trace=rmse_trace,
    )

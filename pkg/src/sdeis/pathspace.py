"""The discrete path cost F, its derivatives, and the path prior density.

A path is an array of shape ``(..., K, D)`` holding the K free states
x_1..x_K; the start state (shape ``(..., D)``) is fixed and never a
variable. Every function broadcasts over the leading batch axes.

    F(x) = dt / (2 sigma^2) * sum_n |(x_{n+1} - x_n) / dt - f~(x_n)|^2 + g(x_K)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteCost
from .model import SdeModel, effective_drift, effective_drift_derivatives


@dataclass
class BlockTridiag:
    """Symmetric block-tridiagonal matrix.

    ``diag`` has shape ``(..., K, D, D)``; ``offdiag[..., k]`` is the
    sub-diagonal block at block-row k+1, block-column k, shape
    ``(..., K-1, D, D)``.
    """

    diag: np.ndarray
    offdiag: np.ndarray

    @property
    def n_blocks(self) -> int:
        return self.diag.shape[-3]

    @property
    def block_size(self) -> int:
        return self.diag.shape[-1]

    def to_dense(self) -> np.ndarray:
        K, D = self.n_blocks, self.block_size
        batch = self.diag.shape[:-3]
        out = np.zeros(batch + (K * D, K * D))
        for k in range(K):
            out[..., k * D:(k + 1) * D, k * D:(k + 1) * D] = self.diag[..., k, :, :]
        for k in range(K - 1):
            blk = self.offdiag[..., k, :, :]
            out[..., (k + 1) * D:(k + 2) * D, k * D:(k + 1) * D] = blk
            out[..., k * D:(k + 1) * D, (k + 1) * D:(k + 2) * D] = np.swapaxes(blk, -1, -2)
        return out

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """Multiply by a path-shaped vector ``(..., K, D)``."""
        out = np.einsum("...kij,...kj->...ki", self.diag, v)
        if self.n_blocks > 1:
            out[..., 1:, :] += np.einsum("...kij,...kj->...ki", self.offdiag, v[..., :-1, :])
            out[..., :-1, :] += np.einsum("...kji,...kj->...ki", self.offdiag, v[..., 1:, :])
        return out

    def add_identity(self, lam) -> "BlockTridiag":
        lam = np.asarray(lam, dtype=float)
        eye = np.eye(self.block_size)
        shift = lam.reshape(lam.shape + (1, 1, 1)) * eye
        return BlockTridiag(self.diag + shift, self.offdiag)

    def take(self, index) -> "BlockTridiag":
        return BlockTridiag(self.diag[index], self.offdiag[index])


def _previous_states(start, path):
    """States x_0..x_{K-1} feeding each transition."""
    start = np.broadcast_to(start, path.shape[:-2] + path.shape[-1:])
    return np.concatenate([start[..., None, :], path[..., :-1, :]], axis=-2)


def residuals(model: SdeModel, dt: float, start, path):
    """r_n = (x_{n+1} - x_n) / dt - f~(x_n) for n = 0..K-1."""
    prev = _previous_states(np.asarray(start, float), np.asarray(path, float))
    return (path - prev) / dt - effective_drift(model, prev, dt)


def _finite(value, what):
    if not np.all(np.isfinite(value)):
        raise NonFiniteCost(f"non-finite {what}")
    return value


def path_cost(model: SdeModel, dt: float, start, path, *, check=True):
    path = np.asarray(path, dtype=float)
    if path.ndim < 2 or path.shape[-2] < 1:
        raise ValueError("path must have shape (..., K, D) with K >= 1")
    r = residuals(model, dt, start, path)
    cost = 0.5 * dt / model.sigma**2 * np.sum(r * r, axis=(-2, -1)) + model.loglik(path[..., -1, :])
    return _finite(cost, "path cost") if check else cost


def _transition_terms(model: SdeModel, dt: float, start, path, order: int):
    """Residuals r_0..r_{K-1} plus derivatives of f~ at the free states x_1..x_{K-1}."""
    start = np.broadcast_to(np.asarray(start, float), path.shape[:-2] + path.shape[-1:])
    derivs = effective_drift_derivatives(model, path[..., :-1, :], dt, order=order)
    f_start = effective_drift(model, start, dt)
    ftilde = np.concatenate([f_start[..., None, :], derivs[0]], axis=-2)
    prev = _previous_states(start, path)
    r = (path - prev) / dt - ftilde
    return (r,) + tuple(derivs[1:])


def path_cost_grad(model: SdeModel, dt: float, start, path):
    path = np.asarray(path, dtype=float)
    r, A = _transition_terms(model, dt, start, path, order=1)
    s2 = model.sigma**2
    grad = r / s2
    if path.shape[-2] > 1:
        # transitions out of x_1..x_{K-1}: -(I + dt A_k)^T r_k / sigma^2
        rk = r[..., 1:, :]
        grad[..., :-1, :] -= (rk + dt * (np.swapaxes(A, -1, -2) @ rk[..., None])[..., 0]) / s2
    grad[..., -1, :] += model.loglik_grad(path[..., -1, :])
    return _finite(grad, "gradient")


def hessian_factors(model: SdeModel, dt: float, start, path):
    """Pieces of the Hessian scaled by c = sigma^2 dt: ``(M, cR, cG)``.

    With M_k = I + dt A(x_k) and cR_k = -dt^2 sum_i r_{k,i} d^2 f~_i(x_k),
    the diagonal blocks are (I + M_k^T M_k)/c + R_k for k < K, the last one
    is I/c + G with G the likelihood Hessian, and H_{k+1,k} = -M_k/c.
    """
    path = np.asarray(path, dtype=float)
    K, D = path.shape[-2:]
    s2 = model.sigma**2
    M = np.empty(path.shape[:-2] + (K - 1, D, D))
    cR = np.empty_like(M)
    if K > 1:
        r, A, Hf = _transition_terms(model, dt, start, path, order=2)
        M[...] = np.eye(D) + dt * A
        cR[...] = -dt * dt * np.einsum("...i,...ijk->...jk", r[..., 1:, :], Hf)
    cG = s2 * dt * np.asarray(model.loglik_hess(path[..., -1, :]), dtype=float)
    return M, cR, np.broadcast_to(cG, path.shape[:-2] + (D, D))


def path_cost_hessian(model: SdeModel, dt: float, start, path) -> BlockTridiag:
    path = np.asarray(path, dtype=float)
    K, D = path.shape[-2:]
    c = model.sigma**2 * dt
    M, cR, cG = hessian_factors(model, dt, start, path)
    diag = np.empty(path.shape[:-2] + (K, D, D))
    diag[...] = np.eye(D) / c
    diag[..., :-1, :, :] += (np.swapaxes(M, -1, -2) @ M + cR) / c
    diag[..., -1, :, :] += cG / c
    offdiag = -M / c
    # exact symmetry of each diagonal block
    diag = 0.5 * (diag + np.swapaxes(diag, -1, -2))
    _finite(diag, "Hessian")
    _finite(offdiag, "Hessian")
    return BlockTridiag(diag, offdiag)


def log_prior_density(model: SdeModel, dt: float, epsilon: float, start, path):
    """log rho(x_{1:K} | x_0) of the discretized SDE, normalization included."""
    path = np.asarray(path, dtype=float)
    K, D = path.shape[-2:]
    r = residuals(model, dt, start, path)
    var = dt * epsilon * model.sigma**2
    quad = dt * dt * np.sum(r * r, axis=(-2, -1)) / (2.0 * var)
    out = -0.5 * K * D * np.log(2.0 * np.pi * var) - quad
    return _finite(out, "log prior density")

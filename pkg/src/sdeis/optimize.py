"""Newton minimization of the path cost with block-tridiagonal factorizations."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .errors import InvalidParam, MaxItersExceeded, NonFiniteCost, NotPositiveDefinite
from .model import SdeModel, deterministic_trajectory, effective_drift_jacobian
from .pathspace import (BlockTridiag, hessian_factors, path_cost, path_cost_grad,
                        path_cost_hessian)

_EPS = np.finfo(float).eps
_STALL = 64 * _EPS
_MAX_LEVENBERG_TRIES = 40


@dataclass(frozen=True)
class NewtonSettings:
    grad_tol: float = 1e-12
    max_iters: int = 100
    levenberg_init: float = 1e-8
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 40

    def __post_init__(self):
        for key in ("grad_tol", "max_iters", "levenberg_init", "armijo_c",
                    "backtrack_factor", "max_backtracks"):
            if not getattr(self, key) > 0:
                raise InvalidParam(key, "must be positive")
        if not self.backtrack_factor < 1:
            raise InvalidParam("backtrack_factor", "must lie in (0, 1)")


@dataclass
class BlockCholesky:
    """Factor L of H = L L^T, lower block-bidiagonal, batched like BlockTridiag."""

    diag: np.ndarray
    offdiag: np.ndarray

    def _batched(self):
        single = self.diag.ndim == 3
        if single:
            return self.diag[None], self.offdiag[None], single
        return self.diag, self.offdiag, single

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve H x = rhs for a path-shaped rhs ``(..., K, D)``."""
        Ld, Lo, single = self._batched()
        b = np.ascontiguousarray(rhs, dtype=float)
        b = b[None] if single else b
        y = _kernels.forward_solve(Ld, Lo, b[..., None])
        x = _kernels.backward_solve(Ld, Lo, y)[..., 0]
        return x[0] if single else x

    def solve_lt(self, rhs: np.ndarray) -> np.ndarray:
        """Solve L^T x = rhs; maps standard normals to N(0, H^{-1})."""
        Ld, Lo, single = self._batched()
        b = np.ascontiguousarray(rhs, dtype=float)
        b = b[None] if single else b
        x = _kernels.backward_solve(Ld, Lo, b[..., None])[..., 0]
        return x[0] if single else x

    def logdet(self) -> np.ndarray:
        d = np.diagonal(self.diag, axis1=-2, axis2=-1)
        return 2.0 * np.sum(np.log(d), axis=(-2, -1))


def _factor_batch(diag, off):
    diag = np.ascontiguousarray(diag, dtype=float)
    off = np.ascontiguousarray(off, dtype=float)
    if off.shape[1] == 0:
        off = np.zeros((diag.shape[0], 0) + diag.shape[2:])
    Ld, Lo, status = _kernels.block_cholesky(diag, off)
    return BlockCholesky(Ld, Lo), status


def factorize(h: BlockTridiag) -> BlockCholesky:
    """Block Cholesky of a single (unbatched) block-tridiagonal matrix."""
    if h.diag.ndim != 3:
        raise ValueError("factorize expects an unbatched BlockTridiag; use a batch helper")
    chol, status = _factor_batch(h.diag[None], h.offdiag[None])
    if status[0] >= 0:
        raise NotPositiveDefinite(int(status[0]))
    return BlockCholesky(chol.diag[0], chol.offdiag[0])


def marginal_covariance(model: SdeModel, dt: float, start, path) -> np.ndarray:
    """(H^{-1})_{1,1} / dt at ``path``, the covariance scale of the next state.

    Batched over leading axes of ``path``. Built from the Hessian's factors
    rather than its assembled blocks, which keeps it accurate on paths whose
    linearized flow expands strongly.
    """
    path = np.asarray(path, dtype=float)
    single = path.ndim == 2
    p = path[None] if single else path
    D = p.shape[-1]
    M, cR, cG = hessian_factors(model, dt, start, p)
    e = _kernels.excess_first_block(np.ascontiguousarray(M), np.ascontiguousarray(cR),
                                    np.ascontiguousarray(cG))
    out = model.sigma**2 * np.linalg.inv(np.eye(D) + e)
    out = 0.5 * (out + np.swapaxes(out, -1, -2))
    return out[0] if single else out


@dataclass
class OptimalPathResult:
    phi: np.ndarray
    cost: float
    hessian: BlockTridiag
    sigma_first: np.ndarray
    grad_norm: float
    iterations: int
    start: np.ndarray
    chol: BlockCholesky = field(repr=False)
    history: list = field(default_factory=list, repr=False)


@dataclass
class BatchOptimum:
    """Per-entry outcome of a batched minimization; ``ok`` flags convergence."""

    phi: np.ndarray
    cost: np.ndarray
    grad_norm: np.ndarray
    iterations: np.ndarray
    ok: np.ndarray
    hessian: Optional[BlockTridiag] = None
    chol: Optional[BlockCholesky] = None


def _levenberg_factor(H: BlockTridiag, lam: np.ndarray):
    """Factor H + lam I, raising lam x10 where that fails. Returns (chol, lam, ok)."""
    lam = lam.copy()
    Ld = np.zeros_like(H.diag)
    Lo = np.zeros_like(H.offdiag)
    ok = np.zeros(lam.shape, dtype=bool)
    todo = np.arange(lam.size)
    for _ in range(_MAX_LEVENBERG_TRIES):
        sub = H.take(todo).add_identity(lam[todo])
        chol, status = _factor_batch(sub.diag, sub.offdiag)
        good = status < 0
        Ld[todo[good]] = chol.diag[good]
        Lo[todo[good]] = chol.offdiag[good]
        ok[todo[good]] = True
        todo = todo[~good]
        if todo.size == 0:
            break
        lam[todo] *= 10.0
    return BlockCholesky(Ld, Lo), lam, ok


def minimize_batch(model: SdeModel, dt: float, starts, inits, settings: NewtonSettings,
                   history: Optional[list] = None) -> BatchOptimum:
    """Damped Newton on a batch of independent path problems.

    ``starts`` is (B, D) and ``inits`` (B, K, D). Every entry carries its
    own damping, line search and stopping decision, so an entry's iterates
    are identical to those of a batch of one.
    """
    starts = np.asarray(starts, dtype=float)
    x = np.array(inits, dtype=float)
    B = x.shape[0]
    F = path_cost(model, dt, starts, x)
    G = path_cost_grad(model, dt, starts, x)
    gnorm = np.max(np.abs(G), axis=(-2, -1))
    lam = np.full(B, settings.levenberg_init)
    iters = np.zeros(B, dtype=np.int64)
    done = gnorm <= settings.grad_tol
    failed = np.zeros(B, dtype=bool)
    if history is not None:
        history.append(F.copy())

    while True:
        active = np.flatnonzero(~done & ~failed)
        if active.size == 0:
            break
        over = iters[active] >= settings.max_iters
        failed[active[over]] = True
        active = active[~over]
        if active.size == 0:
            break
        xa, sa = x[active], starts[active]
        H = path_cost_hessian(model, dt, sa, xa)
        chol, lam_a, fac_ok = _levenberg_factor(H, lam[active])
        lam[active] = lam_a
        failed[active[~fac_ok]] = True
        iters[active] += 1
        keep = fac_ok
        active, xa, sa = active[keep], xa[keep], sa[keep]
        if active.size == 0:
            continue
        chol = BlockCholesky(chol.diag[keep], chol.offdiag[keep])
        Ga, Fa = G[active], F[active]
        delta = -chol.solve(Ga)
        # a Newton step below the rounding level of x cannot improve it further
        scale = np.maximum(np.max(np.abs(xa), axis=(-2, -1)), 1.0)
        stalled = (np.max(np.abs(delta), axis=(-2, -1)) <= _STALL * scale) & (lam[active] <= 1e-6)
        if stalled.any():
            done[active[stalled]] = True
            live = ~stalled
            active, xa, sa, delta = active[live], xa[live], sa[live], delta[live]
            Ga, Fa = Ga[live], Fa[live]
            if active.size == 0:
                continue
        slope = np.sum(Ga * delta, axis=(-2, -1))
        # rounding slack: near the minimizer the predicted decrease is below the
        # rounding error of F, which is a small residue of O(1)-O(100) terms
        slack = 1e3 * _EPS * np.maximum(np.abs(Fa), 1.0)
        t = np.ones(active.size)
        accepted = np.zeros(active.size, dtype=bool)
        F_new = Fa.copy()
        for _ in range(settings.max_backtracks):
            pend = np.flatnonzero(~accepted)
            if pend.size == 0:
                break
            trial = xa[pend] + t[pend, None, None] * delta[pend]
            with np.errstate(all="ignore"):
                try:
                    Ft = path_cost(model, dt, sa[pend], trial, check=False)
                except (NonFiniteCost, FloatingPointError):
                    Ft = np.full(pend.size, np.inf)
            good = np.isfinite(Ft) & (
                Ft - Fa[pend] <= settings.armijo_c * t[pend] * slope[pend] + slack[pend]
            )
            accepted[pend[good]] = True
            F_new[pend[good]] = Ft[good]
            t[pend[~good]] *= settings.backtrack_factor
        moved = active[accepted]
        lam[moved] *= 0.1
        lam[active[~accepted]] *= 10.0
        if moved.size:
            x[moved] = xa[accepted] + t[accepted, None, None] * delta[accepted]
            F[moved] = F_new[accepted]
            G[moved] = path_cost_grad(model, dt, starts[moved], x[moved])
            gnorm[moved] = np.max(np.abs(G[moved]), axis=(-2, -1))
            done[moved] = gnorm[moved] <= settings.grad_tol
        if history is not None:
            history.append(F.copy())

    ok = done & ~failed
    return BatchOptimum(x, F, gnorm, iters, ok)


def finalize_batch(model: SdeModel, dt: float, starts, opt: BatchOptimum) -> BatchOptimum:
    """Attach the undamped Hessian and its factor at the converged entries.

    Entries whose Hessian is not positive definite are marked not ok.
    """
    H = path_cost_hessian(model, dt, starts, opt.phi)
    chol, status = _factor_batch(H.diag, H.offdiag)
    opt.ok = opt.ok & (status < 0)
    opt.hessian = H
    opt.chol = chol
    return opt


def minimize_path(model: SdeModel, dt: float, start, init=None,
                  settings: Optional[NewtonSettings] = None) -> OptimalPathResult:
    """Minimize the path cost over x_1..x_K from a fixed start.

    The default initial guess is the deterministic trajectory of length
    ``len(init)``; pass ``init`` as an integer K to request it explicitly.
    """
    settings = settings or NewtonSettings()
    start = np.atleast_1d(np.asarray(start, dtype=float))
    if init is None or np.isscalar(init):
        raise ValueError("init must be a path array, or use minimize_path_from_rest")
    init = np.asarray(init, dtype=float)
    if not np.all(np.isfinite(init)):
        raise ValueError("init must be finite")
    hist: list = []
    opt = minimize_batch(model, dt, start[None], init[None], settings, history=hist)
    if not opt.ok[0]:
        raise MaxItersExceeded(opt.phi[0], float(opt.grad_norm[0]), int(opt.iterations[0]))
    opt = finalize_batch(model, dt, start[None], opt)
    if not opt.ok[0]:
        raise NotPositiveDefinite(-1)
    chol = BlockCholesky(opt.chol.diag[0], opt.chol.offdiag[0])
    return OptimalPathResult(
        phi=opt.phi[0],
        cost=float(opt.cost[0]),
        hessian=opt.hessian.take(0),
        sigma_first=marginal_covariance(model, dt, start, opt.phi[0]),
        grad_norm=float(opt.grad_norm[0]),
        iterations=int(opt.iterations[0]),
        start=start,
        chol=chol,
        history=[float(h[0]) for h in hist],
    )


def minimize_path_from_rest(model: SdeModel, dt: float, start, n_steps: int,
                            settings: Optional[NewtonSettings] = None) -> OptimalPathResult:
    """Minimize over ``n_steps`` free states starting from the noiseless trajectory."""
    init = deterministic_trajectory(model, np.atleast_1d(np.asarray(start, float)), dt, n_steps)
    return minimize_path(model, dt, start, init, settings)


def warm_start_batch(model: SdeModel, dt: float, prev_phi, new_start):
    """Drop the head of each previous optimum and shift the tail along the linearized flow.

    ``prev_phi`` is (B, K, D) with K >= 2, ``new_start`` is (B, D); returns (B, K-1, D).
    """
    prev_phi = np.asarray(prev_phi, dtype=float)
    delta = np.asarray(new_start, dtype=float) - prev_phi[:, 0, :]
    tail = prev_phi[:, 1:, :].copy()
    M = effective_drift_jacobian(model, prev_phi[:, :-1, :], dt)
    M = M * dt + np.eye(prev_phi.shape[-1])
    for k in range(tail.shape[1]):
        delta = np.einsum("bij,bj->bi", M[:, k], delta)
        tail[:, k, :] += delta
    return tail


def warm_start(prev: OptimalPathResult, new_start, model: SdeModel, dt: float):
    """Initial guess for the optimization started from ``new_start`` one step later."""
    if prev.phi.shape[0] < 2:
        raise ValueError("previous optimum must have at least two states")
    new_start = np.atleast_1d(np.asarray(new_start, dtype=float))
    if model.drift_jacobian is None:
        return prev.phi[1:].copy()
    return warm_start_batch(model, dt, prev.phi[None], new_start[None])[0]

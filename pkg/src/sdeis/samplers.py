"""Importance samplers for conditioned SDE paths.

Each sampler maps a block of standard-normal noise ``xi`` of shape
(N, D) to a path and an unnormalized log weight

    log w = log rho(X | x0) - g(X_N) / epsilon - log q(X).

The batched ``*_paths`` functions work on many noise draws at once; the
single-sample functions and :func:`run_ensemble` are thin wrappers.
Samples drawn for index i of a run with seed s use their own generator
stream, so an ensemble is reproducible independently of batching.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .errors import EnsembleFailed, SampleFailed
from .model import PathGrid, SdeModel, deterministic_trajectory, effective_drift
from .optimize import (
    BlockCholesky,
    NewtonSettings,
    OptimalPathResult,
    finalize_batch,
    marginal_covariance,
    minimize_batch,
    minimize_path_from_rest,
    warm_start_batch,
)
from .pathspace import log_prior_density

log = logging.getLogger(__name__)

MAX_FAILED_FRACTION = 0.01
# DLM steps between restarts of the path optimization from the noiseless trajectory
RESTART_EVERY = 1


class SamplerKind(enum.Enum):
    DIRECT = "direct"
    LM = "lm"
    SLM = "slm"
    DLM = "dlm"
    SDLM = "sdlm"

    @classmethod
    def parse(cls, value) -> "SamplerKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown sampler {value!r}; choose from "
                             + ", ".join(k.value for k in cls)) from None


class Branch(enum.IntEnum):
    NA = 0
    PLUS = 1
    MINUS = -1


@dataclass
class WeightedPath:
    path: np.ndarray
    log_weight: float
    noise: np.ndarray
    branch: Branch = Branch.NA


@dataclass
class Ensemble:
    """Weighted paths from one run, stored as arrays in sample-index order.

    Failed samples are excluded; ``index`` keeps the original sample
    indices of the survivors.
    """

    kind: SamplerKind
    start: np.ndarray
    paths: np.ndarray
    log_weights: np.ndarray
    noise: np.ndarray
    branch: np.ndarray
    index: np.ndarray
    failed: int = 0
    seed: Optional[int] = None

    def __len__(self) -> int:
        return len(self.log_weights)

    def __getitem__(self, i) -> WeightedPath:
        return WeightedPath(self.paths[i], float(self.log_weights[i]), self.noise[i],
                            Branch(int(self.branch[i])))

    def __iter__(self) -> Iterator[WeightedPath]:
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_samples(cls, samples, start, kind=SamplerKind.DIRECT) -> "Ensemble":
        samples = list(samples)
        return cls(
            kind=kind,
            start=np.atleast_1d(np.asarray(start, float)),
            paths=np.array([s.path for s in samples]),
            log_weights=np.array([s.log_weight for s in samples], dtype=float),
            noise=np.array([s.noise for s in samples]),
            branch=np.array([int(s.branch) for s in samples], dtype=np.int8),
            index=np.arange(len(samples)),
        )


def sample_stream(seed: int, index: int) -> np.random.Generator:
    """Counter-based generator for sample ``index`` of a run seeded with ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def log_target(model: SdeModel, grid: PathGrid, paths) -> np.ndarray:
    """Unnormalized log p(X | x0) = log rho(X | x0) - g(X_N) / epsilon."""
    return (log_prior_density(model, grid.dt, grid.epsilon, grid.x0, paths)
            - model.loglik(paths[..., -1, :]) / grid.epsilon)


# ---------------------------------------------------------------- batched maps


def direct_paths(model: SdeModel, grid: PathGrid, xi):
    """Forward simulation; returns (paths, log_weights) with log w = -g(X_N)/eps."""
    xi = np.asarray(xi, dtype=float)
    scale = np.sqrt(grid.dt * grid.epsilon) * model.sigma
    x = np.broadcast_to(grid.x0, xi.shape[:-2] + grid.x0.shape).astype(float)
    paths = np.empty_like(xi)
    for n in range(grid.n_steps):
        x = x + grid.dt * effective_drift(model, x, grid.dt) + scale * xi[..., n, :]
        paths[..., n, :] = x
    return paths, -model.loglik(paths[..., -1, :]) / grid.epsilon


def lm_paths(model: SdeModel, grid: PathGrid, opt: OptimalPathResult, xi):
    """Linear map X = phi + sqrt(eps) L^{-T} xi; returns (paths, log_weights)."""
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 2:
        xi = xi[None]
    B = xi.shape[0]
    Ld = np.broadcast_to(opt.chol.diag, (B,) + opt.chol.diag.shape)
    Lo = np.broadcast_to(opt.chol.offdiag, (B,) + opt.chol.offdiag.shape)
    v = BlockCholesky(np.ascontiguousarray(Ld), np.ascontiguousarray(Lo)).solve_lt(xi)
    paths = opt.phi + np.sqrt(grid.epsilon) * v
    n = xi.shape[-2] * xi.shape[-1]
    # log N(X; phi, eps H^{-1}); the standardized residual L^T (X - phi)/sqrt(eps) is xi
    log_q = (-0.5 * n * np.log(2.0 * np.pi * grid.epsilon) + 0.5 * opt.chol.logdet()
             - 0.5 * np.sum(xi * xi, axis=(-2, -1)))
    return paths, log_target(model, grid, paths) - log_q


def _reoptimize(model: SdeModel, dt: float, starts, prev_phi, settings: NewtonSettings,
                restart: bool = True):
    """Optimal remaining paths from ``starts``, one step after ``prev_phi``.

    Newton runs from the warm start carried over from the previous optimum
    and, when ``restart`` is set, also from the noiseless trajectory of the
    new state; the lower-cost converged optimum is kept, ties going to
    the restart. The warm start
    alone stays in the basin of the previous optimum after the state has
    moved into another one. Entries whose warm start fails are retried from
    the noiseless trajectory. Returns ``(phi, sigma, ok)``.
    """
    B, K = starts.shape[0], prev_phi.shape[1] - 1
    warm = warm_start_batch(model, dt, prev_phi, starts)
    if restart:
        inits = np.concatenate([warm, deterministic_trajectory(model, starts, dt, K)])
        both = np.concatenate([starts, starts])
        opt = finalize_batch(model, dt, both, minimize_batch(model, dt, both, inits, settings))
        cost = np.where(opt.ok, opt.cost, np.inf)
        # costs equal to rounding mean the same optimum; the restart then
        # wins because it carries no accumulated warm-start error
        slack = 1e3 * np.finfo(float).eps * np.maximum(np.abs(cost[:B]), 1.0)
        pick = np.where(cost[B:] <= cost[:B] + slack, np.arange(B) + B, np.arange(B))
        phi, ok = opt.phi[pick], opt.ok[pick]
    else:
        opt = finalize_batch(model, dt, starts, minimize_batch(model, dt, starts, warm, settings))
        phi, ok = opt.phi, opt.ok.copy()
        retry = np.flatnonzero(~ok)
        if retry.size:
            s = starts[retry]
            again = finalize_batch(model, dt, s, minimize_batch(
                model, dt, s, deterministic_trajectory(model, s, dt, K), settings))
            phi[retry], ok[retry] = again.phi, again.ok
    sigma = np.full((B,) + phi.shape[-1:] * 2, np.nan)
    if ok.any():
        sigma[ok] = marginal_covariance(model, dt, starts[ok], phi[ok])
    return phi, sigma, ok


def dlm_paths(model: SdeModel, grid: PathGrid, xi, settings: Optional[NewtonSettings] = None,
              first: Optional[OptimalPathResult] = None, restart_every: int = RESTART_EVERY):
    """Dynamic linear map for a batch of noise draws.

    At every step the remaining path is re-optimized from the current
    state and the next state is drawn from N(phi_{n+1}, dt * eps * Sigma).
    The optimization is warm-started from the previous optimum; every
    ``restart_every`` steps it also restarts from the noiseless trajectory
    (see :func:`_reoptimize`). Any fixed schedule gives exact weights; a
    sparser one is cheaper but may stay longer in a worse basin. Returns ``(paths, log_weights, ok)``; entries whose optimization
    failed have ``ok = False`` and NaN weights.
    """
    settings = settings or NewtonSettings()
    if restart_every < 1:
        raise ValueError("restart_every must be >= 1")
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 2:
        xi = xi[None]
    B, N, D = xi.shape
    dt, eps = grid.dt, grid.epsilon
    if first is None:
        first = minimize_path_from_rest(model, dt, grid.x0, N, settings)
    paths = np.zeros((B, N, D))
    log_q = np.zeros(B)
    ok = np.ones(B, dtype=bool)
    x = np.broadcast_to(grid.x0, (B, D)).copy()
    phi = np.broadcast_to(first.phi, (B, N, D)).copy()
    chol_sigma = np.broadcast_to(np.linalg.cholesky(first.sigma_first), (B, D, D)).copy()
    scale = np.sqrt(dt * eps)
    for n in range(N):
        if n > 0:
            live = np.flatnonzero(ok)
            new_phi, sigma, good = _reoptimize(model, dt, x[live], phi[live], settings,
                                               restart=n % restart_every == 0)
            ok[live[~good]] = False
            phi = np.zeros((B, N - n, D))
            phi[live[good]] = new_phi[good]
            chol_sigma[live[good]] = np.linalg.cholesky(sigma[good])
        live = np.flatnonzero(ok)
        L = chol_sigma[live]
        z = xi[live, n, :]
        x[live] = phi[live, 0, :] + scale * (L @ z[..., None])[..., 0]
        log_q[live] += (-0.5 * D * np.log(2.0 * np.pi * dt * eps)
                        - np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
                        - 0.5 * np.sum(z * z, axis=-1))
        paths[live, n, :] = x[live]
    logw = np.full(B, np.nan)
    good = np.flatnonzero(ok)
    if good.size:
        logw[good] = log_target(model, grid, paths[good]) - log_q[good]
    return paths, logw, ok


def select_branch(log_w_plus, log_w_minus, u):
    """Pick the plus branch with probability W+/(W+ + W-).

    Returns ``(take_plus, log((W+ + W-)/2))``.
    """
    log_w_plus = np.asarray(log_w_plus, dtype=float)
    log_w_minus = np.asarray(log_w_minus, dtype=float)
    p_plus = 1.0 / (1.0 + np.exp(log_w_minus - log_w_plus))
    return np.asarray(u) < p_plus, np.logaddexp(log_w_plus, log_w_minus) - np.log(2.0)


# ---------------------------------------------------------------- single samples


def _draw(grid: PathGrid, dim: int, rng: np.random.Generator):
    return rng.standard_normal((grid.n_steps, dim))


def sample_direct(model: SdeModel, grid: PathGrid, rng: np.random.Generator) -> WeightedPath:
    xi = _draw(grid, model.dim, rng)
    paths, logw = direct_paths(model, grid, xi[None])
    return WeightedPath(paths[0], float(logw[0]), xi)


def sample_lm(model: SdeModel, grid: PathGrid, opt: OptimalPathResult,
              rng: np.random.Generator) -> WeightedPath:
    xi = _draw(grid, model.dim, rng)
    paths, logw = lm_paths(model, grid, opt, xi[None])
    return WeightedPath(paths[0], float(logw[0]), xi)


def sample_dlm(model: SdeModel, grid: PathGrid, settings: Optional[NewtonSettings],
               rng: np.random.Generator) -> WeightedPath:
    xi = _draw(grid, model.dim, rng)
    paths, logw, ok = dlm_paths(model, grid, xi[None], settings)
    if not ok[0]:
        raise SampleFailed("path optimization failed during DLM sampling")
    return WeightedPath(paths[0], float(logw[0]), xi)


def _base_kind(base) -> SamplerKind:
    kind = SamplerKind.parse(base)
    kind = {SamplerKind.SLM: SamplerKind.LM, SamplerKind.SDLM: SamplerKind.DLM}.get(kind, kind)
    if kind not in (SamplerKind.LM, SamplerKind.DLM):
        raise ValueError("symmetrization needs an LM or DLM base sampler")
    return kind


def symmetrized_paths(base, model: SdeModel, grid: PathGrid, xi, u, *,
                      opt: Optional[OptimalPathResult] = None,
                      settings: Optional[NewtonSettings] = None,
                      restart_every: int = RESTART_EVERY):
    """Run the base map on xi and -xi and choose one branch per draw.

    Returns ``(paths, log_weights, branch, ok)``.
    """
    kind = _base_kind(base)
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 2:
        xi = xi[None]
    B = xi.shape[0]
    both = np.concatenate([xi, -xi], axis=0)
    if kind is SamplerKind.LM:
        if opt is None:
            opt = minimize_path_from_rest(model, grid.dt, grid.x0, grid.n_steps, settings)
        paths, logw = lm_paths(model, grid, opt, both)
        ok = np.ones(2 * B, dtype=bool)
    else:
        paths, logw, ok = dlm_paths(model, grid, both, settings, first=opt,
                                    restart_every=restart_every)
    ok = ok[:B] & ok[B:]
    take_plus, log_ws = select_branch(logw[:B], logw[B:], u)
    chosen = np.where(take_plus[:, None, None], paths[:B], paths[B:])
    branch = np.where(take_plus, Branch.PLUS, Branch.MINUS).astype(np.int8)
    return chosen, log_ws, branch, ok


def symmetrize(base, model: SdeModel, grid: PathGrid, rng: np.random.Generator, *,
               opt: Optional[OptimalPathResult] = None,
               settings: Optional[NewtonSettings] = None) -> WeightedPath:
    xi = _draw(grid, model.dim, rng)
    u = rng.random()
    paths, logw, branch, ok = symmetrized_paths(base, model, grid, xi[None], np.array([u]),
                                                opt=opt, settings=settings)
    if not ok[0]:
        raise SampleFailed("path optimization failed on one symmetrization branch")
    return WeightedPath(paths[0], float(logw[0]), xi, Branch(int(branch[0])))


# ---------------------------------------------------------------- ensembles


def draw_noise(seed: int, indices, n_steps: int, dim: int, uniforms: bool = False):
    """Noise blocks (and optionally one uniform each) for the given sample indices."""
    indices = np.asarray(indices)
    xi = np.empty((indices.size, n_steps, dim))
    u = np.empty(indices.size)
    for j, i in enumerate(indices):
        rng = sample_stream(seed, int(i))
        xi[j] = rng.standard_normal((n_steps, dim))
        if uniforms:
            u[j] = rng.random()
    return (xi, u) if uniforms else xi


def run_ensemble(kind, model: SdeModel, grid: PathGrid, m_samples: int, seed: int, *,
                 settings: Optional[NewtonSettings] = None, chunk_size: int = 2048,
                 indices=None, allow_failures: bool = False,
                 restart_every: int = RESTART_EVERY) -> Ensemble:
    """Draw ``m_samples`` weighted paths with the chosen sampler.

    Sample i consumes the stream ``sample_stream(seed, i)``: first its
    (N, D) noise block in step order, then, for symmetrized samplers, one
    uniform for the branch choice. Results do not depend on
    ``chunk_size``. More than 1% failed samples raises EnsembleFailed
    unless ``allow_failures`` is set.
    """
    kind = SamplerKind.parse(kind)
    if m_samples < 1:
        raise ValueError("m_samples must be >= 1")
    settings = settings or NewtonSettings()
    idx_all = np.arange(m_samples) if indices is None else np.asarray(indices)
    N, D = grid.n_steps, model.dim
    opt = None
    if kind is not SamplerKind.DIRECT:
        opt = minimize_path_from_rest(model, grid.dt, grid.x0, N, settings)

    paths = np.empty((idx_all.size, N, D))
    logw = np.empty(idx_all.size)
    branch = np.zeros(idx_all.size, dtype=np.int8)
    noise = np.empty((idx_all.size, N, D))
    ok = np.ones(idx_all.size, dtype=bool)
    symmetric = kind in (SamplerKind.SLM, SamplerKind.SDLM)
    for lo in range(0, idx_all.size, chunk_size):
        sl = slice(lo, lo + chunk_size)
        if symmetric:
            xi, u = draw_noise(seed, idx_all[sl], N, D, uniforms=True)
        else:
            xi = draw_noise(seed, idx_all[sl], N, D)
        noise[sl] = xi
        if kind is SamplerKind.DIRECT:
            paths[sl], logw[sl] = direct_paths(model, grid, xi)
        elif kind is SamplerKind.LM:
            paths[sl], logw[sl] = lm_paths(model, grid, opt, xi)
        elif kind is SamplerKind.DLM:
            paths[sl], logw[sl], ok[sl] = dlm_paths(model, grid, xi, settings, first=opt,
                                                     restart_every=restart_every)
        else:
            paths[sl], logw[sl], branch[sl], ok[sl] = symmetrized_paths(
                kind, model, grid, xi, u, opt=opt, settings=settings,
                restart_every=restart_every)
    ok &= np.isfinite(logw)
    failed = int(np.count_nonzero(~ok))
    ens = Ensemble(kind, grid.x0.copy(), paths[ok], logw[ok], noise[ok], branch[ok],
                   idx_all[ok], failed, seed)
    if failed:
        log.warning("%s: %d of %d samples failed", kind.value, failed, idx_all.size)
    if failed > MAX_FAILED_FRACTION * idx_all.size and not allow_failures:
        raise EnsembleFailed(ens, f"{failed} of {idx_all.size} {kind.value} samples failed")
    return ens

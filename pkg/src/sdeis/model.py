"""SDE models with an end-time observation, and the built-in benchmark problems.

All model callables are vectorized over leading axes: a state batch has
shape ``(..., D)``, a Jacobian batch ``(..., D, D)`` and a drift Hessian
``(..., D, D, D)`` with ``H[..., i, j, k] = d^2 f_i / dx_j dx_k``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import fsolve

from .errors import InvalidParam, NonFiniteModelOutput, UnknownModel
from ._kernels import rk4_derivatives

Array = np.ndarray

_FD_STEP = np.finfo(float).eps ** (1.0 / 3.0)


class Stepper(enum.Enum):
    EULER = "euler"
    RK4_DRIFT = "rk4"


@dataclass(frozen=True)
class SdeModel:
    """Drift, noise level and log-likelihood of one filtering problem.

    ``loglik`` is the nonnegative function g, so the observation enters the
    target as ``exp(-g(x_N) / epsilon)``.
    """

    dim: int
    sigma: float
    drift: Callable[[Array], Array]
    drift_jacobian: Callable[[Array], Array]
    loglik: Callable[[Array], Array]
    loglik_grad: Callable[[Array], Array]
    loglik_hess: Callable[[Array], Array]
    drift_hessian: Optional[Callable[[Array], Array]] = None
    stepper: Stepper = Stepper.EULER
    name: str = "custom"
    # linear drift rate when f(x) = rate * x, used by the closed-form checks
    linear_rate: Optional[float] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1:
            raise InvalidParam("dim", "must be >= 1")
        if not self.sigma > 0:
            raise InvalidParam("sigma", "must be positive")


@dataclass(frozen=True)
class PathGrid:
    n_steps: int
    dt: float
    x0: Array
    epsilon: float

    def __post_init__(self):
        if int(self.n_steps) < 1:
            raise InvalidParam("n_steps", "must be >= 1")
        if not self.dt > 0:
            raise InvalidParam("dt", "must be positive")
        if not self.epsilon > 0:
            raise InvalidParam("epsilon", "must be positive")
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    @classmethod
    def from_horizon(cls, horizon, dt, x0, epsilon):
        n = int(round(horizon / dt))
        if n < 1 or abs(n * dt - horizon) > 1e-12 * horizon:
            raise InvalidParam("dt", f"horizon {horizon} is not a multiple of dt={dt}")
        return cls(n, dt, x0, epsilon)

    def replace(self, **changes) -> "PathGrid":
        kw = dict(n_steps=self.n_steps, dt=self.dt, x0=self.x0, epsilon=self.epsilon)
        kw.update(changes)
        return PathGrid(**kw)


def _check_finite(value, what, x):
    if not np.all(np.isfinite(value)):
        bad = ~np.isfinite(value)
        while bad.ndim > x.ndim - 1 and bad.ndim > 0:
            bad = bad.any(axis=-1)
        state = x[bad][0] if x.ndim > 1 and bad.ndim > 0 else x
        raise NonFiniteModelOutput(what, np.asarray(state).tolist())
    return value


def _fd_jacobian_of(fun, x):
    """Central-difference derivative of ``fun`` along the last axis of x.

    Returns an array with one extra trailing axis indexing the perturbed
    coordinate.
    """
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.shape[-1]):
        h = _FD_STEP * np.maximum(1.0, np.abs(x[..., j]))
        e = np.zeros_like(x)
        e[..., j] = h
        diff = fun(x + e) - fun(x - e)
        cols.append(diff / (2.0 * h.reshape(h.shape + (1,) * (diff.ndim - h.ndim))))
    return np.stack(cols, axis=-1)


def drift_hessian(model: SdeModel, x: Array) -> Array:
    """Second derivatives of f, falling back to differences of the Jacobian."""
    if model.drift_hessian is not None:
        return model.drift_hessian(x)
    return _fd_jacobian_of(model.drift_jacobian, x)


def _rk4_stages(model, x, dt):
    f = model.drift
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return k1, k2, k3, k4


def effective_drift(model: SdeModel, x: Array, dt: float) -> Array:
    """The discrete drift f~(x, dt) so that one noiseless step is x + dt * f~."""
    if not dt > 0:
        raise InvalidParam("dt", "must be positive")
    x = np.asarray(x, dtype=float)
    if model.stepper is Stepper.EULER:
        out = model.drift(x)
    else:
        # (RK4(x) - x) / dt written as the stage average, avoiding the cancellation
        k1, k2, k3, k4 = _rk4_stages(model, x, dt)
        out = (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
    return _check_finite(out, "drift", x)


def effective_drift_derivatives(model: SdeModel, x: Array, dt: float, order: int = 2):
    """f~ together with its Jacobian and (for ``order=2``) second derivatives.

    For the RK4 stepper the derivatives follow the stages exactly by the
    chain rule; the drift Hessian itself falls back to differences of the
    drift Jacobian when the model does not provide one.
    """
    x = np.asarray(x, dtype=float)
    A = model.drift_jacobian
    if model.stepper is Stepper.EULER:
        out = [model.drift(x), A(x)]
        if order > 1:
            out.append(drift_hessian(model, x))
    else:
        D = model.dim
        batch = x.shape[:-1]
        ys = [x]
        ks = []
        for c in (0.5 * dt, 0.5 * dt, dt, None):
            ks.append(model.drift(ys[-1]))
            if c is not None:
                ys.append(x + c * ks[-1])
        flat = [y.reshape(-1, D) for y in ys]
        a = np.stack([A(y) for y in flat], axis=1)
        if order > 1:
            hf = np.stack([np.broadcast_to(drift_hessian(model, y), y.shape + (D, D))
                           for y in flat], axis=1)
        else:
            hf = np.zeros((0, 4, D, D, D))
        J, H = rk4_derivatives(a, hf, float(dt), order)
        out = [(ks[0] + 2.0 * ks[1] + 2.0 * ks[2] + ks[3]) / 6.0, J.reshape(batch + (D, D))]
        if order > 1:
            out.append(H.reshape(batch + (D, D, D)))
    names = ("drift", "drift Jacobian", "drift Hessian")
    for value, what in zip(out, names):
        _check_finite(value, what, x)
    return tuple(out)


def effective_drift_jacobian(model: SdeModel, x: Array, dt: float) -> Array:
    return effective_drift_derivatives(model, x, dt, order=1)[1]


def effective_drift_hessian(model: SdeModel, x: Array, dt: float) -> Array:
    return effective_drift_derivatives(model, x, dt, order=2)[2]


def step_map(model: SdeModel, x: Array, dt: float) -> Array:
    """Noiseless one-step map x -> x + dt * f~(x)."""
    return x + dt * effective_drift(model, x, dt)


def deterministic_trajectory(model: SdeModel, x0: Array, dt: float, n_steps: int) -> Array:
    x = np.asarray(x0, dtype=float)
    out = np.empty(x.shape[:-1] + (n_steps, x.shape[-1]))
    for n in range(n_steps):
        x = step_map(model, x, dt)
        out[..., n, :] = x
    return out


# ---------------------------------------------------------------- built-ins


def _zero_drift(x):
    return np.zeros_like(x)


def _zero_jac(x):
    x = np.asarray(x)
    return np.zeros(x.shape + (x.shape[-1],))


def _zero_hess(x):
    x = np.asarray(x)
    return np.zeros(x.shape + (x.shape[-1], x.shape[-1]))


def _quartic_loglik(c4, c3, c2, scale, shift):
    """1-D g(x) = scale * (c4 x^4 + c3 x^3 + c2 x^2) + shift, returned with derivatives."""

    def g(x):
        u = x[..., 0]
        return scale * (c4 * u**4 + c3 * u**3 + c2 * u**2) + shift

    def dg(x):
        u = x[..., 0]
        return (scale * (4 * c4 * u**3 + 3 * c3 * u**2 + 2 * c2 * u))[..., None]

    def d2g(x):
        u = x[..., 0]
        return (scale * (12 * c4 * u**2 + 6 * c3 * u + 2 * c2))[..., None, None]

    return g, dg, d2g


def quadratic_loglik(y, r=1.0):
    """g(x) = |x - y|^2 / (2 r); ``r = inf`` gives g = 0."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    inv_r = 0.0 if np.isinf(r) else 1.0 / r

    def g(x):
        return 0.5 * inv_r * np.sum((x - y) ** 2, axis=-1)

    def dg(x):
        return inv_r * (x - y)

    def d2g(x):
        x = np.asarray(x)
        return np.broadcast_to(inv_r * np.eye(y.size), x.shape + (y.size,)).copy()

    return g, dg, d2g


def linear_drift(rate, dim=1):
    """f(x) = rate * x."""

    def f(x):
        return rate * x

    def jac(x):
        x = np.asarray(x)
        return np.broadcast_to(rate * np.eye(dim), x.shape + (dim,)).copy()

    return f, jac, _zero_hess


def linear_gaussian_model(rate=0.0, sigma=1.0, obs_y=1.0, obs_r=1.0, dim=1, name="linear_gaussian"):
    """Linear drift with a quadratic (or, for ``obs_r=inf``, vanishing) log-likelihood."""
    f, jac, hess = linear_drift(rate, dim)
    g, dg, d2g = quadratic_loglik(np.broadcast_to(np.asarray(obs_y, float), (dim,)), obs_r)
    return SdeModel(
        dim=dim, sigma=sigma, drift=f, drift_jacobian=jac, drift_hessian=hess,
        loglik=g, loglik_grad=dg, loglik_hess=d2g, name=name, linear_rate=rate,
        params=dict(rate=rate, sigma=sigma, obs_y=obs_y, obs_r=obs_r),
    )


def gissinger_drift(x):
    x = np.asarray(x, dtype=float)
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    out = np.empty_like(x)
    out[..., 0] = 0.119 * x1 - x2 * x3
    out[..., 1] = -0.1 * x2 + x1 * x3
    out[..., 2] = 0.9 - x3 + x1 * x2
    return out


def gissinger_jacobian(x):
    x = np.asarray(x, dtype=float)
    J = np.empty(x.shape + (3,))
    J[..., 0, 0] = 0.119
    J[..., 0, 1] = -x[..., 2]
    J[..., 0, 2] = -x[..., 1]
    J[..., 1, 0] = x[..., 2]
    J[..., 1, 1] = -0.1
    J[..., 1, 2] = x[..., 0]
    J[..., 2, 0] = x[..., 1]
    J[..., 2, 1] = x[..., 0]
    J[..., 2, 2] = -1.0
    return J


_GISSINGER_HESS = np.zeros((3, 3, 3))
_GISSINGER_HESS[0, 1, 2] = _GISSINGER_HESS[0, 2, 1] = -1.0
_GISSINGER_HESS[1, 0, 2] = _GISSINGER_HESS[1, 2, 0] = 1.0
_GISSINGER_HESS[2, 0, 1] = _GISSINGER_HESS[2, 1, 0] = 1.0


def gissinger_hessian(x):
    x = np.asarray(x)
    return np.broadcast_to(_GISSINGER_HESS, x.shape[:-1] + (3, 3, 3))


def gissinger_fixed_points():
    """The three fixed points (0, 0, 0.9), p_plus, p_minus of the noiseless system."""
    def solve(guess):
        return fsolve(gissinger_drift, guess, fprime=gissinger_jacobian, xtol=1e-14)

    p_plus = solve(np.array([-0.96, 1.05, -0.109]))
    p_minus = solve(np.array([0.96, -1.05, -0.109]))
    return np.array([0.0, 0.0, 0.9]), p_plus, p_minus


_PARAM_KEYS = {
    "bm_unimodal": {"sigma", "dt", "n_steps", "epsilon", "x0"},
    "bm_bimodal": {"sigma", "dt", "n_steps", "epsilon", "x0"},
    "langevin_bimodal": {"alpha", "sigma", "dt", "n_steps", "epsilon", "x0"},
    "gissinger": {"case", "obs_y", "sigma", "dt", "n_steps", "epsilon", "x0"},
    "linear_gaussian": {"rate", "obs_y", "obs_r", "sigma", "dt", "n_steps", "epsilon", "x0"},
}

MODEL_NAMES = tuple(_PARAM_KEYS)


def _as_float(params, key, default):
    value = params.get(key, default)
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise InvalidParam(key, f"expected a number, got {value!r}") from None
    if not np.isfinite(value) and key != "obs_r":
        raise InvalidParam(key, "must be finite")
    return value


def _as_vector(params, key, default, dim):
    value = params.get(key, default)
    if isinstance(value, str):
        value = [v for v in value.replace(",", " ").split()]
    try:
        arr = np.atleast_1d(np.asarray(value, dtype=float))
    except (TypeError, ValueError):
        raise InvalidParam(key, f"expected {dim} numbers, got {value!r}") from None
    if arr.size == 1 and dim > 1:
        arr = np.full(dim, arr[0])
    if arr.shape != (dim,) or not np.all(np.isfinite(arr)):
        raise InvalidParam(key, f"expected {dim} finite numbers, got {value!r}")
    return arr


def builtin_model(name: str, params: Optional[dict] = None):
    """Return ``(model, grid)`` for one of the registered benchmark problems.

    Parameters
    ----------
    name : str
        One of ``bm_unimodal``, ``bm_bimodal``, ``langevin_bimodal``,
        ``gissinger`` or ``linear_gaussian``.
    params : dict, optional
        Overrides such as ``alpha``, ``obs_y``, ``dt``, ``n_steps``,
        ``epsilon``, ``x0``. Values may be strings (as read from a CLI).
    """
    params = dict(params or {})
    if name not in _PARAM_KEYS:
        raise UnknownModel(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")
    unknown = set(params) - _PARAM_KEYS[name]
    if unknown:
        raise InvalidParam(sorted(unknown)[0], f"not a parameter of {name}")

    sigma = _as_float(params, "sigma", 1.0)
    if sigma <= 0:
        raise InvalidParam("sigma", "must be positive")

    if name == "bm_unimodal":
        g = _quartic_loglik(1 / 24, 1 / 6, 1 / 2, 1.0, 0.0)
        model = SdeModel(1, sigma, _zero_drift, _zero_jac, *g, drift_hessian=_zero_hess,
                         name=name, linear_rate=0.0)
        defaults = dict(dt=0.01, n_steps=100, epsilon=0.01, x0=0.0)
    elif name == "bm_bimodal":
        # shifted by +25 so that min g = g(+-1) = 0
        g = _quartic_loglik(1 / 4, 0.0, -1 / 2, 100.0, 25.0)
        model = SdeModel(1, sigma, _zero_drift, _zero_jac, *g, drift_hessian=_zero_hess,
                         name=name, linear_rate=0.0)
        defaults = dict(dt=0.01, n_steps=100, epsilon=0.1, x0=0.01)
    elif name == "langevin_bimodal":
        alpha = _as_float(params, "alpha", 1.0)
        f, jac, hess = linear_drift(-alpha)
        g = _quartic_loglik(1 / 4, 0.0, -1 / 2, 10.0, 2.5)
        model = SdeModel(1, sigma, f, jac, *g, drift_hessian=hess, name=name,
                         linear_rate=-alpha, params=dict(alpha=alpha))
        defaults = dict(dt=0.01, n_steps=1000, epsilon=0.01, x0=0.1)
    elif name == "gissinger":
        _, p_plus, p_minus = gissinger_fixed_points()
        case = str(params.get("case", "b")).lower()
        if case not in ("a", "b"):
            raise InvalidParam("case", "must be 'a' or 'b'")
        y = _as_vector(params, "obs_y", p_minus if case == "a" else p_plus, 3)
        g = quadratic_loglik(y, 1.0)
        model = SdeModel(3, sigma, gissinger_drift, gissinger_jacobian, *g,
                         drift_hessian=gissinger_hessian, stepper=Stepper.RK4_DRIFT,
                         name=name, params=dict(case=case, obs_y=y.tolist()))
        defaults = dict(dt=0.1, n_steps=100, epsilon=0.01, x0=p_plus + 0.05)
    else:
        rate = _as_float(params, "rate", 0.0)
        obs_r = _as_float(params, "obs_r", 1.0)
        if not obs_r > 0:
            raise InvalidParam("obs_r", "must be positive (inf disables the observation)")
        obs_y = _as_float(params, "obs_y", 1.0)
        model = linear_gaussian_model(rate, sigma, obs_y, obs_r)
        defaults = dict(dt=0.01, n_steps=100, epsilon=0.01, x0=0.0)

    dt = _as_float(params, "dt", defaults["dt"])
    eps = _as_float(params, "epsilon", defaults["epsilon"])
    try:
        n_steps = int(params.get("n_steps", defaults["n_steps"]))
    except (TypeError, ValueError):
        raise InvalidParam("n_steps", "expected an integer") from None
    x0 = _as_vector(params, "x0", defaults["x0"], model.dim)
    for key, val in (("dt", dt), ("epsilon", eps), ("n_steps", n_steps)):
        if not val > 0:
            raise InvalidParam(key, "must be positive")
    return model, PathGrid(n_steps, dt, x0, eps)

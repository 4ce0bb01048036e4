"""Command line experiments: epsilon sweeps, histograms, crossing counts and
the time-step consistency check.

Every subcommand reads an optional config file (``key = value`` lines under
``[section]`` headers) and then applies command line flags on top of it.
Outputs are CSV files with LF line endings and 17 significant digits, and
they depend only on the configuration.

    sdeis sweep --model bm_unimodal --methods lm,slm --samples 1200 --out runs/uni
"""
from __future__ import annotations

import argparse
import configparser
import csv
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .diagnostics import (
    loglog_slope,
    relative_variance,
    weighted_marginal,
    zero_crossings,
)
from .errors import ConfigError, ModelNotSupported, SdeisError
from .model import MODEL_NAMES, builtin_model
from .optimize import marginal_covariance, minimize_path_from_rest
from .samplers import MAX_FAILED_FRACTION, RESTART_EVERY, SamplerKind, run_ensemble

log = logging.getLogger(__name__)

EXPERIMENTS = ("sweep", "histogram", "crossings", "dt-consistency")

DEFAULT_EPSILONS = {
    "bm_unimodal": "logspace:1e-3:1e-1:7",
    "bm_bimodal": "0.1",
    "langevin_bimodal": "logspace:1e-8:1e-2:7",
    "gissinger": "1e-3,3e-3,1e-2",
    "linear_gaussian": "logspace:1e-3:1e-1:7",
}
DEFAULT_METHODS = {"sweep": "lm,slm,dlm,sdlm", "histogram": "lm,dlm",
                   "crossings": "dlm", "dt-consistency": "lm"}
DEFAULT_MODELS = {"sweep": "bm_unimodal", "histogram": "bm_bimodal",
                  "crossings": "langevin_bimodal", "dt-consistency": "linear_gaussian"}


@dataclass
class ExperimentConfig:
    experiment: str
    model: str
    model_params: Dict[str, str] = field(default_factory=dict)
    methods: List[SamplerKind] = field(default_factory=list)
    epsilons: List[float] = field(default_factory=list)
    m_samples: Dict[SamplerKind, int] = field(default_factory=dict)
    seed: int = 0
    output_dir: Path = Path(".")
    x0s: List[float] = field(default_factory=list)
    dts: List[float] = field(default_factory=list)
    horizon: float = 1.0
    step: Optional[int] = None
    coords: Optional[List[int]] = None
    bins: int = 50
    chunk_size: int = 2048
    restart_every: int = RESTART_EVERY

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.model not in MODEL_NAMES:
            raise ConfigError(f"unknown model {self.model!r}; choose from {', '.join(MODEL_NAMES)}")
        if self.experiment != "dt-consistency":
            if not self.methods:
                raise ConfigError("methods must not be empty")
            if not self.epsilons:
                raise ConfigError("epsilons must not be empty")
        if any(not (e > 0 and math.isfinite(e)) for e in self.epsilons):
            raise ConfigError("epsilons must be positive")
        for kind in self.methods:
            if self.m_samples.get(kind, 0) < 1:
                raise ConfigError(f"samples for {kind.value} must be >= 1")
        if self.experiment == "crossings" and not self.x0s:
            raise ConfigError("crossings needs at least one x0")
        if self.experiment == "dt-consistency":
            if not self.dts or any(not d > 0 for d in self.dts):
                raise ConfigError("dts must be a nonempty list of positive steps")
            if not self.horizon > 0:
                raise ConfigError("horizon must be positive")
        if self.bins < 2:
            raise ConfigError("bins must be >= 2")
        if self.chunk_size < 1:
            raise ConfigError("chunk-size must be >= 1")
        if self.restart_every < 1:
            raise ConfigError("restart-every must be >= 1")


# ---------------------------------------------------------------- parsing


def _split(text) -> List[str]:
    return [t for t in str(text).replace(";", ",").replace(" ", ",").split(",") if t]


def parse_float_list(text) -> List[float]:
    """Comma separated numbers, or ``logspace:lo:hi:n`` for n log-spaced values."""
    text = str(text).strip()
    try:
        if text.startswith("logspace:"):
            _, lo, hi, n = text.split(":")
            return [float(v) for v in np.logspace(np.log10(float(lo)), np.log10(float(hi)), int(n))]
        return [float(t) for t in _split(text)]
    except ValueError:
        raise ConfigError(f"cannot read a list of numbers from {text!r}") from None


def parse_samples(text, methods) -> Dict[SamplerKind, int]:
    """``1200`` for every method, or per method as ``lm=12000,dlm=1200``."""
    out: Dict[SamplerKind, int] = {}
    default = None
    try:
        for item in _split(text):
            if "=" in item:
                key, val = item.split("=", 1)
                out[SamplerKind.parse(key)] = int(val)
            else:
                default = int(item)
    except ValueError as exc:
        raise ConfigError(f"bad samples spec {text!r}: {exc}") from None
    for kind in methods:
        if kind not in out:
            if default is None:
                raise ConfigError(f"no sample count for {kind.value}")
            out[kind] = default
    return out


def _read_config_file(path) -> Dict[str, Dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return {sec: dict(parser.items(sec)) for sec in parser.sections()}


_FLAG_KEYS = ("model", "methods", "epsilons", "samples", "seed", "out", "x0s", "dts",
              "horizon", "step", "coords", "bins", "chunk_size", "restart_every")


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """Merge the config file (if any) with flags; flags win.

    Keys of the ``[model]`` section are model parameters; keys of any other
    section are experiment settings, with ``[<experiment>]`` read last.
    """
    experiment = args.command
    settings: Dict[str, str] = {}
    params: Dict[str, str] = {}
    if args.config:
        sections = _read_config_file(args.config)
        for name, values in sections.items():
            if name == "model":
                params.update(values)
            elif name not in EXPERIMENTS:
                settings.update(values)
        settings.update(sections.get(experiment, {}))
    settings = {k.replace("-", "_"): v for k, v in settings.items()}
    unknown = set(settings) - set(_FLAG_KEYS)
    if unknown:
        raise ConfigError(f"unknown setting {sorted(unknown)[0]!r} in config file")
    for key in _FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    for item in args.param or []:
        if "=" not in item:
            raise ConfigError(f"--param expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        params[key.strip()] = val.strip()

    model = str(settings.get("model", DEFAULT_MODELS[experiment]))
    methods = [SamplerKind.parse(m) for m in _split(settings.get("methods", DEFAULT_METHODS[experiment]))]
    if experiment == "dt-consistency":
        epsilons = parse_float_list(settings.get("epsilons", "1"))
    else:
        epsilons = parse_float_list(settings.get("epsilons", DEFAULT_EPSILONS.get(model, "0.01")))
    coords = settings.get("coords")
    try:
        return ExperimentConfig(
            experiment=experiment,
            model=model,
            model_params=params,
            methods=methods,
            epsilons=epsilons,
            m_samples=parse_samples(settings.get("samples", "1200"), methods),
            seed=int(settings.get("seed", 0)),
            output_dir=Path(settings.get("out", ".")),
            x0s=parse_float_list(settings.get("x0s", "1e-1,1e-3,1e-5")),
            dts=parse_float_list(settings.get("dts", "0.1,0.05,0.025,0.0125,0.00625")),
            horizon=float(settings.get("horizon", 1.0)),
            step=None if settings.get("step") is None else int(settings["step"]),
            coords=None if coords is None else [int(c) for c in _split(coords)],
            bins=int(settings.get("bins", 50)),
            chunk_size=int(settings.get("chunk_size", 2048)),
            restart_every=int(settings.get("restart_every", RESTART_EVERY)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------- output


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


class CsvTable:
    """CSV writer that flushes after every row."""

    def __init__(self, path: Path, header):
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "w", encoding="utf-8", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(header)
        self._fh.flush()

    def row(self, *values):
        self._w.writerow([fmt(v) for v in values])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class RunRecord:
    ok: bool = True

    def check(self, ensemble, total: int):
        if ensemble.failed > MAX_FAILED_FRACTION * total:
            log.error("%s: %d of %d samples failed", ensemble.kind.value, ensemble.failed, total)
            self.ok = False


def _setup(config: ExperimentConfig, **overrides):
    params = dict(config.model_params)
    params.update({k: v for k, v in overrides.items() if v is not None})
    return builtin_model(config.model, params)


def _ensemble(config, kind, model, grid, record: RunRecord):
    m = config.m_samples[kind]
    ens = run_ensemble(kind, model, grid, m, config.seed, chunk_size=config.chunk_size,
                       allow_failures=True, restart_every=config.restart_every)
    record.check(ens, m)
    return ens


def _q(ens):
    if len(ens) == 0:
        return float("nan"), float("nan")
    stats = relative_variance(ens.log_weights)
    return stats.q_rel_var, stats.n_eff


# ---------------------------------------------------------------- experiments


def run_sweep(config: ExperimentConfig) -> int:
    """Q for every (method, epsilon); writes sweep.csv and slopes.csv."""
    record = RunRecord()
    out = config.output_dir
    results: Dict[SamplerKind, list] = {k: [] for k in config.methods}
    with CsvTable(out / "sweep.csv", ["method", "epsilon", "q", "n_eff", "m", "failed", "seed"]) as t:
        for kind in config.methods:
            for eps in config.epsilons:
                model, grid = _setup(config, epsilon=eps)
                ens = _ensemble(config, kind, model, grid, record)
                q, n_eff = _q(ens)
                t.row(kind.value, eps, q, n_eff, config.m_samples[kind], ens.failed, config.seed)
                results[kind].append((eps, q))
    with CsvTable(out / "slopes.csv", ["method", "slope", "intercept", "n_points"]) as t:
        for kind, pts in results.items():
            pts = [p for p in pts if p[1] > 0 and math.isfinite(p[1])]
            if len(pts) >= 2 and len({p[0] for p in pts}) >= 2:
                slope, icpt = loglog_slope(pts)
            else:
                slope = icpt = float("nan")
            t.row(kind.value, slope, icpt, len(pts))
    return 0 if record.ok else 1


def prior_endpoint_moments(model, grid):
    """Mean and variance of X_N under the discretized prior for a linear drift."""
    if model.linear_rate is None or model.dim != 1:
        raise ModelNotSupported("closed form needs a one-dimensional linear drift")
    m = 1.0 + grid.dt * model.linear_rate
    n = grid.n_steps
    mean = m**n * float(grid.x0[0])
    var = grid.epsilon * model.sigma**2 * grid.dt * sum(m ** (2 * k) for k in range(n))
    return mean, var


def target_curve(model, grid, lo, hi, points=401):
    """Unnormalized final-time target density on a grid, peak scaled to one."""
    mean, var = prior_endpoint_moments(model, grid)
    x = np.linspace(lo, hi, points)
    expo = -(grid.epsilon * (x - mean) ** 2 / (2.0 * var) + model.loglik(x[:, None])) / grid.epsilon
    return x, np.exp(expo - expo.max())


def run_histogram(config: ExperimentConfig) -> int:
    """Weighted final-time (or ``step``) marginals per method and epsilon."""
    record = RunRecord()
    out = config.output_dir
    multi_eps = len(config.epsilons) > 1
    for eps in config.epsilons:
        model, grid = _setup(config, epsilon=eps)
        step = grid.n_steps if config.step is None else config.step
        coords = list(range(model.dim)) if config.coords is None else config.coords
        tag = f"_eps{eps:g}" if multi_eps else ""
        lo, hi = math.inf, -math.inf
        for kind in config.methods:
            ens = _ensemble(config, kind, model, grid, record)
            if len(ens) == 0:
                continue
            for c in coords:
                hist = weighted_marginal(ens, step, c, config.bins)
                name = f"hist_{kind.value}_{c}_{step}{tag}.csv"
                with CsvTable(out / name, ["bin_left", "bin_right", "mass"]) as t:
                    for left, right, mass in zip(hist.edges[:-1], hist.edges[1:], hist.masses):
                        t.row(left, right, mass)
                lo, hi = min(lo, hist.edges[0]), max(hi, hist.edges[-1])
        if model.dim == 1 and model.linear_rate is not None and step == grid.n_steps and lo < hi:
            x, dens = target_curve(model, grid, lo, hi)
            with CsvTable(out / f"target{tag}.csv", ["x", "unnormalized_density"]) as t:
                for xv, dv in zip(x, dens):
                    t.row(xv, dv)
    return 0 if record.ok else 1


def run_crossings(config: ExperimentConfig) -> int:
    """Average zero crossings and Q of the first method for each (x0, epsilon)."""
    record = RunRecord()
    kind = config.methods[0]
    with CsvTable(config.output_dir / "crossings.csv",
                  ["x0", "epsilon", "q", "avg_crossings", "m", "seed"]) as t:
        for x0 in config.x0s:
            for eps in config.epsilons:
                model, grid = _setup(config, epsilon=eps, x0=x0)
                ens = _ensemble(config, kind, model, grid, record)
                q, _ = _q(ens)
                cross = zero_crossings(ens) if len(ens) else float("nan")
                t.row(x0, eps, q, cross, config.m_samples[kind], config.seed)
    return 0 if record.ok else 1


def continuous_optimal_drift(rate, sigma, x0, obs_y, obs_r, horizon, t):
    """d/dt of the continuous minimizer of the action for f = rate * x, g = (x - y)^2 / (2 r)."""
    a, s2, T = rate, sigma**2, horizon
    t = np.asarray(t, dtype=float)
    if math.isinf(obs_r):
        return a * x0 * np.exp(a * t)
    G = T if a == 0 else math.expm1(2 * a * T) / (2 * a)
    x_T = (obs_r * math.exp(a * T) * x0 + s2 * G * obs_y) / (obs_r + s2 * G)
    p_T = -(x_T - obs_y) / obs_r
    if a == 0:
        phi = x0 + s2 * p_T * t
    else:
        phi = np.exp(a * t) * x0 + s2 * p_T * np.exp(a * (T + t)) * -np.expm1(-2 * a * t) / (2 * a)
    return a * phi + s2 * p_T * np.exp(a * (T - t))


def dt_consistency_rows(model, grid, dts, horizon):
    """(dt, drift_err, sigma_err) for each time step over a fixed horizon."""
    p = model.params
    if model.linear_rate is None or model.dim != 1 or "obs_r" not in p:
        raise ModelNotSupported("dt-consistency needs a linear drift and a quadratic likelihood")
    x0 = float(grid.x0[0])
    rows = []
    for dt in dts:
        n = int(round(horizon / dt))
        if n < 1 or abs(n * dt - horizon) > 1e-9 * horizon:
            raise ConfigError(f"dt={dt} does not divide the horizon {horizon}")
        opt = minimize_path_from_rest(model, dt, grid.x0, n)
        phi = np.concatenate([[x0], opt.phi[:, 0]])
        t = dt * np.arange(n)
        exact = continuous_optimal_drift(model.linear_rate, model.sigma, x0, p["obs_y"], p["obs_r"],
                                         horizon, t)
        drift_err = float(np.max(np.abs(np.diff(phi) / dt - exact)))
        sigma = marginal_covariance(model, dt, grid.x0, opt.phi)
        sigma_err = float(abs(sigma[0, 0] - model.sigma**2))
        rows.append((dt, drift_err, sigma_err))
    return rows


def fitted_order(dts, errors) -> float:
    """Slope of log(error) against log(dt); NaN when any error is not positive."""
    errors = np.asarray(errors, dtype=float)
    if np.any(~(errors > 0)):
        return float("nan")
    return loglog_slope(list(zip(dts, errors)))[0]


def run_dt_consistency(config: ExperimentConfig) -> int:
    """Discrete optimum against the continuous one as dt is refined."""
    model, grid = _setup(config)
    rows = dt_consistency_rows(model, grid, config.dts, config.horizon)
    with CsvTable(config.output_dir / "consistency.csv", ["dt", "drift_err", "sigma_err"]) as t:
        for row in rows:
            t.row(*row)
    dts = [r[0] for r in rows]
    with CsvTable(config.output_dir / "orders.csv", ["quantity", "order"]) as t:
        t.row("drift_err", fitted_order(dts, [r[1] for r in rows]))
        t.row("sigma_err", fitted_order(dts, [r[2] for r in rows]))
    return 0


RUNNERS = {"sweep": run_sweep, "histogram": run_histogram,
           "crossings": run_crossings, "dt-consistency": run_dt_consistency}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdeis", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=RUNNERS[name].__doc__.split("\n")[0])
        p.add_argument("--config", help="key = value file with [section] headers")
        p.add_argument("--model", help=f"one of {', '.join(MODEL_NAMES)}")
        p.add_argument("--methods", help="comma separated: direct, lm, slm, dlm, sdlm")
        p.add_argument("--epsilons", help="comma separated values or logspace:lo:hi:n")
        p.add_argument("--samples", help="count for all methods, or lm=12000,dlm=1200")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--param", action="append", metavar="KEY=VALUE",
                       help="model parameter (dt, n_steps, x0, alpha, obs_y, ...)")
        p.add_argument("--chunk-size", dest="chunk_size", type=int)
        p.add_argument("--restart-every", dest="restart_every", type=int,
                       help="DLM steps between cold restarts of the path optimization")
        if name == "histogram":
            p.add_argument("--step", type=int, help="1-based step, default the last")
            p.add_argument("--coords", help="state components, default all")
            p.add_argument("--bins", type=int)
        if name == "crossings":
            p.add_argument("--x0s", help="starting states")
        if name == "dt-consistency":
            p.add_argument("--dts", help="time steps")
            p.add_argument("--horizon", type=float)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = build_config(args)
        return RUNNERS[config.experiment](config)
    except (SdeisError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

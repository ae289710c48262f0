"""Experiment definitions, configuration and result emission for the CLI.

Each experiment simulates (or loads) one dataset, fans replicate jobs out
through :func:`sspe.runner.replicate_runner`, writes one CSV per replicate
under ``replicates/``, an ``aggregate.csv`` that carries the exact oracle
next to the estimates, and ``metadata.json``.
"""

from __future__ import annotations

import dataclasses
import json
import math
import platform
import time
from dataclasses import dataclass, field
from functools import partial
from importlib import metadata as importlib_metadata
from pathlib import Path
from typing import Any

import numpy as np

from . import io
from .bayes import PriorSpec, SmcParamOutput, mcmc_within_smc, pgibbs
from .filter import FilterOptions, filter_stream
from .functionals import cross_product
from .kalman import exact_additive, grid_loglik, grid_posterior_path, kalman_loglik
from .ml import StepSizeSchedule, offline_em, online_em
from .model import LinearGaussian, Theta, simulate_lgssm
from .particle_core import Streams
from .runner import Job, RunnerResult, replicate_runner, replicate_seed
from .smooth import FixedLagSmoother, ForwardSmoother, ParisSmoother, PathSpaceSmoother

EXPERIMENTS = (
    "smoothing_bias_var",
    "offline_em",
    "online_em",
    "degeneracy",
    "posterior_mcmc_smc",
    "pgibbs_compare",
    "custom",
)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """All experiment settings.  Variances are given as variances."""

    experiment: str
    seed: int = 0
    replicates: int = 20
    parallelism: int = 1
    rho: float = 0.8
    tau2: float = 0.1
    sigma2: float = 1.0
    init_var: float | None = None
    T: list[int] = field(default_factory=lambda: [1000])
    N: list[int] = field(default_factory=lambda: [100])
    N_pathspace: list[int] = field(default_factory=list)
    methods: list[str] = field(default_factory=lambda: ["forward"])
    iters: int = 25
    theta0: list[float] | None = None
    free: list[str] = field(default_factory=lambda: ["rho", "tau2", "sigma2"])
    alpha: float = 0.8
    gamma_c: float = 1.0
    n_freeze: int = 50
    proposal: str = "bootstrap"
    resampling: str = "multinomial"
    ess_threshold: float | None = None
    data_seed: int = 12345
    data_path: str | None = None
    checkpoint_every: int = 1000
    grid_rho: list[float] = field(default_factory=lambda: [-0.99, 0.99, 199])
    grid_tau: list[float] = field(default_factory=lambda: [0.5, 1.5, 101])
    grid_tau2: list[float] = field(default_factory=lambda: [0.5, 2.0, 151])
    grid_sigma2: list[float] = field(default_factory=lambda: [0.5, 2.0, 151])
    mcmc_iters: int = 3000
    burn_in: float = 0.1
    pg_N: int = 50
    smc_N: int = 75000
    lag: int = 10
    K: int = 2
    fail_replicates: list[int] = field(default_factory=list)

    # --- derived helpers

    @property
    def theta_star(self) -> Theta:
        mask = tuple(n in self.free for n in ("rho", "tau2", "sigma2"))
        return Theta(self.rho, self.tau2, self.sigma2, mask)

    @property
    def start(self) -> Theta:
        t = self.theta_star
        if self.theta0 is None:
            return t
        return t.with_values(np.asarray(self.theta0, dtype=float))

    @property
    def options(self) -> FilterOptions:
        return FilterOptions(self.resampling, self.ess_threshold)

    def model(self) -> LinearGaussian:
        return LinearGaussian(self.proposal, self.init_var)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# Desk-scale defaults.  Full-scale runs use T up to 6e4 and 150-300
# replicates; these keep each experiment within minutes to an hour.
DEFAULTS: dict[str, dict[str, Any]] = {
    "smoothing_bias_var": dict(rho=0.8, tau2=0.1, sigma2=1.0, T=[5000], N=[50, 100, 200],
                               N_pathspace=[2500, 10000, 40000], methods=["pathspace", "forward"],
                               replicates=100, checkpoint_every=500),
    "offline_em": dict(rho=0.8, tau2=1.0, sigma2=0.04, T=[100, 1000], N=[150], N_pathspace=[22500],
                       methods=["forward", "pathspace"], iters=25, theta0=[0.1, 0.01, 0.04],
                       free=["rho", "tau2"], replicates=50, grid_rho=[0.5, 0.995, 100],
                       grid_tau=[0.5, 1.5, 101]),
    "online_em": dict(rho=0.8, tau2=1.0, sigma2=0.04, T=[20000], N=[150], methods=["forward"],
                      theta0=[0.1, 0.01, 0.04], free=["rho", "tau2"], alpha=0.8, gamma_c=1.0, n_freeze=50,
                      replicates=50, checkpoint_every=1000, grid_rho=[0.5, 0.995, 100],
                      grid_tau=[0.5, 1.5, 101]),
    "degeneracy": dict(rho=1.0, tau2=1.0, sigma2=1.0, init_var=1.0, T=[20000], N=[5000],
                       free=["tau2", "sigma2"], replicates=20, checkpoint_every=1000,
                       grid_tau2=[0.4, 2.0, 161], grid_sigma2=[0.4, 2.0, 161]),
    "posterior_mcmc_smc": dict(rho=0.5, tau2=0.01, sigma2=1.0, T=[2000], N=[10000], free=["rho", "sigma2"],
                               replicates=20, checkpoint_every=500, grid_rho=[-0.999, 0.999, 400],
                               grid_sigma2=[0.5, 1.8, 261]),
    "pgibbs_compare": dict(rho=0.5, tau2=0.01, sigma2=1.0, T=[1000], free=["rho", "sigma2"], replicates=20,
                           pg_N=50, mcmc_iters=3000, smc_N=75000, grid_rho=[-0.999, 0.999, 400],
                           grid_sigma2=[0.5, 1.8, 261]),
    "custom": dict(rho=0.8, tau2=0.1, sigma2=1.0, T=[200], N=[100], methods=["forward"], replicates=10),
}

NOTES = {
    "offline_em": "True parameters read as (rho, tau, sigma) = (0.8, 1, 0.2), i.e. tau2 = 1, sigma2 = 0.04; "
                  "theta0 = (0.1, 0.1, 0.2) read the same way.",
    "online_em": "True parameters read as (rho, tau, sigma) = (0.8, 1, 0.2), i.e. tau2 = 1, sigma2 = 0.04; "
                 "theta0 = (0.1, 0.1, 0.2) read the same way.",
    "degeneracy": "Random walk (rho = 1 fixed) with X_0 ~ N(0, init_var); (tau2, sigma2) free.",
}


def _check_type(key: str, value, default):
    if value is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"config key {key!r} has the wrong type: {value!r}")
    return value


def build_config(experiment: str, file_values: dict | None = None, **overrides) -> ExperimentConfig:
    """Merge documented defaults, the config file and CLI overrides."""
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; expected one of {EXPERIMENTS}")
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    file_values = dict(file_values or {})
    unknown = sorted(set(file_values) - names)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if file_values.get("experiment", experiment) != experiment:
        raise ConfigError(f"config is for {file_values['experiment']!r}, not {experiment!r}")
    proto = ExperimentConfig(experiment)
    values = dict(DEFAULTS[experiment])
    values.update(file_values)
    values.update({k: v for k, v in overrides.items() if v is not None})
    values["experiment"] = experiment
    for k in ("T", "N", "N_pathspace"):
        if isinstance(values.get(k), int) and not isinstance(values[k], bool):
            values[k] = [values[k]]
    for k, v in values.items():
        default = getattr(proto, k)
        if k in ("init_var", "ess_threshold") and v is not None:
            default = 0.0
        if k in ("theta0",) and v is not None:
            default = []
        if k == "data_path" and v is not None:
            default = ""
        _check_type(k, v, default)
    cfg = ExperimentConfig(**values)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.replicates >= 1, "replicates must be >= 1")
    need(cfg.parallelism >= 1, "parallelism must be >= 1")
    need(all(t >= 1 for t in cfg.T), "T must be >= 1")
    need(all(n >= 1 for n in cfg.N + cfg.N_pathspace), "N must be >= 1")
    need(abs(cfg.rho) <= 1.0, "rho must lie in [-1, 1]")
    need(cfg.tau2 > 0 and cfg.sigma2 > 0, "variances must be > 0")
    need(cfg.init_var is None or cfg.init_var > 0, "init_var must be > 0")
    need(cfg.init_var is not None or abs(cfg.rho) < 1.0, "|rho| = 1 needs init_var")
    need(set(cfg.free) <= {"rho", "tau2", "sigma2"}, f"unknown names in free: {cfg.free}")
    need(cfg.proposal in ("bootstrap", "optimal"), "proposal must be 'bootstrap' or 'optimal'")
    need(cfg.resampling in ("multinomial", "systematic"), "resampling must be 'multinomial' or 'systematic'")
    need(cfg.theta0 is None or len(cfg.theta0) == 3, "theta0 must have three entries")
    need(cfg.checkpoint_every >= 1, "checkpoint_every must be >= 1")
    need(0.5 < cfg.alpha <= 1.0, "alpha must lie in (0.5, 1]")
    need(cfg.n_freeze >= 1, "n_freeze must be >= 1")
    for g in ("grid_rho", "grid_tau", "grid_tau2", "grid_sigma2"):
        v = getattr(cfg, g)
        need(len(v) == 3 and v[0] < v[1] and int(v[2]) >= 1, f"{g} must be [lo, hi, points]")
    for m in cfg.methods:
        name = m.split(":")[0]
        need(name in ("pathspace", "forward", "fixedlag", "paris", "ffbsm"), f"unknown method {m!r}")


def load_config(experiment: str, path, **overrides) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    return build_config(experiment, raw, **overrides)


def _axis(spec) -> np.ndarray:
    lo, hi, n = spec
    return np.linspace(float(lo), float(hi), int(n))


# --- data ----------------------------------------------------------------


def dataset(cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray | None]:
    """Observations (and states when simulated) for the largest T."""
    if cfg.data_path:
        x, y = io.read_csv_series(cfg.data_path)
        return y, x
    tr = simulate_lgssm(cfg.theta_star, max(cfg.T), cfg.data_seed, init_var=cfg.init_var)
    return tr.observations, tr.states


def _checkpoints(T: int, every: int) -> np.ndarray:
    cps = list(range(every, T + 1, every))
    if not cps or cps[-1] != T:
        cps.append(T)
    return np.array(cps)


def _stream(seed: int, rep: int, variant: int) -> Streams:
    return Streams(seed, rep).child(variant)


def _maybe_fail(cfg: ExperimentConfig, rep: int) -> None:
    if rep in cfg.fail_replicates:
        raise RuntimeError(f"injected failure for replicate {rep}")


# --- replicate jobs (top level so that they pickle) -----------------------


def _job_smoothing(y, theta, method, N, seed, rep, variant, checkpoints, model, options, fail):
    if fail:
        raise RuntimeError(f"injected failure for replicate {rep}")
    streams = _stream(seed, rep, variant)
    s = cross_product()
    name, _, arg = method.partition(":")
    if name == "pathspace":
        sm = PathSpaceSmoother(s, model, record=False)
    elif name in ("forward", "ffbsm"):
        sm = ForwardSmoother(s, model, record=False)
    elif name == "fixedlag":
        sm = FixedLagSmoother(s, int(arg or 10), model, record=False)
    else:
        sm = ParisSmoother(s, int(arg or 2), streams.child(1).generator(), model, record=False)
    cps = set(int(c) for c in checkpoints)
    out = {}
    T = int(max(checkpoints))
    for sys in filter_stream(model, theta, y[: T + 1], N, options, streams):
        n = sys.time_index
        est = sm.start(sys, y[0], theta) if n == 0 else sm.update(sys, y[n], theta)
        if n in cps:
            out[n] = float(est[0])
    return np.array([out[int(c)] for c in checkpoints])


def _job_offline_em(y, theta0, method, N, iters, seed, rep, variant, model, options, fail):
    if fail:
        raise RuntimeError(f"injected failure for replicate {rep}")
    tr = offline_em(y, theta0, iters, method, N, _stream(seed, rep, variant), model, options)
    return tr.values(), tr.exact_loglik


def _job_online_em(y, theta0, method, N, alpha, c, n_freeze, seed, rep, variant, checkpoints, model, options,
                   fail):
    if fail:
        raise RuntimeError(f"injected failure for replicate {rep}")
    tr = online_em(y, theta0, StepSizeSchedule(c, alpha), N, n_freeze, method, _stream(seed, rep, variant),
                   model, options)
    vals = tr.values()
    # entry n + 1 of the trace is the estimate after processing y_n
    return vals[np.asarray(checkpoints) + 1]


def _job_mws(y, prior, N, seed, rep, variant, base, free, proposal, init_var, fail):
    if fail:
        raise RuntimeError(f"injected failure for replicate {rep}")
    return mcmc_within_smc(y, prior, N, _stream(seed, rep, variant), base, free, proposal, True, init_var)


def _job_pgibbs(y, prior, N, iters, seed, rep, variant, base, free, init_var, fail):
    if fail:
        raise RuntimeError(f"injected failure for replicate {rep}")
    ch = pgibbs(y, prior, N, iters, _stream(seed, rep, variant), base, free, init_var=init_var)
    ch.info.pop("last_path", None)
    ch.info.pop("path_mean", None)
    return ch


def _job_custom(y, theta, N, method, seed, rep, variant, model, options, fail):
    if fail:
        raise RuntimeError(f"injected failure for replicate {rep}")
    streams = _stream(seed, rep, variant)
    s = cross_product()
    name, _, arg = method.partition(":")
    sm = {"pathspace": lambda: PathSpaceSmoother(s, model, record=False),
          "fixedlag": lambda: FixedLagSmoother(s, int(arg or 10), model, record=False),
          "paris": lambda: ParisSmoother(s, int(arg or 2), streams.child(1).generator(), model, record=False)
          }.get(name, lambda: ForwardSmoother(s, model, record=False))()
    ll = 0.0
    est = None
    for sys in filter_stream(model, theta, y, N, options, streams):
        ll += sys.loglik_increment
        n = sys.time_index
        est = sm.start(sys, y[0], theta) if n == 0 else sm.update(sys, y[n], theta)
    return ll, float(est[0])


# --- experiment drivers ---------------------------------------------------


@dataclass
class RunContext:
    cfg: ExperimentConfig
    out: Path
    jobs: list[Job] = field(default_factory=list)
    seeds: dict[int, dict] = field(default_factory=dict)
    counters: dict[str, Any] = field(default_factory=dict)

    def add(self, fn, rep: int, variant: int, label: str, **kwargs) -> int:
        idx = len(self.jobs)
        fail = rep in self.cfg.fail_replicates
        self.jobs.append(Job(idx, partial(fn, **kwargs, seed=self.cfg.seed, rep=rep, variant=variant, fail=fail),
                             {}, label))
        key = replicate_seed(self.cfg.seed, rep)
        self.seeds[idx] = {"label": label, "replicate": rep, "variant": variant,
                           "philox_key": [str(key[0]), str(key[1])]}
        return idx

    def run(self) -> RunnerResult:
        return replicate_runner(self.jobs, self.cfg.parallelism)


def _rep_dir(out: Path) -> Path:
    d = out / "replicates"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _exp_smoothing(ctx: RunContext, y, x):
    cfg = ctx.cfg
    T = max(cfg.T)
    cps = _checkpoints(T, cfg.checkpoint_every)
    theta = cfg.theta_star
    model, opts = cfg.model(), cfg.options
    exact = np.array([exact_additive(theta, y[: n + 1], cross_product())[0] for n in cps])
    combos = []
    for m in cfg.methods:
        Ns = cfg.N_pathspace if m.split(":")[0] == "pathspace" and cfg.N_pathspace else cfg.N
        combos += [(m, n) for n in Ns]
    keys = {}
    for v, (m, n) in enumerate(combos):
        for r in range(cfg.replicates):
            keys[ctx.add(_job_smoothing, r, v, f"{m}_N{n}_r{r}", y=y, theta=theta, method=m, N=n,
                         checkpoints=cps, model=model, options=opts)] = (m, n, r)
    res = ctx.run()
    rd = _rep_dir(ctx.out)
    rows = []
    for (m, n) in combos:
        ests = []
        for idx, (mm, nn, r) in keys.items():
            if (mm, nn) != (m, n) or idx not in res.results:
                continue
            e = res.results[idx]
            ests.append(e)
            io.write_rows(rd / f"{m.replace(':', '-')}_N{n}_r{r}.csv", ["n", "estimator", "component", "value"],
                          [(int(c), m, "x_prev_x", float(v)) for c, v in zip(cps, e)])
        if not ests:
            continue
        E = np.array(ests)
        err = E - exact
        for j, c in enumerate(cps):
            rows.append((int(c), m, n, float(err[:, j].mean()), float(E[:, j].var() / c),
                         float(np.mean(err[:, j] ** 2) / c), float(exact[j]), len(ests)))
    io.write_rows(ctx.out / "aggregate.csv", ["n", "method", "N", "bias", "var_scaled", "mse_scaled", "exact",
                                              "replicates"], rows)
    return res


def grid_ml_2d(y, base: Theta, rho_axis, tau_axis, checkpoints=None, init_var=None):
    """Grid ML over (rho, tau) with tau2 = tau^2; per checkpoint when given."""
    ll = grid_loglik(base, y, {"rho": rho_axis, "tau2": tau_axis**2}, checkpoints, init_var)
    if checkpoints is None:
        ll = ll[..., None]
    out = []
    for k in range(ll.shape[-1]):
        i, j = np.unravel_index(np.argmax(ll[..., k]), ll.shape[:2])
        out.append((float(rho_axis[i]), float(tau_axis[j])))
    return out


def _quantile_rows(prefix, vals, truth, cell):
    q = np.quantile(vals, [0.25, 0.5, 0.75])
    return prefix + (float(q[0]), float(q[1]), float(q[2]), float(np.min(vals)), float(np.max(vals)), truth, cell)


def _exp_offline_em(ctx: RunContext, y, x):
    cfg = ctx.cfg
    model, opts = cfg.model(), cfg.options
    start = cfg.start
    ra, ta = _axis(cfg.grid_rho), _axis(cfg.grid_tau)
    cell = {"rho": float(ra[1] - ra[0]) if ra.size > 1 else 0.0, "tau": float(ta[1] - ta[0]) if ta.size > 1 else 0.0}
    combos = []
    for m in cfg.methods:
        Ns = cfg.N_pathspace if m.split(":")[0] == "pathspace" and cfg.N_pathspace else cfg.N
        combos += [(T, m, n) for T in cfg.T for n in Ns]
    keys = {}
    for v, (T, m, n) in enumerate(combos):
        for r in range(cfg.replicates):
            keys[ctx.add(_job_offline_em, r, v, f"T{T}_{m}_N{n}_r{r}", y=y[: T + 1], theta0=start, method=m, N=n,
                         iters=cfg.iters, model=model, options=opts)] = (T, m, n, r)
    res = ctx.run()
    ml = {T: grid_ml_2d(y[: T + 1], start, ra, ta)[0] for T in cfg.T}
    rd = _rep_dir(ctx.out)
    rows = []
    for (T, m, n) in combos:
        finals = []
        for idx, (TT, mm, nn, r) in keys.items():
            if (TT, mm, nn) != (T, m, n) or idx not in res.results:
                continue
            vals, lls = res.results[idx]
            finals.append(vals[-1])
            io.write_rows(rd / f"T{T}_{m.replace(':', '-')}_N{n}_r{r}.csv",
                          ["iter_or_n", "rho", "tau2", "sigma2", "exact_loglik"],
                          [(i, float(v[0]), float(v[1]), float(v[2]), float(l)) for i, (v, l) in
                           enumerate(zip(vals, lls))])
        if not finals:
            continue
        F = np.array(finals)
        rows.append(_quantile_rows((T, m, n, "rho"), F[:, 0], ml[T][0], cell["rho"]))
        rows.append(_quantile_rows((T, m, n, "tau"), np.sqrt(F[:, 1]), ml[T][1], cell["tau"]))
    io.write_rows(ctx.out / "aggregate.csv", ["T", "method", "N", "param", "q25", "median", "q75", "min", "max",
                                              "grid_ml", "grid_cell"], rows)
    return res


def _exp_online_em(ctx: RunContext, y, x):
    cfg = ctx.cfg
    model, opts = cfg.model(), cfg.options
    T = max(cfg.T)
    cps = _checkpoints(T, cfg.checkpoint_every)
    start = cfg.start
    combos = [(m, n) for m in cfg.methods for n in (cfg.N_pathspace if m == "pathspace" and cfg.N_pathspace
                                                    else cfg.N)]
    keys = {}
    for v, (m, n) in enumerate(combos):
        for r in range(cfg.replicates):
            keys[ctx.add(_job_online_em, r, v, f"{m}_N{n}_r{r}", y=y[: T + 1], theta0=start, method=m, N=n,
                         alpha=cfg.alpha, c=cfg.gamma_c, n_freeze=cfg.n_freeze, checkpoints=cps, model=model,
                         options=opts)] = (m, n, r)
    res = ctx.run()
    ra, ta = _axis(cfg.grid_rho), _axis(cfg.grid_tau)
    ml = grid_ml_2d(y[: T + 1], start, ra, ta, cps)
    cell = {"rho": float(ra[1] - ra[0]), "tau": float(ta[1] - ta[0])}
    rd = _rep_dir(ctx.out)
    rows = []
    for (m, n) in combos:
        tr = []
        for idx, (mm, nn, r) in keys.items():
            if (mm, nn) != (m, n) or idx not in res.results:
                continue
            vals = res.results[idx]
            tr.append(vals)
            io.write_rows(rd / f"{m}_N{n}_r{r}.csv", ["iter_or_n", "rho", "tau2", "sigma2", "exact_loglik"],
                          [(int(c), float(v[0]), float(v[1]), float(v[2]), "") for c, v in zip(cps, vals)])
        if not tr:
            continue
        A = np.array(tr)
        for j, c in enumerate(cps):
            rows.append(_quantile_rows((int(c), m, n, "rho"), A[:, j, 0], ml[j][0], cell["rho"]))
            rows.append(_quantile_rows((int(c), m, n, "tau"), np.sqrt(A[:, j, 1]), ml[j][1], cell["tau"]))
    io.write_rows(ctx.out / "aggregate.csv", ["n", "method", "N", "param", "q25", "median", "q75", "min", "max",
                                              "grid_ml", "grid_cell"], rows)
    return res


def _grid_axes(cfg: ExperimentConfig) -> dict[str, np.ndarray]:
    axes = {"rho": _axis(cfg.grid_rho), "tau2": _axis(cfg.grid_tau2), "sigma2": _axis(cfg.grid_sigma2)}
    return {n: axes[n] for n in cfg.free}


def _exp_degeneracy(ctx: RunContext, y, x):
    cfg = ctx.cfg
    T = max(cfg.T)
    y = y[: T + 1]
    cps = _checkpoints(T, cfg.checkpoint_every)
    prior = PriorSpec()
    base = cfg.theta_star
    keys = {}
    for r in range(cfg.replicates):
        keys[ctx.add(_job_mws, r, 0, f"mws_N{cfg.N[0]}_r{r}", y=y, prior=prior, N=cfg.N[0], base=base,
                     free=base.free_mask, proposal=cfg.proposal, init_var=cfg.init_var)] = r
    res = ctx.run()
    gps = grid_posterior_path(prior, y, _grid_axes(cfg), cps, base, cfg.init_var)
    name = "tau2" if "tau2" in cfg.free else cfg.free[0]
    g_mean = np.array([g.mean(name) for g in gps])
    g_var = np.array([g.var(name) for g in gps])
    rd = _rep_dir(ctx.out)
    outs: list[SmcParamOutput] = []
    col = ("rho", "tau2", "sigma2").index(name)
    for idx, r in keys.items():
        if idx not in res.results:
            continue
        o = res.results[idx]
        outs.append(o)
        io.write_rows(rd / f"mws_r{r}.csv", ["n", f"post_mean_{name}", f"post_var_{name}", "loglik_hat",
                                              "unique_theta", "unique_ancestors"],
                      [(int(c), float(o.mean[c, col]), float(o.var[c, col]), float(o.loglik[c]),
                        int(o.unique_theta[c]), int(o.unique_ancestors[c])) for c in cps])
        ctx.counters["rho_mh_fallbacks"] = ctx.counters.get("rho_mh_fallbacks", 0) + \
            o.counters.get("rho_mh_fallbacks", 0)
    rows = []
    if outs:
        M = np.array([o.mean[cps, col] for o in outs])
        V = np.array([o.var[cps, col] for o in outs])
        L = np.array([o.loglik[cps] for o in outs])
        rv = M.var(axis=0, ddof=1) / g_var if len(outs) > 1 else np.zeros(cps.size)
        vl = L.var(axis=0, ddof=1) if len(outs) > 1 else np.zeros(cps.size)
        for j, c in enumerate(cps):
            rows.append((int(c), float(np.mean([o.unique_theta[c] for o in outs])),
                         float(np.mean([o.unique_ancestors[c] for o in outs])), float(rv[j]), float(vl[j]),
                         float(M[:, j].mean()), float(V[:, j].mean() / g_var[j]), float(g_mean[j]),
                         float(g_var[j])))
    io.write_rows(ctx.out / "aggregate.csv", ["n", "unique_theta", "unique_ancestors", f"rel_var_{name}",
                                              "var_loglik", f"mean_post_mean_{name}", "mean_var_ratio",
                                              f"grid_post_mean_{name}", f"grid_post_var_{name}"], rows)
    return res


def _posterior_rows(label, means, sds, gps, names, n):
    rows = []
    for k, name in enumerate(names):
        m = means[:, k]
        rows.append((n, label, name, float(m.mean()), float(m.std(ddof=1)) if m.size > 1 else 0.0,
                     float(np.mean(sds[:, k])), gps.mean(name), math.sqrt(gps.var(name))))
    return rows


def _exp_posterior_smc(ctx: RunContext, y, x):
    cfg = ctx.cfg
    T = max(cfg.T)
    y = y[: T + 1]
    cps = _checkpoints(T, cfg.checkpoint_every)
    prior = PriorSpec()
    base = cfg.theta_star
    keys = {}
    for r in range(cfg.replicates):
        keys[ctx.add(_job_mws, r, 0, f"mws_N{cfg.N[0]}_r{r}", y=y, prior=prior, N=cfg.N[0], base=base,
                     free=base.free_mask, proposal=cfg.proposal, init_var=cfg.init_var)] = r
    res = ctx.run()
    gps = grid_posterior_path(prior, y, _grid_axes(cfg), cps, base, cfg.init_var)
    cols = [("rho", "tau2", "sigma2").index(n) for n in cfg.free]
    rd = _rep_dir(ctx.out)
    outs = []
    for idx, r in keys.items():
        if idx not in res.results:
            continue
        o = res.results[idx]
        outs.append(o)
        hdr = ["n"] + [f"post_{s}_{n}" for n in cfg.free for s in ("mean", "sd")] + ["loglik_hat"]
        io.write_rows(rd / f"mws_r{r}.csv", hdr,
                      [(int(c), *[float(v) for k in cols for v in (o.mean[c, k], math.sqrt(o.var[c, k]))],
                        float(o.loglik[c])) for c in cps])
        ctx.counters["rho_mh_fallbacks"] = ctx.counters.get("rho_mh_fallbacks", 0) + \
            o.counters.get("rho_mh_fallbacks", 0)
    rows = []
    if outs:
        for j, c in enumerate(cps):
            means = np.array([o.mean[c, cols] for o in outs])
            sds = np.sqrt(np.array([o.var[c, cols] for o in outs]))
            rows += _posterior_rows("mcmc_within_smc", means, sds, gps[j], cfg.free, int(c))
    io.write_rows(ctx.out / "aggregate.csv", ["n", "method", "param", "mean_post_mean", "sd_post_mean",
                                              "mean_post_sd", "grid_mean", "grid_sd"], rows)
    return res


def _exp_pgibbs(ctx: RunContext, y, x):
    cfg = ctx.cfg
    T = max(cfg.T)
    y = y[: T + 1]
    prior = PriorSpec()
    base = cfg.theta_star
    keys = {}
    for r in range(cfg.replicates):
        keys[ctx.add(_job_pgibbs, r, 0, f"pgibbs_N{cfg.pg_N}_r{r}", y=y, prior=prior, N=cfg.pg_N,
                     iters=cfg.mcmc_iters, base=base, free=base.free_mask, init_var=cfg.init_var)] = ("pg", r)
    for r in range(cfg.replicates):
        keys[ctx.add(_job_mws, r, 1, f"mws_N{cfg.smc_N}_r{r}", y=y, prior=prior, N=cfg.smc_N, base=base,
                     free=base.free_mask, proposal=cfg.proposal, init_var=cfg.init_var)] = ("mws", r)
    res = ctx.run()
    gp = grid_posterior_path(prior, y, _grid_axes(cfg), [T], base, cfg.init_var)[0]
    cols = [("rho", "tau2", "sigma2").index(n) for n in cfg.free]
    burn = int(cfg.burn_in * cfg.mcmc_iters)
    rd = _rep_dir(ctx.out)
    per = {"pg": ([], []), "mws": ([], [])}
    for idx, (kind, r) in keys.items():
        if idx not in res.results:
            continue
        o = res.results[idx]
        if kind == "pg":
            o.to_csv(rd / f"pgibbs_r{r}.csv")
            th = o.thetas[burn + 1:, cols]
            per["pg"][0].append(th.mean(axis=0))
            per["pg"][1].append(th.std(axis=0))
        else:
            per["mws"][0].append(o.mean[T, cols])
            per["mws"][1].append(np.sqrt(o.var[T, cols]))
            io.write_rows(rd / f"mws_r{r}.csv", ["param", "post_mean", "post_sd"],
                          [(n, float(o.mean[T, k]), math.sqrt(o.var[T, k])) for n, k in zip(cfg.free, cols)])
    rows = []
    for kind, label in (("pg", "particle_gibbs"), ("mws", "mcmc_within_smc")):
        if per[kind][0]:
            rows += _posterior_rows(label, np.array(per[kind][0]), np.array(per[kind][1]), gp, cfg.free, T)
    io.write_rows(ctx.out / "aggregate.csv", ["n", "method", "param", "mean_post_mean", "sd_post_mean",
                                              "mean_post_sd", "grid_mean", "grid_sd"], rows)
    return res


def _exp_custom(ctx: RunContext, y, x):
    cfg = ctx.cfg
    T = min(max(cfg.T), y.size - 1) if not cfg.data_path else y.size - 1
    y = y[: T + 1]
    theta = cfg.theta_star
    model, opts = cfg.model(), cfg.options
    ll_exact = float(kalman_loglik(theta.rho, theta.tau2, theta.sigma2, y, init_var=cfg.init_var))
    s_exact = float(exact_additive(theta, y, cross_product())[0]) if cfg.init_var is None else float("nan")
    keys = {}
    combos = [(m, n) for m in cfg.methods for n in cfg.N]
    for v, (m, n) in enumerate(combos):
        for r in range(cfg.replicates):
            keys[ctx.add(_job_custom, r, v, f"{m}_N{n}_r{r}", y=y, theta=theta, N=n, method=m, model=model,
                         options=opts)] = (m, n, r)
    res = ctx.run()
    rd = _rep_dir(ctx.out)
    rows = []
    for idx, (m, n, r) in keys.items():
        if idx not in res.results:
            continue
        ll, s = res.results[idx]
        io.write_rows(rd / f"{m.replace(':', '-')}_N{n}_r{r}.csv", ["loglik_hat", "S_hat"], [(ll, s)])
        rows.append((m, n, r, ll, ll_exact, s, s_exact))
    io.write_rows(ctx.out / "aggregate.csv", ["method", "N", "replicate", "loglik_hat", "loglik_exact", "S_hat",
                                              "S_exact"], rows)
    return res


DRIVERS = {
    "smoothing_bias_var": _exp_smoothing,
    "offline_em": _exp_offline_em,
    "online_em": _exp_online_em,
    "degeneracy": _exp_degeneracy,
    "posterior_mcmc_smc": _exp_posterior_smc,
    "pgibbs_compare": _exp_pgibbs,
    "custom": _exp_custom,
}


def _version() -> str:
    try:
        return importlib_metadata.version("sspe")
    except importlib_metadata.PackageNotFoundError:
        return "unknown"


def run_experiment(cfg: ExperimentConfig, out) -> RunnerResult:
    """Run one experiment and write its result files into ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    y, x = dataset(cfg)
    if cfg.data_path is None:
        io.write_trajectory(out / "data.csv", simulate_lgssm(cfg.theta_star, max(cfg.T), cfg.data_seed,
                                                             init_var=cfg.init_var))
    ctx = RunContext(cfg, out)
    res = DRIVERS[cfg.experiment](ctx, y, x)
    meta = {
        "config": cfg.to_dict(),
        "code_version": _version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "rng": "Philox4x64; key = SeedSequence(seed, spawn_key=(replicate,)), per-variant child key, "
               "time step n uses counter word 3 = n",
        "replicate_seeds": {str(k): v for k, v in ctx.seeds.items()},
        "wall_clock_seconds": time.time() - t0,
        "counters": ctx.counters,
        "completed_jobs": len(res.results),
        "failed_jobs": len(res.failures),
        "notes": NOTES.get(cfg.experiment, ""),
    }
    io.write_json(out / "metadata.json", meta)
    if res.failures:
        io.write_json(out / "failures.json",
                      [{"job": i, "label": ctx.jobs[i].label, "error": e} for i, e in sorted(res.failures.items())])
    return res

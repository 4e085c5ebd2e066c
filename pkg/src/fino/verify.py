"""Monte Carlo checks of the noise-injected path construction.

Every check returns a :class:`VerifyReport`. Checks with several sub-tests
report the worst error as a fraction of its own tolerance, so ``statistic``
is compared against ``tolerance = 1``; the raw numbers and their individual
tolerances are listed in ``details``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import gaussian_kde

from .flow import FlowBatch, NoiseSchedule, TargetMode, VectorFieldNet, fino_loss, perturbed_flow, sample_action
from .nn import AdamState, ContractError, NonFiniteLossError, adam_step

ETA_GRID = (0.0, 0.05, 0.1, 0.3)
T_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)

# relative tolerances get this absolute floor so a zero target stays testable
_ABS_FLOOR = 1e-12


@dataclass(frozen=True)
class GaussianPath:
    """Conditional path N(t x_i, (1 - (1 - eta) t)^2 I)."""

    eta: float
    t: float
    x_i: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0 or not 0.0 <= self.t <= 1.0:
            raise ContractError("eta and t must lie in [0, 1]")
        object.__setattr__(self, "x_i", np.atleast_1d(np.asarray(self.x_i, dtype=np.float64)))

    @property
    def mean(self):
        return self.t * self.x_i

    @property
    def variance(self) -> float:
        return (1.0 - (1.0 - self.eta) * self.t) ** 2

    def log_pdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        d = len(self.x_i)
        r2 = np.sum((x - self.mean) ** 2, axis=-1)
        return -0.5 * r2 / self.variance - 0.5 * d * math.log(2 * math.pi * self.variance)


@dataclass
class VerifyReport:
    check: str
    statistic: float
    tolerance: float
    n_samples: int
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.statistic) and self.statistic <= self.tolerance)

    def to_record(self) -> dict:
        return {"check": self.check, "statistic": float(self.statistic), "tolerance": float(self.tolerance),
                "pass": self.passed, "n_samples": int(self.n_samples), "details": _plain(self.details)}

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def write_reports(reports, path) -> None:
    with open(path, "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


def _rel_err(value, target):
    return abs(value - target) / max(abs(target), _ABS_FLOOR)


def check_conditional_path(eta=ETA_GRID, t_grid=T_GRID, x_i=(1.0, -1.0), n_samples=10**6,
                           seed=0) -> VerifyReport:
    """Sample x_t + eps under the quadratic schedule and compare the first two moments.

    Mean tolerance is 4 standard errors of a unit-variance mean (4/sqrt(n));
    variance tolerance is 1% relative (the SE of a sample variance at
    n = 1e6 is about 0.14%).
    """
    if n_samples < 10**5:
        raise ContractError("check_conditional_path needs n_samples >= 1e5")
    etas = np.atleast_1d(eta)
    x_i = np.atleast_1d(np.asarray(x_i, dtype=np.float64))
    rng = np.random.default_rng(seed)
    mean_tol = 4.0 / math.sqrt(n_samples)
    rows, worst = [], 0.0
    for e in etas:
        sched = NoiseSchedule(float(e), variant="quadratic")
        for t in np.atleast_1d(t_grid):
            path = GaussianPath(float(e), float(t), x_i)
            x0 = rng.standard_normal((n_samples, len(x_i)))
            eps = rng.standard_normal((n_samples, len(x_i))) * sched.sigma(t)
            x = perturbed_flow(x0, np.broadcast_to(x_i, x0.shape), float(t), eps)
            mean_err = float(np.max(np.abs(x.mean(axis=0) - path.mean)))
            var_err = float(np.max([_rel_err(v, path.variance) for v in x.var(axis=0)]))
            score = max(mean_err / mean_tol, var_err / 0.01)
            worst = max(worst, score)
            rows.append({"eta": float(e), "t": float(t), "mean_error": mean_err, "mean_tol": mean_tol,
                         "var_rel_error": var_err, "var_tol": 0.01, "target_var": path.variance})
    return VerifyReport("conditional-path", worst, 1.0, n_samples, {"grid": rows})


def mixture_total_variance(points, t, sigma):
    """Closed-form trace covariance of an equal-weight mixture of N(t x_i, sigma^2 I)."""
    points = np.asarray(points, dtype=np.float64)
    n, d = points.shape
    means = t * points
    between = np.sum((means - means.mean(axis=0)) ** 2) / n
    return d * sigma**2 + between


def check_variance_ordering(points=((1, 1), (1, -1), (-1, 1), (-1, -1)), eta=ETA_GRID, t_grid=T_GRID,
                            n_samples=10**6, seed=0) -> VerifyReport:
    """FINO marginal variance dominates the flow-matching one.

    The closed form is compared with a Monte Carlo estimate (2% relative).
    Both paths share component picks and base noise, so the sampled
    difference has low variance as well.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or not 2 <= len(points) <= 64:
        raise ContractError("dataset must hold between 2 and 64 points")
    n, d = points.shape
    rng = np.random.default_rng(seed)
    rows, worst = [], 0.0
    for e in np.atleast_1d(eta):
        for t in np.atleast_1d(t_grid):
            s_fino, s_fm = 1.0 - (1.0 - e) * t, 1.0 - t
            cf_fino = mixture_total_variance(points, t, s_fino)
            cf_fm = mixture_total_variance(points, t, s_fm)
            comp = rng.integers(0, n, size=n_samples)
            z = rng.standard_normal((n_samples, d))
            centre = t * points[comp]
            mc_fino = float(np.sum((centre + s_fino * z).var(axis=0)))
            mc_fm = float(np.sum((centre + s_fm * z).var(axis=0)))
            agree = max(_rel_err(mc_fino, cf_fino), _rel_err(mc_fm, cf_fm))
            ordered = cf_fino >= cf_fm and mc_fino >= mc_fm - _ABS_FLOOR
            score = agree / 0.02 if ordered else np.inf
            worst = max(worst, score)
            rows.append({"eta": float(e), "t": float(t), "closed_fino": cf_fino, "closed_fm": cf_fm,
                         "mc_fino": mc_fino, "mc_fm": mc_fm, "difference": cf_fino - cf_fm,
                         "rel_error": agree, "ordered": ordered})
    return VerifyReport("variance-ordering", worst, 1.0, n_samples, {"n_points": n, "dim": d, "grid": rows})


def check_single_point_generation(eta=0.1, x_i=(0.5, -0.5), train_steps=3000, n_samples=10000, seed=0,
                                  batch_size=256, hidden=(64, 64), learning_rate=1e-3,
                                  flow_steps=10) -> VerifyReport:
    """Train a flow on a single action and inspect what it generates.

    Exact targets and the quadratic schedule are used; samples are not
    clamped. For eta > 0 the per-dimension std must be within 20% of eta;
    for eta = 0 it must fall below 0.05. The mean must be within 0.05.
    """
    x_i = np.atleast_1d(np.asarray(x_i, dtype=np.float64))
    d = len(x_i)
    rng = np.random.default_rng(seed)
    sched = NoiseSchedule(eta, variant="quadratic")
    net = VectorFieldNet(1, d, hidden=hidden, seed=seed)
    opt = AdamState.for_net(net.net, learning_rate)
    states, actions = np.zeros((batch_size, 1)), np.broadcast_to(x_i, (batch_size, d))
    try:
        for _ in range(train_steps):
            batch = FlowBatch.draw(states, actions, sched, rng)
            adam_step(net.net, opt, fino_loss(net, batch, sched, TargetMode.EXACT))
        x = sample_action(net, np.zeros(1), rng.standard_normal((n_samples, d)), flow_steps, clamp=False)
    except NonFiniteLossError as exc:
        return VerifyReport("single-point", np.inf, 1.0, n_samples, {"error": str(exc)})
    mean_err = float(np.max(np.abs(x.mean(axis=0) - x_i)))
    std = x.std(axis=0)
    if eta > 0:
        std_score = float(np.max(np.abs(std - eta))) / (0.2 * eta)
    else:
        std_score = float(np.max(std)) / 0.05
    score = max(mean_err / 0.05, std_score)
    return VerifyReport("single-point", score, 1.0, n_samples,
                        {"eta": eta, "x_i": x_i, "mean": x.mean(axis=0), "std": std,
                         "mean_error": mean_err, "train_steps": train_steps})


def _target_noise_grad_stats(net: VectorFieldNet, batch: FlowBatch, noise_std, n_draws, rng):
    xt = perturbed_flow(batch.x0, batch.x1, batch.t, np.zeros_like(batch.x0))
    out, cache = net.net.forward_cached(net.inputs(batch.t, batch.s, xt))
    target = batch.x1 - batch.x0
    n = len(target)
    clean, _ = net.net.backward(cache, 2.0 * (out - target) / n, need_input_grad=False)
    total = np.zeros_like(clean.flat)
    total_sq = np.zeros_like(clean.flat)
    for _ in range(n_draws):
        noisy = target + noise_std * rng.standard_normal(target.shape)
        g, _ = net.net.backward(cache, 2.0 * (out - noisy) / n, need_input_grad=False)
        total += g.flat
        total_sq += g.flat * g.flat
    mean = total / n_draws
    if n_draws > 1:
        var = np.maximum(total_sq / n_draws - mean * mean, 0.0) * n_draws / (n_draws - 1)
    else:
        var = np.zeros_like(mean)
    return clean.flat, mean, np.sqrt(var / n_draws)


def check_target_noise_noop(net: VectorFieldNet, batch: FlowBatch, noise_std=0.5, n_draws=10**5,
                            seed=0) -> VerifyReport:
    """Zero-mean noise on the regression target leaves the expected gradient unchanged.

    The noisy-target gradient averaged over ``n_draws`` draws is compared
    with the clean flow-matching gradient; the allowed gap is three times
    the norm of the per-parameter standard errors. With one draw the
    standard error cannot be estimated and is taken as 0, so any gap fails.
    """
    if n_draws < 1:
        raise ContractError("n_draws must be >= 1")
    clean, avg, se = _target_noise_grad_stats(net, batch, noise_std, n_draws, np.random.default_rng(seed))
    diff = float(np.linalg.norm(avg - clean))
    allowed = 3.0 * float(np.linalg.norm(se))
    if diff == 0.0:
        score = 0.0
    elif allowed == 0.0:
        score = np.inf
    else:
        score = diff / allowed
    return VerifyReport("target-noise", score, 1.0, n_draws,
                        {"difference_norm": diff, "three_se": allowed, "noise_std": noise_std,
                         "clean_grad_norm": float(np.linalg.norm(clean))})


@dataclass(frozen=True)
class GridSpec:
    x_min: float = -1.5
    x_max: float = 1.5
    y_min: float = -1.5
    y_max: float = 1.5
    nx: int = 121
    ny: int = 121

    def axes(self):
        return np.linspace(self.x_min, self.x_max, self.nx), np.linspace(self.y_min, self.y_max, self.ny)


def kde_density(samples, grid: GridSpec):
    """Gaussian KDE (Silverman bandwidth) of 2-D samples on the grid, shape (ny, nx).

    Degenerate sample sets (singular covariance, e.g. a point mass) fall
    back to an isotropic kernel one grid step wide.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != 2:
        raise ContractError("density export needs 2-D samples")
    xs, ys = grid.axes()
    gx, gy = np.meshgrid(xs, ys)
    pts = np.vstack([gx.ravel(), gy.ravel()])
    cov = np.cov(samples.T)
    if np.linalg.matrix_rank(cov, tol=1e-12) == 2:
        dens = gaussian_kde(samples.T, bw_method="silverman")(pts)
    else:
        h = max(xs[1] - xs[0], ys[1] - ys[0])
        uniq, counts = np.unique(samples, axis=0, return_counts=True)
        w = counts / counts.sum()
        r2 = ((pts[:, None, :] - uniq.T[:, :, None]) ** 2).sum(axis=0)
        dens = (w[:, None] * np.exp(-0.5 * r2 / h**2)).sum(axis=0) / (2 * np.pi * h**2)
    return dens.reshape(grid.ny, grid.nx)


def grid_mass(density, grid: GridSpec) -> float:
    xs, ys = grid.axes()
    return float(np.trapezoid(np.trapezoid(density, xs, axis=1), ys))


def export_log_density(source, grid: GridSpec = GridSpec(), n_samples=10000, state=None, seed=0):
    """Log-density rows (x, y, log p) of flow samples plus a normalisation report.

    ``source`` is a VectorFieldNet (sampled at ``state``) or an array of
    2-D samples. The report passes when the trapezoid mass is within 2% of 1.
    """
    if isinstance(source, VectorFieldNet):
        if source.action_dim != 2:
            raise ContractError("density export needs a 2-D action space")
        s = np.zeros(source.state_dim) if state is None else state
        z = np.random.default_rng(seed).standard_normal((n_samples, 2))
        samples = sample_action(source, s, z)
    else:
        samples = np.asarray(source, dtype=np.float64)
    dens = kde_density(samples, grid)
    xs, ys = grid.axes()
    gx, gy = np.meshgrid(xs, ys)
    logd = np.log(np.maximum(dens, np.finfo(float).tiny))
    rows = np.column_stack([gx.ravel(), gy.ravel(), logd.ravel()])
    mass = grid_mass(dens, grid)
    report = VerifyReport("log-density", abs(mass - 1.0), 0.02, len(samples), {"mass": mass})
    return rows, report


def write_density_csv(rows, path) -> None:
    np.savetxt(path, rows, delimiter=",", header="x,y,log_density", comments="", fmt="%.10g")


CHECKS = ("conditional-path", "variance-ordering", "single-point", "target-noise")


def default_noise_batch(seed=0, n=16, hidden=(16, 16)):
    """A small fixed net and batch for the target-noise check."""
    rng = np.random.default_rng(seed)
    net = VectorFieldNet(1, 2, hidden=hidden, seed=seed)
    batch = FlowBatch.draw(rng.standard_normal((n, 1)), rng.uniform(-1, 1, (n, 2)), NoiseSchedule(0.0), rng)
    return net, batch


def run_check(name, eta=None, seed=0, steps=None) -> VerifyReport:
    """Entry point shared by the CLI: one named check at default sizes."""
    if name == "conditional-path":
        return check_conditional_path(ETA_GRID if eta is None else eta, seed=seed)
    if name == "variance-ordering":
        return check_variance_ordering(eta=ETA_GRID if eta is None else eta, seed=seed)
    if name == "single-point":
        return check_single_point_generation(0.1 if eta is None else eta, seed=seed,
                                             **({} if steps is None else {"train_steps": steps}))
    if name == "target-noise":
        net, batch = default_noise_batch(seed)
        return check_target_noise_noop(net, batch, seed=seed)
    raise ContractError(f"unknown check {name!r}; expected one of {', '.join(CHECKS)}")

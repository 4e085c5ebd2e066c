"""Flow-matching pieces: probability paths, the noise-injected loss, Euler sampling."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .nn import ContractError, DenseNet, GradientBundle, NonFiniteLossError, grad


class ScheduleVariant(str, enum.Enum):
    QUADRATIC = "quadratic"
    SHIFTED_EXPONENTIAL = "shifted_exponential"


class TargetMode(str, enum.Enum):
    EXACT = "exact"  # x1 - (1 - eta) x0', x0' the standardised total noise
    PLAIN = "plain"  # x1 - x0


@dataclass(frozen=True)
class NoiseSchedule:
    eta: float = 0.1
    sigma_min: float = 0.0
    variant: ScheduleVariant = ScheduleVariant.SHIFTED_EXPONENTIAL

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ContractError(f"eta must lie in [0, 1], got {self.eta}")
        if self.sigma_min < 0:
            raise ContractError("sigma_min must be >= 0")
        object.__setattr__(self, "variant", ScheduleVariant(self.variant))

    def variance(self, t):
        t = _check_time(t)
        eta = self.eta
        if self.variant is ScheduleVariant.QUADRATIC:
            # clip tiny negative round-off; the polynomial is >= 0 on [0, 1]
            return np.maximum((eta * eta - 2.0 * eta) * t * t + 2.0 * eta * t, 0.0)
        return (eta * np.exp(5.0 * (t - 1.0))) ** 2

    def sigma(self, t):
        t = _check_time(t)
        if self.variant is ScheduleVariant.SHIFTED_EXPONENTIAL:
            return self.eta * np.exp(5.0 * (t - 1.0))
        return np.sqrt(self.variance(t))


def _check_time(t):
    t = np.asarray(t, dtype=np.float64)
    # NaN fails both comparisons, so this also rejects non-finite t
    if t.size and not (t.min() >= 0.0 and t.max() <= 1.0):
        raise ContractError("t must lie in [0, 1]")
    return t


def schedule_sigma(schedule: NoiseSchedule, t):
    """Standard deviation of the injected noise at time ``t``."""
    return schedule.sigma(t)


def _same_shape(*arrays):
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    if any(a.shape[-1] != arrays[0].shape[-1] for a in arrays):
        raise ContractError("dimension mismatch")
    return arrays


def _time_column(t, like):
    t = _check_time(t)
    if t.ndim == 0 or like.ndim == 1:
        return t
    return t.reshape(-1, *([1] * (like.ndim - 1)))


def interpolate(x0, x1, t):
    x0, x1 = _same_shape(x0, x1)
    t = _time_column(t, x0)
    return (1.0 - t) * x0 + t * x1


def perturbed_flow(x0, xi, t, eps):
    x0, xi, eps = _same_shape(x0, xi, eps)
    t = _time_column(t, x0)
    return t * xi + (1.0 - t) * x0 + eps


def canonical_flow(x0, xi, t, eta):
    if not 0.0 <= eta <= 1.0:
        raise ContractError("eta must lie in [0, 1]")
    x0, xi = _same_shape(x0, xi)
    t = _time_column(t, x0)
    return t * xi + (1.0 - (1.0 - eta) * t) * x0


def conditional_variance(eta, t):
    """Per-dimension variance of the noise-injected conditional path."""
    return (1.0 - (1.0 - eta) * np.asarray(t, dtype=np.float64)) ** 2


class VectorFieldNet:
    """v(t, s, x) as a DenseNet over the concatenation [t, s, x]."""

    def __init__(self, state_dim, action_dim, hidden=(64, 64), seed=0, net=None):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        in_dim = 1 + self.state_dim + self.action_dim
        self.net = net if net is not None else DenseNet([in_dim, *hidden, self.action_dim], seed=seed)
        if self.net.in_dim != in_dim or self.net.out_dim != self.action_dim:
            raise ContractError("vector field net has wrong input/output dims")

    def inputs(self, t, s, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        if s.shape[0] == 1 and x.shape[0] > 1:
            s = np.broadcast_to(s, (x.shape[0], s.shape[1]))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (x.shape[0], 1))
        return np.concatenate([t, s, x], axis=1)

    def __call__(self, t, s, x):
        return self.net.forward(self.inputs(t, s, x))

    def copy(self) -> "VectorFieldNet":
        return VectorFieldNet(self.state_dim, self.action_dim, net=self.net.copy())


@dataclass
class FlowBatch:
    x0: np.ndarray
    x1: np.ndarray
    s: np.ndarray
    t: np.ndarray
    eps: np.ndarray

    def __post_init__(self):
        n = len(self.x1)
        if not all(len(a) == n for a in (self.x0, self.s, self.t, self.eps)):
            raise ContractError("flow batch fields have unequal lengths")
        _check_time(self.t)

    @classmethod
    def draw(cls, states, actions, schedule: NoiseSchedule, rng: np.random.Generator) -> "FlowBatch":
        """Fresh base noise, times and schedule noise for a dataset minibatch."""
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        n, d = actions.shape
        x0 = rng.standard_normal((n, d))
        t = rng.uniform(0.0, 1.0, size=n)
        eps = rng.standard_normal((n, d)) * schedule.sigma(t)[:, None]
        return cls(x0=x0, x1=actions, s=np.atleast_2d(states), t=t, eps=eps)


def flow_target(batch: FlowBatch, schedule: NoiseSchedule, mode: TargetMode):
    """Regression target for the vector field.

    Plain mode is the straight-line velocity ``x1 - x0``. Exact mode writes
    the perturbed point as ``t x1 + sigma_t x0'`` with
    ``x0' = ((1 - t) x0 + eps) / sigma_t`` and returns ``x1 - (1 - eta) x0'``,
    the velocity of the Gaussian path N(t x1, sigma_t^2) at that point.
    With eps = 0 and eta = 0 both modes coincide.
    """
    mode = TargetMode(mode)
    if mode is TargetMode.PLAIN:
        return batch.x1 - batch.x0
    t = batch.t[:, None]
    total = np.sqrt((1.0 - t) ** 2 + schedule.variance(batch.t)[:, None])
    noise = (1.0 - t) * batch.x0 + batch.eps
    # sigma_t = 0 only at t = 1 with eta = 0, where the noise term is 0 too
    safe = total > 0
    x0c = np.where(safe, noise / np.where(safe, total, 1.0), batch.x0)
    return batch.x1 - (1.0 - schedule.eta) * x0c


def fino_loss(net: VectorFieldNet, batch: FlowBatch, schedule: NoiseSchedule,
              mode: TargetMode = TargetMode.PLAIN) -> GradientBundle:
    """Noise-injected flow-matching loss and its parameter gradient.

    The net is queried at the perturbed point ``x_t + eps``; the target is
    given by :func:`flow_target`.
    The loss is the batch mean of the squared residual norm.
    """
    xt = interpolate(batch.x0, batch.x1, batch.t) + batch.eps
    target = flow_target(batch, schedule, mode)
    inputs = net.inputs(batch.t, batch.s, xt)
    n = len(target)

    def loss_fn(out):
        resid = out - target
        return np.sum(resid * resid) / n, 2.0 * resid / n

    return grad(net.net, inputs, loss_fn)


def flow_matching_loss(net: VectorFieldNet, batch: FlowBatch) -> GradientBundle:
    """Plain behavior-cloning flow matching: no input noise, target x1 - x0."""
    clean = FlowBatch(batch.x0, batch.x1, batch.s, batch.t, np.zeros_like(batch.eps))
    return fino_loss(net, clean, NoiseSchedule(eta=0.0), TargetMode.PLAIN)


def integrate(net: VectorFieldNet, s, z, steps: int = 10):
    """Euler-integrate the field from t=0 to t=1 starting at ``z`` (no clamp)."""
    if steps < 1:
        raise ContractError("steps must be >= 1")
    x = np.array(np.atleast_2d(z), dtype=np.float64)
    if x.shape[1] != net.action_dim:
        raise ContractError("base noise has wrong dimension")
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    if s.shape[0] == 1 and x.shape[0] > 1:
        s = np.broadcast_to(s, (x.shape[0], s.shape[1]))
    dt = 1.0 / steps
    n, d = x.shape
    inp = np.empty((n, 1 + s.shape[1] + d))
    inp[:, 1:1 + s.shape[1]] = s
    for k in range(steps):
        inp[:, 0] = k * dt
        inp[:, -d:] = x
        x = x + dt * net.net.forward(inp)
    # NaN/inf propagate through the remaining steps, so one check suffices
    bad = ~np.isfinite(x).all(axis=1)
    if bad.any():
        raise NonFiniteLossError("non-finite value during Euler integration", int(np.argmax(bad)))
    return x


def sample_action(net: VectorFieldNet, s, z, steps: int = 10, clamp: bool = True):
    """Flow policy action(s) for base noise ``z``; clamped to [-1, 1] at the end.

    Accepts a single noise vector or a batch (one row per sample). A single
    state is broadcast across the batch.
    """
    z = np.asarray(z, dtype=np.float64)
    out = integrate(net, s, z, steps)
    if clamp:
        out = np.clip(out, -1.0, 1.0)
    return out[0] if z.ndim == 1 else out

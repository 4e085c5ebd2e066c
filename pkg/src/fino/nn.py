"""Small dense networks with hand-written backprop, Adam and Polyak averaging.

Everything here works on float64 numpy arrays with a leading batch axis.
Only the fixed loss forms used by the agent are needed, so instead of a
general autodiff graph each loss supplies ``d loss / d output`` and
:meth:`DenseNet.backward` pushes it through the layers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

CHECKPOINT_MAGIC = b"FINONET1"
CHECKPOINT_VERSION = 1


class ContractError(ValueError):
    """Raised when inputs violate an operation's shape or range contract."""


class NonFiniteLossError(FloatingPointError):
    """A loss (or its output gradient) became NaN/inf.

    ``batch_index`` is the first offending row, or -1 when the problem
    cannot be attributed to a single sample.
    """

    def __init__(self, message: str, batch_index: int = -1):
        super().__init__(f"{message} (batch index {batch_index})")
        self.batch_index = batch_index


def norm_cdf(x):
    """Standard normal CDF, exact erf form.

    torch's vectorised erf is used on a zero-copy view; it agrees with
    scipy.special.erf to 1 ulp and is an order of magnitude faster here.
    """
    x = np.asarray(x, dtype=np.float64)
    e = torch.special.erf(torch.from_numpy(x * _INV_SQRT2)).numpy()
    e += 1.0
    e *= 0.5
    return e


def gelu(x):
    return x * norm_cdf(x)


def gelu_grad(x, cdf=None):
    if cdf is None:
        cdf = norm_cdf(x)
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


class DenseNet:
    """Feed-forward net: GELU on hidden layers, identity on the output."""

    def __init__(self, layer_dims, seed=0, rng: np.random.Generator | None = None):
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2 or any(d <= 0 for d in layer_dims):
            raise ContractError(f"bad layer_dims {layer_dims}")
        self.layer_dims = layer_dims
        self._bind(np.zeros(self.n_params(layer_dims)))
        rng = rng if rng is not None else np.random.default_rng(seed)
        for w, (fan_in, fan_out) in zip(self.weights, zip(layer_dims[:-1], layer_dims[1:])):
            # uniform He-style fan-in scaling; biases start at zero
            bound = np.sqrt(6.0 / fan_in)
            w[...] = rng.uniform(-bound, bound, size=(fan_in, fan_out))

    @staticmethod
    def n_params(layer_dims) -> int:
        return sum(a * b + b for a, b in zip(layer_dims[:-1], layer_dims[1:]))

    def _bind(self, flat):
        # all parameters live in one vector; weights/biases are views into it
        self.flat = flat
        self.weights, self.biases = _split(flat, self.layer_dims)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def params(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_params(self, params) -> None:
        params = list(params)
        if len(params) != 2 * len(self.weights):
            raise ContractError("parameter count mismatch")
        for mine, new in zip(self.params, params):
            if np.shape(new) != mine.shape:
                raise ContractError("parameter shape mismatch")
            mine[...] = new

    def copy(self) -> "DenseNet":
        new = DenseNet.__new__(DenseNet)
        new.layer_dims = list(self.layer_dims)
        new._bind(self.flat.copy())
        return new

    def _check_input(self, x):
        if type(x) is not np.ndarray or x.dtype != np.float64:
            x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ContractError(f"input dim {x.shape[-1]} != {self.in_dim}")
        return x

    def forward(self, x):
        h = self._check_input(x)
        ws, bs = self.weights, self.biases
        for i in range(len(ws) - 1):
            h = h @ ws[i]
            h += bs[i]
            h *= norm_cdf(h)
        out = h @ ws[-1]
        out += bs[-1]
        return out

    __call__ = forward

    def forward_cached(self, x):
        """Forward pass that also returns the activations needed by backward."""
        x = self._check_input(x)
        if x.ndim == 1:
            x = x[None, :]
        inputs, pre = [], []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            if i < last:
                cdf = norm_cdf(z)
                pre.append((z, cdf))
                h = z * cdf
            else:
                h = z
        return h, (inputs, pre)

    def backward(self, cache, grad_out, need_input_grad=True):
        """Return (parameter grads in ``params`` order, grad w.r.t. input).

        The parameter grads are views into one flat vector, available as
        ``grads.flat`` via :class:`GradientBundle`.
        """
        inputs, pre = cache
        g = np.asarray(grad_out, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        n = len(self.weights)
        flat = np.empty_like(self.flat)
        gw, gb = _split(flat, self.layer_dims)
        for i in range(n - 1, -1, -1):
            if i < n - 1:
                g = g * gelu_grad(*pre[i])
            np.matmul(inputs[i].T, g, out=gw[i])
            np.sum(g, axis=0, out=gb[i])
            if i > 0 or need_input_grad:
                g = g @ self.weights[i].T
        grads = FlatGrads(x for pair in zip(gw, gb) for x in pair)
        grads.flat = flat
        return grads, g

    def save(self, path) -> None:
        Path(path).write_bytes(to_bytes(self))

    @classmethod
    def load(cls, path) -> "DenseNet":
        return from_bytes(Path(path).read_bytes())


class FlatGrads(list):
    """List of per-parameter gradients that also carries the flat vector."""

    flat: np.ndarray


def _split(flat, dims):
    weights, biases, k = [], [], 0
    for a, b in zip(dims[:-1], dims[1:]):
        weights.append(flat[k:k + a * b].reshape(a, b))
        k += a * b
        biases.append(flat[k:k + b])
        k += b
    return weights, biases


def _flatten(grads) -> np.ndarray:
    flat = getattr(grads, "flat", None)
    if flat is None:
        flat = np.concatenate([np.ravel(g) for g in grads])
    return flat


def forward(net: DenseNet, x):
    return net.forward(x)


@dataclass
class GradientBundle:
    grads: list
    loss: float

    def __post_init__(self):
        if not np.isfinite(self.loss):
            raise NonFiniteLossError("non-finite loss")


LossFn = Callable[[np.ndarray], tuple]


def grad(net: DenseNet, inputs, loss_fn: LossFn) -> GradientBundle:
    """Exact gradient of ``loss_fn(net(inputs))`` w.r.t. the parameters.

    ``loss_fn`` maps the (batch, out_dim) outputs to ``(loss, dloss_dout)``.
    """
    out, cache = net.forward_cached(inputs)
    loss, d_out = loss_fn(out)
    d_out = np.asarray(d_out, dtype=np.float64).reshape(out.shape)
    _raise_if_nonfinite(loss, out, d_out)
    grads, _ = net.backward(cache, d_out, need_input_grad=False)
    return GradientBundle(grads, float(loss))


def _raise_if_nonfinite(loss, *rowwise):
    if np.isfinite(loss) and all(np.isfinite(a).all() for a in rowwise):
        return
    for a in rowwise:
        bad = ~np.isfinite(a).reshape(a.shape[0], -1).all(axis=1)
        if bad.any():
            raise NonFiniteLossError("non-finite loss", int(np.argmax(bad)))
    raise NonFiniteLossError("non-finite loss")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net: DenseNet, learning_rate: float = 3e-4) -> "AdamState":
        return cls(m=np.zeros_like(net.flat), v=np.zeros_like(net.flat), learning_rate=learning_rate)


def adam_step(net: DenseNet, state: AdamState, grads: GradientBundle | list):
    """One in-place Adam update; returns ``(net, state)`` for chaining."""
    g_list = grads.grads if isinstance(grads, GradientBundle) else grads
    if len(g_list) != len(net.params):
        raise ContractError("gradient/parameter count mismatch")
    for g, p in zip(g_list, net.params):
        if np.shape(g) != p.shape:
            raise ContractError(f"gradient shape {np.shape(g)} != {p.shape}")
    if state.m.shape != net.flat.shape:
        raise ContractError("optimizer state does not match the network")
    g = _flatten(g_list)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    state.v += (1.0 - b2) * (g * g)
    m_hat = state.m / (1.0 - b1**state.step)
    v_hat = state.v / (1.0 - b2**state.step)
    net.flat -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return net, state


def polyak_update(target: DenseNet, online: DenseNet, tau: float) -> DenseNet:
    if not 0.0 < tau <= 1.0:
        raise ContractError(f"tau must be in (0, 1], got {tau}")
    if target.layer_dims != online.layer_dims:
        raise ContractError("architecture mismatch")
    if tau == 1.0:
        target.flat[...] = online.flat
    else:
        target.flat *= 1.0 - tau
        target.flat += tau * online.flat
    return target


def param_distance(a: DenseNet, b: DenseNet) -> float:
    return float(np.linalg.norm(a.flat - b.flat))


# -- checkpoint format ----------------------------------------------------
# magic(8) | version u32 | n_dims u32 | dims u32 * n | float64 LE params

def to_bytes(net: DenseNet) -> bytes:
    dims = net.layer_dims
    header = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims)
    body = net.flat.astype("<f8").tobytes()
    return header + body


def from_bytes(data: bytes) -> DenseNet:
    if data[:8] != CHECKPOINT_MAGIC:
        raise ContractError("not a network checkpoint")
    version, n = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    dims = list(struct.unpack_from(f"<{n}I", data, 16))
    offset = 16 + 4 * n
    count = DenseNet.n_params(dims)
    if len(data) != offset + 8 * count:
        raise ContractError("checkpoint size does not match its layer dims")
    net = DenseNet.__new__(DenseNet)
    net.layer_dims = dims
    net._bind(np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64))
    return net

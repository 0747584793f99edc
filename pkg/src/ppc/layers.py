"""Parameterized layers: dense, 1-D conv blocks, GRU cell, mean-variance head.

All layers hold their parameters as ``autodiff.Tensor`` leaves with
``requires_grad=True`` and expose them through ``parameters()`` as
``(name, tensor)`` pairs.  Forward passes must run inside an active
``Tape`` to be differentiable.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

ACTIVATIONS = ("linear", "relu", "sigmoid", "exponential")


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator for parameter initialization (Philox keyed by seed)."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _apply_activation(x: Tensor, activation: str) -> Tensor:
    if activation == "linear":
        return x
    if activation == "relu":
        return ad.relu(x)
    if activation == "sigmoid":
        return ad.sigmoid(x)
    if activation == "exponential":
        return ad.exp(x)
    raise ConfigError(f"unknown activation {activation!r}")


class DenseLayer:
    """Fully connected layer: ``activation(x @ W + b)``."""

    def __init__(self, in_size: int, out_size: int, activation: str = "linear",
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        self.in_size = in_size
        self.out_size = out_size
        self.activation = activation
        self.dtype = dtype
        self.initialize(rng or make_rng(0))

    def initialize(self, rng: np.random.Generator) -> None:
        self.weights = Tensor(
            glorot_uniform(rng, self.in_size, self.out_size, (self.in_size, self.out_size), self.dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(self.out_size, dtype=self.dtype), requires_grad=True)

    def parameters(self):
        return [("weights", self.weights), ("bias", self.bias)]

    def preactivation(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weights), self.bias)

    def forward(self, x: Tensor) -> Tensor:
        return _apply_activation(self.preactivation(x), self.activation)


class Conv1dBlock:
    """Encoder block: conv (same padding), ReLU, optional BatchNorm, MaxPool."""

    def __init__(self, in_channels: int, filters: int, kernel_size: int, pool_size: int,
                 batchnorm: bool = True, rng: np.random.Generator | None = None,
                 dtype=np.float32, bn_momentum: float = 0.99, bn_eps: float = 1e-5):
        if kernel_size % 2 == 0 or kernel_size < 1:
            raise ConfigError(f"kernel_size must be odd and positive, got {kernel_size}")
        if pool_size < 1:
            raise ConfigError(f"pool_size must be positive, got {pool_size}")
        self.in_channels = in_channels
        self.filters = filters
        self.kernel_size = kernel_size
        self.pool_size = pool_size
        self.has_batchnorm = batchnorm
        self.bn_momentum = bn_momentum
        self.bn_eps = bn_eps
        self.dtype = dtype
        self.initialize(rng or make_rng(0))

    def initialize(self, rng: np.random.Generator) -> None:
        f, c, k = self.filters, self.in_channels, self.kernel_size
        self.kernel = Tensor(glorot_uniform(rng, c * k, f * k, (f, c, k), self.dtype), requires_grad=True)
        self.conv_bias = Tensor(np.zeros((1, f, 1), dtype=self.dtype), requires_grad=True)
        if self.has_batchnorm:
            self.gamma = Tensor(np.ones(f, dtype=self.dtype), requires_grad=True)
            self.beta = Tensor(np.zeros(f, dtype=self.dtype), requires_grad=True)
            self.running_mean = np.zeros(f, dtype=self.dtype)
            self.running_var = np.ones(f, dtype=self.dtype)

    def parameters(self):
        ps = [("kernel", self.kernel), ("conv_bias", self.conv_bias)]
        if self.has_batchnorm:
            ps += [("gamma", self.gamma), ("beta", self.beta)]
        return ps

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        h = ad.relu(ad.add(ad.conv1d(x, self.kernel), self.conv_bias))
        if self.has_batchnorm:
            if training:
                h, mean, var = ad.batchnorm(h, self.gamma, self.beta, training=True, eps=self.bn_eps)
                m = self.bn_momentum
                self.running_mean = (m * self.running_mean + (1 - m) * mean).astype(self.dtype)
                self.running_var = (m * self.running_var + (1 - m) * var).astype(self.dtype)
            else:
                h = ad.batchnorm(
                    h, self.gamma, self.beta, training=False,
                    running_mean=self.running_mean, running_var=self.running_var,
                    eps=self.bn_eps,
                )
        return ad.maxpool1d(h, self.pool_size)


class UpsampleBlock:
    """Decoder block: conv (same padding), ReLU, nearest-neighbour upsample."""

    def __init__(self, in_channels: int, filters: int, kernel_size: int, factor: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if kernel_size % 2 == 0 or kernel_size < 1:
            raise ConfigError(f"kernel_size must be odd and positive, got {kernel_size}")
        self.in_channels = in_channels
        self.filters = filters
        self.kernel_size = kernel_size
        self.factor = factor
        self.dtype = dtype
        self.initialize(rng or make_rng(0))

    def initialize(self, rng: np.random.Generator) -> None:
        f, c, k = self.filters, self.in_channels, self.kernel_size
        self.kernel = Tensor(glorot_uniform(rng, c * k, f * k, (f, c, k), self.dtype), requires_grad=True)
        self.conv_bias = Tensor(np.zeros((1, f, 1), dtype=self.dtype), requires_grad=True)

    def parameters(self):
        return [("kernel", self.kernel), ("conv_bias", self.conv_bias)]

    def forward(self, x: Tensor) -> Tensor:
        h = ad.relu(ad.add(ad.conv1d(x, self.kernel), self.conv_bias))
        return ad.nearest_upsample1d(h, self.factor)


class Conv1dLayer:
    """Plain same-padded conv with an activation (decoder output layer)."""

    def __init__(self, in_channels: int, filters: int, kernel_size: int, activation: str = "linear",
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if kernel_size % 2 == 0 or kernel_size < 1:
            raise ConfigError(f"kernel_size must be odd and positive, got {kernel_size}")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        self.in_channels = in_channels
        self.filters = filters
        self.kernel_size = kernel_size
        self.activation = activation
        self.dtype = dtype
        self.initialize(rng or make_rng(0))

    def initialize(self, rng: np.random.Generator) -> None:
        f, c, k = self.filters, self.in_channels, self.kernel_size
        self.kernel = Tensor(glorot_uniform(rng, c * k, f * k, (f, c, k), self.dtype), requires_grad=True)
        self.conv_bias = Tensor(np.zeros((1, f, 1), dtype=self.dtype), requires_grad=True)

    def parameters(self):
        return [("kernel", self.kernel), ("conv_bias", self.conv_bias)]

    def forward(self, x: Tensor) -> Tensor:
        return _apply_activation(ad.add(ad.conv1d(x, self.kernel), self.conv_bias), self.activation)


class GruCell:
    """Gated recurrent unit cell.

    Update u = sigmoid([x,h] Wu + bu), reset r = sigmoid([x,h] Wr + br),
    candidate = tanh([x, r*h] Wc + bc), h' = u*h + (1-u)*candidate.
    The reset gate is applied to the hidden state before the candidate's
    weight matrix.
    """

    def __init__(self, input_size: int, hidden_size: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.dtype = dtype
        self.initialize(rng or make_rng(0))

    def initialize(self, rng: np.random.Generator) -> None:
        n_in = self.input_size + self.hidden_size
        h = self.hidden_size

        def w():
            return Tensor(glorot_uniform(rng, n_in, h, (n_in, h), self.dtype), requires_grad=True)

        def b():
            return Tensor(np.zeros(h, dtype=self.dtype), requires_grad=True)

        self.w_update, self.b_update = w(), b()
        self.w_reset, self.b_reset = w(), b()
        self.w_candidate, self.b_candidate = w(), b()

    def parameters(self):
        return [
            ("w_update", self.w_update), ("b_update", self.b_update),
            ("w_reset", self.w_reset), ("b_reset", self.b_reset),
            ("w_candidate", self.w_candidate), ("b_candidate", self.b_candidate),
        ]

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        if x.shape[-1] != self.input_size or h.shape[-1] != self.hidden_size:
            raise ad.ShapeError(
                f"gru_step: expected input {self.input_size} and hidden {self.hidden_size}, "
                f"got {x.shape} and {h.shape}"
            )
        xh = ad.concat([x, h], axis=1)
        u = ad.sigmoid(ad.add(ad.matmul(xh, self.w_update), self.b_update))
        r = ad.sigmoid(ad.add(ad.matmul(xh, self.w_reset), self.b_reset))
        xrh = ad.concat([x, ad.mul(r, h)], axis=1)
        cand = ad.tanh(ad.add(ad.matmul(xrh, self.w_candidate), self.b_candidate))
        one = Tensor(np.asarray(1.0, dtype=u.dtype))
        return ad.add(ad.mul(u, h), ad.mul(ad.sub(one, u), cand))

    def initial_state(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.hidden_size), dtype=self.dtype))

    def run(self, xs: list[Tensor]) -> Tensor:
        """Run the cell over a sequence; returns the last hidden state."""
        h = self.initial_state(xs[0].shape[0])
        for x in xs:
            h = self.step(x, h)
        return h


def gru_step(cell: GruCell, x: Tensor, h: Tensor) -> Tensor:
    return cell.step(x, h)


class MveHead:
    """Paired output layers: Gaussian mean (linear) and std (exponential).

    The std branch works in log-space internally: ``preactivations`` returns
    the raw pre-activation ``s`` with ``sigma = exp(s)``, which keeps the
    training loss free of overflow for large ``s``.
    """

    def __init__(self, in_size: int, latent_size: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or make_rng(0)
        self.in_size = in_size
        self.latent_size = latent_size
        self.mean_layer = DenseLayer(in_size, latent_size, "linear", rng, dtype)
        self.std_layer = DenseLayer(in_size, latent_size, "exponential", rng, dtype)

    def initialize(self, rng: np.random.Generator) -> None:
        self.mean_layer.initialize(rng)
        self.std_layer.initialize(rng)

    def parameters(self):
        return (
            [("mean_layer." + n, t) for n, t in self.mean_layer.parameters()]
            + [("std_layer." + n, t) for n, t in self.std_layer.parameters()]
        )

    def preactivations(self, c: Tensor) -> tuple[Tensor, Tensor]:
        """Return (z_hat, log_sigma) as graph tensors."""
        return self.mean_layer.forward(c), self.std_layer.preactivation(c)

    def forward(self, c: Tensor) -> tuple[np.ndarray, np.ndarray]:
        """Return (z_hat, sigma) values; sigma is strictly positive."""
        z_hat, log_sigma = self.preactivations(c)
        # exponentiate at 64-bit with the argument clipped to +-700 so sigma
        # stays finite and strictly positive for any finite pre-activation
        s = np.clip(log_sigma.data.astype(np.float64), -700.0, 700.0)
        return z_hat.data, np.exp(s)


def init_parameters(layers, seed: int) -> None:
    """Re-initialize every layer in ``layers`` from one seeded stream.

    Glorot-uniform weights, zero biases; bit-identical for equal seeds.
    """
    rng = make_rng(seed)
    for layer in layers:
        layer.initialize(rng)

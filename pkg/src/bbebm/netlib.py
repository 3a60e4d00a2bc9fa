"""Network definitions: MLP generator, MLP energy, discriminator, coupling-flow
energy, parameter initialization, output-noise sampling and the Adam optimizer.
"""
from __future__ import annotations

import numpy as np

from . import diffkernel as dk
from .diffkernel import Tensor

ACTIVATIONS = {
    "softplus": dk.softplus,
    "tanh": dk.tanh,
    "leaky_relu": dk.leaky_relu,
    "elu": dk.elu,
}


def fan_in_uniform(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class MLP:
    """Fully connected net; hidden activations only, linear output layer.

    Weights start U(+-1/sqrt(fan_in)), biases at zero; the tight start matters
    for the minimax dynamics (a broad initial generator skips the early
    well-digging phase entirely).
    """

    def __init__(self, widths, activation, rng):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; choose from {sorted(ACTIVATIONS)}")
        self.widths = list(widths)
        self.activation = activation
        self.layers = []
        for din, dout in zip(widths[:-1], widths[1:]):
            w = Tensor(fan_in_uniform(rng, din, dout), requires_grad=True)
            b = Tensor(np.zeros(dout), requires_grad=True)
            self.layers.append((w, b))

    def apply(self, x):
        act = ACTIVATIONS[self.activation]
        h = x
        for i, (w, b) in enumerate(self.layers):
            h = dk.affine(h, w, b)
            if i < len(self.layers) - 1:
                h = act(h)
        return h

    def params(self, prefix=""):
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"{prefix}l{i}.w"] = w
            out[f"{prefix}l{i}.b"] = b
        return out


class Generator:
    """Latent-to-data map plus Gaussian output noise.

    No hidden layer may be narrower than the latent dimension, which keeps a
    full-rank Jacobian attainable.
    """

    def __init__(self, widths, activation="leaky_relu", sigma_noise=0.01, rng=None):
        d = widths[0]
        for w in widths[1:-1]:
            if w < d:
                raise ValueError(f"hidden width {w} below latent dimension {d}")
        if sigma_noise < 0:
            raise ValueError("sigma_noise must be >= 0")
        self.latent_dim = d
        self.data_dim = widths[-1]
        self.sigma_noise = float(sigma_noise)
        self.net = MLP(widths, activation, rng or np.random.default_rng())

    def apply(self, z):
        """Noise-free map G(z); z is a (N, d) tensor or array."""
        if not isinstance(z, Tensor):
            z = Tensor(z)
        return self.net.apply(z)

    def params(self):
        return self.net.params("gen.")

    def arch(self):
        return {"kind": "generator", "widths": self.net.widths,
                "activation": self.net.activation, "sigma_noise": self.sigma_noise}


def sample_generator(gen, z, rng):
    """Draw x = G(z) + eps with eps ~ N(0, sigma_noise^2 I), eps from ``rng``.

    Keeps the graph through G, so the result can be differentiated with
    respect to the generator parameters; the noise enters as a constant.
    """
    y = gen.apply(z)
    if gen.sigma_noise == 0.0:
        return y
    eps = gen.sigma_noise * rng.standard_normal(size=y.shape)
    return y + Tensor(eps)


class MLPEnergy:
    """Scalar energy over an MLP.

    Leaky-ReLU hidden units by default: the energy must grow at infinity to
    contain entropy maximization, and one-sided activations (softplus, ELU)
    hand the surface a runaway uniform-inflation mode under minimax play.
    Smooth choices (softplus, tanh) remain available where a continuous
    input gradient matters more.
    """

    variant = "mlp"

    def __init__(self, widths, activation="leaky_relu", rng=None, time_conditioned=False):
        if widths[-1] != 1:
            raise ValueError("energy net must end in a single output unit")
        self.net = MLP(widths, activation, rng or np.random.default_rng())
        self.time_conditioned = time_conditioned

    def energy(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        return dk.reshape(self.net.apply(x), (x.shape[0],))

    def params(self):
        return self.net.params("energy.")

    def arch(self):
        return {"kind": "mlp_energy", "widths": self.net.widths,
                "activation": self.net.activation,
                "time_conditioned": self.time_conditioned}


class CouplingLayer:
    """One affine coupling step on masked coordinates.

    The scale output is soft-clamped through ``clamp * tanh(raw / clamp)`` and
    the conditioner is zero-initialized in its last layer, so the layer starts
    as the identity map.
    """

    def __init__(self, dim, mask, hidden, clamp, rng):
        self.mask = np.asarray(mask, dtype=np.float64)  # 1 = pass-through coords
        self.clamp = float(clamp)
        self.net = MLP([dim] + list(hidden) + [2 * dim], "tanh", rng)
        w_last, b_last = self.net.layers[-1]
        w_last.data[:] = 0.0
        b_last.data[:] = 0.0

    def _scale_shift(self, passive):
        dim = passive.shape[1]
        raw = self.net.apply(passive)
        s_raw = dk.narrow(raw, 1, 0, dim)
        t = dk.narrow(raw, 1, dim, 2 * dim)
        s = self.clamp * dk.tanh(s_raw * (1.0 / self.clamp))
        return s, t

    def forward(self, x):
        """Returns (y, per-row log|det|)."""
        keep = Tensor(self.mask)
        move = Tensor(1.0 - self.mask)
        passive = x * keep
        s, t = self._scale_shift(passive)
        y = passive + move * (x * dk.exp(s) + t)
        logdet = (move * s).sum(axis=1)
        return y, logdet

    def inverse(self, y):
        keep = Tensor(self.mask)
        move = Tensor(1.0 - self.mask)
        passive = y * keep
        s, t = self._scale_shift(passive)
        return passive + move * ((y - t) * dk.exp(-s))


class CouplingFlowEnergy:
    """Exactly normalized energy E(x) = -log p(x) through an invertible map.

    The log-density is the standard-normal log-pdf of the transformed point
    plus the accumulated coupling log-determinants, so the partition function
    is exactly one and the model NLL is exact.
    """

    variant = "coupling_flow"

    def __init__(self, dim=2, n_layers=6, hidden=(64, 64), clamp=4.0, rng=None,
                 time_conditioned=False):
        rng = rng or np.random.default_rng()
        self.dim = dim
        self.clamp = float(clamp)
        self.hidden = tuple(hidden)
        self.layers = []
        for i in range(n_layers):
            mask = np.zeros(dim)
            mask[i % 2::2] = 1.0  # alternate which coordinates pass through
            self.layers.append(CouplingLayer(dim, mask, hidden, clamp, rng))
        self.time_conditioned = time_conditioned

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        logdet = Tensor(np.zeros(x.shape[0]))
        h = x
        for layer in self.layers:
            h, ld = layer.forward(h)
            logdet = logdet + ld
        return h, logdet

    def inverse(self, y):
        if not isinstance(y, Tensor):
            y = Tensor(y)
        h = y
        for layer in reversed(self.layers):
            h = layer.inverse(h)
        return h

    def logprob(self, x):
        h, logdet = self.forward(x)
        lp = dk.standard_normal_logpdf_rows(h) + logdet
        if not np.all(np.isfinite(lp.data)):
            raise FloatingPointError("flow log-density overflowed: scale explosion")
        return lp

    def energy(self, x):
        return -self.logprob(x)

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.net.params(f"energy.c{i}."))
        return out

    def arch(self):
        return {"kind": "coupling_flow_energy", "dim": self.dim,
                "n_layers": len(self.layers), "hidden": list(self.hidden),
                "clamp": self.clamp, "time_conditioned": self.time_conditioned}


def flow_logprob(flow, x):
    """Exact log-density of a coupling-flow energy at a batch of points."""
    if flow.variant != "coupling_flow":
        raise ValueError("flow_logprob needs the coupling_flow energy variant")
    return flow.logprob(x)


class Discriminator:
    """Scalar critic T(x, z) over concatenated pairs, for the mutual-information bound."""

    def __init__(self, x_dim, z_dim, hidden=(128, 128), activation="leaky_relu", rng=None):
        self.x_dim = x_dim
        self.z_dim = z_dim
        self.net = MLP([x_dim + z_dim] + list(hidden) + [1], activation, rng or np.random.default_rng())

    def score(self, x, z):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if not isinstance(z, Tensor):
            z = Tensor(z)
        h = dk.concat([x, z], axis=1)
        return dk.reshape(self.net.apply(h), (x.shape[0],))

    def params(self):
        return self.net.params("disc.")

    def arch(self):
        return {"kind": "discriminator", "widths": self.net.widths,
                "activation": self.net.activation}


class Adam:
    """Adam with bias correction; a non-finite gradient skips the step."""

    def __init__(self, params, lr=2e-4, beta1=0.0, beta2=0.9, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads):
        """Apply one update from a name->ndarray gradient dict.

        Returns False (and leaves parameters, moments and the step counter
        untouched) if any gradient is non-finite.
        """
        for k in self.params:
            if not np.all(np.isfinite(grads[k])):
                return False
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True

    def state(self):
        out = {"t": np.asarray([float(self.t)])}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state(self, state):
        self.t = int(state["t"][0])
        for k in self.params:
            self.m[k] = np.array(state[f"m.{k}"], dtype=np.float64).reshape(self.m[k].shape)
            self.v[k] = np.array(state[f"v.{k}"], dtype=np.float64).reshape(self.v[k].shape)


def adam_step(opt, grads):
    """Free-function alias for a single optimizer update."""
    return opt.step(grads)

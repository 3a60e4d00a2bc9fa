"""The four bound objectives that sandwich the negative log-likelihood.

Lower bounds come from the generator entropy, estimated either through the
Jacobian's smallest singular value (``sv``) or a discriminator-based
mutual-information surrogate (``mi``).  Upper bounds add a non-negative
penalty on top of the lower bound: a hinged gradient penalty in latent
coordinates (``gp``) or a denoising score-matching penalty over a
variance-exploding diffusion (``diff``).  A zero-centered gradient penalty is
included as a baseline substitute that carries no bound guarantee.

Every objective returns a differentiable scalar loss plus diagnostics; which
parameters receive the gradient is the caller's choice of vjp targets.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffkernel as dk
from . import sde as sde_mod
from . import spectral
from .diffkernel import Tensor
from .sde import T_EPS, VESchedule
from .spectral import SpectralConfig


def base_entropy(d):
    """Closed-form entropy of the standard-normal latent, (d/2)(1 + log 2 pi)."""
    return 0.5 * d * (1.0 + np.log(2.0 * np.pi))


def noise_conditional_entropy(data_dim, sigma_noise):
    """Entropy of the Gaussian output noise given the latent."""
    if sigma_noise <= 0:
        raise ValueError("the mutual-information bound needs sigma_noise > 0")
    return 0.5 * data_dim * np.log(2.0 * np.pi * np.e * sigma_noise ** 2)


@dataclass
class Ms1Schedule:
    """Support-volume-to-s1^2 ratio for the gradient penalty: fixed or decaying.

    In decay mode the tracked value a (b + i)^-gamma runs from ``start`` down
    to ``end`` over the configured iteration count; the penalty coefficient is
    half of it.  (a, b) come from the two endpoint equations in closed form.
    """

    mode: str = "fixed"
    ratio: float = 0.05
    a: float = 0.0
    b: float = 0.0
    gamma: float = 0.55

    @staticmethod
    def fixed(ratio):
        return Ms1Schedule(mode="fixed", ratio=ratio)

    @staticmethod
    def fixed_for_dim(latent_dim):
        return Ms1Schedule.fixed(0.1 / latent_dim)

    @staticmethod
    def decay(iterations, start=0.01, end=1e-4, gamma=0.55):
        if iterations <= 0:
            raise ValueError("decay schedule needs a positive iteration count")
        c = (start / end) ** (1.0 / gamma)
        b = iterations / (c - 1.0)
        a = start * b ** gamma
        return Ms1Schedule(mode="decay", a=a, b=b, gamma=gamma)

    def decay_value(self, iteration):
        if self.mode != "decay":
            raise ValueError("decay_value only applies to decay mode")
        return self.a * (self.b + iteration) ** (-self.gamma)

    def coefficient(self, iteration):
        if self.mode == "fixed":
            return self.ratio
        return 0.5 * self.decay_value(iteration)


@dataclass
class BoundSpec:
    """Selection of one lower and one upper bound with their hyper-parameters."""

    lower: str = "sv"                   # sv | mi
    upper: str = "gp"                   # gp | diff | 0gp | none
    lam: float = 1.0                    # entropy-regularizer weight
    zeta: float = 1.0                   # hinge margin of the gp penalty
    p: int = 2                          # penalty exponent; only 2 is supported
    ms1: Ms1Schedule = field(default_factory=lambda: Ms1Schedule.fixed_for_dim(2))
    spectral_cfg: SpectralConfig = field(default_factory=lambda: SpectralConfig())
    sched: VESchedule | None = None     # required when upper == diff
    gp_weight_0gp: float = 1.0
    lambda_logdet: float = 0.0          # weight of the log-det part of grad_z log p_g
    gp_probes: int = 1

    def __post_init__(self):
        if self.lower not in ("sv", "mi"):
            raise ValueError(f"unknown lower bound {self.lower!r}")
        if self.upper not in ("gp", "diff", "0gp", "none"):
            raise ValueError(f"unknown upper bound {self.upper!r}")
        if self.lam < 0 or self.zeta < 0:
            raise ValueError("lam and zeta must be >= 0")
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.upper == "gp" and self.p != 2:
            raise ValueError("the gradient-penalty bound is implemented for p = 2 only")
        if self.upper == "diff" and self.sched is None:
            self.sched = VESchedule()


@dataclass
class BoundValue:
    loss: Tensor
    diagnostics: dict


def _energy_of(energy):
    return energy.energy if hasattr(energy, "energy") else energy


def _energy_means(e_fn, data_x, x_gen):
    """Mean energies of the data and generated batches from one stacked pass."""
    n = len(data_x)
    rows = e_fn(dk.concat([Tensor(data_x), x_gen], axis=0))
    return dk.narrow(rows, 0, 0, n).mean(), dk.narrow(rows, 0, n, n + x_gen.shape[0]).mean()


def _differentiable_entropy_rows(y, zt, result, d):
    """Recordable d*log s1 rows from a finished spectral estimate.

    The minimizing direction (or the probe set, in the zero-iteration
    fallback) is treated as constant; the gradient flows through |J v| only.
    A tiny epsilon inside the norm keeps collapsed rows finite, so training
    can push back out of a rank-deficient Jacobian instead of dying on it.
    """
    if result.v_min is not None:
        jv = dk.jvp(y, zt, result.v_min, create_graph=True)
        return float(d) * dk.log(dk.rows_norm(jv, eps=1e-24))
    k = result.probes.shape[0]
    acc = None
    for i in range(k):
        jv = dk.jvp(y, zt, result.probes[i], create_graph=True)
        sq = (jv * jv).sum(axis=1)
        acc = sq if acc is None else acc + sq
    t_hat = acc * (1.0 / k) + 1e-24
    return 0.5 * d * (dk.log(t_hat) - np.log(d))


def lower_sv(energy, gen, data_x, z, spec, rng, entropy_mode="grad", entropy_rng=None):
    """Singular-value lower bound on the negative log-likelihood.

    mean E(data) - mean E(G(z)+eps) + H[p0] + lam * d * mean log s1(z).
    ``entropy_mode``: "grad" records the entropy term, "detached" evaluates it
    as a constant, "skip" omits it (for objective-only energy phases).
    ``entropy_rng`` lets the caller divert the spectral draws to a side
    stream, keeping main-stream consumption independent of the mode.
    """
    e_fn = _energy_of(energy)
    d = gen.latent_dim
    zt = Tensor(np.asarray(z, dtype=np.float64), requires_grad=True)
    y = gen.apply(zt)
    eps = gen.sigma_noise * rng.standard_normal(size=y.shape)
    x_gen = y + Tensor(eps)

    e_data, e_gen = _energy_means(e_fn, np.asarray(data_x, dtype=np.float64), x_gen)
    h0 = base_entropy(d)

    diagnostics = {"energy_data": float(e_data.data), "energy_gen": float(e_gen.data),
                   "penalty_term": 0.0, "hinge_active": False}

    if entropy_mode == "skip":
        loss = e_data - e_gen + h0
        diagnostics.update({"entropy_term": float("nan"), "s1_mean": float("nan")})
        return BoundValue(loss, diagnostics)

    result = spectral.smallest_singular_value(gen, z, spec.spectral_cfg,
                                              entropy_rng or rng, graph=(zt, y),
                                              degenerate="floor")
    if entropy_mode == "grad":
        ent_rows = _differentiable_entropy_rows(y, zt, result, d)
        ent = ent_rows.mean()
    else:
        ent = Tensor(float(d * np.mean(np.log(result.s1_estimate))))
    loss = e_data - e_gen + h0 + spec.lam * ent
    diagnostics.update({
        "entropy_term": h0 + spec.lam * float(ent.data),
        "s1_mean": float(np.mean(result.s1_estimate)),
        "degenerate_rows": int((result.s1_estimate <= 1.01e-7).sum()),
    })
    return BoundValue(loss, diagnostics)


def lower_mi(energy, gen, disc, data_x, z, spec, rng):
    """Mutual-information lower bound via a Jensen-Shannon critic.

    Returns (generator_objective, discriminator_loss).  The critic losses use
    joint pairs (x, z) against product pairs formed by re-pairing the same x
    batch with permuted latents, so both marginals match exactly.
    """
    e_fn = _energy_of(energy)
    z = np.asarray(z, dtype=np.float64)
    zt = Tensor(z, requires_grad=True)
    y = gen.apply(zt)
    eps = gen.sigma_noise * rng.standard_normal(size=y.shape)
    x_gen = y + Tensor(eps)

    perm = rng.permutation(len(z))
    t_joint = disc.score(x_gen, Tensor(z))
    t_prod = disc.score(x_gen, Tensor(z[perm]))
    i_jsd = (-dk.softplus(-t_joint)).mean() - dk.softplus(t_prod).mean()

    e_data, e_gen = _energy_means(e_fn, np.asarray(data_x, dtype=np.float64), x_gen)
    h_xz = noise_conditional_entropy(gen.data_dim, gen.sigma_noise)

    loss = e_data - e_gen + spec.lam * i_jsd + h_xz
    disc_loss = -i_jsd
    diagnostics = {
        "energy_data": float(e_data.data), "energy_gen": float(e_gen.data),
        "entropy_term": spec.lam * float(i_jsd.data) + h_xz,
        "i_jsd": float(i_jsd.data), "s1_mean": float("nan"),
        "penalty_term": 0.0, "hinge_active": False,
    }
    return BoundValue(loss, diagnostics), disc_loss


def upper_gp(energy, gen, z, lower_value, spec, rng, iteration=0):
    """Gradient-penalty upper bound: lower bound plus a hinged latent-space
    score-mismatch penalty.

    The data-space mismatch |grad_x E + grad_x log p_g|^2 is transferred to
    latent coordinates through the generator Jacobian and estimated with
    Gaussian probes; the support-volume ratio multiplies the mean before the
    hinge at margin zeta.
    """
    if spec.p != 2:
        raise ValueError("gradient-penalty bound needs p = 2")
    e_fn = _energy_of(energy)
    z = np.asarray(z, dtype=np.float64)
    n, d = z.shape
    zt = Tensor(z, requires_grad=True)
    y = gen.apply(zt)

    x_pen = Tensor(y.data, requires_grad=True)
    g_e = dk.vjp(e_fn(x_pen).sum(), x_pen, create_graph=True)   # (N, D)

    score_z = -z
    if spec.lambda_logdet != 0.0:
        res = spectral.smallest_singular_value(gen, z, spec.spectral_cfg, rng, graph=(zt, y),
                                               degenerate="floor")
        log_s1 = dk.log(dk.rows_norm(dk.jvp(y, zt, res.v_min, create_graph=True)))
        glogdet = dk.vjp((float(d) * log_s1).sum(), zt).data
        score_z = score_z - spec.lambda_logdet * glogdet

    acc = None
    for _ in range(spec.gp_probes):
        v = rng.standard_normal(size=(n, d))
        jv = dk.jvp(y, zt, v).data
        term = (g_e * Tensor(jv)).sum(axis=1) + Tensor((score_z * v).sum(axis=1))
        sq = term * term
        acc = sq if acc is None else acc + sq
    pen_mean = acc.mean() * (1.0 / spec.gp_probes)

    coeff = spec.ms1.coefficient(iteration)
    hinge_arg = coeff * pen_mean - spec.zeta
    penalty = dk.relu(hinge_arg)
    loss = lower_value.loss + penalty

    diagnostics = dict(lower_value.diagnostics)
    diagnostics.update({
        "penalty_term": float(penalty.data),
        "hinge_active": bool(hinge_arg.data > 0),
        "gp_coefficient": coeff,
        "gp_raw": float(pen_mean.data),
    })
    return BoundValue(loss, diagnostics)


def diffusion_penalty_rows(model_score, transition_score, g_sq):
    """Per-row weighted score-matching residual g^2(t) |s_transition - s_model|^2.

    Substituting the exact transition score for the model score zeroes every
    row identically.
    """
    diff = dk._wrap(transition_score) - model_score
    return (diff * diff).sum(axis=1) * dk._wrap(g_sq)


def upper_diff(energy, gen, z, lower_value, spec, rng):
    """Diffusion upper bound: lower bound plus the denoising score-matching
    penalty under the variance-exploding schedule.

    The energy is time-conditioned as E(x, t) = E(x) / sigma(t) and its score
    is evaluated at the noised point; times are uniform on [t_eps, T].
    """
    e_fn = _energy_of(energy)
    sched = spec.sched
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]

    with dk.no_grad():
        x = gen.apply(Tensor(z)).data
    x = x + gen.sigma_noise * rng.standard_normal(size=x.shape)

    t = sde_mod.sample_times(sched, n, rng)
    x_prime = sde_mod.perturb(sched, x, t, rng)
    target = sde_mod.transition_score(sched, x_prime, x, t)
    g_sq = sde_mod.g(sched, t) ** 2
    inv_sigma = 1.0 / sde_mod.sigma(sched, t)

    xpt = Tensor(x_prime, requires_grad=True)
    e_rows = e_fn(xpt) * Tensor(inv_sigma)        # E(x', t) = E(x') / sigma(t)
    g_ep = dk.vjp(e_rows.sum(), xpt, create_graph=True)
    model_score = -g_ep

    pen_rows = diffusion_penalty_rows(model_score, target, g_sq)
    penalty = (sched.horizon / 2.0) * pen_rows.mean()
    loss = lower_value.loss + penalty

    diagnostics = dict(lower_value.diagnostics)
    diagnostics.update({"penalty_term": float(penalty.data), "hinge_active": False})
    return BoundValue(loss, diagnostics)


def penalty_0gp(energy, data_x, gen_x, weight):
    """Zero-centered gradient penalty over both batches; a baseline, not a bound."""
    e_fn = _energy_of(energy)
    xs = Tensor(np.vstack([np.asarray(data_x, dtype=np.float64),
                           np.asarray(gen_x, dtype=np.float64)]), requires_grad=True)
    g = dk.vjp(e_fn(xs).sum(), xs, create_graph=True)
    return weight * (g * g).sum(axis=1).mean()


def upper_0gp(energy, gen, data_x, z, lower_value, spec, rng):
    """Baseline objective: lower bound plus the zero-centered penalty."""
    with dk.no_grad():
        x = gen.apply(Tensor(np.asarray(z, dtype=np.float64))).data
    x = x + gen.sigma_noise * rng.standard_normal(size=x.shape)
    pen = penalty_0gp(energy, data_x, x, spec.gp_weight_0gp)
    loss = lower_value.loss + pen
    diagnostics = dict(lower_value.diagnostics)
    diagnostics.update({"penalty_term": float(pen.data), "hinge_active": False})
    return BoundValue(loss, diagnostics)

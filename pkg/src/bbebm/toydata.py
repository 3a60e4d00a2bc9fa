"""Toy 2-D datasets with exact densities where they exist, plus evaluation
metrics: mode coverage, mode-KL, a smoothed sample-based KL estimate and
threshold-free OOD scores.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import diffkernel as dk
from .diffkernel import Tensor


@dataclass(frozen=True)
class MixtureSpec:
    """Equal-weight isotropic Gaussian mixture."""

    means: np.ndarray
    std: float

    def __post_init__(self):
        if self.std <= 0:
            raise ValueError("std must be positive")
        object.__setattr__(self, "means", np.asarray(self.means, dtype=np.float64))

    @property
    def k(self):
        return self.means.shape[0]


def grid_mixture(spread=2.0, per_side=5, std=0.05):
    """The 5x5 grid mixture on {-2,-1,0,1,2}^2 with std 0.05 by default."""
    axis = np.linspace(-spread, spread, per_side)
    xx, yy = np.meshgrid(axis, axis)
    return MixtureSpec(np.stack([xx.ravel(), yy.ravel()], axis=1), std)


MIX_25 = grid_mixture()

SWISSROLL_PHI = (1.5 * np.pi, 4.5 * np.pi)
SWISSROLL_SCALE = 4.5 * np.pi / 2.0
SWISSROLL_JITTER = 0.02


def sample_mixture(mix, n, rng):
    idx = rng.integers(0, mix.k, size=n)
    return mix.means[idx] + mix.std * rng.standard_normal(size=(n, 2))


def sample_25gaussians(n, rng):
    return sample_mixture(MIX_25, n, rng)


def logdensity_mixture(mix, x):
    """Exact mixture log-density via a full log-sum-exp over components."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    sq = ((x[:, None, :] - mix.means[None, :, :]) ** 2).sum(axis=2)
    comp = -0.5 * sq / mix.std ** 2 - np.log(2 * np.pi * mix.std ** 2)
    return logsumexp(comp, axis=1) - np.log(mix.k)


def logdensity_25g(x):
    return logdensity_mixture(MIX_25, x)


def mixture_energy_fn(mix):
    """Differentiable -log density of the mixture, for the frozen-energy runs."""
    mu = Tensor(mix.means)                       # (K, 2)
    mu_sq = Tensor((mix.means ** 2).sum(axis=1))  # (K,)
    inv2v = 1.0 / (2.0 * mix.std ** 2)
    const = np.log(2 * np.pi * mix.std ** 2) + np.log(mix.k)

    def energy(x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        x_sq = (x * x).sum(axis=1, keepdims=True)          # (N, 1)
        cross = dk.matmul(x, mu.T)                         # (N, K)
        quad = x_sq - 2.0 * cross + mu_sq                  # (N, K), broadcast
        logits = quad * (-inv2v)
        return -(dk.logsumexp(logits, axis=1) - const)

    return energy


def sample_swissroll(n, rng, jitter=SWISSROLL_JITTER):
    phi = rng.uniform(*SWISSROLL_PHI, size=n)
    pts = np.stack([phi * np.cos(phi), phi * np.sin(phi)], axis=1) / SWISSROLL_SCALE
    return pts + jitter * rng.standard_normal(size=(n, 2))


#: CLI name registry
DATASETS = {
    "25gaussians": {
        "sample": sample_25gaussians,
        "mixture": MIX_25,
        "logdensity": logdensity_25g,
    },
    "swissroll": {
        "sample": sample_swissroll,
        "mixture": None,
        "logdensity": None,
    },
}


# ---------------------------------------------------------------------------
# mode coverage
# ---------------------------------------------------------------------------

@dataclass
class ModeReport:
    modes_captured: int
    histogram: np.ndarray
    kl_to_uniform: float
    unassigned_fraction: float
    n_samples: int


def mode_report(samples, mix=MIX_25, radius=None, threshold_per_10k=20):
    """Nearest-mean mode assignment within a capture radius.

    A mode counts as captured once it holds at least ``threshold_per_10k``
    samples per 10^4 drawn (floored at one sample).  The KL is computed
    against the uniform mode distribution over the assigned histogram.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("mode_report needs a non-empty sample set")
    if radius is None:
        radius = 3.0 * mix.std
    if radius <= 0:
        raise ValueError("radius must be positive")

    d2 = ((samples[:, None, :] - mix.means[None, :, :]) ** 2).sum(axis=2)
    nearest = d2.argmin(axis=1)
    within = d2[np.arange(len(samples)), nearest] <= radius ** 2
    hist = np.bincount(nearest[within], minlength=mix.k).astype(np.float64)

    n = len(samples)
    threshold = max(1, int(np.ceil(threshold_per_10k * n / 10_000)))
    captured = int((hist >= threshold).sum())

    assigned = hist.sum()
    if assigned > 0:
        q = hist / assigned
        nz = q > 0
        kl = float((q[nz] * np.log(q[nz] * mix.k)).sum())
    else:
        kl = float("inf")
    return ModeReport(captured, hist, kl, 1.0 - assigned / n, n)


# ---------------------------------------------------------------------------
# smoothed KL estimate
# ---------------------------------------------------------------------------

@dataclass
class KlEstimate:
    value: float
    bandwidth: np.ndarray
    n: int
    #: both sides are smoothed with the same kernel; this is an estimate, not
    #: the exact divergence of the raw distributions
    kde_smoothed: bool = True


def _kde_bandwidth(samples):
    """Scott's rule bandwidth matrix on the sample covariance."""
    n, d = samples.shape
    factor = n ** (-1.0 / (d + 4))
    cov = np.cov(samples.T)
    return factor ** 2 * np.atleast_2d(cov)


def _gaussian_logpdf_fullcov(x, mean, cov):
    d = x.shape[1]
    diff = x - mean
    chol = np.linalg.cholesky(cov)
    sol = np.linalg.solve(chol, diff.T)
    quad = (sol ** 2).sum(axis=0)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (quad + logdet + d * np.log(2 * np.pi))


def kde_logpdf(points, fit_samples, bandwidth, chunk=512):
    """Chunked log-density of a Gaussian KDE (memory stays flat in n * m)."""
    points = np.asarray(points, dtype=np.float64)
    fit = np.asarray(fit_samples, dtype=np.float64)
    n, d = fit.shape
    chol = np.linalg.cholesky(bandwidth)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    norm = np.log(n) + 0.5 * (logdet + d * np.log(2 * np.pi))
    out = np.empty(len(points))
    for lo in range(0, len(points), chunk):
        block = points[lo:lo + chunk]
        diff = block[:, None, :] - fit[None, :, :]
        sol = np.linalg.solve(chol, diff.reshape(-1, d).T).T.reshape(diff.shape)
        quad = (sol ** 2).sum(axis=2)
        out[lo:lo + chunk] = logsumexp(-0.5 * quad, axis=1) - norm
    return out


def smoothed_mixture_logpdf(points, mix, bandwidth):
    """Exact log-density of the mixture convolved with the KDE kernel."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cov = mix.std ** 2 * np.eye(2) + bandwidth
    comps = np.stack([
        _gaussian_logpdf_fullcov(points, mu, cov) for mu in mix.means], axis=1)
    return logsumexp(comps, axis=1) - np.log(mix.k)


def kl_pg_pdata(sampler, mix=MIX_25, n=10_000, rng=None):
    """Estimate KL between the sampler's distribution and the mixture.

    A KDE (Scott's rule) is fit on one sampler draw and evaluated on a fresh
    one; the reference density is the mixture convolved with the *same*
    kernel, so the smoothing bias cancels and an oracle sampler scores ~0.
    """
    rng = rng or np.random.default_rng()
    fit = _draw(sampler, n, rng)
    points = _draw(sampler, n, rng)
    bw = _kde_bandwidth(fit)
    est = float(np.mean(kde_logpdf(points, fit, bw)
                        - smoothed_mixture_logpdf(points, mix, bw)))
    return KlEstimate(est, bw, n)


def _draw(sampler, n, rng):
    if hasattr(sampler, "apply"):  # generator network
        from .netlib import sample_generator
        z = rng.standard_normal(size=(n, sampler.latent_dim))
        with dk.no_grad():
            return sample_generator(sampler, Tensor(z), rng).data
    return np.asarray(sampler(n, rng), dtype=np.float64)


# ---------------------------------------------------------------------------
# OOD scoring
# ---------------------------------------------------------------------------

def ood_scores(energy, in_samples, out_samples):
    """AUROC / AUPRC / FPR80 with score = -E(x) (higher = more in-distribution)."""
    s_in = _score(energy, in_samples)
    s_out = _score(energy, out_samples)
    return auroc(s_in, s_out), auprc(s_in, s_out), fpr_at_tpr(s_in, s_out, 0.8)


def _score(energy, samples):
    if callable(energy) and not hasattr(energy, "energy"):
        e = energy(samples)
    else:
        with dk.no_grad():
            e = energy.energy(np.asarray(samples, dtype=np.float64))
    e = e.data if isinstance(e, Tensor) else np.asarray(e)
    return -e


def _midranks(values):
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # ties get the midrank
        i = j + 1
    return ranks

def auroc(pos, neg):
    """Rank-statistic AUROC; ties broken by midrank."""
    scores = np.concatenate([pos, neg])
    ranks = _midranks(scores)
    r_pos = ranks[: len(pos)].sum()
    return (r_pos - len(pos) * (len(pos) + 1) / 2.0) / (len(pos) * len(neg))


def _curve_counts(pos, neg):
    """Cumulative TP/FP counts walking thresholds from high to low scores."""
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    order = np.argsort(-scores, kind="mergesort")
    scores, labels = scores[order], labels[order]
    # collapse tied scores into single threshold steps
    distinct = np.r_[np.nonzero(np.diff(scores))[0], len(scores) - 1]
    tp = np.cumsum(labels)[distinct]
    fp = np.cumsum(1 - labels)[distinct]
    return tp, fp


def auprc(pos, neg):
    """Precision-recall integration (step interpolation over recall)."""
    tp, fp = _curve_counts(pos, neg)
    recall = tp / len(pos)
    precision = tp / (tp + fp)
    prev_r = 0.0
    area = 0.0
    for r, p in zip(recall, precision):
        area += (r - prev_r) * p
        prev_r = r
    return float(area)


def fpr_at_tpr(pos, neg, tpr_target):
    """False-positive rate at the first threshold reaching the target TPR."""
    tp, fp = _curve_counts(pos, neg)
    tpr = tp / len(pos)
    fpr = fp / len(neg)
    idx = np.searchsorted(tpr, tpr_target, side="left")
    if idx >= len(tpr):
        return 1.0
    return float(fpr[idx])

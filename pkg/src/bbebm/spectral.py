"""Matrix-free estimators for the generator Jacobian spectrum.

The smallest singular value is found by steepest descent on the Rayleigh
quotient rho(v) = |J v|^2 / |v|^2 with an exact line search: each update is
the optimal point of rho over the plane spanned by the current vector and the
residual r = J^T J v - rho v, obtained from a closed-form 2x2 pencil.  All
Jacobian actions go through forward/reverse sweeps; J is never materialized.

Everything is batched over rows of z: one descent per latent point, run in
lockstep.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffkernel as dk
from .diffkernel import Tensor


class DegenerateJacobianError(RuntimeError):
    """Rayleigh quotient collapsed below tolerance: the Jacobian lost rank."""


@dataclass
class SpectralConfig:
    max_iters: int = 4
    tol: float = 1e-3
    probe_count: int = 8

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.probe_count < 1:
            raise ValueError("probe_count must be >= 1")


#: few iterations for the training loop, converged for validation oracles
TRAIN_CFG = SpectralConfig(max_iters=4, tol=1e-3, probe_count=8)
EVAL_CFG = SpectralConfig(max_iters=200, tol=1e-8, probe_count=64)


@dataclass
class SpectralResult:
    s1_estimate: np.ndarray          # (N,) smallest-singular-value estimates
    v_min: np.ndarray | None         # (N, d) unit rows; None for the probe fallback
    iters_used: int
    converged: np.ndarray            # (N,) bool
    probes: np.ndarray | None = None  # (k, N, d) when max_iters == 0
    rho_trace: list | None = None     # per-iteration rho arrays when tracked


def _as_batch(z, d=None):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if d is not None and z.shape[1] != d:
        raise ValueError(f"latent dimension mismatch: got {z.shape[1]}, expected {d}")
    return z


def trace_surrogate(trace, d):
    """AM-GM upper bound on half the log-determinant of the Jacobian Gram matrix."""
    return 0.5 * d * np.log(np.asarray(trace, dtype=np.float64) / d)


def smallest_singular_value(gen, z, cfg=TRAIN_CFG, rng=None, track_rho=False, graph=None,
                            degenerate="raise"):
    """Estimate s1 of the generator Jacobian at each row of z.

    With ``cfg.max_iters == 0`` no descent is run; the root of the Hutchinson
    trace surrogate (the RMS singular value) is returned as the start value,
    with no certified direction.  Otherwise the Rayleigh descent runs until
    the relative quotient change drops below ``cfg.tol`` or the iteration
    budget is spent; the estimate never undershoots the true s1 before
    convergence.  Pass ``graph=(z_leaf, output)`` to reuse an already recorded
    forward pass.

    ``degenerate``: a Rayleigh quotient below 1e-14 signals a rank-deficient
    Jacobian; "raise" propagates it, "floor" clamps those rows so a training
    loop can keep stepping through a collapse.
    """
    rng = rng or np.random.default_rng()
    z = _as_batch(z, getattr(gen, "latent_dim", None))
    n, d = z.shape
    if graph is not None:
        zt, y = graph
    else:
        zt = Tensor(z, requires_grad=True)
        y = gen.apply(zt)

    if cfg.max_iters == 0:
        probes = rng.standard_normal(size=(cfg.probe_count, n, d))
        sq = np.zeros(n)
        for k in range(cfg.probe_count):
            jv = dk.jvp(y, zt, probes[k]).data
            sq += (jv * jv).sum(axis=1)
        t_hat = sq / cfg.probe_count
        if np.any(t_hat <= 1e-14):
            raise DegenerateJacobianError("Hutchinson trace estimate vanished")
        return SpectralResult(np.sqrt(t_hat / d), None, 0, np.zeros(n, dtype=bool), probes=probes)

    v = rng.standard_normal(size=(n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    jv = dk.jvp(y, zt, v).data               # (N, D)
    rho = (jv * jv).sum(axis=1)              # |v| = 1
    converged = np.zeros(n, dtype=bool)
    trace = [rho.copy()] if track_rho else None
    iters = 0

    for _ in range(cfg.max_iters):
        iters += 1
        jtv = dk.jtj_apply(y, zt, v, jv=jv).data   # (N, d)
        r = jtv - rho[:, None] * v
        jr = dk.jvp(y, zt, r).data

        a11 = rho
        a12 = (jv * jr).sum(axis=1)
        a22 = (jr * jr).sum(axis=1)
        b12 = (v * r).sum(axis=1)              # ~0: residual is rho-orthogonal
        b22 = (r * r).sum(axis=1)

        # smaller generalized eigenvalue of the 2x2 pencil on span{v, r}
        qa = b22 - b12 * b12
        qb = a11 * b22 + a22 - 2.0 * a12 * b12
        qc = a11 * a22 - a12 * a12
        disc = np.sqrt(np.maximum(qb * qb - 4.0 * qa * qc, 0.0))
        denom = qb + disc
        active = (b22 > 1e-30) & (denom > 0) & ~converged
        lam = np.where(active, 2.0 * qc / np.where(denom > 0, denom, 1.0), rho)

        # eigenvector from whichever pencil row is better conditioned
        r1a, r1b = a11 - lam, a12 - lam * b12
        r2a, r2b = r1b, a22 - lam * b22
        use2 = np.abs(r2b) + np.abs(r2a) > np.abs(r1b) + np.abs(r1a)
        y1 = np.where(use2, r2b, -r1b)
        y2 = np.where(use2, -r2a, r1a)
        norm_y = np.hypot(y1, y2)
        keep = active & (norm_y > 1e-300)
        y1 = np.where(keep, y1, 1.0)
        y2 = np.where(keep, y2, 0.0)

        v_new = y1[:, None] * v + y2[:, None] * r
        jv_new = y1[:, None] * jv + y2[:, None] * jr
        scale = np.linalg.norm(v_new, axis=1, keepdims=True)
        v = v_new / scale
        jv = jv_new / scale
        rho_new = (jv * jv).sum(axis=1)

        converged |= np.abs(rho - rho_new) <= cfg.tol * np.maximum(rho, 1e-300)
        rho = rho_new
        if track_rho:
            trace.append(rho.copy())
        if converged.all():
            break

    if np.any(rho < 1e-14):
        if degenerate == "raise":
            raise DegenerateJacobianError(f"Rayleigh quotient fell to {rho.min():.3e}")
        rho = np.maximum(rho, 1e-14)
    return SpectralResult(np.sqrt(rho), v, iters, converged, rho_trace=trace)


def hutchinson_entropy(gen, z, cfg=TRAIN_CFG, rng=None):
    """AM-GM surrogate for half the log-det of J^T J, one value per row of z.

    Averages |J v|^2 over Gaussian probes to estimate the Gram trace; with the
    exact trace the result provably upper-bounds 0.5 log det(J^T J).
    """
    rng = rng or np.random.default_rng()
    z = _as_batch(z, getattr(gen, "latent_dim", None))
    n, d = z.shape
    zt = Tensor(z, requires_grad=True)
    y = gen.apply(zt)
    sq = np.zeros(n)
    for _ in range(cfg.probe_count):
        v = rng.standard_normal(size=(n, d))
        jv = dk.jvp(y, zt, v).data
        sq += (jv * jv).sum(axis=1)
    t_hat = sq / cfg.probe_count
    if np.any(t_hat <= 1e-14):
        raise DegenerateJacobianError("Hutchinson trace estimate vanished")
    return trace_surrogate(t_hat, d)


def anisotropy_index(gen, z):
    """Population standard deviation of |J e_i| over latent basis directions."""
    z = _as_batch(z, getattr(gen, "latent_dim", None))
    n, d = z.shape
    zt = Tensor(z, requires_grad=True)
    y = gen.apply(zt)
    norms = np.empty((n, d))
    for i in range(d):
        e = np.zeros((n, d))
        e[:, i] = 1.0
        jv = dk.jvp(y, zt, e).data
        norms[:, i] = np.linalg.norm(jv, axis=1)
    return norms.std(axis=1)


def dense_jacobian(gen, z):
    """Column-by-column Jacobian via basis tangents; oracle for small nets."""
    z = _as_batch(z, getattr(gen, "latent_dim", None))
    if z.shape[0] != 1:
        raise ValueError("dense_jacobian expects a single latent point")
    d = z.shape[1]
    zt = Tensor(z, requires_grad=True)
    y = gen.apply(zt)
    cols = []
    for i in range(d):
        e = np.zeros((1, d))
        e[0, i] = 1.0
        cols.append(dk.jvp(y, zt, e).data.ravel())
    return np.stack(cols, axis=1)

"""Shared stubs for tests: fixed-Jacobian generators and closed-form energies."""

import numpy as np

import bbebm.diffkernel as dk
from bbebm.diffkernel import Tensor


class LinearGen:
    """Generator stub x = A z (+ optional output noise scale for samplers)."""

    def __init__(self, a, sigma_noise=0.0):
        self.a = np.asarray(a, dtype=np.float64)
        self.latent_dim = self.a.shape[1]
        self.data_dim = self.a.shape[0]
        self.sigma_noise = sigma_noise

    def apply(self, z):
        if not isinstance(z, Tensor):
            z = Tensor(z)
        return dk.matmul(z, Tensor(self.a.T))


def const_energy(x):
    return (x * x).sum(axis=1) * 0.0


def quad_energy(x):
    return 0.5 * (x * x).sum(axis=1)


def linear_energy(a):
    a = np.asarray(a, dtype=np.float64)

    def e(x):
        return (x * Tensor(a)).sum(axis=1)

    return e


def quadratic_form_energy(b):
    """E(x) = 0.5 x^T B x with symmetric B."""
    b = np.asarray(b, dtype=np.float64)

    def e(x):
        return 0.5 * (dk.matmul(x, Tensor(b)) * x).sum(axis=1)

    return e

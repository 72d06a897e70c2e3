"""Linear-Gaussian problems with closed-form posteriors, for checking solvers.

Pixel case: x0 ~ N(mean, std^2 I) per pixel, y = A x0 + n.
Latent case: z0 ~ N(m, s^2 I), x0 = U vec(z0) + c with U orthonormal columns.
In both the exact velocity field is available, so a solver's output can be
compared against E[x0 | y] from the normal equations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .degrade import DegradationOp
from .nets import GaussianVelocityField, LinearAutoencoder


def operator_matrix(op: DegradationOp) -> np.ndarray:
    """Dense matrix of the noiseless operator (columns = images of unit pixels)."""
    n = op.image_size**2
    eye = np.eye(n).reshape(n, op.image_size, op.image_size)
    return op.forward_clean(eye).reshape(n, -1).T


def gaussian_posterior_mean(M: np.ndarray, y: np.ndarray, prior_mean: np.ndarray,
                            prior_cov: np.ndarray, noise_std: float) -> np.ndarray:
    """E[x | y] for x ~ N(prior_mean, prior_cov), y = M x + N(0, noise_std^2 I)."""
    S = M @ prior_cov @ M.T + noise_std**2 * np.eye(M.shape[0])
    K = np.linalg.solve(S, M @ prior_cov).T
    return prior_mean + K @ (y - M @ prior_mean)


@dataclass
class PixelGaussianProblem:
    field: GaussianVelocityField
    op: DegradationOp

    @classmethod
    def make(cls, op: DegradationOp, mean_level=0.5, std=0.1, seed=0):
        rng = np.random.default_rng(seed)
        mean = mean_level + 0.1 * rng.standard_normal(op.image_shape)
        return cls(GaussianVelocityField(mean, std), op)

    def sample(self, rng, count):
        x0 = self.field.mean + self.field.std * rng.standard_normal((count, *self.op.image_shape))
        y = self.op.forward_clean(x0) + self.op.noise_std * rng.standard_normal(
            (count, *self.op.measurement_shape))
        return x0, y

    def posterior_mean(self, y: np.ndarray) -> np.ndarray:
        M = operator_matrix(self.op)
        mu = self.field.mean.ravel()
        cov = np.diag(self.field.std.ravel() ** 2)
        out = [gaussian_posterior_mean(M, yi.ravel(), mu, cov, self.op.noise_std) for yi in y]
        return np.stack(out).reshape(len(y), *self.op.image_shape)


@dataclass
class LatentGaussianProblem:
    field: GaussianVelocityField
    ae: LinearAutoencoder
    op: DegradationOp

    @classmethod
    def make(cls, op: DegradationOp, latent_side=4, std=1.0, seed=0):
        rng = np.random.default_rng(seed)
        n = op.image_size**2
        d = latent_side**2
        U, _ = np.linalg.qr(rng.standard_normal((n, d)))
        U = 0.1 * U
        offset = np.full(n, 0.5)
        mean = 0.5 * rng.standard_normal((latent_side, latent_side))
        return cls(GaussianVelocityField(mean, std), LinearAutoencoder(U, offset, op.image_size), op)

    def decode(self, z: np.ndarray) -> np.ndarray:
        flat = z.reshape(len(z), -1) @ self.ae.basis.T + self.ae.offset
        return flat.reshape(len(z), self.op.image_size, self.op.image_size)

    def sample(self, rng, count):
        z0 = self.field.mean + self.field.std * rng.standard_normal((count, *self.field.mean.shape))
        x0 = self.decode(z0)
        y = self.op.forward_clean(x0) + self.op.noise_std * rng.standard_normal(
            (count, *self.op.measurement_shape))
        return x0, y

    def posterior_mean(self, y: np.ndarray) -> np.ndarray:
        M = operator_matrix(self.op) @ self.ae.basis
        mu = self.field.mean.ravel()
        cov = np.diag(self.field.std.ravel() ** 2)
        shift = operator_matrix(self.op) @ self.ae.offset
        z = np.stack([gaussian_posterior_mean(M, yi.ravel() - shift, mu, cov, self.op.noise_std)
                      for yi in y])
        return self.decode(z.reshape(len(y), *self.field.mean.shape))

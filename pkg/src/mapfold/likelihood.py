"""Measurement models and log-likelihood gradients in the whitened frame.

Each evaluator returns (loglik, grad) where grad is the exact gradient of
the returned value with respect to z; the solver takes ascent steps on it.
Noise scales default to 1 since they fold into the per-measurement learning
rates anyway.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .prior import ATOMS_PER_RESIDUE, CorrelatedPrior

COINCIDENT_ATOM_TOL = 1e-8  # Angstrom; below this the distance gradient is zeroed


class DegenerateMeasurementError(RuntimeError):
    """Measurement matrix is rank deficient after composition with R."""


@dataclass
class MaskedLinearMeasurement:
    """Observed coordinates of a subset of atom rows (masking matrix M)."""

    mask_rows: np.ndarray
    observed: np.ndarray
    subsample_factor: int | None = None
    noise_scale: float = 1.0

    def __post_init__(self):
        self.mask_rows = np.asarray(self.mask_rows, dtype=int)
        self.observed = np.asarray(self.observed, dtype=float)
        if self.mask_rows.ndim != 1:
            raise ValueError("mask_rows must be a 1-D index list")
        if len(np.unique(self.mask_rows)) != len(self.mask_rows):
            raise ValueError("mask_rows must be unique")
        if np.any(self.mask_rows < 0):
            raise ValueError("mask_rows must be nonnegative")
        if self.observed.shape != (len(self.mask_rows), 3):
            raise ValueError("observed must be (m, 3) matching mask_rows")
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be > 0")

    @property
    def m(self) -> int:
        return len(self.mask_rows)


@dataclass
class PreconditionedLinear:
    """Thin SVD factors of M R with the transformed target S+ U^T y."""

    u: np.ndarray         # (m, m)
    s: np.ndarray         # (m,) positive, nonincreasing
    vt: np.ndarray        # (m, dim): top block of the full V^T
    target: np.ndarray    # (m, 3) = S+ U^T y
    noise_scale: float = 1.0

    @property
    def m(self) -> int:
        return self.s.shape[0]

    @property
    def dim(self) -> int:
        return self.vt.shape[1]


def precondition(prior: CorrelatedPrior,
                 meas: MaskedLinearMeasurement) -> PreconditionedLinear:
    """Factor M R = U S V^T and transform the target once, ahead of the run."""
    if meas.mask_rows.max(initial=-1) >= prior.dim:
        raise ValueError("mask_rows exceed prior dimension")
    if meas.m > prior.dim:
        raise ValueError("more measurement rows than coordinates")
    mr = prior.matrix[meas.mask_rows, :]
    u, s, vt = np.linalg.svd(mr, full_matrices=False)
    if s[-1] < 1e-10 * s[0]:
        raise DegenerateMeasurementError(
            f"smallest singular value {s[-1]:.3e} below 1e-10 of largest {s[0]:.3e}")
    target = (u.T @ meas.observed) / s[:, None]
    return PreconditionedLinear(u, s, vt, target, meas.noise_scale)


def linear_loglik_grad(p: PreconditionedLinear, z) -> tuple[float, np.ndarray]:
    """Quadratic log-likelihood in the rotated frame; unobserved directions free."""
    z = np.asarray(z, dtype=float)
    if z.shape != (p.dim, 3):
        raise ValueError(f"z must be ({p.dim}, 3)")
    residual = p.vt @ z - p.target
    inv_var = 1.0 / p.noise_scale**2
    loss = -0.5 * inv_var * float(np.sum(residual * residual))
    grad = -inv_var * (p.vt.T @ residual)
    return loss, grad


@dataclass
class DistanceSet:
    """Sparse pairwise distances between alpha-carbon atom rows."""

    pairs: np.ndarray       # (m, 2) atom-row indices, i != j
    measured: np.ndarray    # (m,) lengths in Angstrom, >= 0

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=int)
        self.measured = np.asarray(self.measured, dtype=float)
        if self.pairs.ndim != 2 or self.pairs.shape[1] != 2:
            raise ValueError("pairs must be (m, 2)")
        if self.measured.shape != (self.pairs.shape[0],):
            raise ValueError("measured must match pair count")
        if np.any(self.pairs[:, 0] == self.pairs[:, 1]):
            raise ValueError("pairs must join distinct atoms")
        if np.any(self.pairs % ATOMS_PER_RESIDUE != 1):
            raise ValueError("pair indices must be alpha-carbon rows (4r + 1)")
        canon = np.sort(self.pairs, axis=1)
        if len(np.unique(canon, axis=0)) != len(canon):
            raise ValueError("duplicate pairs (order-insensitive)")
        if np.any(self.measured < 0):
            raise ValueError("measured distances must be >= 0")

    @property
    def m(self) -> int:
        return self.pairs.shape[0]


def distance_loglik_grad(d: DistanceSet, prior: CorrelatedPrior,
                         z) -> tuple[float, np.ndarray]:
    """Negative squared misfit of pairwise distances; analytic chain rule.

    Coincident atoms (separation below ``COINCIDENT_ATOM_TOL``) contribute a
    zero subgradient for their pair instead of a NaN.
    """
    z = np.asarray(z, dtype=float)
    x = prior.matrix @ z
    i, j = d.pairs[:, 0], d.pairs[:, 1]
    if i.max(initial=-1) >= prior.dim or j.max(initial=-1) >= prior.dim:
        raise ValueError("pair indices exceed prior dimension")
    sep = x[i] - x[j]
    dist = np.linalg.norm(sep, axis=1)
    resid = d.measured - dist
    loss = -float(np.sum(resid * resid))
    ok = dist >= COINCIDENT_ATOM_TOL
    coef = np.where(ok, 2.0 * resid / np.where(ok, dist, 1.0), 0.0)
    grad_x = np.zeros_like(x)
    np.add.at(grad_x, i, coef[:, None] * sep)
    np.add.at(grad_x, j, -coef[:, None] * sep)
    return loss, prior.matrix.T @ grad_x


def raw_linear_loglik_grad(prior: CorrelatedPrior, meas: MaskedLinearMeasurement,
                           z) -> tuple[float, np.ndarray]:
    """Unrotated form of the masked-linear log-likelihood (identity weighting).

    Same minimisers as the preconditioned form but conditioned by (M R)^T M R;
    kept for the optimizer comparison benchmarks.
    """
    z = np.asarray(z, dtype=float)
    mr = prior.matrix[meas.mask_rows, :]
    residual = mr @ z - meas.observed
    inv_var = 1.0 / meas.noise_scale**2
    loss = -inv_var * float(np.sum(residual * residual))
    grad = -2.0 * inv_var * (mr.T @ residual)
    return loss, grad


class LinearLikelihood:
    """Binding-facing wrapper around a preconditioned linear measurement."""

    def __init__(self, preconditioned: PreconditionedLinear, label="linear"):
        self.preconditioned = preconditioned
        self.label = label

    def evaluate(self, z, coords=None, r_t=None):
        return linear_loglik_grad(self.preconditioned, z)


class RawLinearLikelihood:
    """Binding-facing wrapper around the unrotated masked-linear loss."""

    def __init__(self, prior, meas: MaskedLinearMeasurement, label="linear_raw"):
        self.prior = prior
        self.meas = meas
        self.label = label

    def evaluate(self, z, coords=None, r_t=None):
        return raw_linear_loglik_grad(self.prior, self.meas, z)


class DistanceLikelihood:
    """Binding-facing wrapper around a sparse distance set."""

    def __init__(self, distances: DistanceSet, prior: CorrelatedPrior,
                 label="distances"):
        self.distances = distances
        self.prior = prior
        self.label = label

    def evaluate(self, z, coords=None, r_t=None):
        return distance_loglik_grad(self.distances, self.prior, z)

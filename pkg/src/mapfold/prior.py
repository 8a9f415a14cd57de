"""Correlated polymer prior: structured noise matrix, whitening, noise schedules.

Coordinates are (4N, 3) arrays: four backbone heavy atoms (N, CA, C, O) per
residue, residues in chain order, lengths in Angstrom.  Gaussian noise is
coupled along the chain by a fixed lower-triangular matrix so that noise
draws resemble plausible polymer conformations instead of isotropic static.
Solver iterates live in the whitened frame z with x = R z.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular, toeplitz
from scipy.optimize import brentq

ATOMS_PER_RESIDUE = 4
BACKBONE_ATOM_NAMES = ("N", "CA", "C", "O")

DEFAULT_RADIUS_COEFF = 2.0    # Angstrom prefactor of the gyration-radius scaling law
DEFAULT_RADIUS_EXPONENT = 0.4
DEFAULT_SCALE_A = 1.45        # Angstrom, per-atom innovation scale of the decay process


class CalibrationError(RuntimeError):
    """Decay parameter cannot be bracketed in [0, 1)."""


@dataclass
class BackboneChain:
    """Backbone heavy-atom coordinates with a per-row modelled/known mask.

    ``coords`` has exactly ``4 * n_residues`` rows ordered (N, CA, C, O) per
    residue.  ``present_mask`` marks rows whose coordinates are actually
    modelled; masked rows carry zeros and are excluded from measurements and
    metrics.  ``residue_ids`` preserves the source numbering when the chain
    was read from a file (defaults to 0..N-1).
    """

    n_residues: int
    coords: np.ndarray
    present_mask: np.ndarray
    residue_ids: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        self.present_mask = np.asarray(self.present_mask, dtype=bool)
        if self.n_residues < 1:
            raise ValueError("n_residues must be >= 1")
        n_rows = ATOMS_PER_RESIDUE * self.n_residues
        if self.coords.shape != (n_rows, 3):
            raise ValueError(
                f"coords must have shape ({n_rows}, 3), got {self.coords.shape}"
            )
        if self.present_mask.shape != (n_rows,):
            raise ValueError("present_mask length must equal 4 * n_residues")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coords must be finite")
        if self.residue_ids is None:
            self.residue_ids = np.arange(self.n_residues)
        else:
            self.residue_ids = np.asarray(self.residue_ids, dtype=int)
            if self.residue_ids.shape != (self.n_residues,):
                raise ValueError("residue_ids length must equal n_residues")

    @classmethod
    def from_coords(cls, coords, residue_ids=None) -> "BackboneChain":
        """Wrap a fully modelled (4N, 3) coordinate array."""
        coords = np.asarray(coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] % 4:
            raise ValueError("coords must be (4N, 3)")
        n = coords.shape[0] // ATOMS_PER_RESIDUE
        return cls(n, coords, np.ones(coords.shape[0], bool), residue_ids)

    @property
    def n_atoms(self) -> int:
        return ATOMS_PER_RESIDUE * self.n_residues

    def ca_rows(self) -> np.ndarray:
        """Atom-row indices of the alpha carbons."""
        return ATOMS_PER_RESIDUE * np.arange(self.n_residues) + 1

    def present_residues(self) -> np.ndarray:
        """Indices of residues whose four atoms are all modelled."""
        per_res = self.present_mask.reshape(self.n_residues, ATOMS_PER_RESIDUE)
        return np.flatnonzero(per_res.all(axis=1))


@dataclass(frozen=True)
class CorrelatedPrior:
    """Lower-triangular coupling matrix over the 4N atom rows.

    Column 0 holds ``a * nu * b**i``; column j >= 1 holds ``a * b**(i-j)`` for
    i >= j.  The matrix is immutable after construction and safe to share
    across concurrent solver replicas.
    """

    n_residues: int
    a: float
    b: float
    matrix: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return ATOMS_PER_RESIDUE * self.n_residues

    @property
    def nu(self) -> float:
        return 1.0 / math.sqrt(1.0 - self.b * self.b)

    def covariance(self) -> np.ndarray:
        """Dense R R^T (test/diagnostic use; O(dim^2) memory)."""
        return self.matrix @ self.matrix.T


def _decay_matrix(dim: int, a: float, b: float) -> np.ndarray:
    if b == 0.0:
        return a * np.eye(dim)
    R = a * np.tril(toeplitz(b ** np.arange(dim)))
    R[:, 0] *= 1.0 / math.sqrt(1.0 - b * b)
    return R


def expected_rg_squared(a: float, b: float, n_atoms: int) -> float:
    """Closed-form E[Rg^2] of x = R z with z ~ N(0, I), all 3 columns.

    Uses Rg^2 = (6 a^2 / (n^2 (1+b))) * sum_d (n-d) G_d with G_d the
    d-term geometric sum, which stays stable as b -> 1 (Brownian limit
    a^2 n / 2) where the naive trace expression cancels catastrophically.
    """
    if n_atoms <= 1:
        return 0.0
    if b == 0.0:
        return 3.0 * a * a * (n_atoms - 1) / n_atoms
    geo = np.cumsum(b ** np.arange(0, n_atoms - 1))
    d = np.arange(1, n_atoms)
    return 6.0 * a * a * float(np.dot(n_atoms - d, geo)) / (n_atoms * n_atoms * (1.0 + b))


def build_prior(
    n_residues: int,
    radius_coeff: float = DEFAULT_RADIUS_COEFF,
    radius_exponent: float = DEFAULT_RADIUS_EXPONENT,
    scale_a: float = DEFAULT_SCALE_A,
    fix_b: float | None = None,
) -> CorrelatedPrior:
    """Build the coupling matrix, calibrating the decay b by root finding.

    b is solved so that the expected gyration radius of x = R z matches
    ``radius_coeff * n_residues ** radius_exponent``.  Pass ``fix_b`` to
    bypass calibration (``fix_b=0`` collapses R to ``a * I``).
    """
    if n_residues < 1:
        raise ValueError("n_residues must be >= 1")
    if radius_coeff <= 0:
        raise ValueError("radius_coeff must be > 0")
    if not 0.0 < radius_exponent < 1.0:
        raise ValueError("radius_exponent must lie in (0, 1)")
    if fix_b is not None:
        if not 0.0 <= fix_b < 1.0:
            raise ValueError("fix_b must lie in [0, 1)")
        b = float(fix_b)
    else:
        dim = ATOMS_PER_RESIDUE * n_residues
        target = radius_coeff * n_residues**radius_exponent

        def gap(b):
            return math.sqrt(expected_rg_squared(scale_a, b, dim)) - target

        lo, hi = 0.0, 1.0 - 1e-9
        g_lo, g_hi = gap(lo), gap(hi)
        if not (g_lo < 0.0 < g_hi):
            raise CalibrationError(
                f"cannot bracket decay parameter for N={n_residues}, a={scale_a}: "
                f"gyration-radius gap is {g_lo:.3g} at b=0 and {g_hi:.3g} at b=1-1e-9"
            )
        b = brentq(gap, lo, hi, xtol=1e-15, rtol=8.9e-16)
    return CorrelatedPrior(n_residues, float(scale_a), float(b),
                           _decay_matrix(ATOMS_PER_RESIDUE * n_residues, scale_a, b))


def _check_coords(prior: CorrelatedPrior, arr, name: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if arr.shape != (prior.dim, 3):
        raise ValueError(f"{name} must have shape ({prior.dim}, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def whiten(prior: CorrelatedPrior, x) -> np.ndarray:
    """Map coordinates to the whitened frame: solve R z = x (triangular)."""
    x = _check_coords(prior, x, "x")
    return solve_triangular(prior.matrix, x, lower=True)


def unwhiten(prior: CorrelatedPrior, z) -> np.ndarray:
    """Map whitened coordinates back: x = R z."""
    z = _check_coords(prior, z, "z")
    return prior.matrix @ z


def forward_noise(prior: CorrelatedPrior, schedule: "Schedule", x0, t: float,
                  rng_seed) -> np.ndarray:
    """Sample x_t = alpha_t x0 + sigma_t R w with w standard normal."""
    x0 = _check_coords(prior, x0, "x0")
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) \
        else np.random.default_rng(rng_seed)
    w = rng.standard_normal(x0.shape)
    return schedule.alpha(t) * x0 + schedule.sigma(t) * (prior.matrix @ w)


def condition_number(prior: CorrelatedPrior) -> float:
    """Ratio of the largest to smallest singular value of R."""
    s = np.linalg.svd(prior.matrix, compute_uv=False)
    return float(s[0] / s[-1])


SCHEDULE_KINDS = ("linear_time", "sqrt_time")


@dataclass(frozen=True)
class Schedule:
    """Variance-preserving schedule: beta linear in t, alpha = exp(-int beta/2).

    ``time_of_step`` maps the discrete solver step (0..T) onto continuous
    time, descending from 1 toward 0; ``sqrt_time`` spends more steps near
    t = 0 than the uniform mapping.
    """

    kind: str = "linear_time"
    total_steps: int = 1000
    beta_min: float = 0.2
    beta_max: float = 20.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"kind must be one of {SCHEDULE_KINDS}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.beta_min <= 0 or self.beta_max < self.beta_min:
            raise ValueError("need 0 < beta_min <= beta_max")

    def alpha(self, t: float) -> float:
        integral = self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
        return math.exp(-0.5 * integral)

    def sigma(self, t: float) -> float:
        a = self.alpha(t)
        return math.sqrt(max(0.0, 1.0 - a * a))

    def time_of_step(self, step: int) -> float:
        if not 0 <= step <= self.total_steps:
            raise ValueError("step must lie in [0, total_steps]")
        frac = step / self.total_steps
        if self.kind == "linear_time":
            return 1.0 - frac
        return 1.0 - math.sqrt(frac)

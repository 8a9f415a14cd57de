"""Volumetric density model: Gaussian-per-atom rendering and band-limited loss.

The map is a cubic voxel grid.  Arrays are indexed grid[iz, iy, ix] so that
x varies fastest in memory, matching the on-disk layout; the voxel (0, 0, 0)
center sits at ``origin`` and centers advance by ``voxel_size`` per index.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .prior import ATOMS_PER_RESIDUE, CorrelatedPrior

# atomic numbers of the backbone heavy atoms, row order (N, CA, C, O)
BACKBONE_ATOMIC_NUMBERS = (7, 6, 6, 8)
KERNEL_CUTOFF_SIGMAS = 4.0  # truncation radius of the per-atom Gaussian


@dataclass
class DensityMap:
    """Cubic voxel grid with its geometry and declared resolution."""

    grid: np.ndarray
    voxel_size: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    resolution: float | None = None
    blur_sigma: float = 0.0

    def __post_init__(self):
        self.grid = np.asarray(self.grid)
        self.origin = np.asarray(self.origin, dtype=float)
        if self.grid.ndim != 3 or len(set(self.grid.shape)) != 1:
            raise ValueError("grid must be cubic (D, D, D)")
        if self.grid.shape[0] < 2:
            raise ValueError("grid side must be >= 2")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be > 0")
        if self.origin.shape != (3,):
            raise ValueError("origin must be a 3-vector")
        if not np.all(np.isfinite(self.grid)):
            raise ValueError("grid values must be finite")

    @property
    def side(self) -> int:
        return self.grid.shape[0]

    def empty_like(self) -> "DensityMap":
        return DensityMap(np.zeros(self.grid.shape), self.voxel_size,
                          self.origin.copy(), self.resolution, self.blur_sigma)


@dataclass
class AtomSpec:
    """Per-atom Gaussian amplitudes (atomic numbers) and shared width."""

    atomic_numbers: np.ndarray
    width: float

    def __post_init__(self):
        self.atomic_numbers = np.asarray(self.atomic_numbers, dtype=float)
        if np.any(self.atomic_numbers <= 0):
            raise ValueError("atomic numbers must be positive")
        if self.width <= 0:
            raise ValueError("width must be > 0")

    @classmethod
    def for_backbone(cls, n_residues: int, resolution: float) -> "AtomSpec":
        """Backbone pattern (7, 6, 6, 8) with width = resolution / (sqrt(2) pi)."""
        if resolution <= 0:
            raise ValueError("resolution must be > 0")
        numbers = np.tile(BACKBONE_ATOMIC_NUMBERS, n_residues)
        return cls(numbers, resolution / (math.sqrt(2.0) * math.pi))


def _effective_width(spec: AtomSpec, blur_sigma: float) -> float:
    return math.sqrt(spec.width**2 + blur_sigma**2)


def _atom_window(center, origin, voxel, side, radius):
    lo = np.maximum(np.ceil((center - origin - radius) / voxel), 0).astype(int)
    hi = np.minimum(np.floor((center - origin + radius) / voxel), side - 1).astype(int)
    return lo, hi


def _atom_kernels(coords, spec: AtomSpec, grid_template: DensityMap):
    """Per-atom truncated Gaussian windows: (index, amp, lo, hi, ax, kernel).

    Shared by rendering and the gradient so the exponentials are computed
    once per evaluation.  Warns when atoms fall farther than the truncation
    radius outside the grid.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ValueError("coords must be (n_atoms, 3)")
    if coords.shape[0] != spec.atomic_numbers.shape[0]:
        raise ValueError("coords and atom spec disagree on atom count")
    s_eff = _effective_width(spec, grid_template.blur_sigma)
    radius = KERNEL_CUTOFF_SIGMAS * s_eff
    voxel, origin, side = (grid_template.voxel_size, grid_template.origin,
                           grid_template.side)
    top = origin + voxel * (side - 1)
    outside = (np.any(coords < origin - radius, axis=1)
               | np.any(coords > top + radius, axis=1))
    if np.any(outside):
        warnings.warn(f"{int(outside.sum())} atoms lie more than "
                      f"{radius:.2f} A outside the grid", stacklevel=2)
    inv_two_s2 = 1.0 / (2.0 * s_eff * s_eff)
    r2_max = radius * radius
    kernels = []
    for idx, (amp, center) in enumerate(zip(spec.atomic_numbers, coords)):
        lo, hi = _atom_window(center, origin, voxel, side, radius)
        if np.any(lo > hi):
            continue
        ax = [origin[k] + voxel * np.arange(lo[k], hi[k] + 1) - center[k]
              for k in range(3)]
        r2 = (ax[2][:, None, None] ** 2 + ax[1][None, :, None] ** 2
              + ax[0][None, None, :] ** 2)
        kernel = np.where(r2 <= r2_max, np.exp(-r2 * inv_two_s2), 0.0)
        kernels.append((idx, amp, lo, hi, ax, kernel))
    return kernels, s_eff


def render_density(coords, spec: AtomSpec, grid_template: DensityMap) -> DensityMap:
    """Sum one truncated Gaussian of amplitude Z per atom onto the grid.

    Each atom contributes Z * exp(-r^2 / (2 s_eff^2)) within a sphere of
    radius 4 s_eff, where s_eff folds the template's uniform blur into the
    atom width.
    """
    out = grid_template.empty_like()
    kernels, _ = _atom_kernels(coords, spec, grid_template)
    for _, amp, lo, hi, _, kernel in kernels:
        out.grid[lo[2]:hi[2] + 1, lo[1]:hi[1] + 1, lo[0]:hi[0] + 1] += amp * kernel
    return out


_KMAG_CACHE: dict = {}


def _frequency_magnitudes(side: int, voxel: float) -> np.ndarray:
    key = (side, voxel)
    if key not in _KMAG_CACHE:
        f_full = np.fft.fftfreq(side, d=voxel)
        f_half = np.fft.rfftfreq(side, d=voxel)
        _KMAG_CACHE[key] = np.sqrt(
            f_full[:, None, None] ** 2 + f_full[None, :, None] ** 2
            + f_half[None, None, :] ** 2)
    return _KMAG_CACHE[key]


def lowpass_filter_masks(side: int, voxel: float, r_t: float | None,
                         window: str = "sharp"):
    """Frequency-domain weights (w, w^2) for the band limit 1 / r_t.

    ``sharp`` keeps frequencies with |k| <= 1/r_t; ``cosine`` rolls off over
    a band of one frequency step.  Resolutions below twice the voxel size
    are clamped to the grid Nyquist limit with a warning.  ``r_t`` of None
    or +inf disables filtering (all-pass).
    """
    if r_t is None or math.isinf(r_t):
        return None, None
    nyquist_res = 2.0 * voxel
    if r_t < nyquist_res:
        warnings.warn(f"resolution cutoff {r_t:.3g} A below the grid Nyquist "
                      f"limit; clamping to {nyquist_res:.3g} A", stacklevel=2)
        r_t = nyquist_res
    kmag = _frequency_magnitudes(side, voxel)
    cutoff = 1.0 / r_t
    if window == "sharp":
        w = (kmag <= cutoff).astype(float)
    elif window == "cosine":
        df = np.fft.rfftfreq(side, d=voxel)[1]
        ramp = np.clip((cutoff - kmag) / df + 1.0, 0.0, 1.0)
        w = 0.5 - 0.5 * np.cos(math.pi * ramp)
    else:
        raise ValueError("window must be 'sharp' or 'cosine'")
    return w, w * w


def lowpass(dmap_grid: np.ndarray, voxel: float, r_t: float | None,
            window: str = "sharp") -> np.ndarray:
    """Apply the band-limit filter to a real grid."""
    w, _ = lowpass_filter_masks(dmap_grid.shape[0], voxel, r_t, window)
    if w is None:
        return np.asarray(dmap_grid, dtype=float)
    spec = np.fft.rfftn(np.asarray(dmap_grid, dtype=float))
    return np.fft.irfftn(spec * w, s=dmap_grid.shape)


def density_loglik_grad(map_obs: DensityMap, coords, spec: AtomSpec,
                        r_t: float | None, prior: CorrelatedPrior,
                        window: str = "sharp") -> tuple[float, np.ndarray]:
    """Band-limited negative squared map misfit and its gradient over z.

    Both the observed and the rendered map pass through the same low-pass
    filter; the loss is the real-space squared difference of the filtered
    maps.  The gradient flows through the truncated Gaussian kernel applied
    to the (squared-window) filtered residual, then through R.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.shape != (prior.dim, 3):
        raise ValueError(f"coords must be ({prior.dim}, 3)")
    kernels, s_eff = _atom_kernels(coords, spec, map_obs)
    rendered = np.zeros(map_obs.grid.shape)
    for _, amp, lo, hi, _, kernel in kernels:
        rendered[lo[2]:hi[2] + 1, lo[1]:hi[1] + 1, lo[0]:hi[0] + 1] += amp * kernel
    diff = np.asarray(map_obs.grid, dtype=float) - rendered
    w, w2 = lowpass_filter_masks(map_obs.side, map_obs.voxel_size, r_t, window)
    if w is None:
        filtered = diff
        grad_residual = diff
    else:
        spec_diff = np.fft.rfftn(diff)
        filtered = np.fft.irfftn(spec_diff * w, s=diff.shape)
        grad_residual = filtered if window == "sharp" \
            else np.fft.irfftn(spec_diff * w2, s=diff.shape)
    loss = -float(np.sum(filtered * filtered))

    inv_s2 = 1.0 / (s_eff * s_eff)
    grad_x = np.zeros_like(coords)
    for idx, amp, lo, hi, ax, kernel in kernels:
        rho = grad_residual[lo[2]:hi[2] + 1, lo[1]:hi[1] + 1, lo[0]:hi[0] + 1]
        weight = 2.0 * amp * inv_s2 * rho * kernel
        # (v - X) components: ax[0] varies along the last grid axis, etc.
        grad_x[idx, 0] = np.sum(weight * ax[0][None, None, :])
        grad_x[idx, 1] = np.sum(weight * ax[1][None, :, None])
        grad_x[idx, 2] = np.sum(weight * ax[2][:, None, None])
    return loss, prior.matrix.T @ grad_x


class DensityLikelihood:
    """Binding-facing wrapper: renders at the current iterate every call."""

    def __init__(self, map_obs: DensityMap, spec: AtomSpec,
                 prior: CorrelatedPrior, window: str = "sharp",
                 label: str = "density"):
        self.map_obs = map_obs
        self.spec = spec
        self.prior = prior
        self.window = window
        self.label = label

    def evaluate(self, z, coords=None, r_t=None):
        if coords is None:
            coords = self.prior.matrix @ np.asarray(z, dtype=float)
        return density_loglik_grad(self.map_obs, coords, self.spec, r_t,
                                   self.prior, self.window)

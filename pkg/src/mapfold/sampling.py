"""Measurement-set generation: regular residue masks and random distance pairs."""

from __future__ import annotations

import warnings

import numpy as np

from .prior import ATOMS_PER_RESIDUE, BackboneChain
from .likelihood import DistanceSet, MaskedLinearMeasurement


def sample_mask(n_residues: int, k: int) -> np.ndarray:
    """Atom rows of every k-th residue (all four atoms each), starting at 0."""
    if k < 1:
        raise ValueError("subsample factor k must be >= 1")
    if k > n_residues:
        warnings.warn(f"k={k} exceeds the chain length {n_residues}; "
                      "selecting a single residue", stacklevel=2)
    selected = np.arange(0, n_residues, k)
    rows = (ATOMS_PER_RESIDUE * selected[:, None]
            + np.arange(ATOMS_PER_RESIDUE)[None, :]).ravel()
    return rows


def mask_measurement(chain: BackboneChain, k: int, noise: float = 0.0,
                     rng=None, noise_scale: float = 1.0) -> MaskedLinearMeasurement:
    """Observe every k-th fully modelled residue, optionally jittered."""
    rows = sample_mask(chain.n_residues, k)
    rows = rows[chain.present_mask[rows]]
    if rows.size == 0:
        raise ValueError("no modelled atoms under this mask")
    observed = chain.coords[rows].copy()
    if noise > 0.0:
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        observed += noise * rng.standard_normal(observed.shape)
    return MaskedLinearMeasurement(rows, observed, subsample_factor=k,
                                   noise_scale=noise_scale)


def measurement_from_partial(partial: BackboneChain,
                             reference: BackboneChain) -> MaskedLinearMeasurement:
    """Turn an incomplete model into a masked observation of the reference frame.

    Rows are matched by residue id; partial residues absent from the
    reference numbering are an error.
    """
    ref_index = {int(rid): i for i, rid in enumerate(reference.residue_ids)}
    rows = []
    obs = []
    for r in partial.present_residues():
        rid = int(partial.residue_ids[r])
        if rid not in ref_index:
            raise ValueError(f"partial-model residue {rid} not in the reference")
        base = ATOMS_PER_RESIDUE * ref_index[rid]
        for k in range(ATOMS_PER_RESIDUE):
            rows.append(base + k)
            obs.append(partial.coords[ATOMS_PER_RESIDUE * r + k])
    if not rows:
        raise ValueError("partial model has no fully modelled residues")
    return MaskedLinearMeasurement(np.array(rows), np.array(obs))


def sample_distances(chain: BackboneChain, m: int, rng_seed,
                     include_true: bool = True) -> DistanceSet:
    """Uniform sample of m unordered alpha-carbon pairs without replacement."""
    n = chain.n_residues
    total = n * (n - 1) // 2
    if not 1 <= m <= total:
        raise ValueError(f"m must lie in [1, {total}] for {n} residues")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) \
        else np.random.default_rng(rng_seed)
    iu = np.triu_indices(n, k=1)
    chosen = rng.choice(total, size=m, replace=False)
    res_i, res_j = iu[0][chosen], iu[1][chosen]
    ca = chain.ca_rows()
    pairs = np.stack([ca[res_i], ca[res_j]], axis=1)
    if include_true:
        measured = np.linalg.norm(chain.coords[pairs[:, 0]]
                                  - chain.coords[pairs[:, 1]], axis=1)
    else:
        measured = np.zeros(m)
    return DistanceSet(pairs, measured)


def delete_residues(chain: BackboneChain, fraction: float, rng_seed,
                    noise: float = 0.0) -> BackboneChain:
    """Synthesize a partial model: drop a random residue fraction, jitter the rest."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) \
        else np.random.default_rng(rng_seed)
    present = chain.present_residues()
    n_drop = int(round(fraction * len(present)))
    drop = set(rng.choice(present, size=n_drop, replace=False).tolist())
    mask = chain.present_mask.copy()
    coords = chain.coords.copy()
    for r in drop:
        sl = slice(ATOMS_PER_RESIDUE * r, ATOMS_PER_RESIDUE * (r + 1))
        mask[sl] = False
        coords[sl] = 0.0
    if noise > 0.0:
        jitter = noise * rng.standard_normal(coords.shape)
        coords[mask] += jitter[mask]
    return BackboneChain(chain.n_residues, coords, mask,
                         chain.residue_ids.copy())

"""Structure accuracy metrics: RMSD, rigid superposition, completeness curves."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .prior import ATOMS_PER_RESIDUE, BackboneChain

RMSD_ATOM_CHOICES = ("ca_only", "backbone")
RMSD_ALIGN_CHOICES = ("none", "rigid")


@dataclass
class MetricRecord:
    replica: int | str
    task: str
    rmsd: float
    completeness: float
    loss: float

    def __post_init__(self):
        if self.rmsd < 0:
            raise ValueError("rmsd must be >= 0")


def write_metrics_csv(records, path) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("replica,task,rmsd,completeness,loss\n")
        for r in records:
            fh.write(f"{r.replica},{r.task},{repr(float(r.rmsd))},"
                     f"{repr(float(r.completeness))},{repr(float(r.loss))}\n")


def kabsch(mobile: np.ndarray, fixed: np.ndarray):
    """Least-squares superposition: proper rotation + translation.

    Returns (rotation, translation) mapping mobile onto fixed; the
    determinant of the rotation is forced to +1 (no mirroring).
    """
    mob_c = mobile.mean(axis=0)
    fix_c = fixed.mean(axis=0)
    h = (mobile - mob_c).T @ (fixed - fix_c)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(u @ vt))
    flip = np.diag([1.0, 1.0, d])
    rot = (u @ flip @ vt).T
    return rot, fix_c - rot @ mob_c


def _selected_rows(pred: BackboneChain, target: BackboneChain, atoms: str):
    if pred.n_residues != target.n_residues:
        raise ValueError("chains must have equal residue counts")
    if atoms not in RMSD_ATOM_CHOICES:
        raise ValueError(f"atoms must be one of {RMSD_ATOM_CHOICES}")
    rows = target.ca_rows() if atoms == "ca_only" \
        else np.arange(target.n_atoms)
    rows = rows[target.present_mask[rows] & pred.present_mask[rows]]
    if rows.size == 0:
        raise ValueError("no overlapping modelled atoms")
    return rows


def rmsd(pred: BackboneChain, target: BackboneChain, atoms: str = "backbone",
         align: str = "none") -> float:
    """Root-mean-square deviation over atoms modelled in both chains.

    ``align='rigid'`` first removes the best proper rotation + translation;
    a warning is issued when the mirror image would fit strictly better.
    """
    if align not in RMSD_ALIGN_CHOICES:
        raise ValueError(f"align must be one of {RMSD_ALIGN_CHOICES}")
    rows = _selected_rows(pred, target, atoms)
    p = pred.coords[rows]
    q = target.coords[rows]
    if align == "rigid":
        rot, trans = kabsch(p, q)
        p = p @ rot.T + trans
        # mirror check: allow an improper map and compare
        h = ((pred.coords[rows]) - pred.coords[rows].mean(0)).T @ (q - q.mean(0))
        u, s, vt = np.linalg.svd(h)
        n_pts = rows.size
        var = np.sum((pred.coords[rows] - pred.coords[rows].mean(0)) ** 2) \
            + np.sum((q - q.mean(0)) ** 2)
        best_proper = var - 2 * (s[0] + s[1] + np.sign(np.linalg.det(u @ vt)) * s[2])
        best_improper = var - 2 * (s[0] + s[1] + abs(s[2]))
        if best_improper < best_proper - 1e-9 * max(1.0, var):
            warnings.warn("mirror image fits better than any proper rotation",
                          stacklevel=2)
    return float(np.sqrt(np.mean(np.sum((p - q) ** 2, axis=1))))


def rmsd_vs_completeness(pred: BackboneChain, target: BackboneChain,
                         grid_step: int = 1):
    """Best-X% alpha-carbon RMSD curve, X in percent of all target residues.

    Deviations are computed without alignment, sorted ascending; the value
    at X is the RMSD over the ceil(X% * N) best alpha carbons.  The curve
    stops at the completeness the prediction actually reaches and is
    nondecreasing in X by construction.
    """
    ca = target.ca_rows()
    both = target.present_mask[ca] & pred.present_mask[ca]
    dev2 = np.sort(np.sum((pred.coords[ca[both]] - target.coords[ca[both]]) ** 2,
                          axis=1))
    n_total = target.n_residues
    n_have = dev2.size
    if n_have == 0:
        raise ValueError("no overlapping modelled alpha carbons")
    cum = np.cumsum(dev2)
    curve = []
    for x in range(grid_step, 101, grid_step):
        count = max(1, math.ceil(x / 100.0 * n_total))
        if count > n_have:
            break
        curve.append((float(x), float(np.sqrt(cum[count - 1] / count))))
    return curve

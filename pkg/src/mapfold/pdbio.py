"""Fixed-column PDB reading and writing for backbone chains.

Only ATOM records of the first model and first chain are considered.
Malformed fixed-column fields raise instead of being guessed at.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np

from .prior import ATOMS_PER_RESIDUE, BACKBONE_ATOM_NAMES, BackboneChain


class PdbParseError(ValueError):
    pass


def parse_backbone(pdb_text: str) -> BackboneChain:
    """Extract the N, CA, C, O atoms of the first chain into a chain record.

    Residues are ordered by sequence number (reordering triggers a warning);
    a residue missing any of the four atoms keeps its rows but is flagged
    absent in the mask, with the missing rows zero-filled.
    """
    residues: dict[int, dict[str, np.ndarray]] = {}
    order: list[int] = []
    chain_id = None
    for lineno, line in enumerate(pdb_text.splitlines(), start=1):
        rec = line[:6]
        if rec.startswith("ENDMDL"):
            break
        if not rec.startswith("ATOM"):
            continue
        name = line[12:16].strip()
        if name not in BACKBONE_ATOM_NAMES:
            continue
        altloc = line[16]
        if altloc not in (" ", "", "A"):
            continue
        this_chain = line[21]
        if chain_id is None:
            chain_id = this_chain
        elif this_chain != chain_id:
            continue
        try:
            resseq = int(line[22:26])
            xyz = np.array([float(line[30:38]), float(line[38:46]),
                            float(line[46:54])])
        except (ValueError, IndexError) as exc:
            raise PdbParseError(f"malformed ATOM record on line {lineno}: "
                                f"{line.rstrip()!r}") from exc
        if resseq not in residues:
            residues[resseq] = {}
            order.append(resseq)
        residues[resseq].setdefault(name, xyz)  # first occurrence wins
    if not residues:
        raise PdbParseError("no backbone ATOM records found")
    if order != sorted(order):
        warnings.warn("non-monotonic residue numbering; reordering by "
                      "sequence number", stacklevel=2)
        order = sorted(order)
    n = len(order)
    coords = np.zeros((ATOMS_PER_RESIDUE * n, 3))
    mask = np.zeros(ATOMS_PER_RESIDUE * n, dtype=bool)
    for r, resseq in enumerate(order):
        atoms = residues[resseq]
        complete = all(a in atoms for a in BACKBONE_ATOM_NAMES)
        for k, name in enumerate(BACKBONE_ATOM_NAMES):
            row = ATOMS_PER_RESIDUE * r + k
            if name in atoms:
                coords[row] = atoms[name]
            mask[row] = complete
    return BackboneChain(n, coords, mask, np.array(order))


_ELEMENTS = ("N", "C", "C", "O")


def format_backbone(chain: BackboneChain, res_name: str = "GLY") -> str:
    """Render the modelled residues as single-chain backbone ATOM records."""
    lines = []
    serial = 1
    for r in chain.present_residues():
        resseq = int(chain.residue_ids[r])
        for k, name in enumerate(BACKBONE_ATOM_NAMES):
            x, y, z = chain.coords[ATOMS_PER_RESIDUE * r + k]
            lines.append(
                f"ATOM  {serial:5d}  {name:<3s} {res_name:>3s} A{resseq:4d}    "
                f"{x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{0.0:6.2f}          "
                f"{_ELEMENTS[k]:>2s}"
            )
            serial += 1
    lines.append("TER")
    lines.append("END")
    return "\n".join(lines) + "\n"


def write_backbone(chain: BackboneChain, path, res_name: str = "GLY") -> None:
    """Whole-file atomic write (temp file then rename)."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(format_backbone(chain, res_name))
    tmp.replace(path)


def read_backbone(path) -> BackboneChain:
    return parse_backbone(Path(path).read_text())

"""MRC2014 volume files, mode 2 (little-endian float32), cubic cells.

Data is laid out X-fastest on disk, matching the in-memory grid[iz, iy, ix]
convention, so values round-trip bit for bit.  Both the integer start
indices and the float origin words are populated from the map origin.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .density import DensityMap

HEADER_SIZE = 1024
_MAP_MAGIC = b"MAP "
_MACHST_LE = b"\x44\x44\x00\x00"


class MrcFormatError(ValueError):
    pass


def write_mrc(dmap: DensityMap, path) -> None:
    """Whole-file atomic write of the map as mode-2 MRC2014."""
    grid = np.ascontiguousarray(dmap.grid, dtype="<f4")
    nz, ny, nx = grid.shape
    voxel = float(dmap.voxel_size)
    header = bytearray(HEADER_SIZE)
    struct.pack_into("<3i", header, 0, nx, ny, nz)
    struct.pack_into("<i", header, 12, 2)  # mode 2
    starts = [int(round(float(o) / voxel)) for o in dmap.origin]
    struct.pack_into("<3i", header, 16, *starts)
    struct.pack_into("<3i", header, 28, nx, ny, nz)          # sampling mx,my,mz
    struct.pack_into("<3f", header, 40, nx * voxel, ny * voxel, nz * voxel)
    struct.pack_into("<3f", header, 52, 90.0, 90.0, 90.0)
    struct.pack_into("<3i", header, 64, 1, 2, 3)             # axis order x,y,z
    stats = grid.astype(np.float64)
    struct.pack_into("<3f", header, 76, float(stats.min()), float(stats.max()),
                     float(stats.mean()))
    struct.pack_into("<i", header, 88, 1)    # spacegroup: 3-D volume
    struct.pack_into("<i", header, 92, 0)    # no extended header
    header[104:108] = b"MRCO"
    struct.pack_into("<i", header, 108, 20140)
    struct.pack_into("<3f", header, 196, *[float(o) for o in dmap.origin])
    header[208:212] = _MAP_MAGIC
    header[212:216] = _MACHST_LE
    struct.pack_into("<f", header, 216, float(stats.std()))
    label = b"mapfold volume"
    struct.pack_into("<i", header, 220, 1)
    header[224:224 + len(label)] = label
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(bytes(header))
        fh.write(grid.tobytes())
    tmp.replace(path)


def read_mrc(path, resolution: float | None = None,
             blur_sigma: float = 0.0) -> DensityMap:
    """Load a mode-2 MRC2014 volume; the declared resolution is caller-supplied."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise MrcFormatError("file shorter than an MRC header")
    nx, ny, nz = struct.unpack_from("<3i", raw, 0)
    (mode,) = struct.unpack_from("<i", raw, 12)
    if mode != 2:
        raise MrcFormatError(f"unsupported MRC mode {mode}; only mode 2 is handled")
    if raw[208:212] != _MAP_MAGIC:
        raise MrcFormatError("missing MAP magic; not an MRC2014 file")
    machst = raw[212:214]
    if machst != _MACHST_LE[:2]:
        raise MrcFormatError(f"unsupported byte order stamp {machst!r}")
    if not (nx == ny == nz):
        raise MrcFormatError(f"grid {nx}x{ny}x{nz} is not cubic")
    mx, my, mz = struct.unpack_from("<3i", raw, 28)
    cella = struct.unpack_from("<3f", raw, 40)
    if mx <= 0:
        raise MrcFormatError("non-positive sampling count")
    voxel = cella[0] / mx
    starts = struct.unpack_from("<3i", raw, 16)
    origin_words = struct.unpack_from("<3f", raw, 196)
    if any(o != 0.0 for o in origin_words):
        origin = np.array(origin_words, dtype=float)
    else:
        origin = np.array(starts, dtype=float) * voxel
    (nsymbt,) = struct.unpack_from("<i", raw, 92)
    offset = HEADER_SIZE + nsymbt
    count = nx * ny * nz
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    if data.size != count:
        raise MrcFormatError("truncated data section")
    grid = data.reshape(nz, ny, nx).copy()
    return DensityMap(grid, voxel, origin, resolution, blur_sigma)

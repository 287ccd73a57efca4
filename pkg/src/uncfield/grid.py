"""Dense axis-aligned voxel grids with trilinear interpolation.

Values live at grid vertices (a resolution of N counts vertices, so there
are N-1 cells per axis).  Storage is a flat float64 array, row-major with
x fastest, one row of C channels per vertex.  This is the shared substrate
for the density, color and uncertainty fields.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

GRID_MAGIC = b"VXGD"
GRID_FORMAT_VERSION = 1
_HEADER_STRUCT = struct.Struct("<4s6H6d")  # magic, version, nx, ny, nz, channels, reserved, bbox
assert _HEADER_STRUCT.size == 64


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, min strictly below max on every axis."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", np.asarray(self.min, dtype=np.float64).reshape(3))
        object.__setattr__(self, "max", np.asarray(self.max, dtype=np.float64).reshape(3))
        if not np.all(self.min < self.max):
            raise ValueError(f"bbox min {self.min} must be < max {self.max} componentwise")

    @property
    def size(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def half_diagonal(self) -> float:
        return float(0.5 * np.linalg.norm(self.size))

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.all((x >= self.min) & (x <= self.max), axis=-1)


@dataclass
class VoxelGrid:
    """Dense vertex-centered grid of C channels over a bounding box.

    ``values`` has shape (Nx*Ny*Nz, C); vertex (ix, iy, iz) lives at flat
    index ix + Nx*(iy + Ny*iz).
    """

    resolution: tuple
    channels: int
    bbox: BoundingBox
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        nx, ny, nz = (int(n) for n in self.resolution)
        if min(nx, ny, nz) < 2:
            raise ValueError(f"resolution must be >= 2 per axis, got {self.resolution}")
        self.resolution = (nx, ny, nz)
        self.channels = int(self.channels)
        if self.values is None:
            self.values = np.zeros((nx * ny * nz, self.channels), dtype=np.float64)
        else:
            self.values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(
                nx * ny * nz, self.channels
            )

    @property
    def num_vertices(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz

    def vertex_index(self, ix, iy, iz):
        nx, ny, _ = self.resolution
        return ix + nx * (iy + ny * iz)

    def vertex_positions(self) -> np.ndarray:
        """World positions of all vertices, same ordering as ``values``."""
        nx, ny, nz = self.resolution
        xs = np.linspace(self.bbox.min[0], self.bbox.max[0], nx)
        ys = np.linspace(self.bbox.min[1], self.bbox.max[1], ny)
        zs = np.linspace(self.bbox.min[2], self.bbox.max[2], nz)
        gz, gy, gx = np.meshgrid(zs, ys, xs, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1)

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.resolution, self.channels, self.bbox, self.values.copy())


def world_to_grid(grid: VoxelGrid, x) -> np.ndarray:
    """Map world positions to continuous grid coordinates.

    bbox.min maps to (0,0,0) and bbox.max to (Nx-1, Ny-1, Nz-1); positions
    outside the bbox yield coordinates outside [0, N-1], which callers must
    handle themselves.
    """
    x = np.asarray(x, dtype=np.float64)
    res = np.asarray(grid.resolution, dtype=np.float64)
    return (x - grid.bbox.min) / grid.bbox.size * (res - 1.0)


def grid_to_world(grid: VoxelGrid, g) -> np.ndarray:
    """Inverse of :func:`world_to_grid`."""
    g = np.asarray(g, dtype=np.float64)
    res = np.asarray(grid.resolution, dtype=np.float64)
    return grid.bbox.min + g / (res - 1.0) * grid.bbox.size


def _cell_and_frac(g, resolution):
    """Lower cell corner index and in-cell fraction for grid coords ``g``.

    On a shared cell face the lower-index cell is chosen (fraction hits 1
    exactly), so bbox.max lands in the last cell.  Coordinates are clamped
    to [0, N-1] first.
    """
    g = np.asarray(g, dtype=np.float64)
    res = np.asarray(resolution)
    g = np.clip(g, 0.0, res - 1.0)
    base = np.ceil(g).astype(np.int64) - 1
    base = np.clip(base, 0, res - 2)
    frac = g - base
    return base, frac


def interp_weights(grid: VoxelGrid, x):
    """Trilinear weights and vertex indices of the 8 enclosing corners.

    Returns ``(indices, weights)`` with shapes (..., 8); weights are
    non-negative and sum to 1, and the interpolated value equals the
    weighted sum of the 8 vertex values.
    """
    g = world_to_grid(grid, x)
    base, frac = _cell_and_frac(g, grid.resolution)
    nx, ny, _ = grid.resolution
    fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]
    wx = np.stack([1.0 - fx, fx], axis=-1)
    wy = np.stack([1.0 - fy, fy], axis=-1)
    wz = np.stack([1.0 - fz, fz], axis=-1)
    idx = np.empty(g.shape[:-1] + (8,), dtype=np.int64)
    wgt = np.empty(g.shape[:-1] + (8,), dtype=np.float64)
    k = 0
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                ix = base[..., 0] + dx
                iy = base[..., 1] + dy
                iz = base[..., 2] + dz
                idx[..., k] = ix + nx * (iy + ny * iz)
                wgt[..., k] = wx[..., dx] * wy[..., dy] * wz[..., dz]
                k += 1
    return idx, wgt


def enclosing_vertices(grid: VoxelGrid, x) -> np.ndarray:
    """Indices of the 8 corners of the cell containing ``x`` (lower cell on ties)."""
    idx, _ = interp_weights(grid, x)
    return idx


def trilinear_interp(grid: VoxelGrid, x) -> np.ndarray:
    """Trilinear blend of the 8 enclosing vertex values; exact at vertices."""
    idx, wgt = interp_weights(grid, x)
    vals = grid.values[idx]  # (..., 8, C)
    return np.einsum("...k,...kc->...c", wgt, vals)


def save_grid(grid: VoxelGrid, path) -> None:
    """Write the flat binary container: 64-byte header + little-endian f32 values."""
    nx, ny, nz = grid.resolution
    header = _HEADER_STRUCT.pack(
        GRID_MAGIC,
        GRID_FORMAT_VERSION,
        nx,
        ny,
        nz,
        grid.channels,
        0,
        *grid.bbox.min.tolist(),
        *grid.bbox.max.tolist(),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(grid.values.astype("<f4").tobytes())


def load_grid(path) -> VoxelGrid:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER_STRUCT.size)
        magic, version, nx, ny, nz, channels, _ = _HEADER_STRUCT.unpack(header)[:7]
        bbox_vals = _HEADER_STRUCT.unpack(header)[7:]
        if magic != GRID_MAGIC:
            raise ValueError(f"bad grid magic {magic!r} in {path}")
        if version != GRID_FORMAT_VERSION:
            raise ValueError(f"unsupported grid format version {version}")
        count = nx * ny * nz * channels
        raw = fh.read(4 * count)
        if len(raw) != 4 * count:
            raise ValueError(f"truncated grid file {path}")
        values = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(-1, channels)
    bbox = BoundingBox(np.array(bbox_vals[:3]), np.array(bbox_vals[3:]))
    return VoxelGrid((nx, ny, nz), channels, bbox, values)


def export_ply(grid: VoxelGrid, path, channel: int = 0, colorize: bool = False) -> None:
    """Dump one scalar channel as an ASCII PLY point cloud, one point per vertex.

    With ``colorize`` the point color encodes the value (red at 1, light
    gray at 0), which is how the uncertainty field is inspected.
    """
    pos = grid.vertex_positions()
    val = grid.values[:, channel]
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {grid.num_vertices}",
        "property float x",
        "property float y",
        "property float z",
        "property float value",
    ]
    if colorize:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    body = []
    if colorize:
        v01 = np.clip(val, 0.0, 1.0)
        red = np.round(200 + 55 * v01).astype(int)
        grn = np.round(200 * (1.0 - v01)).astype(int)
        blu = np.round(200 * (1.0 - v01)).astype(int)
        for p, v, r, g, b in zip(pos, val, red, grn, blu):
            body.append(f"{p[0]:.6g} {p[1]:.6g} {p[2]:.6g} {v:.6g} {r} {g} {b}")
    else:
        for p, v in zip(pos, val):
            body.append(f"{p[0]:.6g} {p[1]:.6g} {p[2]:.6g} {v:.6g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines + body))
        fh.write("\n")

"""The 3D uncertainty field: a binary vertex grid marking unseen space.

Every vertex starts at 1 (everything unseen).  Marching training rays with
the deterministic learned density clears the 8 enclosing vertices of every
sample reached with transmittance above tau; clearing is monotone (a cell
seen from any ray stays seen), so the pass is idempotent and
order-independent.  Per-ray uncertainty accumulates transmittance-weighted
field values, scaled so one fully-uncertain step contributes 1, and is
squashed to [0, 1) with 1 - exp(-raw).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .field import StochasticRadianceField, query_density_params, sample_density
from .geometry import Camera, Ray, camera_rays, make_sample_ts
from .grid import BoundingBox, VoxelGrid, export_ply, trilinear_interp
from .render import default_step, transmittance_profile

DEFAULT_TAU = 0.1


@dataclass
class UncertaintyGrid:
    grid: VoxelGrid  # single channel, values in {0, 1}
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if not (0.0 < self.tau < 1.0):
            raise ValueError("tau must lie in (0, 1)")

    @property
    def values(self) -> np.ndarray:
        return self.grid.values[:, 0]

    def unseen_fraction(self) -> float:
        return float(self.values.mean())

    def copy(self) -> "UncertaintyGrid":
        return UncertaintyGrid(self.grid.copy(), self.tau)


def init_uncertainty_grid(resolution, bbox: BoundingBox, tau: float = DEFAULT_TAU) -> UncertaintyGrid:
    """All-ones grid: before any observation the whole scene is unseen."""
    g = VoxelGrid(resolution, 1, bbox)
    g.values[:] = 1.0
    return UncertaintyGrid(g, tau)


def _geom(grid: VoxelGrid):
    res = np.asarray(grid.resolution, dtype=np.int64)
    gmin = grid.bbox.min
    gscale = (res - 1.0) / grid.bbox.size
    return gmin, gscale, res


def _mean_sigma(field: StochasticRadianceField, positions) -> np.ndarray:
    mu, _ = query_density_params(field, positions)
    return sample_density((mu, np.zeros_like(mu)), 0.0, field.config.density_shift)


def update_from_ray(vh: UncertaintyGrid, field: StochasticRadianceField, ray: Ray,
                    step: float | None = None) -> None:
    """Reference single-ray update (numpy path; the batch path is the kernel).

    Marches with the deterministic mean density and clears the 8 enclosing
    vertices of every sample whose entry transmittance exceeds tau.
    """
    step = step or default_step(field)
    ts, delta = make_sample_ts(ray.t_near, ray.t_far, step)
    if len(ts) == 0:
        return
    pos = ray.origin[None, :] + ts[:, None] * ray.direction[None, :]
    sigma = _mean_sigma(field, pos)
    T = transmittance_profile(sigma, delta)
    seen = T[:-1] > vh.tau
    if not np.any(seen):
        return
    from .grid import enclosing_vertices

    idx = enclosing_vertices(vh.grid, pos[seen])
    vh.grid.values[idx.ravel(), 0] = 0.0


def update_from_camera(vh: UncertaintyGrid, field: StochasticRadianceField,
                       camera: Camera, step: float | None = None) -> None:
    """Kernel-backed update over every pixel ray of a camera."""
    step = step or default_step(field)
    o, d, tn, tf = camera_rays(camera, field.bbox)
    gmin, gscale, res = _geom(vh.grid)
    _kernels.update_vh(vh.grid.values[:, 0], field.density_grid.values,
                       o, d, tn, tf, vh.tau, step, field.config.density_shift,
                       gmin, gscale, res)


def estimate_uncertainty_field(field: StochasticRadianceField, cameras,
                               resolution=None, tau: float = DEFAULT_TAU,
                               step: float | None = None) -> UncertaintyGrid:
    """Fresh all-ones grid updated by every pixel ray of every camera.

    Regions never sampled by any ray keep the value 1.  The pass has no
    learnable parameters and is idempotent: re-running it on its own output
    camera set changes nothing.
    """
    resolution = resolution or field.resolution
    if tuple(resolution) != tuple(field.resolution):
        raise ValueError("uncertainty grid resolution must match the density grid")
    vh = init_uncertainty_grid(resolution, field.bbox, tau)
    for cam in cameras:
        update_from_camera(vh, field, cam, step)
    return vh


def pointwise_uncertainty(x, vh: UncertaintyGrid, field: StochasticRadianceField,
                          draws: int = 64, rng=None) -> float:
    """interp(V_H, x) plus the Monte-Carlo variance of the activated density."""
    rng = rng or np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    if vh.grid.bbox.contains(x):
        base = float(trilinear_interp(vh.grid, x[None, :])[0, 0])
    else:
        base = 1.0  # outside the bbox is by definition unobserved
    mu, beta = query_density_params(field, x)
    eps = rng.standard_normal(draws)
    sigma = sample_density((mu, beta), eps, field.config.density_shift)
    return base + float(np.var(sigma))


def ray_uncertainty(ray: Ray, vh: UncertaintyGrid, field: StochasticRadianceField,
                    step: float | None = None) -> float:
    """Reference single-ray accumulated uncertainty, normalized to [0, 1)."""
    step = step or default_step(field)
    ts, delta = make_sample_ts(ray.t_near, ray.t_far, step)
    if len(ts) == 0:
        return 0.0
    pos = ray.origin[None, :] + ts[:, None] * ray.direction[None, :]
    sigma = _mean_sigma(field, pos)
    T = transmittance_profile(sigma, delta)
    vals = trilinear_interp(vh.grid, pos)[:, 0]
    raw = float(np.sum(T[:-1] * vals * (delta / step)))
    return 1.0 - np.exp(-raw)


def ray_uncertainty_batch(vh: UncertaintyGrid, field: StochasticRadianceField,
                          o, d, tn, tf, step: float | None = None,
                          threads: int = 1) -> np.ndarray:
    """Kernel-backed U_H for a ray batch."""
    step = step or default_step(field)
    o = np.ascontiguousarray(o, dtype=np.float64)
    d = np.ascontiguousarray(d, dtype=np.float64)
    tn = np.ascontiguousarray(tn, dtype=np.float64)
    tf = np.ascontiguousarray(tf, dtype=np.float64)
    n = len(o)
    out = np.empty(n)
    gmin, gscale, res = _geom(vh.grid)

    def run(lo, hi):
        _kernels.uh_rays(vh.grid.values[:, 0], field.density_grid.values,
                         o[lo:hi], d[lo:hi], tn[lo:hi], tf[lo:hi],
                         step, field.config.density_shift, gmin, gscale, res,
                         out[lo:hi])

    if threads <= 1 or n < 256:
        run(0, n)
    else:
        bounds = np.linspace(0, n, threads + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(run, bounds[i], bounds[i + 1]) for i in range(threads)]
            for f in futures:
                f.result()
    return out


def uh_map(vh: UncertaintyGrid, field: StochasticRadianceField, camera: Camera,
           step: float | None = None, threads: int = 1) -> np.ndarray:
    """Per-pixel normalized U_H for a camera."""
    o, d, tn, tf = camera_rays(camera, field.bbox)
    u = ray_uncertainty_batch(vh, field, o, d, tn, tf, step, threads=threads)
    return u.reshape(camera.height, camera.width)


def combined_pixel_uncertainty(u_c, u_h):
    """Total pixel uncertainty: predictive variance plus unseen-region term."""
    return np.asarray(u_c) + np.asarray(u_h)


def export_uncertainty_ply(vh: UncertaintyGrid, path) -> None:
    """PLY point cloud with unseen vertices in red."""
    export_ply(vh.grid, path, channel=0, colorize=True)

"""Discrete volume rendering: ray sampling, transmittance, and stochastic pixels.

The single-ray operations here are the plain-numpy reference path; image
rendering dispatches to the numba kernels, and the test suite checks the
two against each other.  Per-trajectory noise is shared by every sample on
the trajectory, which is what makes the K color estimates a sample from
the field distribution rather than per-point jitter.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .field import (
    StochasticRadianceField,
    query_color_params,
    query_density_params,
    sample_color,
    sample_density,
)
from .geometry import Camera, Ray, camera_rays, make_sample_ts


@dataclass
class RaySamples:
    ts: np.ndarray  # (M,) ascending sample depths
    delta: np.ndarray  # (M,) segment lengths
    positions: np.ndarray  # (M, 3)


@dataclass
class PixelEstimate:
    colors: np.ndarray  # (K, 3)
    mean_color: np.ndarray  # (3,)
    u_c: float


def default_step(field: StochasticRadianceField) -> float:
    """Half the smallest voxel edge length."""
    res = np.asarray(field.resolution, dtype=np.float64)
    edges = field.bbox.size / (res - 1.0)
    return 0.5 * float(edges.min())


def sample_points(ray: Ray, step: float) -> RaySamples:
    """Midpoint samples at uniform spacing, last segment truncated."""
    if step <= 0:
        raise ValueError("step must be positive")
    ts, delta = make_sample_ts(ray.t_near, ray.t_far, step)
    positions = ray.origin[None, :] + ts[:, None] * ray.direction[None, :]
    return RaySamples(ts, delta, positions)


def transmittance_profile(sigma, delta) -> np.ndarray:
    """Accumulated transmittance T, length M+1 with T[0] = 1.

    T[i] is the transmittance at the entry of sample i; the final entry is
    the residual after all samples.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(sigma < 0) or np.any(delta <= 0):
        raise ValueError("need sigma >= 0 and delta > 0")
    att = np.exp(-sigma * delta)
    return np.concatenate([[1.0], np.cumprod(att)])


def composite_color(sigma, c, delta, background) -> np.ndarray:
    """Discrete quadrature of the volume rendering integral over one ray."""
    sigma = np.asarray(sigma, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    if len(sigma) == 0:
        return background.copy()
    T = transmittance_profile(sigma, delta)
    w = T[:-1] * (1.0 - np.exp(-sigma * delta))
    return w @ c + T[-1] * background


def compositing_weights(sigma, delta):
    """Per-sample weights and residual; they sum to exactly 1."""
    T = transmittance_profile(sigma, delta)
    w = T[:-1] * (1.0 - np.exp(-np.asarray(sigma) * np.asarray(delta)))
    return w, T[-1]


def _trajectory_color(field, samples: RaySamples, eps_sigma: float, eps_color: float) -> np.ndarray:
    mu_s, beta_s = query_density_params(field, samples.positions)
    sigma = sample_density((mu_s, beta_s), eps_sigma, field.config.density_shift)
    mu_c, beta_c = query_color_params(field, samples.positions)
    color = sample_color((mu_c, beta_c), eps_color)
    return composite_color(sigma, color, samples.delta, field.background)


def color_variance(colors: np.ndarray) -> float:
    """Predictive uncertainty: mean over channels of the population variance."""
    colors = np.asarray(colors, dtype=np.float64)
    return float(np.mean(np.var(colors, axis=0)))


def render_pixel_stochastic(field: StochasticRadianceField, ray: Ray, K: int, rng,
                            step: float | None = None) -> PixelEstimate:
    """K trajectories with one shared (eps_sigma, eps_color) draw each."""
    if K < 1:
        raise ValueError("need K >= 1")
    step = step or default_step(field)
    samples = sample_points(ray, step)
    eps = rng.standard_normal((K, 2))
    colors = np.empty((K, 3))
    if len(samples.ts) == 0:
        colors[:] = field.background
    else:
        for k in range(K):
            colors[k] = _trajectory_color(field, samples, eps[k, 0], eps[k, 1])
    mean = colors.mean(axis=0)
    return PixelEstimate(colors, mean, color_variance(colors))


def _grid_geom(field: StochasticRadianceField):
    res = np.asarray(field.resolution, dtype=np.int64)
    gmin = field.bbox.min
    gscale = (res - 1.0) / field.bbox.size
    return gmin, gscale, res


def render_rays(field: StochasticRadianceField, o, d, tn, tf, eps, step: float,
                threads: int = 1) -> np.ndarray:
    """Kernel-backed stochastic render of a ray batch.

    eps has shape (R, K, 2); the output is (R, K, 3).  With threads > 1 the
    batch is split into contiguous chunks, one kernel call each; chunks
    write disjoint output rows so the result is identical to a serial run.
    """
    o = np.ascontiguousarray(o, dtype=np.float64)
    d = np.ascontiguousarray(d, dtype=np.float64)
    tn = np.ascontiguousarray(tn, dtype=np.float64)
    tf = np.ascontiguousarray(tf, dtype=np.float64)
    eps = np.ascontiguousarray(eps, dtype=np.float64)
    n, K = eps.shape[0], eps.shape[1]
    out = np.empty((n, K, 3))
    gmin, gscale, res = _grid_geom(field)
    cfg = field.config
    bg = field.background

    def run(lo, hi):
        _kernels.forward_render(
            field.density_grid.values, field.color_grid.values,
            o[lo:hi], d[lo:hi], tn[lo:hi], tf[lo:hi],
            eps[lo:hi, :, 0], eps[lo:hi, :, 1],
            step, cfg.density_shift, cfg.beta_floor, bg, gmin, gscale, res,
            out[lo:hi],
        )

    if threads <= 1 or n < 256:
        run(0, n)
    else:
        bounds = np.linspace(0, n, threads + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(run, bounds[i], bounds[i + 1]) for i in range(threads)]
            for f in futures:
                f.result()
    return out


def render_image(field: StochasticRadianceField, camera: Camera, K: int = 16,
                 seed: int = 0, mode: str = "stochastic", step: float | None = None,
                 threads: int = 1):
    """Render a full camera image.

    stochastic mode returns (mean-of-K image, U_C map) with the per-pixel
    noise stream drawn up front and indexed by (pixel, k), so scheduling
    cannot change the result.  mean mode composites with eps = 0 and a zero
    U_C map.
    """
    if mode not in ("mean", "stochastic"):
        raise ValueError(f"unknown render mode {mode!r}")
    step = step or default_step(field)
    o, d, tn, tf = camera_rays(camera, field.bbox)
    n = len(o)
    if mode == "mean":
        eps = np.zeros((n, 1, 2))
    else:
        rng = np.random.default_rng(seed)
        eps = rng.standard_normal((n, K, 2))
    colors = render_rays(field, o, d, tn, tf, eps, step, threads=threads)
    img = colors.mean(axis=1).reshape(camera.height, camera.width, 3)
    u_c = np.var(colors, axis=1).mean(axis=-1).reshape(camera.height, camera.width)
    return img, u_c

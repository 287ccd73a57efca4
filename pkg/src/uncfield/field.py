"""Stochastic radiance field: Gaussian-parameter voxel grids for density and color.

Each density vertex stores a raw mean and a raw scale channel; each color
vertex stores three raw means and one raw scale.  Scales go through a
softplus with a small floor so they stay positive, density goes through a
shifted softplus (the shift biases a fresh field toward empty space), and
color means go through a sigmoid.  One scalar noise draw per trajectory
perturbs density and color via mu + eps * beta.

Color is view-independent by design: the synthetic scenes are Lambertian,
so a plain color grid stands in for a direction-conditioned head.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .grid import BoundingBox, VoxelGrid, load_grid, save_grid, trilinear_interp

DENSITY_CHANNELS = 2  # raw mean, raw scale
COLOR_CHANNELS = 4  # raw rgb means, raw scale

# Raw density mean reported for queries outside the bbox: activates to ~0.
OUTSIDE_RAW_DENSITY_MEAN = -15.0


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    """Inverse of softplus for y > 0."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * np.asarray(x, dtype=np.float64)) + 1.0)


@dataclass
class FieldConfig:
    """Activation and initialization settings for a stochastic field."""

    density_shift: float = -2.0
    beta_floor: float = 1e-4
    init_density_raw: float = -4.0
    init_beta: float = 0.1
    background: tuple = (1.0, 1.0, 1.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d

    @staticmethod
    def from_dict(d: dict) -> "FieldConfig":
        cfg = FieldConfig()
        for key, val in d.items():
            if hasattr(cfg, key):
                setattr(cfg, key, tuple(val) if key == "background" else val)
        return cfg


@dataclass
class StochasticRadianceField:
    density_grid: VoxelGrid
    color_grid: VoxelGrid
    config: FieldConfig

    @property
    def bbox(self) -> BoundingBox:
        return self.density_grid.bbox

    @property
    def resolution(self):
        return self.density_grid.resolution

    @property
    def background(self) -> np.ndarray:
        return np.asarray(self.config.background, dtype=np.float64)

    def copy(self) -> "StochasticRadianceField":
        return StochasticRadianceField(
            self.density_grid.copy(), self.color_grid.copy(), FieldConfig(**asdict(self.config))
        )


def init_field(resolution, bbox: BoundingBox, config: FieldConfig | None = None) -> StochasticRadianceField:
    """Fresh field: near-empty density prior, mid-gray color, beta ~ init_beta."""
    config = config or FieldConfig()
    raw_beta = float(softplus_inv(config.init_beta))
    den = VoxelGrid(resolution, DENSITY_CHANNELS, bbox)
    den.values[:, 0] = config.init_density_raw
    den.values[:, 1] = raw_beta
    col = VoxelGrid(resolution, COLOR_CHANNELS, bbox)
    col.values[:, :3] = 0.0
    col.values[:, 3] = raw_beta
    return StochasticRadianceField(den, col, config)


def _beta_from_raw(raw, floor):
    return np.maximum(softplus(raw), floor)


def query_density_params(field: StochasticRadianceField, x):
    """Interpolated (raw density mean, activated beta) at world positions.

    Outside the bbox the mean is a large negative constant and beta the
    floor, so sampled density is ~0 there: never-observed space stays empty.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = x.reshape(-1, 3)
    vals = trilinear_interp(field.density_grid, pts)
    mu = vals[:, 0]
    beta = _beta_from_raw(vals[:, 1], field.config.beta_floor)
    outside = ~field.bbox.contains(pts)
    mu = np.where(outside, OUTSIDE_RAW_DENSITY_MEAN, mu)
    beta = np.where(outside, field.config.beta_floor, beta)
    if single:
        return float(mu[0]), float(beta[0])
    return mu, beta


def sample_density(params, eps, shift: float = 0.0):
    """sigma = softplus(raw_mu + eps * beta + shift); non-negative for any eps."""
    mu, beta = params
    return softplus(np.asarray(mu) + np.asarray(eps) * np.asarray(beta) + shift)


def query_color_params(field: StochasticRadianceField, x):
    """Interpolated (activated rgb mean, beta) at world positions.

    Outside the bbox the mean is the configured background with beta at the
    floor.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = x.reshape(-1, 3)
    vals = trilinear_interp(field.color_grid, pts)
    mu = sigmoid(vals[:, :3])
    beta = _beta_from_raw(vals[:, 3], field.config.beta_floor)
    outside = ~field.bbox.contains(pts)
    if np.any(outside):
        mu = np.where(outside[:, None], field.background[None, :], mu)
        beta = np.where(outside, field.config.beta_floor, beta)
    if single:
        return mu[0], float(beta[0])
    return mu, beta


def sample_color(params, eps):
    """rgb = clamp(mu + eps * beta, 0, 1) with one eps shared across channels."""
    mu, beta = params
    mu = np.asarray(mu, dtype=np.float64)
    shift = np.asarray(np.asarray(eps) * np.asarray(beta), dtype=np.float64)
    while shift.ndim < mu.ndim:
        shift = shift[..., None]
    return np.clip(mu + shift, 0.0, 1.0)


def density_variance(field: StochasticRadianceField, x, draws: int, rng) -> float:
    """Monte-Carlo variance of the activated density at a point (K draws)."""
    mu, beta = query_density_params(field, x)
    eps = rng.standard_normal(draws)
    sigma = sample_density((mu, beta), eps, field.config.density_shift)
    return float(np.var(sigma))


# ---------------------------------------------------------------------------
# Checkpoints: two grid containers plus a JSON sidecar.


def save_checkpoint(field: StochasticRadianceField, directory, metadata: dict | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    save_grid(field.density_grid, os.path.join(directory, "density.grid"))
    save_grid(field.color_grid, os.path.join(directory, "color.grid"))
    sidecar = {"config": field.config.to_dict(), "metadata": metadata or {}}
    with open(os.path.join(directory, "field.json"), "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)


def load_checkpoint(directory) -> StochasticRadianceField:
    with open(os.path.join(directory, "field.json")) as fh:
        sidecar = json.load(fh)
    den = load_grid(os.path.join(directory, "density.grid"))
    col = load_grid(os.path.join(directory, "color.grid"))
    if den.resolution != col.resolution:
        raise ValueError("density/color grid resolution mismatch in checkpoint")
    return StochasticRadianceField(den, col, FieldConfig.from_dict(sidecar["config"]))

"""Ground-truth visibility oracle for the procedural scenes.

Everything here is computed from the analytic scene and camera geometry
alone (never from a trained field), so it can serve as the independent
reference when judging what the learned uncertainty field should mark.

Ray classes:
  EMPTY     hits nothing and travels only through observed space
  SURFACE   first hit is on geometry visible from some training camera
  OCCLUDED  first hit is inside a training frustum but blocked by geometry
  OUTSIDE   first hit (or the traversed empty run) was never covered by
            the training views
  BACKGROUND  the ray misses the scene bounding box entirely
"""

from __future__ import annotations

import numpy as np

from .geometry import Camera, GroundTruthScene, batched_sample_ts, camera_rays, gt_march_transmittance
from .grid import VoxelGrid, interp_weights, trilinear_interp

EMPTY, SURFACE, OCCLUDED, OUTSIDE, BACKGROUND = 0, 1, 2, 3, 4
CLASS_NAMES = {EMPTY: "empty", SURFACE: "surface", OCCLUDED: "occluded",
               OUTSIDE: "outside", BACKGROUND: "background"}

HIT_T = 0.5  # transmittance level defining "the ray has hit a surface"


def observed_vertex_grid(scene: GroundTruthScene, cameras, resolution, tau: float,
                         step: float) -> VoxelGrid:
    """Binary vertex grid of space seen from the given cameras (1 = seen).

    Exhaustive ray casting against the ground truth: every pixel ray of
    every camera marks the enclosing vertices of each sample it reaches
    with transmittance above tau.
    """
    g = VoxelGrid(resolution, 1, scene.bbox)
    for cam in cameras:
        o, d, tn, tf = camera_rays(cam, scene.bbox)
        ts, delta, _, T = gt_march_transmittance(scene, o, d, tn, tf, step)
        if ts.shape[1] == 0:
            continue
        seen = (T[:, :-1] > tau) & (delta > 0)
        pos = o[:, None, :] + ts[..., None] * d[:, None, :]
        idx = interp_weights(g, pos[seen])[0]
        g.values[idx.ravel(), 0] = 1.0
    return g


def point_visible_from(scene: GroundTruthScene, points, camera: Camera, tau: float,
                       step: float) -> np.ndarray:
    """True where the segment camera->point keeps transmittance above tau.

    The march stops half a step short of the point so a point sitting on a
    solid surface is not absorbed by its own material.
    """
    points = np.asarray(points, dtype=np.float64)
    o = camera.translation
    vec = points - o
    L = np.linalg.norm(vec, axis=-1)
    d = vec / np.maximum(L, 1e-12)[:, None]
    t_far = np.maximum(L - 0.5 * step, 0.0)
    t_near = np.zeros_like(t_far)
    ts, delta = batched_sample_ts(t_near, t_far, step)
    if ts.shape[1] == 0:
        return np.ones(len(points), dtype=bool)
    pos = o[None, None, :] + ts[..., None] * d[:, None, :]
    sigma = scene.occupancy(pos.reshape(-1, 3)).reshape(ts.shape)
    depth = np.sum(sigma * delta, axis=1)
    return np.exp(-depth) > tau


def in_frustum(camera: Camera, points) -> np.ndarray:
    """True where points project inside the image and in front of the camera."""
    points = np.asarray(points, dtype=np.float64)
    p_cam = (points - camera.translation) @ camera.rotation  # R^T (x - t)
    z = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * p_cam[:, 0] / z + camera.cx
        v = camera.fy * p_cam[:, 1] / z + camera.cy
    return (z > 0) & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)


def classify_rays(scene: GroundTruthScene, o, d, tn, tf, seen_grid: VoxelGrid,
                  train_cameras, step: float, min_unseen_run: int = 3) -> np.ndarray:
    """Classify rays into the five oracle classes.

    A ray hits at the first sample whose exit transmittance drops below
    HIT_T; the hit is SURFACE when the seen-grid interpolates above 0.5
    there, else OCCLUDED/OUTSIDE by the frustum test.  Non-hitting rays are
    OUTSIDE when they traverse at least ``min_unseen_run`` unseen samples.
    """
    o = np.asarray(o, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    n = len(o)
    out = np.full(n, BACKGROUND, dtype=np.int64)
    ts, delta, _, T = gt_march_transmittance(scene, o, d, tn, tf, step)
    if ts.shape[1] == 0:
        return out
    valid = delta > 0
    has_samples = valid.any(axis=1)
    hit = T[:, 1:] < HIT_T
    hit_any = hit.any(axis=1)
    hit_idx = np.argmax(hit, axis=1)
    pos = o[:, None, :] + ts[..., None] * d[:, None, :]

    # Hitting rays: look up the seen-grid at the hit point.
    rows = np.nonzero(hit_any)[0]
    if len(rows):
        hit_pts = pos[rows, hit_idx[rows]]
        seen = trilinear_interp(seen_grid, hit_pts)[:, 0] >= 0.5
        inside = np.zeros(len(rows), dtype=bool)
        for cam in train_cameras:
            inside |= in_frustum(cam, hit_pts)
        out[rows] = np.where(seen, SURFACE, np.where(inside, OCCLUDED, OUTSIDE))

    # Misses: count unseen samples along the ray.
    rows = np.nonzero(~hit_any & has_samples)[0]
    if len(rows):
        vals = trilinear_interp(seen_grid, pos[rows].reshape(-1, 3))[:, 0]
        unseen = (vals.reshape(len(rows), -1) < 0.5) & valid[rows]
        out[rows] = np.where(unseen.sum(axis=1) >= min_unseen_run, OUTSIDE, EMPTY)
    return out


def classify_camera_rays(scene: GroundTruthScene, camera: Camera, seen_grid: VoxelGrid,
                         train_cameras, step: float) -> np.ndarray:
    """Per-pixel oracle classes for one camera, shape (H, W)."""
    o, d, tn, tf = camera_rays(camera, scene.bbox)
    classes = classify_rays(scene, o, d, tn, tf, seen_grid, train_cameras, step)
    return classes.reshape(camera.height, camera.width)

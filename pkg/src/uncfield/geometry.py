"""Cameras, rays, and the procedural ground-truth scene generator.

Scenes are analytic: occupancy and albedo are vectorized functions of world
position, so the ground-truth oracle is exact and dependency-free.  The
camera model is a pinhole with x-right / y-down / z-forward axes and a
camera-to-world rigid transform.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from .grid import BoundingBox

_AXES = {"x": 0, "y": 1, "z": 2}


def parse_axis(spec: str):
    """Parse an axis+sign spec like "+x" or "-z" into (axis index, sign)."""
    spec = spec.strip().lower()
    sign = 1.0
    if spec[0] in "+-":
        sign = 1.0 if spec[0] == "+" else -1.0
        spec = spec[1:]
    if spec not in _AXES:
        raise ValueError(f"bad axis spec {spec!r}, expected one of +x -x +y -y +z -z")
    return _AXES[spec], sign


def axis_unit(spec: str) -> np.ndarray:
    axis, sign = parse_axis(spec)
    v = np.zeros(3)
    v[axis] = sign
    return v


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a camera-to-world pose (R orthonormal, t in world units)."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # 3x3, camera-to-world
    translation: np.ndarray  # 3, camera origin in world

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        R = self.rotation
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation must be orthonormal within 1e-9")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(
            d["width"], d["height"], d["fx"], d["fy"], d["cx"], d["cy"],
            np.array(d["rotation"]), np.array(d["translation"]),
        )


@dataclass(frozen=True)
class Ray:
    """Single ray with unit direction and integration bounds t_near <= t_far."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=np.float64).reshape(3))
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length within 1e-9")
        if self.t_near < 0 or self.t_near > self.t_far:
            raise ValueError("need 0 <= t_near <= t_far")


def look_at_rotation(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation for a camera at ``eye`` looking at ``target``.

    Columns are (right, down, forward) in world coordinates; falls back to a
    +y up-vector when the viewing direction is colinear with ``up``.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n == 0:
        raise ValueError("eye and target coincide")
    fwd = fwd / n
    up = np.asarray(up, dtype=np.float64)
    if np.linalg.norm(np.cross(fwd, up)) < 1e-8:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    down /= np.linalg.norm(down)
    return np.stack([right, down, fwd], axis=1)


def ray_bbox_span(origin, direction, bbox: BoundingBox):
    """Slab intersection of rays with a bbox.

    Returns (t_near, t_far) arrays; misses get t_near == t_far == 0 so they
    carry no samples and composite to pure background.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
        t0 = (bbox.min - origin) * inv
        t1 = (bbox.max - origin) * inv
    # Parallel rays: inside the slab -> (-inf, inf); outside -> empty.
    par = direction == 0.0
    if np.any(par):
        inside = (origin >= bbox.min) & (origin <= bbox.max)
        t0 = np.where(par, np.where(inside, -np.inf, np.inf), t0)
        t1 = np.where(par, np.where(inside, np.inf, -np.inf), t1)
    lo = np.minimum(t0, t1).max(axis=-1)
    hi = np.maximum(t0, t1).min(axis=-1)
    lo = np.maximum(lo, 0.0)
    hit = lo < hi
    t_near = np.where(hit, lo, 0.0)
    t_far = np.where(hit, hi, 0.0)
    return t_near, t_far


def generate_ray(camera: Camera, px, bbox: Optional[BoundingBox] = None) -> Ray:
    """Ray through continuous image coordinates ``px`` = (x, y).

    Integer pixel (i, j) maps to image coordinates (i + 0.5, j + 0.5): the
    pixel center.  When a bbox is given the bounds come from the slab
    intersection; otherwise t_near=0 and t_far is a large constant.
    """
    x, y = float(px[0]), float(px[1])
    if not (0 <= x < camera.width and 0 <= y < camera.height):
        raise ValueError(f"pixel ({x}, {y}) outside image {camera.width}x{camera.height}")
    d_cam = np.array([(x - camera.cx) / camera.fx, (y - camera.cy) / camera.fy, 1.0])
    d = camera.rotation @ d_cam
    d /= np.linalg.norm(d)
    if bbox is None:
        return Ray(camera.translation, d, 0.0, 1e6)
    t_near, t_far = ray_bbox_span(camera.translation[None, :], d[None, :], bbox)
    return Ray(camera.translation, d, float(t_near[0]), float(t_far[0]))


def camera_rays(camera: Camera, bbox: BoundingBox):
    """All pixel-center rays of a camera, batched.

    Returns (origins, directions, t_near, t_far), each with the pixel rows
    flattened row-major (y outer, x inner) to length width*height.
    """
    xs = (np.arange(camera.width) + 0.5 - camera.cx) / camera.fx
    ys = (np.arange(camera.height) + 0.5 - camera.cy) / camera.fy
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    d_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1).reshape(-1, 3)
    d = d_cam @ camera.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.translation, d.shape).copy()
    t_near, t_far = ray_bbox_span(o, d, bbox)
    return o, d, t_near, t_far


# ---------------------------------------------------------------------------
# Procedural ground-truth scenes


@dataclass
class SceneObject:
    kind: str  # "sphere" | "box"
    albedo: np.ndarray
    center: np.ndarray = None  # sphere
    radius: float = 0.0  # sphere
    lo: np.ndarray = None  # box
    hi: np.ndarray = None  # box

    def contains(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "sphere":
            return np.linalg.norm(x - self.center, axis=-1) <= self.radius
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)

    def surface_points(self, count: int, rng) -> np.ndarray:
        """Uniform-ish surface samples, used by visibility checks."""
        if self.kind == "sphere":
            v = rng.standard_normal((count, 3))
            v /= np.linalg.norm(v, axis=-1, keepdims=True)
            return self.center + self.radius * v
        # Sample each box face proportionally to nothing fancy: uniform per face.
        pts = []
        per_face = max(count // 6, 1)
        size = self.hi - self.lo
        for axis in range(3):
            for side in (self.lo, self.hi):
                p = self.lo + rng.random((per_face, 3)) * size
                p[:, axis] = side[axis]
                pts.append(p)
        return np.concatenate(pts, axis=0)


@dataclass
class BoxSceneSpec:
    """Parameters of the hollow-box scene with one open face."""

    center: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    outer_size: float = 1.0
    wall_thickness: float = 0.08
    opening_axis: str = "+x"
    opening_fraction: float = 0.6  # aperture side / face side
    wall_albedo: np.ndarray = dc_field(default_factory=lambda: np.array([0.45, 0.52, 0.62]))
    solid_density: float = 500.0
    objects: list = dc_field(default_factory=list)
    background: np.ndarray = dc_field(default_factory=lambda: np.ones(3))
    bbox_margin: float = 0.2

    @staticmethod
    def from_dict(d: dict) -> "BoxSceneSpec":
        spec = BoxSceneSpec()
        box = d.get("box", {})
        if "center" in box:
            spec.center = np.asarray(box["center"], dtype=np.float64)
        for key in ("outer_size", "wall_thickness", "opening_axis", "opening_fraction", "solid_density"):
            if key in box:
                setattr(spec, key, box[key])
        if "wall_albedo" in box:
            spec.wall_albedo = np.asarray(box["wall_albedo"], dtype=np.float64)
        if "objects" in box:
            spec.objects = []
            for obj in box["objects"]:
                albedo = np.asarray(obj["albedo"], dtype=np.float64)
                if obj["type"] == "sphere":
                    spec.objects.append(
                        SceneObject("sphere", albedo, center=np.asarray(obj["center"], dtype=np.float64),
                                    radius=float(obj["radius"]))
                    )
                elif obj["type"] == "box":
                    spec.objects.append(
                        SceneObject("box", albedo, lo=np.asarray(obj["min"], dtype=np.float64),
                                    hi=np.asarray(obj["max"], dtype=np.float64))
                    )
                else:
                    raise ValueError(f"unknown object type {obj['type']!r}")
        if "background" in d:
            spec.background = np.asarray(d["background"], dtype=np.float64)
        if "bbox_margin" in d:
            spec.bbox_margin = float(d["bbox_margin"])
        return spec


def default_box_objects(center, inner_half):
    """Two interior objects with saturated, distinct colors."""
    c = np.asarray(center, dtype=np.float64)
    s = inner_half
    return [
        SceneObject("sphere", np.array([0.85, 0.2, 0.15]),
                    center=c + np.array([-0.25, -0.3, -0.35]) * s, radius=0.38 * s),
        SceneObject("box", np.array([0.15, 0.55, 0.2]),
                    lo=c + np.array([-0.2, 0.15, -0.9]) * s,
                    hi=c + np.array([0.55, 0.85, -0.1]) * s),
    ]


@dataclass
class GroundTruthScene:
    """Analytic occupancy+albedo oracle with a constant background color."""

    occupancy: Callable[[np.ndarray], np.ndarray]
    albedo: Callable[[np.ndarray], np.ndarray]
    background: np.ndarray
    bbox: BoundingBox
    spec: Optional[BoxSceneSpec] = None

    @property
    def objects(self):
        return self.spec.objects if self.spec is not None else []


def build_box_scene(spec: BoxSceneSpec) -> GroundTruthScene:
    """Hollow box with 5 solid walls, one square opening, and interior objects.

    Interior objects are only visible through the opening, which is what
    creates the occluded region for everything trained from the opposite
    hemisphere.
    """
    half = 0.5 * float(spec.outer_size)
    wall = float(spec.wall_thickness)
    if wall >= half:
        raise ValueError(f"wall thickness {wall} must be < half box size {half}")
    center = np.asarray(spec.center, dtype=np.float64)
    outer_lo = center - half
    outer_hi = center + half
    inner_lo = outer_lo + wall
    inner_hi = outer_hi - wall
    axis, sign = parse_axis(spec.opening_axis)
    ap_half = 0.5 * float(spec.opening_fraction) * spec.outer_size
    if spec.objects:
        objects = spec.objects
    else:
        objects = default_box_objects(center, half - wall)
    solid = float(spec.solid_density)
    background = np.asarray(spec.background, dtype=np.float64)
    wall_albedo = np.asarray(spec.wall_albedo, dtype=np.float64)

    def wall_mask(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        in_outer = np.all((x >= outer_lo) & (x <= outer_hi), axis=-1)
        in_inner = np.all((x > inner_lo) & (x < inner_hi), axis=-1)
        shell = in_outer & ~in_inner
        # Carve the aperture: points in the opening-face slab whose cross
        # coordinates fall inside the square hole are empty.
        slab_lo = outer_hi[axis] - wall if sign > 0 else outer_lo[axis]
        slab_hi = outer_hi[axis] if sign > 0 else outer_lo[axis] + wall
        in_slab = (x[..., axis] >= slab_lo) & (x[..., axis] <= slab_hi)
        cross = [i for i in range(3) if i != axis]
        in_hole = in_slab
        for i in cross:
            in_hole = in_hole & (np.abs(x[..., i] - center[i]) < ap_half)
        return shell & ~in_hole

    def occupancy(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        occ = wall_mask(x)
        for obj in objects:
            occ = occ | obj.contains(x)
        return np.where(occ, solid, 0.0)

    def albedo(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.broadcast_to(background, x.shape).copy()
        out[wall_mask(x)] = wall_albedo
        for obj in objects:
            out[obj.contains(x)] = obj.albedo
        return out

    margin = float(spec.bbox_margin)
    bbox = BoundingBox(outer_lo - margin, outer_hi + margin)
    spec = BoxSceneSpec(**{**spec.__dict__, "objects": objects})
    return GroundTruthScene(occupancy, albedo, background, bbox, spec)


# ---------------------------------------------------------------------------
# Camera rigs


@dataclass
class CameraRig:
    """Ordered list of inward-facing cameras with train/candidate/test labels."""

    cameras: list
    splits: list  # "train" | "candidate" | "test" per camera

    def indices(self, split: str):
        return [i for i, s in enumerate(self.splits) if s == split]

    def cameras_of(self, split: str):
        return [self.cameras[i] for i in self.indices(split)]

    def to_dict(self) -> dict:
        return {
            "cameras": [c.to_dict() for c in self.cameras],
            "splits": list(self.splits),
        }

    @staticmethod
    def from_dict(d: dict) -> "CameraRig":
        return CameraRig([Camera.from_dict(c) for c in d["cameras"]], list(d["splits"]))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @staticmethod
    def load(path) -> "CameraRig":
        with open(path) as fh:
            return CameraRig.from_dict(json.load(fh))


def _uniform_sphere(count: int, rng) -> np.ndarray:
    v = rng.standard_normal((count, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _uniform_cap(count: int, axis_dir: np.ndarray, cap_degrees: float, rng) -> np.ndarray:
    """Uniform directions within ``cap_degrees`` of ``axis_dir`` (90 = hemisphere)."""
    cos_min = np.cos(np.radians(cap_degrees))
    out = np.empty((count, 3))
    have = 0
    while have < count:
        v = _uniform_sphere(2 * (count - have) + 8, rng)
        keep = v @ axis_dir > max(cos_min, 1e-9)  # strictly inside
        v = v[keep]
        take = min(len(v), count - have)
        out[have:have + take] = v[:take]
        have += take
    return out


def _auto_focal(width: int, bbox: BoundingBox, radius: float, margin: float = 1.12) -> float:
    """Focal length putting the bbox sphere inside the image with a margin."""
    half_fov = np.arcsin(min(margin * bbox.half_diagonal / radius, 0.99))
    return 0.5 * width / np.tan(half_fov)


def make_camera(position, target, width, height, focal) -> Camera:
    R = look_at_rotation(position, target)
    return Camera(width, height, focal, focal, width / 2.0, height / 2.0, R, position)


def sample_hemisphere_rig(
    scene_bbox: BoundingBox,
    train: int = 5,
    candidate: int = 50,
    test: int = 12,
    hemisphere: str = "-x",
    cap_degrees: float = 90.0,
    radius_scale: float = 3.0,
    width: int = 64,
    height: int = 64,
    fov_deg: Optional[float] = None,
    seed: int = 0,
) -> CameraRig:
    """Sample an inward-facing rig around the scene.

    Train cameras lie strictly within the spherical cap around
    ``hemisphere`` (cap_degrees=90 is the full hemisphere); candidate and
    test cameras are uniform over the whole sphere.  Deterministic for a
    fixed seed.
    """
    if train < 1:
        raise ValueError("need at least one training camera")
    rng = np.random.default_rng(seed)
    center = scene_bbox.center
    radius = radius_scale * scene_bbox.half_diagonal
    if fov_deg is None:
        focal = _auto_focal(width, scene_bbox, radius)
    else:
        focal = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
    axis_dir = axis_unit(hemisphere)
    cams, splits = [], []
    for d in _uniform_cap(train, axis_dir, cap_degrees, rng):
        cams.append(make_camera(center + radius * d, center, width, height, focal))
        splits.append("train")
    for d in _uniform_sphere(candidate, rng):
        cams.append(make_camera(center + radius * d, center, width, height, focal))
        splits.append("candidate")
    for d in _uniform_sphere(test, rng):
        cams.append(make_camera(center + radius * d, center, width, height, focal))
        splits.append("test")
    return CameraRig(cams, splits)


# ---------------------------------------------------------------------------
# Ground-truth rendering


def make_sample_ts(t_near: float, t_far: float, step: float):
    """Midpoint-rule sample depths and segment lengths over [t_near, t_far].

    Uniform spacing ``step`` with the last segment truncated; an empty span
    yields no samples.
    """
    span = t_far - t_near
    if span <= 0:
        return np.empty(0), np.empty(0)
    n = max(int(np.ceil(span / step - 1e-12)), 1)
    delta = np.full(n, step)
    delta[-1] = span - step * (n - 1)
    edges = t_near + step * np.arange(n)
    return edges + 0.5 * delta, delta


def batched_sample_ts(t_near, t_far, step: float):
    """Vectorized midpoint sampling for a ray batch.

    Returns (ts, delta) of shape (R, M_max) where padded samples carry
    delta == 0 and contribute nothing to the quadrature.
    """
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    span = t_far - t_near
    m_max = max(int(np.ceil(span.max() / step - 1e-12)), 1) if span.max() > 0 else 0
    if m_max == 0:
        return np.zeros((len(t_near), 0)), np.zeros((len(t_near), 0))
    edges = t_near[:, None] + step * np.arange(m_max)[None, :]
    delta = np.clip(t_far[:, None] - edges, 0.0, step)
    ts = edges + 0.5 * delta
    return ts, delta


def gt_march_transmittance(scene: GroundTruthScene, o, d, t_near, t_far, step: float):
    """March ground-truth occupancy along a ray batch.

    Returns (ts, delta, sigma, T) where T[:, i] is the transmittance at the
    entry of sample i and an extra final column holds the residual.
    """
    ts, delta = batched_sample_ts(t_near, t_far, step)
    if ts.shape[1] == 0:
        n = len(np.atleast_1d(t_near))
        return ts, delta, np.zeros_like(ts), np.ones((n, 1))
    pos = np.asarray(o)[:, None, :] + ts[..., None] * np.asarray(d)[:, None, :]
    sigma = scene.occupancy(pos.reshape(-1, 3)).reshape(ts.shape)
    att = np.exp(-sigma * delta)
    T = np.concatenate([np.ones((len(ts), 1)), np.cumprod(att, axis=1)], axis=1)
    return ts, delta, sigma, T


def gt_render_rays(scene: GroundTruthScene, o, d, t_near, t_far, step: float):
    """Ground-truth quadrature for a ray batch; returns (colors, depths)."""
    ts, delta, sigma, T = gt_march_transmittance(scene, o, d, t_near, t_far, step)
    n = len(np.atleast_1d(t_near))
    if ts.shape[1] == 0:
        return np.tile(scene.background, (n, 1)), np.asarray(t_far, dtype=np.float64).copy()
    pos = np.asarray(o)[:, None, :] + ts[..., None] * np.asarray(d)[:, None, :]
    color = scene.albedo(pos.reshape(-1, 3)).reshape(ts.shape + (3,))
    w = T[:, :-1] * (1.0 - np.exp(-sigma * delta))
    img = np.einsum("rm,rmc->rc", w, color) + T[:, -1:] * scene.background
    depth = np.einsum("rm,rm->r", w, ts) + T[:, -1] * np.asarray(t_far, dtype=np.float64)
    return img, depth


def gt_render(scene: GroundTruthScene, camera: Camera, step: float):
    """Render ground truth with the same discrete quadrature as the model renderer.

    Returns (image, depth) with image shape (H, W, 3) in [0,1] and depth the
    transmittance-weighted expected depth (t_far where nothing is hit).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    o, d, t_near, t_far = camera_rays(camera, scene.bbox)
    img, depth = gt_render_rays(scene, o, d, t_near, t_far, step)
    return img.reshape(camera.height, camera.width, 3), depth.reshape(camera.height, camera.width)

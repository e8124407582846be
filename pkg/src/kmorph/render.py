"""Pinhole depth rendering, back-projection and point splatting.

Depth images are plain ``(height, width)`` float arrays. Metric images hold
camera-z in meters with 0 for background; normalized images hold values in
(0, 1] for object pixels (1 = near plane) and 0 for background.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kinematics import Affine3, inverse

log = logging.getLogger(__name__)

# floor of the normalized range so object pixels never read as background
DEPTH_EPS = 1.0 / 65535
QUANTIZATION_STEP = 1.0 / 65535


@dataclass(frozen=True, eq=False)
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    pose: Affine3  # camera -> world; camera axes x right, y down, z forward
    near: float = 0.3
    far: float = 4.0

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if abs(np.linalg.det(self.pose.linear)) <= 1e-12:
            raise ValueError("camera pose is singular")

    @classmethod
    def look_at(cls, eye, target, width: int, height: int, hfov_deg: float = 60.0, near: float = 0.3, far: float = 4.0):
        eye, target = np.asarray(eye, dtype=float), np.asarray(target, dtype=float)
        forward = target - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, (0.0, 0.0, 1.0))
        if np.linalg.norm(right) < 1e-9:
            raise ValueError("camera looks straight along the world z axis")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        pose = Affine3(np.column_stack([right, down, forward]), eye)
        f = (width / 2) / math.tan(math.radians(hfov_deg) / 2)
        return cls(width, height, f, f, (width - 1) / 2, (height - 1) / 2, pose, near, far)

    @classmethod
    def from_placement(cls, placement, width: int = 256, height: int = 192):
        el = math.radians(placement.elevation_deg)
        target = np.asarray(placement.target, dtype=float)
        eye = target + placement.distance * np.array([0.0, -math.cos(el), math.sin(el)])
        return cls.look_at(eye, target, width, height, placement.hfov_deg, placement.near, placement.far)

    @property
    def world_to_camera(self) -> Affine3:
        return inverse(self.pose)

    def to_text(self) -> str:
        rows = [
            f"width {self.width}",
            f"height {self.height}",
            f"fx {self.fx!r}",
            f"fy {self.fy!r}",
            f"cx {self.cx!r}",
            f"cy {self.cy!r}",
            f"near {self.near!r}",
            f"far {self.far!r}",
            "pose " + " ".join(repr(float(x)) for x in self.pose.matrix.ravel()),
        ]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Camera":
        fields = {}
        for line in text.strip().splitlines():
            key, _, rest = line.partition(" ")
            fields[key] = rest.split()
        pose = Affine3.from_matrix(np.array([float(x) for x in fields["pose"]]).reshape(3, 4))
        return cls(
            int(fields["width"][0]),
            int(fields["height"][0]),
            float(fields["fx"][0]),
            float(fields["fy"][0]),
            float(fields["cx"][0]),
            float(fields["cy"][0]),
            pose,
            float(fields["near"][0]),
            float(fields["far"][0]),
        )

    def __eq__(self, other):
        return isinstance(other, Camera) and self.to_text() == other.to_text()

    def __hash__(self):
        return hash(self.to_text())


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (3, K) world frame, meters
    valid: np.ndarray  # (K,) bool

    @property
    def size(self) -> int:
        return self.points.shape[1]

    @property
    def valid_points(self) -> np.ndarray:
        """(N, 3) array of the valid points."""
        return self.points[:, self.valid].T

    @classmethod
    def from_points(cls, points) -> "PointCloud":
        """Cloud with every point valid, from an (N, 3) array."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3).T.copy()
        return cls(pts, np.ones(pts.shape[1], dtype=bool))


def normalize_depth(z, cam: Camera, return_saturated: bool = False):
    """Map camera depth in meters to (0, 1]: near -> 1, far -> DEPTH_EPS.

    Depths outside [near, far] are clamped; ``return_saturated`` adds the
    number of clamped values to the result.
    """
    z = np.asarray(z, dtype=float)
    saturated = int(np.count_nonzero((z < cam.near) | (z > cam.far)))
    out = np.clip((cam.far - z) / (cam.far - cam.near), DEPTH_EPS, 1.0)
    if saturated:
        log.debug("normalize_depth clamped %d values outside [%g, %g]", saturated, cam.near, cam.far)
    if out.ndim == 0:
        out = float(out)
    return (out, saturated) if return_saturated else out


def normalize_image(metric: np.ndarray, cam: Camera) -> np.ndarray:
    """Normalize a metric depth image, keeping background (0) at 0."""
    metric = np.asarray(metric, dtype=float)
    out = np.zeros_like(metric)
    hit = metric > 0
    out[hit] = normalize_depth(metric[hit], cam)
    return out


def denormalize_image(depth: np.ndarray, cam: Camera) -> np.ndarray:
    depth = np.asarray(depth, dtype=float)
    out = np.zeros_like(depth)
    hit = depth > 0
    out[hit] = cam.far - depth[hit] * (cam.far - cam.near)
    return out


def rasterize(triangles: np.ndarray, cam: Camera) -> np.ndarray:
    """Z-buffer rasterization of world-frame triangles; returns metric depth (0 = no hit).

    Pixel (u, v) samples the ray through its center at integer coordinates.
    Depth is the exact ray/plane intersection, not an interpolation.
    Triangles reaching in front of the near plane are dropped.
    """
    zbuf = np.full((cam.height, cam.width), np.inf)
    w2c = cam.world_to_camera
    tris = np.asarray(triangles, dtype=float)
    tri_cam = (w2c.linear @ tris.reshape(-1, 3).T + w2c.translation[:, None]).T.reshape(-1, 3, 3)
    dropped = 0
    for tri in tri_cam:
        if np.any(tri[:, 2] < cam.near):
            dropped += 1
            continue
        u = cam.fx * tri[:, 0] / tri[:, 2] + cam.cx
        v = cam.fy * tri[:, 1] / tri[:, 2] + cam.cy
        area = (u[1] - u[0]) * (v[2] - v[0]) - (u[2] - u[0]) * (v[1] - v[0])
        if abs(area) < 1e-12:
            continue
        u0, u1 = max(0, math.ceil(u.min())), min(cam.width - 1, math.floor(u.max()))
        v0, v1 = max(0, math.ceil(v.min())), min(cam.height - 1, math.floor(v.max()))
        if u0 > u1 or v0 > v1:
            continue
        pu, pv = np.meshgrid(np.arange(u0, u1 + 1, dtype=float), np.arange(v0, v1 + 1, dtype=float))
        # edge functions, normalized so all three are >= 0 inside
        w0 = ((u[1] - pu) * (v[2] - pv) - (u[2] - pu) * (v[1] - pv)) / area
        w1 = ((u[2] - pu) * (v[0] - pv) - (u[0] - pu) * (v[2] - pv)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-12) & (w1 >= -1e-12) & (w2 >= -1e-12)
        if not inside.any():
            continue
        normal = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        rx = (pu - cam.cx) / cam.fx
        ry = (pv - cam.cy) / cam.fy
        denom = normal[0] * rx + normal[1] * ry + normal[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (normal @ tri[0]) / denom
        ok = inside & np.isfinite(z) & (z > 0)
        block = zbuf[v0 : v1 + 1, u0 : u1 + 1]
        np.minimum(block, np.where(ok, z, np.inf), out=block)
    if dropped:
        log.debug("rasterize dropped %d triangles crossing the near plane", dropped)
    zbuf[~np.isfinite(zbuf)] = 0.0
    return zbuf


def backproject(metric: np.ndarray, cam: Camera) -> PointCloud:
    """Pixel (u, v) with depth z -> ``pose @ ((u - cx) z / fx, (v - cy) z / fy, z)``."""
    metric = np.asarray(metric, dtype=float)
    if metric.shape != (cam.height, cam.width):
        raise ValueError(f"depth image {metric.shape} does not match camera {(cam.height, cam.width)}")
    v, u = np.mgrid[0 : cam.height, 0 : cam.width]
    z = metric.ravel()
    valid = z > 0
    local = np.stack([(u.ravel() - cam.cx) * z / cam.fx, (v.ravel() - cam.cy) * z / cam.fy, z])
    points = cam.pose.linear @ local + cam.pose.translation[:, None]
    points[:, ~valid] = 0.0
    return PointCloud(points, valid)


def splat(cloud: PointCloud, cam: Camera) -> np.ndarray:
    """Project valid points to their nearest pixel, nearest depth wins; metric result.

    Depth ties within 1e-9 m go to the lowest point index.
    """
    zbuf = np.zeros((cam.height, cam.width))
    idx = np.flatnonzero(cloud.valid)
    if idx.size == 0:
        return zbuf
    w2c = cam.world_to_camera
    pc = w2c.linear @ cloud.points[:, idx] + w2c.translation[:, None]
    z = pc[2]
    front = z > 0
    idx, pc, z = idx[front], pc[:, front], z[front]
    u = np.floor(cam.fx * pc[0] / z + cam.cx + 0.5).astype(np.int64)
    v = np.floor(cam.fy * pc[1] / z + cam.cy + 0.5).astype(np.int64)
    inside = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    if not inside.any():
        return zbuf
    idx, z = idx[inside], z[inside]
    pix = v[inside] * cam.width + u[inside]
    zmin = np.full(cam.width * cam.height, np.inf)
    np.minimum.at(zmin, pix, z)
    candidate = z <= zmin[pix] + 1e-9
    winner = np.full(cam.width * cam.height, np.iinfo(np.int64).max)
    np.minimum.at(winner, pix[candidate], idx[candidate])
    hit = winner != np.iinfo(np.int64).max
    # idx is ascending, so the winner's depth is found by bisection
    zbuf.reshape(-1)[hit] = z[np.searchsorted(idx, winner[hit])]
    return zbuf


def point_cloud_to_depth(cloud: PointCloud, cam: Camera, factor: int = 1) -> np.ndarray:
    """Normalized depth image of a splatted cloud, optionally downsampled by ``factor``."""
    depth = normalize_image(splat(cloud, cam), cam)
    return downsample(depth, factor) if factor > 1 else depth


def render_mesh(model, cam: Camera) -> tuple[np.ndarray, PointCloud]:
    """Normalized depth image at camera resolution and the back-projected cloud."""
    metric = rasterize(model.triangles, cam)
    if not np.any(metric > 0):
        log.info("%s: model is entirely outside the camera frustum", getattr(model, "task_name", "model"))
    return normalize_image(metric, cam), backproject(metric, cam)


def downsample(depth: np.ndarray, factor: int) -> np.ndarray:
    """Keep the nearest (largest normalized) sample of each factor x factor block."""
    depth = np.asarray(depth)
    h, w = depth.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide image size {w}x{h}")
    if factor == 1:
        return depth.copy()
    return depth.reshape(h // factor, factor, w // factor, factor).max(axis=(1, 3))


def to_uint16(depth: np.ndarray) -> np.ndarray:
    return np.round(np.clip(depth, 0.0, 1.0) * 65535).astype(np.uint16)


def write_pgm(depth: np.ndarray, path: str | Path):
    """16-bit binary PGM, value = round(65535 * normalized depth)."""
    img = to_uint16(depth)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(img.astype(">u2").tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    # header is four whitespace-separated tokens followed by exactly one whitespace byte
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    dtype = ">u2" if maxval > 255 else "u1"
    pixels = np.frombuffer(data[m.end() : m.end() + w * h * np.dtype(dtype).itemsize], dtype=dtype)
    return pixels.reshape(h, w).astype(float) / maxval

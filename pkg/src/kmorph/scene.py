"""Parametric box and door models and uniform parameter sampling."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kinematics import MorphParams, ParamSchema, SchemaError, apply, load_schema, to_affine

_DATA_DIR = Path(__file__).parent / "data"
TASK_NAMES = ("box_a", "box_b", "box_c", "door")

# (i, j, k) corner indices of the 12 triangles of a cuboid; corner bit order is (x, y, z)
_CUBOID_FACES = np.array(
    [
        [0, 2, 6], [0, 6, 4],  # x = lo
        [1, 5, 7], [1, 7, 3],  # x = hi
        [0, 4, 5], [0, 5, 1],  # y = lo
        [2, 3, 7], [2, 7, 6],  # y = hi
        [0, 1, 3], [0, 3, 2],  # z = lo
        [4, 6, 7], [4, 7, 5],  # z = hi
    ]
)


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CameraPlacement:
    distance: float = 2.0
    elevation_deg: float = 45.0
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)
    near: float = 0.3
    far: float = 4.0
    hfov_deg: float = 60.0


@dataclass(frozen=True)
class TaskDef:
    task_name: str
    schema: ParamSchema
    geometry: str
    prototype_dimensions: dict[str, float]
    channels: tuple[int, ...] = (2, 4, 6, 8, 10)
    camera: CameraPlacement = field(default_factory=CameraPlacement)
    paper_n_data: int | None = None


@dataclass(frozen=True, eq=False)
class KinematicModel:
    task_name: str
    schema: ParamSchema
    triangles: np.ndarray  # (T, 3, 3): triangle, vertex, xyz

    @property
    def vertices(self) -> np.ndarray:
        return self.triangles.reshape(-1, 3)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        v = self.vertices
        return v.min(axis=0), v.max(axis=0)


def load_task(name: str, schema_override: ParamSchema | None = None, task_file: str | Path | None = None) -> TaskDef:
    """Load one of the shipped tasks, or a task file next to a ``.schema`` file."""
    path = Path(task_file) if task_file else _DATA_DIR / f"{name}.task"
    if not path.exists():
        raise SchemaError(f"unknown task {name!r}; shipped tasks: {', '.join(TASK_NAMES)}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.read(path)
    sec = parser["task"]
    schema = schema_override or load_schema(path.with_suffix(".schema") if task_file else name)
    geometry = sec.get("geometry")
    if geometry not in ("box", "door"):
        raise SchemaError(f"{path}: unknown geometry {geometry!r}")
    skip = {"geometry", "channels", "paper_n_data"}
    dims = {k: float(v) for k, v in sec.items() if k not in skip}
    channels = tuple(int(c) for c in sec.get("channels", "2 4 6 8 10").split())
    cam = parser["camera"] if parser.has_section("camera") else {}
    placement = CameraPlacement(
        distance=float(cam.get("distance", 2.0)),
        elevation_deg=float(cam.get("elevation_deg", 45.0)),
        target=tuple(float(x) for x in cam.get("target", "0 0 0").split()),
        near=float(cam.get("near", 0.3)),
        far=float(cam.get("far", 4.0)),
        hfov_deg=float(cam.get("hfov_deg", 60.0)),
    )
    n_data = sec.get("paper_n_data")
    return TaskDef(
        name, schema, geometry, dims, channels, placement, int(n_data) if n_data else None
    )


def cuboid(lo, hi) -> np.ndarray:
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    corners = np.array(
        [[(hi if i & 1 else lo)[0], (hi if i & 2 else lo)[1], (hi if i & 4 else lo)[2]] for i in range(8)]
    )
    return corners[_CUBOID_FACES]


def triangle_areas(triangles: np.ndarray) -> np.ndarray:
    e1 = triangles[:, 1] - triangles[:, 0]
    e2 = triangles[:, 2] - triangles[:, 0]
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


def _box_geometry(dims: dict[str, float], gamma: dict[str, float]) -> np.ndarray:
    half = np.array([dims["length"], dims["depth"], dims["height"]]) / 2
    return cuboid(-half, half)


def _door_geometry(dims: dict[str, float], gamma: dict[str, float]) -> np.ndarray:
    width = dims["panel_width"] + gamma.get("width", 0.0)
    height = dims["panel_height"] + gamma.get("height", 0.0)
    t = dims["panel_thickness"]
    if width <= 0 or height <= 0:
        raise GeometryError(f"door panel degenerates: width {width:.3f} m, height {height:.3f} m")
    # hinge edge stays at x = -prototype_width / 2; the free edge follows the width
    hinge = -dims["panel_width"] / 2
    free = hinge + width
    panel = cuboid((hinge, -t / 2, 0.0), (free, t / 2, height))
    hx = free - dims["handle_inset"] + gamma.get("handle_y", 0.0)
    hz = dims["handle_height"] + gamma.get("handle_z", 0.0)
    half_len, half_sec = dims["handle_length"] / 2, dims["handle_section"] / 2
    y_front = -t / 2 - dims["handle_standoff"]
    handle = cuboid(
        (hx - half_len, y_front - 2 * half_sec, hz - half_sec),
        (hx + half_len, y_front, hz + half_sec),
    )
    return np.concatenate([panel, handle])


_GEOMETRY = {"box": _box_geometry, "door": _door_geometry}


def instantiate(task: TaskDef, params: MorphParams) -> KinematicModel:
    """Build ``m(theta, gamma)``: reshape the prototype by gamma, then move it by ``T_theta``."""
    schema = task.schema
    params.validate(schema)
    gamma = dict(zip(schema.config_names, np.asarray(params.gamma, dtype=float).tolist()))
    local = _GEOMETRY[task.geometry](task.prototype_dimensions, gamma)
    if np.any(triangle_areas(local) <= 1e-12):
        raise GeometryError(f"{task.task_name}: degenerate triangle for gamma={gamma}")
    T = to_affine(params.theta, schema)
    world = apply(T, local.reshape(-1, 3).T).T.reshape(local.shape)
    if not np.all(np.isfinite(world)):
        raise GeometryError(f"{task.task_name}: non-finite vertices")
    return KinematicModel(task.task_name, schema, world)


def prototype(task: TaskDef) -> KinematicModel:
    return instantiate(task, MorphParams.zeros(task.schema))


def sample_params(schema: ParamSchema, rng: np.random.Generator) -> MorphParams:
    values = rng.uniform(schema.lower, schema.upper)
    return MorphParams.from_vector(values, schema)


def surface_samples(model: KinematicModel | np.ndarray, spacing: float) -> np.ndarray:
    """Deterministic barycentric grid over every triangle, roughly ``spacing`` apart. Returns (N, 3)."""
    triangles = model.triangles if isinstance(model, KinematicModel) else np.asarray(model)
    out = []
    for tri in triangles:
        longest = max(np.linalg.norm(tri[1] - tri[0]), np.linalg.norm(tri[2] - tri[0]), np.linalg.norm(tri[2] - tri[1]))
        k = max(1, math.ceil(longest / spacing))
        i, j = np.meshgrid(np.arange(k + 1), np.arange(k + 1), indexing="ij")
        keep = i + j <= k
        a, b = i[keep] / k, j[keep] / k
        out.append(tri[0] + a[:, None] * (tri[1] - tri[0]) + b[:, None] * (tri[2] - tri[0]))
    return np.concatenate(out)


def write_stl(model: KinematicModel, path: str | Path):
    """ASCII STL export, for looking at generated geometry in a mesh viewer."""
    lines = [f"solid {model.task_name}"]
    for tri in model.triangles:
        n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        n = n / (np.linalg.norm(n) or 1.0)
        lines.append(f"  facet normal {n[0]:.9e} {n[1]:.9e} {n[2]:.9e}")
        lines.append("    outer loop")
        lines.extend(f"      vertex {v[0]:.9e} {v[1]:.9e} {v[2]:.9e}" for v in tri)
        lines.append("    endloop")
        lines.append("  endfacet")
    lines.append(f"endsolid {model.task_name}")
    Path(path).write_text("\n".join(lines) + "\n")

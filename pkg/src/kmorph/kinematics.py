"""Restricted affine transforms for morphing a model onto its prototype.

A transform parameter vector holds a subset of ``tx, ty, rz, s_len, s_h``
(in that order) and maps to ``Trans(tx, ty, 0) @ Rot_z(rz) @ Scale(1 + s_len, 1, 1 + s_h)``.
Parameters missing from a schema are treated as identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TRANSFORM_NAMES = ("tx", "ty", "rz", "s_len", "s_h")
SCALE_NAMES = ("s_len", "s_h")
KINDS = ("transform", "config")

_DATA_DIR = Path(__file__).parent / "data"


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class ParamEntry:
    name: str
    kind: str
    lower: float
    upper: float
    unit: str = ""


@dataclass(frozen=True)
class ParamSchema:
    """Ordered parameter limits of one task; transform entries come first."""

    task_name: str
    entries: tuple[ParamEntry, ...]

    def __post_init__(self):
        if not self.entries:
            raise SchemaError(f"{self.task_name}: schema has no parameters")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise SchemaError(f"{self.task_name}: duplicate parameter names {names}")
        seen_config = False
        for e in self.entries:
            if e.kind not in KINDS:
                raise SchemaError(f"{e.name}: unknown kind {e.kind!r}")
            if e.lower > e.upper:
                raise SchemaError(f"{e.name}: lower limit {e.lower} > upper limit {e.upper}")
            if e.kind == "config":
                seen_config = True
            elif seen_config:
                raise SchemaError(f"{e.name}: transform entries must precede config entries")
            elif e.name not in TRANSFORM_NAMES:
                raise SchemaError(f"{e.name}: not a transform parameter {TRANSFORM_NAMES}")
        order = [TRANSFORM_NAMES.index(n) for n in self.transform_names]
        if order != sorted(order):
            raise SchemaError(f"{self.task_name}: transform parameters must follow {TRANSFORM_NAMES}")

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def transform_names(self) -> list[str]:
        return [e.name for e in self.entries if e.kind == "transform"]

    @property
    def config_names(self) -> list[str]:
        return [e.name for e in self.entries if e.kind == "config"]

    @property
    def n(self) -> int:
        return len(self.transform_names)

    @property
    def m(self) -> int:
        return len(self.config_names)

    @property
    def dim(self) -> int:
        return len(self.entries)

    @property
    def lower(self) -> np.ndarray:
        return np.array([e.lower for e in self.entries])

    @property
    def upper(self) -> np.ndarray:
        return np.array([e.upper for e in self.entries])

    @property
    def degenerate(self) -> list[str]:
        """Names of parameters whose range collapses to a single value."""
        return [e.name for e in self.entries if e.lower == e.upper]

    def with_limits(self, name: str, lower: float, upper: float) -> "ParamSchema":
        entries = tuple(
            ParamEntry(e.name, e.kind, lower, upper, e.unit) if e.name == name else e
            for e in self.entries
        )
        if name not in self.names:
            raise SchemaError(f"{self.task_name}: no parameter {name!r}")
        return ParamSchema(self.task_name, entries)

    def to_text(self) -> str:
        lines = [f"{e.name} {e.kind} {e.lower!r} {e.upper!r} {e.unit}".rstrip() for e in self.entries]
        return "\n".join(lines) + "\n"


def parse_schema(text: str, task_name: str) -> ParamSchema:
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (4, 5):
            raise SchemaError(f"line {lineno}: expected 'name kind lower upper [unit]', got {raw!r}")
        name, kind, lo, hi = parts[:4]
        try:
            lower, upper = float(lo), float(hi)
        except ValueError as exc:
            raise SchemaError(f"line {lineno}: {exc}") from None
        entries.append(ParamEntry(name, kind, lower, upper, parts[4] if len(parts) == 5 else ""))
    return ParamSchema(task_name, tuple(entries))


def load_schema(source: str | Path) -> ParamSchema:
    """Load a schema from a file path or a shipped task name (``box_a``...)."""
    path = Path(source)
    if not path.exists():
        path = _DATA_DIR / f"{source}.schema"
    if not path.exists():
        raise SchemaError(f"no schema file or shipped task named {str(source)!r}")
    return parse_schema(path.read_text(), path.stem)


@dataclass(frozen=True)
class MorphParams:
    """Transformation parameters ``theta`` and configuration parameters ``gamma``."""

    theta: np.ndarray
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def from_vector(cls, vector, schema: ParamSchema) -> "MorphParams":
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (schema.dim,):
            raise ValueError(f"expected {schema.dim} parameters, got shape {vector.shape}")
        return cls(vector[: schema.n].copy(), vector[schema.n :].copy())

    @classmethod
    def zeros(cls, schema: ParamSchema) -> "MorphParams":
        return cls(np.zeros(schema.n), np.zeros(schema.m))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.theta, self.gamma])

    def validate(self, schema: ParamSchema):
        if len(self.theta) != schema.n or len(self.gamma) != schema.m:
            raise ValueError(
                f"parameter sizes ({len(self.theta)}, {len(self.gamma)}) do not match "
                f"schema {schema.task_name} ({schema.n}, {schema.m})"
            )
        _check_scales(self.theta, schema)


@dataclass(frozen=True, eq=False)
class Affine3:
    """x -> linear @ x + translation."""

    linear: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        linear = np.array(self.linear, dtype=float).reshape(3, 3)
        translation = np.array(self.translation, dtype=float).reshape(3)
        linear.flags.writeable = False
        translation.flags.writeable = False
        object.__setattr__(self, "linear", linear)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Affine3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix) -> "Affine3":
        matrix = np.asarray(matrix, dtype=float)
        return cls(matrix[:3, :3], matrix[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        """3x4 ``[linear | translation]``."""
        return np.hstack([self.linear, self.translation[:, None]])

    @property
    def homogeneous(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :4] = self.matrix
        return out

    def __matmul__(self, other: "Affine3") -> "Affine3":
        return compose(self, other)

    def __repr__(self):
        return f"Affine3({self.matrix.tolist()})"


def translation(tx: float = 0.0, ty: float = 0.0, tz: float = 0.0) -> Affine3:
    return Affine3(np.eye(3), (tx, ty, tz))


def rotation_z(angle: float) -> Affine3:
    c, s = math.cos(angle), math.sin(angle)
    return Affine3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], np.zeros(3))


def _named(theta, schema: ParamSchema) -> dict[str, float]:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape[0] != schema.n:
        raise ValueError(f"{schema.task_name}: expected {schema.n} transform parameters, got {theta.shape[0]}")
    values = dict.fromkeys(TRANSFORM_NAMES, 0.0)
    values.update(zip(schema.transform_names, theta.tolist()))
    return values


def _check_scales(theta, schema: ParamSchema):
    values = _named(theta, schema)
    for name in SCALE_NAMES:
        if 1.0 + values[name] <= 0.0:
            raise ValueError(f"non-positive scale factor 1 + {name} = {1.0 + values[name]}")


def to_affine(theta, schema: ParamSchema) -> Affine3:
    values = _named(theta, schema)
    _check_scales(theta, schema)
    c, s = math.cos(values["rz"]), math.sin(values["rz"])
    sx, sz = 1.0 + values["s_len"], 1.0 + values["s_h"]
    linear = np.array([[c * sx, -s, 0.0], [s * sx, c, 0.0], [0.0, 0.0, sz]])
    return Affine3(linear, (values["tx"], values["ty"], 0.0))


def compose(a: Affine3, b: Affine3) -> Affine3:
    """Transform applying ``b`` first, then ``a``."""
    return Affine3(a.linear @ b.linear, a.linear @ b.translation + a.translation)


def inverse(a: Affine3) -> Affine3:
    if abs(np.linalg.det(a.linear)) <= 1e-12:
        raise np.linalg.LinAlgError("affine transform has a singular linear part")
    inv = np.linalg.inv(a.linear)
    return Affine3(inv, -inv @ a.translation)


def apply(a: Affine3, cloud):
    """Transform a ``PointCloud`` (valid points only) or a ``(3, K)`` array."""
    from .render import PointCloud

    if isinstance(cloud, PointCloud):
        pts = cloud.points
        moved = a.linear @ pts + a.translation[:, None]
        points = np.where(cloud.valid[None, :], moved, pts)
        return PointCloud(points, cloud.valid)
    pts = np.asarray(cloud, dtype=float)
    return a.linear @ pts + a.translation[:, None]


def extract_params(a: Affine3, schema: ParamSchema) -> tuple[np.ndarray, float]:
    """Project ``a`` onto the schema's parameter family.

    Returns the parameter vector and the Frobenius distance between ``a``
    and the transform rebuilt from it, which is nonzero whenever ``a`` lies
    outside the family (shear, parameters the schema does not carry, ...).
    """
    M = a.linear
    values = {
        "tx": a.translation[0],
        "ty": a.translation[1],
        "rz": math.atan2(-M[0, 1], M[1, 1]),
        "s_len": math.hypot(M[0, 0], M[1, 0], M[2, 0]) - 1.0,
        "s_h": M[2, 2] - 1.0,
    }
    theta = np.array([values[n] for n in schema.transform_names])
    residual = float(np.linalg.norm(a.matrix - to_affine(theta, schema).matrix))
    return theta, residual


def chain(transforms: Iterable[Affine3]) -> Affine3:
    """Compose left to right: ``chain([a, b, c]) == a @ b @ c``."""
    out = Affine3.identity()
    for t in transforms:
        out = compose(out, t)
    return out


def random_theta(schema: ParamSchema, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    lo, hi = schema.lower[: schema.n], schema.upper[: schema.n]
    shape = (schema.n,) if size is None else (size, schema.n)
    return rng.uniform(lo, hi, size=shape)


def as_affine(value, schema: ParamSchema | None = None) -> Affine3:
    if isinstance(value, Affine3):
        return value
    if value is None:
        return Affine3.identity()
    arr = np.asarray(value, dtype=float)
    if arr.shape in ((3, 4), (4, 4)):
        return Affine3.from_matrix(arr)
    if schema is None:
        raise ValueError("a schema is needed to convert a parameter vector to a transform")
    return to_affine(arr, schema)


__all__: Sequence[str] = [
    "Affine3",
    "MorphParams",
    "ParamEntry",
    "ParamSchema",
    "SchemaError",
    "apply",
    "as_affine",
    "chain",
    "compose",
    "extract_params",
    "inverse",
    "load_schema",
    "parse_schema",
    "random_theta",
    "rotation_z",
    "to_affine",
    "translation",
]

"""Synthetic training shapes, Gaussian corruption and point-cloud file I/O."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .geometry import PointCloud, estimate_normals_pca

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("sphere", "cube", "cylinder", "torus", "dihedral-wedge")
NOISE_LEVELS = (0.0025, 0.005, 0.01, 0.015, 0.025)
RAW_NORMAL_K = 16

# canonical dimensions, model units
SPHERE_RADIUS = 1.0
CUBE_HALF = 1.0
CYLINDER_RADIUS = 1.0
CYLINDER_HALF_HEIGHT = 1.0
TORUS_MAJOR = 1.0
TORUS_MINOR = 0.35
WEDGE_SIZE = 1.0


class XYZParseError(ValueError):
    def __init__(self, path, line_no: int, message: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    n_points: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}; expected one of {SHAPE_KINDS}")
        if self.n_points < 100:
            raise ValueError(f"n_points must be >= 100, got {self.n_points}")


@dataclass
class NoisySample:
    noisy: PointCloud
    clean: PointCloud
    noise_level: float
    name: str = ""


def _sphere(rng, n):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return SPHERE_RADIUS * v, v.copy()


def _cube(rng, n):
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-CUBE_HALF, CUBE_HALF, (n, 2))
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    rows = np.arange(n)
    pts[rows, axis] = sign * CUBE_HALF
    pts[rows, (axis + 1) % 3] = uv[:, 0]
    pts[rows, (axis + 2) % 3] = uv[:, 1]
    nrm[rows, axis] = sign
    return pts, nrm


def _cylinder(rng, n):
    R, H = CYLINDER_RADIUS, CYLINDER_HALF_HEIGHT
    side = 2 * math.pi * R * 2 * H
    cap = math.pi * R * R
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    phi = rng.uniform(0, 2 * math.pi, n)
    z = rng.uniform(-H, H, n)
    rho = R * np.sqrt(rng.uniform(0, 1, n))
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    lat = part == 0
    pts[lat] = np.stack([R * np.cos(phi[lat]), R * np.sin(phi[lat]), z[lat]], axis=1)
    nrm[lat] = np.stack([np.cos(phi[lat]), np.sin(phi[lat]), np.zeros(lat.sum())], axis=1)
    for p, s in ((1, 1.0), (2, -1.0)):
        m = part == p
        pts[m] = np.stack([rho[m] * np.cos(phi[m]), rho[m] * np.sin(phi[m]), np.full(m.sum(), s * H)], axis=1)
        nrm[m, 2] = s
    return pts, nrm


def _torus(rng, n):
    R, r = TORUS_MAJOR, TORUS_MINOR
    u = np.empty(0)
    v = np.empty(0)
    # rejection on the area element (R + r cos v)
    while len(u) < n:
        m = 2 * (n - len(u)) + 16
        vu = rng.uniform(0, 2 * math.pi, m)
        vv = rng.uniform(0, 2 * math.pi, m)
        keep = rng.uniform(0, R + r, m) < R + r * np.cos(vv)
        u = np.concatenate([u, vu[keep]])
        v = np.concatenate([v, vv[keep]])
    u, v = u[:n], v[:n]
    nrm = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
    ring = np.stack([R * np.cos(u), R * np.sin(u), np.zeros(n)], axis=1)
    return ring + r * nrm, nrm


def _wedge(rng, n):
    # faces z=0 (x in [0,a]) and x=0 (z in [0,a]), y in [0,a], meeting at 90 degrees
    a = WEDGE_SIZE
    face = rng.integers(0, 2, n)
    s = rng.uniform(0, a, n)
    y = rng.uniform(0, a, n)
    pts = np.zeros((n, 3))
    nrm = np.zeros((n, 3))
    f0 = face == 0
    pts[f0, 0], pts[f0, 1] = s[f0], y[f0]
    nrm[f0, 2] = 1.0
    pts[~f0, 2], pts[~f0, 1] = s[~f0], y[~f0]
    nrm[~f0, 0] = 1.0
    return pts, nrm


_SAMPLERS = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "torus": _torus,
    "dihedral-wedge": _wedge,
}


def generate_shape(spec: ShapeSpec) -> PointCloud:
    """Area-uniform samples on an analytic surface with exact normals."""
    if spec.kind not in _SAMPLERS:
        raise ValueError(f"unknown shape kind {spec.kind!r}")
    rng = np.random.default_rng(spec.seed)
    pts, nrm = _SAMPLERS[spec.kind](rng, spec.n_points)
    return PointCloud(pts, nrm)


def wedge_face_labels(points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """0 for the z=0 face, 1 for the x=0 face of the dihedral wedge."""
    return np.where(np.abs(points[:, 2]) <= tol, 0, 1)


def surface_distance(kind: str, points: np.ndarray) -> np.ndarray:
    """Exact unsigned distance from each point to the canonical analytic surface."""
    p = np.asarray(points, dtype=np.float64)
    if kind == "sphere":
        return np.abs(np.linalg.norm(p, axis=1) - SPHERE_RADIUS)
    if kind == "cube":
        q = np.abs(p) - CUBE_HALF
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return np.abs(outside + inside)
    if kind == "cylinder":
        rho = np.hypot(p[:, 0], p[:, 1])
        d = np.stack([rho - CYLINDER_RADIUS, np.abs(p[:, 2]) - CYLINDER_HALF_HEIGHT], axis=1)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
        inside = np.minimum(d.max(axis=1), 0.0)
        return np.abs(outside + inside)
    if kind == "torus":
        rho = np.hypot(p[:, 0], p[:, 1])
        return np.abs(np.hypot(rho - TORUS_MAJOR, p[:, 2]) - TORUS_MINOR)
    if kind == "dihedral-wedge":
        a = WEDGE_SIZE
        c0 = np.stack([np.clip(p[:, 0], 0, a), np.clip(p[:, 1], 0, a), np.zeros(len(p))], axis=1)
        c1 = np.stack([np.zeros(len(p)), np.clip(p[:, 1], 0, a), np.clip(p[:, 2], 0, a)], axis=1)
        return np.minimum(np.linalg.norm(p - c0, axis=1), np.linalg.norm(p - c1, axis=1))
    raise ValueError(f"unknown shape kind {kind!r}")


def shape_diagonal(kind: str) -> float:
    """Bounding-box diagonal of the canonical analytic surface."""
    if kind == "sphere":
        return 2 * SPHERE_RADIUS * math.sqrt(3)
    if kind == "cube":
        return 2 * CUBE_HALF * math.sqrt(3)
    if kind == "cylinder":
        return math.sqrt(2 * (2 * CYLINDER_RADIUS) ** 2 + (2 * CYLINDER_HALF_HEIGHT) ** 2)
    if kind == "torus":
        w = 2 * (TORUS_MAJOR + TORUS_MINOR)
        return math.sqrt(2 * w * w + (2 * TORUS_MINOR) ** 2)
    if kind == "dihedral-wedge":
        return WEDGE_SIZE * math.sqrt(3)
    raise ValueError(f"unknown shape kind {kind!r}")


def add_gaussian_noise(clean: PointCloud, level: float, seed: int = 0, name: str = "") -> NoisySample:
    """Isotropic Gaussian corruption with per-axis std ``level * clean.diag``.

    Raw normals of the noisy cloud are always re-estimated with PCA.
    """
    if level < 0:
        raise ValueError(f"noise level must be >= 0, got {level}")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal(clean.points.shape)
    noisy_pts = clean.points + (level * clean.diag) * g if level > 0 else clean.points.copy()
    noisy = PointCloud(noisy_pts)
    normals, _ = estimate_normals_pca(noisy, k=RAW_NORMAL_K)
    return NoisySample(noisy=noisy.with_normals(normals), clean=clean, noise_level=float(level), name=name)


def write_xyz(path, cloud: PointCloud, extra: Optional[np.ndarray] = None) -> None:
    """Write ``x y z [nx ny nz] [extra...]`` rows with round-trip precision."""
    cols = [cloud.points]
    if cloud.normals is not None:
        cols.append(cloud.normals)
    if extra is not None:
        cols.append(np.asarray(extra, dtype=np.float64).reshape(len(cloud), -1))
    data = np.hstack(cols)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for row in data:
            fh.write(" ".join(repr(float(v)) for v in row))
            fh.write("\n")


def read_xyz(path) -> PointCloud:
    rows = []
    width = None
    with open(path, encoding="ascii") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split()
            if len(fields) not in (3, 6):
                raise XYZParseError(path, line_no, f"expected 3 or 6 fields, got {len(fields)}")
            if width is not None and len(fields) != width:
                raise XYZParseError(path, line_no, f"expected {width} fields like the previous rows, got {len(fields)}")
            width = len(fields)
            try:
                rows.append([float(f) for f in fields])
            except ValueError as exc:
                raise XYZParseError(path, line_no, str(exc)) from None
    if not rows:
        raise XYZParseError(path, 0, "no points")
    data = np.asarray(rows, dtype=np.float64)
    if width == 3:
        return PointCloud(data)
    normals = data[:, 3:6]
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    if np.any(np.abs(lengths - 1.0) > 1e-6):
        # files from other tools often carry low-precision normals
        normals = normals / lengths
    return PointCloud(data[:, :3], normals)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path) -> PointCloud:
    """Vertex positions (and normals when present) from a binary or ASCII PLY."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = None
        n_vertex = 0
        props = []
        in_vertex = False
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            tok = line.decode("ascii").split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n_vertex = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                if tok[1] == "list":
                    raise ValueError(f"{path}: list properties on vertices are not supported")
                props.append((tok[2], _PLY_TYPES[tok[1]]))
            elif tok[0] == "end_header":
                break
        names = [p[0] for p in props]
        if fmt == "ascii":
            data = np.loadtxt(fh, max_rows=n_vertex, ndmin=2)
            table = {name: data[:, i] for i, name in enumerate(names)}
        elif fmt in ("binary_little_endian", "binary_big_endian"):
            endian = "<" if fmt == "binary_little_endian" else ">"
            dtype = np.dtype([(name, endian + t) for name, t in props])
            arr = np.frombuffer(fh.read(dtype.itemsize * n_vertex), dtype=dtype, count=n_vertex)
            table = {name: arr[name].astype(np.float64) for name in names}
        else:
            raise ValueError(f"{path}: unsupported PLY format {fmt!r}")
    pts = np.stack([table["x"], table["y"], table["z"]], axis=1)
    if all(k in table for k in ("nx", "ny", "nz")):
        nrm = np.stack([table["nx"], table["ny"], table["nz"]], axis=1)
        nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
        return PointCloud(pts, nrm)
    return PointCloud(pts)


def write_ply(path, cloud: PointCloud) -> None:
    """Binary little-endian PLY writer, used mainly to exercise the reader."""
    names = ["x", "y", "z"] + (["nx", "ny", "nz"] if cloud.normals is not None else [])
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    header += [f"property double {n}" for n in names]
    header.append("end_header")
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def load_cloud(path) -> PointCloud:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return read_ply(path)
    return read_xyz(path)


def corpus_seeds(seed: int, shape_pos: int, level_pos: int) -> Tuple[int, int]:
    """(clean seed, noise seed) of one corpus sample, from its position."""
    return seed * 1000 + shape_pos, seed * 1000 + 100 * (shape_pos + 1) + level_pos


def sample_name(kind: str, level: float) -> str:
    return f"{kind}_{level:g}"


def build_corpus(kinds=SHAPE_KINDS, n_points: int = 2000, levels=NOISE_LEVELS, seed: int = 0):
    """Clean shapes and their noisy versions at every level.

    Seeds are derived from ``seed`` and the sample position so the corpus is
    reproducible whatever order it is built in.
    """
    samples = []
    for s, kind in enumerate(kinds):
        clean = generate_shape(ShapeSpec(kind, n_points, seed=corpus_seeds(seed, s, 0)[0]))
        for li, level in enumerate(levels):
            noise_seed = corpus_seeds(seed, s, li)[1]
            samples.append(add_gaussian_noise(clean, level, noise_seed, name=sample_name(kind, level)))
    return samples


__all__ = [
    "SHAPE_KINDS", "NOISE_LEVELS", "ShapeSpec", "NoisySample", "XYZParseError",
    "generate_shape", "add_gaussian_noise", "surface_distance", "shape_diagonal",
    "write_xyz", "read_xyz", "read_ply", "write_ply", "load_cloud", "build_corpus",
    "corpus_seeds", "sample_name",
    "wedge_face_labels",
]

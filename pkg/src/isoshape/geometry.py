"""Point-cloud data model, normalization, mesh ingestion and synthetic shapes.

PointCloud and TriangleMesh are immutable value types; every operation
returns a fresh instance. File formats: OFF (read/write), XYZ and CSV text
clouds, binary PLY export.
"""

import io
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    MeshParseError,
    ParameterError,
)
from .numkit import Rng

SYNTHETIC_FAMILIES = ("sphere", "box", "cylinder", "torus")


def _as_points(points) -> np.ndarray:
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DimensionError(f"points must have shape (N, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ContractError("point coordinates must be finite")
    pts.flags.writeable = False
    return pts


@dataclass(frozen=True)
class PointCloud:
    """Ordered list of 3-D points with an optional class label and source id."""

    points: np.ndarray
    label: str | None = None
    id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "points", _as_points(self.points))

    def __len__(self):
        return self.points.shape[0]

    def with_points(self, points) -> "PointCloud":
        return replace(self, points=points)


@dataclass(frozen=True)
class TriangleMesh:
    """Triangle mesh: (V, 3) float vertices and (F, 3) integer faces."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        verts = np.ascontiguousarray(self.vertices, dtype=np.float64)
        faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise DimensionError(f"vertices must have shape (V, 3), got {verts.shape}")
        if faces.size == 0:
            faces = faces.reshape(0, 3)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise DimensionError(f"faces must have shape (F, 3), got {faces.shape}")
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            raise ContractError("face index out of range")
        verts.flags.writeable = False
        faces.flags.writeable = False
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)

    def face_areas(self) -> np.ndarray:
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def normalize(cloud: PointCloud, mode: str = "unit_sphere") -> PointCloud:
    """Center at the centroid, then scale: unit_sphere makes the largest point
    norm 1, unit_cube makes the largest axis extent 1."""
    if len(cloud) < 1:
        raise DegenerateInputError("cannot normalize an empty cloud")
    pts = cloud.points - np.mean(cloud.points, axis=0)
    if mode == "unit_sphere":
        scale = float(np.max(np.linalg.norm(pts, axis=1)))
    elif mode == "unit_cube":
        scale = float(np.max(pts.max(axis=0) - pts.min(axis=0)))
    else:
        raise ParameterError(f"unknown normalization mode {mode!r}")
    if scale < 1e-300:
        raise DegenerateInputError("all points coincide; normalization undefined")
    return cloud.with_points(pts / scale)


def bounding_box(cloud: PointCloud, inflate: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned bounding box (lo, hi), optionally inflated per axis by a
    fraction of its extent."""
    lo = cloud.points.min(axis=0)
    hi = cloud.points.max(axis=0)
    pad = inflate * np.maximum(hi - lo, 1e-12)
    return lo - pad, hi + pad


def distortion_stats(a: PointCloud, b: PointCloud) -> tuple[float, float, float]:
    """Pairwise-distance ratio statistics between index-corresponding clouds.

    Returns (min ratio, max ratio, mean |log ratio|) over all point pairs
    separated by more than 1e-9 in the reference cloud `a`.
    """
    if len(a) != len(b):
        raise ContractError(f"point counts differ: {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise ContractError("need at least 2 points")
    da = np.linalg.norm(a.points[:, None, :] - a.points[None, :, :], axis=2)
    db = np.linalg.norm(b.points[:, None, :] - b.points[None, :, :], axis=2)
    iu = np.triu_indices(len(a), k=1)
    da, db = da[iu], db[iu]
    mask = da > 1e-9
    if not np.any(mask):
        raise DegenerateInputError("no separated point pairs in the reference cloud")
    ratios = db[mask] / da[mask]
    return float(ratios.min()), float(ratios.max()), float(np.mean(np.abs(np.log(ratios))))


# ---------------------------------------------------------------------------
# OFF mesh format
# ---------------------------------------------------------------------------

def parse_off(data) -> TriangleMesh:
    """Parse an OFF mesh, fan-triangulating polygons with more than 3 vertices.

    Accepts bytes or str. Handles the header variant where "OFF" is fused
    with the counts line ("OFF3 1 0"), '#' comments, and trailing per-face
    color fields. Exact-zero-area faces are dropped.
    """
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8", errors="replace")
    lines = data.splitlines()

    def tokens():
        for lineno, line in enumerate(lines, start=1):
            line = line.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()

    stream = tokens()
    try:
        lineno, toks = next(stream)
    except StopIteration:
        raise MeshParseError("empty file") from None
    if toks[0] == "OFF":
        toks = toks[1:]
    elif toks[0].startswith("OFF"):
        toks = [toks[0][3:]] + toks[1:]
    else:
        raise MeshParseError("missing OFF header", lineno)
    if not toks:
        try:
            lineno, toks = next(stream)
        except StopIteration:
            raise MeshParseError("missing counts line", len(lines)) from None
    try:
        n_verts, n_faces = int(toks[0]), int(toks[1])
    except (IndexError, ValueError):
        raise MeshParseError("counts line must hold vertex/face/edge counts", lineno) from None
    if n_verts < 0 or n_faces < 0:
        raise MeshParseError("negative counts", lineno)

    verts = np.empty((n_verts, 3), dtype=np.float64)
    for i in range(n_verts):
        try:
            lineno, toks = next(stream)
        except StopIteration:
            raise MeshParseError(f"truncated file: expected {n_verts} vertices", len(lines)) from None
        try:
            verts[i] = [float(toks[0]), float(toks[1]), float(toks[2])]
        except (IndexError, ValueError):
            raise MeshParseError("bad vertex line", lineno) from None

    faces: list[tuple[int, int, int]] = []
    for _ in range(n_faces):
        try:
            lineno, toks = next(stream)
        except StopIteration:
            raise MeshParseError(f"truncated file: expected {n_faces} faces", len(lines)) from None
        try:
            k = int(toks[0])
            idx = [int(t) for t in toks[1 : k + 1]]
        except (IndexError, ValueError):
            raise MeshParseError("bad face line", lineno) from None
        if k < 3 or len(idx) != k:
            raise MeshParseError(f"face needs >= 3 indices, got {k}", lineno)
        if any(j < 0 or j >= n_verts for j in idx):
            raise MeshParseError("face index out of range", lineno)
        for t in range(1, k - 1):
            faces.append((idx[0], idx[t], idx[t + 1]))

    mesh = TriangleMesh(verts, np.asarray(faces, dtype=np.int64).reshape(-1, 3))
    keep = mesh.face_areas() > 0.0
    if not np.all(keep):
        mesh = TriangleMesh(mesh.vertices, mesh.faces[keep])
    return mesh


def write_off(mesh: TriangleMesh) -> str:
    """Serialize to OFF text; coordinates keep 17 significant digits so a
    parse/write round-trip is exact."""
    out = io.StringIO()
    out.write("OFF\n")
    out.write(f"{len(mesh.vertices)} {len(mesh.faces)} 0\n")
    for v in mesh.vertices:
        out.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
    for f in mesh.faces:
        out.write(f"3 {f[0]} {f[1]} {f[2]}\n")
    return out.getvalue()


def sample_surface(mesh: TriangleMesh, n: int, rng: Rng) -> PointCloud:
    """n points sampled uniformly by area: face chosen proportionally to its
    area, position uniform in the face via barycentric coordinates."""
    if n < 1:
        raise ParameterError(f"need n >= 1, got {n}")
    areas = mesh.face_areas()
    total = float(areas.sum())
    if len(mesh.faces) == 0 or total <= 0.0:
        raise DegenerateInputError("mesh has no positive-area faces")
    cum = np.cumsum(areas)
    face_idx = np.searchsorted(cum, rng.uniform(size=n) * total, side="right")
    face_idx = np.minimum(face_idx, len(areas) - 1)
    a = mesh.vertices[mesh.faces[face_idx, 0]]
    b = mesh.vertices[mesh.faces[face_idx, 1]]
    c = mesh.vertices[mesh.faces[face_idx, 2]]
    r1 = np.sqrt(rng.uniform(size=(n, 1)))
    r2 = rng.uniform(size=(n, 1))
    pts = (1.0 - r1) * a + r1 * (1.0 - r2) * b + r1 * r2 * c
    return PointCloud(pts)


# ---------------------------------------------------------------------------
# Synthetic shape families
# ---------------------------------------------------------------------------

def _sample_sphere(params, n, rng):
    radius = params.get("radius", 1.0)
    if radius <= 0:
        raise ParameterError("sphere radius must be positive")
    z = rng.normal(size=(n, 3))
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return radius * z / norms


def _sample_box(params, n, rng):
    sx = params.get("sx", 1.0)
    sy = params.get("sy", 1.0)
    sz = params.get("sz", 1.0)
    if min(sx, sy, sz) <= 0:
        raise ParameterError("box side lengths must be positive")
    # two faces per axis; face area is the product of the other two sides
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    cum = np.cumsum(areas)
    face = np.searchsorted(cum, rng.uniform(size=n) * cum[-1], side="right")
    face = np.minimum(face, 5)
    u = rng.uniform(size=n, low=-0.5, high=0.5)
    v = rng.uniform(size=n, low=-0.5, high=0.5)
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    half = np.array([sx, sy, sz]) / 2.0
    for ax, (u_ax, v_ax) in enumerate([(1, 2), (0, 2), (0, 1)]):
        m = axis == ax
        pts[m, ax] = sign[m] * half[ax]
        pts[m, u_ax] = u[m] * 2.0 * half[u_ax]
        pts[m, v_ax] = v[m] * 2.0 * half[v_ax]
    return pts


def _sample_cylinder(params, n, rng):
    radius = params.get("radius", 0.5)
    height = params.get("height", 1.0)
    if radius <= 0 or height <= 0:
        raise ParameterError("cylinder radius and height must be positive")
    lateral = 2.0 * math.pi * radius * height
    cap = math.pi * radius**2
    cum = np.cumsum([lateral, cap, cap])
    part = np.searchsorted(cum, rng.uniform(size=n) * cum[-1], side="right")
    part = np.minimum(part, 2)
    theta = rng.uniform(size=n, low=0.0, high=2.0 * math.pi)
    u = rng.uniform(size=n)
    pts = np.empty((n, 3))
    side = part == 0
    pts[side, 0] = radius * np.cos(theta[side])
    pts[side, 1] = radius * np.sin(theta[side])
    pts[side, 2] = (u[side] - 0.5) * height
    for which, zsign in ((1, 1.0), (2, -1.0)):
        m = part == which
        rho = radius * np.sqrt(u[m])
        pts[m, 0] = rho * np.cos(theta[m])
        pts[m, 1] = rho * np.sin(theta[m])
        pts[m, 2] = zsign * height / 2.0
    return pts


def _sample_torus(params, n, rng):
    big = params.get("big_radius", 1.0)
    small = params.get("small_radius", 0.25)
    if not 0 < small < big:
        raise ParameterError("torus needs 0 < small_radius < big_radius")
    # area element scales with (R + r cos v); rejection-sample the tube angle
    phi = np.empty(0)
    while phi.size < n:
        cand = rng.uniform(size=2 * n, low=0.0, high=2.0 * math.pi)
        accept = rng.uniform(size=2 * n) < (big + small * np.cos(cand)) / (big + small)
        phi = np.concatenate([phi, cand[accept]])
    phi = phi[:n]
    theta = rng.uniform(size=n, low=0.0, high=2.0 * math.pi)
    ring = big + small * np.cos(phi)
    return np.stack([ring * np.cos(theta), ring * np.sin(theta), small * np.sin(phi)], axis=1)


_FAMILY_SAMPLERS = {
    "sphere": _sample_sphere,
    "box": _sample_box,
    "cylinder": _sample_cylinder,
    "torus": _sample_torus,
}


def generate_synthetic(family: str, params: dict | None, n: int, rng: Rng) -> PointCloud:
    """n points uniform on the surface of a parametric family, labeled with
    the family name. Families: sphere, box, cylinder, torus."""
    if family not in _FAMILY_SAMPLERS:
        raise ParameterError(f"unknown family {family!r}; choose from {SYNTHETIC_FAMILIES}")
    if n < 4:
        raise ParameterError(f"need n >= 4, got {n}")
    pts = _FAMILY_SAMPLERS[family](params or {}, n, rng)
    return PointCloud(pts, label=family)


# ---------------------------------------------------------------------------
# XYZ / CSV / PLY cloud formats
# ---------------------------------------------------------------------------

def write_xyz(cloud: PointCloud) -> str:
    """One "x y z" triple per line, 17 significant digits."""
    out = io.StringIO()
    for p in cloud.points:
        out.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
    return out.getvalue()


def read_xyz(text: str, label: str | None = None) -> PointCloud:
    pts = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        try:
            pts.append((float(toks[0]), float(toks[1]), float(toks[2])))
        except (IndexError, ValueError):
            raise MeshParseError("bad xyz line", lineno) from None
    if not pts:
        raise MeshParseError("no points in xyz input")
    return PointCloud(np.asarray(pts), label=label)


def write_csv_cloud(cloud: PointCloud) -> str:
    out = io.StringIO()
    if cloud.label is None:
        out.write("x,y,z\n")
        for p in cloud.points:
            out.write(f"{p[0]:.17g},{p[1]:.17g},{p[2]:.17g}\n")
    else:
        out.write("x,y,z,label\n")
        for p in cloud.points:
            out.write(f"{p[0]:.17g},{p[1]:.17g},{p[2]:.17g},{cloud.label}\n")
    return out.getvalue()


def read_csv_cloud(text: str) -> PointCloud:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise MeshParseError("empty csv input")
    header = [h.strip().lower() for h in lines[0].split(",")]
    if header[:3] != ["x", "y", "z"]:
        raise MeshParseError("csv header must start with x,y,z", 1)
    has_label = len(header) > 3 and header[3] == "label"
    pts, labels = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        toks = [t.strip() for t in line.split(",")]
        try:
            pts.append((float(toks[0]), float(toks[1]), float(toks[2])))
        except (IndexError, ValueError):
            raise MeshParseError("bad csv row", lineno) from None
        if has_label:
            labels.add(toks[3])
    if has_label and len(labels) > 1:
        raise MeshParseError(f"mixed labels in one cloud: {sorted(labels)}")
    label = labels.pop() if labels else None
    return PointCloud(np.asarray(pts), label=label)


def write_ply(cloud: PointCloud) -> bytes:
    """Binary little-endian PLY with float64 vertex properties."""
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property double x\n"
        "property double y\n"
        "property double z\n"
        "end_header\n"
    )
    return header.encode("ascii") + np.ascontiguousarray(cloud.points, dtype="<f8").tobytes()

"""Meshes, point clouds, SDF shapes, rigid poses, trajectories, and file I/O.

Units are millimetres and seconds throughout. All types are immutable value
objects after construction and safe to share across threads.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12  # mm^2


class GeometryError(ValueError):
    pass


class MeshParseError(GeometryError):
    def __init__(self, path, line_no, msg):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z convention)
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q)


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_mat(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_slerp(qa, qb, u: float):
    qa = np.asarray(qa, dtype=np.float64)
    qb = np.asarray(qb, dtype=np.float64)
    dot = float(np.dot(qa, qb))
    if dot < 0.0:
        qb = -qb
        dot = -dot
    if dot > 1.0 - 1e-12:
        return quat_normalize(qa + u * (qb - qa))
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    s = np.sin(theta)
    return (np.sin((1 - u) * theta) / s) * qa + (np.sin(u * theta) / s) * qb


def quat_to_axis_angle(q):
    q = quat_normalize(q)
    w = np.clip(q[0], -1.0, 1.0)
    angle = 2.0 * np.arccos(w)
    s = np.sqrt(max(1.0 - w * w, 0.0))
    if s < 1e-12:
        return np.zeros(3), 0.0
    return q[1:] / s, angle


@dataclass(frozen=True)
class RigidPose:
    """Rigid transform: world point = R(quat) @ local + position."""

    position: np.ndarray
    quat: np.ndarray  # (w, x, y, z), unit norm

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    def rotation(self) -> np.ndarray:
        return quat_to_mat(self.quat)

    def to_local(self, p):
        return (np.asarray(p) - self.position) @ self.rotation()

    def to_world(self, p):
        return np.asarray(p) @ self.rotation().T + self.position


# ---------------------------------------------------------------------------
# core value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray  # (n, 3) float64, mm
    triangles: np.ndarray  # (m, 3) int64

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        t = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64))
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise GeometryError("triangle index out of range")

    def triangle_areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (n, 3) float64, mm

    def __post_init__(self):
        p = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "points", p)
        if p.size and not np.all(np.isfinite(p)):
            raise GeometryError("point cloud contains non-finite coordinates")

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class Trajectory:
    """Timed waypoints: (t seconds, position mm, unit quaternion)."""

    times: np.ndarray  # (k,)
    positions: np.ndarray  # (k, 3)
    quats: np.ndarray  # (k, 4) wxyz

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        p = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        q = np.asarray(self.quats, dtype=np.float64).reshape(-1, 4)
        if not (len(t) == len(p) == len(q)) or len(t) == 0:
            raise GeometryError("trajectory arrays must be non-empty and same length")
        if np.any(np.diff(t) <= 0):
            raise GeometryError("trajectory times must be strictly increasing")
        norms = np.linalg.norm(q, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise GeometryError("trajectory quaternions must be unit norm (1e-9)")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "quats", q)

    def sample(self, t: float):
        """Interpolated (position, quat) at time t, clamped at the ends."""
        ts = self.times
        if t <= ts[0]:
            return self.positions[0].copy(), self.quats[0].copy()
        if t >= ts[-1]:
            return self.positions[-1].copy(), self.quats[-1].copy()
        j = int(np.searchsorted(ts, t, side="right"))
        u = (t - ts[j - 1]) / (ts[j] - ts[j - 1])
        pos = (1 - u) * self.positions[j - 1] + u * self.positions[j]
        quat = quat_normalize(quat_slerp(self.quats[j - 1], self.quats[j], u))
        return pos, quat

    @property
    def t_end(self) -> float:
        return float(self.times[-1])


@dataclass(frozen=True)
class IndenterShape:
    """Rigid indenter geometry, one of a small analytic catalog or a mesh SDF.

    kind: "sphere" (radius), "box" (half_extents), "capsule"/"cylinder"
    (radius + half_length along local z), or "mesh" (TriMesh sampled onto a
    dense SDF grid at `grid_res` mm).
    """

    kind: str
    radius: float = 0.0
    half_extents: np.ndarray | None = None
    half_length: float = 0.0
    mesh: TriMesh | None = None
    grid_res: float = 0.0
    _sdf_grid: dict = field(default_factory=dict, repr=False, compare=False)

    @staticmethod
    def sphere(radius: float) -> "IndenterShape":
        if radius <= 0:
            raise GeometryError("sphere radius must be > 0")
        return IndenterShape("sphere", radius=radius)

    @staticmethod
    def box(half_extents) -> "IndenterShape":
        he = np.asarray(half_extents, dtype=np.float64)
        if np.any(he <= 0):
            raise GeometryError("box half-extents must be > 0")
        return IndenterShape("box", half_extents=he)

    @staticmethod
    def capsule(radius: float, half_length: float) -> "IndenterShape":
        if radius <= 0 or half_length <= 0:
            raise GeometryError("capsule dimensions must be > 0")
        return IndenterShape("capsule", radius=radius, half_length=half_length)

    @staticmethod
    def cylinder(radius: float, half_length: float) -> "IndenterShape":
        if radius <= 0 or half_length <= 0:
            raise GeometryError("cylinder dimensions must be > 0")
        return IndenterShape("cylinder", radius=radius, half_length=half_length)

    @staticmethod
    def from_mesh(mesh: TriMesh, grid_res: float) -> "IndenterShape":
        if grid_res <= 0:
            raise GeometryError("mesh SDF grid resolution must be > 0")
        shape = IndenterShape("mesh", mesh=mesh, grid_res=grid_res)
        shape._sdf_grid["data"] = _build_mesh_sdf(mesh, grid_res)
        return shape

    def max_reach(self) -> float:
        """Radius of a bounding sphere around the local origin."""
        if self.kind == "sphere":
            return self.radius
        if self.kind == "box":
            return float(np.linalg.norm(self.half_extents))
        if self.kind in ("capsule", "cylinder"):
            return float(np.hypot(self.radius, self.half_length) + (self.radius if self.kind == "capsule" else 0.0))
        lo, hi = self.mesh.bounds()
        return float(np.max(np.linalg.norm(np.stack([lo, hi]), axis=1)))


# ---------------------------------------------------------------------------
# OBJ / XYZ / PLY / CSV I/O
# ---------------------------------------------------------------------------

FMT9 = "%.9g"  # 9 significant digits, the documented ASCII precision


def load_mesh(path, strict_degenerate: bool = False) -> TriMesh:
    """Parse an OBJ file restricted to `v` and `f` records.

    Faces with more than three vertices are fan-triangulated around the first
    vertex. Degenerate triangles (area <= 1e-12 mm^2) are dropped with a
    warning, or raise when `strict_degenerate` is set.
    """
    path = Path(path)
    verts: list = []
    faces: list = []
    with open(path, "r") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshParseError(path, line_no, "vertex needs 3 coordinates")
                try:
                    verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError as e:
                    raise MeshParseError(path, line_no, f"bad vertex coordinate: {e}")
            elif tag == "f":
                if len(parts) < 4:
                    raise MeshParseError(path, line_no, "face needs at least 3 vertices")
                idx = []
                for tok in parts[1:]:
                    head = tok.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise MeshParseError(path, line_no, f"bad face index {tok!r}")
                    if i < 0:
                        raise MeshParseError(path, line_no, "negative face indices unsupported")
                    idx.append(i - 1)
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1], line_no))
            elif tag in ("vn", "vt", "o", "g", "s", "usemtl", "mtllib"):
                continue  # ignored OBJ records
            else:
                raise MeshParseError(path, line_no, f"unsupported record {tag!r}")

    v = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    kept = []
    for (a, b, c, line_no) in faces:
        for i in (a, b, c):
            if i < 0 or i >= len(v):
                raise MeshParseError(path, line_no, f"face index {i + 1} out of range (have {len(v)} vertices)")
        area = 0.5 * np.linalg.norm(np.cross(v[b] - v[a], v[c] - v[a]))
        if area <= DEGENERATE_AREA:
            if strict_degenerate:
                raise MeshParseError(path, line_no, f"degenerate triangle (area {area:g} mm^2)")
            logger.warning("%s:%d: dropping degenerate triangle", path, line_no)
            continue
        kept.append((a, b, c))
    return TriMesh(v, np.asarray(kept, dtype=np.int64).reshape(-1, 3))


def save_mesh(mesh: TriMesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v " + " ".join(FMT9 % c for c in v) + "\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def save_xyz(cloud: PointCloud, path) -> None:
    with open(path, "w") as fh:
        for p in cloud.points:
            fh.write(" ".join(FMT9 % c for c in p) + "\n")


def load_xyz(path) -> PointCloud:
    pts = []
    with open(path, "r") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise GeometryError(f"{path}:{line_no}: expected 3 columns")
            pts.append([float(x) for x in parts])
    return PointCloud(np.asarray(pts, dtype=np.float64).reshape(-1, 3))


def save_ply(cloud: PointCloud, path) -> None:
    """Binary little-endian PLY with float32 x/y/z."""
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(cloud.points.astype("<f4").tobytes())


def load_ply(path) -> PointCloud:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if end < 0:
        raise GeometryError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    n = None
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line.startswith("format") and "binary_little_endian" not in line:
            raise GeometryError(f"{path}: only binary little-endian PLY supported")
    if n is None:
        raise GeometryError(f"{path}: missing vertex element")
    body = data[end + len(b"end_header\n"):]
    pts = np.frombuffer(body, dtype="<f4", count=n * 3).reshape(n, 3)
    return PointCloud(pts.astype(np.float64))


TRAJ_HEADER = "t,x,y,z,qw,qx,qy,qz"


def save_trajectory(traj: Trajectory, path) -> None:
    with open(path, "w") as fh:
        fh.write(TRAJ_HEADER + "\n")
        for t, p, q in zip(traj.times, traj.positions, traj.quats):
            row = [t, p[0], p[1], p[2], q[0], q[1], q[2], q[3]]
            fh.write(",".join(FMT9 % x for x in row) + "\n")


def load_trajectory(path) -> Trajectory:
    with open(path, "r") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0].replace(" ", "") != TRAJ_HEADER:
        raise GeometryError(f"{path}: expected header '{TRAJ_HEADER}'")
    rows = []
    for line_no, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 8:
            raise GeometryError(f"{path}:{line_no}: expected 8 columns")
        rows.append([float(x) for x in parts])
    arr = np.asarray(rows, dtype=np.float64)
    return Trajectory(arr[:, 0], arr[:, 1:4], arr[:, 4:8])


# ---------------------------------------------------------------------------
# surface sampling
# ---------------------------------------------------------------------------

def sample_surface(mesh: TriMesh, n: int, seed: int) -> PointCloud:
    """Uniformly sample n points on the mesh surface (area-weighted)."""
    if n < 1:
        raise GeometryError("n must be >= 1")
    if len(mesh.triangles) == 0:
        raise GeometryError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    probs = areas / areas.sum()
    tri_idx = rng.choice(len(probs), size=n, p=probs)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    tris = mesh.triangles[tri_idx]
    a = mesh.vertices[tris[:, 0]]
    b = mesh.vertices[tris[:, 1]]
    c = mesh.vertices[tris[:, 2]]
    pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return PointCloud(pts)


def subsample_cloud(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Seeded uniform subsample; with replacement only when the cloud is small."""
    rng = np.random.default_rng(seed)
    m = len(cloud)
    if m == 0:
        raise GeometryError("cannot subsample an empty cloud")
    idx = rng.choice(m, size=n, replace=m < n)
    return PointCloud(cloud.points[idx])


# ---------------------------------------------------------------------------
# signed distance queries
# ---------------------------------------------------------------------------

def _sphere_sdf(p, radius):
    r = np.linalg.norm(p, axis=-1)
    d = r - radius
    with np.errstate(invalid="ignore", divide="ignore"):
        g = p / r[..., None]
    # centre singularity: documented tie-break along +z
    centre = r < 1e-12
    if np.any(centre):
        g = np.where(centre[..., None], np.array([0.0, 0.0, 1.0]), g)
    return d, g


def _box_sdf(p, he):
    q = np.abs(p) - he
    outside = np.maximum(q, 0.0)
    d_out = np.linalg.norm(outside, axis=-1)
    d_in = np.minimum(np.max(q, axis=-1), 0.0)
    d = d_out + d_in
    g = np.empty_like(p)
    out_mask = d_out > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        g_out = outside * np.sign(p) / d_out[..., None]
    # inside: step toward the nearest face
    amax = np.argmax(q, axis=-1)
    g_in = np.zeros_like(p)
    np.put_along_axis(g_in, amax[..., None], 1.0, axis=-1)
    g_in = g_in * np.sign(p)
    zero_sign = (g_in == 0.0) & (np.arange(3) == amax[..., None])
    g_in = np.where(zero_sign, 1.0, g_in)  # p exactly on the axis plane
    g = np.where(out_mask[..., None], g_out, g_in)
    return d, g


def _capsule_sdf(p, radius, half_length):
    z = np.clip(p[..., 2], -half_length, half_length)
    closest = np.stack([np.zeros_like(z), np.zeros_like(z), z], axis=-1)
    diff = p - closest
    r = np.linalg.norm(diff, axis=-1)
    d = r - radius
    with np.errstate(invalid="ignore", divide="ignore"):
        g = diff / r[..., None]
    on_axis = r < 1e-12
    if np.any(on_axis):
        g = np.where(on_axis[..., None], np.array([0.0, 0.0, 1.0]), g)
    return d, g


def _cylinder_sdf(p, radius, half_length):
    rxy = np.linalg.norm(p[..., :2], axis=-1)
    qa = rxy - radius
    qb = np.abs(p[..., 2]) - half_length
    q = np.stack([qa, qb], axis=-1)
    outside = np.maximum(q, 0.0)
    d_out = np.linalg.norm(outside, axis=-1)
    d_in = np.minimum(np.maximum(qa, qb), 0.0)
    d = d_out + d_in

    with np.errstate(invalid="ignore", divide="ignore"):
        radial = p[..., :2] / rxy[..., None]
    radial = np.where((rxy < 1e-12)[..., None], np.array([1.0, 0.0]), radial)
    axial = np.sign(p[..., 2])
    axial = np.where(axial == 0.0, 1.0, axial)

    g = np.zeros_like(p)
    out_mask = d_out > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        wa = outside[..., 0] / np.where(d_out > 0, d_out, 1.0)
        wb = outside[..., 1] / np.where(d_out > 0, d_out, 1.0)
    g_out = np.concatenate([radial * wa[..., None], (axial * wb)[..., None]], axis=-1)
    side = qa >= qb
    g_in_side = np.concatenate([radial, np.zeros_like(axial)[..., None]], axis=-1)
    g_in_cap = np.concatenate([np.zeros_like(radial), axial[..., None]], axis=-1)
    g_in = np.where(side[..., None], g_in_side, g_in_cap)
    g = np.where(out_mask[..., None], g_out, g_in)
    return d, g


def _point_triangle_dist(pts, tri_a, tri_b, tri_c):
    """Min distance from each point to each triangle: (np, nt) matrix."""
    # region-clamped projection (Eberly), vectorized over points x triangles
    ab = tri_b - tri_a
    ac = tri_c - tri_a
    ap = pts[:, None, :] - tri_a[None, :, :]
    d1 = np.einsum("tk,ptk->pt", ab, ap)
    d2 = np.einsum("tk,ptk->pt", ac, ap)
    a11 = np.einsum("tk,tk->t", ab, ab)
    a12 = np.einsum("tk,tk->t", ab, ac)
    a22 = np.einsum("tk,tk->t", ac, ac)
    det = a11 * a22 - a12 * a12
    v = (a22 * d1 - a12 * d2) / det
    w = (a11 * d2 - a12 * d1) / det
    v = np.clip(v, 0.0, 1.0)
    w = np.clip(w, 0.0, 1.0)
    over = v + w > 1.0
    scale = np.where(over, 1.0 / np.where(over, v + w, 1.0), 1.0)
    v = v * scale
    w = w * scale
    closest = tri_a[None] + v[..., None] * ab[None] + w[..., None] * ac[None]
    d_int = np.linalg.norm(pts[:, None, :] - closest, axis=-1)

    def seg_dist(p0, p1):
        e = p1 - p0
        tproj = np.einsum("tk,ptk->pt", e, pts[:, None, :] - p0[None, :, :])
        tproj = np.clip(tproj / np.einsum("tk,tk->t", e, e), 0.0, 1.0)
        cl = p0[None] + tproj[..., None] * e[None]
        return np.linalg.norm(pts[:, None, :] - cl, axis=-1)

    d = np.minimum(d_int, seg_dist(tri_a, tri_b))
    d = np.minimum(d, seg_dist(tri_a, tri_c))
    d = np.minimum(d, seg_dist(tri_b, tri_c))
    return d


def _ray_parity_inside(pts, mesh: TriMesh) -> np.ndarray:
    """Inside test by +x ray crossing parity, with a jittered retry on edge hits."""
    def parity(direction):
        a = mesh.vertices[mesh.triangles[:, 0]]
        b = mesh.vertices[mesh.triangles[:, 1]]
        c = mesh.vertices[mesh.triangles[:, 2]]
        e1 = b - a
        e2 = c - a
        pvec = np.cross(direction, e2)
        det = np.einsum("tk,tk->t", e1, pvec)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = pts[:, None, :] - a[None]
        u = np.einsum("ptk,tk->pt", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[None])
        vv = np.einsum("ptk,k->pt", qvec, direction) * inv
        tt = np.einsum("ptk,tk->pt", qvec, e2) * inv
        eps = 1e-10
        hit = ok[None] & (u > -eps) & (vv > -eps) & (u + vv < 1 + eps) & (tt > eps)
        ambiguous = hit & (
            (np.abs(u) < 1e-7) | (np.abs(vv) < 1e-7) | (np.abs(u + vv - 1) < 1e-7)
        )
        return np.sum(hit, axis=1) % 2 == 1, np.any(ambiguous, axis=1)

    inside, ambiguous = parity(np.array([1.0, 0.0, 0.0]))
    if np.any(ambiguous):
        jittered, _ = parity(np.array([0.976, 0.183, 0.117]) / np.linalg.norm([0.976, 0.183, 0.117]))
        inside = np.where(ambiguous, jittered, inside)
    return inside


def _build_mesh_sdf(mesh: TriMesh, grid_res: float) -> dict:
    lo, hi = mesh.bounds()
    lo = lo - 2.0 * grid_res
    hi = hi + 2.0 * grid_res
    dims = np.maximum(np.ceil((hi - lo) / grid_res).astype(int) + 1, 4)
    xs = lo[0] + grid_res * np.arange(dims[0])
    ys = lo[1] + grid_res * np.arange(dims[1])
    zs = lo[2] + grid_res * np.arange(dims[2])
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1)

    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    chunk = max(1, 2_000_000 // max(len(a), 1))
    dist = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        dist[s:s + chunk] = _point_triangle_dist(pts[s:s + chunk], a, b, c).min(axis=1)
    inside = _ray_parity_inside(pts, mesh)
    sdf = np.where(inside, -dist, dist).reshape(dims)
    return {"origin": lo, "res": grid_res, "dims": dims, "values": sdf}


def _mesh_sdf_query(grid: dict, p):
    origin, res, dims, vals = grid["origin"], grid["res"], grid["dims"], grid["values"]
    g = (p - origin) / res
    clamped = np.clip(g, 0.0, np.asarray(dims) - 1.000001)
    was_clamped = np.any(np.abs(g - clamped) > 1e-9, axis=-1)
    i0 = np.floor(clamped).astype(int)
    i0 = np.minimum(i0, np.asarray(dims) - 2)
    f = clamped - i0

    def gather(ox, oy, oz):
        return vals[i0[..., 0] + ox, i0[..., 1] + oy, i0[..., 2] + oz]

    c00 = gather(0, 0, 0) * (1 - f[..., 2]) + gather(0, 0, 1) * f[..., 2]
    c01 = gather(0, 1, 0) * (1 - f[..., 2]) + gather(0, 1, 1) * f[..., 2]
    c10 = gather(1, 0, 0) * (1 - f[..., 2]) + gather(1, 0, 1) * f[..., 2]
    c11 = gather(1, 1, 0) * (1 - f[..., 2]) + gather(1, 1, 1) * f[..., 2]
    c0 = c00 * (1 - f[..., 1]) + c01 * f[..., 1]
    c1 = c10 * (1 - f[..., 1]) + c11 * f[..., 1]
    d = c0 * (1 - f[..., 0]) + c1 * f[..., 0]

    # distance beyond the grid: add the clamp offset (conservative extrapolation)
    d = d + np.linalg.norm((g - clamped) * res, axis=-1)
    return d, clamped, i0, was_clamped


def sdf_query(shape: IndenterShape, pose: RigidPose, p):
    """Signed distance (mm, negative inside) and unit outward gradient at p.

    Accepts a single point or an (n, 3) batch; gradients are returned in
    world frame. Mesh SDF queries outside the sampled grid clamp and
    extrapolate conservatively.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = p.reshape(-1, 3)
    R = pose.rotation()
    local = (pts - pose.position) @ R

    if shape.kind == "sphere":
        d, g = _sphere_sdf(local, shape.radius)
    elif shape.kind == "box":
        d, g = _box_sdf(local, shape.half_extents)
    elif shape.kind == "capsule":
        d, g = _capsule_sdf(local, shape.radius, shape.half_length)
    elif shape.kind == "cylinder":
        d, g = _cylinder_sdf(local, shape.radius, shape.half_length)
    elif shape.kind == "mesh":
        grid = shape._sdf_grid["data"]
        d, _, _, _ = _mesh_sdf_query(grid, local)
        h = 1e-3  # central differences on the trilinear field
        g = np.empty_like(local)
        for k in range(3):
            dp = local.copy()
            dm = local.copy()
            dp[:, k] += h
            dm[:, k] -= h
            g[:, k] = (_mesh_sdf_query(grid, dp)[0] - _mesh_sdf_query(grid, dm)[0]) / (2 * h)
        norms = np.linalg.norm(g, axis=-1, keepdims=True)
        g = g / np.where(norms > 1e-12, norms, 1.0)
    else:
        raise GeometryError(f"unknown shape kind {shape.kind!r}")

    g_world = g @ R.T
    if single:
        return float(d[0]), g_world[0]
    return d, g_world


# ---------------------------------------------------------------------------
# hemisphere particle seeding
# ---------------------------------------------------------------------------

def fill_hemisphere_particles(
    radius: float,
    shell_thickness,
    voxel_res: float,
    density: float,
    seed: int = 0,
):
    """Seed a hemispherical gel pad (flat face on z=0, dome up) with particles.

    Eight jittered sub-cell particles per voxel; particles falling outside the
    hemisphere (or inside the inner shell boundary) are discarded. Particles
    in the outermost quarter-voxel band are snapped radially onto the exact
    dome so the tracked surface starts crisp; they carry the surface flag.
    Per-particle mass is density * voxel_volume / 8 (density in kg/m^3,
    converted to kg/mm^3 internally).
    """
    from .mpm import ParticleSet  # geometry is imported by mpm; keep this lazy

    if radius <= 0 or voxel_res <= 0:
        raise GeometryError("radius and voxel_res must be > 0")
    solid = shell_thickness == "solid" or shell_thickness is None
    if not solid and shell_thickness <= 0:
        raise GeometryError("shell thickness must be > 0 or 'solid'")

    rng = np.random.default_rng(seed)
    n_cells = int(np.ceil(radius / voxel_res))
    # cell origins spanning [-n, n) x [-n, n) x [0, n) in voxel units
    ix = np.arange(-n_cells, n_cells)
    iz = np.arange(0, n_cells)
    cx, cy, cz = np.meshgrid(ix, ix, iz, indexing="ij")
    cell_origin = np.stack([cx.ravel(), cy.ravel(), cz.ravel()], axis=-1) * voxel_res

    # 2x2x2 sub-cell lattice with deterministic jitter
    sub = np.array([(i + 0.5) * 0.5 for i in range(2)]) * voxel_res
    ox, oy, oz = np.meshgrid(sub, sub, sub, indexing="ij")
    offsets = np.stack([ox.ravel(), oy.ravel(), oz.ravel()], axis=-1)

    pts = (cell_origin[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
    jitter = rng.uniform(-0.2, 0.2, size=pts.shape) * (voxel_res * 0.5)
    pts = pts + jitter

    r = np.linalg.norm(pts, axis=1)
    keep = (pts[:, 2] >= 0.0) & (r <= radius)
    if not solid:
        keep &= r >= radius - shell_thickness
    pts = pts[keep]
    r = r[keep]
    if len(pts) == 0:
        raise GeometryError("no particles produced; radius smaller than voxel_res?")

    snap_band = 0.25 * voxel_res
    surface = r >= radius - snap_band
    safe_r = np.where(r > 1e-12, r, 1.0)
    pts[surface] = pts[surface] * (radius / safe_r[surface])[:, None]

    n = len(pts)
    density_mm = density * 1e-9  # kg/m^3 -> kg/mm^3
    cell_vol = voxel_res ** 3
    mass = np.full(n, density_mm * cell_vol / 8.0)
    volume = np.full(n, cell_vol / 8.0)
    F = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    return ParticleSet(
        x=pts,
        v=np.zeros((n, 3)),
        F=F,
        C=np.zeros((n, 3, 3)),
        m=mass,
        V0=volume,
        surface_flag=surface,
    )

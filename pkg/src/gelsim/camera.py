"""Fisheye raycaster: renders the deformed gel surface into depth/normal maps.

The virtual camera sits at the sensor base centre looking along +z, covering
the upper hemisphere with an equidistant fisheye mapping (pixel radius
proportional to polar angle). The render target is a triangle mesh whose
vertices track the surface-flagged particles; connectivity is built once
from the undeformed hemisphere and never changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay

from . import dual as du
from .mpm import ParticleSet


class CameraError(ValueError):
    pass


@dataclass(frozen=True)
class CameraConfig:
    width: int = 64
    height: int = 64
    fov: float = np.pi / 2  # polar angle at the image disc edge
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    max_depth: float = 50.0  # mm

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise CameraError("camera resolution must be at least 8x8")
        if not (0.0 < self.fov <= np.pi / 2 + 1e-12):
            raise CameraError("fov must be in (0, pi/2]")
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))


@dataclass
class SurfaceMesh:
    """Triangulated gel surface bound 1:1 to the surface-flagged particles."""

    vertex_particle_idx: np.ndarray  # indices into the full particle arrays
    triangles: np.ndarray  # (m, 3) into the vertex list, fixed forever
    vertices: np.ndarray  # (k, 3) current positions

    def reposed(self, particles: ParticleSet) -> "SurfaceMesh":
        """Same connectivity, vertices refreshed from current particle state."""
        pos = du.value(particles.x)[self.vertex_particle_idx]
        return SurfaceMesh(self.vertex_particle_idx, self.triangles, pos)


@dataclass
class TactileGeometryFrame:
    depth: np.ndarray  # (H, W) mm, max_depth where no hit
    normal: np.ndarray  # (H, W, 3) unit vectors, camera frame
    valid_mask: np.ndarray  # (H, W) bool
    max_depth: float


def build_surface_mesh(initial_particles: ParticleSet, radius: float) -> SurfaceMesh:
    """Triangulate the surface particles of the undeformed hemisphere.

    Particles are projected to the unit dome and mapped by the azimuthal
    equidistant projection (polar angle as planar radius); a 2D Delaunay
    triangulation of that disc gives disc-topology connectivity with the
    base rim as boundary.
    """
    idx = np.nonzero(initial_particles.surface_flag)[0]
    if len(idx) < 4:
        raise CameraError("need at least 4 surface particles to triangulate")
    pos = du.value(initial_particles.x)[idx]
    unit = pos / np.linalg.norm(pos, axis=1, keepdims=True)
    theta = np.arccos(np.clip(unit[:, 2], -1.0, 1.0))
    rho = np.linalg.norm(unit[:, :2], axis=1)
    safe = np.where(rho > 1e-12, rho, 1.0)
    uv = theta[:, None] * (unit[:, :2] / safe[:, None])
    uv[rho <= 1e-12] = 0.0
    tri = Delaunay(uv)
    return SurfaceMesh(vertex_particle_idx=idx, triangles=tri.simplices.astype(np.int64), vertices=pos.copy())


def pixel_to_ray(u: int, v: int, cfg: CameraConfig):
    """Equidistant fisheye: unit direction for pixel (u, v), or None if the
    pixel lies outside the image disc."""
    dx = (u + 0.5) / cfg.width - 0.5
    dy = (v + 0.5) / cfg.height - 0.5
    r = 2.0 * np.hypot(dx, dy)
    if r > 1.0:
        return None
    phi = r * cfg.fov
    az = np.arctan2(dy, dx)
    return np.array([np.sin(phi) * np.cos(az), np.sin(phi) * np.sin(az), np.cos(phi)])


def _ray_grid(cfg: CameraConfig):
    us, vs = np.meshgrid(np.arange(cfg.width), np.arange(cfg.height), indexing="xy")
    dx = (us + 0.5) / cfg.width - 0.5
    dy = (vs + 0.5) / cfg.height - 0.5
    r = 2.0 * np.hypot(dx, dy)
    inside = r <= 1.0
    phi = r * cfg.fov
    az = np.arctan2(dy, dx)
    dirs = np.stack(
        [np.sin(phi) * np.cos(az), np.sin(phi) * np.sin(az), np.cos(phi)], axis=-1
    )
    return dirs, inside


def render_maps(mesh: SurfaceMesh, cfg: CameraConfig, flip_to_face_camera: bool = True) -> TactileGeometryFrame:
    """Brute-force nearest ray-triangle intersection per pixel.

    Depth is the Euclidean distance from the camera position; normals are
    flat per-triangle normals, flipped so n . ray < 0, expressed in the
    camera frame (axes aligned with world, origin at the camera).
    """
    H, W = cfg.height, cfg.width
    dirs, inside = _ray_grid(cfg)
    depth = np.full((H, W), cfg.max_depth)
    normal = np.tile(np.array([0.0, 0.0, -1.0]), (H, W, 1))
    valid = np.zeros((H, W), dtype=bool)

    tris = mesh.triangles
    a = mesh.vertices[tris[:, 0]] - cfg.position
    b = mesh.vertices[tris[:, 1]] - cfg.position
    c = mesh.vertices[tris[:, 2]] - cfg.position
    e1 = b - a
    e2 = c - a
    tri_n = np.cross(e1, e2)
    tri_n_unit = tri_n / np.linalg.norm(tri_n, axis=1, keepdims=True)

    ray_idx = np.nonzero(inside.ravel())[0]
    flat_dirs = dirs.reshape(-1, 3)[ray_idx]
    eps = 1e-9

    # the ray origin is fixed at the camera, so tvec and qvec are
    # per-triangle constants of the Moller-Trumbore test
    tvec = -a  # origin - a, (m, 3)
    qvec = np.cross(tvec, e1)  # (m, 3)
    t_num = np.einsum("mk,mk->m", qvec, e2)  # (m,)

    chunk = max(1, 4_000_000 // max(len(tris), 1))
    best_t = np.full(len(ray_idx), np.inf)
    best_tri = np.full(len(ray_idx), -1, dtype=np.int64)
    for s in range(0, len(ray_idx), chunk):
        d = flat_dirs[s:s + chunk]  # (r, 3)
        pvec = np.cross(d[:, None, :], e2[None, :, :])  # (r, m, 3)
        det = np.einsum("rmk,mk->rm", pvec, e1)
        ok = np.abs(det) > 1e-14
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        uu = np.einsum("rmk,mk->rm", pvec, tvec) * inv_det
        vv = np.einsum("rk,mk->rm", d, qvec) * inv_det
        tt = t_num[None, :] * inv_det
        hit = ok & (uu >= -eps) & (vv >= -eps) & (uu + vv <= 1 + eps) & (tt > 1e-6)
        tt = np.where(hit, tt, np.inf)
        arg = np.argmin(tt, axis=1)
        tmin = tt[np.arange(len(d)), arg]
        better = tmin < best_t[s:s + chunk]
        best_t[s:s + chunk] = np.where(better, tmin, best_t[s:s + chunk])
        best_tri[s:s + chunk] = np.where(better, arg, best_tri[s:s + chunk])

    hit_mask = np.isfinite(best_t) & (best_tri >= 0)
    rows, cols = np.unravel_index(ray_idx[hit_mask], (H, W))
    t_hit = best_t[hit_mask]
    n_hit = tri_n_unit[best_tri[hit_mask]]
    d_hit = flat_dirs[hit_mask]
    if flip_to_face_camera:
        facing = np.einsum("ij,ij->i", n_hit, d_hit)
        n_hit = np.where((facing > 0)[:, None], -n_hit, n_hit)

    depth[rows, cols] = np.minimum(t_hit, cfg.max_depth)
    normal[rows, cols] = n_hit
    valid[rows, cols] = t_hit <= cfg.max_depth
    return TactileGeometryFrame(depth=depth, normal=normal, valid_mask=valid, max_depth=cfg.max_depth)

"""Explicit MLS-MPM time stepper with rigid-indenter contact.

Particles carry position, velocity, deformation gradient F and the local
affine velocity field C; a fixed background voxel grid mediates momentum
exchange through quadratic B-spline transfers. Stress is fixed-corotated
hyperelastic. The stepper is written against the generic array helpers in
:mod:`gelsim.dual`, so the identical code path propagates two forward-mode
tangent channels (d/d log E, d/d nu) when the material parameters are Duals.

Unit system: mm, s, kg. Stress in this system is kg/(mm*s^2) = kPa, so
pascal inputs are scaled by 1e-3 at the boundary.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import dual as du
from .geometry import (
    IndenterShape,
    PointCloud,
    RigidPose,
    Trajectory,
    quat_conj,
    quat_mul,
    quat_to_axis_angle,
    sdf_query,
)

PA_TO_MM_UNITS = 1e-3  # Pa -> kg/(mm*s^2)

# grid nodes lighter than this (kg) are treated as empty when forming velocities
MASS_EPS = 1e-15

if os.environ.get("GELSIM_DISABLE_NUMBA"):
    _kernels = None
else:
    try:
        from . import mpm_kernels as _kernels
    except ImportError:  # pragma: no cover - numba is normally present
        _kernels = None


class SimulationError(RuntimeError):
    """Numeric failure inside the stepper (CFL violation, inverted element...)."""


@dataclass
class ParticleSet:
    """Lagrangian state of the gel. Arrays may be ndarrays or Duals."""

    x: np.ndarray  # (n, 3) positions, mm
    v: np.ndarray  # (n, 3) velocities, mm/s
    F: np.ndarray  # (n, 3, 3) deformation gradients
    C: np.ndarray  # (n, 3, 3) affine velocity gradients, 1/s
    m: np.ndarray  # (n,) masses, kg
    V0: np.ndarray  # (n,) reference volumes, mm^3
    surface_flag: np.ndarray  # (n,) bool

    def __post_init__(self):
        n = len(self.m)
        for name in ("x", "v", "F", "C"):
            if len(du.value(getattr(self, name))) != n:
                raise ValueError(f"particle array {name} length mismatch")
        if np.any(self.m <= 0):
            raise ValueError("particle masses must be > 0")

    @property
    def n(self) -> int:
        return len(self.m)

    def copy(self) -> "ParticleSet":
        return ParticleSet(
            self.x.copy(), self.v.copy(), self.F.copy(), self.C.copy(),
            self.m.copy(), self.V0.copy(), self.surface_flag.copy(),
        )

    def promoted(self) -> "ParticleSet":
        """Copy with kinematic state lifted to zero-tangent Duals."""
        return ParticleSet(
            du.promote(self.x).copy(),
            du.promote(self.v).copy(),
            du.promote(self.F).copy(),
            du.promote(self.C).copy(),
            self.m.copy(),
            self.V0.copy(),
            self.surface_flag.copy(),
        )


@dataclass
class GridField:
    """Eulerian background grid over a fixed voxel lattice."""

    origin: np.ndarray  # (3,) mm, position of node (0,0,0)
    voxel_res: float  # mm
    dims: np.ndarray  # (3,) node counts
    mass: Optional[np.ndarray] = None  # (nnodes,) kg, flat C-order
    velocity: Optional[np.ndarray] = None  # (nnodes, 3) mm/s

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.dims))

    def node_positions(self) -> np.ndarray:
        key = (tuple(self.origin), self.voxel_res, tuple(int(d) for d in self.dims))
        cached = _NODE_POS_CACHE.get(key)
        if cached is None:
            dx, dy, dz = (int(d) for d in self.dims)
            ii, jj, kk = np.meshgrid(np.arange(dx), np.arange(dy), np.arange(dz), indexing="ij")
            idx = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=-1)
            cached = self.origin + idx * self.voxel_res
            if len(_NODE_POS_CACHE) > 32:
                _NODE_POS_CACHE.clear()
            _NODE_POS_CACHE[key] = cached
        return cached

    def blank(self) -> "GridField":
        return GridField(self.origin, self.voxel_res, self.dims.copy())


_NODE_POS_CACHE: dict = {}


@dataclass
class MaterialParams:
    """Isotropic elastic material. E in Pa; mu/lambda derived (also Pa)."""

    E: float
    nu: float
    mu: float = 0.0
    lam: float = 0.0
    density: float = 1.0e6  # kg/m^3; mass-scaled default, see make_material
    gravity: np.ndarray = field(default_factory=lambda: np.zeros(3))  # mm/s^2

    @property
    def mu_mm(self):
        return self.mu * PA_TO_MM_UNITS

    @property
    def lam_mm(self):
        return self.lam * PA_TO_MM_UNITS


def lame_from_E_nu(E, nu):
    """Lame parameters (mu, lambda) from Young's modulus and Poisson ratio.

    Same units as E. Works on floats or Duals.
    """
    E_val = float(du.value(E))
    nu_val = float(du.value(nu))
    if E_val <= 0:
        raise ValueError("E must be > 0")
    if not (-1.0 < nu_val < 0.5):
        raise ValueError(f"nu={nu_val} outside (-1, 0.5): incompressibility singularity")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


def make_material(E: float, nu: float, density: float = 1.0e6, gravity=None) -> MaterialParams:
    """MaterialParams with consistent Lame constants.

    The default density is deliberately mass-scaled far above real silicone:
    the stepper is explicit with dt fixed by fps x substeps, and the press
    speeds of interest are quasistatic, where the equilibrium deformation is
    density-independent. Pass a physical density together with a finer dt if
    transient wave accuracy matters.
    """
    mu, lam = lame_from_E_nu(E, nu)
    g = np.zeros(3) if gravity is None else np.asarray(gravity, dtype=np.float64)
    return MaterialParams(E=E, nu=nu, mu=mu, lam=lam, density=density, gravity=g)


@dataclass
class IndenterState:
    shape: IndenterShape
    pose: RigidPose
    lin_vel: np.ndarray  # mm/s
    ang_vel: np.ndarray  # rad/s
    trajectory: Trajectory
    friction_mu: float = 0.3
    softness: float = 15.0
    softness_scale: float = 7.5

    def contact_radius(self, voxel_res: float) -> float:
        """Coupling distance in mm: softness_scale / softness voxels.

        The default scale puts the radius at half a voxel for softness 15;
        a radius of 1/softness voxels leaves ~0.4 voxels of indenter
        penetration, which breaks the press-depth tracking bound.
        """
        return voxel_res * self.softness_scale / self.softness


@dataclass
class SimState:
    particles: ParticleSet
    grid: GridField
    indenter: IndenterState
    material: MaterialParams
    t: float = 0.0
    fps: float = 24.0
    substeps_per_frame: int = 100

    @property
    def dt_sub(self) -> float:
        return 1.0 / (self.fps * self.substeps_per_frame)

    def copy(self) -> "SimState":
        return replace(self, particles=self.particles.copy(), grid=self.grid.blank())


# ---------------------------------------------------------------------------
# constitutive model
# ---------------------------------------------------------------------------

def first_piola_stress(F, mu, lam):
    """Fixed-corotated first Piola-Kirchhoff stress.

    P = 2 mu (F - R) + lambda (J - 1) J F^{-T}, R the rotation of the polar
    decomposition. Rotations are stress-free; units follow mu/lambda.
    """
    J = du.det3(F)
    if np.any(du.value(J) <= 0.0):
        bad = int(np.argmax(du.value(J) <= 0.0))
        raise SimulationError(f"inverted deformation gradient at particle {bad}")
    R = du.polar_rotation(F)
    Finv_T = du.transpose_mat(du.inv3(F))
    scale = du.reshape_like_tail(lam * (J - 1.0) * J, 2)
    return 2.0 * mu * (F - R) + scale * Finv_T


# ---------------------------------------------------------------------------
# quadratic B-spline transfer machinery
# ---------------------------------------------------------------------------

_OFFSETS = np.array(
    [[i, j, k] for i in range(3) for j in range(3) for k in range(3)], dtype=np.int64
)


def _spline_setup(x, grid: GridField):
    """Base node index plus the 27 stencil weights and node offsets.

    Returns (base (n,3) int, wt (n,27), idx (n,27) flat node ids,
    node_offset (n,27,3) node positions relative to origin in mm).
    """
    gx = (x - grid.origin) * (1.0 / grid.voxel_res)
    base = np.floor(du.value(gx) - 0.5).astype(np.int64)
    fx = gx - base  # in [0.5, 1.5)
    w0 = 0.5 * (1.5 - fx) ** 2
    w1 = 0.75 - (fx - 1.0) ** 2
    w2 = 0.5 * (fx - 0.5) ** 2
    W = du.stack_last([w0, w1, w2])  # (n, 3 axes, 3 offsets)
    wt = (
        W[:, 0, :, None, None] * W[:, 1, None, :, None] * W[:, 2, None, None, :]
    ).reshape(len(base), 27)

    dims = grid.dims
    stride = np.array([int(dims[1]) * int(dims[2]), int(dims[2]), 1], dtype=np.int64)
    idx = (base @ stride)[:, None] + (_OFFSETS @ stride)[None, :]
    node_pos = grid.origin + (base[:, None, :] + _OFFSETS[None, :, :]) * grid.voxel_res
    return base, wt, idx, node_pos


def _check_interior(base: np.ndarray, dims: np.ndarray, what: str):
    lo_ok = base >= 0
    hi_ok = base + 2 <= dims - 1
    ok = np.all(lo_ok & hi_ok, axis=1)
    if not np.all(ok):
        bad = int(np.argmin(ok))
        raise SimulationError(f"particle {bad} outside grid interior during {what}")


def p2g(particles: ParticleSet, grid: GridField, material: MaterialParams, dt: float) -> GridField:
    """Scatter particle mass/momentum (with elastic force impulse) to the grid.

    Returns a new GridField carrying mass and velocity. Accumulation uses
    bincount in a fixed particle-major order, so results are bit-reproducible.
    """
    sensitivity = any(
        du.is_dual(a)
        for a in (particles.x, particles.v, particles.F, particles.C, material.mu, material.lam)
    )

    if _kernels is not None and sensitivity:
        base = np.floor(
            (du.value(particles.x) - grid.origin) / grid.voxel_res - 0.5
        ).astype(np.int64)
        _check_interior(base, grid.dims, "p2g")
        mass_v, dmass, mom_v, dmom = _kernels.p2g_dual_kernel(
            du.value(particles.x), du.tangent(particles.x),
            du.value(particles.v), du.tangent(particles.v),
            du.value(particles.F), du.tangent(particles.F),
            du.value(particles.C), du.tangent(particles.C),
            particles.m, particles.V0,
            float(du.value(material.mu_mm)), du.tangent(material.mu_mm),
            float(du.value(material.lam_mm)), du.tangent(material.lam_mm),
            dt, grid.origin, grid.voxel_res, grid.dims.astype(np.int64),
            material.gravity,
        )
        mass = du.Dual(mass_v, dmass)
        mom = du.Dual(mom_v, dmom)
        occupied = mass_v > MASS_EPS
        denom = du.where(occupied, mass, 1.0)
        velocity = du.where(occupied[:, None], mom / denom[:, None], 0.0)
        return GridField(grid.origin, grid.voxel_res, grid.dims.copy(), mass=mass, velocity=velocity)

    if _kernels is not None and not sensitivity:
        base = np.floor(
            (particles.x - grid.origin) / grid.voxel_res - 0.5
        ).astype(np.int64)
        _check_interior(base, grid.dims, "p2g")
        mass, mom_arr = _kernels.p2g_kernel(
            particles.x, particles.v, particles.F, particles.C,
            particles.m, particles.V0,
            float(material.mu_mm), float(material.lam_mm), dt,
            grid.origin, grid.voxel_res, grid.dims.astype(np.int64),
            material.gravity,
        )
        occupied = mass > MASS_EPS
        velocity = np.where(occupied[:, None], mom_arr / np.where(occupied, mass, 1.0)[:, None], 0.0)
        return GridField(grid.origin, grid.voxel_res, grid.dims.copy(), mass=mass, velocity=velocity)

    h = grid.voxel_res
    n_nodes = grid.n_nodes
    base, wt, idx, node_pos = _spline_setup(particles.x, grid)
    _check_interior(base, grid.dims, "p2g")

    # affine momentum matrix: APIC term + stress force impulse
    P = first_piola_stress(particles.F, material.mu_mm, material.lam_mm)
    stress_scale = (-dt * 4.0 / h ** 2) * particles.V0
    A = du.reshape_like_tail(stress_scale, 2) * du.matmul(P, du.transpose_mat(particles.F))
    B = du.reshape_like_tail(particles.m, 2) * particles.C + A
    mv = particles.m[:, None] * particles.v

    dpos = node_pos - particles.x[:, None, :]  # (n, 27, 3)
    contrib = wt[:, :, None] * (mv[:, None, :] + du.mat_times_stencil_vec(B, dpos))
    m_contrib = wt * particles.m[:, None]

    flat_idx = idx.ravel()
    mass = du.bincount_accumulate(flat_idx, m_contrib.reshape(-1), n_nodes)
    mom = [
        du.bincount_accumulate(flat_idx, contrib[:, :, c].reshape(-1), n_nodes)
        for c in range(3)
    ]

    # gravity impulse on momentum, then velocities where mass is present
    occupied = du.value(mass) > MASS_EPS
    vel_cols = []
    for c in range(3):
        mom_c = mom[c] + mass * (material.gravity[c] * dt)
        vel_c = du.where(occupied, mom_c / du.where(occupied, mass, 1.0), 0.0)
        vel_cols.append(vel_c)
    if any(du.is_dual(v) for v in vel_cols):
        velocity = du.Dual(
            np.stack([du.value(v) for v in vel_cols], axis=-1),
            np.stack([du.tangent(v) for v in vel_cols], axis=-1),
        )
    else:
        velocity = np.stack(vel_cols, axis=-1)

    return GridField(grid.origin, grid.voxel_res, grid.dims.copy(), mass=mass, velocity=velocity)


def apply_base_bc(grid: GridField, band_voxels: float = 1.0) -> GridField:
    """Sticky boundary: zero velocity on nodes within one voxel of z = 0.

    Models the gel bonded to its rigid mount at the base plane.
    """
    nz = int(grid.dims[2])
    z_nodes = grid.origin[2] + grid.voxel_res * np.arange(nz)
    sticky_z = np.abs(z_nodes) <= band_voxels * grid.voxel_res + 1e-12
    mask = np.broadcast_to(sticky_z, (int(grid.dims[0]), int(grid.dims[1]), nz)).ravel()
    velocity = du.where(mask[:, None], 0.0, grid.velocity)
    return GridField(grid.origin, grid.voxel_res, grid.dims, mass=grid.mass, velocity=velocity)


def contact_project(grid: GridField, indenter: IndenterState, dt: float) -> GridField:
    """Project grid velocities against the rigid indenter with Coulomb friction.

    Nodes within the softness-derived contact radius whose relative velocity
    approaches the indenter lose their normal component and have the
    tangential part scaled by the friction cone. Separating nodes pass
    through untouched.
    """
    nodes = grid.node_positions()
    contact_r = indenter.contact_radius(grid.voxel_res)

    # cheap bounding-sphere prefilter; exact SDF only on candidate nodes
    offset = nodes - indenter.pose.position
    reach = indenter.shape.max_reach() + contact_r + grid.voxel_res
    cand = np.einsum("ij,ij->i", offset, offset) <= reach * reach
    cand &= du.value(grid.mass) > MASS_EPS
    if not np.any(cand):
        return grid
    cand_idx = np.nonzero(cand)[0]

    d, n_hat = sdf_query(indenter.shape, indenter.pose, nodes[cand_idx])
    local = cand_idx[d < contact_r]
    if len(local) == 0:
        return grid
    n_hat = n_hat[d < contact_r]

    u = indenter.lin_vel + np.cross(indenter.ang_vel, nodes[local] - indenter.pose.position)

    v = grid.velocity[local]
    v_rel = v - u
    vn = du.dsum(v_rel * n_hat, axis=1)
    approaching = du.value(vn) < 0.0
    if not np.any(approaching):
        return grid

    v_t = v_rel - du.reshape_like_tail(vn, 1) * n_hat
    vt_norm = du.safe_norm_sq_sqrt(du.dsum(v_t * v_t, axis=1))
    has_tangent = du.value(vt_norm) > 1e-12
    # Coulomb: tangential speed reduced by mu * |vn|, never reversed
    k = du.maximum0(1.0 + indenter.friction_mu * vn / du.where(has_tangent, vt_norm, 1.0))
    k = du.where(has_tangent, k, 0.0)
    v_proj = u + du.reshape_like_tail(k, 1) * v_t
    v_out = du.where(approaching[:, None], v_proj, v)

    if du.is_dual(grid.velocity) or du.is_dual(v_out):
        v_out = du.promote(v_out)
        full = du.promote(grid.velocity).copy()
        full.val[local] = v_out.val
        full.tan[:, local] = v_out.tan
        velocity = full
    else:
        velocity = grid.velocity.copy()
        velocity[local] = v_out
    return GridField(grid.origin, grid.voxel_res, grid.dims, mass=grid.mass, velocity=velocity)


def g2p(grid: GridField, particles: ParticleSet, dt: float) -> ParticleSet:
    """Gather grid velocities back to particles and advect.

    v_p = sum w v_i; C_p = (4/h^2) sum w v_i (x_i - x_p)^T; x += dt v;
    F <- (I + dt C) F. Raises on inversion (det F <= 0), the usual CFL
    violation signal.
    """
    sensitivity = du.is_dual(particles.x) or du.is_dual(grid.velocity)

    if _kernels is not None and sensitivity:
        base = np.floor(
            (du.value(particles.x) - grid.origin) / grid.voxel_res - 0.5
        ).astype(np.int64)
        _check_interior(base, grid.dims, "g2p")
        v_v, dv, C_v, dC, x_v, dx, F_v, dF, bad = _kernels.g2p_dual_kernel(
            du.value(particles.x), du.tangent(particles.x),
            du.value(particles.F), du.tangent(particles.F),
            du.value(grid.velocity), du.tangent(grid.velocity),
            dt, grid.origin, grid.voxel_res, grid.dims.astype(np.int64),
        )
        if bad >= 0:
            raise SimulationError(f"deformation gradient inverted at particle {bad}")
        return ParticleSet(
            x=du.Dual(x_v, dx), v=du.Dual(v_v, dv),
            F=du.Dual(F_v, dF), C=du.Dual(C_v, dC),
            m=particles.m, V0=particles.V0, surface_flag=particles.surface_flag,
        )

    if _kernels is not None and not sensitivity:
        base = np.floor(
            (particles.x - grid.origin) / grid.voxel_res - 0.5
        ).astype(np.int64)
        _check_interior(base, grid.dims, "g2p")
        v_new, C_new, x_new, F_new, bad = _kernels.g2p_kernel(
            particles.x, particles.F, grid.velocity, dt,
            grid.origin, grid.voxel_res, grid.dims.astype(np.int64),
        )
        if bad >= 0:
            raise SimulationError(f"deformation gradient inverted at particle {bad}")
        return ParticleSet(
            x=x_new, v=v_new, F=F_new, C=C_new,
            m=particles.m, V0=particles.V0, surface_flag=particles.surface_flag,
        )

    h = grid.voxel_res
    base, wt, idx, node_pos = _spline_setup(particles.x, grid)
    _check_interior(base, grid.dims, "g2p")

    g_v = grid.velocity[idx]  # (n, 27, 3)
    dpos = node_pos - particles.x[:, None, :]
    v_new = du.weighted_vec_sum(wt, g_v)
    C_new = (4.0 / h ** 2) * du.weighted_outer_sum(wt, g_v, dpos)
    x_new = particles.x + dt * v_new
    eye = np.eye(3)
    F_new = du.matmul(eye + dt * C_new, particles.F)
    detF = du.value(du.det3(F_new))
    if np.any(detF <= 0.0):
        bad = int(np.argmax(detF <= 0.0))
        raise SimulationError(f"deformation gradient inverted at particle {bad} (det={detF[bad]:.3e})")
    return ParticleSet(
        x=x_new, v=v_new, F=F_new, C=C_new,
        m=particles.m, V0=particles.V0, surface_flag=particles.surface_flag,
    )


# ---------------------------------------------------------------------------
# indenter kinematics
# ---------------------------------------------------------------------------

def fk_step(indenter: IndenterState, t: float, dt: float) -> IndenterState:
    """Pose and velocity of the trajectory-driven indenter at time t.

    Velocities are the forward difference of the interpolated pose over dt,
    which vanishes once the trajectory is exhausted (clamped ends).
    """
    traj = indenter.trajectory
    pos, quat = traj.sample(t)
    pos2, quat2 = traj.sample(t + dt)
    lin_vel = (pos2 - pos) / dt
    q_rel = quat_mul(quat2, quat_conj(quat))
    axis, angle = quat_to_axis_angle(q_rel)
    ang_vel = axis * (angle / dt)
    return replace(indenter, pose=RigidPose(pos, quat_normalized(quat)), lin_vel=lin_vel, ang_vel=ang_vel)


def quat_normalized(q):
    return np.asarray(q) / np.linalg.norm(q)


# ---------------------------------------------------------------------------
# frame stepping
# ---------------------------------------------------------------------------

def substep(state: SimState) -> SimState:
    dt = state.dt_sub
    speed = np.linalg.norm(du.value(state.particles.v), axis=1)
    max_speed = float(speed.max()) if len(speed) else 0.0
    if max_speed * dt >= state.grid.voxel_res:
        raise SimulationError(
            f"CFL violation: max particle speed {max_speed:.3e} mm/s exceeds one voxel per substep"
        )
    indenter = fk_step(state.indenter, state.t, dt)
    grid = p2g(state.particles, state.grid, state.material, dt)
    grid = apply_base_bc(grid)
    grid = contact_project(grid, indenter, dt)
    particles = g2p(grid, state.particles, dt)
    if du.is_dual(particles.v):
        # NaN slips past the CFL comparison; catch it in both channels here
        probe = float(particles.v.val.sum()) + float(particles.v.tan.sum())
        if not np.isfinite(probe):
            raise SimulationError("non-finite state or tangents")
    return replace(state, particles=particles, grid=grid, indenter=indenter, t=state.t + dt)


def step_frame(state: SimState) -> SimState:
    """Advance one rendered frame: substeps_per_frame inner explicit steps."""
    for s in range(state.substeps_per_frame):
        try:
            state = substep(state)
        except SimulationError as e:
            raise SimulationError(f"substep {s}: {e}") from e
    return state


def surface_points(particles: ParticleSet) -> PointCloud:
    """Positions of the surface-flagged particles (Lagrangian tracking)."""
    if not np.any(particles.surface_flag):
        raise SimulationError("no surface-flagged particles")
    return PointCloud(du.value(particles.x)[particles.surface_flag])


# ---------------------------------------------------------------------------
# grid construction
# ---------------------------------------------------------------------------

def grid_covering(
    lo,
    hi,
    voxel_res: float,
    trajectory: Trajectory,
    shape: IndenterShape,
    margin_nodes: int = 4,
) -> GridField:
    """Grid covering the box [lo, hi] and the indenter sweep with a margin."""
    lo = np.asarray(lo, dtype=np.float64).copy()
    hi = np.asarray(hi, dtype=np.float64).copy()
    reach = shape.max_reach()
    for p in trajectory.positions:
        lo = np.minimum(lo, p - reach)
        hi = np.maximum(hi, p + reach)
    lo = lo - margin_nodes * voxel_res
    hi = hi + margin_nodes * voxel_res
    origin = np.floor(lo / voxel_res) * voxel_res
    dims = np.ceil((hi - origin) / voxel_res).astype(np.int64) + 1
    return GridField(origin=origin, voxel_res=voxel_res, dims=dims)


def make_grid_for_scene(
    gel_radius: float,
    voxel_res: float,
    trajectory: Trajectory,
    shape: IndenterShape,
    margin_nodes: int = 4,
) -> GridField:
    """Grid covering the gel hemisphere and the indenter sweep."""
    lo = np.array([-gel_radius, -gel_radius, 0.0])
    hi = np.array([gel_radius, gel_radius, gel_radius])
    return grid_covering(lo, hi, voxel_res, trajectory, shape, margin_nodes)


# ---------------------------------------------------------------------------
# binary particle dumps
# ---------------------------------------------------------------------------

PARTICLE_MAGIC = b"MPMS"
PARTICLE_VERSION = 1


def save_particles(particles: ParticleSet, path) -> None:
    n = particles.n
    with open(path, "wb") as fh:
        fh.write(PARTICLE_MAGIC)
        fh.write(struct.pack("<I", PARTICLE_VERSION))
        fh.write(struct.pack("<Q", n))
        for arr in (
            du.value(particles.x),
            du.value(particles.v),
            du.value(particles.F),
            du.value(particles.C),
            particles.m,
            particles.V0,
            particles.surface_flag.astype(np.float64),
        ):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_particles(path) -> ParticleSet:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != PARTICLE_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != PARTICLE_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        (n,) = struct.unpack("<Q", fh.read(8))

        def read(shape):
            count = int(np.prod(shape))
            return np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape).copy()

        x = read((n, 3))
        v = read((n, 3))
        F = read((n, 3, 3))
        C = read((n, 3, 3))
        m = read((n,))
        V0 = read((n,))
        flags = read((n,)) > 0.5
    return ParticleSet(x=x, v=v, F=F, C=C, m=m, V0=V0, surface_flag=flags)

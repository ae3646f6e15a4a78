"""JSON scene configuration: strict-schema loading and scene assembly.

Unknown keys are rejected and every validation error carries the JSON
pointer of the offending value. Defaults follow the main-experiment
settings: voxel 1.2 mm, 100 substeps at 24 fps, softness 15, E = 27575 Pa,
nu = 0.303.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mpm
from .camera import CameraConfig
from .geometry import (
    GeometryError,
    IndenterShape,
    RigidPose,
    Trajectory,
    load_mesh,
    load_trajectory,
)


class ConfigError(ValueError):
    """Invalid configuration; message carries a JSON pointer path."""


def _err(path, msg):
    raise ConfigError(f"{path or '/'}: {msg}")


def _check_keys(obj, path, allowed):
    unknown = set(obj) - set(allowed)
    if unknown:
        _err(path, f"unknown keys {sorted(unknown)}")


def _get_num(obj, path, key, default=None, low=None, high=None):
    if key not in obj:
        if default is None:
            _err(path, f"missing required key '{key}'")
        return default
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        _err(f"{path}/{key}", f"expected a number, got {type(val).__name__}")
    if low is not None and val < low:
        _err(f"{path}/{key}", f"must be >= {low}")
    if high is not None and val > high:
        _err(f"{path}/{key}", f"must be <= {high}")
    return float(val)


def _get_int(obj, path, key, default=None, low=None):
    val = _get_num(obj, path, key, default=default, low=low)
    if val != int(val):
        _err(f"{path}/{key}", "expected an integer")
    return int(val)


@dataclass
class SceneConfig:
    material: mpm.MaterialParams
    voxel_res: float
    dims_override: np.ndarray | None
    fps: float
    substeps: int
    softness: float
    softness_scale: float
    frames: int
    sensor_radius: float
    sensor_shell: object  # "solid" or thickness in mm
    indenter_shape: IndenterShape
    trajectory: Trajectory
    camera: CameraConfig
    seeds: dict = field(default_factory=dict)
    friction_mu: float = 0.3


def parse_shape(spec, path, base_dir: Path) -> IndenterShape:
    if not isinstance(spec, dict):
        _err(path, "shape must be an object")
    kind = spec.get("type")
    try:
        if kind == "sphere":
            _check_keys(spec, path, ["type", "radius_mm"])
            return IndenterShape.sphere(_get_num(spec, path, "radius_mm", low=1e-9))
        if kind == "box":
            _check_keys(spec, path, ["type", "half_extents_mm"])
            he = spec.get("half_extents_mm")
            if not (isinstance(he, list) and len(he) == 3):
                _err(f"{path}/half_extents_mm", "expected a list of 3 numbers")
            return IndenterShape.box(he)
        if kind == "capsule":
            _check_keys(spec, path, ["type", "radius_mm", "half_length_mm"])
            return IndenterShape.capsule(
                _get_num(spec, path, "radius_mm", low=1e-9),
                _get_num(spec, path, "half_length_mm", low=1e-9),
            )
        if kind == "cylinder":
            _check_keys(spec, path, ["type", "radius_mm", "half_length_mm"])
            return IndenterShape.cylinder(
                _get_num(spec, path, "radius_mm", low=1e-9),
                _get_num(spec, path, "half_length_mm", low=1e-9),
            )
        if kind == "mesh":
            _check_keys(spec, path, ["type", "path", "grid_res_mm"])
            mesh_path = base_dir / spec.get("path", "")
            if not mesh_path.is_file():
                _err(f"{path}/path", f"mesh file not found: {mesh_path}")
            mesh = load_mesh(mesh_path)
            return IndenterShape.from_mesh(mesh, _get_num(spec, path, "grid_res_mm", low=1e-9))
    except GeometryError as e:
        _err(path, str(e))
    _err(f"{path}/type", f"unknown shape type {kind!r}")


def parse_trajectory(spec, path, base_dir: Path) -> Trajectory:
    if isinstance(spec, str):
        traj_path = base_dir / spec
        if not traj_path.is_file():
            _err(path, f"trajectory file not found: {traj_path}")
        try:
            return load_trajectory(traj_path)
        except GeometryError as e:
            _err(path, str(e))
    if isinstance(spec, dict):
        _check_keys(spec, path, ["waypoints"])
        wps = spec.get("waypoints")
        if not (isinstance(wps, list) and wps and all(len(w) == 8 for w in wps)):
            _err(f"{path}/waypoints", "expected a non-empty list of 8-number rows")
        arr = np.asarray(wps, dtype=np.float64)
        try:
            return Trajectory(arr[:, 0], arr[:, 1:4], arr[:, 4:8])
        except GeometryError as e:
            _err(f"{path}/waypoints", str(e))
    _err(path, "trajectory must be a CSV path or an object with 'waypoints'")


def load_scene_config(source, base_dir=None) -> SceneConfig:
    """Parse and validate a scene config from a path, JSON string, or dict."""
    if isinstance(source, (str, Path)) and Path(source).is_file():
        base_dir = Path(source).parent if base_dir is None else Path(base_dir)
        text = Path(source).read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{source}: JSON parse error at line {e.lineno} col {e.colno}: {e.msg}")
    elif isinstance(source, dict):
        raw = source
        base_dir = Path(base_dir) if base_dir is not None else Path(".")
    else:
        raise ConfigError(f"config file not found: {source}")

    if not isinstance(raw, dict):
        raise ConfigError("/: top level must be an object")
    _check_keys(raw, "", ["schema_version", "material", "grid", "sim", "sensor", "indenter", "camera", "seeds"])
    if raw.get("schema_version", 1) != 1:
        _err("/schema_version", "unsupported schema version")

    mat = raw.get("material", {})
    _check_keys(mat, "/material", ["E", "nu", "density", "friction_mu", "gravity"])
    E = _get_num(mat, "/material", "E", default=27575.0, low=1e-9)
    nu = _get_num(mat, "/material", "nu", default=0.303, low=-0.999, high=0.4999)
    density = _get_num(mat, "/material", "density", default=1.0e6, low=1e-9)
    friction = _get_num(mat, "/material", "friction_mu", default=0.3, low=0.0)
    gravity = mat.get("gravity", [0.0, 0.0, 0.0])
    if not (isinstance(gravity, list) and len(gravity) == 3):
        _err("/material/gravity", "expected a list of 3 numbers")

    grid = raw.get("grid", {})
    _check_keys(grid, "/grid", ["voxel_res_mm", "dims"])
    voxel = _get_num(grid, "/grid", "voxel_res_mm", default=1.2, low=1e-6)
    dims = grid.get("dims")
    if dims is not None:
        if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(d, int) and d >= 8 for d in dims)):
            _err("/grid/dims", "expected a list of 3 integers >= 8")
        dims = np.asarray(dims, dtype=np.int64)

    sim = raw.get("sim", {})
    _check_keys(sim, "/sim", ["fps", "substeps", "softness", "softness_scale", "frames"])
    fps = _get_num(sim, "/sim", "fps", default=24.0, low=1e-6)
    substeps = _get_int(sim, "/sim", "substeps", default=100, low=1)
    softness = _get_num(sim, "/sim", "softness", default=15.0, low=1e-9)
    softness_scale = _get_num(sim, "/sim", "softness_scale", default=7.5, low=1e-9)
    frames = _get_int(sim, "/sim", "frames", default=48, low=1)

    sensor = raw.get("sensor", {})
    _check_keys(sensor, "/sensor", ["radius_mm", "shell"])
    radius = _get_num(sensor, "/sensor", "radius_mm", default=15.0, low=1e-6)
    shell = sensor.get("shell", "solid")
    if shell != "solid":
        if isinstance(shell, bool) or not isinstance(shell, (int, float)) or shell <= 0:
            _err("/sensor/shell", "expected 'solid' or a positive thickness in mm")
        shell = float(shell)

    ind = raw.get("indenter")
    if not isinstance(ind, dict):
        raise ConfigError("/indenter: required object missing")
    _check_keys(ind, "/indenter", ["shape", "trajectory"])
    shape = parse_shape(ind.get("shape", {}), "/indenter/shape", base_dir)
    trajectory = parse_trajectory(ind.get("trajectory"), "/indenter/trajectory", base_dir)

    cam = raw.get("camera", {})
    _check_keys(cam, "/camera", ["width", "height", "fov", "max_depth_mm"])
    camera = CameraConfig(
        width=_get_int(cam, "/camera", "width", default=64, low=8),
        height=_get_int(cam, "/camera", "height", default=64, low=8),
        fov=_get_num(cam, "/camera", "fov", default=np.pi / 2, low=1e-6, high=np.pi / 2 + 1e-9),
        max_depth=_get_num(cam, "/camera", "max_depth_mm", default=max(40.0, 3.0 * radius), low=1e-6),
    )

    seeds = raw.get("seeds", {})
    _check_keys(seeds, "/seeds", ["fill", "sample"])
    seeds = {
        "fill": _get_int(seeds, "/seeds", "fill", default=0),
        "sample": _get_int(seeds, "/seeds", "sample", default=1),
    }

    material = mpm.make_material(E, nu, density=density, gravity=np.asarray(gravity, dtype=np.float64))
    return SceneConfig(
        material=material,
        voxel_res=voxel,
        dims_override=dims,
        fps=fps,
        substeps=substeps,
        softness=softness,
        softness_scale=softness_scale,
        frames=frames,
        sensor_radius=radius,
        sensor_shell=shell,
        indenter_shape=shape,
        trajectory=trajectory,
        camera=camera,
        seeds=seeds,
        friction_mu=friction,
    )


def build_state(cfg: SceneConfig) -> mpm.SimState:
    """Assemble the simulation state a config describes."""
    from .geometry import fill_hemisphere_particles

    particles = fill_hemisphere_particles(
        cfg.sensor_radius, cfg.sensor_shell, cfg.voxel_res,
        density=cfg.material.density, seed=cfg.seeds.get("fill", 0),
    )
    grid = mpm.make_grid_for_scene(cfg.sensor_radius, cfg.voxel_res, cfg.trajectory, cfg.indenter_shape)
    if cfg.dims_override is not None:
        grid = mpm.GridField(origin=grid.origin, voxel_res=cfg.voxel_res, dims=cfg.dims_override.copy())
    indenter = mpm.IndenterState(
        shape=cfg.indenter_shape,
        pose=RigidPose(cfg.trajectory.positions[0].copy(), cfg.trajectory.quats[0].copy()),
        lin_vel=np.zeros(3),
        ang_vel=np.zeros(3),
        trajectory=cfg.trajectory,
        friction_mu=cfg.friction_mu,
        softness=cfg.softness,
        softness_scale=cfg.softness_scale,
    )
    return mpm.SimState(
        particles=particles,
        grid=grid,
        indenter=indenter,
        material=cfg.material,
        fps=cfg.fps,
        substeps_per_frame=cfg.substeps,
    )

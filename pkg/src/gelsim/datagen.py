"""Synthetic demonstration and dataset generation.

Stands in for the hardware capture pipeline: each scene presses a randomly
drawn indenter into the gel, a double-substep reference rollout provides
pseudo ground-truth surface clouds, and Lambertian shading of the reference
geometry provides pseudo-real camera frames. The ordinary-substep rollout
provides the "simulated" side: its clouds, depth and normal maps are what a
user of the simulator would see.

Scene directory layout:
    manifest.json                       (top level, with the 80/20 split)
    idle.ppm
    scene_NNNN/
        seq.json                        indenter spec + frame list
        trajectory.csv
        clouds/FFFF.xyz                 reference (pseudo-GT) surface clouds
        simclouds/FFFF.xyz              simulated surface clouds
        frames/FFFF.pfm                 simulated depth map
        frames/FFFF_normal.ppm          simulated normal map
        frames/FFFF_target.ppm          pseudo-real camera frame
"""

from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import calib, imgio, mpm, optical
from .camera import build_surface_mesh, render_maps
from .geometry import (
    IndenterShape,
    PointCloud,
    RigidPose,
    Trajectory,
    load_trajectory,
    load_xyz,
    save_trajectory,
    save_xyz,
)
from .scene import SceneConfig, build_state

logger = logging.getLogger(__name__)

INDENTER_CATALOG = ("sphere", "box", "capsule", "cylinder")


def _draw_indenter(rng, scale: float) -> IndenterShape:
    kind = INDENTER_CATALOG[int(rng.integers(len(INDENTER_CATALOG)))]
    if kind == "sphere":
        return IndenterShape.sphere(scale * rng.uniform(0.3, 0.55))
    if kind == "box":
        return IndenterShape.box(scale * rng.uniform(0.22, 0.42, size=3))
    if kind == "capsule":
        return IndenterShape.capsule(scale * rng.uniform(0.2, 0.35), scale * rng.uniform(0.25, 0.45))
    return IndenterShape.cylinder(scale * rng.uniform(0.25, 0.4), scale * rng.uniform(0.25, 0.45))


def _press_trajectory(rng, radius: float, shape: IndenterShape, fps: float,
                      frames: int, depth_range=(0.5, 3.0)) -> Trajectory:
    """Approach-then-press ram trajectory with a randomized lateral offset."""
    reach = shape.max_reach()
    x_off = rng.uniform(-0.25, 0.25) * radius
    y_off = rng.uniform(-0.25, 0.25) * radius
    rim = np.hypot(x_off, y_off)
    z_touch = np.sqrt(max(radius ** 2 - rim ** 2, 0.25 * radius ** 2)) + reach
    depth = rng.uniform(*depth_range)
    press_frames = max(2, frames - 2)
    f = 1.0 / fps
    times = np.array([0.0, press_frames * f, (frames + 2) * f])
    pos = np.array(
        [
            [x_off, y_off, z_touch + 0.4],
            [x_off, y_off, z_touch - depth],
            [x_off, y_off, z_touch - depth],
        ]
    )
    quats = np.array([[1.0, 0.0, 0.0, 0.0]] * 3)
    return Trajectory(times, pos, quats)


def _shape_to_spec(shape: IndenterShape) -> dict:
    if shape.kind == "sphere":
        return {"type": "sphere", "radius_mm": shape.radius}
    if shape.kind == "box":
        return {"type": "box", "half_extents_mm": list(shape.half_extents)}
    if shape.kind == "capsule":
        return {"type": "capsule", "radius_mm": shape.radius, "half_length_mm": shape.half_length}
    if shape.kind == "cylinder":
        return {"type": "cylinder", "radius_mm": shape.radius, "half_length_mm": shape.half_length}
    raise ValueError(f"cannot serialize shape kind {shape.kind!r}")


def spec_to_shape(spec: dict) -> IndenterShape:
    kind = spec["type"]
    if kind == "sphere":
        return IndenterShape.sphere(spec["radius_mm"])
    if kind == "box":
        return IndenterShape.box(spec["half_extents_mm"])
    if kind == "capsule":
        return IndenterShape.capsule(spec["radius_mm"], spec["half_length_mm"])
    if kind == "cylinder":
        return IndenterShape.cylinder(spec["radius_mm"], spec["half_length_mm"])
    raise ValueError(f"unknown shape spec {kind!r}")


def _rebind_scene(state: mpm.SimState, shape: IndenterShape, traj: Trajectory,
                  substeps: int) -> mpm.SimState:
    indenter = replace(
        state.indenter,
        shape=shape,
        trajectory=traj,
        pose=RigidPose(traj.positions[0].copy(), traj.quats[0].copy()),
        lin_vel=np.zeros(3),
        ang_vel=np.zeros(3),
    )
    x0 = state.particles.x
    grid = mpm.grid_covering(x0.min(axis=0), x0.max(axis=0), state.grid.voxel_res, traj, shape)
    return replace(
        state,
        particles=state.particles.copy(),
        grid=grid,
        indenter=indenter,
        substeps_per_frame=substeps,
        t=0.0,
    )


def gen_synthetic(cfg: SceneConfig, n_scenes: int, out_dir, seed: int = 0,
                  eval_fraction: float = 0.2, depth_range=(0.5, 3.0)) -> dict:
    """Generate a full synthetic dataset; returns the manifest dict."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    base_state = build_state(cfg)
    surf_mesh = build_surface_mesh(base_state.particles, cfg.sensor_radius)
    cam = cfg.camera
    pattern = optical.make_pattern(cam.height, cam.width, seed=seed + 1)

    # idle frame from the undeformed surface
    idle_frame = render_maps(surf_mesh.reposed(base_state.particles), cam)
    idle_img = optical.synth_shade(idle_frame, pattern)
    imgio.save_ppm(idle_img, out_dir / "idle.ppm")

    scenes = []
    for s in range(n_scenes):
        scene_id = f"scene_{s:04d}"
        shape = _draw_indenter(rng, scale=cfg.sensor_radius * 0.85)
        traj = _press_trajectory(rng, cfg.sensor_radius, shape, cfg.fps, cfg.frames,
                                 depth_range=depth_range)
        scene_dir = out_dir / scene_id
        entry = {
            "id": scene_id,
            "dir": scene_id,
            "frames": cfg.frames,
            "indenter": _shape_to_spec(shape),
            "skipped": False,
            "error": "",
        }
        try:
            _write_scene(base_state, surf_mesh, cam, pattern, cfg, shape, traj, scene_dir)
        except mpm.SimulationError as e:
            logger.warning("scene %s skipped: %s", scene_id, e)
            entry["skipped"] = True
            entry["error"] = str(e)
        scenes.append(entry)

    ok_ids = [e["id"] for e in scenes if not e["skipped"]]
    n_eval = max(1, round(eval_fraction * len(ok_ids))) if len(ok_ids) > 1 else 0
    order = np.random.default_rng(seed + 2).permutation(len(ok_ids))
    eval_ids = sorted(ok_ids[i] for i in order[:n_eval])
    train_ids = sorted(set(ok_ids) - set(eval_ids))
    for e in scenes:
        e["role"] = "eval" if e["id"] in eval_ids else ("train" if e["id"] in train_ids else "skipped")

    manifest = {
        "schema_version": 1,
        "seed": seed,
        "camera": {"width": cam.width, "height": cam.height, "fov": cam.fov, "max_depth_mm": cam.max_depth},
        "scenes": scenes,
        "split": {"train": train_ids, "eval": eval_ids},
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _write_scene(base_state, surf_mesh, cam, pattern, cfg, shape, traj, scene_dir: Path):
    scene_dir.mkdir(parents=True, exist_ok=True)
    (scene_dir / "clouds").mkdir(exist_ok=True)
    (scene_dir / "simclouds").mkdir(exist_ok=True)
    (scene_dir / "frames").mkdir(exist_ok=True)

    # reference rollout at doubled substeps: pseudo ground truth
    ref = _rebind_scene(base_state, shape, traj, substeps=2 * cfg.substeps)
    sim = _rebind_scene(base_state, shape, traj, substeps=cfg.substeps)

    frame_records = []
    for f in range(cfg.frames):
        ref = mpm.step_frame(ref)
        sim = mpm.step_frame(sim)

        ref_cloud = mpm.surface_points(ref.particles)
        sim_cloud = mpm.surface_points(sim.particles)
        save_xyz(ref_cloud, scene_dir / "clouds" / f"{f:04d}.xyz")
        save_xyz(sim_cloud, scene_dir / "simclouds" / f"{f:04d}.xyz")

        sim_frame = render_maps(surf_mesh.reposed(sim.particles), cam)
        imgio.save_pfm(sim_frame.depth, scene_dir / "frames" / f"{f:04d}.pfm")
        imgio.save_ppm(imgio.encode_normal_map(sim_frame.normal), scene_dir / "frames" / f"{f:04d}_normal.ppm")

        ref_frame = render_maps(surf_mesh.reposed(ref.particles), cam)
        target_img = optical.synth_shade(ref_frame, pattern)
        imgio.save_ppm(target_img, scene_dir / "frames" / f"{f:04d}_target.ppm")
        frame_records.append({"index": f, "cloud": f"clouds/{f:04d}.xyz"})

    save_trajectory(traj, scene_dir / "trajectory.csv")
    with open(scene_dir / "seq.json", "w") as fh:
        json.dump(
            {
                "schema_version": 1,
                "indenter": _shape_to_spec(shape),
                "frames": frame_records,
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")


# ---------------------------------------------------------------------------
# dataset loading
# ---------------------------------------------------------------------------

def load_sequence_dir(seq_dir) -> calib.DemoSequence:
    """Read a scene directory back as a calibration DemoSequence."""
    seq_dir = Path(seq_dir)
    spec = json.loads((seq_dir / "seq.json").read_text())
    traj = load_trajectory(seq_dir / "trajectory.csv")
    clouds = [
        (rec["index"], load_xyz(seq_dir / rec["cloud"]))
        for rec in spec["frames"]
    ]
    return calib.DemoSequence(
        trajectory=traj,
        target_clouds=clouds,
        indenter_shape=spec_to_shape(spec["indenter"]),
        name=seq_dir.name,
    )


def load_optical_dataset(dataset_dir, split: str = "train"):
    """(input, residual-target) training pairs for the requested split.

    Inputs stack the stored normal and depth maps; targets are pseudo-real
    frame minus idle.
    """
    dataset_dir = Path(dataset_dir)
    manifest = json.loads((dataset_dir / "manifest.json").read_text())
    idle = imgio.load_ppm(dataset_dir / "idle.ppm")
    max_depth = manifest["camera"]["max_depth_mm"]
    pairs = []
    wanted = set(manifest["split"][split]) if split in ("train", "eval") else None
    for entry in manifest["scenes"]:
        if entry["skipped"] or (wanted is not None and entry["id"] not in wanted):
            continue
        scene_dir = dataset_dir / entry["dir"]
        for f in range(entry["frames"]):
            depth = imgio.load_pfm(scene_dir / "frames" / f"{f:04d}.pfm")
            normal_rgb = imgio.load_ppm(scene_dir / "frames" / f"{f:04d}_normal.ppm")
            target = imgio.load_ppm(scene_dir / "frames" / f"{f:04d}_target.ppm")
            opt_in = np.concatenate(
                [normal_rgb, np.clip(depth / max_depth, 0.0, 1.0)[..., None]], axis=-1
            )
            pairs.append((opt_in, target - idle))
    return pairs, idle, manifest


# ---------------------------------------------------------------------------
# calibration recovery benchmark
# ---------------------------------------------------------------------------

RECOVERY_E = 27575.0
RECOVERY_NU = 0.303


def recovery_template(E: float = RECOVERY_E, nu: float = RECOVERY_NU) -> mpm.SimState:
    """Reference scene for parameter-recovery experiments.

    A large soft pad under scaled gravity: the gravity sag makes the
    equilibrium shape depend on stiffness directly (kinematic pressing alone
    leaves the settled shape nearly stiffness-independent), which is what
    gives log E a usable gradient at the fixed 0.1 learning rate.
    """
    from .geometry import fill_hemisphere_particles

    radius, voxel = 21.0, 4.8
    density = 2.0e5  # kg/m^3
    gravity = np.array([0.0, 0.0, -2364.0])  # mm/s^2
    particles = fill_hemisphere_particles(radius, "solid", voxel, density=density, seed=0)
    park = Trajectory(
        np.array([0.0, 1.0]),
        np.array([[0.0, 0.0, 3 * radius], [0.0, 0.0, 3 * radius]]),
        np.array([[1.0, 0, 0, 0], [1.0, 0, 0, 0]]),
    )
    shape = IndenterShape.sphere(6.0)
    grid = mpm.make_grid_for_scene(radius, voxel, park, shape)
    material = mpm.make_material(E, nu, density=density, gravity=gravity)
    indenter = mpm.IndenterState(
        shape=shape, pose=RigidPose(park.positions[0], park.quats[0]),
        lin_vel=np.zeros(3), ang_vel=np.zeros(3), trajectory=park,
    )
    return mpm.SimState(
        particles=particles, grid=grid, indenter=indenter, material=material,
        fps=24.0, substeps_per_frame=32,
    )


def recovery_sequences(template: mpm.SimState, frames: int = 9) -> list:
    """Three press demonstrations with targets simulated at the template's
    material parameters."""
    radius = 21.0
    specs = [
        (IndenterShape.sphere(6.0), 7.5, 0.0, 0.0),
        (IndenterShape.sphere(7.5), 6.5, 4.0, -2.0),
        (IndenterShape.box([5.0, 5.0, 5.0]), 6.0, -3.0, 3.0),
    ]
    sequences = []
    for i, (shape, depth, xo, yo) in enumerate(specs):
        z_touch = radius + shape.max_reach() - 0.12 * np.hypot(xo, yo)
        f = 1.0 / template.fps
        times = np.array([0.0, 6 * f, 1e4])
        pos = np.array(
            [[xo, yo, z_touch + 1.5], [xo, yo, z_touch - depth], [xo, yo, z_touch - depth]]
        )
        traj = Trajectory(times, pos, np.array([[1.0, 0, 0, 0]] * 3))
        probe = calib.DemoSequence(trajectory=traj, target_clouds=[(0, PointCloud(np.zeros((1, 3))))],
                                   indenter_shape=shape, name=f"seq{i}")
        state = calib.scene_for_sequence(template, probe)
        clouds = []
        for fr in range(frames):
            state = mpm.step_frame(state)
            clouds.append((fr, mpm.surface_points(state.particles)))
        sequences.append(
            calib.DemoSequence(trajectory=traj, target_clouds=clouds, indenter_shape=shape, name=f"seq{i}")
        )
    return sequences


def write_sequence_dirs(sequences, out_dir) -> None:
    """Persist DemoSequences in the on-disk layout cmd_calibrate reads."""
    out_dir = Path(out_dir)
    for seq in sequences:
        seq_dir = out_dir / seq.name
        (seq_dir / "clouds").mkdir(parents=True, exist_ok=True)
        save_trajectory(seq.trajectory, seq_dir / "trajectory.csv")
        records = []
        for f, cloud in seq.target_clouds:
            save_xyz(cloud, seq_dir / "clouds" / f"{f:04d}.xyz")
            records.append({"index": f, "cloud": f"clouds/{f:04d}.xyz"})
        with open(seq_dir / "seq.json", "w") as fh:
            json.dump(
                {"schema_version": 1, "indenter": _shape_to_spec(seq.indenter_shape), "frames": records},
                fh, indent=2, sort_keys=True,
            )
            fh.write("\n")

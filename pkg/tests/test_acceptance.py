"""Acceptance suite: one test per release criterion, each printing a
pass/fail summary line (collected in the terminal summary)."""

import json
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from conftest import record
from gelsim import calib, cli, datagen, dual as du, geometry as geo, metrics, mpm, optical
from gelsim.camera import CameraConfig, build_surface_mesh, render_maps, _ray_grid
from gelsim.scene import load_scene_config


# --------------------------------------------------------------------------
# 1. conservation suite
# --------------------------------------------------------------------------

def test_criterion_1_conservation():
    rng = np.random.default_rng(2024)
    mat = mpm.make_material(27575.0, 0.303)
    grid = mpm.GridField(origin=np.array([-8.0, -8.0, -4.0]), voxel_res=1.0,
                         dims=np.array([17, 17, 14]))
    t0 = time.perf_counter()
    worst_mass, worst_mom = 0.0, 0.0
    for _ in range(20):
        n = int(rng.integers(100, 400))
        x = rng.uniform(-3, 3, size=(n, 3))
        x[:, 2] = rng.uniform(1.0, 6.0, size=n)
        ps = mpm.ParticleSet(
            x=x,
            v=rng.normal(0, 5.0, size=(n, 3)),
            F=np.eye(3) + 0.03 * rng.normal(size=(n, 3, 3)),
            C=rng.normal(0, 0.2, size=(n, 3, 3)),
            m=rng.uniform(1e-7, 3e-7, size=n),
            V0=rng.uniform(0.1, 0.3, size=n),
            surface_flag=np.zeros(n, dtype=bool),
        )
        g = mpm.p2g(ps, grid, mat, dt=1e-5)
        mass_err = abs(float(g.mass.sum()) - ps.m.sum()) / ps.m.sum()
        worst_mass = max(worst_mass, mass_err)

        mom_grid = (g.mass[:, None] * g.velocity).sum(axis=0)
        mom_p = (ps.m[:, None] * ps.v).sum(axis=0)
        scale = np.abs(ps.m[:, None] * ps.v).sum()
        mom_err = np.linalg.norm(mom_grid - mom_p) / scale
        ps2 = mpm.g2p(g, ps, dt=1e-5)
        mom_p2 = (ps2.m[:, None] * ps2.v).sum(axis=0)
        mom_err = max(mom_err, np.linalg.norm(mom_p2 - mom_grid) / scale)
        worst_mom = max(worst_mom, mom_err)
    elapsed = time.perf_counter() - t0
    ok = worst_mass <= 1e-12 and worst_mom <= 1e-8 and elapsed < 10.0
    record(f"ACCEPTANCE 1 {'PASS' if ok else 'FAIL'}: conservation over 20 configs "
           f"(mass rel {worst_mass:.2e} <= 1e-12, momentum rel {worst_mom:.2e} <= 1e-8, "
           f"{elapsed:.1f}s < 10s)")
    assert worst_mass <= 1e-12
    assert worst_mom <= 1e-8
    assert elapsed < 10.0


# --------------------------------------------------------------------------
# 2. forward-mode gradient vs central finite differences
# --------------------------------------------------------------------------

def _gradient_scene(seed):
    rng = np.random.default_rng(seed)
    ps = geo.fill_hemisphere_particles(3.2, "solid", 1.4, density=2e6, seed=seed)
    depth = rng.uniform(0.5, 0.9)
    x_off = rng.uniform(-0.4, 0.4)
    traj = geo.Trajectory(
        np.array([0.0, 0.1, 10.0]),
        np.array([[x_off, 0, 5.6], [x_off, 0, 5.2 - depth], [x_off, 0, 5.2 - depth]]),
        np.array([[1.0, 0, 0, 0]] * 3),
    )
    shape = geo.IndenterShape.sphere(2.0)
    grid = mpm.make_grid_for_scene(3.2, 1.4, traj, shape)
    mat = mpm.make_material(27575.0, 0.303, density=2e6)
    ind = mpm.IndenterState(shape=shape, pose=geo.RigidPose(traj.positions[0], traj.quats[0]),
                            lin_vel=np.zeros(3), ang_vel=np.zeros(3), trajectory=traj)
    template = mpm.SimState(particles=ps, grid=grid, indenter=ind, material=mat,
                            fps=24.0, substeps_per_frame=10)
    probe = calib.DemoSequence(trajectory=traj, target_clouds=[(0, geo.PointCloud(np.zeros((1, 3))))],
                               indenter_shape=shape)
    st = calib.scene_for_sequence(template, probe)
    st.material = mpm.make_material(rng.uniform(18000, 24000), rng.uniform(0.2, 0.28), density=2e6)
    targets = []
    for f in range(2):
        st = mpm.step_frame(st)
        targets.append((f, mpm.surface_points(st.particles)))
    seq = calib.DemoSequence(trajectory=traj, target_clouds=targets, indenter_shape=shape)
    return template, seq


def _plain_loss(template, seq, log_E, nu):
    st = calib.scene_for_sequence(template, seq)
    st.material = mpm.make_material(float(np.exp(log_E)), nu, density=st.material.density,
                                    gravity=st.material.gravity)
    flags = st.particles.surface_flag
    tg = dict(seq.target_clouds)
    tot, n = 0.0, 0
    for f in range(seq.last_frame + 1):
        st = mpm.step_frame(st)
        if f in tg:
            tot += float(du.value(calib.chamfer_loss(st.particles.x[flags], tg[f].points)))
            n += 1
    return tot / n


def test_criterion_2_gradient_agreement():
    h = 1e-3
    t0 = time.perf_counter()
    worst = 0.0
    n_checked = 0
    for seed in range(5):
        template, seq = _gradient_scene(seed)
        assert 150 <= template.particles.n <= 260, template.particles.n
        params = calib.CalibParams.from_E_nu(27575.0, 0.303)
        _, grad = calib.loss_and_grad(template, seq, params)
        fd = np.array([
            (_plain_loss(template, seq, params.log_E + h, params.nu)
             - _plain_loss(template, seq, params.log_E - h, params.nu)) / (2 * h),
            (_plain_loss(template, seq, params.log_E, params.nu + h)
             - _plain_loss(template, seq, params.log_E, params.nu - h)) / (2 * h),
        ])
        for k in range(2):
            if abs(fd[k]) > 1e-6:
                rel = abs(grad[k] - fd[k]) / abs(fd[k])
                worst = max(worst, rel)
                n_checked += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-2 and elapsed < 120.0 and n_checked >= 5
    record(f"ACCEPTANCE 2 {'PASS' if ok else 'FAIL'}: forward-mode vs FD gradients, 5 seeds "
           f"(worst rel err {worst:.2e} < 1e-2 over {n_checked} components, {elapsed:.0f}s < 120s)")
    assert worst < 1e-2
    assert elapsed < 120.0


# --------------------------------------------------------------------------
# 3. calibration recovery
# --------------------------------------------------------------------------

def test_criterion_3_calibration_recovery():
    E_star, nu_star = 27575.0, 0.303
    t0 = time.perf_counter()
    template = datagen.recovery_template(E_star, nu_star)
    sequences = datagen.recovery_sequences(template, frames=9)
    init = calib.CalibParams.from_E_nu(3 * E_star, 0.40)
    result = calib.calibrate(template, sequences, init, lr=0.1, iters=30)
    elapsed = time.perf_counter() - t0
    e_rel = abs(result.E - E_star) / E_star
    nu_abs = abs(result.nu - nu_star)
    ok = e_rel <= 0.15 and nu_abs <= 0.05 and elapsed < 600.0
    record(f"ACCEPTANCE 3 {'PASS' if ok else 'FAIL'}: recovery from (3E*, 0.40) "
           f"(E={result.E:.0f}, rel err {e_rel*100:.1f}% <= 15%; nu={result.nu:.4f}, "
           f"abs err {nu_abs:.4f} <= 0.05; {elapsed:.0f}s < 600s)")
    assert e_rel <= 0.15
    assert nu_abs <= 0.05
    assert elapsed < 600.0


# --------------------------------------------------------------------------
# 4. metric oracle equivalence
# --------------------------------------------------------------------------

def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(31)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(4, 65))
        m = int(rng.integers(4, 65))
        a = rng.uniform(-6, 6, size=(n, 3))
        b = rng.uniform(-6, 6, size=(m, 3))

        diff = a[:, None] - b[None]
        dmat = np.linalg.norm(diff, axis=2)
        cd_oracle = 0.5 * (dmat.min(axis=1).mean() + dmat.min(axis=0).mean())
        worst = max(worst, abs(metrics.l2_chamfer(a, b) - cd_oracle))

        def top_mean(d):
            k = max(1, int(np.ceil(0.01 * len(d))))
            return np.sort(d)[-k:].mean()

        sig_oracle = 0.5 * (top_mean(dmat.min(axis=1)) + top_mean(dmat.min(axis=0)))
        worst = max(worst, abs(metrics.sig_l2_chamfer(a, b) - sig_oracle))

        p = (dmat.min(axis=1) <= 1.0).mean()
        r = (dmat.min(axis=0) <= 1.0).mean()
        f_oracle = 0.0 if p + r == 0 else 200.0 * p * r / (p + r)
        worst = max(worst, abs(metrics.fscore(a, b) - f_oracle))

        bb = rng.uniform(-6, 6, size=(n, 3))
        cost = np.linalg.norm(a[:, None] - bb[None], axis=2)
        rr, cc = linear_sum_assignment(cost)
        worst = max(worst, abs(metrics.emd(a, bb) - cost[rr, cc].mean()))

    hand_cd = metrics.l2_chamfer([[0, 0, 0]], [[1, 0, 0], [3, 0, 0]])
    hand_emd = metrics.emd([[0, 0, 0], [2, 0, 0]], [[1, 0, 0], [3, 0, 0]])
    hand_f = metrics.fscore([[0, 0, 0], [5, 0, 0]], [[0, 0, 0], [10, 0, 0]])
    hand_ok = (abs(hand_cd - 1.5) < 1e-12 and abs(hand_emd - 1.0) < 1e-12
               and abs(hand_f - 50.0) < 1e-12)
    ok = worst <= 1e-9 and hand_ok
    record(f"ACCEPTANCE 4 {'PASS' if ok else 'FAIL'}: metric oracles on 50 pairs "
           f"(worst |err| {worst:.2e} <= 1e-9; hand cases CD=1.5, EMD=1.0, F=50.0 {'ok' if hand_ok else 'BAD'})")
    assert worst <= 1e-9
    assert hand_ok


# --------------------------------------------------------------------------
# 5. PSNR formula
# --------------------------------------------------------------------------

def test_criterion_5_psnr():
    pred = np.zeros((10, 10, 3))
    gt = np.full((10, 10, 3), 0.1)
    rep = metrics.image_metrics(pred, gt)
    exact = rep.psnr == pytest.approx(20.0, abs=1e-12)
    same = metrics.image_metrics(gt, gt)
    inf_ok = same.to_dict()["PSNR"] == "inf" and np.isinf(same.psnr)
    ok = exact and inf_ok
    record(f"ACCEPTANCE 5 {'PASS' if ok else 'FAIL'}: PSNR formula "
           f"(MSE 0.01 -> {rep.psnr:.12f} dB; identical -> '{same.to_dict()['PSNR']}' sentinel)")
    assert exact
    assert inf_ok


# --------------------------------------------------------------------------
# 6. camera sphere property
# --------------------------------------------------------------------------

def test_criterion_6_camera_sphere():
    R, voxel = 9.0, 1.2
    t0 = time.perf_counter()
    ps = geo.fill_hemisphere_particles(R, "solid", voxel, density=1e6, seed=0)
    mesh = build_surface_mesh(ps, R)
    cfg = CameraConfig(width=64, height=64, max_depth=25.0)
    frame = render_maps(mesh, cfg)
    elapsed = time.perf_counter() - t0
    depth_err = float(np.abs(frame.depth[frame.valid_mask] - R).max())
    norms = np.linalg.norm(frame.normal[frame.valid_mask], axis=1)
    unit_err = float(np.abs(norms - 1.0).max())
    dirs, _ = _ray_grid(cfg)
    facing = np.einsum("hwk,hwk->hw", frame.normal, dirs)[frame.valid_mask]
    all_facing = bool(np.all(facing < 0))
    ok = depth_err < 0.5 * voxel and unit_err < 1e-6 and all_facing and elapsed < 5.0
    record(f"ACCEPTANCE 6 {'PASS' if ok else 'FAIL'}: sphere render "
           f"(|depth-R| max {depth_err:.3f} < {0.5*voxel}; unit err {unit_err:.1e} < 1e-6; "
           f"camera-facing {all_facing}; {elapsed:.1f}s < 5s)")
    assert depth_err < 0.5 * voxel
    assert unit_err < 1e-6
    assert all_facing
    assert elapsed < 5.0


# --------------------------------------------------------------------------
# 7. optical training
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_dataset(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("acc_ds")
    cfg_dict = {
        "schema_version": 1,
        "material": {"E": 27575.0, "nu": 0.303, "density": 1e6},
        "grid": {"voxel_res_mm": 1.2},
        "sim": {"fps": 24, "substeps": 20, "frames": 6},
        "sensor": {"radius_mm": 6.0, "shell": "solid"},
        "indenter": {
            "shape": {"type": "sphere", "radius_mm": 2.5},
            "trajectory": {"waypoints": [[0, 0, 0, 9.2, 1, 0, 0, 0],
                                         [0.25, 0, 0, 7.0, 1, 0, 0, 0],
                                         [10, 0, 0, 7.0, 1, 0, 0, 0]]},
        },
        "camera": {"width": 32, "height": 32, "max_depth_mm": 18.0},
        "seeds": {"fill": 0, "sample": 1},
    }
    cfg_path = tmp / "cfg.json"
    cfg_path.write_text(json.dumps(cfg_dict))
    cfg = load_scene_config(cfg_path)
    # bias toward deep presses so contact leaves a clear optical signature
    datagen.gen_synthetic(cfg, 5, tmp / "ds", seed=21, depth_range=(2.2, 3.0))
    return tmp / "ds"


def _layer_gradient_worst():
    worst = 0.0
    h = 1e-4
    rng = np.random.default_rng(77)

    def fd_vs(an, x, loss_of, n_probe=25):
        nonlocal worst
        flat = x.reshape(-1)
        idx = rng.choice(flat.size, size=min(n_probe, flat.size), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_of()
            flat[i] = orig - h
            lm = loss_of()
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            if abs(fd) > 1e-7:
                worst = max(worst, abs(an.reshape(-1)[i] - fd) / abs(fd))

    # conv stride 1 and 2 (inputs + weights)
    for stride, hw in ((1, 8), (2, 8)):
        x = rng.normal(size=(1, hw, hw, 3))
        W = rng.normal(size=(3, 3, 3, 4)) * 0.4
        b = rng.normal(size=4) * 0.1
        target = rng.normal(size=optical.conv3x3_forward(x, W, b, stride=stride).shape)

        def loss():
            y = optical.conv3x3_forward(x, W, b, stride=stride)
            return float(np.sum((y - target) ** 2))

        y = optical.conv3x3_forward(x, W, b, stride=stride)
        dx, dW, db = optical.conv3x3_backward(x, W, 2 * (y - target), stride=stride)
        fd_vs(dx, x, loss)
        fd_vs(dW, W, loss)
        fd_vs(db, b, loss, n_probe=4)

    # nonlinearity
    x = rng.normal(size=(2, 6, 6, 3))
    target = rng.normal(size=x.shape)
    y = optical.elu_forward(x)
    dx = optical.elu_backward(y, 2 * (y - target))
    fd_vs(dx, x, lambda: float(np.sum((optical.elu_forward(x) - target) ** 2)))

    # upsample
    x = rng.normal(size=(1, 4, 4, 3))
    target = rng.normal(size=(1, 8, 8, 3))
    y = optical.upsample2_forward(x)
    dx = optical.upsample2_backward(2 * (y - target))
    fd_vs(dx, x, lambda: float(np.sum((optical.upsample2_forward(x) - target) ** 2)))

    # full model including skip-add and tanh squash
    model = optical.OpticalModel.initialize(seed=3)
    x = rng.uniform(size=(1, 8, 8, 4))
    target = rng.uniform(-0.5, 0.5, size=(1, 8, 8, 3))

    def model_loss():
        return float(np.mean((model.forward(x) - target) ** 2))

    y, cache = model.forward(x, want_cache=True)
    grads, dx = model.backward(cache, (2.0 / y.size) * (y - target))
    fd_vs(dx, x, model_loss)
    for name in ("enc1", "bott", "out"):
        fd_vs(grads[name][0], model.weights[name][0], model_loss, n_probe=10)
    return worst


def test_criterion_7_optical(desk_dataset):
    grad_worst = _layer_gradient_worst()
    grad_ok = grad_worst < 1e-3

    pairs_tr, idle, _ = datagen.load_optical_dataset(desk_dataset, split="train")
    pairs_ev, _, _ = datagen.load_optical_dataset(desk_dataset, split="eval")

    # overfit an 8-frame subset
    pairs8 = pairs_tr[:8]
    _, hist = optical.train(optical.OpticalModel.initialize(seed=0), pairs8,
                            optical.TrainConfig(epochs=500, seed=2))
    first_below = next((i for i, l in enumerate(hist) if l < 5e-3), None)
    overfit_ok = first_below is not None

    # residual vs direct regression on held-out frames, identical budgets
    m_res, _ = optical.train(optical.OpticalModel.initialize(seed=0), pairs_tr,
                             optical.TrainConfig(epochs=100, seed=1))
    direct_pairs = [(x, (t + idle) * 2.0 - 1.0) for x, t in pairs_tr]
    m_dir, _ = optical.train(optical.OpticalModel.initialize(seed=0), direct_pairs,
                             optical.TrainConfig(epochs=100, seed=1))

    def psnr_of(model, mode):
        vals = []
        for x, t in pairs_ev:
            gt = np.clip(t + idle, 0.0, 1.0)
            pred = (optical.predict_composed(model, x, idle) if mode == "res"
                    else optical.predict_direct(model, x))
            vals.append(metrics.image_metrics(pred, gt).psnr)
        return float(np.mean(vals))

    p_res = psnr_of(m_res, "res")
    p_dir = psnr_of(m_dir, "dir")
    ablation_ok = p_res >= p_dir

    ok = grad_ok and overfit_ok and ablation_ok
    record(f"ACCEPTANCE 7 {'PASS' if ok else 'FAIL'}: optical stack "
           f"(layer grads worst rel {grad_worst:.2e} < 1e-3; overfit < 5e-3 at epoch "
           f"{first_below}; residual {p_res:.2f} dB >= direct {p_dir:.2f} dB)")
    assert grad_ok
    assert overfit_ok
    assert ablation_ok


def test_pipeline_idle_consistency(desk_dataset):
    # composed output on a contact-free frame stays close to the idle image:
    # residuals are near zero where nothing touches
    pairs_tr, idle, manifest = datagen.load_optical_dataset(desk_dataset, split="train")
    model, _ = optical.train(optical.OpticalModel.initialize(seed=0), pairs_tr,
                             optical.TrainConfig(epochs=300, seed=1))

    cfg = CameraConfig(width=manifest["camera"]["width"], height=manifest["camera"]["height"],
                       max_depth=manifest["camera"]["max_depth_mm"])
    ps = geo.fill_hemisphere_particles(6.0, "solid", 1.2, density=1e6, seed=0)
    mesh = build_surface_mesh(ps, 6.0)
    frame = render_maps(mesh, cfg)
    # quantize the normal channels like the dataset loader's PPM round trip
    norm_rgb = np.round((frame.normal + 1.0) * 0.5 * 255.0) / 255.0
    depth = np.clip(frame.depth / frame.max_depth, 0.0, 1.0)
    idle_input = np.concatenate([norm_rgb, depth[..., None]], axis=-1)
    composed = optical.predict_composed(model, idle_input, idle)
    idle_dist = float(np.mean(np.linalg.norm(composed - idle, axis=-1)))

    contact_dists = [float(np.mean(np.linalg.norm(t, axis=-1))) for _, t in pairs_tr]
    assert idle_dist < np.mean(contact_dists), (idle_dist, np.mean(contact_dists))


# --------------------------------------------------------------------------
# 8. substep trade-off trend
# --------------------------------------------------------------------------

def _press_scene(substeps):
    radius, voxel = 8.0, 1.2
    ps = geo.fill_hemisphere_particles(radius, "solid", voxel, density=1e6, seed=0)
    z_touch = radius + 3.0
    traj = geo.Trajectory(
        np.array([0.0, 0.5, 10.0]),
        np.array([[0, 0, z_touch + 0.4], [0, 0, z_touch - 2.0], [0, 0, z_touch - 2.0]]),
        np.array([[1.0, 0, 0, 0]] * 3),
    )
    shape = geo.IndenterShape.sphere(3.0)
    grid = mpm.make_grid_for_scene(radius, voxel, traj, shape)
    mat = mpm.make_material(27575.0, 0.303, density=1e6)
    ind = mpm.IndenterState(shape=shape, pose=geo.RigidPose(traj.positions[0], traj.quats[0]),
                            lin_vel=np.zeros(3), ang_vel=np.zeros(3), trajectory=traj)
    return mpm.SimState(particles=ps, grid=grid, indenter=ind, material=mat,
                        fps=24.0, substeps_per_frame=substeps)


def test_criterion_8_substep_tradeoff():
    frames = 16  # 12 pressing to 2 mm, 4 settling

    def run(substeps):
        state = _press_scene(substeps)
        t0 = time.perf_counter()
        for _ in range(frames):
            state = mpm.step_frame(state)
        return (time.perf_counter() - t0) / frames, mpm.surface_points(state.particles)

    t_100, cloud_100 = run(100)
    t_20, cloud_20 = run(20)
    speedup = t_100 / t_20
    cd = metrics.l2_chamfer(cloud_100, cloud_20)
    ok = speedup >= 3.0 and cd <= 0.5
    record(f"ACCEPTANCE 8 {'PASS' if ok else 'FAIL'}: substeps 100 -> 20 "
           f"(per-frame wall clock {t_100*1000:.0f} -> {t_20*1000:.0f} ms, {speedup:.1f}x >= 3x; "
           f"surface L2 CD {cd:.3f} mm <= 0.5 mm)")
    assert speedup >= 3.0
    assert cd <= 0.5


# --------------------------------------------------------------------------
# 9. end-to-end determinism
# --------------------------------------------------------------------------

def _run_chain(root: Path, cfg_path: Path) -> dict:
    ds = root / "ds"
    assert cli.main(["gen-synthetic", "--config", str(cfg_path), "--out", str(ds),
                     "--n-scenes", "3", "--seed", "5"]) == 0
    assert cli.main(["calibrate", "--config", str(cfg_path), "--sequences", str(ds),
                     "--out", str(root / "calib.json"), "--iters", "3",
                     "--init-E", "40000", "--init-nu", "0.35"]) == 0
    assert cli.main(["train-optical", "--dataset", str(ds), "--out", str(root / "w.optw"),
                     "--epochs", "15", "--seed", "3"]) == 0
    assert cli.main(["evaluate", "--dataset", str(ds), "--weights", str(root / "w.optw"),
                     "--split", "eval", "--out", str(root / "report.json"),
                     "--n-points", "256", "--seed", "1"]) == 0

    digest = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        rel = str(p.relative_to(root))
        if p.name == "calib.json":
            data = json.loads(p.read_text())
            data.pop("wall_clock_s", None)
            digest[rel] = json.dumps(data, sort_keys=True)
        else:
            digest[rel] = p.read_bytes()
    return digest


def test_criterion_9_end_to_end_determinism(tmp_path):
    cfg_dict = {
        "schema_version": 1,
        "material": {"E": 27575.0, "nu": 0.303, "density": 1e6},
        "grid": {"voxel_res_mm": 1.4},
        "sim": {"fps": 24, "substeps": 15, "frames": 3},
        "sensor": {"radius_mm": 6.0, "shell": "solid"},
        "indenter": {
            "shape": {"type": "sphere", "radius_mm": 2.5},
            "trajectory": {"waypoints": [[0, 0, 0, 9.2, 1, 0, 0, 0],
                                         [0.125, 0, 0, 7.6, 1, 0, 0, 0],
                                         [10, 0, 0, 7.6, 1, 0, 0, 0]]},
        },
        "camera": {"width": 16, "height": 16, "max_depth_mm": 16.0},
        "seeds": {"fill": 0, "sample": 1},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg_dict))

    run_a = _run_chain(tmp_path / "a", cfg_path)
    run_b = _run_chain(tmp_path / "b", cfg_path)
    same_keys = run_a.keys() == run_b.keys()
    diffs = [k for k in run_a if same_keys and run_a[k] != run_b[k]]
    ok = same_keys and not diffs
    record(f"ACCEPTANCE 9 {'PASS' if ok else 'FAIL'}: end-to-end determinism "
           f"({len(run_a)} artifacts byte-compared"
           + (f"; differing: {diffs[:3]}" if diffs else "") + ")")
    assert same_keys
    assert not diffs

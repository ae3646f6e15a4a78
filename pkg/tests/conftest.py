import numpy as np
import pytest

ACCEPTANCE_REPORT = []


def record(line: str):
    ACCEPTANCE_REPORT.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_REPORT:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_REPORT:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Compile (or load from cache) the numba kernels before any timed test."""
    from gelsim import geometry as geo, mpm, calib

    ps = geo.fill_hemisphere_particles(3.0, "solid", 1.5, density=1e6, seed=0)
    traj = geo.Trajectory(
        np.array([0.0, 1.0]), np.array([[0, 0, 9.0], [0, 0, 9.0]]), np.array([[1.0, 0, 0, 0]] * 2)
    )
    shape = geo.IndenterShape.sphere(1.0)
    grid = mpm.make_grid_for_scene(3.0, 1.5, traj, shape)
    mat = mpm.make_material(27575.0, 0.303)
    ind = mpm.IndenterState(
        shape=shape, pose=geo.RigidPose(traj.positions[0], traj.quats[0]),
        lin_vel=np.zeros(3), ang_vel=np.zeros(3), trajectory=traj,
    )
    state = mpm.SimState(particles=ps, grid=grid, indenter=ind, material=mat,
                         fps=24.0, substeps_per_frame=2)
    state = mpm.step_frame(state)
    dual_state = calib.sensitivity_state(
        mpm.SimState(particles=ps, grid=grid, indenter=ind, material=mat,
                     fps=24.0, substeps_per_frame=2),
        calib.CalibParams.from_E_nu(27575.0, 0.303),
    )
    mpm.step_frame(dual_state)

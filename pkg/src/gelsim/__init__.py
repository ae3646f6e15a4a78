"""Differentiable MPM simulation of hemispherical-gel optical tactile sensors.

Subpackages:
    geometry  meshes, point clouds, SDF shapes, trajectories, file I/O
    mpm       explicit MLS-MPM stepper with rigid-indenter contact
    calib     forward-mode calibration of (E, nu) against target clouds
    camera    fisheye raycaster producing depth/normal maps
    optical   residual image model with in-repo conv backprop
    metrics   point-cloud and image evaluation metrics
    scene     JSON scene configuration and assembly
    datagen   synthetic demonstration/dataset generation
    cli       command-line entry points
"""

__version__ = "0.1.0"

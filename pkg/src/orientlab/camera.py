"""Pinhole camera rays shared by the SDF renderer and the radiance field."""

from __future__ import annotations

import math

import numpy as np

from .quatpose import CameraPose, quat_to_matrix

DEFAULT_FOV_V_DEG = 50.0


def pixel_rays(pose: CameraPose, height: int, width: int, fov_v_deg: float = DEFAULT_FOV_V_DEG):
    """Per-pixel world-space rays for a square-pixel pinhole camera.

    Rays are emitted through pixel centers, row-major from the top-left; the
    camera looks along its local -z. Returns (origins, directions), each of
    shape (height * width, 3), with unit directions.
    """
    tan_half = math.tan(math.radians(fov_v_deg) / 2.0)
    scale = tan_half / (height / 2.0)
    cols = (np.arange(width, dtype=np.float64) + 0.5 - width / 2.0) * scale
    rows = (height / 2.0 - np.arange(height, dtype=np.float64) - 0.5) * scale
    xg, yg = np.meshgrid(cols, rows)
    dirs_cam = np.stack([xg, yg, -np.ones_like(xg)], axis=-1).reshape(-1, 3)
    dirs_cam /= np.linalg.norm(dirs_cam, axis=1, keepdims=True)
    rot = quat_to_matrix(pose.orientation)
    dirs = dirs_cam @ rot.T
    origins = np.broadcast_to(pose.position, dirs.shape).copy()
    return origins, dirs

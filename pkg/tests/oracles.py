"""Slow reference implementations used to check the fast code paths."""
import math

import numpy as np

from segcalib.render import splat_geometry


def brute_force_render(points, labels, K, E, cfg):
    """Per-pixel scan over every point: nearest covering splat wins, ties to lower index."""
    u, v, depth, radius, front = splat_geometry(points, K, E, cfg)
    cu = np.floor(u + 0.5)
    cv = np.floor(v + 0.5)
    grid = np.full((K.height, K.width), cfg.background_class, dtype=np.uint8)
    r2 = radius * radius
    for row in range(K.height):
        for col in range(K.width):
            covers = front & ((col - cu) ** 2 + (row - cv) ** 2 < r2)
            if covers.any():
                d = np.where(covers, depth, np.inf)
                grid[row, col] = labels[int(np.argmin(d))]  # first minimum = lowest index
    return grid


def rotation_z(deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_about(axis, deg):
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    a = math.radians(deg)
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(a) * Kx + (1 - math.cos(a)) * Kx @ Kx


def rotation_angle_deg(R):
    return math.degrees(math.acos(max(-1.0, min(1.0, (np.trace(R) - 1.0) / 2.0))))

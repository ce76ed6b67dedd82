"""Shared builders for the test suite."""

import numpy as np

from fieldreg.geometry import AnisoAffine, ColoredGeoCloud


def random_rotation(rng) -> np.ndarray:
    """Uniform random rotation matrix from a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_angle_rotation(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def random_aniso(rng, scale_lo=0.7, scale_hi=1.3, t_span=5.0) -> AnisoAffine:
    return AnisoAffine(
        scale=rng.uniform(scale_lo, scale_hi, size=3),
        rotation=random_rotation(rng),
        translation=rng.uniform(-t_span, t_span, size=3),
    )


def random_cloud(rng, n=100, span=5.0, origin=(47.0, 8.0, 400.0), heading=0.0) -> ColoredGeoCloud:
    xyz = rng.uniform(-span, span, size=(n, 3))
    rgb = rng.uniform(0.0, 1.0, size=(n, 3))
    return ColoredGeoCloud(xyz, rgb, origin, heading)

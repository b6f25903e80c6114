"""Rotation representations, pinhole projection and translation recovery.

Conventions: right-handed camera frame, +z forward, pixel origin at the
top-left corner (BOP). All functions are pure.
"""

import numpy as np

from poselab.errors import BehindCamera, DegenerateInput, InvalidDistance
from poselab.models.geometry import CameraIntrinsics, Pose, ProjectiveCentre

DEGENERACY_TOL = 1e-9


def rotation_to_6d(R: np.ndarray) -> np.ndarray:
    """First two columns of ``R`` stacked into a 6-vector."""
    R = np.asarray(R, dtype=float)
    return np.concatenate([R[:, 0], R[:, 1]])


def gram_schmidt_6d(r: np.ndarray) -> np.ndarray:
    """Map a 6D representation back onto SO(3).

    Column 1 is the normalised first 3-vector, column 2 the normalised
    residual of the second after projecting out column 1, column 3 their
    cross product.
    """
    r = np.asarray(r, dtype=float).reshape(6)
    a1, a2 = r[:3], r[3:]
    n1 = np.linalg.norm(a1)
    if not np.isfinite(n1) or n1 < DEGENERACY_TOL:
        raise DegenerateInput(f"first rotation column has norm {n1:.3g}")
    c1 = a1 / n1
    residual = a2 - np.dot(a2, c1) * c1
    n2 = np.linalg.norm(residual)
    if not np.isfinite(n2) or n2 < DEGENERACY_TOL:
        raise DegenerateInput("second rotation column is parallel to the first")
    c2 = residual / n2
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=1)


def is_rotation(R: np.ndarray, tol: float = 1e-6) -> bool:
    """Orthonormal with determinant +1, within ``tol``."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(
        np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) <= tol
    )


def axis_angle_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    kx, ky, kz = axis
    K = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def random_rotations(count: int, seed: int | np.random.Generator | None) -> np.ndarray:
    """``count`` Haar-uniform rotations from normalised Gaussian quaternions."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    q = rng.standard_normal((count, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    R = np.empty((count, 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - z * w)
    R[:, 0, 2] = 2 * (x * z + y * w)
    R[:, 1, 0] = 2 * (x * y + z * w)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - x * w)
    R[:, 2, 0] = 2 * (x * z - y * w)
    R[:, 2, 1] = 2 * (y * z + x * w)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def random_rotation(seed: int | np.random.Generator | None) -> np.ndarray:
    """A single Haar-uniform rotation; deterministic for an integer seed."""
    return random_rotations(1, seed)[0]


def project_points(
    points: np.ndarray, R: np.ndarray, t: np.ndarray, K: CameraIntrinsics
) -> np.ndarray:
    """Pinhole projection of (N, 3) model points under (R, t) to (N, 2) pixels."""
    R = np.asarray(R, dtype=float)
    cam = np.asarray(points, dtype=float) @ R.T + np.asarray(t, dtype=float)
    z = cam[:, 2]
    if np.any(z <= 0):
        raise BehindCamera(f"{int(np.sum(z <= 0))} point(s) at or behind the camera plane")
    u = K.fx * cam[:, 0] / z + K.px
    v = K.fy * cam[:, 1] / z + K.py
    return np.stack([u, v], axis=1)


def project_point(x: np.ndarray, pose: Pose, K: CameraIntrinsics) -> np.ndarray:
    """Pixel coordinates of model point ``x`` under ``pose``."""
    return project_points(np.asarray(x, dtype=float).reshape(1, 3), pose.R, pose.t, K)[0]


def projective_centre(t: np.ndarray, K: CameraIntrinsics) -> ProjectiveCentre:
    """Projection of the object origin."""
    t = np.asarray(t, dtype=float)
    if t[2] <= 0:
        raise BehindCamera("object origin at or behind the camera plane")
    return ProjectiveCentre(cx=K.fx * t[0] / t[2] + K.px, cy=K.fy * t[1] / t[2] + K.py)


def backproject_centre(c: ProjectiveCentre, tz: float, K: CameraIntrinsics) -> np.ndarray:
    """Recover the translation from a projective centre and a distance."""
    if not tz > 0:
        raise InvalidDistance(f"projective distance must be positive, got {tz}")
    return np.array([(c.cx - K.px) * tz / K.fx, (c.cy - K.py) * tz / K.fy, tz])


def geodesic_angle(R_a: np.ndarray, R_b: np.ndarray) -> float:
    """Angle of R_a R_b^T in radians."""
    cos = 0.5 * (np.trace(np.asarray(R_a) @ np.asarray(R_b).T) - 1.0)
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))

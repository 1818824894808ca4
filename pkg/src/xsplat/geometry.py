"""Rotation, quaternion, and bounding-box utilities shared across the package.

Quaternions are stored as (w, x, y, z). All rotation matrices map column
vectors; a pose orientation matrix maps world coordinates into the detector
frame via ``y = W @ (x - eye)``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero quaternion cannot be normalized")
    return q / n


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a quaternion. Accepts (4,) or (M, 4); normalizes first."""
    q = quat_normalize(q)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Quaternion (w, x, y, z) of a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
            q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                          (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
        elif i == 1:
            s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
            q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                          0.25 * s, (R[1, 2] + R[2, 1]) / s])
        else:
            s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
            q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                          (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    # canonical sign: w >= 0 keeps serialized pools byte-stable
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_rotmat_derivs(q_unit: np.ndarray) -> np.ndarray:
    """d(R)/d(q_k) for a unit quaternion, shape (4, 3, 3).

    The caller is responsible for chaining through normalization with
    ``(I - q q^T) / ||q_raw||`` when differentiating wrt an unnormalized
    quaternion.
    """
    w, x, y, z = q_unit
    dw = 2 * np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    dx = 2 * np.array([[0.0, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dy = 2 * np.array([[-2 * y, x, w], [x, 0.0, z], [-w, z, -2 * y]])
    dz = 2 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0.0]])
    return np.stack([dw, dx, dy, dz])


def look_at_rows(eye: np.ndarray, center: np.ndarray,
                 up_hint: np.ndarray | None = None) -> np.ndarray:
    """World-to-detector rotation whose rows are (u, v, w).

    w is the optical axis from eye toward center; v is the projection of the
    up hint onto the detector plane; u completes a right-handed frame
    (u x v = w). The default hint is +z; a pose looking straight along z
    falls back to +x, so poles are well defined.
    """
    eye = np.asarray(eye, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    w = center - eye
    nw = np.linalg.norm(w)
    if nw == 0:
        raise ValueError("eye coincides with center")
    w = w / nw
    if up_hint is None:
        up_hint = np.array([0.0, 0.0, 1.0])
        if abs(w @ up_hint) > 1.0 - 1e-8:
            up_hint = np.array([1.0, 0.0, 0.0])
    up_hint = np.asarray(up_hint, dtype=np.float64)
    v = up_hint - (up_hint @ w) * w
    nv = np.linalg.norm(v)
    if nv < 1e-12:
        raise ValueError("up hint is parallel to the viewing axis")
    v = v / nv
    u = np.cross(v, w)
    return np.stack([u, v, w])


@dataclass
class AABB:
    """Axis-aligned box in world units."""
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if np.any(self.hi <= self.lo):
            raise ValueError("degenerate bounds: hi must exceed lo on every axis")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        inside = np.all((p >= self.lo) & (p <= self.hi), axis=1)
        return inside if np.asarray(points).ndim > 1 else bool(inside[0])

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "AABB":
        return cls(np.array(d["lo"]), np.array(d["hi"]))


def derive_seed(master: int, label: str) -> int:
    """Stable 63-bit seed derived from a master seed and a purpose label.

    Labeled fan-out keeps independently seeded subsystems (init, training,
    ensembles, policies) from perturbing each other's random streams.
    """
    digest = hashlib.sha256(f"{int(master)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def fibonacci_hemisphere(n: int) -> np.ndarray:
    """n unit directions on the upper hemisphere (z >= 0), golden-angle lattice.

    The lattice includes the pole (k = 0) and reaches the equator, so n = 1
    yields exactly the pole direction.
    """
    if n < 1:
        raise ValueError("need at least one direction")
    k = np.arange(n, dtype=np.float64)
    z = 1.0 - k / max(n - 1, 1) if n > 1 else np.ones(1)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    az = golden * k
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    return np.stack([r * np.cos(az), r * np.sin(az), z], axis=1)


def great_circle_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angle in radians between unit direction sets a (N,3) and b (M,3) -> (N,M)."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    return np.arccos(np.clip(a @ b.T, -1.0, 1.0))

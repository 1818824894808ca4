"""Radiative Gaussian scene representation.

A scene is a mixture of anisotropic 3D Gaussian kernels. Each kernel stores
an unbounded raw density (activated through softplus so the physical density
stays nonnegative), a position, per-axis log standard deviations, and a unit
quaternion. The covariance factors as Sigma = R diag(s^2) R^T, which is
positive definite by construction for any finite parameters.

The field keeps structure-of-arrays storage for speed; ``GaussianPrimitive``
is a per-kernel view used at API boundaries.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .geometry import AABB, quat_normalize, quat_to_rotmat

CHECKPOINT_FORMAT_VERSION = 1
FLOATS_PER_PRIMITIVE = 11  # raw_density, position*3, log_scale*3, quaternion*4


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_deriv(x):
    return expit(x)


def softplus_inverse(y):
    """Raw value whose softplus activation equals y (y > 0)."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus inverse requires positive input")
    return y + np.log(-np.expm1(-y))


@dataclass
class GaussianPrimitive:
    """One radiative kernel. Activated density is softplus(raw_density)."""
    raw_density: float
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.rotation = quat_normalize(np.asarray(self.rotation, dtype=np.float64).reshape(4))

    @property
    def density(self) -> float:
        return float(softplus(self.raw_density))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale)


def covariance(primitive: GaussianPrimitive) -> np.ndarray:
    """Sigma = R diag(s^2) R^T; symmetric positive definite for s > 0."""
    R = quat_to_rotmat(primitive.rotation)
    s2 = np.exp(2.0 * primitive.log_scale)
    return (R * s2) @ R.T


class GaussianField:
    """Ordered collection of Gaussian primitives inside an axis-aligned bound.

    Parameter arrays are owned by the field; evaluation methods never mutate
    them, so concurrent reads are safe. Optimization mutates in place and
    requires exclusive access.
    """

    def __init__(self, raw_densities, positions, log_scales, rotations, bounds: AABB):
        self.raw_densities = np.asarray(raw_densities, dtype=np.float64).reshape(-1)
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.log_scales = np.asarray(log_scales, dtype=np.float64).reshape(-1, 3)
        self.rotations = quat_normalize(np.asarray(rotations, dtype=np.float64).reshape(-1, 4))
        self.bounds = bounds
        m = len(self.raw_densities)
        if m == 0:
            raise ValueError("field must hold at least one primitive")
        if not (len(self.positions) == len(self.log_scales) == len(self.rotations) == m):
            raise ValueError("parameter arrays disagree on primitive count")

    def __len__(self) -> int:
        return len(self.raw_densities)

    @classmethod
    def from_primitives(cls, primitives, bounds: AABB) -> "GaussianField":
        prims = list(primitives)
        return cls(
            np.array([p.raw_density for p in prims]),
            np.stack([p.position for p in prims]),
            np.stack([p.log_scale for p in prims]),
            np.stack([p.rotation for p in prims]),
            bounds,
        )

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            float(self.raw_densities[i]),
            self.positions[i].copy(),
            self.log_scales[i].copy(),
            self.rotations[i].copy(),
        )

    def densities(self) -> np.ndarray:
        return softplus(self.raw_densities)

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def covariances(self) -> np.ndarray:
        R = quat_to_rotmat(self.rotations)
        s2 = np.exp(2.0 * self.log_scales)
        return np.einsum("mij,mj,mkj->mik", R, s2, R)

    def copy(self) -> "GaussianField":
        return GaussianField(
            self.raw_densities.copy(), self.positions.copy(),
            self.log_scales.copy(), self.rotations.copy(),
            AABB(self.bounds.lo.copy(), self.bounds.hi.copy()),
        )

    def select(self, indices) -> "GaussianField":
        idx = np.asarray(indices, dtype=np.intp)
        return GaussianField(
            self.raw_densities[idx], self.positions[idx],
            self.log_scales[idx], self.rotations[idx], self.bounds,
        )


def density_at(field: GaussianField, x: np.ndarray) -> np.ndarray:
    """Mixture density at one point (3,) or a batch (N, 3). Exact, no cutoff."""
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    rho = field.densities()
    cov = field.covariances()
    prec = np.linalg.inv(cov)
    out = np.zeros(len(pts))
    # chunk over primitives to bound the (M, N, 3) intermediate
    chunk = max(1, int(4e6 // max(len(pts), 1)))
    for start in range(0, len(field), chunk):
        sl = slice(start, min(start + chunk, len(field)))
        d = pts[None, :, :] - field.positions[sl, None, :]
        q = np.einsum("mnd,mde,mne->mn", d, prec[sl], d)
        out += rho[sl] @ np.exp(-0.5 * q)
    return float(out[0]) if single else out


@dataclass
class VoxelGrid:
    """Regular grid of density samples; origin is the center of voxel (0,0,0)."""
    dims: tuple
    origin: np.ndarray
    spacing: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if any(d < 1 for d in self.dims):
            raise ValueError("grid dims must be positive")
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        if np.any(self.spacing <= 0):
            raise ValueError("grid spacing must be positive")
        self.values = np.asarray(self.values)
        if self.values.shape != self.dims:
            raise ValueError(f"values shape {self.values.shape} != dims {self.dims}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    @property
    def world_lo(self) -> np.ndarray:
        # outer voxel faces, half a voxel beyond the first/last centers
        return self.origin - 0.5 * self.spacing

    @property
    def world_hi(self) -> np.ndarray:
        return self.origin + (np.array(self.dims) - 0.5) * self.spacing

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + np.arange(self.dims[axis]) * self.spacing[axis]

    @classmethod
    def for_bounds(cls, bounds: AABB, dims, values=None) -> "VoxelGrid":
        dims = tuple(int(d) for d in dims)
        spacing = bounds.extent / np.array(dims)
        origin = bounds.lo + 0.5 * spacing
        if values is None:
            values = np.zeros(dims)
        return cls(dims, origin, spacing, values)


def _primitive_boxes(field: GaussianField, grid: VoxelGrid, cutoff):
    """Per-primitive inclusive index ranges covering +-cutoff sigma per axis."""
    m = len(field)
    dims = np.array(grid.dims)
    if cutoff is None:
        lo = np.zeros((m, 3), dtype=np.intp)
        hi = np.tile(dims, (m, 1)).astype(np.intp)
        return lo, hi
    half = cutoff * np.sqrt(np.maximum(np.einsum("mii->mi", field.covariances()), 0.0))
    lo_w = field.positions - half
    hi_w = field.positions + half
    lo = np.ceil((lo_w - grid.origin) / grid.spacing).astype(np.intp)
    hi = np.floor((hi_w - grid.origin) / grid.spacing).astype(np.intp) + 1
    lo = np.clip(lo, 0, dims)
    hi = np.clip(hi, 0, dims)
    return lo, hi


def voxelize(field: GaussianField, dims, origin=None, spacing=None,
             cutoff: float | None = 3.0) -> VoxelGrid:
    """Sample the mixture density onto a regular grid.

    Each primitive contributes inside an axis-aligned box of +-cutoff standard
    deviations per axis (cutoff=None evaluates everywhere). Values omitted by
    the box are bounded by the Gaussian tail at Mahalanobis distance >= cutoff.
    If origin/spacing are omitted, the grid spans the field bounds.
    """
    if origin is None or spacing is None:
        grid = VoxelGrid.for_bounds(field.bounds, dims)
    else:
        grid = VoxelGrid(tuple(dims), origin, spacing, np.zeros(tuple(dims)))
    rho = field.densities()
    prec = np.linalg.inv(field.covariances())
    lo, hi = _primitive_boxes(field, grid, cutoff)
    xs = grid.axis_centers(0)
    ys = grid.axis_centers(1)
    zs = grid.axis_centers(2)
    vals = grid.values
    for k in range(len(field)):
        (i0, j0, k0), (i1, j1, k1) = lo[k], hi[k]
        if i0 >= i1 or j0 >= j1 or k0 >= k1:
            continue
        p = field.positions[k]
        Q = prec[k]
        dx = xs[i0:i1] - p[0]
        dy = ys[j0:j1] - p[1]
        dz = zs[k0:k1] - p[2]
        quad = (
            Q[0, 0] * dx[:, None, None] ** 2
            + Q[1, 1] * dy[None, :, None] ** 2
            + Q[2, 2] * dz[None, None, :] ** 2
            + 2 * Q[0, 1] * dx[:, None, None] * dy[None, :, None]
            + 2 * Q[0, 2] * dx[:, None, None] * dz[None, None, :]
            + 2 * Q[1, 2] * dy[None, :, None] * dz[None, None, :]
        )
        vals[i0:i1, j0:j1, k0:k1] += rho[k] * np.exp(-0.5 * quad)
    return grid


def voxelize_backward(field: GaussianField, grid: VoxelGrid, grad_values: np.ndarray,
                      cutoff: float | None = 3.0) -> dict:
    """Adjoint of voxelize: push a gradient wrt grid values onto field parameters.

    Returns per-primitive gradients for raw_density (M,), position (M,3),
    log_scale (M,3) and rotation (M,4); the quaternion gradient includes the
    normalization projection so it is valid for unnormalized storage values.
    """
    from .geometry import quat_rotmat_derivs  # local import avoids cycle at module load

    m = len(field)
    rho = field.densities()
    s = field.scales()
    R = quat_to_rotmat(field.rotations)
    prec = np.linalg.inv(field.covariances())
    lo, hi = _primitive_boxes(field, grid, cutoff)
    xs = grid.axis_centers(0)
    ys = grid.axis_centers(1)
    zs = grid.axis_centers(2)

    g_raw = np.zeros(m)
    g_pos = np.zeros((m, 3))
    g_ls = np.zeros((m, 3))
    g_rot = np.zeros((m, 4))

    for k in range(m):
        (i0, j0, k0), (i1, j1, k1) = lo[k], hi[k]
        if i0 >= i1 or j0 >= j1 or k0 >= k1:
            continue
        p = field.positions[k]
        Q = prec[k]
        dx = (xs[i0:i1] - p[0])[:, None, None]
        dy = (ys[j0:j1] - p[1])[None, :, None]
        dz = (zs[k0:k1] - p[2])[None, None, :]
        quad = (Q[0, 0] * dx ** 2 + Q[1, 1] * dy ** 2 + Q[2, 2] * dz ** 2
                + 2 * Q[0, 1] * dx * dy + 2 * Q[0, 2] * dx * dz + 2 * Q[1, 2] * dy * dz)
        Ge = grad_values[i0:i1, j0:j1, k0:k1] * np.exp(-0.5 * quad)
        s0 = Ge.sum()
        sx = (Ge * dx).sum(); sy = (Ge * dy).sum(); sz = (Ge * dz).sum()
        sxx = (Ge * dx * dx).sum(); syy = (Ge * dy * dy).sum(); szz = (Ge * dz * dz).sum()
        sxy = (Ge * dx * dy).sum(); sxz = (Ge * dx * dz).sum(); syz = (Ge * dy * dz).sum()

        g_raw[k] = s0 * softplus_deriv(field.raw_densities[k])
        g_pos[k] = rho[k] * (Q @ np.array([sx, sy, sz]))
        dL_dQ = -0.5 * rho[k] * np.array([[sxx, sxy, sxz], [sxy, syy, syz], [sxz, syz, szz]])
        dL_dSig = -Q @ dL_dQ @ Q
        Gs = 0.5 * (dL_dSig + dL_dSig.T)
        Mmat = R[k] * s[k]
        dL_dM = 2.0 * Gs @ Mmat
        g_ls[k] = s[k] * np.diag(R[k].T @ dL_dM)
        dL_dR = dL_dM * s[k]
        Dq = quat_rotmat_derivs(field.rotations[k])
        g_unit = np.einsum("qij,ij->q", Dq, dL_dR)
        q = field.rotations[k]
        g_rot[k] = (np.eye(4) - np.outer(q, q)) @ g_unit  # rotations stored unit-norm
    return {"raw_density": g_raw, "position": g_pos, "log_scale": g_ls, "rotation": g_rot}


def init_field(bounds: AABB, count: int, density_scale: float, seed: int) -> GaussianField:
    """Seeded random field: uniform positions, coverage-matched isotropic scales.

    Scales are set so neighboring kernels roughly tile the bounds at the given
    count; raw densities activate to about 5% of the supplied density scale.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if density_scale <= 0:
        raise ValueError("density_scale must be positive")
    rng = np.random.default_rng(seed)
    positions = rng.uniform(bounds.lo, bounds.hi, size=(count, 3))
    sigma0 = 0.5 * float(np.mean(bounds.extent)) / max(count, 1) ** (1.0 / 3.0)
    log_scales = np.full((count, 3), np.log(sigma0))
    log_scales += rng.uniform(-0.1, 0.1, size=(count, 3))
    rotations = np.zeros((count, 4))
    rotations[:, 0] = 1.0
    raw = np.full(count, softplus_inverse(0.05 * density_scale))
    return GaussianField(raw, positions, log_scales, rotations, bounds)


def save_field(field: GaussianField, path) -> None:
    """Write the checkpoint: flat little-endian float32 records + JSON sidecar."""
    path = Path(path)
    rec = np.empty((len(field), FLOATS_PER_PRIMITIVE), dtype="<f4")
    rec[:, 0] = field.raw_densities
    rec[:, 1:4] = field.positions
    rec[:, 4:7] = field.log_scales
    rec[:, 7:11] = field.rotations
    path.write_bytes(rec.tobytes())
    sidecar = {
        "count": len(field),
        "bounds": field.bounds.to_dict(),
        "format_version": CHECKPOINT_FORMAT_VERSION,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=1))


def load_field(path) -> GaussianField:
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise FileNotFoundError(f"missing checkpoint sidecar {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r} "
                         f"(supported: {CHECKPOINT_FORMAT_VERSION})")
    raw = path.read_bytes()
    count = int(meta["count"])
    expected = count * FLOATS_PER_PRIMITIVE * 4
    if len(raw) != expected:
        raise ValueError(f"checkpoint payload is {len(raw)} bytes, expected {expected}")
    rec = np.frombuffer(raw, dtype="<f4").reshape(count, FLOATS_PER_PRIMITIVE).astype(np.float64)
    return GaussianField(rec[:, 0], rec[:, 1:4], rec[:, 4:7], rec[:, 7:11],
                         AABB.from_dict(meta["bounds"]))


def quantize_like_checkpoint(field: GaussianField) -> GaussianField:
    """Round-trip parameters through the float32 checkpoint precision in memory."""
    f32 = lambda a: a.astype("<f4").astype(np.float64)
    return GaussianField(f32(field.raw_densities), f32(field.positions),
                         f32(field.log_scales), f32(field.rotations), field.bounds)

"""Log-space X-ray projection of Gaussian fields, plus a ray-marching oracle.

The transmission model is linear: a rendered pixel is the sum over kernels of
their line integrals, with no occlusion or compositing. For a parallel beam
the 2D footprint of a 3D Gaussian is its exact marginal along the ray axis;
for a cone beam the perspective map is linearized at the kernel center
(first-order affine approximation). In both cases the footprint amplitude is

    rho * sqrt(2 pi |Sigma| / |Sigma_2d|)

which makes the detector-integrated mass of a kernel equal to
rho * (2 pi)^(3/2) * sqrt(|Sigma|) independent of the view direction.

Images are stored as (H, W) float arrays of line integrals (log space after
the Beer-Lambert transform); nothing in this module exponentiates.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.ndimage import map_coordinates

from .field import GaussianField, GaussianPrimitive, VoxelGrid, softplus_deriv
from .geometry import quat_normalize, quat_to_rotmat, quat_rotmat_derivs, rotmat_to_quat

# cone-beam kernels closer to the source than this fraction of the
# source-to-detector distance are treated as non-contributing
_CONE_Z_EPS = 1e-6

POSE_FORMAT_VERSION = 1


@dataclass
class ScannerPose:
    """Object-centric scanner geometry for one projection.

    ``orientation`` rows are the detector axes (u, v) and the optical axis w,
    mapping world points via y = orientation @ (x - eye). For a parallel beam
    rays run along w through each detector pixel; for a cone beam they diverge
    from ``eye`` toward a detector plane at ``source_to_detector`` along w.
    """
    orientation: np.ndarray
    eye: np.ndarray
    beam: str = "parallel"
    source_to_detector: float | None = None
    det_height: int = 64
    det_width: int = 64
    pixel_pitch: float = 1.0

    def __post_init__(self):
        self.orientation = np.asarray(self.orientation, dtype=np.float64).reshape(3, 3)
        self.eye = np.asarray(self.eye, dtype=np.float64).reshape(3)
        if self.beam not in ("parallel", "cone"):
            raise ValueError(f"unknown beam type {self.beam!r}")
        if self.beam == "cone":
            if self.source_to_detector is None or self.source_to_detector <= 0:
                raise ValueError("cone beam requires a positive source_to_detector")
        if self.det_height < 1 or self.det_width < 1:
            raise ValueError("detector must be at least 1x1")
        if self.pixel_pitch <= 0:
            raise ValueError("pixel pitch must be positive")
        err = np.abs(self.orientation @ self.orientation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError("orientation is not orthonormal")

    @property
    def det_shape(self) -> tuple:
        return (self.det_height, self.det_width)

    def detector_us(self) -> np.ndarray:
        """World-unit u coordinate of each pixel column center."""
        return (np.arange(self.det_width) - (self.det_width - 1) / 2.0) * self.pixel_pitch

    def detector_vs(self) -> np.ndarray:
        return (np.arange(self.det_height) - (self.det_height - 1) / 2.0) * self.pixel_pitch

    def to_dict(self) -> dict:
        d = {
            "orientation_quat": rotmat_to_quat(self.orientation).tolist(),
            "eye": self.eye.tolist(),
            "beam": {"type": self.beam},
            "detector": {"width": self.det_width, "height": self.det_height,
                         "pixel_pitch": self.pixel_pitch},
        }
        if self.beam == "cone":
            d["beam"]["source_to_detector"] = self.source_to_detector
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScannerPose":
        beam = d["beam"]
        det = d["detector"]
        return cls(
            orientation=quat_to_rotmat(quat_normalize(np.array(d["orientation_quat"]))),
            eye=np.array(d["eye"], dtype=np.float64),
            beam=beam["type"],
            source_to_detector=beam.get("source_to_detector"),
            det_height=int(det["height"]),
            det_width=int(det["width"]),
            pixel_pitch=float(det["pixel_pitch"]),
        )


class Footprint(NamedTuple):
    """2D detector-plane Gaussian of one projected kernel (world units)."""
    mean2: np.ndarray
    cov2: np.ndarray
    amplitude: float
    contributing: bool


class _Projected(NamedTuple):
    """Batched projection intermediates shared by render and its adjoint."""
    mean2: np.ndarray      # (M, 2)
    cov2: np.ndarray       # (M, 2, 2)
    prec2: np.ndarray      # (M, 2, 2)
    amp: np.ndarray        # (M,)
    contributing: np.ndarray  # (M,) bool
    T: np.ndarray          # (M, 2, 3) linear map Sigma -> cov2
    cam: np.ndarray        # (M, 3) kernel centers in the detector frame


def _project_all(field: GaussianField, pose: ScannerPose) -> _Projected:
    W = pose.orientation
    cam = (field.positions - pose.eye) @ W.T
    cov = field.covariances()
    m = len(field)
    if pose.beam == "parallel":
        contributing = np.ones(m, dtype=bool)
        mean2 = cam[:, :2].copy()
        T = np.broadcast_to(W[:2], (m, 2, 3))
    else:
        D = float(pose.source_to_detector)
        z = cam[:, 2]
        contributing = z > _CONE_Z_EPS * D
        zs = np.where(contributing, z, 1.0)
        mean2 = D * cam[:, :2] / zs[:, None]
        J = np.zeros((m, 2, 3))
        J[:, 0, 0] = D / zs
        J[:, 1, 1] = D / zs
        J[:, 0, 2] = -D * cam[:, 0] / zs ** 2
        J[:, 1, 2] = -D * cam[:, 1] / zs ** 2
        T = J @ W
    cov2 = np.einsum("mij,mjk,mlk->mil", T, cov, T)
    det2 = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
    det2 = np.where(contributing, det2, 1.0)
    det3_sqrt = np.exp(field.log_scales.sum(axis=1))  # sqrt|Sigma| = s1*s2*s3
    amp = field.densities() * np.sqrt(2.0 * np.pi) * det3_sqrt / np.sqrt(det2)
    prec2 = np.empty_like(cov2)
    prec2[:, 0, 0] = cov2[:, 1, 1] / det2
    prec2[:, 1, 1] = cov2[:, 0, 0] / det2
    prec2[:, 0, 1] = prec2[:, 1, 0] = -cov2[:, 0, 1] / det2
    return _Projected(mean2, cov2, prec2, amp, contributing, np.ascontiguousarray(T), cam)


def project_gaussian(primitive: GaussianPrimitive, pose: ScannerPose) -> Footprint:
    """Project one kernel onto the detector plane.

    Returns the footprint mean and covariance in world detector-plane units
    and the mass-conserving amplitude. A cone-beam kernel at or behind the
    source is flagged non-contributing and is skipped by render.
    """
    one = GaussianField(
        np.array([primitive.raw_density]), primitive.position[None, :],
        primitive.log_scale[None, :], primitive.rotation[None, :],
        _unit_bounds_for(primitive.position),
    )
    pr = _project_all(one, pose)
    return Footprint(pr.mean2[0], pr.cov2[0], float(pr.amp[0]), bool(pr.contributing[0]))


def _unit_bounds_for(position):
    from .geometry import AABB
    p = np.asarray(position, dtype=np.float64)
    return AABB(p - 1.0, p + 1.0)


def _footprint_boxes(pr: _Projected, pose: ScannerPose, cutoff):
    """Inclusive pixel-index ranges covering +-cutoff sigma of each footprint."""
    H, W = pose.det_shape
    m = len(pr.amp)
    if cutoff is None:
        j0 = np.zeros(m, dtype=np.intp); j1 = np.full(m, W, dtype=np.intp)
        i0 = np.zeros(m, dtype=np.intp); i1 = np.full(m, H, dtype=np.intp)
        return i0, i1, j0, j1
    ru = cutoff * np.sqrt(np.maximum(pr.cov2[:, 0, 0], 0.0))
    rv = cutoff * np.sqrt(np.maximum(pr.cov2[:, 1, 1], 0.0))
    pitch = pose.pixel_pitch
    u0 = -(W - 1) / 2.0 * pitch
    v0 = -(H - 1) / 2.0 * pitch
    j0 = np.ceil((pr.mean2[:, 0] - ru - u0) / pitch).astype(np.intp)
    j1 = np.floor((pr.mean2[:, 0] + ru - u0) / pitch).astype(np.intp) + 1
    i0 = np.ceil((pr.mean2[:, 1] - rv - v0) / pitch).astype(np.intp)
    i1 = np.floor((pr.mean2[:, 1] + rv - v0) / pitch).astype(np.intp) + 1
    return (np.clip(i0, 0, H), np.clip(i1, 0, H),
            np.clip(j0, 0, W), np.clip(j1, 0, W))


def render(field: GaussianField, pose: ScannerPose,
           cutoff: float | None = 3.0) -> np.ndarray:
    """Render the log-space projection of the field for one pose.

    The result is linear in the field (render(A u B) = render(A) + render(B))
    and independent of primitive order up to float rounding. Each footprint is
    rasterized inside a +-cutoff sigma pixel box (cutoff=None disables the
    box and evaluates every kernel on the full detector).
    """
    pr = _project_all(field, pose)
    i0, i1, j0, j1 = _footprint_boxes(pr, pose, cutoff)
    us = pose.detector_us()
    vs = pose.detector_vs()
    img = np.zeros(pose.det_shape)
    for k in range(len(field)):
        if not pr.contributing[k] or i0[k] >= i1[k] or j0[k] >= j1[k]:
            continue
        Q = pr.prec2[k]
        du = us[j0[k]:j1[k]] - pr.mean2[k, 0]
        dv = vs[i0[k]:i1[k]] - pr.mean2[k, 1]
        quad = (Q[0, 0] * du[None, :] ** 2
                + 2.0 * Q[0, 1] * du[None, :] * dv[:, None]
                + Q[1, 1] * dv[:, None] ** 2)
        img[i0[k]:i1[k], j0[k]:j1[k]] += pr.amp[k] * np.exp(-0.5 * quad)
    return img


def render_with_contributions(field: GaussianField, pose: ScannerPose, indices,
                              cutoff: float | None = 3.0):
    """Render and additionally return the isolated patches of selected kernels.

    Returns (image, contributions) where contributions maps a requested
    primitive index to (row_slice, col_slice, patch). Scaling a kernel's
    activated density by c scales exactly its patch by c, which lets ensemble
    member images be formed as overlays on the base render.
    """
    pr = _project_all(field, pose)
    i0, i1, j0, j1 = _footprint_boxes(pr, pose, cutoff)
    us = pose.detector_us()
    vs = pose.detector_vs()
    img = np.zeros(pose.det_shape)
    wanted = set(int(i) for i in indices)
    contribs = {}
    for k in range(len(field)):
        if not pr.contributing[k] or i0[k] >= i1[k] or j0[k] >= j1[k]:
            if k in wanted:
                contribs[k] = (slice(0, 0), slice(0, 0), np.zeros((0, 0)))
            continue
        Q = pr.prec2[k]
        du = us[j0[k]:j1[k]] - pr.mean2[k, 0]
        dv = vs[i0[k]:i1[k]] - pr.mean2[k, 1]
        quad = (Q[0, 0] * du[None, :] ** 2
                + 2.0 * Q[0, 1] * du[None, :] * dv[:, None]
                + Q[1, 1] * dv[:, None] ** 2)
        patch = pr.amp[k] * np.exp(-0.5 * quad)
        img[i0[k]:i1[k], j0[k]:j1[k]] += patch
        if k in wanted:
            contribs[k] = (slice(i0[k], i1[k]), slice(j0[k], j1[k]), patch)
    return img, contribs


def render_backward(field: GaussianField, pose: ScannerPose, grad_image: np.ndarray,
                    cutoff: float | None = 3.0) -> dict:
    """Adjoint of render: pull an image gradient back onto field parameters.

    Returns per-primitive gradients for raw_density, position, log_scale and
    rotation, plus ``mean2`` (the gradient wrt each footprint center, used for
    densification statistics). The cone-beam path differentiates through the
    center-linearized Jacobian, so gradients match finite differences of the
    rendered forward model.
    """
    grad_image = np.asarray(grad_image, dtype=np.float64)
    if grad_image.shape != pose.det_shape:
        raise ValueError("gradient image does not match the pose detector")
    pr = _project_all(field, pose)
    i0, i1, j0, j1 = _footprint_boxes(pr, pose, cutoff)
    us = pose.detector_us()
    vs = pose.detector_vs()
    Wrot = pose.orientation
    m = len(field)
    s = field.scales()
    rho = field.densities()
    R = quat_to_rotmat(field.rotations)

    g_raw = np.zeros(m)
    g_pos = np.zeros((m, 3))
    g_ls = np.zeros((m, 3))
    g_rot = np.zeros((m, 4))
    g_mean2 = np.zeros((m, 2))

    for k in range(m):
        if not pr.contributing[k] or i0[k] >= i1[k] or j0[k] >= j1[k]:
            continue
        Q = pr.prec2[k]
        amp = pr.amp[k]
        du = (us[j0[k]:j1[k]] - pr.mean2[k, 0])[None, :]
        dv = (vs[i0[k]:i1[k]] - pr.mean2[k, 1])[:, None]
        e = np.exp(-0.5 * (Q[0, 0] * du ** 2 + 2 * Q[0, 1] * du * dv + Q[1, 1] * dv ** 2))
        Ge = grad_image[i0[k]:i1[k], j0[k]:j1[k]] * e
        s0 = Ge.sum()
        su = (Ge * du).sum(); sv = (Ge * dv).sum()
        suu = (Ge * du * du).sum(); suv = (Ge * du * dv).sum(); svv = (Ge * dv * dv).sum()

        dL_damp = s0
        dL_dmu2 = amp * (Q @ np.array([su, sv]))
        g_mean2[k] = dL_dmu2
        dL_dQ = -0.5 * amp * np.array([[suu, suv], [suv, svv]])
        dL_dcov2 = -Q @ dL_dQ @ Q
        dL_dcov2 += dL_damp * (-0.5 * amp) * Q  # amplitude's 1/sqrt|cov2| factor

        g_raw[k] = dL_damp * (amp / rho[k]) * softplus_deriv(field.raw_densities[k])

        Tk = pr.T[k]
        dL_dSig = Tk.T @ dL_dcov2 @ Tk
        Gs = 0.5 * (dL_dSig + dL_dSig.T)
        Mmat = R[k] * s[k]
        dL_dM = 2.0 * Gs @ Mmat
        g_ls[k] = dL_damp * amp + s[k] * np.diag(R[k].T @ dL_dM)
        dL_dR = dL_dM * s[k]
        Dq = quat_rotmat_derivs(field.rotations[k])
        g_unit = np.einsum("qij,ij->q", Dq, dL_dR)
        q = field.rotations[k]
        g_rot[k] = (np.eye(4) - np.outer(q, q)) @ g_unit

        if pose.beam == "parallel":
            g_pos[k] = Wrot[:2].T @ dL_dmu2
        else:
            D = float(pose.source_to_detector)
            x_, y_, z_ = pr.cam[k]
            J = Tk @ Wrot.T  # recover J = T W^T since W is orthonormal
            dL_dcam = J.T @ dL_dmu2
            Sig_c = Wrot @ (R[k] * s[k] ** 2) @ R[k].T @ Wrot.T
            dL_dJ = (dL_dcov2 + dL_dcov2.T) @ J @ Sig_c
            dL_dcam[0] += dL_dJ[0, 2] * (-D / z_ ** 2)
            dL_dcam[1] += dL_dJ[1, 2] * (-D / z_ ** 2)
            dL_dcam[2] += (dL_dJ[0, 0] * (-D / z_ ** 2) + dL_dJ[1, 1] * (-D / z_ ** 2)
                           + dL_dJ[0, 2] * (2 * D * x_ / z_ ** 3)
                           + dL_dJ[1, 2] * (2 * D * y_ / z_ ** 3))
            g_pos[k] = Wrot.T @ dL_dcam
    return {"raw_density": g_raw, "position": g_pos, "log_scale": g_ls,
            "rotation": g_rot, "mean2": g_mean2}


def fisher_diag(field: GaussianField, pose: ScannerPose,
                cutoff: float | None = 3.0) -> np.ndarray:
    """Per-parameter diagonal information: sum over pixels of (dI/dtheta)^2.

    Returns an (M, 11) array ordered raw_density, position (3), log_scale (3),
    rotation (4). Cone-beam position entries use the fixed-footprint
    approximation (the center-linearized Jacobian is not re-differentiated);
    parallel-beam entries are exact.
    """
    pr = _project_all(field, pose)
    i0, i1, j0, j1 = _footprint_boxes(pr, pose, cutoff)
    us = pose.detector_us()
    vs = pose.detector_vs()
    m = len(field)
    s = field.scales()
    rho = field.densities()
    R = quat_to_rotmat(field.rotations)
    out = np.zeros((m, 11))
    for k in range(m):
        if not pr.contributing[k] or i0[k] >= i1[k] or j0[k] >= j1[k]:
            continue
        Q = pr.prec2[k]
        amp = pr.amp[k]
        Tk = pr.T[k]
        du = (us[j0[k]:j1[k]] - pr.mean2[k, 0])[None, :]
        dv = (vs[i0[k]:i1[k]] - pr.mean2[k, 1])[:, None]
        e = np.exp(-0.5 * (Q[0, 0] * du ** 2 + 2 * Q[0, 1] * du * dv + Q[1, 1] * dv ** 2))
        e2 = e * e
        # density
        out[k, 0] = ((amp / rho[k]) * softplus_deriv(field.raw_densities[k])) ** 2 * e2.sum()
        # position: dI/dp = amp * e * (Q delta)^T T
        a_u = Q[0, 0] * du + Q[0, 1] * dv
        a_v = Q[0, 1] * du + Q[1, 1] * dv
        for c in range(3):
            comp = a_u * Tk[0, c] + a_v * Tk[1, c]
            out[k, 1 + c] = amp ** 2 * (e2 * comp ** 2).sum()
        # shared quadratic helper for covariance-path parameters
        def quad_term(B):
            C = Q @ B @ Q
            tr = Q[0, 0] * B[0, 0] + 2 * Q[0, 1] * B[0, 1] + Q[1, 1] * B[1, 1]
            return 0.5 * (C[0, 0] * du ** 2 + 2 * C[0, 1] * du * dv + C[1, 1] * dv ** 2) - 0.5 * tr
        # log scales: amplitude term 1 + covariance term
        for t in range(3):
            r_t = Tk @ R[k][:, t]
            B = 2.0 * s[k, t] ** 2 * np.outer(r_t, r_t)
            out[k, 4 + t] = amp ** 2 * (e2 * (1.0 + quad_term(B)) ** 2).sum()
        # rotation: covariance term only, projected through normalization
        Dq = quat_rotmat_derivs(field.rotations[k])
        S2 = s[k] ** 2
        per_pix = []
        for t in range(4):
            dSig = Dq[t] @ (R[k] * S2).T
            dSig = dSig + dSig.T
            B = Tk @ dSig @ Tk.T
            per_pix.append(quad_term(B))
        P4 = np.eye(4) - np.outer(field.rotations[k], field.rotations[k])
        stack = np.stack(per_pix)  # (4, h, w) wrt unit quaternion
        proj = np.einsum("tc,thw->chw", P4, stack)
        out[k, 7:11] = amp ** 2 * (e2[None] * proj ** 2).sum(axis=(1, 2))
    return out


def drr_oracle(grid: VoxelGrid, pose: ScannerPose, step: float) -> np.ndarray:
    """Digitally reconstructed radiograph by midpoint ray marching.

    Each pixel integrates trilinear samples of the grid along its ray, clipped
    to the grid extent, with per-sample weights equal to the covered segment
    length (the last sample covers the remainder). Sampling clamps to the
    outermost voxel centers, so a constant grid integrates to value * chord
    length exactly. Converges to the continuous line integral as step -> 0.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    H, W = pose.det_shape
    us = pose.detector_us()
    vs = pose.detector_vs()
    uu, vv = np.meshgrid(us, vs)  # (H, W)
    Wrot = pose.orientation
    u_ax, v_ax, w_ax = Wrot[0], Wrot[1], Wrot[2]
    n = H * W
    if pose.beam == "parallel":
        origins = (pose.eye[None, :] + uu.reshape(-1, 1) * u_ax + vv.reshape(-1, 1) * v_ax)
        dirs = np.broadcast_to(w_ax, (n, 3))
        t_floor = None
    else:
        D = float(pose.source_to_detector)
        origins = np.broadcast_to(pose.eye, (n, 3))
        dirs = D * w_ax + uu.reshape(-1, 1) * u_ax + vv.reshape(-1, 1) * v_ax
        dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        t_floor = 0.0

    lo = grid.world_lo
    hi = grid.world_hi
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo[None, :] - origins) * inv
        t1 = (hi[None, :] - origins) * inv
    # axis-parallel rays: ignore the degenerate axis unless the origin misses the slab
    for ax in range(3):
        flat = dirs[:, ax] == 0
        if np.any(flat):
            inside = (origins[flat, ax] >= lo[ax]) & (origins[flat, ax] <= hi[ax])
            t0[flat, ax] = np.where(inside, -np.inf, np.inf)
            t1[flat, ax] = np.where(inside, np.inf, -np.inf)
    t_near = np.minimum(t0, t1).max(axis=1)
    t_far = np.maximum(t0, t1).min(axis=1)
    if t_floor is not None:
        t_near = np.maximum(t_near, t_floor)
    length = np.maximum(t_far - t_near, 0.0)
    hit = length > 0
    img = np.zeros(n)
    if np.any(hit):
        n_hit = int(hit.sum())
        n_steps = int(np.ceil(length[hit].max() / step))
        o = origins[hit]
        d = dirs[hit]
        tn = t_near[hit]
        ln = length[hit]
        acc = np.zeros(n_hit)
        # chunk the march so the coordinate buffer stays bounded
        chunk = max(1, int(2e6 // max(n_hit, 1)))
        for c0 in range(0, n_steps, chunk):
            ks = np.arange(c0, min(c0 + chunk, n_steps), dtype=np.float64)
            w = np.clip(ln[:, None] - ks[None, :] * step, 0.0, step)  # (n_hit, kc)
            t = tn[:, None] + ks[None, :] * step + 0.5 * w
            pts = o[:, None, :] + t[:, :, None] * d[:, None, :]
            idx = (pts - grid.origin) / grid.spacing
            coords = idx.reshape(-1, 3).T
            samp = map_coordinates(np.asarray(grid.values, dtype=np.float64), coords,
                                   order=1, mode="nearest")
            acc += (samp.reshape(n_hit, -1) * w).sum(axis=1)
        img[hit] = acc
    return img.reshape(H, W)


def save_projection_set(directory, images, poses, log_space: bool = True) -> None:
    """Write a projection set: one little-endian float32 file per image + sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if len(images) != len(poses):
        raise ValueError("images and poses disagree on length")
    files = []
    for i, (img, pose) in enumerate(zip(images, poses)):
        img = np.asarray(img)
        if img.shape != pose.det_shape:
            raise ValueError(f"image {i} shape {img.shape} != detector {pose.det_shape}")
        name = f"proj_{i:04d}.bin"
        (directory / name).write_bytes(img.astype("<f4").tobytes())
        files.append(name)
    sidecar = {
        "format_version": POSE_FORMAT_VERSION,
        "log_space": bool(log_space),
        "poses": [p.to_dict() for p in poses],
        "image_files": files,
    }
    (directory / "projections.json").write_text(json.dumps(sidecar, sort_keys=True, indent=1))


def load_projection_set(directory):
    directory = Path(directory)
    sidecar = json.loads((directory / "projections.json").read_text())
    if sidecar.get("format_version") != POSE_FORMAT_VERSION:
        raise ValueError(f"unsupported projection set version {sidecar.get('format_version')!r}")
    poses = [ScannerPose.from_dict(d) for d in sidecar["poses"]]
    images = []
    for pose, name in zip(poses, sidecar["image_files"]):
        raw = (directory / name).read_bytes()
        img = np.frombuffer(raw, dtype="<f4").reshape(pose.det_shape)
        images.append(img)
    return images, poses


def export_png(image: np.ndarray, path) -> None:
    """Min-max normalized 16-bit PNG for visual inspection (lossy, write-only)."""
    from PIL import Image

    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scale = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    Image.fromarray((scale * 65535.0).round().astype(np.uint16)).save(str(path))

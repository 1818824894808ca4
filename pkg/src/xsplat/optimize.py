"""Fitting a Gaussian field to measured projections.

The objective per view is

    total = mean|I_r - I_m| + lambda_ssim * (1 - SSIM(I_r, I_m)) / 2
            + lambda_tv * TV(voxelized field)

with TV the mean absolute difference over axis-adjacent voxel pairs of a
coarse voxelization. Gradients are fully analytic (renderer adjoint, SSIM
adjoint, voxelizer adjoint) and are checked against central finite
differences in the test suite. Updates use adaptive moments with bias
correction per parameter group, followed by quaternion renormalization.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np

from .field import (GaussianField, VoxelGrid, save_field, softplus,
                    softplus_inverse, voxelize, voxelize_backward)
from .projection import ScannerPose, render, render_backward
from .ssim import dssim, ssim_with_grad

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


@dataclass
class LossBreakdown:
    l1: float
    dssim: float
    tv: float
    total: float
    lambda_ssim: float
    lambda_tv: float


@dataclass
class TrainConfig:
    iterations: int = 3000
    lr_density: float = 0.02
    lr_position: float = 2e-3
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    position_lr_gamma: float = 1.0  # per-iteration exponential decay, 1 = constant
    lambda_ssim: float = 0.25
    lambda_tv: float = 0.05
    tv_grid_dims: tuple = (32, 32, 32)
    tv_cutoff: float | None = 3.0
    render_cutoff: float | None = 3.0
    densify_interval: int = 250
    densify_grad_threshold: float = 2e-4
    densify_stop_iteration: int = 2500
    split_extent_fraction: float = 0.01
    prune_density_floor: float = 1e-6
    dynamic_range: float | None = None  # None: max pixel of the measured set
    checkpoint_interval: int = 0  # 0 disables periodic checkpoints
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for name in ("lr_density", "lr_position", "lr_scale", "lr_rotation"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        self.tv_grid_dims = tuple(int(d) for d in self.tv_grid_dims)


@dataclass
class ParamGrads:
    raw_density: np.ndarray
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray

    @classmethod
    def zeros(cls, m: int) -> "ParamGrads":
        return cls(np.zeros(m), np.zeros((m, 3)), np.zeros((m, 3)), np.zeros((m, 4)))

    def add_(self, other: "ParamGrads", scale: float = 1.0) -> None:
        self.raw_density += scale * other.raw_density
        self.position += scale * other.position
        self.log_scale += scale * other.log_scale
        self.rotation += scale * other.rotation


def total_variation(values: np.ndarray) -> float:
    """Mean absolute difference over axis-adjacent cell pairs of a 3D array."""
    values = np.asarray(values, dtype=np.float64)
    dims = values.shape
    pairs = sum((dims[ax] - 1) * dims[(ax + 1) % 3] * dims[(ax + 2) % 3] for ax in range(3))
    if pairs == 0:
        return 0.0
    acc = 0.0
    for ax in range(3):
        acc += np.abs(np.diff(values, axis=ax)).sum()
    return float(acc / pairs)


def total_variation_grad(values: np.ndarray) -> np.ndarray:
    """Subgradient of total_variation wrt the cell values (sign convention 0 at ties)."""
    values = np.asarray(values, dtype=np.float64)
    dims = values.shape
    pairs = sum((dims[ax] - 1) * dims[(ax + 1) % 3] * dims[(ax + 2) % 3] for ax in range(3))
    grad = np.zeros_like(values)
    if pairs == 0:
        return grad
    for ax in range(3):
        sl_hi = [slice(None)] * 3
        sl_lo = [slice(None)] * 3
        sl_hi[ax] = slice(1, None)
        sl_lo[ax] = slice(None, -1)
        s = np.sign(np.diff(values, axis=ax))
        grad[tuple(sl_hi)] += s
        grad[tuple(sl_lo)] -= s
    return grad / pairs


def _tv_grid(field: GaussianField, cfg: TrainConfig) -> VoxelGrid:
    return voxelize(field, cfg.tv_grid_dims, cutoff=cfg.tv_cutoff)


def _dynamic_range_of(measured_images, cfg: TrainConfig) -> float:
    if cfg.dynamic_range is not None:
        return float(cfg.dynamic_range)
    peak = max(float(np.max(m)) for m in measured_images)
    return peak if peak > 0 else 1.0


def loss(rendered: np.ndarray, measured: np.ndarray, field: GaussianField,
         cfg: TrainConfig, tv_grid: VoxelGrid | None = None) -> LossBreakdown:
    """Single-view loss breakdown. total = l1 + lambda_ssim*dssim + lambda_tv*tv."""
    rendered = np.asarray(rendered, dtype=np.float64)
    measured = np.asarray(measured, dtype=np.float64)
    if rendered.shape != measured.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {measured.shape}")
    l1 = float(np.mean(np.abs(rendered - measured)))
    L = _dynamic_range_of([measured], cfg)
    ds = dssim(rendered, measured, L)
    if tv_grid is None:
        tv_grid = _tv_grid(field, cfg)
    tv = total_variation(tv_grid.values)
    total = l1 + cfg.lambda_ssim * ds + cfg.lambda_tv * tv
    return LossBreakdown(l1, ds, tv, total, cfg.lambda_ssim, cfg.lambda_tv)


def _image_gradient(rendered, measured, cfg, dynamic_range):
    """d(l1 + lambda_ssim * dssim)/d rendered for one view."""
    diff = rendered - measured
    g = np.sign(diff) / diff.size
    if cfg.lambda_ssim != 0.0:
        _, gs = ssim_with_grad(rendered, measured, dynamic_range)
        g = g + cfg.lambda_ssim * (-0.5) * gs
    return g


def _tv_param_grads(field: GaussianField, cfg: TrainConfig) -> ParamGrads:
    grid = _tv_grid(field, cfg)
    gv = total_variation_grad(grid.values)
    d = voxelize_backward(field, grid, gv, cutoff=cfg.tv_cutoff)
    return ParamGrads(d["raw_density"], d["position"], d["log_scale"], d["rotation"])


def gradients(field: GaussianField, views, cfg: TrainConfig) -> ParamGrads:
    """Analytic gradient of the summed per-view loss wrt every field parameter.

    ``views`` is a sequence of (pose, measured image). The TV term appears in
    every per-view loss, so its gradient is scaled by the view count.
    """
    views = list(views)
    if not views:
        raise ValueError("views must be non-empty")
    L = _dynamic_range_of([m for _, m in views], cfg)
    out = ParamGrads.zeros(len(field))
    for pose, measured in views:
        rendered = render(field, pose, cutoff=cfg.render_cutoff)
        gimg = _image_gradient(rendered, np.asarray(measured, dtype=np.float64), cfg, L)
        d = render_backward(field, pose, gimg, cutoff=cfg.render_cutoff)
        out.add_(ParamGrads(d["raw_density"], d["position"], d["log_scale"], d["rotation"]))
    if cfg.lambda_tv != 0.0:
        out.add_(_tv_param_grads(field, cfg), scale=cfg.lambda_tv * len(views))
    return out


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def zeros(cls, m_count: int) -> "AdamState":
        shapes = {"raw_density": (m_count,), "position": (m_count, 3),
                  "log_scale": (m_count, 3), "rotation": (m_count, 4)}
        return cls(0, {k: np.zeros(s) for k, s in shapes.items()},
                   {k: np.zeros(s) for k, s in shapes.items()})

    def remap(self, keep: np.ndarray, n_new: int) -> "AdamState":
        """Rows for surviving primitives are kept; appended rows start at zero."""
        def rm(a):
            out = np.zeros((len(keep) + n_new,) + a.shape[1:])
            out[: len(keep)] = a[keep]
            return out
        return AdamState(self.step, {k: rm(v) for k, v in self.m.items()},
                         {k: rm(v) for k, v in self.v.items()})


def adam_step(field: GaussianField, grads: ParamGrads, state: AdamState,
              cfg: TrainConfig, iteration: int | None = None):
    """One adaptive-moment update in place; quaternions are renormalized after.

    Returns the (mutated) field and state. ``iteration`` only feeds the
    optional exponential position-lr decay.
    """
    state.step += 1
    t = state.step
    lrs = {"raw_density": cfg.lr_density, "position": cfg.lr_position,
           "log_scale": cfg.lr_scale, "rotation": cfg.lr_rotation}
    if cfg.position_lr_gamma != 1.0 and iteration is not None:
        lrs["position"] *= cfg.position_lr_gamma ** iteration
    params = {"raw_density": field.raw_densities, "position": field.positions,
              "log_scale": field.log_scales, "rotation": field.rotations}
    gvals = {"raw_density": grads.raw_density, "position": grads.position,
             "log_scale": grads.log_scale, "rotation": grads.rotation}
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for key, p in params.items():
        g = gvals[key]
        state.m[key] = ADAM_BETA1 * state.m[key] + (1 - ADAM_BETA1) * g
        state.v[key] = ADAM_BETA2 * state.v[key] + (1 - ADAM_BETA2) * g * g
        m_hat = state.m[key] / bc1
        v_hat = state.v[key] / bc2
        p -= lrs[key] * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    norms = np.linalg.norm(field.rotations, axis=1, keepdims=True)
    field.rotations /= norms
    return field, state


def densify_and_prune(field: GaussianField, accum_grad_norm: np.ndarray,
                      cfg: TrainConfig, return_keep: bool = False):
    """Clone/split high-gradient primitives and prune weak or escaped ones.

    Primitives whose mean footprint-center gradient exceeds the threshold are
    cloned when small or split in two when their extent passes the split
    fraction of the scene extent. Splits shrink scales by 1/1.6 and clones
    duplicate in place; in both cases activated densities are rebalanced so
    the expected kernel mass is conserved, which keeps the rendered images
    unchanged at the moment of densification. Primitives below the density
    floor or outside the bounds are removed; the field is never emptied.
    """
    m = len(field)
    accum = np.asarray(accum_grad_norm, dtype=np.float64).reshape(m)
    rho = field.densities()
    inside = field.bounds.contains(field.positions)
    keep = (rho >= cfg.prune_density_floor) & inside
    if not np.any(keep):
        keep[int(np.argmax(rho))] = True

    scene_extent = float(np.max(field.bounds.extent))
    extent = field.scales().max(axis=1)
    hot = keep & (accum > cfg.densify_grad_threshold)
    split_mask = hot & (extent > cfg.split_extent_fraction * scene_extent)
    clone_mask = hot & ~split_mask

    keep_idx = np.flatnonzero(keep)
    raw = field.raw_densities[keep_idx].copy()
    pos = field.positions[keep_idx].copy()
    ls = field.log_scales[keep_idx].copy()
    rot = field.rotations[keep_idx].copy()

    kept_clone = clone_mask[keep_idx]
    kept_split = split_mask[keep_idx]

    new_raw, new_pos, new_ls, new_rot = [], [], [], []
    if np.any(kept_clone):
        # halve both copies: two coincident kernels at rho/2 render like the parent
        half = softplus_inverse(0.5 * softplus(raw[kept_clone]))
        raw[kept_clone] = half
        new_raw.append(half)
        new_pos.append(pos[kept_clone])
        new_ls.append(ls[kept_clone])
        new_rot.append(rot[kept_clone])
    if np.any(kept_split):
        idx = np.flatnonzero(kept_split)
        from .geometry import quat_to_rotmat
        R = quat_to_rotmat(rot[idx])
        s = np.exp(ls[idx])
        widest = np.argmax(s, axis=1)
        axes = R[np.arange(len(idx)), :, widest]
        offset = 0.5 * s[np.arange(len(idx)), widest][:, None] * axes
        child_ls = ls[idx] - np.log(1.6)
        # two children at scale/1.6: density * 1.6^3 / 2 conserves expected mass
        child_raw = softplus_inverse(softplus(raw[idx]) * (1.6 ** 3) / 2.0)
        first_pos = pos[idx] + offset
        pos[idx] = pos[idx] - offset
        raw[idx] = child_raw
        ls[idx] = child_ls
        new_raw.append(child_raw)
        new_pos.append(first_pos)
        new_ls.append(child_ls)
        new_rot.append(rot[idx])

    if new_raw:
        raw = np.concatenate([raw] + new_raw)
        pos = np.concatenate([pos] + new_pos)
        ls = np.concatenate([ls] + new_ls)
        rot = np.concatenate([rot] + new_rot)
    out = GaussianField(raw, pos, ls, rot, field.bounds)
    if return_keep:
        return out, keep_idx, len(raw) - len(keep_idx)
    return out


def _pick_view_index(seed: int, iteration: int, n_views: int) -> int:
    """Counter-based draw so resuming training never shifts earlier choices."""
    gen = np.random.Generator(np.random.Philox(key=np.array(
        [seed & 0xFFFFFFFFFFFFFFFF, iteration & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)))
    return int(gen.integers(n_views))


def train(field: GaussianField, views, cfg: TrainConfig,
          start_iteration: int, end_iteration: int,
          state: AdamState | None = None,
          log_rows: list | None = None,
          checkpoint_dir=None,
          densify_accum: np.ndarray | None = None,
          densify_count: int = 0):
    """Run render -> loss -> gradients -> update for a span of iterations.

    One seeded random training view is used per iteration. Densify/prune runs
    at the configured interval until the stop iteration; periodic checkpoints
    (``ckpt_{iteration}.bin``) are written when a directory is given. Returns
    (field, state, densify_accum, densify_count) so progressive training can
    resume where it left off. Raises on a non-finite loss.
    """
    views = list(views)
    if not views:
        raise ValueError("views must be non-empty")
    if state is None:
        state = AdamState.zeros(len(field))
    if densify_accum is None:
        densify_accum = np.zeros(len(field))
    L = _dynamic_range_of([m for _, m in views], cfg)
    half_extent = 0.5 * float(views[0][0].pixel_pitch * max(views[0][0].det_shape))

    for it in range(start_iteration, end_iteration):
        pose, measured = views[_pick_view_index(cfg.seed, it, len(views))]
        measured = np.asarray(measured, dtype=np.float64)
        rendered = render(field, pose, cutoff=cfg.render_cutoff)

        l1 = float(np.mean(np.abs(rendered - measured)))
        sval, sgrad = ssim_with_grad(rendered, measured, L)
        ds = 0.5 * (1.0 - sval)
        tv_grid = _tv_grid(field, cfg)
        tv = total_variation(tv_grid.values)
        total = l1 + cfg.lambda_ssim * ds + cfg.lambda_tv * tv
        if not np.isfinite(total):
            raise RuntimeError(
                f"non-finite loss at iteration {it}: l1={l1} dssim={ds} tv={tv}; "
                "a divergent learning rate is the usual cause")

        gimg = np.sign(rendered - measured) / measured.size
        gimg += cfg.lambda_ssim * (-0.5) * sgrad
        d = render_backward(field, pose, gimg, cutoff=cfg.render_cutoff)
        grads = ParamGrads(d["raw_density"], d["position"], d["log_scale"], d["rotation"])
        if cfg.lambda_tv != 0.0:
            gv = total_variation_grad(tv_grid.values)
            dtv = voxelize_backward(field, tv_grid, gv, cutoff=cfg.tv_cutoff)
            grads.add_(ParamGrads(dtv["raw_density"], dtv["position"],
                                  dtv["log_scale"], dtv["rotation"]), scale=cfg.lambda_tv)

        # footprint-center gradient in detector-NDC units drives densification
        densify_accum += np.linalg.norm(d["mean2"], axis=1) * half_extent
        densify_count += 1

        field, state = adam_step(field, grads, state, cfg, iteration=it)

        if log_rows is not None:
            log_rows.append((it, l1, ds, tv, total, len(field)))

        done = it + 1
        if (cfg.densify_interval > 0 and done % cfg.densify_interval == 0
                and done <= cfg.densify_stop_iteration):
            mean_accum = densify_accum / max(densify_count, 1)
            field, keep_idx, n_new = densify_and_prune(field, mean_accum, cfg, return_keep=True)
            state = state.remap(keep_idx, n_new)
            densify_accum = np.zeros(len(field))
            densify_count = 0

        if checkpoint_dir is not None and cfg.checkpoint_interval > 0 \
                and done % cfg.checkpoint_interval == 0:
            save_field(field, Path(checkpoint_dir) / f"ckpt_{done}.bin")

    return field, state, densify_accum, densify_count


def write_train_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "l1", "dssim", "tv", "total", "num_primitives"])
        for r in rows:
            w.writerow([r[0], f"{r[1]:.10g}", f"{r[2]:.10g}", f"{r[3]:.10g}",
                        f"{r[4]:.10g}", r[5]])

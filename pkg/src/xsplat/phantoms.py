"""Synthetic phantoms and simulated scan datasets.

Phantoms are 64^3-by-default density volumes over the canonical [-1, 1]^3
scene box. Datasets pair a ground-truth grid with a pose list and the
ray-marched projections of every pose, stored as float32 so that persisting
and reloading is bit-exact. Every artifact carries enough provenance
(spec, seed, checksums) to be regenerated and verified.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .field import VoxelGrid
from .geometry import AABB, derive_seed, quat_to_rotmat
from .projection import ScannerPose, drr_oracle

DATASET_FORMAT_VERSION = 1
PHANTOM_KINDS = ("nested-ellipsoids", "random-blobs", "single-gaussian")
_KIND_ALIASES = {
    "nestedellipsoids": "nested-ellipsoids",
    "randomblobs": "random-blobs",
    "singlegaussian": "single-gaussian",
}


class DatasetError(Exception):
    """Raised when a persisted dataset cannot be loaded faithfully."""


class ChecksumError(DatasetError):
    pass


class VersionError(DatasetError):
    pass


def canonical_kind(kind: str) -> str:
    k = kind.strip().lower().replace("_", "-")
    k = _KIND_ALIASES.get(k.replace("-", ""), k)
    if k not in PHANTOM_KINDS:
        raise ValueError(f"unknown phantom kind {kind!r}; expected one of {PHANTOM_KINDS}")
    return k


@dataclass
class PhantomSpec:
    kind: str = "nested-ellipsoids"
    dims: tuple = (64, 64, 64)
    feature_count: int = 3
    density_min: float = 0.2
    density_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.kind = canonical_kind(self.kind)
        self.dims = tuple(int(d) for d in self.dims)
        if any(d < 1 for d in self.dims):
            raise ValueError("dims must be positive")
        if self.feature_count < 1:
            raise ValueError("feature_count must be >= 1")
        if not 0 <= self.density_min < self.density_max:
            raise ValueError("need 0 <= density_min < density_max")


def scene_bounds() -> AABB:
    return AABB(np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))


def _grid_coords(spec: PhantomSpec):
    grid = VoxelGrid.for_bounds(scene_bounds(), spec.dims)
    axes = [grid.axis_centers(a) for a in range(3)]
    return grid, axes


def make_phantom(spec: PhantomSpec) -> VoxelGrid:
    """Deterministic synthetic volume; values are float32 in [0, density_max]."""
    grid, (xs, ys, zs) = _grid_coords(spec)
    rng = np.random.default_rng(derive_seed(spec.seed, f"phantom-{spec.kind}"))
    X = xs[:, None, None]
    Y = ys[None, :, None]
    Z = zs[None, None, :]
    vals = np.zeros(spec.dims)

    if spec.kind == "single-gaussian":
        center = rng.uniform(-0.15, 0.15, 3)
        sigma = rng.uniform(0.25, 0.4, 3)
        q = (X - center[0]) ** 2 / sigma[0] ** 2 \
            + (Y - center[1]) ** 2 / sigma[1] ** 2 \
            + (Z - center[2]) ** 2 / sigma[2] ** 2
        vals = spec.density_max * np.exp(-0.5 * q)

    elif spec.kind == "nested-ellipsoids":
        # layered object: low boundary skin, high "bone" shell, interior levels
        center = rng.uniform(-0.08, 0.08, 3)
        semi = rng.uniform(0.72, 0.9, 3)
        lo, hi = spec.density_min, spec.density_max
        fracs = [0.25, 1.0, 0.55, 0.85, 0.4, 0.7, 0.3]
        shrink = 0.74
        for layer in range(spec.feature_count):
            axes = semi * shrink ** layer
            level = lo + fracs[layer % len(fracs)] * (hi - lo)
            inside = ((X - center[0]) ** 2 / axes[0] ** 2
                      + (Y - center[1]) ** 2 / axes[1] ** 2
                      + (Z - center[2]) ** 2 / axes[2] ** 2) <= 1.0
            vals = np.where(inside, level, vals)

    elif spec.kind == "random-blobs":
        for _ in range(spec.feature_count):
            center = rng.uniform(-0.6, 0.6, 3)
            sigma = rng.uniform(0.08, 0.3, 3)
            amp = rng.uniform(0.3, 1.0)
            R = quat_to_rotmat(rng.normal(size=4))
            d = np.stack(np.broadcast_arrays(X - center[0], Y - center[1],
                                             Z - center[2]), axis=-1)
            local = d @ R  # rotate into the blob frame
            q = (local[..., 0] / sigma[0]) ** 2 \
                + (local[..., 1] / sigma[1]) ** 2 \
                + (local[..., 2] / sigma[2]) ** 2
            vals = vals + amp * np.exp(-0.5 * q)
        vals *= spec.density_max / max(float(vals.max()), 1e-12)

    if float(vals.max()) <= 0:
        raise RuntimeError("phantom generation produced an empty volume")
    grid.values = vals.astype(np.float32)
    return grid


@dataclass
class ScanDataset:
    grid: VoxelGrid
    poses: list
    projections: list
    noise_sigma: float = 0.0
    meta: dict | None = None

    def __post_init__(self):
        if len(self.poses) != len(self.projections):
            raise ValueError("poses and projections disagree on length")
        for i, (pose, img) in enumerate(zip(self.poses, self.projections)):
            if np.asarray(img).shape != pose.det_shape:
                raise ValueError(f"projection {i} does not match its pose detector")


def simulate_scan(grid: VoxelGrid, poses, step: float, noise_sigma: float = 0.0,
                  seed: int = 0, threads: int = 1) -> ScanDataset:
    """Ray-march every pose through the grid; optional clamped Gaussian noise.

    Projections regenerate bit-identically from (grid, poses, step, seed):
    noise is drawn per pose from a counter-based stream and images are stored
    as float32.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if noise_sigma < 0:
        raise ValueError("noise sigma must be >= 0")
    poses = list(poses)

    def one(i):
        img = drr_oracle(grid, poses[i], step)
        if noise_sigma > 0:
            gen = np.random.Generator(np.random.Philox(key=np.array(
                [derive_seed(seed, "scan-noise"), i], dtype=np.uint64)))
            img = np.clip(img + gen.normal(0.0, noise_sigma, img.shape), 0.0, None)
        return img.astype(np.float32)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            projections = list(ex.map(one, range(len(poses))))
    else:
        projections = [one(i) for i in range(len(poses))]
    meta = {"step": float(step), "noise_sigma": float(noise_sigma), "seed": int(seed)}
    return ScanDataset(grid, poses, projections, noise_sigma, meta)


def _sha256(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def save_dataset(ds: ScanDataset, directory, phantom_spec: PhantomSpec | None = None) -> None:
    """Persist a dataset directory with per-file checksums in the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    checksums = {}

    vol_bytes = np.asarray(ds.grid.values, dtype="<f4").tobytes()
    (directory / "gt_volume.bin").write_bytes(vol_bytes)
    checksums["gt_volume.bin"] = _sha256(vol_bytes)
    (directory / "gt_volume.json").write_text(json.dumps({
        "dims": list(ds.grid.dims),
        "origin": ds.grid.origin.tolist(),
        "spacing": ds.grid.spacing.tolist(),
    }, sort_keys=True, indent=1))

    (directory / "poses.json").write_text(json.dumps(
        {"poses": [p.to_dict() for p in ds.poses]}, sort_keys=True, indent=1))

    names = []
    for i, img in enumerate(ds.projections):
        name = f"proj_{i:04d}.bin"
        payload = np.asarray(img, dtype="<f4").tobytes()
        (directory / name).write_bytes(payload)
        checksums[name] = _sha256(payload)
        names.append(name)

    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "phantom_spec": asdict(phantom_spec) if phantom_spec else None,
        "meta": ds.meta or {},
        "noise_sigma": float(ds.noise_sigma),
        "projection_files": names,
        "checksums": checksums,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def load_dataset(directory) -> ScanDataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise VersionError(f"dataset format_version {version!r} is not supported "
                           f"(supported: {DATASET_FORMAT_VERSION})")
    checksums = manifest["checksums"]

    def read_checked(name: str) -> bytes:
        path = directory / name
        if not path.exists():
            raise DatasetError(f"missing dataset file {name}")
        payload = path.read_bytes()
        if _sha256(payload) != checksums.get(name):
            raise ChecksumError(f"checksum mismatch for {name}")
        return payload

    vol_meta = json.loads((directory / "gt_volume.json").read_text())
    dims = tuple(vol_meta["dims"])
    values = np.frombuffer(read_checked("gt_volume.bin"), dtype="<f4").reshape(dims)
    grid = VoxelGrid(dims, np.array(vol_meta["origin"]), np.array(vol_meta["spacing"]),
                     values)
    poses = [ScannerPose.from_dict(d)
             for d in json.loads((directory / "poses.json").read_text())["poses"]]
    projections = []
    for pose, name in zip(poses, manifest["projection_files"]):
        img = np.frombuffer(read_checked(name), dtype="<f4").reshape(pose.det_shape)
        projections.append(img)
    if len(projections) != len(poses):
        raise DatasetError("manifest projection count disagrees with poses.json")
    return ScanDataset(grid, poses, projections,
                       float(manifest.get("noise_sigma", 0.0)), manifest.get("meta"))

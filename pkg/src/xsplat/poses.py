"""Object-centric scanner pose generation on concentric hemispheres.

Candidate sources sit on golden-angle (Fibonacci) lattices over the upper
hemisphere of each configured radius, every optical axis aimed at the volume
center. Test views are area-uniform random draws on the inner hemisphere.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .geometry import derive_seed, fibonacci_hemisphere, great_circle_distance, look_at_rows
from .projection import POSE_FORMAT_VERSION, ScannerPose


@dataclass
class PoolSpec:
    poses_per_hemisphere: int = 224
    radii: tuple = (2.5, 3.125)
    det_height: int = 64
    det_width: int = 64
    pixel_pitch: float = 3.0 / 64
    beam: str = "parallel"
    source_to_detector: float | None = None
    test_view_count: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.poses_per_hemisphere < 1:
            raise ValueError("poses_per_hemisphere must be >= 1")
        self.radii = tuple(float(r) for r in self.radii)
        if not self.radii or any(r <= 0 for r in self.radii):
            raise ValueError("radii must be positive")
        if self.test_view_count < 0:
            raise ValueError("test_view_count must be >= 0")

    @property
    def pool_size(self) -> int:
        return self.poses_per_hemisphere * len(self.radii)


def _make_pose(spec: PoolSpec, eye, center) -> ScannerPose:
    return ScannerPose(
        orientation=look_at_rows(eye, center),
        eye=eye,
        beam=spec.beam,
        source_to_detector=spec.source_to_detector,
        det_height=spec.det_height,
        det_width=spec.det_width,
        pixel_pitch=spec.pixel_pitch,
    )


def generate_pool(spec: PoolSpec, center) -> list:
    """Candidate pool: poses_per_hemisphere lattice poses per radius, aimed at center."""
    center = np.asarray(center, dtype=np.float64).reshape(3)
    dirs = fibonacci_hemisphere(spec.poses_per_hemisphere)
    pool = []
    for radius in spec.radii:
        for d in dirs:
            pool.append(_make_pose(spec, center + radius * d, center))
    return pool


def generate_test_views(spec: PoolSpec, center) -> list:
    """Seeded area-uniform poses on the inner-radius hemisphere (z >= center z)."""
    center = np.asarray(center, dtype=np.float64).reshape(3)
    rng = np.random.default_rng(derive_seed(spec.seed, "test-views"))
    radius = min(spec.radii)
    poses = []
    for _ in range(spec.test_view_count):
        z = rng.uniform(0.0, 1.0)
        az = rng.uniform(0.0, 2.0 * np.pi)
        r = np.sqrt(max(1.0 - z * z, 0.0))
        d = np.array([r * np.cos(az), r * np.sin(az), z])
        poses.append(_make_pose(spec, center + radius * d, center))
    return poses


def _pool_directions(pool, center) -> np.ndarray:
    center = np.asarray(center, dtype=np.float64)
    dirs = np.stack([p.eye - center for p in pool])
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def pick_initial_views(pool, count: int, strategy: str = "max-separated",
                       seed: int = 0, center=None) -> list:
    """Choose the indices of the initial acquisitions.

    The default strategy starts from the most separated pair among the
    inner-radius poses (brute-force pairwise great-circle distance, ties by
    index) and extends greedily farthest-first when more than two are asked
    for. Alternatives: "first" takes the first ``count`` pool indices and
    "random" draws them with the given seed.
    """
    if count < 0 or count > len(pool):
        raise ValueError("count must be between 0 and the pool size")
    if count == 0:
        return []
    if strategy == "first":
        return list(range(count))
    if strategy == "random":
        rng = np.random.default_rng(derive_seed(seed, "initial-views"))
        return sorted(int(i) for i in rng.choice(len(pool), size=count, replace=False))
    if strategy != "max-separated":
        raise ValueError(f"unknown strategy {strategy!r}")

    if center is None:
        center = np.zeros(3)
    dirs = _pool_directions(pool, center)
    radii = np.array([np.linalg.norm(p.eye - np.asarray(center, dtype=np.float64))
                      for p in pool])
    inner = np.flatnonzero(np.isclose(radii, radii.min(), rtol=1e-9, atol=1e-12))
    if count == 1:
        return [int(inner[0])]
    d = great_circle_distance(dirs[inner], dirs[inner])
    np.fill_diagonal(d, -1.0)
    flat = int(np.argmax(d))  # first occurrence gives the lowest-index tie-break
    a, b = np.unravel_index(flat, d.shape)
    chosen = [int(inner[min(a, b)]), int(inner[max(a, b)])]
    while len(chosen) < count:
        mind = great_circle_distance(dirs, dirs[chosen]).min(axis=1)
        mind[chosen] = -1.0
        chosen.append(int(np.argmax(mind)))
    return chosen


def save_pool(pool, path) -> None:
    doc = {"format_version": POSE_FORMAT_VERSION, "poses": [p.to_dict() for p in pool]}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1))


def load_pool(path) -> list:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != POSE_FORMAT_VERSION:
        raise ValueError(f"unsupported pool format_version {doc.get('format_version')!r}")
    return [ScannerPose.from_dict(d) for d in doc["poses"]]

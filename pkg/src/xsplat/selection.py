"""Active view selection by density-perturbed ensemble disagreement.

A fraction alpha of the kernels with the lowest activated density is scaled
multiplicatively by independent factors (1 + eps), eps ~ Uniform(-beta, beta),
once per selection round. The N perturbed variants are never materialized as
field copies: members are overlays of the base render plus rescaled per-kernel
patches, so everything outside the perturbed subset stays bitwise identical.
Each candidate pose is scored by the unbiased sample variance of a
disagreement metric (SSIM by default; L1 and PSNR variants for ablations)
between the base render and each member render, and the candidate with the
highest variance wins. Random, farthest-point, and diagonal-information
baselines share the same bookkeeping.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import GaussianField
from .geometry import derive_seed, great_circle_distance
from .projection import ScannerPose, fisher_diag, render_with_contributions
from .ssim import ssim

METRICS = ("ssim", "l1", "psnr")
# PSNR disagreement floors the MSE at (1e-9 * L)^2 so that vanishing
# perturbations give identical (finite) scores and zero variance
_PSNR_REL_FLOOR = 1e-9
FISHER_REGULARIZER = 1e-6


@dataclass
class EnsembleSpec:
    ensemble_size: int = 10
    perturb_fraction: float = 0.10
    scale_amplitude: float = 0.5
    rng_seed: int = 0
    disagreement_metric: str = "ssim"

    def __post_init__(self):
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        if not 0.0 < self.perturb_fraction <= 1.0:
            raise ValueError("perturb_fraction must be in (0, 1]")
        if self.scale_amplitude <= 0:
            raise ValueError("scale_amplitude must be positive")
        metric = self.disagreement_metric.lower()
        if metric not in METRICS:
            raise ValueError(f"disagreement_metric must be one of {METRICS}")
        self.disagreement_metric = metric


@dataclass
class PerturbedEnsemble:
    """Overlay ensemble: base field reference + density multipliers on a subset."""
    field: GaussianField
    subset_indices: np.ndarray
    multipliers: np.ndarray  # (N, |subset|), each in [1 - beta, 1 + beta]
    round_index: int
    spec: EnsembleSpec


def select_low_density_subset(field: GaussianField, alpha: float) -> np.ndarray:
    """Indices of the ceil(alpha*M) lowest activated densities, ties by index."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must be in (0, 1]")
    m = len(field)
    k = int(np.ceil(alpha * m))
    order = np.argsort(field.densities(), kind="stable")
    return np.sort(order[:k])


def perturb_ensemble(field: GaussianField, spec: EnsembleSpec,
                     round_index: int = 0) -> PerturbedEnsemble:
    """Draw the density multipliers for one selection round.

    Each member's factors come from a counter-based generator keyed by
    (rng_seed, round, member) and indexed by global primitive id, so repeated
    calls, candidate order, and evaluation order cannot change the draws.
    """
    subset = select_low_density_subset(field, spec.perturb_fraction)
    base_key = derive_seed(spec.rng_seed, f"ensemble-round-{round_index}")
    m = len(field)
    eps = np.empty((spec.ensemble_size, len(subset)))
    for i in range(spec.ensemble_size):
        gen = np.random.Generator(np.random.Philox(
            key=np.array([base_key, i], dtype=np.uint64)))
        row = gen.uniform(-spec.scale_amplitude, spec.scale_amplitude, size=m)
        eps[i] = row[subset]
    return PerturbedEnsemble(field, subset, 1.0 + eps, round_index, spec)


def member_images(ensemble: PerturbedEnsemble, pose: ScannerPose,
                  cutoff: float | None = 3.0):
    """Base render plus the N member renders for one pose.

    Members are assembled as base + sum of (multiplier - 1) * kernel patch,
    which equals rendering with the subset densities scaled since the image
    is linear in each activated density.
    """
    base, contribs = render_with_contributions(
        ensemble.field, pose, ensemble.subset_indices, cutoff=cutoff)
    members = []
    for i in range(ensemble.multipliers.shape[0]):
        img = base.copy()
        for j, prim_idx in enumerate(ensemble.subset_indices):
            rows, cols, patch = contribs[int(prim_idx)]
            if patch.size:
                img[rows, cols] += (ensemble.multipliers[i, j] - 1.0) * patch
        members.append(img)
    return base, members


def _disagreement(metric: str, base: np.ndarray, member: np.ndarray,
                  dynamic_range: float) -> float:
    if metric == "ssim":
        return ssim(base, member, dynamic_range)
    if metric == "l1":
        return float(np.mean(np.abs(base - member)))
    if metric == "psnr":
        mse = float(np.mean((base - member) ** 2))
        floor = (_PSNR_REL_FLOOR * dynamic_range) ** 2
        return float(10.0 * np.log10(dynamic_range ** 2 / max(mse, floor)))
    raise ValueError(f"unknown metric {metric!r}")


def score_variance(scores) -> float:
    """Unbiased sample variance of the per-member disagreement scores."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 2:
        raise ValueError("sample variance needs at least two scores")
    return float(np.var(scores, ddof=1))


def uncertainty_score(field: GaussianField, ensemble: PerturbedEnsemble,
                      pose: ScannerPose, metric: str | None = None,
                      dynamic_range: float = 1.0,
                      cutoff: float | None = 3.0) -> float:
    """Variance of the member-vs-base disagreement at one candidate pose."""
    if ensemble.spec.ensemble_size < 2:
        raise ValueError("uncertainty_score requires an ensemble of size >= 2")
    metric = (metric or ensemble.spec.disagreement_metric).lower()
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    base, members = member_images(ensemble, pose, cutoff=cutoff)
    scores = [_disagreement(metric, base, mem, dynamic_range) for mem in members]
    return score_variance(scores)


@dataclass
class SelectionState:
    """Bookkeeping of acquired vs remaining candidate pose indices."""
    acquired: list
    remaining: list
    score_tables: dict = dc_field(default_factory=dict)
    round_index: int = 0

    @classmethod
    def for_pool(cls, pool_size: int, initial_indices) -> "SelectionState":
        init = [int(i) for i in initial_indices]
        if len(set(init)) != len(init):
            raise ValueError("initial indices contain duplicates")
        rem = [i for i in range(pool_size) if i not in set(init)]
        return cls(acquired=list(init), remaining=rem)

    def mark_acquired(self, pose_index: int) -> None:
        if pose_index not in self.remaining:
            raise ValueError(f"pose {pose_index} is not a remaining candidate")
        self.remaining.remove(pose_index)
        self.acquired.append(pose_index)
        self.round_index += 1


def select_next_view(field: GaussianField, state: SelectionState, pool,
                     spec: EnsembleSpec, dynamic_range: float = 1.0,
                     cutoff: float | None = 3.0, threads: int = 1) -> int:
    """Score every remaining candidate with a fresh ensemble; return the argmax.

    A new ensemble is drawn from the current field each round. The full score
    table is recorded on the state under the current round index; the caller
    advances the state with ``mark_acquired``. Ties break toward the lowest
    pose index. Thread-count only affects wall time: scores are gathered in
    candidate order.
    """
    if not state.remaining:
        raise ValueError("no remaining candidates to select from")
    ensemble = perturb_ensemble(field, spec, state.round_index)

    def score_one(pose_index):
        return uncertainty_score(field, ensemble, pool[pose_index],
                                 dynamic_range=dynamic_range, cutoff=cutoff)

    candidates = list(state.remaining)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            scores = list(ex.map(score_one, candidates))
    else:
        scores = [score_one(i) for i in candidates]
    table = dict(zip(candidates, scores))
    state.score_tables[state.round_index] = table
    best = int(np.argmax(scores))  # first max wins; candidates are ascending
    return candidates[best]


def baseline_random(state: SelectionState, pool, seed: int) -> int:
    """Uniform draw over the remaining candidates, reproducible per round."""
    if not state.remaining:
        raise ValueError("no remaining candidates to select from")
    gen = np.random.Generator(np.random.Philox(key=np.array(
        [derive_seed(seed, "random-policy"), state.round_index], dtype=np.uint64)))
    pick = state.remaining[int(gen.integers(len(state.remaining)))]
    state.score_tables[state.round_index] = {i: 0.0 for i in state.remaining}
    return int(pick)


def _source_directions(pool, indices) -> np.ndarray:
    dirs = np.stack([-pool[i].orientation[2] for i in indices])
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def baseline_fps(state: SelectionState, pool) -> int:
    """Farthest point sampling on source directions (radius-normalized).

    Picks the remaining candidate maximizing its minimum great-circle distance
    to every acquired pose; ties break toward the lowest index.
    """
    if not state.remaining:
        raise ValueError("no remaining candidates to select from")
    if not state.acquired:
        raise ValueError("farthest point sampling needs at least one acquired pose")
    cand_dirs = _source_directions(pool, state.remaining)
    acq_dirs = _source_directions(pool, state.acquired)
    dist = great_circle_distance(cand_dirs, acq_dirs).min(axis=1)
    state.score_tables[state.round_index] = dict(zip(state.remaining, dist.tolist()))
    return int(state.remaining[int(np.argmax(dist))])


def baseline_fisher_diag(field: GaussianField, state: SelectionState, pool,
                         views_trained, cutoff: float | None = 3.0,
                         threads: int = 1) -> int:
    """Expected-information proxy from per-parameter diagonal information.

    The training poses accumulate a diagonal information vector; a candidate
    scores the sum over parameters of its own diagonal divided by the
    regularized training diagonal. Highest score wins, ties toward the lowest
    pose index.
    """
    if not state.remaining:
        raise ValueError("no remaining candidates to select from")
    if not views_trained:
        raise ValueError("fisher baseline requires at least one trained view")
    train_diag = np.zeros((len(field), 11))
    for pose in views_trained:
        train_diag += fisher_diag(field, pose, cutoff=cutoff)
    denom = train_diag + FISHER_REGULARIZER

    def score_one(pose_index):
        cand = fisher_diag(field, pool[pose_index], cutoff=cutoff)
        return float(np.sum(cand / denom))

    candidates = list(state.remaining)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            scores = list(ex.map(score_one, candidates))
    else:
        scores = [score_one(i) for i in candidates]
    state.score_tables[state.round_index] = dict(zip(candidates, scores))
    return candidates[int(np.argmax(scores))]


def write_round_scores(path, pool, center, table: dict, selected: int) -> None:
    """Per-round artifact: one row per remaining candidate with its score."""
    center = np.asarray(center, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pose_index", "azimuth", "elevation", "radius", "score",
                    "selected_flag"])
        for pose_index in sorted(table):
            rel = pool[pose_index].eye - center
            radius = float(np.linalg.norm(rel))
            elevation = float(np.arcsin(np.clip(rel[2] / radius, -1.0, 1.0)))
            azimuth = float(np.arctan2(rel[1], rel[0]))
            w.writerow([pose_index, f"{azimuth:.10g}", f"{elevation:.10g}",
                        f"{radius:.10g}", f"{table[pose_index]:.10g}",
                        int(pose_index == selected)])

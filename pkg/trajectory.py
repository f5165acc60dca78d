# trajectory.py
"""
Gradient-following trajectories on an energy map and the feature tokens sampled
along them.

    p_{j+1} = p_j + eta * grad E(p_j) / (||grad E(p_j)|| + eps)

grad E is read bilinearly between pixels and positions are clamped to the map box.
Tracing stops at ``l_max`` points, at a stationary point (||grad E|| < eps), when
the next energy falls below ``decay_ratio * E(p_1)``, or, with ``monotone`` set,
when the next step would lose more than eta * eps energy. Positions carry no
gradient; tokens do.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config import SeedConfig, TraceConfig
from energy_field import EnergyMap, SeedSet, energy_gradient, select_seeds
from tensor_ops import reshape, sample_grid_field, sample_points, value_of
from utils import get_logger

log = get_logger("trajectory")


@dataclass
class Trajectory:
    points: np.ndarray  # [L, 2] continuous (x, y) in stage coordinates
    energies: np.ndarray  # [L] E(p_j)
    seed_energy: float
    stage: int
    tokens: Optional[np.ndarray] = None  # [L, C]

    def __len__(self) -> int:
        return len(self.points)


def _clamp(p: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.array([min(max(p[0], 0.0), w - 1.0), min(max(p[1], 0.0), h - 1.0)])


def _energy_at(values: np.ndarray, p: np.ndarray) -> float:
    return float(sample_grid_field(values[None], p.reshape(1, 2))[0, 0])


def trace(emap: EnergyMap, grad: np.ndarray, seed: Sequence[float], cfg: TraceConfig) -> np.ndarray:
    """Positions [L, 2] of the trajectory started at ``seed``."""
    values = np.asarray(emap.values, dtype=np.float64)
    field = np.asarray(grad, dtype=np.float64)
    h, w = values.shape
    p = _clamp(np.asarray(seed, dtype=np.float64), h, w)
    points = [p]
    e_first = e_prev = _energy_at(values, p)
    while len(points) < cfg.l_max:
        g = sample_grid_field(field, p.reshape(1, 2))[0]
        norm = float(np.hypot(g[0], g[1]))
        if norm < cfg.epsilon:
            break
        q = _clamp(p + cfg.eta * g / (norm + cfg.epsilon), h, w)
        e_q = _energy_at(values, q)
        if e_q < cfg.decay_ratio * e_first:
            break
        if cfg.monotone and e_q < e_prev - cfg.eta * cfg.epsilon:
            break
        points.append(q)
        p, e_prev = q, e_q
    return np.stack(points)


def sample_tokens(feature, points):
    """Rows f_j = Interp(F, p_j) for feature [C, H, W] -> [L, C]."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) == 0:
        raise ValueError("sample_tokens needs at least one point")
    batch = reshape(feature, shape=(1,) + tuple(feature.shape))
    return sample_points(batch, points=points)


def extract_all(feature, emap: EnergyMap, grad: np.ndarray, seed_set: SeedSet, cfg: TraceConfig,
                workers: int = 1) -> List[Trajectory]:
    """One trajectory per seed, in seed order."""
    seeds = list(seed_set)
    if not seeds:
        return []
    starts = [s.point for s in seeds]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            paths = list(pool.map(lambda s: trace(emap, grad, s, cfg), starts))
    else:
        paths = [trace(emap, grad, s, cfg) for s in starts]
    values = np.asarray(emap.values)
    fmap = None if feature is None else np.asarray(value_of(feature))
    out = []
    for seed, pts in zip(seeds, paths):
        energies = sample_grid_field(values[None], pts)[:, 0]
        tokens = None if fmap is None else sample_points.raw(fmap[None], points=pts)[0]
        out.append(Trajectory(pts, energies, seed.energy, emap.stage, tokens))
    return out


def extract_paths(energy_values: np.ndarray, stage: int, seeds: SeedConfig, cfg: TraceConfig,
                  workers: int = 1) -> Tuple[SeedSet, List[Trajectory]]:
    """Seeds and trajectories of one image's energy map (positions and energies only)."""
    emap = EnergyMap(np.asarray(energy_values), stage)
    seed_set = select_seeds(emap, seeds.k_max, seeds.min_energy_frac, seeds.nms_radius)
    if not len(seed_set):
        return seed_set, []
    grad = energy_gradient(emap, seeds.grad_mode)
    trajectories = extract_all(None, emap, grad, seed_set, cfg, workers)
    log.debug("stage %d: %d seeds, %d points", stage, len(seed_set), sum(len(t) for t in trajectories))
    return seed_set, trajectories

# energy_field.py
"""
Perturbation energy: per-pixel sum over channels of the absolute central differences
of a feature map, with replicate boundaries. Seeds for trajectory tracing are taken
at the map's local maxima.
"""
from dataclasses import dataclass, field
from typing import Iterator, List, Tuple

import numpy as np

from helpers.components import label_components
from tensor_ops import conv2d, kernel, unpad_gradient, value_of

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 8.0
NEIGHBOURS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]


@dataclass
class EnergyMap:
    values: np.ndarray  # [H, W], non-negative
    stage: int = 1

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class Seed:
    x: int
    y: int
    energy: float

    @property
    def point(self) -> Tuple[float, float]:
        return float(self.x), float(self.y)


@dataclass
class SeedSet:
    seeds: List[Seed] = field(default_factory=list)
    stage: int = 1

    def __len__(self) -> int:
        return len(self.seeds)

    def __iter__(self) -> Iterator[Seed]:
        return iter(self.seeds)


@kernel
def energy(feature):
    """Batched energy: feature [N, C, H, W] -> [N, H, W]. |.| has subgradient 0 at 0."""
    fp = np.pad(feature, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    dx = fp[:, :, 1:-1, 2:] - fp[:, :, 1:-1, :-2]
    dy = fp[:, :, 2:, 1:-1] - fp[:, :, :-2, 1:-1]
    out = np.abs(dx).sum(axis=1) + np.abs(dy).sum(axis=1)

    def vjp(g):
        sx = np.sign(dx) * g[:, None]
        sy = np.sign(dy) * g[:, None]
        gp = np.zeros_like(fp)
        gp[:, :, 1:-1, 2:] += sx
        gp[:, :, 1:-1, :-2] -= sx
        gp[:, :, 2:, 1:-1] += sy
        gp[:, :, :-2, 1:-1] -= sy
        return (unpad_gradient(gp, 1, "replicate"),)
    return out, vjp


def compute_energy(feature, stage: int = 1) -> EnergyMap:
    """Energy map of a single feature map [C, H, W]."""
    values = energy.raw(np.asarray(value_of(feature))[None])[0][0]
    return EnergyMap(values, stage)


def energy_gradient(emap: EnergyMap, mode: str = "central") -> np.ndarray:
    """Spatial gradient of the energy -> [2, H, W] holding (d/dx, d/dy)."""
    e = np.asarray(emap.values)
    if mode == "central":
        ep = np.pad(e, 1, mode="edge")
        gx = (ep[1:-1, 2:] - ep[1:-1, :-2]) / 2.0
        gy = (ep[2:, 1:-1] - ep[:-2, 1:-1]) / 2.0
        return np.stack([gx, gy]).astype(e.dtype)
    if mode == "sobel":
        kernels = np.stack([SOBEL_X, SOBEL_X.T])[:, None].astype(e.dtype)
        return conv2d(e[None, None], kernels, padding="replicate")[0]
    raise ValueError(f"unknown gradient mode {mode!r}")


def local_maxima(values: np.ndarray) -> np.ndarray:
    """Row-major (y, x) pixels that represent a qualifying local-maximum plateau.

    A pixel is a weak maximum when it is >= each in-bounds 8-neighbour. Connected weak
    maxima form a plateau; a plateau qualifies when at least one of its pixels is
    strictly above some neighbour, and is represented by its first pixel in row-major
    order.
    """
    e = np.asarray(values, dtype=np.float64)
    h, w = e.shape
    low = np.pad(e, 1, constant_values=-np.inf)
    high = np.pad(e, 1, constant_values=np.inf)
    weak = np.ones_like(e, dtype=bool)
    strict = np.zeros_like(e, dtype=bool)
    for dy, dx in NEIGHBOURS:
        weak &= e >= low[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        strict |= e > high[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    labels, count = label_components(weak)
    if count == 0:
        return np.zeros((0, 2), dtype=np.int64)
    flat = np.flatnonzero(weak)
    labs = labels.ravel()[flat]
    qualifies = np.zeros(count + 1, dtype=bool)
    np.logical_or.at(qualifies, labs, strict.ravel()[flat])
    uniq, first = np.unique(labs, return_index=True)
    reps = flat[first[qualifies[uniq]]]
    return np.stack(np.divmod(np.sort(reps), w), axis=1)


def select_seeds(emap: EnergyMap, k_max: int = 8, min_energy_frac: float = 0.3, nms_radius: int = 2) -> SeedSet:
    e = np.asarray(emap.values, dtype=np.float64)
    peak = float(e.max()) if e.size else 0.0
    if peak <= 0.0:
        return SeedSet([], emap.stage)
    cand = local_maxima(e)
    ys, xs = cand[:, 0], cand[:, 1]
    vals = e[ys, xs]
    keep = (vals >= min_energy_frac * peak) & (vals > 0)
    ys, xs, vals = ys[keep], xs[keep], vals[keep]
    order = np.lexsort((xs, ys, -vals))
    chosen: List[Seed] = []
    for i in order:
        y, x = int(ys[i]), int(xs[i])
        if all(max(abs(x - s.x), abs(y - s.y)) > nms_radius for s in chosen):
            chosen.append(Seed(x, y, float(emap.values[y, x])))
            if len(chosen) == k_max:
                break
    return SeedSet(chosen, emap.stage)

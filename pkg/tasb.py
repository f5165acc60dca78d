# tasb.py
"""
Trajectory-aware state block.

Per stage: a grid-level SS2D pass gives the contextual map; every trajectory's tokens
run through the bottleneck scan, each step's output is aligned with its token and
the word/sentence embeddings of the box it lies in, and the aligned states are
scattered back to their nearest pixels (averaged over contributions). The two maps
are averaged into F_hat and fused with the backbone: F + lambda * F_hat.
"""
from dataclasses import dataclass
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, ShapeError
from ssm_scan import SS2DParams, SSMParams, bottleneck_scan, ss2d
from tensor_ops import (ConvBN, Node, RunningStats, add, concat, constant, conv_bn, kernel, linear, mul,
                        relu, reshape, sample_points, take, value_of)
from tokenizer import HierarchicalEmbeddings, gather
from trajectory import Trajectory

SUBSTITUTE_LAYERS = {
    "resblock": ("conv1", "conv2"),
    "bottleneck": ("reduce", "mid", "expand"),
}


@dataclass
class Phi:
    w: Node  # [C_l, D_out + C_l + C_w + C_s]
    b: Node  # [C_l]


@dataclass
class TasbParams:
    contextual: SS2DParams
    traj_ssm: SSMParams  # single group
    phi: Phi
    lam: Node  # scalar
    substitute: Mapping[str, ConvBN]

    @classmethod
    def from_store(cls, store: Mapping[str, Node], stats: Mapping[str, RunningStats], prefix: str,
                   variant: str = "tasb") -> "TasbParams":
        layers = {name: ConvBN.from_store(store, stats, f"{prefix}.{variant}.{name}")
                  for name in SUBSTITUTE_LAYERS.get(variant, ())}
        return cls(SS2DParams.from_store(store, f"{prefix}.ss2d"),
                   SSMParams.from_store(store, f"{prefix}.traj"),
                   Phi(store[f"{prefix}.phi.w"], store[f"{prefix}.phi.b"]),
                   store[f"{prefix}.lambda"], layers)


@dataclass(frozen=True)
class TasbSettings:
    use_pgm: bool = True
    use_tasb: bool = True
    variant: str = "tasb"
    hierarchical: bool = True  # word/sentence blocks in the alignment
    zoh: bool = False
    scale: float = 2.0  # stage -> image pixel factor
    training: bool = False


@dataclass
class TasbOutput:
    fused: Node
    enhanced: Optional[Node]
    contextual: Optional[Node]
    trajectory_map: Optional[Node]


# --------------------------------------------------------------------
# Alignment, scatter, fusion
# --------------------------------------------------------------------
def align(y, f, word_vec, sentence_vec, phi: Phi):
    """z = phi([y || f || F_w || F_s]); rows are trajectory steps."""
    width = sum(int(t.shape[-1]) for t in (y, f, word_vec, sentence_vec))
    if width != phi.w.shape[-1]:
        raise ConfigError(f"alignment input width {width} does not match projection {tuple(phi.w.shape)}")
    return linear(concat(y, f, word_vec, sentence_vec, axis=-1), phi.w, phi.b)


def pixel_index(points, height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest pixel (ties to even) of continuous (x, y) points -> (ys, xs)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    xs = np.clip(np.rint(pts[:, 0]), 0, width - 1).astype(np.int64)
    ys = np.clip(np.rint(pts[:, 1]), 0, height - 1).astype(np.int64)
    return ys, xs


def contribution_counts(batch_index, ys, xs, shape) -> np.ndarray:
    """N(x, y): number of states landing on each pixel -> [N, H, W]."""
    counts = np.zeros(shape, dtype=np.int64)
    np.add.at(counts, (np.asarray(batch_index, np.int64), ys, xs), 1)
    return counts


@kernel
def scatter_mean(states, *, batch_index, ys, xs, shape):
    """states [P, C] -> [N, C, H, W]: per-pixel sum divided by max(N(x, y), 1).

    Accumulation follows row order of ``states``.
    """
    n, c, h, w = shape
    b = np.asarray(batch_index, dtype=np.int64)
    sums = np.zeros((n, h, w, c), dtype=states.dtype)
    np.add.at(sums, (b, ys, xs), states)
    denom = np.maximum(contribution_counts(b, ys, xs, (n, h, w)), 1).astype(states.dtype)[..., None]
    out = (sums / denom).transpose(0, 3, 1, 2)

    def vjp(g):
        return ((g.transpose(0, 2, 3, 1) / denom)[b, ys, xs],)
    return np.ascontiguousarray(out), vjp


def scatter_average(positions, states, shape, batch_index=None):
    """Average states [P, C] onto a (C, H, W) or (N, C, H, W) grid at rounded positions."""
    single = len(shape) == 3
    full = (1,) + tuple(shape) if single else tuple(shape)
    ys, xs = pixel_index(positions, full[2], full[3])
    b = np.zeros(len(ys), dtype=np.int64) if batch_index is None else np.asarray(batch_index, np.int64)
    if len(ys) == 0:
        out = np.zeros(full, dtype=np.asarray(value_of(states)).dtype)
        return out[0] if single else out
    out = scatter_mean(states, batch_index=b, ys=ys, xs=xs, shape=full)
    return reshape(out, shape=tuple(shape)) if single else out


@kernel
def fuse(backbone, enhanced, lam):
    """F + lambda * F_hat."""
    if backbone.shape != enhanced.shape:
        raise ShapeError(f"fuse: backbone {backbone.shape} and enhanced map {enhanced.shape} differ")

    def vjp(g):
        return g, g * lam, np.sum(g * enhanced).astype(np.asarray(lam).dtype).reshape(np.shape(lam))
    return backbone + lam * enhanced, vjp


# --------------------------------------------------------------------
# Block
# --------------------------------------------------------------------
def substitute_block(x, layers: Mapping[str, ConvBN], variant: str, training: bool):
    """Convolutional stand-ins for the contextual pass (residual form)."""
    if variant == "resblock":
        h = relu(conv_bn(x, layers["conv1"], training=training))
        return relu(add(x, conv_bn(h, layers["conv2"], training=training)))
    if variant == "bottleneck":
        h = relu(conv_bn(x, layers["reduce"], training=training))
        h = relu(conv_bn(h, layers["mid"], training=training))
        return relu(add(x, conv_bn(h, layers["expand"], training=training)))
    raise ConfigError(f"unknown block variant {variant!r}")


def _per_image(feature, trajectories) -> List[Sequence[Trajectory]]:
    if len(feature.shape) == 3:
        return [list(trajectories)]
    paths = list(trajectories)
    if len(paths) != feature.shape[0]:
        raise ShapeError(f"{len(paths)} trajectory lists for a batch of {feature.shape[0]}")
    return paths


def scan_trajectories(tokens, lengths: Sequence[int], params: SSMParams, zoh: bool = False):
    """Scan each trajectory's rows of tokens [P, C] independently -> [P, D_out].

    Sequences are right-padded to a common length so one grouped scan covers them
    all; the scan is causal so padding never reaches a valid step.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    count, longest = len(lengths), int(lengths.max())
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    steps = np.arange(longest)
    valid = steps[None, :] < lengths[:, None]
    padded_index = np.where(valid, starts[:, None] + steps[None, :], 0).ravel()
    c = tokens.shape[-1]
    x = reshape(take(tokens, index=padded_index), shape=(count, 1, longest, c))
    y = bottleneck_scan(params, x, zoh)
    y = reshape(y, shape=(count * longest, y.shape[-1]))
    return take(y, index=np.flatnonzero(valid.ravel()))


def trajectory_map(feature, trajectories, embeddings: Optional[HierarchicalEmbeddings], params: TasbParams,
                   settings: TasbSettings):
    """Scatter-averaged trajectory states -> ([N, C, H, W] or None, images with paths [N] bool)."""
    x = reshape(feature, shape=(1,) + tuple(feature.shape)) if len(feature.shape) == 3 else feature
    per_image = _per_image(feature, trajectories)
    n, c, h, w = x.shape
    present = np.array([len(ts) > 0 for ts in per_image], dtype=bool)
    flat = [(b, t) for b, ts in enumerate(per_image) for t in ts]
    if not flat:
        return None, present
    points = np.concatenate([np.asarray(t.points, dtype=np.float64).reshape(-1, 2) for _, t in flat])
    lengths = [len(t) for _, t in flat]
    batch = np.repeat([b for b, _ in flat], lengths)
    tokens = sample_points(x, points=points, batch_index=batch)
    if settings.use_tasb and settings.variant == "tasb":
        y = scan_trajectories(tokens, lengths, params.traj_ssm, settings.zoh)
        if settings.hierarchical and embeddings is not None:
            word, sentence = gather(embeddings, points, batch, settings.scale)
        else:
            c_w = (params.phi.w.shape[-1] - y.shape[-1] - c) // 2
            word = sentence = constant(np.zeros((len(points), c_w), dtype=x.dtype))
        states = align(y, tokens, word, sentence, params.phi)
    else:
        states = tokens
    ys, xs = pixel_index(points, h, w)
    return scatter_mean(states, batch_index=batch, ys=ys, xs=xs, shape=(n, c, h, w)), present


def contextual_map(feature, params: TasbParams, settings: TasbSettings):
    if not settings.use_tasb:
        return None
    if settings.variant == "tasb":
        return ss2d(feature, params.contextual, settings.zoh)
    return substitute_block(feature, params.substitute, settings.variant, settings.training)


def combine(contextual, traj_map, present: np.ndarray, dtype):
    """Element-wise mean of both maps for images with trajectories, contextual alone otherwise."""
    if contextual is None:
        return traj_map
    if traj_map is None:
        return contextual
    shape = (len(present), 1, 1, 1)
    w_traj = np.where(present, 0.5, 0.0).astype(dtype).reshape(shape)
    return add(mul(contextual, 1.0 - w_traj), mul(traj_map, w_traj))


def tasb_forward(stage_feature, trajectories, embeddings: Optional[HierarchicalEmbeddings], params: TasbParams,
                 settings: TasbSettings = TasbSettings()) -> TasbOutput:
    """Enhanced stage feature. Accepts [C, H, W] with one trajectory list or [N, C, H, W] with one list per image."""
    single = len(stage_feature.shape) == 3
    x = reshape(stage_feature, shape=(1,) + tuple(stage_feature.shape)) if single else stage_feature
    paths = [list(trajectories)] if single else trajectories
    ctx = contextual_map(x, params, settings)
    traj, present = (None, np.zeros(x.shape[0], dtype=bool))
    if settings.use_pgm:
        traj, present = trajectory_map(x, paths, embeddings, params, settings)
    enhanced = combine(ctx, traj, present, value_of(x).dtype)
    fused = x if enhanced is None else fuse(x, enhanced, params.lam)
    out = TasbOutput(fused, enhanced, ctx, traj)
    if single:
        for name in ("fused", "enhanced", "contextual", "trajectory_map"):
            t = getattr(out, name)
            if t is not None:
                setattr(out, name, reshape(t, shape=tuple(stage_feature.shape)))
    return out


def init_tasb(rng: np.random.Generator, channels: int, c_w: int, ratio: int, dtype=np.float32,
              lambda_init: float = 0.5) -> dict:
    """Initial values of the alignment projection and fusion weight, keyed by local name."""
    width = 2 * channels + 2 * c_w
    return {
        "phi.w": rng.normal(0, 1 / np.sqrt(width), size=(channels, width)).astype(dtype),
        "phi.b": np.zeros(channels, dtype=dtype),
        "lambda": np.asarray(lambda_init, dtype=dtype),
    }

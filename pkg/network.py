# network.py
"""
Encoder-decoder detector.

stem (stride 2) -> four encoder stages [SS2D blocks, PGM tracing, TASB fusion]
-> three decoder stages (upsample x2, skip concat, conv-BN-ReLU) -> 1x1 head
-> bilinear resize to the input size. The perturbation response map is built
from the energies seen along every stage's trajectories.
"""
import dataclasses
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

import checkpoint
from config import NUM_STAGES, WORKERS, ModelConfig, RunConfig, canonical_text, config_from_text
from energy_field import SeedSet, energy
from errors import CheckpointError, CheckpointUnknownParameterError, ConfigError, ShapeError
from ssm_scan import SS2DParams, init_ssm, ss2d
from tasb import TasbParams, TasbSettings, init_tasb, pixel_index, scatter_mean, tasb_forward
from tensor_ops import (ConvBN, Node, RunningStats, add, bilinear_upsample, concat, conv2d, conv_bn, gelu, mul,
                        parameter, relu, reshape, sample_points, sigmoid, value_of)
from tokenizer import HierarchicalEmbeddings, embed_words, make_grid
from trajectory import Trajectory, extract_paths
from utils import get_logger

log = get_logger("network")
MODES = ("train", "eval")
HEAD_PRIOR = -4.0  # initial logit bias; foreground is rare
RESIZE_MODE = "asymmetric"  # stage cell k sits at pixel k * stride, as the strided convs sample it


@dataclass
class StageDiagnostics:
    stage: int
    energy: np.ndarray  # [N, H_l, W_l]
    seeds: List[SeedSet]
    trajectories: List[List[Trajectory]]


@dataclass
class Diagnostics:
    stages: Dict[int, StageDiagnostics] = field(default_factory=OrderedDict)

    @property
    def paths(self) -> Dict[int, List[List[Trajectory]]]:
        """Traced trajectories by stage, reusable as frozen paths."""
        return {l: d.trajectories for l, d in self.stages.items()}


@dataclass
class ForwardResult:
    logits: Node  # [N, 1, H, W]
    response: Node  # [N, 1, H, W] probabilities, 0 where no trajectory landed
    diagnostics: Diagnostics


# --------------------------------------------------------------------
# Perturbation response
# --------------------------------------------------------------------
def scatter_response(energies, points, batch_index, shape: Tuple[int, int, int], scale=1.0, bias=0.0):
    """sigmoid(scale * mean energy + bias) on touched pixels, 0 elsewhere -> [N, 1, H, W].

    ``points`` are image-pixel (x, y); ``energies`` is [P, 1].
    """
    n, h, w = shape
    if len(points) == 0:
        return np.zeros((n, 1, h, w), dtype=np.asarray(value_of(scale)).dtype)
    ys, xs = pixel_index(points, h, w)
    b = np.asarray(batch_index, dtype=np.int64)
    avg = scatter_mean(energies, batch_index=b, ys=ys, xs=xs, shape=(n, 1, h, w))
    touched = np.zeros((n, 1, h, w), dtype=value_of(avg).dtype)
    touched[b, 0, ys, xs] = 1.0
    return mul(sigmoid(add(mul(avg, scale), bias)), touched)


def perturbation_response(trajectories: Mapping[int, Sequence[Trajectory]], height: int, width: int, *,
                          stem_stride: int = 2, channels: Optional[Sequence[int]] = None,
                          scale: float = 1.0, bias: float = 0.0) -> np.ndarray:
    """Response map [1, H, W] of one image from its trajectories keyed by stage.

    Stage points are scaled to image pixels by the stage's downsampling factor;
    energies are divided by the stage width when ``channels`` is given.
    """
    points, energies = [], []
    for stage, trajs in trajectories.items():
        factor = stem_stride * 2 ** (stage - 1)
        norm = 1.0 / channels[stage - 1] if channels else 1.0
        for t in trajs:
            points.append(np.asarray(t.points, dtype=np.float64).reshape(-1, 2) * factor)
            energies.append(np.asarray(t.energies, dtype=np.float64).reshape(-1, 1) * norm)
    if not points:
        return np.zeros((1, height, width))
    pts = np.concatenate(points)
    out = scatter_response(np.concatenate(energies), pts, np.zeros(len(pts), dtype=np.int64),
                           (1, height, width), np.float64(scale), np.float64(bias))
    return np.asarray(value_of(out))[0]


# --------------------------------------------------------------------
# Model
# --------------------------------------------------------------------
class TapmNet:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.grid = make_grid(cfg.height, cfg.width, cfg.n, cfg.m)
        self.params: Dict[str, Node] = OrderedDict()
        self.stats: Dict[str, RunningStats] = OrderedDict()
        self.step = 0
        self.epoch = 0
        self._build(np.random.default_rng(seed))

    # ----------------
    # Public methods
    # ----------------
    def forward(self, images, mode: str = "eval",
                paths: Optional[Mapping[int, Sequence[Sequence[Trajectory]]]] = None) -> ForwardResult:
        """Mask logits, perturbation response and per-stage diagnostics for images [N, 3, H, W].

        ``paths`` replaces tracing with the given trajectories (keyed by stage, one list
        per image); their positions are treated as constants.
        """
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        images = np.asarray(value_of(images), dtype=self.dtype)
        self._check_input(images)
        training = mode == "train"
        cfg = self.cfg
        p = self.params

        x = gelu(conv_bn(images, self._conv("stem"), training=training, stride=cfg.stem_stride))
        embeddings = None
        if self._uses_embeddings():
            embeddings = embed_words(images, self._conv("tokenizer.stem"), self.grid, training)

        diagnostics = Diagnostics()
        skips, response_rows = [], []
        for stage in range(1, NUM_STAGES + 1):
            if stage > 1:
                x = gelu(conv_bn(x, self._conv(f"stage{stage}.down"), training=training, stride=2))
            for i in range(cfg.blocks_per_stage):
                x = ss2d(x, SS2DParams.from_store(p, f"stage{stage}.block{i}"), cfg.ssm.zoh)
            x = self._enhance(stage, x, embeddings, paths, diagnostics, response_rows, training)
            skips.append(x)

        d = skips[-1]
        for stage in range(NUM_STAGES - 1, 0, -1):
            skip = skips[stage - 1]
            d = bilinear_upsample(d, out_h=skip.shape[2], out_w=skip.shape[3], mode=RESIZE_MODE)
            d = relu(conv_bn(concat(d, skip, axis=1), self._conv(f"decoder{stage}"), training=training))
        logits = conv2d(d, p["head.w"], p["head.b"])
        logits = bilinear_upsample(logits, out_h=cfg.height, out_w=cfg.width, mode=RESIZE_MODE)
        response = self._response(response_rows, images.shape[0])
        return ForwardResult(logits, response, diagnostics)

    def perturbation_response(self, trajectories: Mapping[int, Sequence[Trajectory]]) -> np.ndarray:
        return perturbation_response(trajectories, self.cfg.height, self.cfg.width,
                                     stem_stride=self.cfg.stem_stride, channels=self.cfg.channels,
                                     scale=float(value_of(self.params["response.scale"])),
                                     bias=float(value_of(self.params["response.bias"])))

    def parameter_count(self) -> int:
        return int(sum(v.value.size for v in self.params.values()))

    def state_records(self) -> Dict[str, np.ndarray]:
        records = OrderedDict((name, node.value) for name, node in self.params.items())
        for name, st in self.stats.items():
            records[f"bn:{name}.mean"] = st.mean
            records[f"bn:{name}.var"] = st.var
        return records

    def load_records(self, records: Mapping[str, np.ndarray]):
        """Assign parameters and running statistics; every model tensor must be present."""
        expected = set(self.params) | {f"bn:{n}.{k}" for n in self.stats for k in ("mean", "var")}
        unknown = [k for k in records if k not in expected and not k.startswith("optim:")]
        if unknown:
            raise CheckpointUnknownParameterError(f"unknown parameter name(s): {', '.join(unknown[:5])}")
        missing = sorted(expected - set(records))
        if missing:
            raise CheckpointError(f"checkpoint lacks {len(missing)} tensor(s), first: {missing[0]}")
        for name in expected:
            arr = np.asarray(records[name])
            current = self._lookup(name)
            if arr.shape != current.shape:
                raise CheckpointError(f"{name}: stored shape {arr.shape} but model expects {current.shape}")
        for name, node in self.params.items():
            node.value = np.asarray(records[name], dtype=self.dtype).copy()
        for name, st in self.stats.items():
            st.mean = np.asarray(records[f"bn:{name}.mean"], dtype=self.dtype).copy()
            st.var = np.asarray(records[f"bn:{name}.var"], dtype=self.dtype).copy()

    # ----------------
    # Private helpers
    # ----------------
    def _check_input(self, images: np.ndarray):
        expected = (3, self.cfg.height, self.cfg.width)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ShapeError(f"expected images [N, {expected[0]}, {expected[1]}, {expected[2]}], got {images.shape}")

    def _uses_embeddings(self) -> bool:
        cfg = self.cfg
        return cfg.use_pgm and cfg.use_tasb and cfg.tasb_variant == "tasb" and cfg.pgm_variant == "full"

    def _settings(self, stage: int, training: bool) -> TasbSettings:
        cfg = self.cfg
        return TasbSettings(use_pgm=cfg.use_pgm, use_tasb=cfg.use_tasb, variant=cfg.tasb_variant,
                            hierarchical=cfg.pgm_variant == "full", zoh=cfg.ssm.zoh,
                            scale=float(cfg.stage_scale(stage)), training=training)

    def _conv(self, prefix: str) -> ConvBN:
        return ConvBN.from_store(self.params, self.stats, prefix)

    def _lookup(self, record: str) -> np.ndarray:
        if record.startswith("bn:"):
            name, _, kind = record[3:].rpartition(".")
            return getattr(self.stats[name], kind)
        return self.params[record].value

    def _enhance(self, stage: int, x, embeddings: Optional[HierarchicalEmbeddings], paths, diagnostics: Diagnostics,
                 response_rows: list, training: bool):
        cfg = self.cfg
        if not (cfg.use_pgm or cfg.use_tasb):
            return x
        n = x.shape[0]
        trajectories: List[List[Trajectory]] = [[] for _ in range(n)]
        if cfg.use_pgm:
            e = energy(x)
            values = np.asarray(value_of(e))
            seeds: List[SeedSet] = []
            if paths is None:
                for i in range(n):
                    seed_set, trajs = extract_paths(values[i], stage, cfg.seeds, cfg.trace_for(stage), WORKERS)
                    seeds.append(seed_set)
                    trajectories[i] = trajs
            else:
                trajectories = [[dataclasses.replace(t) for t in ts] for ts in paths.get(stage, trajectories)]
                if len(trajectories) != n:
                    raise ShapeError(f"stage {stage}: frozen paths for {len(trajectories)} images, batch has {n}")
                seeds = [SeedSet([], stage) for _ in range(n)]
            self._attach_tokens(x, trajectories)
            diagnostics.stages[stage] = StageDiagnostics(stage, values, seeds, trajectories)
            response_rows.append(self._energy_rows(stage, e, trajectories))
        params = TasbParams.from_store(self.params, self.stats, f"stage{stage}.tasb", cfg.tasb_variant)
        out = tasb_forward(x, trajectories, embeddings, params, self._settings(stage, training))
        return out.fused

    def _attach_tokens(self, x, trajectories: List[List[Trajectory]]):
        fmap = np.asarray(value_of(x))
        for i, trajs in enumerate(trajectories):
            for t in trajs:
                t.tokens = sample_points.raw(fmap[i:i + 1], points=t.points)[0]

    def _energy_rows(self, stage: int, e, trajectories: List[List[Trajectory]]):
        """Differentiable per-point energies (divided by the stage width) and their image-pixel positions."""
        flat = [(b, t) for b, ts in enumerate(trajectories) for t in ts]
        if not flat:
            return None
        pts = np.concatenate([np.asarray(t.points, dtype=np.float64).reshape(-1, 2) for _, t in flat])
        batch = np.repeat([b for b, _ in flat], [len(t) for _, t in flat])
        n, h, w = e.shape
        sampled = sample_points(reshape(e, shape=(n, 1, h, w)), points=pts, batch_index=batch)
        sampled = mul(sampled, np.asarray(1.0 / self.cfg.channels[stage - 1], dtype=self.dtype))
        return sampled, pts * self.cfg.stage_scale(stage), batch

    def _response(self, rows: list, n: int):
        rows = [r for r in rows if r is not None]
        shape = (n, self.cfg.height, self.cfg.width)
        if not rows:
            return np.zeros((n, 1) + shape[1:], dtype=self.dtype)
        energies = rows[0][0] if len(rows) == 1 else concat(*(r[0] for r in rows), axis=0)
        points = np.concatenate([r[1] for r in rows])
        batch = np.concatenate([r[2] for r in rows])
        return scatter_response(energies, points, batch, shape, self.params["response.scale"],
                                self.params["response.bias"])

    # ----------------
    # Construction
    # ----------------
    def _add(self, name: str, value):
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name}")
        self.params[name] = parameter(np.asarray(value, dtype=self.dtype), name)

    def _add_conv_bn(self, rng, prefix: str, c_in: int, c_out: int, k: int = 3):
        fan_in = c_in * k * k
        self._add(f"{prefix}.w", rng.normal(0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k)))
        self._add(f"{prefix}.gamma", np.ones(c_out))
        self._add(f"{prefix}.beta", np.zeros(c_out))
        self.stats[prefix] = RunningStats.fresh(c_out, self.dtype)

    def _add_ssm(self, rng, prefix: str, groups: int, width: int):
        s = self.cfg.ssm
        for name, value in init_ssm(rng, groups, width, s.ratio, s.d_state, s.selective, self.dtype).items():
            self._add(f"{prefix}.{name}", value)

    def _add_ss2d(self, rng, prefix: str, width: int):
        self._add_ssm(rng, f"{prefix}.ssm", 1 if self.cfg.ssm.share_directions else 4, width)
        self._add(f"{prefix}.ln_gamma", np.ones(width))
        self._add(f"{prefix}.ln_beta", np.zeros(width))

    def _build(self, rng: np.random.Generator):
        cfg = self.cfg
        ch = cfg.channels
        self._add_conv_bn(rng, "stem", 3, ch[0])
        self._add_conv_bn(rng, "tokenizer.stem", 3, cfg.c_w)
        for stage in range(1, NUM_STAGES + 1):
            c = ch[stage - 1]
            if stage > 1:
                self._add_conv_bn(rng, f"stage{stage}.down", ch[stage - 2], c)
            for i in range(cfg.blocks_per_stage):
                self._add_ss2d(rng, f"stage{stage}.block{i}", c)
            prefix = f"stage{stage}.tasb"
            self._add_ss2d(rng, f"{prefix}.ss2d", c)
            self._add_ssm(rng, f"{prefix}.traj", 1, c)
            for name, value in init_tasb(rng, c, cfg.c_w, cfg.ssm.ratio, self.dtype, cfg.lambda_init).items():
                self._add(f"{prefix}.{name}", value)
            self._add_substitute(rng, prefix, c)
        for stage in range(NUM_STAGES - 1, 0, -1):
            self._add_conv_bn(rng, f"decoder{stage}", ch[stage] + ch[stage - 1], ch[stage - 1])
        self._add("head.w", rng.normal(0, np.sqrt(1.0 / ch[0]), size=(1, ch[0], 1, 1)))
        self._add("head.b", np.full(1, HEAD_PRIOR))
        self._add("response.scale", np.asarray(1.0))
        self._add("response.bias", np.asarray(0.0))
        log.debug("built model with %d parameters in %d tensors", self.parameter_count(), len(self.params))

    def _add_substitute(self, rng, prefix: str, c: int):
        variant = self.cfg.tasb_variant
        if variant == "resblock":
            self._add_conv_bn(rng, f"{prefix}.resblock.conv1", c, c)
            self._add_conv_bn(rng, f"{prefix}.resblock.conv2", c, c)
        elif variant == "bottleneck":
            r = c // self.cfg.ssm.ratio
            self._add_conv_bn(rng, f"{prefix}.bottleneck.reduce", c, r, k=1)
            self._add_conv_bn(rng, f"{prefix}.bottleneck.mid", r, r)
            self._add_conv_bn(rng, f"{prefix}.bottleneck.expand", r, c, k=1)


def build_model(cfg: ModelConfig, seed: int = 0) -> TapmNet:
    return TapmNet(cfg, seed)


# --------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------
def save_checkpoint(model: TapmNet, path: str, run_cfg: Optional[RunConfig] = None,
                    optimizer_state: Optional[Mapping[str, np.ndarray]] = None) -> str:
    run_cfg = run_cfg or RunConfig(model=model.cfg)
    records = model.state_records()
    for name, value in (optimizer_state or {}).items():
        records[name if name.startswith("optim:") else f"optim:{name}"] = value
    data = checkpoint.CheckpointData(canonical_text(run_cfg), model.step, model.epoch, records)
    return checkpoint.write(path, data)


def load_checkpoint(path: str) -> Tuple[TapmNet, RunConfig, Dict[str, np.ndarray]]:
    """Model, run configuration and optimizer state stored at ``path``."""
    data = checkpoint.read(path)
    try:
        run_cfg = config_from_text(data.config_text)
    except ConfigError as e:
        raise CheckpointError(f"{path}: invalid config block ({e})")
    model = TapmNet(run_cfg.model)
    model.load_records(data.records)
    model.step, model.epoch = data.step, data.epoch
    optim = OrderedDict((k, v) for k, v in data.records.items() if k.startswith("optim:"))
    return model, run_cfg, optim

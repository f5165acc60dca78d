# config.py
"""
Configuration for tapm-net.

Two layers:
  * runtime settings read from the environment (and a local .env) once at import;
  * hyperparameter dataclasses, overridable from a flat ``key = value`` file whose
    keys are dotted paths (``model.channels = 32,64,128,256``, ``trace.eta = 0.5``,
    ``trace.stage3.l_max = 8``, ``loss.alpha = 0.5``).
"""
import os
import dataclasses
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

from dotenv import load_dotenv, dotenv_values

from errors import ConfigError
from utils import sha256_of_text

load_dotenv()
VERSION = "0.3.0"
WORKERS = int(os.environ.get("TAPM_WORKERS", "1"))
RUNS_DIR = os.environ.get("TAPM_RUNS_DIR", "runs")

NUM_STAGES = 4
TASB_VARIANTS = ("tasb", "resblock", "bottleneck")
PGM_VARIANTS = ("energy_only", "energy_traj", "full")


# --------------------------------------------------------------------
# Hyperparameter blocks
# --------------------------------------------------------------------
@dataclass
class TraceConfig:
    eta: float = 1.0
    epsilon: float = 1e-6
    l_max: int = 16
    decay_ratio: float = 0.2
    monotone: bool = True

    def validate(self):
        if self.eta <= 0:
            raise ConfigError("trace.eta must be > 0")
        if self.epsilon <= 0:
            raise ConfigError("trace.epsilon must be > 0")
        if self.l_max < 1:
            raise ConfigError("trace.l_max must be >= 1")
        if not 0 < self.decay_ratio < 1:
            raise ConfigError("trace.decay_ratio must lie in (0, 1)")


@dataclass
class SeedConfig:
    k_max: int = 8
    min_energy_frac: float = 0.3
    nms_radius: int = 2
    grad_mode: str = "central"

    def validate(self):
        if self.k_max < 1:
            raise ConfigError("seeds.k_max must be >= 1")
        if not 0 <= self.min_energy_frac <= 1:
            raise ConfigError("seeds.min_energy_frac must lie in [0, 1]")
        if self.nms_radius < 0:
            raise ConfigError("seeds.nms_radius must be >= 0")
        if self.grad_mode not in ("central", "sobel"):
            raise ConfigError(f"seeds.grad_mode must be central or sobel, got {self.grad_mode!r}")


@dataclass
class SSMConfig:
    d_state: int = 16
    ratio: int = 4
    zoh: bool = False
    selective: bool = False
    share_directions: bool = False

    def validate(self):
        if self.d_state < 1 or self.ratio < 1:
            raise ConfigError("ssm.d_state and ssm.ratio must be >= 1")


@dataclass
class ModelConfig:
    height: int = 64
    width: int = 64
    channels: Tuple[int, ...] = (32, 64, 128, 256)
    stem_stride: int = 2
    blocks_per_stage: int = 2
    n: int = 16
    m: int = 16
    c_w: int = 32
    use_pgm: bool = True
    use_tasb: bool = True
    tasb_variant: str = "tasb"
    pgm_variant: str = "full"
    lambda_init: float = 0.5
    dtype: str = "float32"
    trace: TraceConfig = field(default_factory=TraceConfig)
    stage_traces: Dict[int, TraceConfig] = field(default_factory=dict)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    ssm: SSMConfig = field(default_factory=SSMConfig)

    def stage_scale(self, stage: int) -> int:
        """Total downsampling of encoder stage ``stage`` (1-based) relative to the input."""
        return self.stem_stride * 2 ** (stage - 1)

    def stage_size(self, stage: int) -> Tuple[int, int]:
        s = self.stage_scale(stage)
        return self.height // s, self.width // s

    def trace_for(self, stage: int) -> TraceConfig:
        cfg = self.stage_traces.get(stage, self.trace)
        if self.pgm_variant == "energy_only":
            return dataclasses.replace(cfg, l_max=1)
        return cfg

    def validate(self):
        if len(self.channels) != NUM_STAGES:
            raise ConfigError(f"model.channels needs {NUM_STAGES} entries, got {len(self.channels)}")
        if any(b < a for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigError("model.channels must be non-decreasing across stages")
        total = self.stage_scale(NUM_STAGES)
        for name, size in (("height", self.height), ("width", self.width)):
            if size % total:
                raise ConfigError(f"model.{name}={size} is not divisible by the total downsampling {total}")
        if self.tasb_variant not in TASB_VARIANTS:
            raise ConfigError(f"model.tasb_variant must be one of {TASB_VARIANTS}")
        if self.pgm_variant not in PGM_VARIANTS:
            raise ConfigError(f"model.pgm_variant must be one of {PGM_VARIANTS}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("model.dtype must be float32 or float64")
        for c in self.channels:
            if c % self.ssm.ratio:
                raise ConfigError(f"stage width {c} is not divisible by ssm.ratio={self.ssm.ratio}")
        self.trace.validate()
        for cfg in self.stage_traces.values():
            cfg.validate()
        self.seeds.validate()
        self.ssm.validate()


@dataclass
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.5
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    cosine: bool = True
    clip_norm: float = 5.0
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    threshold: float = 0.5

    def validate(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss.alpha and loss.beta must be >= 0")
        if self.lr < 0:
            raise ConfigError("loss.lr must be >= 0")
        if self.optimizer not in ("adam", "momentum"):
            raise ConfigError("loss.optimizer must be adam or momentum")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("loss.batch_size must be >= 1 and loss.epochs >= 0")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.loss.validate()
        return self


# --------------------------------------------------------------------
# Flat key = value rendering
# --------------------------------------------------------------------
def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw: str, current, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r}") from None


def _flatten(prefix: str, obj, out: Dict[str, str]):
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}.{f.name}"
        if f.name == "stage_traces":
            for stage in sorted(value):
                _flatten(f"trace.stage{stage}", value[stage], out)
        elif dataclasses.is_dataclass(value):
            _flatten(f.name, value, out)
        else:
            out[key] = _format_value(value)


def flatten_config(cfg: RunConfig) -> Dict[str, str]:
    out: Dict[str, str] = {}
    _flatten("model", cfg.model, out)
    _flatten("loss", cfg.loss, out)
    return dict(sorted(out.items()))


def canonical_text(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in flatten_config(cfg).items())


def config_hash(cfg: RunConfig) -> str:
    return sha256_of_text(canonical_text(cfg))[:12]


def _target_for(cfg: RunConfig, key: str):
    parts = key.split(".")
    if len(parts) == 2 and parts[0] in ("model", "loss"):
        return getattr(cfg, parts[0]), parts[1]
    if len(parts) == 2 and parts[0] in ("trace", "seeds", "ssm"):
        return getattr(cfg.model, parts[0]), parts[1]
    if len(parts) == 3 and parts[0] == "trace" and parts[1].startswith("stage"):
        try:
            stage = int(parts[1][len("stage"):])
        except ValueError:
            raise ConfigError(f"unknown config key: {key}") from None
        if not 1 <= stage <= NUM_STAGES:
            raise ConfigError(f"unknown config key: {key}")
        if stage not in cfg.model.stage_traces:
            cfg.model.stage_traces[stage] = dataclasses.replace(cfg.model.trace)
        return cfg.model.stage_traces[stage], parts[2]
    raise ConfigError(f"unknown config key: {key}")


def apply_overrides(cfg: RunConfig, values: Mapping[str, Optional[str]]) -> RunConfig:
    for key, raw in values.items():
        if raw is None:
            raise ConfigError(f"config key without value: {key}")
        target, name = _target_for(cfg, key)
        if name not in {f.name for f in dataclasses.fields(target)} or name == "stage_traces":
            raise ConfigError(f"unknown config key: {key}")
        current = getattr(target, name)
        if dataclasses.is_dataclass(current):
            raise ConfigError(f"config key names a section, not a value: {key}")
        setattr(target, name, _parse_value(raw, current, key))
    return cfg


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, str]] = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        apply_overrides(cfg, dotenv_values(path))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()


def config_from_text(text: str) -> RunConfig:
    values = {}
    for line in text.splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"malformed config line: {line!r}")
        values[key.strip()] = raw.strip()
    return apply_overrides(RunConfig(), values).validate()


def header_line(digest: str) -> str:
    """Provenance line carried by every text output."""
    return f"# tapm-net {VERSION} config={digest}"

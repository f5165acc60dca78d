# tests/conftest.py
"""Shared fixtures: seeded generators, a central-difference gradient checker, tiny configs."""
import numpy as np
import pytest

from config import ModelConfig, RunConfig, SSMConfig
from tensor_ops import gradient_of

FD_STEP = 1e-3
FD_RTOL = 1e-3


def numeric_gradient(fn, x: np.ndarray, indices=None, step: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar fn(x) at the given flat indices (all when None), in float64."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    indices = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size)
    for i in indices:
        keep = flat[i]
        flat[i] = keep + step
        up = float(fn(x))
        flat[i] = keep - step
        down = float(fn(x))
        flat[i] = keep
        out[i] = (up - down) / (2 * step)
    return out.reshape(x.shape)


def assert_close_gradients(analytic, numeric, rtol: float = FD_RTOL, atol: float = 1e-6, label: str = ""):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    err = np.abs(analytic - numeric)
    bound = rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + atol
    worst = int(np.argmax(err - bound)) if err.size else 0
    assert np.all(err <= bound), (f"{label}: gradient mismatch at flat index {worst}: "
                                  f"analytic {analytic.ravel()[worst]}, numeric {numeric.ravel()[worst]}")


def check_kernel_gradients(op, inputs, rng, static=None, max_entries: int = 40, rtol: float = FD_RTOL,
                           atol: float = 1e-6):
    """Compare gradient_of(op) with central differences of sum(upstream * op(...)) for every input."""
    static = static or {}
    inputs = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    base = op.raw(*inputs.values(), **static)[0]
    upstream = rng.normal(size=np.shape(base))
    pair = gradient_of(op, inputs, upstream, **static)
    for name, value in inputs.items():
        def scalar(v, name=name):
            args = dict(inputs, **{name: v})
            return np.sum(op.raw(*args.values(), **static)[0] * upstream)
        picks = rng.choice(value.size, size=min(max_entries, value.size), replace=False)
        numeric = numeric_gradient(scalar, value, picks)
        assert_close_gradients(pair.grads[name].reshape(-1)[picks], numeric.reshape(-1)[picks], rtol, atol, name)
    return pair


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grad_check(rng):
    def run(op, inputs, static=None, **kw):
        return check_kernel_gradients(op, inputs, rng, static, **kw)
    return run


def tiny_model_config(size: int = 32, dtype: str = "float32", **overrides) -> ModelConfig:
    """A small but complete network: four stages, every module active."""
    cfg = ModelConfig(height=size, width=size, channels=(8, 8, 16, 16), blocks_per_stage=1, n=4, m=4, c_w=8,
                      dtype=dtype, ssm=SSMConfig(d_state=4, ratio=4))
    for key, value in overrides.items():
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def tiny_run_config():
    cfg = RunConfig(model=tiny_model_config())
    cfg.loss.epochs = 2
    cfg.loss.batch_size = 2
    return cfg.validate()

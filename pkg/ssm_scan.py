# ssm_scan.py
"""
Selective state-space scan and its 2-D use (cross-scan, per-direction scans,
cross-merge).

Recurrence over a token sequence f_1..f_L (per group k):

    h_0 = 0
    h_j = exp(delta * A) * h_{j-1} + delta * (B f_j)      (Euler input, default)
    h_j = exp(delta * A) * h_{j-1} + ((exp(delta*A) - 1) / A) * (B f_j)   (zoh=True)
    y_j = C h_j + D f_j

A is diagonal, stored as a_raw with A = -softplus(a_raw) <= 0. delta = softplus(delta_raw),
or softplus(delta_raw + W_delta f_j) in the selective variant.

Grouped layout: tokens are [B, K, L, I] and every parameter carries a leading group
axis K (the four scan directions, or K = 1). The scan loop over j is the serial
critical path; batch and group axes are vectorized.
"""
import functools
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from errors import ConfigError
from tensor_ops import Node, add, broadcast_to, grouped_linear, kernel, layer_norm, reshape

DIRECTIONS = ("horizontal", "vertical", "diagonal", "anti_diagonal")


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


# --------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------
@dataclass
class SSMParams:
    a_raw: Node  # [K, S]
    delta_raw: Node  # [K, S]
    b: Node  # [K, S, I]
    c: Node  # [K, O, S]
    d: Node  # [K, O, I]
    reduce: Optional[Node] = None  # [K, R, C]
    expand: Optional[Node] = None  # [K, C, R]
    w_delta: Optional[Node] = None  # [K, S, I]

    FIELDS = ("a_raw", "delta_raw", "b", "c", "d", "reduce", "expand", "w_delta")

    @property
    def groups(self) -> int:
        return self.a_raw.shape[0]

    @classmethod
    def from_store(cls, store: Dict[str, Node], prefix: str) -> "SSMParams":
        return cls(**{f: store.get(f"{prefix}.{f}") for f in cls.FIELDS})

    def expanded(self, groups: int) -> "SSMParams":
        """Same parameters repeated over ``groups`` (for direction sharing)."""
        if self.groups == groups:
            return self
        values = {}
        for f in self.FIELDS:
            p = getattr(self, f)
            values[f] = None if p is None else broadcast_to(p, shape=(groups,) + tuple(p.shape[1:]))
        return SSMParams(**values)


def init_ssm(rng: np.random.Generator, groups: int, width: int, ratio: int, d_state: int,
             selective: bool = False, dtype=np.float32) -> Dict[str, np.ndarray]:
    """Initial values keyed by SSMParams field name."""
    if width % ratio:
        raise ConfigError(f"channel width {width} is not divisible by bottleneck ratio {ratio}")
    r = width // ratio
    a = np.tile(np.arange(1, d_state + 1, dtype=np.float64), (groups, 1))
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=(groups, d_state)))
    values = {
        "a_raw": inverse_softplus(a),
        "delta_raw": inverse_softplus(dt),
        "b": rng.normal(0, 1 / np.sqrt(r), size=(groups, d_state, r)),
        "c": rng.normal(0, 1 / np.sqrt(d_state), size=(groups, r, d_state)),
        "d": np.tile(np.eye(r), (groups, 1, 1)),
        "reduce": rng.normal(0, 1 / np.sqrt(width), size=(groups, r, width)),
        "expand": rng.normal(0, 1 / np.sqrt(r), size=(groups, width, r)),
    }
    if selective:
        values["w_delta"] = rng.normal(0, 0.1 / np.sqrt(r), size=(groups, d_state, r))
    return {k: v.astype(dtype) for k, v in values.items()}


# --------------------------------------------------------------------
# Scan
# --------------------------------------------------------------------
@kernel
def selective_scan(tokens, a_raw, delta_raw, b_mat, c_mat, d_mat, w_delta=None, *, zoh=False):
    """tokens [B, K, L, I] -> outputs [B, K, L, O]."""
    bt, k, length, _ = tokens.shape
    s = a_raw.shape[-1]
    a = -_softplus(a_raw)[None, :, None, :]
    pre = delta_raw[None, :, None, :]
    if w_delta is not None:
        pre = pre + np.einsum("bkli,ksi->bkls", tokens, w_delta, optimize=True)
    pre = np.broadcast_to(pre, (bt, k, length, s))
    delta = _softplus(pre)
    decay = np.exp(delta * a)
    bf = np.einsum("bkli,ksi->bkls", tokens, b_mat, optimize=True)
    coef = (decay - 1.0) / a if zoh else delta
    u = coef * bf
    hs = np.empty_like(u)
    h = np.zeros((bt, k, s), dtype=u.dtype)
    for j in range(length):
        h = decay[:, :, j] * h + u[:, :, j]
        hs[:, :, j] = h
    y = (np.einsum("bkls,kos->bklo", hs, c_mat, optimize=True)
         + np.einsum("bkli,koi->bklo", tokens, d_mat, optimize=True))

    def vjp(g):
        gc = np.einsum("bklo,bkls->kos", g, hs, optimize=True)
        gd = np.einsum("bklo,bkli->koi", g, tokens, optimize=True)
        gh_out = np.einsum("bklo,kos->bkls", g, c_mat, optimize=True)
        gtok = np.einsum("bklo,koi->bkli", g, d_mat, optimize=True)
        gu = np.empty_like(u)
        gdecay = np.zeros_like(decay)
        carry = np.zeros((bt, k, s), dtype=u.dtype)
        for j in range(length - 1, -1, -1):
            gh = gh_out[:, :, j] + carry
            gu[:, :, j] = gh
            if j > 0:
                gdecay[:, :, j] = gh * hs[:, :, j - 1]
            carry = gh * decay[:, :, j]
        gcoef = gu * bf
        gbf = gu * coef
        gb = np.einsum("bkls,bkli->ksi", gbf, tokens, optimize=True)
        gtok = gtok + np.einsum("bkls,ksi->bkli", gbf, b_mat, optimize=True)
        gdelta = gdecay * decay * a
        ga = (gdecay * decay * delta).sum(axis=(0, 2))
        if zoh:
            gdelta = gdelta + gcoef * decay
            ga = ga + (gcoef * (delta * a * decay - (decay - 1.0)) / (a * a)).sum(axis=(0, 2))
        else:
            gdelta = gdelta + gcoef
        gpre = gdelta * _sigmoid(pre)
        gw = None
        if w_delta is not None:
            gw = np.einsum("bkls,bkli->ksi", gpre, tokens, optimize=True)
            gtok = gtok + np.einsum("bkls,ksi->bkli", gpre, w_delta, optimize=True)
        return gtok, ga * -_sigmoid(a_raw), gpre.sum(axis=(0, 2)), gb, gc, gd, gw
    return y, vjp


def _as_grouped(tokens):
    if len(tokens.shape) == 2:
        return reshape(tokens, shape=(1, 1) + tuple(tokens.shape)), True
    return tokens, False


def scan(params: SSMParams, tokens, zoh: bool = False):
    """Run the recurrence. tokens [L, I] (single group) or [B, K, L, I]."""
    x, single = _as_grouped(tokens)
    y = selective_scan(x, params.a_raw, params.delta_raw, params.b, params.c, params.d, params.w_delta, zoh=zoh)
    return reshape(y, shape=tuple(y.shape[2:])) if single else y


def bottleneck_scan(params: SSMParams, tokens, zoh: bool = False):
    """expand(scan(reduce(tokens))): width C -> C / r -> state update -> C."""
    x, single = _as_grouped(tokens)
    width, reduced = x.shape[-1], params.reduce.shape[-2]
    if params.reduce.shape[-1] != width or width % reduced:
        raise ConfigError(f"bottleneck: width {width} does not fit reduce projection {params.reduce.shape}")
    y = grouped_linear(x, params.reduce)
    y = scan(params, y, zoh)
    y = grouped_linear(y, params.expand)
    return reshape(y, shape=tuple(y.shape[2:])) if single else y


# --------------------------------------------------------------------
# Cross-scan / cross-merge
# --------------------------------------------------------------------
@functools.lru_cache(maxsize=64)
def direction_orders(height: int, width: int) -> np.ndarray:
    """Row-major grid indices in the four scan orders -> [4, H * W].

    horizontal: rows top to bottom, each left to right.
    vertical: columns left to right, each top to bottom.
    diagonal: anti-diagonals (y + x = s) for s ascending, each from its top-right
        cell down to its bottom-left cell.
    anti_diagonal: diagonals (x - y = d) from the top-right corner (d = W - 1) to the
        bottom-left corner, each top to bottom.
    """
    grid = np.arange(height * width).reshape(height, width)
    ys, xs = np.divmod(np.arange(height * width), width)
    diagonal = np.lexsort((ys, ys + xs))
    anti = np.lexsort((ys, -(xs - ys)))
    orders = np.stack([grid.ravel(), grid.T.ravel(), grid.ravel()[diagonal], grid.ravel()[anti]])
    orders.setflags(write=False)
    return orders


@dataclass
class DirectionalSequences:
    sequences: Node  # [N, 4, H * W, C]
    index_maps: np.ndarray  # [4, H * W]
    height: int
    width: int


@kernel
def unfold(feature, *, orders):
    n, c = feature.shape[:2]
    flat = feature.reshape(n, c, -1)
    seqs = flat[:, :, orders].transpose(0, 2, 3, 1)

    def vjp(g):
        gflat = np.zeros_like(flat)
        gt = g.transpose(0, 1, 3, 2)
        for k in range(orders.shape[0]):
            gflat[:, :, orders[k]] += gt[:, k]
        return (gflat.reshape(feature.shape),)
    return np.ascontiguousarray(seqs), vjp


@kernel
def refold(outputs, *, orders, height, width):
    """Scatter each direction back through its index map and average the grids."""
    n, k, _, c = outputs.shape
    flat = np.zeros((n, c, height * width), dtype=outputs.dtype)
    for i in range(k):
        flat[:, :, orders[i]] += outputs[:, i].transpose(0, 2, 1)
    flat /= k

    def vjp(g):
        gflat = g.reshape(n, c, -1)
        gout = np.stack([gflat[:, :, orders[i]].transpose(0, 2, 1) for i in range(k)], axis=1)
        return (gout / k,)
    return flat.reshape(n, c, height, width), vjp


def cross_scan(feature) -> DirectionalSequences:
    if len(feature.shape) == 3:
        feature = reshape(feature, shape=(1,) + tuple(feature.shape))
    h, w = feature.shape[-2:]
    orders = direction_orders(h, w)
    return DirectionalSequences(unfold(feature, orders=orders), orders, h, w)


def cross_merge(sequences: DirectionalSequences, outputs):
    """outputs [N, 4, H * W, C] aligned with ``sequences`` -> [N, C, H, W]."""
    return refold(outputs, orders=sequences.index_maps, height=sequences.height, width=sequences.width)


@dataclass
class SS2DParams:
    ssm: SSMParams
    ln_gamma: Node
    ln_beta: Node

    @classmethod
    def from_store(cls, store: Dict[str, Node], prefix: str) -> "SS2DParams":
        return cls(SSMParams.from_store(store, f"{prefix}.ssm"), store[f"{prefix}.ln_gamma"], store[f"{prefix}.ln_beta"])


def ss2d(feature, params: SS2DParams, zoh: bool = False):
    """layernorm(F + cross_merge(bottleneck_scan per direction(cross_scan(F))))."""
    single = len(feature.shape) == 3
    x = reshape(feature, shape=(1,) + tuple(feature.shape)) if single else feature
    seqs = cross_scan(x)
    y = bottleneck_scan(params.ssm.expanded(len(DIRECTIONS)), seqs.sequences, zoh)
    out = layer_norm(add(x, cross_merge(seqs, y)), params.ln_gamma, params.ln_beta)
    return reshape(out, shape=tuple(feature.shape)) if single else out


def scan_reference(params: Dict[str, np.ndarray], tokens: np.ndarray, zoh: bool = False) -> np.ndarray:
    """Step-by-step float64 recurrence for one group: tokens [L, I] -> [L, O]."""
    a = -np.logaddexp(0.0, np.asarray(params["a_raw"], np.float64).reshape(-1))
    b = np.asarray(params["b"], np.float64).reshape(a.size, -1)
    c = np.asarray(params["c"], np.float64).reshape(-1, a.size)
    d = np.asarray(params["d"], np.float64).reshape(c.shape[0], b.shape[1])
    raw = np.asarray(params["delta_raw"], np.float64).reshape(-1)
    w_delta = params.get("w_delta")
    h = np.zeros(a.size)
    out = []
    for f in np.asarray(tokens, np.float64):
        pre = raw + (np.asarray(w_delta, np.float64).reshape(a.size, -1) @ f if w_delta is not None else 0.0)
        delta = np.logaddexp(0.0, pre)
        decay = np.exp(delta * a)
        coef = (decay - 1.0) / a if zoh else delta
        h = decay * h + coef * (b @ f)
        out.append(c @ h + d @ f)
    return np.array(out)

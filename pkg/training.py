# training.py
"""
Losses, metrics and the train / evaluate loops.

    L_seg   = mean BCE(sigmoid(logits), M) + alpha * (1 - (2 sum(p t) + 1) / (sum p + sum t + 1))
    L_PGM   = mean BCE(G_hat, M), probabilities clamped to [1e-7, 1 - 1e-7]
    L_total = L_seg + beta * L_PGM

Metrics on binary masks, components 8-connected:
    IoU  = |P & G| / |P | G| over the whole set (1 when both are empty)
    nIoU = mean over ground-truth components of IoU(component, predicted components touching it)
    Pd   = detected / total targets; a target is detected when an unmatched predicted
           component has its centroid within 3 px of the target centroid
    Fa   = false-positive pixels / pixels
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from config import WORKERS, LossConfig, RunConfig
from errors import DataError, NumericError
from helpers.components import component_regions, label_components
from network import TapmNet, save_checkpoint
from tensor_ops import Node, add, kernel, mul, value_of
from utils import chunk_indices, derive_seeds, get_logger

log = get_logger("training")
DICE_SMOOTH = 1.0
PROB_CLAMP = 1e-7
PD_DISTANCE = 3.0
ROC_THRESHOLDS = tuple(np.round(np.arange(1, 20) * 0.05, 2))


# --------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------
def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


@kernel
def seg_loss(logits, target, *, alpha=0.5):
    if logits.shape != target.shape:
        raise DataError(f"seg_loss: logits {logits.shape} and mask {target.shape} differ")
    count = logits.size
    p = _sigmoid(logits)
    bce = (np.maximum(logits, 0) - logits * target + np.log1p(np.exp(-np.abs(logits)))).mean()
    num = 2.0 * (p * target).sum() + DICE_SMOOTH
    den = p.sum() + target.sum() + DICE_SMOOTH
    out = np.asarray(bce + alpha * (1.0 - num / den), dtype=logits.dtype)

    def vjp(g):
        d_dice = -(2.0 * target * den - num) / (den * den)
        grad = (p - target) / count + alpha * d_dice * p * (1.0 - p)
        return (g * grad).astype(logits.dtype), None
    return out, vjp


@kernel
def pgm_loss(response, target):
    if response.shape != target.shape:
        raise DataError(f"pgm_loss: response {response.shape} and mask {target.shape} differ")
    c = np.clip(response, PROB_CLAMP, 1.0 - PROB_CLAMP)
    out = np.asarray(-(target * np.log(c) + (1.0 - target) * np.log(1.0 - c)).mean(), dtype=response.dtype)

    def vjp(g):
        inside = (response > PROB_CLAMP) & (response < 1.0 - PROB_CLAMP)
        grad = (-target / c + (1.0 - target) / (1.0 - c)) * inside / response.size
        return (g * grad).astype(response.dtype), None
    return out, vjp


def total_loss(seg, pgm, beta: float):
    return add(seg, mul(pgm, np.asarray(beta, dtype=np.asarray(value_of(seg)).dtype)))


# --------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------
@dataclass
class MetricReport:
    iou: float = 1.0
    niou: float = 1.0
    pd: float = 1.0
    fa: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    detected: int = 0
    targets: int = 0
    false_alarm_pixels: int = 0
    pixels: int = 0

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)

    def to_text(self) -> str:
        return (f"IoU  {100 * self.iou:6.2f}\nnIoU {100 * self.niou:6.2f}\n"
                f"Pd   {100 * self.pd:6.2f}  ({self.detected}/{self.targets} targets)\n"
                f"Fa   {1e6 * self.fa:8.2f} x 1e-6  ({self.false_alarm_pixels}/{self.pixels} pixels)\n")

    def to_kv(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.as_dict().items())


@dataclass
class ImageCounts:
    tp: int
    fp: int
    fn: int
    detected: int
    targets: int
    pixels: int
    target_ious: List[float] = field(default_factory=list)


def _image_counts(pred: np.ndarray, gt: np.ndarray) -> ImageCounts:
    pred = np.asarray(pred).astype(bool).squeeze()
    gt = np.asarray(gt).astype(bool).squeeze()
    if pred.shape != gt.shape:
        raise DataError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    tp = int(np.sum(pred & gt))
    fp = int(np.sum(pred & ~gt))
    fn = int(np.sum(~pred & gt))
    gt_labels, n_gt = label_components(gt)
    pred_labels, _ = label_components(pred)
    ious = []
    for k in range(1, n_gt + 1):
        comp = gt_labels == k
        touching = np.unique(pred_labels[comp & pred])
        matched = np.isin(pred_labels, touching[touching > 0])
        union = np.sum(comp | matched)
        ious.append(float(np.sum(comp & matched) / union) if union else 0.0)
    gt_regions = component_regions(gt)
    pred_regions = list(component_regions(pred))
    detected = 0
    for region in gt_regions:
        centroid = np.asarray(region.centroid)
        for i, cand in enumerate(pred_regions):
            if np.linalg.norm(np.asarray(cand.centroid) - centroid) <= PD_DISTANCE:
                detected += 1
                del pred_regions[i]
                break
    return ImageCounts(tp, fp, fn, detected, n_gt, pred.size, ious)


def _report(counts: Sequence[ImageCounts]) -> MetricReport:
    tp = sum(c.tp for c in counts)
    fp = sum(c.fp for c in counts)
    fn = sum(c.fn for c in counts)
    targets = sum(c.targets for c in counts)
    detected = sum(c.detected for c in counts)
    pixels = sum(c.pixels for c in counts)
    ious = [v for c in counts for v in c.target_ious]
    union = tp + fp + fn
    return MetricReport(
        iou=tp / union if union else 1.0,
        niou=float(np.mean(ious)) if ious else (1.0 if fp == 0 else 0.0),
        pd=detected / targets if targets else 1.0,
        fa=fp / pixels if pixels else 0.0,
        tp=tp, fp=fp, fn=fn, detected=detected, targets=targets,
        false_alarm_pixels=fp, pixels=pixels,
    )


def compute_metrics(pred_mask: np.ndarray, gt_mask: np.ndarray) -> MetricReport:
    """Metrics of one binary prediction against its ground truth."""
    return _report([_image_counts(pred_mask, gt_mask)])


class MetricAccumulator:
    """Dataset-level metrics: pixel counts and target lists pooled over images."""

    def __init__(self):
        self.counts: List[ImageCounts] = []

    def update(self, preds: np.ndarray, gts: np.ndarray):
        pairs = list(zip(preds, gts))
        if WORKERS > 1 and len(pairs) > 1:
            with ThreadPoolExecutor(max_workers=WORKERS) as pool:
                self.counts.extend(pool.map(lambda pg: _image_counts(*pg), pairs))
        else:
            self.counts.extend(_image_counts(p, g) for p, g in pairs)

    def report(self) -> MetricReport:
        return _report(self.counts)


def roc_curve(probs: np.ndarray, gts: np.ndarray, thresholds: Sequence[float] = ROC_THRESHOLDS
              ) -> List[Tuple[float, float, float]]:
    """Pixel-level (threshold, FPR, TPR) rows, thresholds ascending."""
    probs = np.asarray(probs, dtype=np.float64).ravel()
    gts = np.asarray(gts).astype(bool).ravel()
    pos, neg = int(gts.sum()), int((~gts).sum())
    rows = []
    for t in sorted(thresholds):
        pred = probs > t
        tpr = np.sum(pred & gts) / pos if pos else 0.0
        fpr = np.sum(pred & ~gts) / neg if neg else 0.0
        rows.append((float(t), float(fpr), float(tpr)))
    return rows


# --------------------------------------------------------------------
# Optimizers
# --------------------------------------------------------------------
def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale all gradients so their global L2 norm is at most ``max_norm`` (<= 0 disables)."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm <= 0 or norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / (norm + 1e-12)
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, norm


class Optimizer:
    def __init__(self, params: Mapping[str, Node], cfg: LossConfig, total_steps: int):
        self.params = params
        self.cfg = cfg
        self.total_steps = max(int(total_steps), 1)
        self.t = 0

    def lr_at(self, t: int) -> float:
        if not self.cfg.cosine:
            return self.cfg.lr
        progress = min(t / self.total_steps, 1.0)
        return self.cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))

    def step(self, grads: Mapping[str, np.ndarray]):
        lr = self.lr_at(self.t)
        self.t += 1
        for name, node in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            update = self._update(name, np.asarray(g, dtype=node.value.dtype))
            node.value = (node.value - node.value.dtype.type(lr) * update).astype(node.value.dtype)

    def _update(self, name: str, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {"optim:t": np.asarray([self.t], dtype=np.float32)}

    def load_state_dict(self, state: Mapping[str, np.ndarray]):
        if "optim:t" in state:
            self.t = int(np.asarray(state["optim:t"]).ravel()[0])


class Adam(Optimizer):
    def __init__(self, params, cfg, total_steps):
        super().__init__(params, cfg, total_steps)
        self.m = {k: np.zeros_like(v.value) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.value) for k, v in params.items()}

    def _update(self, name, g):
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        self.m[name] = (b1 * self.m[name] + (1 - b1) * g).astype(g.dtype)
        self.v[name] = (b2 * self.v[name] + (1 - b2) * g * g).astype(g.dtype)
        m_hat = self.m[name] / (1 - b1 ** self.t)
        v_hat = self.v[name] / (1 - b2 ** self.t)
        return m_hat / (np.sqrt(v_hat) + 1e-8)

    def state_dict(self):
        state = super().state_dict()
        for k in self.params:
            state[f"optim:m.{k}"] = self.m[k]
            state[f"optim:v.{k}"] = self.v[k]
        return state

    def load_state_dict(self, state):
        super().load_state_dict(state)
        for k, node in self.params.items():
            if f"optim:m.{k}" in state:
                self.m[k] = np.asarray(state[f"optim:m.{k}"], dtype=node.value.dtype).reshape(node.value.shape)
                self.v[k] = np.asarray(state[f"optim:v.{k}"], dtype=node.value.dtype).reshape(node.value.shape)


class Momentum(Optimizer):
    def __init__(self, params, cfg, total_steps):
        super().__init__(params, cfg, total_steps)
        self.velocity = {k: np.zeros_like(v.value) for k, v in params.items()}

    def _update(self, name, g):
        self.velocity[name] = (self.cfg.momentum * self.velocity[name] + g).astype(g.dtype)
        return self.velocity[name]

    def state_dict(self):
        state = super().state_dict()
        state.update({f"optim:velocity.{k}": v for k, v in self.velocity.items()})
        return state

    def load_state_dict(self, state):
        super().load_state_dict(state)
        for k, node in self.params.items():
            if f"optim:velocity.{k}" in state:
                self.velocity[k] = np.asarray(state[f"optim:velocity.{k}"], dtype=node.value.dtype).reshape(
                    node.value.shape)


def make_optimizer(params: Mapping[str, Node], cfg: LossConfig, total_steps: int) -> Optimizer:
    return Adam(params, cfg, total_steps) if cfg.optimizer == "adam" else Momentum(params, cfg, total_steps)


# --------------------------------------------------------------------
# Loops
# --------------------------------------------------------------------
@dataclass
class TrainResult:
    model: TapmNet
    losses: List[float]  # one per step
    epoch_losses: List[float]
    reports: List[MetricReport]
    optimizer: Optional[Optimizer] = None


def stack_batch(samples: Sequence, dtype) -> Tuple[np.ndarray, np.ndarray]:
    images = np.stack([np.asarray(s.image, dtype=dtype) for s in samples])
    masks = np.stack([np.asarray(s.mask, dtype=dtype) for s in samples])
    return images, masks


def train_step(model: TapmNet, optimizer: Optimizer, images: np.ndarray, masks: np.ndarray, cfg: LossConfig,
               batch_index: int = 0) -> Tuple[float, float]:
    """One optimisation step -> (loss, gradient norm before clipping)."""
    for node in model.params.values():
        node.grad = None
    try:
        result = model.forward(images, "train")
        seg = seg_loss(result.logits, masks, alpha=cfg.alpha)
        loss = total_loss(seg, pgm_loss(result.response, masks), cfg.beta)
    except NumericError as e:
        raise NumericError(f"batch {batch_index}: {e}", batch_index) from e
    value = float(value_of(loss))
    if not math.isfinite(value):
        raise NumericError(f"batch {batch_index}: non-finite loss {value}", batch_index)
    if isinstance(loss, Node):
        loss.backward()
    grads = {k: (n.grad if n.grad is not None else np.zeros_like(n.value)) for k, n in model.params.items()}
    grads, norm = clip_gradients(grads, cfg.clip_norm)
    if not math.isfinite(norm):
        raise NumericError(f"batch {batch_index}: non-finite gradient norm", batch_index)
    optimizer.step(grads)
    model.step += 1
    return value, norm


def train(model: TapmNet, dataset: Sequence, cfg: RunConfig, checkpoint_path: Optional[str] = None,
          eval_set: Optional[Sequence] = None, optimizer_state: Optional[Mapping[str, np.ndarray]] = None,
          progress: bool = True) -> TrainResult:
    """Minimise L_total over ``dataset`` from ``model.epoch`` up to ``cfg.loss.epochs``.

    Batch order of epoch e depends only on (seed, e), so a run resumed from an
    epoch-boundary checkpoint replays the uninterrupted run exactly.
    """
    if not len(dataset):
        raise DataError("training set is empty")
    lc = cfg.loss
    batches_per_epoch = math.ceil(len(dataset) / lc.batch_size)
    optimizer = make_optimizer(model.params, lc, lc.epochs * batches_per_epoch)
    if optimizer_state:
        optimizer.load_state_dict(optimizer_state)
    epoch_seeds = derive_seeds(lc.seed, max(lc.epochs, 1))
    losses, epoch_losses, reports = [], [], []
    for epoch in range(model.epoch, lc.epochs):
        order = np.random.default_rng(epoch_seeds[epoch]).permutation(len(dataset))
        bar = tqdm(list(chunk_indices(len(dataset), lc.batch_size)), desc=f"epoch {epoch + 1}/{lc.epochs}",
                   disable=not progress, leave=False)
        epoch_loss = []
        for b, idx in enumerate(bar):
            images, masks = stack_batch([dataset[i] for i in order[idx]], model.dtype)
            loss, norm = train_step(model, optimizer, images, masks, lc, epoch * batches_per_epoch + b)
            losses.append(loss)
            epoch_loss.append(loss)
            bar.set_postfix(loss=f"{loss:.4f}", grad=f"{norm:.2f}")
        model.epoch = epoch + 1
        epoch_losses.append(float(np.mean(epoch_loss)))
        report = evaluate(model, eval_set if eval_set is not None else dataset, lc.threshold,
                          lc.batch_size, progress=False).report
        reports.append(report)
        log.info("epoch %d: loss %.4f  IoU %.4f  Pd %.4f  Fa %.2e", model.epoch, epoch_losses[-1],
                 report.iou, report.pd, report.fa)
        if checkpoint_path:
            save_checkpoint(model, checkpoint_path, cfg, optimizer.state_dict())
    return TrainResult(model, losses, epoch_losses, reports, optimizer)


@dataclass
class EvalResult:
    report: MetricReport
    roc: List[Tuple[float, float, float]] = field(default_factory=list)
    probs: Optional[np.ndarray] = None  # [N, 1, H, W]


def predict(model: TapmNet, images: np.ndarray, batch_size: int = 4) -> np.ndarray:
    """Foreground probabilities [N, 1, H, W] in eval mode."""
    out = []
    for idx in chunk_indices(len(images), batch_size):
        logits = value_of(model.forward(images[idx], "eval").logits)
        out.append(_sigmoid(np.asarray(logits, dtype=np.float64)))
    return np.concatenate(out)


def evaluate(model: TapmNet, dataset: Sequence, threshold: float = 0.5, batch_size: int = 4,
             roc: bool = False, progress: bool = True) -> EvalResult:
    """Metrics of ``model`` on ``dataset``; leaves the model untouched."""
    if not len(dataset):
        raise DataError("evaluation set is empty")
    acc = MetricAccumulator()
    all_probs = []
    for idx in tqdm(list(chunk_indices(len(dataset), batch_size)), desc="eval", disable=not progress, leave=False):
        images, masks = stack_batch([dataset[i] for i in idx], model.dtype)
        probs = predict(model, images, batch_size)
        acc.update(probs > threshold, masks > 0.5)
        all_probs.append(probs)
    probs = np.concatenate(all_probs)
    rows = []
    if roc:
        gts = np.stack([np.asarray(s.mask) > 0.5 for s in dataset])
        rows = roc_curve(probs, gts)
    return EvalResult(acc.report(), rows, probs)

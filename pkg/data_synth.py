# data_synth.py
"""
Synthetic infrared scenes with exact ground truth, and user image/mask pairs.

Scene = smooth gradient + two-octave value noise + optional broad clutter blobs
      + Gaussian targets + bounded uniform sensor noise.

A target of radius r at integer pixel (x, y) has profile peak * exp(-d^2 / (2 s^2))
with s = r / sqrt(2 ln 2), so the half-peak level sits exactly at d = r and its
mask is {d^2 <= r^2}. Every target centre is kept a strict local maximum; a scene
brighter than 1 is rescaled rather than clipped.
"""
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config import VERSION, WORKERS, header_line
from errors import ConfigError, DataError
from helpers.image_io import read_gray, write_gray
from tensor_ops import interp_matrix
from utils import derive_seeds, ensure_dir, get_logger, read_text_lines, sha256_of_text

log = get_logger("data_synth")

MIN_RADIUS, MAX_RADIUS = 1, 4
MAX_TARGETS = 3
TARGET_GAP = 6  # min Chebyshev gap between the edges of two target disks
BACKGROUND_RANGE = (0.05, 0.35)
TEXTURE_AMPLITUDE = 0.05
CLUTTER_AMPLITUDE = (0.04, 0.10)
CLUTTER_SIGMA = (3.0, 6.0)
PEAK_SPREAD = 0.15
DEFAULT_MARGIN = 0.3
LIFT = 1.0 / 255.0
TRAIN_FRACTION = 0.8
SPLITS = ("train", "test")


@dataclass(frozen=True)
class Target:
    x: int
    y: int
    radius: int
    peak: float

    @property
    def sigma(self) -> float:
        return self.radius / math.sqrt(2.0 * math.log(2.0))


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    targets: List[Target] = field(default_factory=list)
    background_level: float = 0.2
    gradient: Tuple[float, float] = (0.05, 0.0)  # (d/dx, d/dy) over the full image
    texture: float = TEXTURE_AMPLITUDE
    clutter: int = 0
    noise: float = 0.02
    contrast_margin: float = DEFAULT_MARGIN
    seed: int = 0

    def validate(self):
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"scene size must be positive, got {self.height}x{self.width}")
        for t in self.targets:
            if not (0 <= t.x < self.width and 0 <= t.y < self.height):
                raise ConfigError(f"target at ({t.x}, {t.y}) lies outside the {self.width}x{self.height} scene")
            if not MIN_RADIUS <= t.radius <= MAX_RADIUS:
                raise ConfigError(f"target radius {t.radius} outside [{MIN_RADIUS}, {MAX_RADIUS}]")
            if t.peak < self.contrast_margin:
                raise ConfigError(f"target peak {t.peak} below the contrast margin {self.contrast_margin}")


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] in [0, 1]
    mask: np.ndarray  # [1, H, W] in {0, 1}
    spec: Optional[SceneSpec] = None
    name: str = ""


# --------------------------------------------------------------------
# Scene synthesis
# --------------------------------------------------------------------
def _value_noise(rng: np.random.Generator, height: int, width: int, cells: int) -> np.ndarray:
    """Coarse random lattice bilinearly upsampled to the scene -> [-1, 1]."""
    coarse = rng.uniform(-1.0, 1.0, size=(cells, cells))
    ry = interp_matrix(cells, height, np.float64)
    rx = interp_matrix(cells, width, np.float64)
    return ry @ coarse @ rx.T


def _gaussian(height: int, width: int, cx: float, cy: float, sigma: float) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma * sigma))


def target_mask(spec: SceneSpec) -> np.ndarray:
    """Union of half-peak disks -> [H, W] bool."""
    ys, xs = np.mgrid[0:spec.height, 0:spec.width]
    mask = np.zeros((spec.height, spec.width), dtype=bool)
    for t in spec.targets:
        mask |= (xs - t.x) ** 2 + (ys - t.y) ** 2 <= t.radius ** 2
    return mask


def _lift_centres(img: np.ndarray, targets: Sequence[Target]):
    """Raise each target centre just above its 8-neighbourhood where noise flattened it."""
    h, w = img.shape
    for t in targets:
        y0, y1 = max(t.y - 1, 0), min(t.y + 2, h)
        x0, x1 = max(t.x - 1, 0), min(t.x + 2, w)
        window = img[y0:y1, x0:x1].copy()
        window[t.y - y0, t.x - x0] = -np.inf
        top = window.max()
        if img[t.y, t.x] <= top:
            img[t.y, t.x] = top + LIFT


def generate(spec: SceneSpec) -> Sample:
    spec.validate()
    h, w = spec.height, spec.width
    rng = np.random.default_rng(spec.seed)
    ys, xs = np.mgrid[0:h, 0:w]
    gx, gy = spec.gradient
    img = spec.background_level + gx * (xs / max(w - 1, 1) - 0.5) + gy * (ys / max(h - 1, 1) - 0.5)
    img = img + spec.texture * (0.6 * _value_noise(rng, h, w, 4) + 0.4 * _value_noise(rng, h, w, 8))
    for _ in range(spec.clutter):
        amp = rng.uniform(*CLUTTER_AMPLITUDE)
        sigma = rng.uniform(*CLUTTER_SIGMA)
        img = img + amp * _gaussian(h, w, rng.uniform(0, w - 1), rng.uniform(0, h - 1), sigma)
    for t in spec.targets:
        img = img + t.peak * _gaussian(h, w, t.x, t.y, t.sigma)
    img = img + rng.uniform(-spec.noise, spec.noise, size=(h, w))
    _lift_centres(img, spec.targets)
    img = np.clip(img / max(1.0, float(img.max())), 0.0, 1.0).astype(np.float32)
    mask = target_mask(spec).astype(np.float32)
    return Sample(np.repeat(img[None], 3, axis=0), mask[None], spec)


def random_spec(rng: np.random.Generator, size: int = 64, difficulty: float = 0.3, seed: int = 0) -> SceneSpec:
    """Scene with 1..3 well-separated targets; difficulty raises clutter and lowers contrast."""
    if not 0.0 <= difficulty <= 1.0:
        raise ConfigError(f"difficulty must lie in [0, 1], got {difficulty}")
    if size < 2 * MAX_RADIUS + 1:
        raise ConfigError(f"scene size {size} is too small for targets of radius {MAX_RADIUS}")
    margin = DEFAULT_MARGIN * (1.0 - 0.5 * difficulty)
    count = int(rng.integers(1, MAX_TARGETS + 1))
    targets: List[Target] = []
    attempts = 0
    while len(targets) < count and attempts < 100:
        attempts += 1
        r = int(rng.integers(MIN_RADIUS, MAX_RADIUS + 1))
        x = int(rng.integers(r, size - r))
        y = int(rng.integers(r, size - r))
        if all(max(abs(x - o.x), abs(y - o.y)) > r + o.radius + TARGET_GAP for o in targets):
            targets.append(Target(x, y, r, float(rng.uniform(margin, margin + PEAK_SPREAD))))
    return SceneSpec(
        height=size, width=size, targets=targets,
        background_level=float(rng.uniform(*BACKGROUND_RANGE)),
        gradient=(float(rng.uniform(-0.05, 0.05)), float(rng.uniform(-0.05, 0.05))),
        clutter=int(rng.binomial(6, difficulty)),
        contrast_margin=margin, seed=seed,
    )


@dataclass
class Dataset:
    samples: List[Sample]
    splits: List[str]

    def subset(self, split: str) -> List[Sample]:
        return [s for s, tag in zip(self.samples, self.splits) if tag == split]


def split_tags(count: int, seed: int) -> List[str]:
    """80/20 train/test tags, assigned by a seeded permutation."""
    n_test = count - int(math.floor(TRAIN_FRACTION * count + 0.5))
    test = set(np.random.default_rng(seed).permutation(count)[:n_test].tolist())
    return ["test" if i in test else "train" for i in range(count)]


def make_dataset(count: int, size: int = 64, difficulty: float = 0.3, seed: int = 0) -> Dataset:
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    scene_seeds = derive_seeds(seed, count)

    def build(i: int) -> Sample:
        rng = np.random.default_rng(scene_seeds[i])
        sample = generate(random_spec(rng, size, difficulty, seed=scene_seeds[i]))
        sample.name = f"{i:05d}"
        return sample

    if WORKERS > 1:
        with ThreadPoolExecutor(max_workers=WORKERS) as pool:
            samples = list(pool.map(build, range(count)))
    else:
        samples = [build(i) for i in range(count)]
    return Dataset(samples, split_tags(count, seed))


# --------------------------------------------------------------------
# Files
# --------------------------------------------------------------------
def load_image(path: str) -> np.ndarray:
    """8-bit grayscale file -> [3, H, W] float32 in [0, 1], channel replicated."""
    return (read_gray(path).astype(np.float32) / 255.0)[None].repeat(3, axis=0)


def load_pair(image_path: str, mask_path: str) -> Sample:
    """8-bit grayscale image and {0, 255} mask -> Sample (mask binarised at 128)."""
    image = load_image(image_path)
    mask = read_gray(mask_path)
    if image.shape[1:] != mask.shape:
        raise DataError(f"mask {mask_path} is {mask.shape[1]}x{mask.shape[0]}, "
                        f"image {image_path} is {image.shape[2]}x{image.shape[1]}")
    name = os.path.splitext(os.path.basename(image_path))[0]
    return Sample(image, (mask >= 128).astype(np.float32)[None], None, name)


def save_sample(sample: Sample, out_dir: str, name: Optional[str] = None, header: Optional[str] = None
                ) -> Tuple[str, str]:
    name = name or sample.name or "sample"
    image_path = os.path.join(out_dir, "images", f"{name}.png")
    mask_path = os.path.join(out_dir, "masks", f"{name}.png")
    write_gray(image_path, sample.image[0], header)
    write_gray(mask_path, (sample.mask[0] > 0.5).astype(np.uint8) * 255, header)
    return image_path, mask_path


def write_manifest(path: str, rows: Sequence[Tuple[str, str, str]], digest: str) -> str:
    """Header line, then ``image<TAB>mask<TAB>split`` with paths relative to the manifest."""
    base = os.path.dirname(os.path.abspath(path))
    lines = [header_line(digest)]
    for image, mask, split in rows:
        lines.append("\t".join([os.path.relpath(os.path.abspath(image), base),
                                os.path.relpath(os.path.abspath(mask), base), split]))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return path


def read_manifest(path: str, split: Optional[str] = None) -> List[Tuple[str, str, str]]:
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    for n, line in enumerate(read_text_lines(path), start=1):
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in SPLITS:
            raise DataError(f"{path}: malformed manifest row {n}: {line!r}")
        image, mask, tag = parts
        if split is None or tag == split:
            rows.append((os.path.join(base, image), os.path.join(base, mask), tag))
    return rows


def load_manifest(path: str, split: Optional[str] = None) -> List[Sample]:
    return [load_pair(image, mask) for image, mask, _ in read_manifest(path, split)]


def generation_digest(count: int, size: int, difficulty: float, seed: int) -> str:
    return sha256_of_text(f"count={count} size={size} difficulty={difficulty!r} seed={seed} v={VERSION}")[:12]


def write_dataset(dataset: Dataset, out_dir: str, digest: str) -> str:
    """Images, masks and ``manifest.tsv`` under ``out_dir`` -> manifest path."""
    ensure_dir(out_dir)
    header = header_line(digest)
    rows = []
    for sample, tag in zip(dataset.samples, dataset.splits):
        image_path, mask_path = save_sample(sample, out_dir, header=header)
        rows.append((image_path, mask_path, tag))
    manifest = write_manifest(os.path.join(out_dir, "manifest.tsv"), rows, digest)
    log.info("wrote %d samples (%d train, %d test) to %s", len(rows), dataset.splits.count("train"),
             dataset.splits.count("test"), out_dir)
    return manifest

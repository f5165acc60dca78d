# tokenizer.py
"""
Hierarchical tokenization: the image is tiled into n visual sentences, each tiled
into m visual words. A small stem (3x3 conv, batch norm, GELU) embeds every word
independently; sentence embeddings are the mean of their words.

Pixel (i, j) covers the continuous square [j - 0.5, j + 0.5) x [i - 0.5, i + 0.5);
a continuous point on a box boundary belongs to the box with the lower index.
"""
import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from errors import ConfigError
from tensor_ops import ConvBN, Node, conv_bn, gelu, mean, reshape, take, value_of


@dataclass(frozen=True)
class TokenGrid:
    height: int
    width: int
    n: int
    m: int
    h_s: int
    w_s: int
    h_w: int
    w_w: int

    @property
    def sn(self) -> int:
        return math.isqrt(self.n)

    @property
    def sm(self) -> int:
        return math.isqrt(self.m)


@dataclass(frozen=True)
class WordPatch:
    sentence: int
    word: int
    box: Tuple[int, int, int, int]  # (y0, x0, y1, x1), half-open

    def pixels(self, image: np.ndarray) -> np.ndarray:
        y0, x0, y1, x1 = self.box
        return image[..., y0:y1, x0:x1]


@dataclass
class HierarchicalEmbeddings:
    f_w: Node  # [N, n, m, C_w]
    f_s: Node  # [N, n, C_s]
    grid: TokenGrid


def make_grid(height: int, width: int, n: int, m: int) -> TokenGrid:
    sn, sm = math.isqrt(n), math.isqrt(m)
    if n < 1 or sn * sn != n:
        raise ConfigError(f"sentence count n={n} is not a perfect square")
    if m < 1 or sm * sm != m:
        raise ConfigError(f"word count m={m} is not a perfect square")
    for name, size in (("height", height), ("width", width)):
        if size % (sn * sm):
            raise ConfigError(f"image {name} {size} is not divisible by sqrt(n)*sqrt(m) = {sn * sm}")
    h_s, w_s = height // sn, width // sn
    return TokenGrid(height, width, n, m, h_s, w_s, h_s // sm, w_s // sm)


def partition(image: np.ndarray, n: int, m: int) -> List[WordPatch]:
    """All n*m word boxes, sentence-major then word-major, both in row-major order."""
    grid = make_grid(image.shape[-2], image.shape[-1], n, m)
    patches = []
    for i in range(n):
        sr, sc = divmod(i, grid.sn)
        for j in range(m):
            wr, wc = divmod(j, grid.sm)
            y0 = sr * grid.h_s + wr * grid.h_w
            x0 = sc * grid.w_s + wc * grid.w_w
            patches.append(WordPatch(i, j, (y0, x0, y0 + grid.h_w, x0 + grid.w_w)))
    return patches


def split_words(images: np.ndarray, grid: TokenGrid) -> np.ndarray:
    """[N, C, H, W] -> [N * n * m, C, h_w, w_w] in partition order."""
    n_img, c = images.shape[:2]
    sn, sm = grid.sn, grid.sm
    x = images.reshape(n_img, c, sn, sm, grid.h_w, sn, sm, grid.w_w)
    x = x.transpose(0, 2, 5, 3, 6, 1, 4, 7)
    return np.ascontiguousarray(x).reshape(n_img * grid.n * grid.m, c, grid.h_w, grid.w_w)


def embed_words(images, stem: ConvBN, grid: TokenGrid, training: bool = False) -> HierarchicalEmbeddings:
    words = split_words(value_of(images), grid)
    h = gelu(conv_bn(words, stem, training=training))
    e = mean(h, axis=(2, 3))
    n_img = words.shape[0] // (grid.n * grid.m)
    f_w = reshape(e, shape=(n_img, grid.n, grid.m, e.shape[-1]))
    f_s = mean(f_w, axis=2)
    return HierarchicalEmbeddings(f_w, f_s, grid)


def _box_index(coord: np.ndarray, size: int, limit: int) -> np.ndarray:
    idx = np.ceil((coord + 0.5) / size).astype(np.int64) - 1
    return np.clip(idx, 0, limit - 1)


def locate(grid: TokenGrid, points, scale: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """(sentence, word) indices of the boxes holding stage points scaled to image pixels."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2) * scale
    x = np.clip(pts[:, 0], 0, grid.width - 1)
    y = np.clip(pts[:, 1], 0, grid.height - 1)
    cols = grid.sn * grid.sm
    col = _box_index(x, grid.w_w, cols)
    row = _box_index(y, grid.h_w, cols)
    sr, wr = np.divmod(row, grid.sm)
    sc, wc = np.divmod(col, grid.sm)
    return sr * grid.sn + sc, wr * grid.sm + wc


def gather(embeddings: HierarchicalEmbeddings, points, batch_index, scale: float):
    """Word and sentence vectors for many points -> ([P, C_w], [P, C_s])."""
    grid = embeddings.grid
    sentence, word = locate(grid, points, scale)
    b = np.asarray(batch_index, dtype=np.int64)
    f_w, f_s = embeddings.f_w, embeddings.f_s
    n_img, c_w = f_w.shape[0], f_w.shape[-1]
    words = reshape(f_w, shape=(n_img * grid.n * grid.m, c_w))
    sentences = reshape(f_s, shape=(n_img * grid.n, f_s.shape[-1]))
    word_vecs = take(words, index=(b * grid.n + sentence) * grid.m + word)
    sentence_vecs = take(sentences, index=b * grid.n + sentence)
    return word_vecs, sentence_vecs


def lookup(embeddings: HierarchicalEmbeddings, point, level: int, stem_stride: int = 2, image: int = 0):
    """Word and sentence embedding of the box containing a stage-``level`` point."""
    scale = stem_stride * 2 ** (level - 1)
    word_vecs, sentence_vecs = gather(embeddings, np.asarray(point, dtype=np.float64).reshape(1, 2), [image], scale)
    return value_of(word_vecs)[0], value_of(sentence_vecs)[0]

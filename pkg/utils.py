# utils.py
import os
import hashlib
import logging
from pathlib import Path
from typing import Iterator, List

import numpy as np
from dotenv import load_dotenv

from errors import DataError

load_dotenv()
LOG_LEVEL = os.environ.get("TAPM_LOG_LEVEL", "INFO").upper()


def get_logger(name: str) -> logging.Logger:
    logger = logging.getLogger(name)
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("[%(name)s] %(message)s"))
        logger.addHandler(handler)
        logger.setLevel(LOG_LEVEL)
        logger.propagate = False
    return logger


def sha256_of_text(text: str) -> str:
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def read_text_lines(path: str) -> List[str]:
    """Non-empty, non-comment lines of a text file."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"file not found: {path}")
    try:
        text = p.read_text(encoding='utf-8')
    except UnicodeDecodeError:
        text = p.read_text(encoding='latin-1')
    return [line for line in text.splitlines() if line.strip() and not line.lstrip().startswith('#')]


def chunk_indices(n: int, chunk_size: int) -> Iterator[np.ndarray]:
    """Consecutive index blocks of at most chunk_size covering range(n)."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    i = 0
    while i < n:
        yield np.arange(i, min(i + chunk_size, n))
        i += chunk_size


def derive_seeds(seed: int, count: int) -> List[int]:
    """Independent per-item seeds from one root seed."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(c.generate_state(1)[0]) for c in children]


def ensure_dir(path: str):
    os.makedirs(path, exist_ok=True)


def ensure_parent(path: str):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)

# diagnostics.py
"""
Diagnostics dump for one image:

    <out>/energy/stage{l}.png         energy map, scaled by its maximum
    <out>/traj/stage{l}.txt           one row per trajectory point
    <out>/traj/stage{l}_overlay.png   trajectories drawn over the energy map
    <out>/response.png                perturbation response (probabilities)

Trajectory rows: ``stage seed_id j x y E`` (whitespace separated), after a header line.
"""
import os
from collections import OrderedDict
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from errors import DataError
from helpers.image_io import to_uint8, write_gray
from trajectory import Trajectory
from utils import ensure_dir, get_logger, read_text_lines

log = get_logger("diagnostics")
OVERLAY_SCALE = 8
TRAJ_COLUMNS = ("stage", "seed_id", "j", "x", "y", "E")


def normalized(values: np.ndarray) -> np.ndarray:
    """Min-max scaling to [0, 1]; a constant map becomes all zeros."""
    v = np.asarray(values, dtype=np.float64)
    if not v.size:
        return v
    low, span = float(v.min()), float(v.max() - v.min())
    return (v - low) / span if span > 0 else np.zeros_like(v)


def format_trajectories(trajectories: Sequence[Trajectory], header: Optional[str] = None) -> str:
    lines = [header] if header else []
    lines.append("# " + " ".join(TRAJ_COLUMNS))
    for seed_id, t in enumerate(trajectories):
        for j, ((x, y), e) in enumerate(zip(np.asarray(t.points), np.asarray(t.energies))):
            lines.append(f"{t.stage} {seed_id} {j} {x:.9g} {y:.9g} {e:.9g}")
    return "\n".join(lines) + "\n"


def parse_trajectories(path: str) -> Dict[int, List[Trajectory]]:
    """Trajectories keyed by stage, in seed order. The seed energy is the first point's."""
    rows: Dict[tuple, list] = OrderedDict()
    for n, line in enumerate(read_text_lines(path), start=1):
        parts = line.split()
        if len(parts) != len(TRAJ_COLUMNS):
            raise DataError(f"{path}: row {n} has {len(parts)} fields, expected {len(TRAJ_COLUMNS)}")
        try:
            stage, seed_id, j = (int(p) for p in parts[:3])
            x, y, e = (float(p) for p in parts[3:])
        except ValueError:
            raise DataError(f"{path}: cannot parse row {n}: {line!r}") from None
        pts = rows.setdefault((stage, seed_id), [])
        if j != len(pts):
            raise DataError(f"{path}: row {n} has step {j}, expected {len(pts)}")
        pts.append((x, y, e))
    out: Dict[int, List[Trajectory]] = OrderedDict()
    for (stage, _), pts in rows.items():
        arr = np.asarray(pts, dtype=np.float64)
        out.setdefault(stage, []).append(Trajectory(arr[:, :2], arr[:, 2], float(arr[0, 2]), stage))
    return out


def overlay(energy: np.ndarray, trajectories: Sequence[Trajectory], scale: int = OVERLAY_SCALE) -> Image.Image:
    """Energy map (grey) enlarged ``scale`` times, paths in red, seeds in yellow."""
    grey = to_uint8(normalized(energy))
    h, w = grey.shape
    img = Image.fromarray(np.stack([grey] * 3, axis=-1)).resize((w * scale, h * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)

    def centre(p):
        return (p[0] + 0.5) * scale, (p[1] + 0.5) * scale

    for t in trajectories:
        pts = [centre(p) for p in np.asarray(t.points)]
        if len(pts) > 1:
            draw.line(pts, fill=(255, 40, 40), width=max(1, scale // 4))
        x, y = pts[0]
        r = max(2, scale // 3)
        draw.ellipse((x - r, y - r, x + r, y + r), outline=(255, 220, 0))
    return img


def dump(out_dir: str, energies: Mapping[int, np.ndarray], trajectories: Mapping[int, Sequence[Trajectory]],
         response: np.ndarray, header: Optional[str] = None) -> List[str]:
    """Write the diagnostics layout for one image; returns written paths."""
    ensure_dir(os.path.join(out_dir, "energy"))
    ensure_dir(os.path.join(out_dir, "traj"))
    written = []
    for stage, values in energies.items():
        written.append(write_gray(os.path.join(out_dir, "energy", f"stage{stage}.png"), normalized(values), header))
        trajs = list(trajectories.get(stage, []))
        txt = os.path.join(out_dir, "traj", f"stage{stage}.txt")
        with open(txt, "w", encoding="utf-8") as f:
            f.write(format_trajectories(trajs, header))
        written.append(txt)
        png = os.path.join(out_dir, "traj", f"stage{stage}_overlay.png")
        overlay(values, trajs).save(png)
        written.append(png)
    written.append(write_gray(os.path.join(out_dir, "response.png"), np.asarray(response).squeeze(), header))
    log.info("wrote %d diagnostic files to %s", len(written), out_dir)
    return written

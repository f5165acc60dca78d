# cli.py
"""
Command-line entry point.

    python cli.py gen   --count 200 --size 64 --difficulty 0.3 --seed 0 --out-dir data/synth
    python cli.py train --manifest data/synth/manifest.tsv --epochs 30 --out runs/model.ckpt
    python cli.py eval  --manifest data/synth/manifest.tsv --checkpoint runs/model.ckpt --roc runs/roc.tsv
    python cli.py infer --image scene.png --checkpoint runs/model.ckpt --out-mask mask.png --dump-diagnostics diag/
    python cli.py trace --image scene.png --checkpoint runs/model.ckpt --out-dir traces/ --overlay

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 numeric failure.
"""
import argparse
import math
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from config import RUNS_DIR, RunConfig, apply_overrides, config_hash, header_line, load_config
from data_synth import generation_digest, load_image, load_manifest, make_dataset, write_dataset
from diagnostics import dump, format_trajectories, normalized, overlay, parse_trajectories
from errors import DataError, TapmError
from helpers.image_io import write_gray
from network import TapmNet, build_model, load_checkpoint
from tensor_ops import value_of
from training import evaluate, train
from utils import ensure_dir, ensure_parent, get_logger

log = get_logger("cli")


class UsageError(TapmError):
    exit_code = 1


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------
# Shared helpers
# --------------------------------------------------------------------
def side_path(path: str, suffix: str) -> str:
    """``runs/model.ckpt`` + ``.loss.tsv`` -> ``runs/model.loss.tsv``."""
    return os.path.splitext(path)[0] + suffix


def write_text(path: str, header: str, body: str, append: bool = False) -> str:
    ensure_parent(path)
    fresh = not (append and os.path.exists(path))
    with open(path, "w" if fresh else "a", encoding="utf-8") as f:
        if fresh:
            f.write(header + "\n")
        f.write(body)
    return path


def check_size(cfg: RunConfig, samples, source: str):
    expected = (cfg.model.height, cfg.model.width)
    for s in samples:
        if tuple(s.image.shape[1:]) != expected:
            raise DataError(f"{source}: image {s.name} is {s.image.shape[2]}x{s.image.shape[1]}, "
                            f"model expects {expected[1]}x{expected[0]}")


def image_batch(model: TapmNet, path: str) -> np.ndarray:
    image = load_image(path)
    if tuple(image.shape[1:]) != (model.cfg.height, model.cfg.width):
        raise DataError(f"{path} is {image.shape[2]}x{image.shape[1]}, "
                        f"model expects {model.cfg.width}x{model.cfg.height}")
    return image[None].astype(model.dtype)


def frozen_paths(directory: str) -> Dict[int, List[list]]:
    """Per-stage trajectory files written by ``trace`` -> forward(paths=...) for one image."""
    paths = {}
    traj_dir = os.path.join(directory, "traj")
    if not os.path.isdir(traj_dir):
        raise DataError(f"no traj/ directory under {directory}")
    for name in sorted(os.listdir(traj_dir)):
        if name.startswith("stage") and name.endswith(".txt"):
            for stage, trajs in parse_trajectories(os.path.join(traj_dir, name)).items():
                paths[stage] = [trajs]
    return paths


# --------------------------------------------------------------------
# gen
# --------------------------------------------------------------------
def cmd_gen(args) -> int:
    dataset = make_dataset(args.count, args.size, args.difficulty, args.seed)
    manifest = write_dataset(dataset, args.out_dir, generation_digest(args.count, args.size, args.difficulty,
                                                                      args.seed))
    print(manifest)
    return 0


# --------------------------------------------------------------------
# train
# --------------------------------------------------------------------
def cmd_train(args) -> int:
    optimizer_state = None
    if args.resume and os.path.exists(args.out):
        model, cfg, optimizer_state = load_checkpoint(args.out)
        if args.config:
            log.warning("--resume: using the configuration stored in %s, ignoring %s", args.out, args.config)
        overrides = {}
        if args.epochs is not None:
            overrides["loss.epochs"] = str(args.epochs)
        apply_overrides(cfg, overrides).validate()
        log.info("resuming %s at epoch %d, step %d", args.out, model.epoch, model.step)
    else:
        if args.resume:
            log.warning("--resume: %s does not exist yet, starting fresh", args.out)
        overrides = {}
        if args.epochs is not None:
            overrides["loss.epochs"] = str(args.epochs)
        if args.seed is not None:
            overrides["loss.seed"] = str(args.seed)
        cfg = load_config(args.config, overrides)
        model = build_model(cfg.model, cfg.loss.seed)

    train_set = load_manifest(args.manifest, "train")
    if not train_set:
        raise DataError(f"{args.manifest}: no training rows")
    eval_set = load_manifest(args.manifest, "test") or None
    check_size(cfg, train_set, args.manifest)
    if eval_set:
        check_size(cfg, eval_set, args.manifest)

    start_step, start_epoch = model.step, model.epoch
    if start_epoch >= cfg.loss.epochs:
        log.info("nothing to do: %s already holds %d epochs", args.out, model.epoch)
        return 0
    result = train(model, train_set, cfg, args.out, eval_set, optimizer_state, progress=not args.quiet)

    header = header_line(config_hash(cfg))
    resumed = start_epoch > 0
    per_epoch = math.ceil(len(train_set) / cfg.loss.batch_size)
    loss_rows = "".join(f"{start_step + i + 1}\t{start_epoch + i // per_epoch + 1}\t{loss:.9g}\n"
                        for i, loss in enumerate(result.losses))
    loss_file = write_text(side_path(args.out, ".loss.tsv"), header + "\n# step\tepoch\tloss", loss_rows, resumed)
    metric_rows = "".join(
        f"epoch={start_epoch + i + 1} loss={loss:.9g} iou={r.iou:.6f} niou={r.niou:.6f} pd={r.pd:.6f} fa={r.fa:.6e}\n"
        for i, (loss, r) in enumerate(zip(result.epoch_losses, result.reports)))
    metric_file = write_text(side_path(args.out, ".metrics.txt"), header, metric_rows, resumed)
    print(f"checkpoint: {args.out}\nloss curve: {loss_file}\nmetrics:    {metric_file}")
    return 0


# --------------------------------------------------------------------
# eval
# --------------------------------------------------------------------
def cmd_eval(args) -> int:
    model, cfg, _ = load_checkpoint(args.checkpoint)
    dataset = load_manifest(args.manifest, args.split)
    if not dataset:
        raise DataError(f"{args.manifest}: no rows in split {args.split!r}")
    check_size(cfg, dataset, args.manifest)
    threshold = cfg.loss.threshold if args.threshold is None else args.threshold
    result = evaluate(model, dataset, threshold, cfg.loss.batch_size, roc=bool(args.roc), progress=not args.quiet)
    header = header_line(config_hash(cfg))

    print(result.report.to_text(), end="")
    if args.report:
        write_text(args.report, header, result.report.to_text())
        write_text(side_path(args.report, ".kv"), header, result.report.to_kv())
    if args.roc:
        rows = "".join(f"{fpr:.9g}\t{tpr:.9g}\n" for _, fpr, tpr in result.roc)
        thresholds = " ".join(f"{t:g}" for t, _, _ in result.roc)
        write_text(args.roc, f"{header}\n# thresholds {thresholds}\n# FPR\tTPR", rows)
    return 0


# --------------------------------------------------------------------
# infer
# --------------------------------------------------------------------
def cmd_infer(args) -> int:
    model, cfg, _ = load_checkpoint(args.checkpoint)
    images = image_batch(model, args.image)
    paths = frozen_paths(args.paths) if args.paths else None
    result = model.forward(images, "eval", paths=paths)
    probs = 1.0 / (1.0 + np.exp(-np.asarray(value_of(result.logits), dtype=np.float64)))
    threshold = cfg.loss.threshold if args.threshold is None else args.threshold
    header = header_line(config_hash(cfg))
    mask = (probs[0, 0] > threshold).astype(np.uint8) * 255
    write_gray(args.out_mask, mask, header)
    log.info("%s: %d foreground pixels", args.out_mask, int((mask > 0).sum()))

    if args.dump_diagnostics:
        stages = result.diagnostics.stages
        energies = {s: d.energy[0] for s, d in stages.items()}
        trajectories = {s: d.trajectories[0] for s, d in stages.items()}
        response = np.asarray(value_of(result.response))[0]
        dump(args.dump_diagnostics, energies, trajectories, response, header)
    return 0


# --------------------------------------------------------------------
# trace
# --------------------------------------------------------------------
def cmd_trace(args) -> int:
    model, cfg, _ = load_checkpoint(args.checkpoint)
    if not cfg.model.use_pgm:
        raise UsageError(f"{args.checkpoint} was trained without the perturbation module; nothing to trace")
    result = model.forward(image_batch(model, args.image), "eval")
    header = header_line(config_hash(cfg))
    wanted = set(args.stage) if args.stage else None
    ensure_dir(os.path.join(args.out_dir, "traj"))
    for stage, diag in result.diagnostics.stages.items():
        if wanted and stage not in wanted:
            continue
        trajs = diag.trajectories[0]
        txt = os.path.join(args.out_dir, "traj", f"stage{stage}.txt")
        with open(txt, "w", encoding="utf-8") as f:
            f.write(format_trajectories(trajs, header))
        if args.overlay:
            overlay(diag.energy[0], trajs).save(os.path.join(args.out_dir, "traj", f"stage{stage}_overlay.png"))
            write_gray(os.path.join(args.out_dir, "energy", f"stage{stage}.png"), normalized(diag.energy[0]), header)
        print(f"stage {stage}: {len(trajs)} trajectories, {sum(len(t) for t in trajs)} points -> {txt}")
    return 0


# --------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------
def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="tapm-net", description="Infrared small-target detection with trajectory-aware "
                                                         "state-space propagation.")
    parser.add_argument("-q", "--quiet", action="store_true", help="hide progress bars")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--difficulty", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=os.path.join("data", "synth"))
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on the manifest's train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=os.path.join(RUNS_DIR, "model.ckpt"), help="checkpoint path")
    p.add_argument("--resume", action="store_true", help="continue from --out if it exists")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a manifest split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--threshold", type=float)
    p.add_argument("--roc", metavar="PATH", help="write the FPR/TPR table here")
    p.add_argument("--report", metavar="PATH", help="write the metric report here (and a .kv file beside it)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment one image")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-mask", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--dump-diagnostics", metavar="DIR")
    p.add_argument("--paths", metavar="DIR", help="reuse trajectories from a previous trace/diagnostics dump")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("trace", help="dump the trajectories traced for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stage", type=int, action="append", choices=(1, 2, 3, 4))
    p.add_argument("--overlay", action="store_true", help="also write energy maps and overlay images")
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except TapmError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())

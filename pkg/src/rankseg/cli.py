"""Command-line entry point.

Subcommands: ``gen-data``, ``evolve``, ``infer``, ``eval``, ``probe-rank``.

Exit codes: 0 ok, 1 usage/configuration, 2 I/O, 3 numeric abort,
4 incompatible checkpoint or data, 5 missing inputs.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from rankseg import config as config_mod
from rankseg.errors import (
    ConfigError,
    CorruptionError,
    GenerationError,
    IncompatibleVersionError,
    NumericAbort,
)
from rankseg.metrics import MissingInputs, evaluate_dir

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_INCOMPATIBLE, EXIT_MISSING = 0, 1, 2, 3, 4, 5

log = logging.getLogger("rankseg")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class Incompatible(Exception):
    pass


class OutputError(Exception):
    pass


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="key=value configuration file with [section] headers")
    p.add_argument("--seed", type=int, help="master seed (overrides every seed in the config)")
    p.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--alpha", type=float, help="squeeze loss weight")
    p.add_argument("--sigma", type=float, help="bottleneck noise standard deviation")
    p.add_argument("--n-perturb", type=int, help="perturbations per hint generation")
    p.add_argument("--grades", type=int, help="number of confidence grades")
    p.add_argument("--train-phases", type=int, help="number of training phases")
    p.add_argument("--infer-iters", type=int, help="recursion depth at inference")
    p.add_argument("--stop-grad-perturbed", action="store_true", help="detach perturbed predictions in the squeeze loss")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="rankseg", description="Rank-guided hint refinement for segmentation under shift")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="write a synthetic source/target benchmark")

    p = sub.add_parser("evolve", parents=[common], help="train all phases and record per-phase metrics")
    p.add_argument("--data", type=Path, required=True, help="benchmark directory (contains manifest.csv)")

    p = sub.add_parser("infer", parents=[common], help="recursive inference over a manifest")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", default=None, help="restrict to one manifest split")

    p = sub.add_parser("eval", parents=[common], help="Dice/HD95 of predicted label files")
    p.add_argument("--pred", type=Path, required=True, help="directory of predicted label files")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", default=None)

    p = sub.add_parser("probe-rank", parents=[common], help="rank agreement under bottleneck perturbation")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", default=None)
    return parser


def _resolve(args) -> config_mod.RunConfig:
    cfg = config_mod.load_config_file(args.config, args.seed) if args.config else config_mod.load_config(None, args.seed)
    return config_mod.override(
        cfg,
        alpha=args.alpha,
        sigma=args.sigma,
        n_perturb=args.n_perturb,
        grades=args.grades,
        train_phases=args.train_phases,
        infer_iters=args.infer_iters,
        stop_grad_perturbed=args.stop_grad_perturbed,
        threads=args.threads,
    )


def _prepare_out(path: Optional[Path], cfg) -> Path:
    if path is None:
        raise ConfigError("--out is required")
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / "effective_config.ini").write_text(cfg.to_ini(), encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot write to output directory {path}: {exc}") from exc
    return path


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args, cfg) -> int:
    from rankseg.synthshift import gen_benchmark

    out = _prepare_out(args.out, cfg)
    entries = gen_benchmark(cfg.scene, cfg.shift, cfg.n_source, cfg.n_target, out)
    log.info("wrote %d entries to %s", len(entries), out)
    print(f"wrote {len(entries)} entries to {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_evolve(args, cfg) -> int:
    from rankseg.evolve import run_evolution, write_metrics_csv, write_timings_csv, write_train_log
    from rankseg.segnet import save_checkpoint
    from rankseg.svgplot import write_chart
    from rankseg.synthshift import load_split

    _, xs, ys = load_split(args.data, "source")
    _, xt, yt = load_split(args.data, "target")
    _check_scene(cfg, xs)
    n_val = int(np.ceil(0.2 * len(xt)))
    out = _prepare_out(args.out, cfg)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    ecfg = cfg.evolution()
    from dataclasses import replace

    ecfg = replace(ecfg, dump_dir=str(out))

    def on_phase(k, net, state, m):
        save_checkpoint(net, state, k, ckpt_dir / f"phase{k}.ckpt", rng_state={"seed": ecfg.seed, "phase": k})

    result = run_evolution(xs, ys, ecfg, xt[:n_val], yt[:n_val], cfg.scene.n_classes, on_phase=on_phase)
    write_metrics_csv(out / "metrics.csv", result.metrics)
    write_timings_csv(out / "timings.csv", result.metrics)
    write_train_log(out / "train_log.csv", result.train_log)
    phases = [m.phase for m in result.metrics]
    write_chart(out / "dice.svg", phases, {"mean Dice": [m.mean_dice for m in result.metrics]},
                "Validation Dice by generation", "phase", "Dice")
    write_chart(out / "hd95.svg", phases, {"mean HD95": [m.mean_hd95 for m in result.metrics]},
                "Validation HD95 by generation", "phase", "HD95 (px)")
    for m in result.metrics:
        print(f"phase {m.phase}: dice {m.mean_dice:.4f} hd95 {m.mean_hd95:.3f} omega {m.mean_omega_px:.1f}px")
    return EXIT_OK


def _check_scene(cfg, images) -> None:
    if images.size and images.shape[-2:] != (cfg.scene.height, cfg.scene.width):
        raise Incompatible(
            f"data size {images.shape[-2:]} does not match configured scene {cfg.scene.height}x{cfg.scene.width}"
        )


def _load_net(cfg, path):
    from rankseg.segnet import load_checkpoint

    net, _, k, _ = load_checkpoint(path)
    if net.config.n_classes != cfg.scene.n_classes:
        raise Incompatible(f"checkpoint has {net.config.n_classes} classes, configuration has {cfg.scene.n_classes}")
    return net, k


def _manifest_entries(manifest: Path, split):
    from rankseg.synthshift import read_array, read_manifest

    if not manifest.exists():
        raise MissingInputs([str(manifest)])
    entries = [e for e in read_manifest(manifest) if split is None or e.split == split]
    missing = [str(manifest.parent / "images" / e.filename) for e in entries
               if not (manifest.parent / "images" / e.filename).exists()]
    if missing:
        raise MissingInputs(missing)
    images = [read_array(manifest.parent / "images" / e.filename) for e in entries]
    return entries, images


def cmd_infer(args, cfg) -> int:
    from rankseg.evolve import recursive_inference
    from rankseg.synthshift import write_array

    net, _ = _load_net(cfg, args.checkpoint)
    entries, images = _manifest_entries(args.manifest, args.split)
    for img in images:
        _check_scene(cfg, img)
    out = _prepare_out(args.out, cfg)
    pred_dir = out / "predictions"
    pred_dir.mkdir(exist_ok=True)
    iters = cfg.evolve.inference_iters
    for i, (e, img) in enumerate(zip(entries, images)):
        labels, _ = recursive_inference(net, img, cfg.perturb, iters, seed=cfg.seed + i)
        write_array(pred_dir / e.filename, labels.astype(np.uint8))
    print(f"wrote {len(entries)} predictions to {pred_dir}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    report = evaluate_dir(args.pred, args.manifest.parent, cfg.scene.n_classes, split=args.split)
    if args.out is not None:
        out = _prepare_out(args.out, cfg)
        report.write_csv(out / "report.csv")
    print(report.summary())
    return EXIT_OK


def cmd_probe_rank(args, cfg) -> int:
    from rankseg.hints import null_hints
    from rankseg.rankcore import probe_rank
    from rankseg.synthshift import read_array, write_array

    net, _ = _load_net(cfg, args.checkpoint)
    entries, images = _manifest_entries(args.manifest, args.split)
    out = _prepare_out(args.out, cfg)
    grade_dir = out / "grades"
    grade_dir.mkdir(exist_ok=True)
    C = cfg.scene.n_classes
    all_corr = []
    with open(out / "rank_probe.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "perturbation", "spearman", "degenerate", "gt_stable_fraction"])
        for i, (e, img) in enumerate(zip(entries, images)):
            _check_scene(cfg, img)
            label_path = args.manifest.parent / "labels" / e.filename
            label = read_array(label_path) if label_path.exists() else None
            H, W = img.shape[-2:]
            probe = probe_rank(net, img, null_hints(C, H, W), cfg.perturb, [cfg.seed, i], label)
            stem = Path(e.filename).stem
            for n, r in enumerate(probe.correlations):
                write_array(grade_dir / f"{stem}_n{n:02d}.bin", probe.stack.grades[n])
                stable = "" if probe.stable_fraction is None else repr(probe.stable_fraction)
                w.writerow([e.filename, n, repr(float(r)), int(probe.stack.degenerate[n]), stable])
                all_corr.append(r)
    corr = np.array(all_corr, dtype=np.float64)
    print(f"rank probe over {len(entries)} images x {cfg.perturb.n_perturb} perturbations: "
          f"median spearman {np.nanmedian(corr):.4f}, min {np.nanmin(corr):.4f}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "evolve": cmd_evolve,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "probe-rank": cmd_probe_rank,
}


def _threads(n: Optional[int]):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("CRISP_LOG", "warn").upper()
    logging.basicConfig(level={"WARN": "WARNING"}.get(level, level) if level in ("ERROR", "WARN", "INFO", "DEBUG") else "WARNING",
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        with _threads(cfg.threads):
            return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (Incompatible, IncompatibleVersionError, CorruptionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (MissingInputs, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (OutputError, GenerationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Command line: synth -> extract -> train -> eval, plus blend-demo.

Exit codes: 0 success, 1 a module rejected its inputs (contract,
configuration or format error), 2 usage error or missing input.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from .augment import BLEND_MODES, blend_arrays, blend_weights
from .errors import ConfigurationError, ContractError, FormatError
from .evaluation import build_report, predict_videos, write_confusion_csv, write_report
from .model import load_checkpoint
from .stmap import (ClipSpec, SpatioTemporalMap, extract_video, read_manifest, read_map, read_map_dir,
                    read_trace_dir, write_map, write_map_dir, write_trace_dir)
from .synth import SynthSpec, default_signatures, generate_dataset, signature_dict
from .train import TrainConfig, TrainingError, save_result, split_videos, train, write_history

log = logging.getLogger("rppg_forgery")


class UsageError(Exception):
    """Bad flags or missing input files (exit status 2)."""


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _kernel(text: str):
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"kernel must look like 9x3, got {text!r}")
    return tuple(int(p) for p in parts)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rppg-forgery", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic multi-source ROI traces")
    p.add_argument("--sources", type=_positive_int, default=6)
    p.add_argument("--videos-per-source", type=_positive_int, default=60)
    p.add_argument("--frames", type=_positive_int, default=640)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--rois", type=_positive_int, default=6)
    p.add_argument("--channels", type=_positive_int, default=3)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--noise-scale", type=float, default=1.0, help="multiplier on white-noise sigma")
    p.add_argument("--out", required=True)

    p = sub.add_parser("extract", help="build spatial-temporal maps from a trace directory")
    p.add_argument("--traces", required=True)
    p.add_argument("--clip-len", type=_positive_int, default=64)
    p.add_argument("--stride", type=_positive_int, default=16)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train on a map directory (video-level split)")
    p.add_argument("--maps", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--blend", choices=BLEND_MODES, default="inter")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--batch", type=_positive_int, default=32)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--split", type=float, default=0.7, help="fraction of each source's videos used for training")
    p.add_argument("--patience", type=int, default=5,
                   help="stop after this many epochs at 100%% validation accuracy (0 disables)")
    defaults = TrainConfig()
    p.add_argument("--stf-width", type=_positive_int, default=defaults.stf_width)
    p.add_argument("--feat-width", type=_positive_int, default=defaults.feat_width)
    p.add_argument("--feat-dim", type=_positive_int, default=defaults.feat_dim)
    p.add_argument("--hidden", type=_positive_int, default=defaults.hidden)
    p.add_argument("--feat-kernels", type=_kernel, nargs=2, default=list(defaults.feat_kernels),
                   metavar="TxR", help="feature-stage kernels, e.g. 3x3 9x3")
    p.add_argument("--feat-gain", type=float, default=defaults.feat_gain)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="history.json path (default: next to the checkpoint)")

    p = sub.add_parser("eval", help="video-level evaluation of a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--maps", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--confusion", help="confusion.csv path (default: next to the report)")
    p.add_argument("--videos", choices=("heldout", "all"), default="heldout",
                   help="held-out split recorded in the checkpoint, or every video in --maps")

    p = sub.add_parser("blend-demo", help="blend two map files with one coefficient")
    p.add_argument("--map-a", required=True)
    p.add_argument("--map-b", required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--out", required=True)
    return parser


def _print_config(command: str, config: Dict) -> None:
    print(json.dumps({"command": command, "config": config}, indent=2, sort_keys=True), flush=True)


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} directory {path} does not exist")
    return p


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file {path} does not exist")
    return p


def cmd_synth(args) -> None:
    spec = SynthSpec(num_sources=args.sources, videos_per_source=args.videos_per_source,
                     frames_per_video=args.frames, fps=args.fps, n_rois=args.rois, channels=args.channels,
                     seed=args.seed, noise_scale=args.noise_scale)
    _print_config("synth", {**asdict(spec), "out": args.out})
    traces = generate_dataset(spec)
    extra = {"spec": asdict(spec), "signatures": [signature_dict(s) for s in default_signatures(spec.num_sources)]}
    path = write_trace_dir(args.out, traces, extra)
    print(f"wrote {len(traces)} traces and {path}")


def cmd_extract(args) -> None:
    spec = ClipSpec(clip_len=args.clip_len, stride=args.stride)
    root = _require_dir(args.traces, "trace")
    try:
        entries = read_manifest(root)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    n_rois = sorted({e.n_rois for e in entries})
    _print_config("extract", {"traces": args.traces, "clip_len": spec.clip_len, "stride": spec.stride,
                              "n_rois": n_rois[0] if len(n_rois) == 1 else n_rois, "out": args.out})
    if len(n_rois) > 1:
        raise ConfigurationError(f"manifest mixes ROI counts {n_rois}")
    if not entries:
        raise ConfigurationError(f"manifest in {root} lists no videos")
    videos, skipped = [], []
    for trace in read_trace_dir(root):
        v = extract_video(trace, spec)
        if v is None:
            skipped.append(trace.video_id)
        else:
            videos.append(v)
    index = write_map_dir(args.out, videos, spec, n_rois[0])
    clips = sum(e["num_clips"] for e in index["videos"])
    print(f"wrote {clips} maps for {len(videos)} videos to {args.out}"
          + (f" (skipped {len(skipped)} short videos)" if skipped else ""))


def _load_maps(path: str):
    root = _require_dir(path, "map")
    try:
        return read_map_dir(root)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> None:
    config = TrainConfig(lr0=args.lr, max_epochs=args.epochs, beta=args.beta, k=args.k, blend_mode=args.blend,
                         batch_size=args.batch, momentum=args.momentum, seed=args.seed,
                         early_stop_patience=args.patience, stf_width=args.stf_width,
                         feat_width=args.feat_width, feat_dim=args.feat_dim, hidden=args.hidden,
                         feat_kernels=tuple(args.feat_kernels), feat_gain=args.feat_gain)
    history_path = Path(args.history) if args.history else Path(args.out).with_name("history.json")
    index, videos = _load_maps(args.maps)
    _print_config("train", {**asdict(config), "maps": args.maps, "split": args.split, "out": args.out,
                            "history": str(history_path)})
    train_set, val_set = split_videos(videos, args.split, args.seed)
    num_classes = 1 + max(v.source_id for v in videos)
    result = train(config, train_set, val_set, num_classes=num_classes,
                   on_epoch=lambda e: print(json.dumps(e), flush=True))
    split = {"fraction": args.split, "train_videos": [v.video_id for v in train_set],
             "heldout_videos": [v.video_id for v in val_set]}
    save_result(args.out, result, split=split, maps={"clip_len": index["clip_len"], "stride": index["stride"],
                                                     "n_rois": index["n_rois"]})
    write_history(history_path, result.history)
    best = result.history[result.best_epoch]["val_acc"] if result.best_epoch >= 0 else None
    print(f"wrote {args.out} (best epoch {result.best_epoch}, val_acc {best}) and {history_path}")


def cmd_eval(args) -> None:
    params, doc = load_checkpoint(_require_file(args.model, "checkpoint"))
    _, videos = _load_maps(args.maps)
    k = int(doc.get("train", {}).get("k", 4))
    confusion_path = Path(args.confusion) if args.confusion else Path(args.report).with_name("confusion.csv")
    _print_config("eval", {"model": args.model, "maps": args.maps, "report": args.report, "k": k,
                           "videos": args.videos, "confusion": str(confusion_path)})
    if args.videos == "heldout":
        wanted = set(doc.get("split", {}).get("heldout_videos", []))
        if not wanted:
            raise ConfigurationError(f"{args.model} records no held-out split; use --videos all")
        videos = [v for v in videos if v.video_id in wanted]
        if not videos:
            raise ConfigurationError(f"none of the held-out videos of {args.model} are in {args.maps}")
    bad = sorted({v.source_id for v in videos if v.source_id >= params.config.num_classes})
    if bad:
        raise ConfigurationError(f"maps contain sources {bad} beyond the model's {params.config.num_classes} classes")
    preds, skipped = predict_videos(params, videos, k)
    if not preds:
        raise ConfigurationError("no video has enough clips to form a group")
    report = build_report(preds, params.config.num_classes, skipped,
                          config={"model": args.model, "maps": args.maps, "k": k, "videos": args.videos,
                                  "checkpoint": doc})
    write_report(args.report, report)
    write_confusion_csv(confusion_path, np.array(report["confusion_matrix"]))
    print(f"average accuracy {report['average_accuracy']:.4f}, video-level {report['video_level_accuracy']:.4f}, "
          f"clip-level {report['clip_level_accuracy']:.4f}; wrote {args.report} and {confusion_path}")


def cmd_blend_demo(args) -> None:
    a = read_map(_require_file(args.map_a, "map"))
    b = read_map(_require_file(args.map_b, "map"))
    _print_config("blend-demo", {"map_a": args.map_a, "map_b": args.map_b, "alpha": args.alpha, "out": args.out})
    if a.data.shape != b.data.shape:
        raise ContractError(f"map shapes differ: {a.data.shape} vs {b.data.shape}")
    w1, w2 = blend_weights(args.alpha)
    out = SpatioTemporalMap(blend_arrays(a.data, b.data, args.alpha), a.video_id, a.source_id, a.clip_index)
    write_map(args.out, out)
    print(f"wrote {args.out} = {w1!r} * {args.map_a} + {w2!r} * {args.map_b} "
          f"(sources {a.source_id} and {b.source_id})")


COMMANDS = {"synth": cmd_synth, "extract": cmd_extract, "train": cmd_train, "eval": cmd_eval,
            "blend-demo": cmd_blend_demo}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, ConfigurationError, FormatError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

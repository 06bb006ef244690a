"""Command-line entry point: train, eval, detect, synth, bench.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import trainer
from .config import load_config
from .errors import ConfigError, DataError
from .evalmetrics import format_results, write_results
from .postprocess import write_detections
from .raddata import (
    FrameRecord,
    RadCube,
    SceneSpec,
    load_frame,
    load_frames,
    read_labels,
    save_frames,
    synth_frame,
    write_labels,
)


def _cmd_train(args) -> int:
    run = load_config(args.config)
    if args.phase2:
        run.train.phase2 = True
        run.train.loss_weights = type(run.train.loss_weights)(
            run.train.loss_weights.alpha, phase2=True)
    data_root = Path(args.data or run.data.root or "")
    if not data_root.is_dir():
        raise DataError(f"dataset root {data_root} does not exist")
    train_dir = data_root / "train"
    records = load_frames(train_dir if train_dir.is_dir() else data_root)
    test_dir = data_root / "test"
    if test_dir.is_dir():
        train_records, val_records = records, load_frames(test_dir)
    else:
        train_records, val_records = trainer.split_frames(records)
    out_dir = Path(args.out)
    result = trainer.train(run.train, run.model, train_records, val_records,
                           out_dir=out_dir, eval_cfg=run.eval,
                           post_cfg=run.postprocess, progress=True)
    print(f"finished {len(result.history)} steps; "
          f"last checkpoint: {result.last_path}; best mAP {result.best_map:.4f}")
    return 0


def _cmd_eval(args) -> int:
    run = load_config(args.config)
    model, _ = trainer.load_checkpoint(args.ckpt)
    data_dir = Path(args.data)
    test_dir = data_dir / "test"
    records = load_frames(test_dir if test_dir.is_dir() else data_dir)
    if not records:
        raise DataError(f"no frames found under {data_dir}")
    if (data_dir / "labels.txt").is_file():
        run.eval.class_names = read_labels(data_dir)
    results = trainer.evaluate(model, records, run.train.target_doppler,
                               run.eval, run.postprocess)
    text = format_results(results, run.eval.class_names)
    print(text, end="")
    if args.out:
        write_results(Path(args.out), results, run.eval.class_names)
    return 0


def _load_single_frame(spec: str) -> FrameRecord:
    path = Path(spec)
    if path.is_file() and path.suffix == ".rad":
        ann = path.with_suffix(".ann")
        if ann.is_file():
            return load_frame(path.parent, path.stem)
        import numpy as np
        import struct
        raw = path.read_bytes()
        magic, r, a, d = struct.unpack_from("<4sIII", raw)
        if magic != b"RAD1":
            raise DataError(f"{path}: bad magic {magic!r}")
        values = np.frombuffer(raw, dtype="<f4", offset=16).reshape(r, a, d)
        return FrameRecord(RadCube(values.copy()), [], path.stem)
    raise DataError(f"--frame must point at a .rad file, got {spec!r}")


def _cmd_detect(args) -> int:
    run = load_config(args.config)
    model, _ = trainer.load_checkpoint(args.ckpt)
    if args.data:
        record = load_frame(Path(args.data), args.frame)
    else:
        record = _load_single_frame(args.frame)
    dets = trainer.detect(model, record, run.train.target_doppler,
                          run.postprocess, plot_path=args.plot)
    for det in dets:
        coords = " ".join(f"{v:.2f}" for v in det.box3d)
        print(f"{record.frame_id} class={det.class_id} "
              f"score={det.score:.4f} obj={det.objectness:.4f} box=[{coords}]")
    if args.dump:
        write_detections(Path(args.dump), {record.frame_id: dets})
    if not dets:
        print("no detections above threshold")
    return 0


def _cmd_synth(args) -> int:
    spec = SceneSpec(
        shape=tuple(args.shape),
        num_targets=args.targets,
        num_classes=args.num_classes,
        noise_level=args.noise,
    )
    root = Path(args.out)
    write_labels(root, [f"class{i}" for i in range(args.num_classes)])
    train = [synth_frame(args.seed + i, spec, f"frame_{args.seed + i:06d}")
             for i in range(args.frames)]
    save_frames(train, root / "train")
    if args.test_frames > 0:
        test = [synth_frame(args.seed + 10_000_019 + i, spec,
                            f"frame_t{args.seed + i:06d}")
                for i in range(args.test_frames)]
        save_frames(test, root / "test")
    print(f"wrote {args.frames} train and {args.test_frames} test frames to {root}")
    return 0


def _cmd_bench(args) -> int:
    model, _ = trainer.load_checkpoint(args.ckpt)
    run = load_config(args.config)
    stats = trainer.bench(model, tuple(args.shape), run.train.target_doppler,
                          repeats=args.repeats)
    print(f"parameters: {stats['params']} ({stats['params'] / 1e6:.2f} M)")
    print(f"latency per frame over {stats['repeats']} runs: "
          f"mean {stats['mean_ms']:.1f} ms, std {stats['std_ms']:.1f} ms, "
          f"min {stats['min_ms']:.1f} ms, max {stats['max_ms']:.1f} ms")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transrad",
                                     description="Radar RAD-cube 3D object detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--data", help="dataset root (overrides config)")
    p.add_argument("--out", default="runs", help="checkpoint/log directory")
    p.add_argument("--phase2", action="store_true",
                   help="second-round preset: raises objectness/class weights")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", help="write results table here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("detect", help="run detection on one frame")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frame", required=True, help="frame id (with --data) or .rad path")
    p.add_argument("--data", help="directory holding the frame")
    p.add_argument("--config")
    p.add_argument("--plot", help="write an RA/RD heatmap PNG here")
    p.add_argument("--dump", help="write the detection dump here")
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-frames", type=int, default=4)
    p.add_argument("--targets", type=int, default=2)
    p.add_argument("--num-classes", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--shape", type=int, nargs=3, default=[64, 64, 32],
                   metavar=("R", "A", "D"))
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("bench", help="latency and parameter count")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--shape", type=int, nargs=3, default=[256, 256, 64],
                   metavar=("R", "A", "D"))
    p.add_argument("--repeats", type=int, default=10)
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

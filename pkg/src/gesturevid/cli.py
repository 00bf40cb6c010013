"""Command-line surface: gen-data, segment, train, eval, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.  Argument-parsing failures exit 2 via argparse itself.
"""

import argparse
import json
import os
import sys

import scipy.signal

from . import datagen, harness, io_ustf, model, pipeline
from .errors import ConfigError, DataError, NumericError


def _cmd_gen_data(args):
    with open(args.config) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
    if args.seed is not None:
        raw["seed"] = args.seed
    config = datagen.SynthConfig.from_json(raw)
    manifest = datagen.generate(config, args.out)
    segments, window = pipeline.load_dataset(manifest)
    print(f"wrote {len(segments)} segments of {window} frames to {manifest}")
    return 0


def _parse_fingers(text):
    try:
        mask = [int(v) for v in text.split(",") if v != ""]
    except ValueError:
        raise ConfigError(f"--fingers expects comma-separated indices, got {text!r}")
    if not mask:
        raise ConfigError("--fingers must select at least one finger")
    return mask


def _cmd_segment(args):
    frames = io_ustf.read_tensor(args.frames)
    if frames.ndim != 3:
        raise DataError(f"{args.frames}: expected a (T,H,W) tensor, got {frames.shape}")
    _, positions = pipeline.read_marker_csv(args.markers)
    angles = pipeline.compute_joint_angles(positions)
    if angles.shape[0] != frames.shape[0]:
        raise DataError(
            f"marker series has {angles.shape[0]} frames but the video has "
            f"{frames.shape[0]}")
    os.makedirs(args.out, exist_ok=True)
    pipeline.write_angle_csv(os.path.join(args.out, "angles.csv"), angles)
    mask = _parse_fingers(args.fingers) if args.fingers else None
    peaks = pipeline.detect_peaks(angles, args.prominence, args.distance,
                                  finger_mask=mask)
    sel = angles[:, mask] if mask else angles
    prominences = (scipy.signal.peak_prominences(sel.mean(axis=1), peaks)[0]
                   if peaks.size else None)
    target = tuple(args.crop) if args.crop else frames.shape[1:]
    offset = tuple(args.offset) if args.offset else None
    normalized = pipeline.crop_and_normalize(frames, target, offset)
    segments = pipeline.extract_segments(normalized, peaks, args.window,
                                         prominences=prominences,
                                         label=args.label, subject=args.subject)
    manifest = pipeline.append_dataset(args.out, segments, args.window)
    print(f"{len(peaks)} peaks, {len(segments)} segments kept -> {manifest}")
    return 0


def _parse_filters(text):
    try:
        filters = tuple(int(v) for v in text.split(",") if v != "")
    except ValueError:
        raise ConfigError(f"--filters expects comma-separated widths, got {text!r}")
    if not filters:
        raise ConfigError("--filters must name at least one stage width")
    return filters


def _cmd_train(args):
    config = harness.TrainConfig(
        variant=args.variant, manifest=args.manifest, out_dir=args.out,
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        dropout=args.dropout, seeds=(args.seed,),
        train_fraction=args.train_fraction, patience=args.patience,
        stage_filters=_parse_filters(args.filters),
        interleaved_relu=args.interleaved_relu,
        num_classes=args.num_classes,
        keep_checkpoints=args.keep_checkpoints)
    _, metrics = harness.train_run(config, args.seed, resume=args.resume)
    print(f"variant={metrics['variant']} seed={metrics['seed']} "
          f"accuracy={metrics['accuracy']:.4f} "
          f"epochs={len(metrics['loss_curve'])} "
          f"params={metrics['param_count']} "
          f"wall={metrics['wall_seconds']:.1f}s")
    return 0


def _cmd_eval(args):
    net = model.load_checkpoint(args.checkpoint)
    segments, _window = pipeline.load_dataset(args.manifest)
    state_path = os.path.join(args.checkpoint, harness.TRAINER_STATE)
    if args.split == "all":
        chosen = segments
    else:
        if not os.path.isfile(state_path):
            raise ConfigError(
                f"{args.checkpoint} has no trainer state; use --split all")
        with open(state_path) as fh:
            state = json.load(fh)
        train_set, test_set = pipeline.split_dataset(
            segments, state["split"]["train_fraction"], state["split"]["seed"])
        chosen = train_set if args.split == "train" else test_set
    x, y = harness.stack_segments(chosen)
    num_classes = net.spec.num_classes
    if int(y.max()) >= num_classes:
        raise DataError("manifest labels exceed the model's class count")
    accuracy, confusion = harness.evaluate(net, x, y, num_classes,
                                           vote=args.vote)
    print(json.dumps({"accuracy": accuracy, "n": int(len(y)),
                      "split": args.split,
                      "confusion": confusion.tolist()}, indent=2))
    return 0


def _cmd_report(args):
    rows = harness.summarize_runs(args.runs)
    if args.format == "json":
        text = json.dumps(rows, indent=2, sort_keys=True) + "\n"
    else:
        lines = ["variant,mean_accuracy,std_accuracy,param_count,n_seeds"]
        for row in rows:
            lines.append(f"{row['variant']},{row['mean_accuracy']!r},"
                         f"{row['std_accuracy']!r},{row['param_count']},"
                         f"{len(row['seeds'])}")
        text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gesturevid",
        description="Gesture-video classification: data synthesis, "
                    "segmentation, training, and reporting.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True, help="SynthConfig JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("segment", help="extract peak-centered video segments")
    p.add_argument("--markers", required=True, help="marker CSV")
    p.add_argument("--frames", required=True, help="frame stack (USTF, T,H,W)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--window", type=int, default=16)
    p.add_argument("--prominence", type=float, default=20.0)
    p.add_argument("--distance", type=int, default=60)
    p.add_argument("--label", type=int, default=0)
    p.add_argument("--subject", type=int, default=0)
    p.add_argument("--crop", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--offset", type=int, nargs=2, metavar=("ROW", "COL"))
    p.add_argument("--fingers", help="comma-separated finger indices for the peak signal")
    p.set_defaults(func=_cmd_segment)

    p = sub.add_parser("train", help="train one variant on one seed")
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", required=True,
                   choices=["2d", "3d", "2p1d", "proposed"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--filters", default="8,16,32,64")
    p.add_argument("--num-classes", type=int, default=0)
    p.add_argument("--interleaved-relu", action="store_true")
    p.add_argument("--keep-checkpoints", action="store_true")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=["test", "train", "all"], default="test")
    p.add_argument("--vote", action="store_true",
                   help="per-frame majority vote (2d variant)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="aggregate run metrics into a table")
    p.add_argument("--runs", required=True)
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

"""Command-line pipeline: build, quantize, infer, evaluate, profile.

Exit codes: 0 success, 2 usage (argparse), 3 I/O, 4 model-format,
5 validation/calibration. Every command is deterministic for a given
seed: running it twice produces byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import builders, dataset, metrics, profiler
from .graph import DRLabel, GraphValidationError, classify
from .model_io import ModelFormatError, load_model, save_model
from .quantizer import CalibrationError, calibrate, fidelity_report, quantize_graph

DEFAULT_SEED = 0
DEFAULT_CALIBRATION_SAMPLES = 32

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_VALIDATION = 5


def _parse_filters(spec: str):
    """'40x3,80x3' -> ((40, (3, 3)), (80, (3, 3)))."""
    stages = []
    for part in spec.split(","):
        out_c, _, k = part.strip().partition("x")
        if not k:
            raise ValueError(f"bad filter stage {part!r}, expected CHANNELSxKERNEL")
        stages.append((int(out_c), (int(k), int(k))))
    return tuple(stages)


def _load_image(path) -> dataset.LabeledImage:
    with Image.open(path) as im:
        pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return dataset.LabeledImage(pixels, DRLabel.NoDR, str(path))


def _load_calibration_tensors(calib_dir, limit: int):
    calib_dir = Path(calib_dir)
    if not calib_dir.is_dir():
        raise FileNotFoundError(f"calibration directory {calib_dir} does not exist")
    paths = sorted(
        p for p in calib_dir.rglob("*")
        if p.is_file() and p.suffix.lower() in dataset.IMAGE_EXTENSIONS
    )
    if not paths:
        raise CalibrationError(f"calibration directory {calib_dir} holds no images")
    return [dataset.preprocess(_load_image(p)) for p in paths[:limit]]


def cmd_build(args) -> int:
    kwargs = {"seed": args.seed}
    if args.arch == "mobilenet":
        kwargs["width_multiplier"] = args.width_multiplier
    elif args.arch == "shufflenet":
        kwargs["groups"] = args.groups
        kwargs["width_multiplier"] = args.width_multiplier
    elif args.arch == "customdnn" and args.filters:
        kwargs["filters"] = _parse_filters(args.filters)
    graph = builders.ARCHITECTURES[args.arch](**kwargs)
    if args.weights:
        builders.apply_weight_sidecar(graph, args.weights)
    out = args.output or f"{args.arch}.edrm"
    save_model(graph, out)
    print(f"wrote {out} ({Path(out).stat().st_size} bytes, {graph.precision})")
    return EXIT_OK


def cmd_quantize(args) -> int:
    graph = load_model(args.model)
    if graph.precision != "f32":
        raise CalibrationError(f"{args.model} is already quantized")
    samples = _load_calibration_tensors(args.calibration, args.samples)
    quantized = quantize_graph(graph, calibrate(graph, samples))
    out = args.output or str(Path(args.model).with_suffix("")) + "-int8.edrm"
    save_model(quantized, out)
    report = fidelity_report(graph, quantized, samples)
    if args.machine:
        print(f"output {out}")
        print(f"agreement {report.agreement!r}")
        print(f"max_logit_error {report.max_logit_error!r}")
        print(f"f32_bytes {report.f32_bytes}")
        print(f"i8_bytes {report.i8_bytes}")
    else:
        print(f"wrote {out} ({report.i8_bytes} bytes)")
        print(f"fidelity over {len(samples)} calibration image(s): {report.summary()}")
    return EXIT_OK


def cmd_infer(args) -> int:
    graph = load_model(args.model)
    label, probs = classify(graph, dataset.preprocess(_load_image(args.image)))
    if args.machine:
        for l in DRLabel:
            print(f"prob_{l.name} {float(probs[l.value])!r}")
        print(f"label {label.name}")
    else:
        for l in DRLabel:
            print(f"{l.name:<14}{probs[l.value]:.6f}")
        print(f"predicted: {label.name}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    graph = load_model(args.model)
    images = dataset.load_dataset(args.dataset)
    if not images:
        raise ValueError(f"dataset {args.dataset} holds no images")
    report = metrics.evaluate(graph, images)
    if args.output:
        Path(args.output).write_text(report.to_machine() + "\n")
    print(report.to_machine() if args.machine else report.to_text())
    return EXIT_OK


def cmd_profile(args) -> int:
    graph = load_model(args.model)
    profiles = (
        profiler.load_profiles(args.profiles) if args.profiles else profiler.paper_profiles()
    )
    plan = profiler.plan_memory(graph)
    macs = profiler.count_macs(graph).total
    rows = [
        (p.name, profiler.estimate_latency(graph, p), plan.arena_bytes, plan.rom_bytes)
        for p in profiles.values()
    ]
    if args.machine:
        print(f"macs {macs}")
        print(f"arena_ram_bytes {plan.arena_bytes}")
        print(f"rom_bytes {plan.rom_bytes}")
        for name, latency, _, _ in rows:
            print(f"latency_ms\t{name}\t{latency!r}")
    else:
        print(f"{graph.name}: {macs} MACs")
        print(f"{'device':<16}{'latency_ms':>14}{'arena_RAM':>12}{'ROM':>12}")
        for name, latency, ram, rom in rows:
            print(f"{name:<16}{latency:>14.1f}{ram:>12}{rom:>12}")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgedr",
        description="Int8 inference engine and deployment profiler for "
        "diabetic-retinopathy classifiers.",
    )
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED, help="RNG seed")
    parser.add_argument("--output", help="output path (command-specific default)")
    parser.add_argument(
        "--machine", action="store_true", help="machine-readable key-value output"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build an f32 model file with seeded random weights")
    p.add_argument("arch", choices=sorted(builders.ARCHITECTURES))
    p.add_argument("--width-multiplier", type=float, default=1.0)
    p.add_argument("--groups", type=int, default=3, help="shufflenet group count")
    p.add_argument("--filters", help="customdnn conv stages, e.g. 40x3,80x3,96x3,128x3")
    p.add_argument("--weights", help="raw-tensor sidecar manifest to import")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("quantize", help="convert an f32 model to int8 with calibration data")
    p.add_argument("model")
    p.add_argument("--calibration", required=True, help="directory of calibration images")
    p.add_argument("--samples", type=int, default=DEFAULT_CALIBRATION_SAMPLES)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("infer", help="classify one image")
    p.add_argument("model")
    p.add_argument("image")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="classify a labeled dataset and report metrics")
    p.add_argument("model")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("profile", help="latency/RAM/ROM table per device class")
    p.add_argument("model")
    p.add_argument("--profiles", help="device profile file (default: bundled)")
    p.set_defaults(func=cmd_profile)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ModelFormatError as e:
        print(f"error: model format: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as e:
        print(f"error: i/o: {e}", file=sys.stderr)
        return EXIT_IO
    except (GraphValidationError, CalibrationError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

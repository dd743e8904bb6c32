"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error (parse/IO), 3 internal failure.
Machine-readable results go to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from pvhotspot.dataset import (
    kmeans_anchors,
    parse_annotations,
    random_scene_params,
    read_manifest,
    serialize_annotations,
    synth_scene,
)
from pvhotspot.detector import (
    DEFAULT_CONF,
    DEFAULT_NMS,
    HeadParams,
    baseline_detect,
    detect_image,
    detections_from_json,
    detections_to_json,
)
from pvhotspot.errors import DataError
from pvhotspot.evalreport import ReportConfig, build_report, evaluate
from pvhotspot.inference import load_weights, parse_cfg
from pvhotspot.thermal_io import contrast_stretch, encode_pnm, read_tiff_file, write_tiff

log = logging.getLogger("pvhotspot")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def atomic_write(path, data):
    """Write bytes or text to ``path`` through a temp file + rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def _pair(text, kind=float, name="value"):
    parts = text.split(",")
    if len(parts) != 2:
        raise UsageError(f"{name} must look like A,B, got {text!r}")
    try:
        return kind(parts[0]), kind(parts[1])
    except ValueError:
        raise UsageError(f"{name} must look like A,B, got {text!r}") from None


def parse_anchor_arg(text):
    anchors = [_pair(chunk, float, "--anchors entry") for chunk in text.split(";") if chunk.strip()]
    if not anchors:
        raise UsageError("--anchors is empty")
    return anchors


def _percentiles(text):
    lo, hi = _pair(text, float, "--stretch")
    if not 0 <= lo < hi <= 100:
        raise UsageError(f"--stretch needs 0 <= LO < HI <= 100, got {text!r}")
    return lo, hi


def _unit(value, name):
    if not 0 <= value <= 1:
        raise UsageError(f"{name} must lie in [0, 1], got {value}")
    return value


def _load_truths(entries):
    truths = {}
    for image_path, ann_path in entries:
        frame = read_tiff_file(image_path)
        text = Path(ann_path).read_text() if ann_path is not None else ""
        image_id = Path(image_path).stem
        truths[image_id] = parse_annotations(text, image_id, frame.width, frame.height)
    return truths


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_stretch(args):
    lo, hi = _percentiles(args.stretch)
    if args.manifest:
        inputs = [img for img, _ in read_manifest(args.manifest)]
        out_dir = Path(args.out)
        targets = [out_dir / (Path(p).stem + ".pgm") for p in inputs]
    elif args.input:
        inputs, targets = [Path(args.input)], [Path(args.out)]
    else:
        raise UsageError("stretch needs an input TIFF or --manifest")
    for src, dst in zip(inputs, targets):
        atomic_write(dst, encode_pnm(contrast_stretch(read_tiff_file(src), lo, hi)))
    print(json.dumps({"stretched": len(inputs), "out": str(args.out)}))
    return EXIT_OK


def cmd_synth(args):
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    mx, my = _pair(args.modules, int, "--modules")
    if min(mx, my, args.cell_px, args.delta) < 1 or args.noise < 0:
        raise UsageError("--modules, --cell-px and --delta must be positive, --noise >= 0")
    if args.base_counts < 0 or args.base_counts + args.delta > 65535:
        raise UsageError("--base-counts + --delta must fit in 16 bits")
    out = Path(args.out)
    rng = np.random.default_rng(args.seed)
    scene_seeds = rng.integers(0, 2**63, size=args.count)
    lines = []
    for n, s in enumerate(scene_seeds):
        name = f"scene_{n:04d}"
        params = random_scene_params(
            int(s), modules_x=mx, modules_y=my, cell_px=args.cell_px,
            noise_sigma=args.noise, hotspot_delta=args.delta,
            base_counts=args.base_counts, glare=args.glare, image_id=name,
        )
        frame, ann = synth_scene(params)
        atomic_write(out / f"{name}.tif", write_tiff(frame))
        atomic_write(out / f"{name}.txt", serialize_annotations(ann))
        lines.append(f"{name}.tif\t{name}.txt\n")
    atomic_write(out / "manifest.tsv", "".join(lines))
    print(json.dumps({"scenes": args.count, "manifest": str(out / "manifest.tsv")}))
    return EXIT_OK


def cmd_anchors(args):
    gw, gh = _pair(args.grid, int, "--grid")
    truths = _load_truths(read_manifest(args.manifest))
    sizes = [(a.w, a.h) for ann in truths.values() for a in ann.items]
    anchors = kmeans_anchors(sizes, args.k, gw, gh, args.seed)
    text = "".join(f"{w:.6f},{h:.6f}\n" for w, h in anchors.anchors)
    if args.out:
        atomic_write(args.out, text)
    print(json.dumps({"anchors": [list(a) for a in anchors.anchors],
                      "mean_best_iou": anchors.mean_best_iou}))
    return EXIT_OK


def _make_detector(args):
    lo, hi = _percentiles(args.stretch)
    conf = _unit(args.conf, "--conf")
    nms_t = _unit(args.nms, "--nms")
    if args.baseline:
        if args.cfg or args.weights:
            raise UsageError("--baseline cannot be combined with --cfg/--weights")
        if args.delta <= 0 or args.cell_px < 1:
            raise UsageError("--delta must be > 0 and --cell-px >= 1")

        def run(frame):
            base = args.base_counts if args.base_counts is not None else float(np.median(frame.pixels))
            dets = baseline_detect(frame, base, args.delta, args.cell_px)
            return [d for d in dets if d.score >= conf]
        return run

    if not (args.cfg and args.weights):
        raise UsageError("detect needs --baseline or both --cfg and --weights")
    model = parse_cfg(Path(args.cfg).read_text())
    model = load_weights(model, Path(args.weights).read_bytes())
    params = HeadParams.from_model(model, conf, nms_t)
    if args.anchors:
        anchors = parse_anchor_arg(args.anchors)
        if len(anchors) != params.B:
            raise UsageError(f"--anchors gives {len(anchors)} anchors, the head has {params.B}")
        params = HeadParams(params.S_w, params.S_h, params.B, params.C, anchors, conf, nms_t)

    def run(frame):
        return detect_image(model, frame, params, (lo, hi))
    return run


def cmd_detect(args):
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    detector = _make_detector(args)
    entries = read_manifest(args.manifest)
    out = Path(args.out)

    def one(entry):
        image_path = entry[0]
        frame = read_tiff_file(image_path)
        dets = detector(frame)
        doc = detections_to_json(Path(image_path).stem, frame.width, frame.height, dets)
        atomic_write(out / f"{Path(image_path).stem}.json", dump_json(doc))
        return len(dets)

    if args.threads == 1:
        counts = [one(e) for e in entries]
    else:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            counts = list(pool.map(one, entries))
    print(json.dumps({"images": len(entries), "detections": sum(counts), "out": str(out)}))
    return EXIT_OK


def _read_detection_dir(directory, names=None):
    directory = Path(directory)
    if names is None:
        paths = sorted(directory.glob("*.json"))
    else:
        paths = [directory / f"{n}.json" for n in names]
    result = {}
    for p in paths:
        image, _, _, dets = detections_from_json(json.loads(p.read_text()))
        result[image] = dets
    return result


def cmd_eval(args):
    iou_t = _unit(args.iou, "--iou")
    truths = _load_truths(read_manifest(args.manifest))
    dets = _read_detection_dir(args.detections, names=sorted(truths))
    result = evaluate(dets, truths, iou_t)
    doc = result.to_json()
    if args.out:
        out = Path(args.out)
        atomic_write(out / "eval.json", dump_json(doc))
        atomic_write(out / "pr.csv", result.pr_csv())
    print(json.dumps(doc))
    return EXIT_OK


def cmd_report(args):
    doc = json.loads(Path(args.report_config).read_text())
    try:
        config = ReportConfig.from_json(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad report config: {exc}") from exc
    report = build_report(_read_detection_dir(args.detections), config)
    if args.out:
        atomic_write(args.out, dump_json(report))
    print(json.dumps(report))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="pvhotspot", description="Solar-plant thermal hotspot detection toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("stretch", help="16-bit TIFF -> 8-bit PGM contrast stretch")
    p.add_argument("input", nargs="?", help="input TIFF (or use --manifest)")
    p.add_argument("--manifest", help="process every image in a manifest; --out is then a directory")
    p.add_argument("--out", required=True, help="output PGM path or directory")
    p.add_argument("--stretch", default="2,98", help="LO,HI percentiles (default 2,98)")
    p.set_defaults(func=cmd_stretch)

    p = sub.add_parser("synth", help="generate synthetic thermal scenes and annotations")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--modules", default="3,2", help="modules across,down (default 3,2)")
    p.add_argument("--cell-px", type=int, default=6)
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian noise sigma in counts")
    p.add_argument("--delta", type=int, default=2000, help="hotspot excess in counts")
    p.add_argument("--base-counts", type=int, default=20000)
    p.add_argument("--glare", action="store_true", help="add one unannotated glare disk per scene")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("anchors", help="fit anchors to the boxes of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--grid", default="13,13", help="final feature grid W,H")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="anchor file (one w,h per line)")
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("detect", help="run detection over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cfg")
    p.add_argument("--weights")
    p.add_argument("--baseline", action="store_true", help="use the threshold-and-label detector")
    p.add_argument("--anchors", help='override head anchors, "w,h;w,h;..." in grid units')
    p.add_argument("--conf", type=float, default=DEFAULT_CONF)
    p.add_argument("--nms", type=float, default=DEFAULT_NMS)
    p.add_argument("--stretch", default="2,98")
    p.add_argument("--out", required=True, help="directory for per-image detection JSON")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--base-counts", type=float, default=None,
                   help="baseline background level (default: frame median)")
    p.add_argument("--delta", type=float, default=1000.0, help="baseline threshold above background")
    p.add_argument("--cell-px", type=int, default=6, help="baseline cell edge in pixels")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score detections against manifest annotations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--detections", required=True, help="directory written by detect")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--out", help="directory for eval.json and pr.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="defect counts and power-loss estimate")
    p.add_argument("--detections", required=True)
    p.add_argument("--report-config", required=True,
                   help="JSON with per_class_power_loss_watts and homes_equivalent_watts")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_report)
    return parser


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pvhotspot: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"pvhotspot: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("internal failure", exc_info=True)
        print(f"pvhotspot: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()

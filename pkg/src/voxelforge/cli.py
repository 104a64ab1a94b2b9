"""voxelforge command-line interface.

Exit codes: 0 success, 1 a verify suite found a failing property, 2 usage
error, 3 I/O error, 4 algorithm error (e.g. NoCandidate). Failures print
one line ``voxelforge: error: <Kind>: <message>`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import augment3d, autolabel, fftmorph, segloss
from .bench import DEFAULT_BENCH_SPEC, SCHEMA, bench
from .volgrid import (
    LabelMap,
    Mask,
    Volume,
    VolumeFormatError,
    read_volume,
    resample,
    write_volume,
)

log = logging.getLogger("voxelforge")

EXIT_FAILED_CHECK = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_ALGORITHM = 4


class UsageError(Exception):
    pass


def _emit(report: dict) -> None:
    print(json.dumps(report, indent=2, default=_json_default))


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _vgrid_name(path: Path) -> Path:
    return path if str(path).endswith((".vgrid.json", ".nii")) else path.with_name(path.name + ".vgrid.json")


# --------------------------------------------------------------------------
# Subcommands


def cmd_phantom(args) -> int:
    spec = autolabel.PhantomSpec(dims=tuple(args.dims), spacing_mm=tuple(args.spacing))
    if args.random:
        spec = autolabel.random_phantom_spec(np.random.default_rng(args.seed), spec)
    if args.noise is not None:
        spec = replace(spec, noise_sigma=args.noise)
    out = Path(args.out)
    if args.kind == "uniform":
        rng = np.random.default_rng(args.seed)
        hu = np.full(spec.dims, args.uniform_hu, np.float64)
        if spec.noise_sigma > 0:
            hu += rng.normal(0.0, spec.noise_sigma, spec.dims)
        write_volume(Volume(hu.astype(np.float32), spec.spacing_mm), _vgrid_name(out))
        return 0
    volume, truth = autolabel.make_phantom(spec, args.seed)
    write_volume(volume, _vgrid_name(out))
    for organ, mask in truth.items():
        write_volume(mask, _vgrid_name(out.with_name(f"{out.name}_{organ}")))
    labels = np.zeros(spec.dims, np.uint8)
    labels[truth["lungs"].data.astype(bool)] = 1
    labels[truth["bones"].data.astype(bool)] = 3
    if "kidney" in truth:
        labels[truth["kidney"].data.astype(bool)] = 4
    write_volume(LabelMap(labels, spec.spacing_mm), _vgrid_name(out.with_name(f"{out.name}_labels")))
    return 0


def cmd_label(args) -> int:
    ct = read_volume(args.input)
    if args.organ == "lungs":
        params = autolabel.LungParams(args.air_max, args.erode_mm, args.n_lungs)
        mask = autolabel.label_lungs(ct, params)
    else:
        params = autolabel.BoneParams(args.tau1, args.tau2, args.close_mm, args.skeleton_connectivity)
        mask = autolabel.label_bones(ct, params)
    log.info("%s: %d voxels labelled", args.organ, int(mask.data.sum()))
    write_volume(mask, args.out)
    return 0


def cmd_resample(args) -> int:
    vol = read_volume(args.input)
    write_volume(resample(vol, args.res, args.interp), args.out)
    return 0


_MORPH = {"dilate": fftmorph.dilate, "erode": fftmorph.erode,
          "open": fftmorph.open, "close": fftmorph.close}


def cmd_morph(args) -> int:
    vol = read_volume(args.input)
    if vol.data.size and vol.data.max() > 1:
        raise UsageError("morph input must be a binary mask")
    mask = Mask(vol.data, vol.spacing_mm)
    element = fftmorph.ball_element(args.diameter_mm, mask.spacing_mm)
    write_volume(_MORPH[args.op](mask, element), args.out)
    return 0


def cmd_loss(args) -> int:
    pred = read_volume(args.pred)
    truth = read_volume(args.truth)
    if pred.dims != truth.dims:
        raise UsageError(f"prediction {pred.dims} and truth {truth.dims} differ in shape")
    y = truth.data
    if args.cls is not None:
        y = y == args.cls
    elif y.size and y.max() > 1:
        raise UsageError("truth is not binary; pass --class to select a label")
    p = pred.data.astype(np.float64)
    y = y.astype(np.float64)
    want_grad = args.grad is not None
    if args.kind == "iou":
        rep = segloss.iou_loss(p, y, grad=want_grad)
    elif args.kind == "dice":
        rep = segloss.dice_loss(p, y, grad=want_grad)
    elif args.kind == "iou-pow":
        rep = segloss.iou_loss_power(p, y, args.power, grad=want_grad)
    else:
        rep = segloss.weighted_cross_entropy(p, y, args.wce_mode, grad=want_grad)
    if want_grad:
        write_volume(Volume(rep.gradient.astype(np.float32), pred.spacing_mm), args.grad)
    report = {"schema": SCHEMA, "kind": args.kind, "value": rep.value, "n": int(p.size)}
    if args.kind == "iou-pow":
        report["power"] = args.power
    if args.kind == "wce":
        report["mode"] = args.wce_mode
    _emit(report)
    return 0


def _suite_metric(args) -> dict:
    iou = segloss.check_jaccard_metric(args.n_max, "iou")
    dice = segloss.check_jaccard_metric(args.n_max, "dice")
    # IOU must pass; Dice must fail (it is not a metric)
    return {"iou": iou, "dice": dice, "passed": iou["passed"] and not dice["passed"]}


def _suite_penalty(args) -> dict:
    rows = segloss.penalty_curves(args.N, list(range(0, args.N + 1, max(1, args.N // 20))))
    big = segloss.penalty_curves(10**6, [1])[0]
    rel = abs(big["L_FN"] - big["L_FP"]) / big["L_FN"]
    return {
        "N": args.N,
        "rows": rows,
        "large_N": {"N": 10**6, "eps": 1, **big, "relative_gap": rel},
        "passed": all(r["match"] for r in rows) and big["match"] and rel < 1e-6,
    }


def _suite_gradcheck(args) -> dict:
    runs = [
        segloss.grad_check("iou", args.trials, args.n, args.tol, seed=args.seed),
        segloss.grad_check("dice", args.trials, args.n, args.tol, seed=args.seed),
    ]
    for m in (0.5, 2.0, 3.0):
        runs.append(segloss.grad_check("iou-pow", args.trials, args.n, args.tol, power=m, seed=args.seed))
    return {"runs": runs, "passed": all(r["passed"] for r in runs)}


def _suite_restriction(args) -> dict:
    rep = segloss.restriction_trials(args.trials_restriction, 32, np.random.default_rng(args.seed))
    return rep


_SUITES = {
    "metric": _suite_metric,
    "penalty": _suite_penalty,
    "gradcheck": _suite_gradcheck,
    "restriction": _suite_restriction,
}


def cmd_verify(args) -> int:
    names = list(_SUITES) if args.suite == "all" else [args.suite]
    results = {name: _SUITES[name](args) for name in names}
    passed = all(r["passed"] for r in results.values())
    _emit({"schema": SCHEMA, "suites": results, "passed": passed})
    return 0 if passed else EXIT_FAILED_CHECK


def _read_list(path) -> list[str]:
    base = Path(path).parent
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    return [str(base / ln) if not Path(ln).is_absolute() else ln for ln in lines if ln and not ln.startswith("#")]


def cmd_augment(args) -> int:
    images = _read_list(args.input)
    labels = _read_list(args.labels) if args.labels else [None] * len(images)
    if len(images) != len(labels):
        raise UsageError(f"{len(images)} images but {len(labels)} label volumes")
    if not images:
        raise UsageError("empty image list")
    spec = augment3d.AugmentSpec.from_json(args.spec) if args.spec else augment3d.AugmentSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def loader(img_path, lab_path):
        def load():
            image = read_volume(img_path)
            if lab_path is None:
                lab = LabelMap(np.zeros(image.dims, np.uint8), image.spacing_mm)
            else:
                raw = read_volume(lab_path)
                lab = LabelMap(raw.data, raw.spacing_mm)
            return image, lab
        return load

    def sink(i, pair):
        stem = out_dir / f"item_{i:05d}"
        write_volume(pair.image, f"{stem}_image.vgrid.json")
        write_volume(pair.labels, f"{stem}_labels.vgrid.json")
        record = {"schema": SCHEMA, "index": i, "source": images[i], "seed": spec.seed,
                  "params": pair.params.to_dict()}
        Path(f"{stem}_params.json").write_text(json.dumps(record, indent=2) + "\n")
        log.info("item %d written", i)

    items = [loader(a, b) for a, b in zip(images, labels)]
    for start in range(0, len(items), args.batch):
        augment3d.pipeline_run(
            items[start:start + args.batch],
            spec,
            depth=args.depth,
            n_threads=args.threads,
            fill_value=args.fill,
            occlude_labels=args.occlude_labels,
            sink=sink,
            start_index=start,
        )
    return 0


def cmd_bench(args) -> int:
    spec = augment3d.AugmentSpec.from_json(args.spec) if args.spec else DEFAULT_BENCH_SPEC
    spec = replace(spec, seed=args.seed)
    report = bench(
        spec,
        args.batch_sizes,
        args.repetitions,
        depth=args.depth,
        dims=tuple(args.dims),
        n_threads=args.threads,
        seed=args.seed,
    )
    _emit(report)
    return 0


# --------------------------------------------------------------------------
# Parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"voxelforge: error: UsageError: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("batch sizes must be positive")
    return vals


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="voxelforge", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="write a synthetic CT torso and its truth masks", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output prefix (writes PREFIX.vgrid.json and PREFIX_<organ>.vgrid.json)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=("torso", "uniform"), default="torso")
    p.add_argument("--uniform-hu", type=float, default=40.0, help="intensity of the uniform phantom")
    p.add_argument("--random", action="store_true", help="jitter the torso geometry from --seed")
    p.add_argument("--dims", type=int, nargs=3, default=[96, 96, 64])
    p.add_argument("--spacing", type=float, nargs=3, default=[3.0, 3.0, 3.0], help="voxel spacing in mm")
    p.add_argument("--noise", type=float, help="Gaussian noise sigma in HU (default 10, or drawn with --random)")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("label", help="unsupervised lung or skeleton labeling", formatter_class=fmt)
    p.add_argument("--organ", choices=("lungs", "bones"), required=True)
    p.add_argument("--in", dest="input", required=True, help="CT volume in HU")
    p.add_argument("--out", required=True)
    p.add_argument("--air-max", type=float, default=-150.0, help="air threshold (HU, inclusive)")
    p.add_argument("--erode-mm", type=float, default=10.0, help="lung erosion ball diameter (mm)")
    p.add_argument("--n-lungs", type=int, default=2)
    p.add_argument("--tau1", type=float, default=0.0, help="bone retention threshold (HU)")
    p.add_argument("--tau2", type=float, default=200.0, help="bone exterior threshold (HU)")
    p.add_argument("--close-mm", type=float, default=25.0, help="bone closing ball diameter (mm)")
    p.add_argument("--skeleton-connectivity", type=int, choices=(6, 26), default=26)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("resample", help="anti-aliased isotropic resampling", formatter_class=fmt)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--res", type=float, default=3.0, help="target resolution (mm)")
    p.add_argument("--interp", choices=("trilinear", "nearest"), default="trilinear")
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("morph", help="FFT binary morphology with a ball element", formatter_class=fmt)
    p.add_argument("--op", choices=tuple(_MORPH), required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--diameter-mm", type=float, required=True)
    p.set_defaults(func=cmd_morph)

    p = sub.add_parser("loss", help="evaluate a segmentation loss", formatter_class=fmt)
    p.add_argument("--kind", choices=("iou", "dice", "iou-pow", "wce"), required=True)
    p.add_argument("--pred", required=True, help="probability volume")
    p.add_argument("--truth", required=True, help="binary mask or label map")
    p.add_argument("--class", dest="cls", type=int, help="label code to score against")
    p.add_argument("--power", type=float, default=2.0, help="power m for iou-pow")
    p.add_argument("--wce-mode", choices=("paper-literal", "inverse-frequency"), default="paper-literal")
    p.add_argument("--grad", help="write the gradient volume here")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("verify", help="run a loss-property suite, JSON report", formatter_class=fmt)
    p.add_argument("--suite", choices=(*_SUITES, "all"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-max", type=int, default=3, help="exhaustive vector length for metric")
    p.add_argument("--N", type=int, default=100, help="true-positive count for penalty")
    p.add_argument("--trials", type=int, default=100, help="gradcheck trials")
    p.add_argument("--n", type=int, default=64, help="gradcheck field length")
    p.add_argument("--tol", type=float, default=1e-4, help="gradcheck relative tolerance")
    p.add_argument("--trials-restriction", type=int, default=100_000)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("augment", help="augment a list of volumes", formatter_class=fmt)
    p.add_argument("--in", dest="input", required=True, help="text file, one image path per line")
    p.add_argument("--labels", help="text file, one label path per line")
    p.add_argument("--spec", help="AugmentSpec JSON")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, help="master seed (overrides the spec)")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--depth", type=int, default=2, help="FIFO depth (1 disables overlap)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--fill", type=float, default=0.0, help="output value outside the input")
    p.add_argument("--occlude-labels", action="store_true", help="zero labels inside the occluded prism")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("bench", help="augmentation throughput benchmark", formatter_class=fmt)
    p.add_argument("--spec", help="AugmentSpec JSON")
    p.add_argument("--batch-sizes", type=_int_list, default=[1, 4, 16, 32])
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--dims", type=int, nargs=3, default=[120, 120, 160], help="synthetic volume size (3 mm voxels)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return parser


def _fail(kind: str, message, code: int) -> int:
    text = " ".join(str(message).split())
    print(f"voxelforge: error: {kind}: {text}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail("UsageError", exc, EXIT_USAGE)
    except autolabel.NoCandidate as exc:
        return _fail("NoCandidate", exc, EXIT_ALGORITHM)
    except (VolumeFormatError, OSError) as exc:
        return _fail(type(exc).__name__, exc, EXIT_IO)
    except augment3d.PipelineError as exc:
        code = EXIT_IO if isinstance(exc.cause, (OSError, VolumeFormatError)) else EXIT_ALGORITHM
        return _fail("PipelineError", exc, code)
    except ValueError as exc:
        return _fail("ValueError", exc, EXIT_ALGORITHM)


if __name__ == "__main__":
    sys.exit(main())

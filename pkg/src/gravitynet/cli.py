"""Command-line orchestration: synth, train, test, eval, compare.

Options resolve in fixed precedence: hard default < task profile < config file
(key = value lines) < explicit flag. Every training run writes its fully
resolved configuration next to the checkpoints, and that file alone is enough
to relaunch the run. The compute device comes from GRAVITYNET_DEVICE
(default cpu). Exit codes are category-coded; see _EXIT_CODES.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from . import data, evaluation, inference, synthetic, training
from .errors import (
    ComparisonError,
    ConfigMismatchError,
    DataIOError,
    GravityNetError,
    InvalidInputError,
)

_EXIT_CODES = {
    "invalid-geometry": 2,
    "non-square-grid": 2,
    "invalid-step": 2,
    "invalid-input": 2,
    "invalid-input-shape": 2,
    "io-error": 3,
    "configuration-mismatch": 4,
    "annotation-error": 5,
    "invalid-mask": 5,
    "placement-error": 5,
    "invalid-comparison": 6,
    "undefined-tpr": 6,
    "numeric-failure": 7,
    "error": 1,
}

# the grid/NMS settings of the two tasks, best table rows of each
PROFILES = {
    "mc": {"step": 10, "hooking_distance": 10.0, "box_side": 7.0},
    "ma": {"step": 6, "hooking_distance": 6.0, "box_side": 3.0},
}


@dataclasses.dataclass(frozen=True)
class _Opt:
    name: str
    type: type
    default: object
    help: str


_TRAIN_OPTS = [
    _Opt("data", str, None, "dataset directory (manifest.csv + annotations.csv)"),
    _Opt("out", str, None, "output directory for checkpoints and reports"),
    _Opt("fold", int, 0, "which of the two folds to train on (0 or 1)"),
    _Opt("epochs", int, 50, "training epochs"),
    _Opt("batch_size", int, 8, "mini-batch size"),
    _Opt("initial_lr", float, 1e-4, "initial Adam learning rate"),
    _Opt("lr_decay_factor", float, 0.1, "plateau decay factor"),
    _Opt("lr_patience", int, 3, "epochs without validation improvement before decay"),
    _Opt("lam", float, 10.0, "regression balance weight"),
    _Opt("alpha", float, 0.25, "focal class-balance weight"),
    _Opt("phi", float, 2.0, "focal focusing exponent"),
    _Opt("step", int, 10, "gravity-point spacing inside each feature grid"),
    _Opt("hooking_distance", float, 10.0, "positive-assignment distance"),
    _Opt("box_side", float, 7.0, "NMS box side used for validation AUFC"),
    _Opt("iou_threshold", float, 0.5, "NMS IoU threshold"),
    _Opt("prefilter_top_k", int, 5000, "candidates kept before NMS"),
    _Opt("fppi_limit", float, 10.0, "partial-AUFC integration limit"),
    _Opt("backbone_kind", str, "tiny-desk", "tiny-desk or residual-18/34/50/101/152"),
    _Opt("head_channels", int, 256, "channels of each head tower"),
    _Opt("head_depth", int, 4, "conv layers in each head tower"),
    _Opt("pretrained", bool, False, "load pretrained backbone weights"),
    _Opt("validation_fraction", float, 0.3, "share of the training fold held out"),
    _Opt("seed", int, 0, "seed controlling split, init and shuffling"),
    _Opt("save_init", bool, False, "also write the untrained init.pt checkpoint"),
]

_TEST_OPTS = [
    _Opt("checkpoint", str, None, "trained checkpoint"),
    _Opt("data", str, None, "dataset directory"),
    _Opt("out", str, None, "detections CSV to write"),
    _Opt("split", str, "test", "which images to run: test, val, train or all"),
    _Opt("fold", int, 0, "fold the checkpoint was trained on"),
    _Opt("box_side", float, None, "NMS box side (default: from checkpoint)"),
    _Opt("iou_threshold", float, 0.5, "NMS IoU threshold"),
    _Opt("score_threshold", float, 0.0, "write only detections scoring strictly above this"),
    _Opt("prefilter_top_k", int, 5000, "candidates kept before NMS"),
]

_EVAL_OPTS = [
    _Opt("detections", str, None, "detections CSV"),
    _Opt("data", str, None, "dataset directory with the ground truth"),
    _Opt("out", str, None, "output directory for froc.csv, metrics.txt and froc.png"),
    _Opt("fppi_limit", float, 10.0, "partial-AUFC integration limit"),
    _Opt("images", str, "all", "evaluate 'all' manifest images (absent ones count as "
                                "missed) or only the 'detected' ones, e.g. a tested fold"),
    _Opt("unhealthy_only", bool, False, "restrict the FPpI denominator to images with lesions"),
]

_COMPARE_OPTS = [
    _Opt("detections_a", str, None, "detections CSV of method A"),
    _Opt("detections_b", str, None, "detections CSV of method B"),
    _Opt("data", str, None, "dataset directory with the ground truth"),
    _Opt("out", str, None, "output directory for report.txt and averaged_froc.png"),
    _Opt("fppi_limit", float, 10.0, "partial-AUFC integration limit"),
    _Opt("images", str, "all", "compare over 'all' manifest images or only the "
                                "'detected' ones (union of both files)"),
    _Opt("iterations", int, 1000, "bootstrap iterations"),
    _Opt("significance", float, 0.05, "significance level"),
    _Opt("seed", int, 0, "bootstrap seed"),
]


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_options(parser: argparse.ArgumentParser, opts: list[_Opt], with_profile: bool = False):
    parser.add_argument("--config", type=str, default=None, help="key = value config file")
    if with_profile:
        parser.add_argument("--profile", choices=sorted(PROFILES), default=None,
                            help="task preset for step, hooking distance and box side")
    for opt in opts:
        if opt.type is bool:
            parser.add_argument(_flag(opt.name), dest=opt.name, action="store_const",
                                const=True, default=None, help=opt.help)
        else:
            parser.add_argument(_flag(opt.name), dest=opt.name, type=opt.type,
                                default=None, help=opt.help)


def _parse_config_file(path: str) -> dict[str, str]:
    if not os.path.exists(path):
        raise DataIOError(f"config file not found: {path}")
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidInputError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
    return values


def _coerce(opt: _Opt, raw: str):
    if opt.type is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise InvalidInputError(f"option {opt.name} expects true/false, got {raw!r}")
    try:
        return opt.type(raw)
    except ValueError as exc:
        raise InvalidInputError(f"option {opt.name}: {exc}") from exc


def _resolve(args: argparse.Namespace, opts: list[_Opt], required: tuple[str, ...]) -> dict:
    """defaults < profile < config file < explicit flags."""
    by_name = {o.name: o for o in opts}
    resolved = {o.name: o.default for o in opts}
    profile = getattr(args, "profile", None)
    if profile:
        resolved.update(PROFILES[profile])
    if args.config:
        for key, raw in _parse_config_file(args.config).items():
            if key == "profile":
                if raw not in PROFILES:
                    raise InvalidInputError(f"unknown profile {raw!r}")
                resolved.update(PROFILES[raw])
                continue
            if key not in by_name:
                raise InvalidInputError(f"unknown config key {key!r}")
            resolved[key] = _coerce(by_name[key], raw)
    for opt in opts:
        given = getattr(args, opt.name)
        if given is not None:
            resolved[opt.name] = given
    for name in required:
        if resolved[name] is None:
            raise InvalidInputError(f"missing required option {_flag(name)}")
    return resolved


def _write_resolved_config(path: str, resolved: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(resolved):
            value = resolved[key]
            if value is None:
                continue
            fh.write(f"{key} = {value}\n")


def _device() -> str:
    return os.environ.get("GRAVITYNET_DEVICE", "cpu")


def _load_prepared(data_dir: str) -> data.Dataset:
    manifest = data.read_manifest(data_dir)
    return data.load_dataset(manifest)


def cmd_synth(args) -> int:
    spec = synthetic.SyntheticSpec()
    if args.spec:
        if not os.path.exists(args.spec):
            raise DataIOError(f"spec file not found: {args.spec}")
        with open(args.spec, "r", encoding="utf-8") as fh:
            spec = synthetic.SyntheticSpec.from_json(fh.read())
    if args.seed is not None:
        spec = dataclasses.replace(spec, rng_seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    manifest = synthetic.generate_synthetic(spec, args.out)
    total = sum(len(e.lesions) for e in manifest.entries)
    print(f"wrote {len(manifest.entries)} images ({total} lesions) to {args.out}")
    print(f"manifest: {os.path.join(args.out, data.MANIFEST_NAME)}")
    return 0


def cmd_train(args) -> int:
    resolved = _resolve(args, _TRAIN_OPTS, required=("data", "out"))
    if resolved["fold"] not in (0, 1):
        raise InvalidInputError(f"fold must be 0 or 1, got {resolved['fold']}")
    dataset = _load_prepared(resolved["data"])
    config_fields = {f.name for f in dataclasses.fields(training.TrainConfig)}
    config = training.TrainConfig(**{k: v for k, v in resolved.items() if k in config_fields})
    os.makedirs(resolved["out"], exist_ok=True)
    _write_resolved_config(os.path.join(resolved["out"], "config.txt"), resolved)

    result = training.train_model(
        dataset,
        resolved["fold"],
        config,
        checkpoint_dir=resolved["out"],
        save_init=resolved["save_init"],
        log=print,
        device=_device(),
    )
    report = result.report
    with open(os.path.join(resolved["out"], "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    print(
        f"best epoch {report.best_epoch} with validation AUFC {report.best_val_aufc:.4f}; "
        f"checkpoint {result.checkpoint_path}"
    )
    print(
        f"timing: {report.time_per_epoch_s:.2f} s/epoch, "
        f"{report.time_per_image_s * 1e3:.1f} ms/image, "
        f"{report.throughput_ips:.2f} images/s"
    )
    return 0


def _select_split(dataset: data.Dataset, checkpoint: training.Checkpoint, which: str, fold: int):
    if which == "all":
        return list(dataset.samples)
    unhealthy = [s.image_id for s in dataset.samples if s.lesions]
    split = data.split_twofold(
        [s.image_id for s in dataset.samples],
        checkpoint.train_config.validation_fraction,
        checkpoint.train_config.seed,
        unhealthy,
    )[fold]
    ids = {"train": split.train_ids, "val": split.val_ids, "test": split.test_ids}.get(which)
    if ids is None:
        raise InvalidInputError(f"unknown split {which!r}")
    return [dataset.by_id(i) for i in ids]


def cmd_test(args) -> int:
    resolved = _resolve(args, _TEST_OPTS, required=("checkpoint", "data", "out"))
    checkpoint = training.load_checkpoint(resolved["checkpoint"])
    dataset = _load_prepared(resolved["data"])
    sample = dataset.samples[0]
    grid = checkpoint.grid
    if (sample.height, sample.width) != (grid.image_height, grid.image_width):
        raise ConfigMismatchError(
            f"checkpoint was trained on {grid.image_height}x{grid.image_width} images, "
            f"dataset has {sample.height}x{sample.width}"
        )
    samples = _select_split(dataset, checkpoint, resolved["split"], resolved["fold"])
    infer_config = inference.InferenceConfig(
        box_side=resolved["box_side"] if resolved["box_side"] is not None else checkpoint.train_config.box_side,
        iou_threshold=resolved["iou_threshold"],
        score_threshold=resolved["score_threshold"],
        prefilter_top_k=resolved["prefilter_top_k"],
    )
    detections, tpi, throughput = training.run_detection(
        checkpoint.net, grid, samples, infer_config, device=_device()
    )
    detections = {
        image_id: [d for d in inference.classify_detections(dets, infer_config.score_threshold)
                   if d.is_lesion]
        for image_id, dets in detections.items()
    }
    inference.write_detections(resolved["out"], detections)
    n_dets = sum(len(v) for v in detections.values())
    print(f"wrote {n_dets} detections for {len(samples)} images to {resolved['out']}")
    print(f"timing: {tpi * 1e3:.1f} ms/image, {throughput:.2f} images/s")
    return 0


def _plot_froc(path: str, curve: evaluation.FROCCurve, fppi_limit: float) -> None:
    fig, ax = plt.subplots(figsize=(6, 5))
    ax.plot(curve.fppi, curve.tpr, drawstyle="steps-post", color="tab:blue")
    ax.set_xlim(0, fppi_limit)
    ax.set_ylim(0, 1)
    ax.set_xlabel("false positives per image")
    ax.set_ylabel("true positive rate")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _evaluation_scope(dataset, detection_sets: list[dict], mode: str) -> dict:
    """Ground-truth image set for eval/compare: every manifest image, or only
    those covered by the detection files. Detections for unknown ids always fail."""
    lesions = dataset.lesions_by_image
    covered = set()
    for detections in detection_sets:
        unknown = set(detections) - set(lesions)
        if unknown:
            raise ComparisonError(f"detections reference unknown image ids: {sorted(unknown)[:5]}")
        covered |= set(detections)
    if mode == "all":
        return lesions
    if mode == "detected":
        return {k: v for k, v in lesions.items() if k in covered}
    raise InvalidInputError(f"--images must be 'all' or 'detected', got {mode!r}")


def cmd_eval(args) -> int:
    resolved = _resolve(args, _EVAL_OPTS, required=("detections", "data", "out"))
    dataset = _load_prepared(resolved["data"])
    detections = inference.read_detections(resolved["detections"])
    lesions = _evaluation_scope(dataset, [detections], resolved["images"])
    if resolved["unhealthy_only"]:
        lesions = {k: v for k, v in lesions.items() if v}
    detections = {k: v for k, v in detections.items() if k in lesions}
    matched = evaluation.match_dataset(detections, lesions)
    curve = evaluation.froc_curve(matched)
    aufc = evaluation.partial_aufc(curve, resolved["fppi_limit"])
    os.makedirs(resolved["out"], exist_ok=True)
    evaluation.write_froc(os.path.join(resolved["out"], "froc.csv"), curve)
    _plot_froc(os.path.join(resolved["out"], "froc.png"), curve, resolved["fppi_limit"])
    with open(os.path.join(resolved["out"], "metrics.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"aufc: {aufc:.6f}\n")
        fh.write(f"fppi_limit: {resolved['fppi_limit']}\n")
        fh.write(f"images: {len(matched)}\n")
        fh.write(f"lesions: {sum(m.n_lesions for m in matched)}\n")
    print(f"partial AUFC at FPpI {resolved['fppi_limit']:g}: {aufc:.6f}")
    return 0


def _plot_averaged(path: str, result: evaluation.BootstrapComparison, names: tuple[str, str]) -> None:
    fig, ax = plt.subplots(figsize=(6, 5))
    for curve, name, color in (
        (result.curve_a, names[0], "tab:blue"),
        (result.curve_b, names[1], "tab:orange"),
    ):
        ax.plot(curve.fppi_grid, curve.mean_tpr, label=name, color=color)
        ax.fill_between(curve.fppi_grid, curve.lower_tpr, curve.upper_tpr, color=color, alpha=0.25)
    ax.set_xlim(0, result.curve_a.fppi_grid[-1])
    ax.set_ylim(0, 1)
    ax.set_xlabel("false positives per image")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_compare(args) -> int:
    resolved = _resolve(args, _COMPARE_OPTS, required=("detections_a", "detections_b", "data", "out"))
    dataset = _load_prepared(resolved["data"])
    dets_a = inference.read_detections(resolved["detections_a"])
    dets_b = inference.read_detections(resolved["detections_b"])
    lesions = _evaluation_scope(dataset, [dets_a, dets_b], resolved["images"])
    matched_a = evaluation.match_dataset(dets_a, lesions)
    matched_b = evaluation.match_dataset(dets_b, lesions)
    config = evaluation.EvalConfig(
        fppi_limit=resolved["fppi_limit"],
        bootstrap_iterations=resolved["iterations"],
        significance_level=resolved["significance"],
        rng_seed=resolved["seed"],
    )
    result = evaluation.bootstrap_compare(matched_a, matched_b, config)
    names = (os.path.basename(resolved["detections_a"]), os.path.basename(resolved["detections_b"]))
    report = evaluation.comparison_report(result, names[0], names[1], len(matched_a))
    os.makedirs(resolved["out"], exist_ok=True)
    with open(os.path.join(resolved["out"], "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report)
    _plot_averaged(os.path.join(resolved["out"], "averaged_froc.png"), result, names)
    print(report, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gravitynet",
        description="gravity-point detector for small lesions: synthesize data, "
                    "train, run inference, evaluate FROC curves, compare methods",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--spec", type=str, default=None, help="JSON spec file (defaults apply)")
    p_synth.add_argument("--out", type=str, required=True, help="output dataset directory")
    p_synth.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train one cross-validation fold")
    _add_options(p_train, _TRAIN_OPTS, with_profile=True)
    p_train.set_defaults(func=cmd_train)

    p_test = sub.add_parser("test", help="run a checkpoint over a split and write detections")
    _add_options(p_test, _TEST_OPTS)
    p_test.set_defaults(func=cmd_test)

    p_eval = sub.add_parser("eval", help="FROC analysis of a detections file")
    _add_options(p_eval, _EVAL_OPTS)
    p_eval.set_defaults(func=cmd_eval)

    p_compare = sub.add_parser("compare", help="bootstrap comparison of two detections files")
    _add_options(p_compare, _COMPARE_OPTS)
    p_compare.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GravityNetError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return _EXIT_CODES.get(exc.category, 1)


if __name__ == "__main__":
    sys.exit(main())

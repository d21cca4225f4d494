"""Command-line entry point: ``emib <command> [flags]``.

Every command resolves its configuration as built-in defaults < ``--config`` JSON file < flags, writes the result to
``resolved_config.json`` in its output directory, and exits 0 on success, 2 on invalid configuration or usage, 3 on
I/O failures and 4 on numerical failures (divergence, failed audit, unusable probe).
"""

import argparse
import logging
import os
import sys

from dataclasses import replace
from logging import getLogger
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from emib import __version__
from emib._base import (
    AuditFailedError,
    BlobStoreError,
    ConfigError,
    DivergenceError,
    DomainError,
    ProbeError,
    dump_json,
    write_json,
)
from emib._types import FloatArray, JsonDict
from emib.config import (
    FEATURE_MODES,
    MODEL_PRESETS,
    MODES,
    POOL_SOURCES,
    RunConfig,
    StudentConfig,
    load_config_file,
    resolve_run_config,
)
from emib.evaluation import ProbeWeights, few_shot_protocol, reconstruct_eyes, redirect_gaze
from emib.synth import FaceDataset, SynthParams, generate_dataset, load_dataset
from emib.training import (
    dataset_eyes,
    directional_gradient_check,
    distill_train,
    finetune,
    gradient_audit,
    load_any_checkpoint,
    load_checkpoint,
    make_batch,
    pretrain,
)

log = getLogger(__name__)

RUN_DIR_ENV = "EMIB_RUN_DIR"
AUDIT_TOLERANCE = 1e-3
LOG_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"
FD_TOLERANCE = 2e-3

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

# Flag destination -> path of the RunConfig field it overrides.
FLAG_PATHS: Dict[str, Tuple[str, ...]] = {
    "seed": ("seed",),
    "preset": ("preset",),
    "count": ("synth", "count"),
    "subjects": ("synth", "subjects"),
    "train_fraction": ("synth", "train_fraction"),
    "image_size": ("synth", "params", "image_size"),
    "gaze_range": ("synth", "params", "gaze_range"),
    "head_range": ("synth", "params", "head_range"),
    "subject_offset": ("synth", "params", "subject_offset"),
    "z_dim": ("model", "bottleneck", "z_dim"),
    "pool_source": ("model", "pool_source"),
    "weight_sharing": ("model", "weight_sharing"),
    "mode": ("train", "mode"),
    "steps": ("train", "steps"),
    "batch_size": ("train", "batch_size"),
    "lr": ("train", "lr"),
    "mask_ratio": ("train", "mask_ratio"),
    "lambda_contr": ("train", "loss", "lambda_contr"),
    "error_mode": ("train", "loss", "error_mode"),
    "eval_every": ("train", "eval_every"),
    "checkpoint_every": ("train", "checkpoint_every"),
    "tz_name": ("train", "tz_name"),
    "train_seed": ("train", "seed"),
    "repeats": ("eval", "repeats"),
    "head_pose": ("eval", "head_pose"),
    "feature": ("eval", "feature"),
    "ridge": ("eval", "ridge"),
}


def flag_overrides(args: argparse.Namespace) -> JsonDict:
    """Return the nested override dictionary of every flag given on the command line."""
    overrides: JsonDict = dict()
    for dest, path in FLAG_PATHS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        node = overrides
        for key in path[:-1]:
            node = node.setdefault(key, dict())
        node[path[-1]] = value
    return overrides


def output_dir(args: argparse.Namespace, cfg: RunConfig) -> Path:
    """Return ``--out``, else ``$EMIB_RUN_DIR``, else the configured run directory."""
    return Path(args.out or os.environ.get(RUN_DIR_ENV) or cfg.run_dir)


def _shots(value: str) -> Optional[int]:
    if value == "all":
        return None
    try:
        return int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a positive integer or `all`, got `%s`" % value)


def _floats(value: str) -> List[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated numbers, got `%s`" % value)


def _echo(report: JsonDict) -> None:
    sys.stdout.write(dump_json(report))


def _load_student_config(path: Optional[str], cfg: RunConfig) -> StudentConfig:
    if not path:
        return cfg.student
    return StudentConfig.from_dict(load_config_file(path))


def _image(dataset: FaceDataset, index: int) -> FloatArray:
    if not 0 <= index < len(dataset):
        raise DomainError("Image index %s is outside the dataset of %s samples" % (index, len(dataset)))
    return dataset.images[index]


def cmd_synth(args: argparse.Namespace, cfg: RunConfig, out: Path) -> int:
    """Render a synthetic dataset into ``out`` and print its summary."""
    params = SynthParams.from_dict(cfg.synth.params)
    manifest = generate_dataset(
        cfg.synth.count, params, cfg.seed, out, subjects=cfg.synth.subjects, train_fraction=cfg.synth.train_fraction
    )
    sizes = {name: int(np.prod(entry["shape"])) * 4 for name, entry in manifest.blobs.items()}
    _echo(
        {
            "path": str(out),
            "count": manifest.count,
            "train": len(manifest.train_ids),
            "test": len(manifest.test_ids),
            "bytes": sizes,
        }
    )
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace, cfg: RunConfig, out: Path) -> int:
    """Pretrain a model on ``--data`` and write the checkpoint and training log to ``out``."""
    dataset = load_dataset(args.data)
    checkpoint = pretrain(dataset, cfg.model_config(), cfg.train, out, resume=args.resume, init_from=args.init_from)
    _echo({"checkpoint": str(checkpoint.path), "step": checkpoint.step, "mode": cfg.train.mode})
    return EXIT_OK


def cmd_probe(args: argparse.Namespace, cfg: RunConfig, out: Path) -> int:
    """Fit linear probes on a checkpoint's features; write ``probe_report.json`` and ``probe.json``."""
    model = load_any_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    report, probe = few_shot_protocol(
        model,
        dataset,
        getattr(args, "shots", cfg.eval.shots),
        repeats=cfg.eval.repeats,
        with_head_pose=cfg.eval.head_pose,
        feature=cfg.eval.feature,
        ridge=cfg.eval.ridge,
    )
    report.metadata["checkpoint"] = str(args.ckpt)
    report.write(out / "probe_report.json")
    write_json(out / "probe.json", probe.to_dict())
    _echo(report.to_dict())
    return EXIT_OK


def cmd_distill(args: argparse.Namespace, cfg: RunConfig, out: Path) -> int:
    """Distill a checkpoint's injection branch into a convolutional student."""
    student_cfg = _load_student_config(args.student_cfg, cfg)
    dataset = load_dataset(args.data)
    checkpoint = distill_train(args.teacher, student_cfg, dataset, cfg.train, out)
    _echo({"checkpoint": str(checkpoint.path), "step": checkpoint.step})
    return EXIT_OK


def cmd_redirect(args: argparse.Namespace, cfg: RunConfig, out: Path) -> int:
    """Redraw the eyes of one dataset image to look ``(--delta-pitch, --delta-yaw)`` away."""
    model = load_checkpoint(args.ckpt)
    probe = ProbeWeights.from_dict(load_config_file(args.probe))
    dataset = load_dataset(args.data)
    image = _image(dataset, args.image_idx)
    eyes = dataset_eyes(dataset.subset([args.image_idx]), model.cfg)[0]
    panel = out / "redirect.png"
    redirect_gaze(model, probe, image, (args.delta_pitch, args.delta_yaw), eyes, panel_path=panel)
    _echo({"panel": str(panel), "image_idx": args.image_idx, "delta": [args.delta_pitch, args.delta_yaw]})
    return EXIT_OK


def cmd_reconstruct(args: argparse.Namespace, cfg: RunConfig, out: Path) -> int:
    """Reconstruct the eyes of one dataset image and write the original, masked and reconstructed panel."""
    model = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    image = _image(dataset, args.image_idx)
    eyes = dataset_eyes(dataset.subset([args.image_idx]), model.cfg)[0]
    ratio = cfg.train.mask_ratio if args.mask_ratio is None else args.mask_ratio
    panel = out / "reconstruct.png"
    reconstruct_eyes(model, image, eyes, seed=cfg.seed, mask_ratio=ratio, panel_path=panel)
    _echo({"panel": str(panel), "image_idx": args.image_idx, "mask_ratio": ratio})
    return EXIT_OK


def cmd_audit(args: argparse.Namespace, cfg: RunConfig, out: Path) -> int:
    """Run the gradient audit on one batch; fail when the deviation exceeds the tolerance.

    :raises: AuditFailedError
    """
    model = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    train = dataset.train
    count = min(cfg.train.batch_size, len(train))
    batch = make_batch(train, np.arange(count), dataset_eyes(train, model.cfg))

    audit = gradient_audit(model, batch, loss_cfg=cfg.train.loss)
    result = audit.to_dict()
    result["tolerance"] = args.tolerance
    if args.finite_differences:
        result["finite_difference_error"] = directional_gradient_check(model, batch, loss_cfg=cfg.train.loss)
    write_json(out / "audit.json", result)
    _echo(result)

    if audit.max_relative_deviation > args.tolerance:
        raise AuditFailedError(
            "Gradient audit deviation %.3e exceeds %.1e" % (audit.max_relative_deviation, args.tolerance)
        )
    if args.finite_differences and result["finite_difference_error"] > FD_TOLERANCE:
        raise AuditFailedError(
            "Finite-difference error %.3e exceeds %.1e" % (result["finite_difference_error"], FD_TOLERANCE)
        )
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, cfg: RunConfig, out: Path) -> int:
    """Pretrain once per contrastive weight and record the whole-dataset probe error of each run in ``sweep.json``."""
    dataset = load_dataset(args.data)
    results = []
    for weight in args.lambdas:
        if weight < 0:
            raise ConfigError("Contrastive weights must be >= 0, got %s" % weight)
        train_cfg = cfg.train.replace(loss=replace(cfg.train.loss, lambda_contr=weight))
        run_dir = out / ("lambda-%g" % weight)
        log.info("Sweep run lambda_contr=%g in %s", weight, run_dir)
        checkpoint = pretrain(dataset, cfg.model_config(), train_cfg, run_dir)
        model = checkpoint.model
        report, _ = few_shot_protocol(model, dataset, None, feature=cfg.eval.feature, ridge=cfg.eval.ridge)
        results.append({"lambda_contr": weight, "checkpoint": str(run_dir), "mean_error": report.mean_error})

    summary = {"runs": results, "steps": cfg.train.steps, "mode": cfg.train.mode}
    write_json(out / "sweep.json", summary)
    _echo(summary)
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace, cfg: RunConfig, out: Path) -> int:
    """Fine-tune a checkpoint end to end on a fraction of the labelled train split."""
    model = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    report = finetune(model, dataset, args.fraction, cfg.train)
    report.metadata["checkpoint"] = str(args.ckpt)
    report.write(out / "finetune_report.json")
    _echo(report.to_dict())
    return EXIT_OK


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; its values override the built-in defaults")
    parser.add_argument("--out", help="output directory (default: $%s, then the configured run_dir)" % RUN_DIR_ENV)
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument(
        "--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging level"
    )


def _model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", choices=sorted(MODEL_PRESETS), help="model preset")
    parser.add_argument("--z-dim", type=int, help="injection bottleneck width")
    parser.add_argument("--pool-source", choices=POOL_SOURCES, help="latents pooled by the bottleneck")
    parser.add_argument(
        "--no-weight-sharing",
        dest="weight_sharing",
        action="store_const",
        const=False,
        help="give the injection branch its own encoder",
    )


def _train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--steps", type=int, help="optimizer steps")
    parser.add_argument("--batch-size", type=int, help="samples per step")
    parser.add_argument("--lr", type=float, help="peak learning rate")
    parser.add_argument("--mask-ratio", type=float, help="total reconstruction mask ratio")
    parser.add_argument("--lambda-contr", type=float, help="weight of the eye/gaze contrastive loss")
    parser.add_argument("--error-mode", choices=("squared", "absolute"), help="pixel error of the losses")
    parser.add_argument("--train-seed", type=int, help="seed of batch draws, mask plans and initialization")
    parser.add_argument("--tz-name", help="timezone of training log timestamps (default: local timezone)")


def build_parser() -> argparse.ArgumentParser:
    """Return the argument parser of all commands."""
    parser = argparse.ArgumentParser(prog="emib", description="Eye-masked information-bottleneck gaze representations")
    parser.add_argument("--version", action="version", version="%(prog)s " + __version__)
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    p = commands.add_parser("synth", help="render a synthetic face-gaze dataset")
    _common(p)
    p.add_argument("--count", type=int, help="number of samples")
    p.add_argument("--subjects", type=int, help="number of subject styles")
    p.add_argument("--train-fraction", type=float, help="fraction of subjects in the train split")
    p.add_argument("--image-size", type=int, help="image side in pixels")
    p.add_argument("--gaze-range", type=float, help="largest absolute gaze angle in radians")
    p.add_argument("--head-range", type=float, help="largest absolute head angle in radians")
    p.add_argument("--subject-offset", type=int, help="first subject style id")
    p.set_defaults(handler=cmd_synth)

    p = commands.add_parser("pretrain", help="pretrain a model")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--mode", choices=MODES, help="objective and masking scheme")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--init-from", help="checkpoint whose parameters initialize the model")
    p.add_argument("--eval-every", type=int, help="log a whole-dataset probe error every N steps")
    p.add_argument("--checkpoint-every", type=int, help="write an intermediate checkpoint every N steps")
    _model_flags(p)
    _train_flags(p)
    p.set_defaults(handler=cmd_pretrain)

    p = commands.add_parser("probe", help="evaluate a checkpoint with linear probes")
    _common(p)
    p.add_argument("--ckpt", required=True, help="pretraining or student checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--shots", type=_shots, default=argparse.SUPPRESS, help="calibration samples per repeat, or `all`")
    p.add_argument("--repeats", type=int, help="calibration draws")
    p.add_argument("--head-pose", action="store_const", const=True, help="append head pose to the features")
    p.add_argument("--feature", choices=FEATURE_MODES, help="probed representation")
    p.add_argument("--ridge", type=float, help="ridge strength on the feature block")
    p.set_defaults(handler=cmd_probe)

    p = commands.add_parser("distill", help="distill the injection branch into a convolutional student")
    _common(p)
    p.add_argument("--teacher", required=True, help="pretraining checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--student-cfg", help="JSON file with the student config")
    _train_flags(p)
    p.set_defaults(handler=cmd_distill)

    p = commands.add_parser("redirect", help="redirect the gaze of one image")
    _common(p)
    p.add_argument("--ckpt", required=True, help="pretraining checkpoint")
    p.add_argument("--probe", required=True, help="probe.json written by `probe`")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--image-idx", type=int, default=0, help="dataset index of the image")
    p.add_argument("--delta-pitch", type=float, default=0.0, help="pitch change in radians")
    p.add_argument("--delta-yaw", type=float, default=0.0, help="yaw change in radians")
    p.set_defaults(handler=cmd_redirect)

    p = commands.add_parser("reconstruct", help="reconstruct the eyes of one image")
    _common(p)
    p.add_argument("--ckpt", required=True, help="pretraining checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--image-idx", type=int, default=0, help="dataset index of the image")
    p.add_argument("--mask-ratio", type=float, help="total mask ratio; 1 masks everything")
    p.set_defaults(handler=cmd_reconstruct)

    p = commands.add_parser("audit", help="check that encoder gradients split into the two branch contributions")
    _common(p)
    p.add_argument("--ckpt", required=True, help="pretraining checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--batch-size", type=int, help="samples in the audited batch")
    p.add_argument("--tolerance", type=float, default=AUDIT_TOLERANCE, help="largest accepted relative deviation")
    p.add_argument(
        "--finite-differences", action="store_true", help="also compare with central differences along 10 directions"
    )
    p.set_defaults(handler=cmd_audit)

    p = commands.add_parser("sweep", help="pretrain once per contrastive weight and probe each run")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--lambdas", type=_floats, required=True, help="comma-separated contrastive weights")
    p.add_argument("--mode", choices=MODES, help="objective and masking scheme")
    p.add_argument("--feature", choices=FEATURE_MODES, help="probed representation")
    _model_flags(p)
    _train_flags(p)
    p.set_defaults(handler=cmd_sweep)

    p = commands.add_parser("finetune", help="fine-tune a checkpoint on a fraction of the labels")
    _common(p)
    p.add_argument("--ckpt", required=True, help="pretraining checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--fraction", type=float, default=1.0, help="fraction of the train split used")
    _train_flags(p)
    p.set_defaults(handler=cmd_finetune)
    return parser


EXIT_CODES: Sequence[Tuple[type, int]] = (
    (ConfigError, EXIT_USAGE),
    (DomainError, EXIT_USAGE),
    (BlobStoreError, EXIT_IO),
    (OSError, EXIT_IO),
    (DivergenceError, EXIT_NUMERIC),
    (AuditFailedError, EXIT_NUMERIC),
    (ProbeError, EXIT_NUMERIC),
)


def run(args: argparse.Namespace) -> int:
    """Resolve the configuration of parsed ``args``, echo it, and run the command."""
    cfg = resolve_run_config(load_config_file(args.config), flag_overrides(args))
    out = output_dir(args, cfg)
    write_json(out / "resolved_config.json", cfg.to_dict())
    handler: Callable[[argparse.Namespace, RunConfig, Path], int] = args.handler
    return handler(args, cfg, out)


def main(argv: Optional[List[str]] = None) -> int:
    """Console entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr, format=LOG_FORMAT)
    try:
        return run(args)
    except Exception as e:
        for error_type, code in EXIT_CODES:
            if isinstance(e, error_type):
                log.error("%s: %s", type(e).__name__, e)
                if isinstance(e, DivergenceError) and e.last_good is not None:
                    log.error("Last good checkpoint: %s", e.last_good)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())

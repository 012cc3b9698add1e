"""
Command-line entry point.
Subcommands: synth, train, invert, eval, ablate, report.
Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""
import argparse
import json
import shutil
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import torch
from tqdm import tqdm

from config.config import ExperimentConfig, ExtractorSpec
from inverter.data import FaceDataset, ManifestRecord, load_manifest, select_split, split_subjects, write_manifest
from inverter.domain import FaceImage
from inverter.errors import AblationError, ConfigError, DimensionError, InverterError, StageOrderError
from inverter.evaluation import (
    PROTOCOLS,
    EvalReport,
    evaluate_model,
    far_key,
    format_report,
    protocol_pairs,
    read_reports,
    reconstruct,
    score_pair_records,
    tar_at_far,
    write_reports,
)
from inverter.extractor import TemplateExtractor, save_extractor, train_toy_extractor
from inverter.generators import load_checkpoint
from inverter.interchange import PairRecord, read_pairs, read_templates, save_grid, save_image, save_masks, write_pairs
from inverter.logger import RunLogger
from inverter.masks import save_landmarks
from inverter.plugins import resolve_plugin
from inverter.synthetic import identity_seeds, iter_synthetic_dataset, subject_id_for, synthetic_face_landmarks
from inverter.training import ABLATION_ROWS, StagedTrainer, run_ablation

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

TOY_EXTRACTORS = ("toy", "toy_query")


def resolve_device(name: str) -> str:
    if name == "auto":
        return "cuda" if torch.cuda.is_available() else "cpu"
    return name


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """YAML file, then INVERTER_* environment, then command-line flags."""
    config = ExperimentConfig.from_yaml(args.config) if args.config else ExperimentConfig()
    config = ExperimentConfig.from_env(config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic:
        overrides["deterministic"] = True
    if args.resolution is not None:
        overrides["resolution"] = args.resolution
    if getattr(args, "manifest", None):
        overrides["manifest_path"] = args.manifest
    if args.out and args.command in ("train", "ablate"):
        overrides["output_dir"] = args.out
    return replace(config, **overrides) if overrides else config


def snapshot_config(args: argparse.Namespace, config: ExperimentConfig, run_dir: Path):
    """Copy the config file verbatim and write the resolved values next to it."""
    run_dir.mkdir(parents=True, exist_ok=True)
    if args.config:
        shutil.copyfile(args.config, run_dir / "config.yaml")
    config.write_yaml(run_dir / "config.resolved.yaml")


def build_extractor(spec: ExtractorSpec, config: ExperimentConfig, records: Sequence[ManifestRecord],
                    store: Path, logger: RunLogger, device: str) -> TemplateExtractor:
    """
    Resolve an extractor plug-in; toy extractors without a checkpoint are trained
    on the training split and stored under store/extractors.
    """
    if spec.name in TOY_EXTRACTORS and not (spec.checkpoint and Path(spec.checkpoint).exists()):
        path = Path(spec.checkpoint) if spec.checkpoint else store / "extractors" / f"{spec.role}_seed{spec.seed}.pt"
        if not path.exists():
            train_records = select_split(records, "train")
            images = FaceDataset(train_records, resolution=config.resolution, detector=build_detector(config))
            extractor = train_toy_extractor(
                images.images, images.subject_ids, config.extractor_training,
                template_dim=config.template_dim, seed=spec.seed, device=device,
                name=f"toy-seed{spec.seed}", role=spec.role, logger=logger,
            )
            save_extractor(extractor, path)
            print(f"Trained toy extractor (seed {spec.seed}) -> {path}")
        spec = replace(spec, checkpoint=str(path))
    return resolve_plugin("extractor", spec.name)(spec, device)


def build_detector(config: ExperimentConfig):
    if config.landmark_detector is None:
        return None
    return resolve_plugin("landmark_detector", config.landmark_detector)()


def cmd_synth(args: argparse.Namespace, config: ExperimentConfig) -> Path:
    """Write synthetic images, mask and landmark sidecars, and a manifest."""
    out = Path(args.out) if args.out else Path(config.manifest_path).parent
    n_subjects = args.subjects if args.subjects is not None else config.synth.n_subjects
    per_subject = args.images_per_subject if args.images_per_subject is not None else config.synth.images_per_subject
    seeds = identity_seeds(config.seed, n_subjects)
    _, test_subjects = split_subjects([subject_id_for(s) for s in seeds], config.synth.test_fraction, config.seed)

    records = []
    faces = iter_synthetic_dataset(config.seed, n_subjects, per_subject, config.resolution,
                                   config.synth.max_shift_px, config.synth.max_color_jitter)
    for spec, image, bundle, subject_id in tqdm(faces, total=n_subjects * per_subject, desc="synth", leave=False):
        image_id = f"{subject_id}_{spec.jitter_seed:02d}"
        image_path = save_image(image, out / "images" / f"{image_id}.png")
        save_landmarks(synthetic_face_landmarks(spec, config.resolution),
                       out / "images" / f"{image_id}.landmarks.json")
        masks_path = save_masks(bundle.masks, out / "masks" / f"{image_id}.npz")
        records.append(ManifestRecord(
            image_id=image_id,
            image_path=image_path,
            subject_id=subject_id,
            split="test" if subject_id in test_subjects else "train",
            masks_path=masks_path,
        ))
    manifest = write_manifest(records, out / "manifest.jsonl")
    print(f"Wrote {len(records)} images of {n_subjects} subjects -> {manifest}")
    return manifest


def _plugins(config: ExperimentConfig, device: str):
    fnet = resolve_plugin("feature_network", config.feature_network)(device=device)
    classifier = resolve_plugin("attribute_classifier", config.attribute_classifier)(
        weights=config.attribute_weights, device=device
    )
    return fnet, classifier


def cmd_train(args: argparse.Namespace, config: ExperimentConfig, logger: RunLogger) -> Path:
    """Run the training stages into the run directory."""
    run_dir = Path(config.output_dir)
    device = resolve_device(config.device)
    records = load_manifest(config.manifest_path)

    model, completed = None, 0
    if args.resume:
        model, manifest = load_checkpoint(args.resume, config.template_dim, device)
        if "epoch" in manifest:
            # periodic checkpoints carry no optimizer state
            raise ConfigError(
                f"{args.resume} was written mid-stage (stage {manifest['stage']}, epoch {manifest['epoch']}); "
                "resume from the last finished stage{N}.pt instead"
            )
        completed = int(manifest["stage"])
    start = args.stage if args.stage is not None else completed + 1
    if start != completed + 1:
        raise StageOrderError(f"cannot start at stage {start}: last completed stage is {completed}")

    extractor = build_extractor(config.target_extractor, config, records, run_dir, logger, device)
    fnet, classifier = _plugins(config, device)
    dataset = FaceDataset(select_split(records, "train"), extractor, config.resolution, build_detector(config))

    trainer = StagedTrainer(config, extractor, fnet, classifier, logger, run_dir, device, model, completed)
    state = trainer.run(dataset)
    with open(run_dir / "history.json", "w", encoding="utf-8") as f:
        json.dump({"history": state.history, "cancelled": state.cancelled, "row": trainer.row}, f, indent=2)
    print(f"Training finished (ablation row {trainer.row}); checkpoints in {run_dir / 'checkpoints'}")
    return run_dir


def _target_from_checkpoint(config: ExperimentConfig, checkpoint: Path) -> ExperimentConfig:
    """Fall back to the extractor stored by the training run that wrote the checkpoint."""
    spec = config.target_extractor
    if spec.name in TOY_EXTRACTORS and not (spec.checkpoint and Path(spec.checkpoint).exists()):
        stored = checkpoint.parent.parent / "extractors" / f"target_seed{spec.seed}.pt"
        if stored.exists():
            return replace(config, target_extractor=replace(spec, checkpoint=str(stored)))
    return config


def cmd_invert(args: argparse.Namespace, config: ExperimentConfig, logger: RunLogger) -> List[Path]:
    """Reconstruct faces from a templates file, or from the images of a manifest."""
    device = resolve_device(config.device)
    out = Path(args.out or "reconstructions")
    checkpoint = Path(args.checkpoint)
    originals: Optional[torch.Tensor] = None

    if args.templates:
        records = read_templates(args.templates)
        if not records:
            raise DimensionError(f"{args.templates} holds no templates")
        ids = [record_id for record_id, _ in records]
        templates = torch.stack([t.values for _, t in records])
    else:
        config = _target_from_checkpoint(config, checkpoint)
        manifest_records = load_manifest(args.images)
        extractor = build_extractor(config.target_extractor, config, manifest_records, checkpoint.parent.parent,
                                    logger, device)
        dataset = FaceDataset(manifest_records, extractor, detector=build_detector(config))
        ids, templates, originals = dataset.image_ids, dataset.templates, dataset.images

    model, _ = load_checkpoint(checkpoint, templates.shape[1], device)
    images = reconstruct(model, templates)
    paths = [save_image(FaceImage.from_chw(img), out / f"{record_id}.png") for record_id, img in zip(ids, images)]
    if originals is not None:
        rows = [(FaceImage.from_chw(a), FaceImage.from_chw(b)) for a, b in zip(originals, images)]
        save_grid(rows, out / "grid.png")
    print(f"Wrote {len(paths)} reconstructions -> {out}")
    return paths


def _unseen_extractors(config: ExperimentConfig, records, store: Path, logger: RunLogger, device: str):
    built = []
    for spec in config.unseen_extractors:
        try:
            built.append((spec.name, build_extractor(spec, config, records, store, logger, device), ""))
        except (ConfigError, InverterError) as e:
            built.append((spec.name, None, str(e)))
    return built


def cmd_eval(args: argparse.Namespace, config: ExperimentConfig, logger: RunLogger) -> List[EvalReport]:
    """Evaluate a checkpoint on the test split and write report.json."""
    device = resolve_device(config.device)
    out = Path(args.out or "evaluation")
    checkpoint = Path(args.checkpoint)
    config = _target_from_checkpoint(config, checkpoint)
    if args.extractor:
        extra = [ExtractorSpec(name=name, seed=i + 1, role="unseen") for i, name in enumerate(args.extractor)]
        config = replace(config, unseen_extractors=config.unseen_extractors + extra)

    records = load_manifest(config.manifest_path)
    store = checkpoint.parent.parent
    target = build_extractor(config.target_extractor, config, records, store, logger, device)

    if args.pairs:
        scores = score_pair_records(read_pairs(args.pairs), target, Path(args.pairs).parent)
        report = EvalReport(extractor=target.descriptor.name, role="target",
                            n_pairs=len(scores.genuine) + len(scores.impostor))
        report.tar_at["type1"] = {far_key(far): tar_at_far(scores, far) for far in config.far_levels}
        reports = [report]
    else:
        fnet, _ = _plugins(config, device)
        test = FaceDataset(select_split(records, args.split), target, config.resolution, build_detector(config))
        model, _ = load_checkpoint(checkpoint, config.template_dim, device)
        reports = evaluate_model(model, test, target, fnet, config.far_levels,
                                 _unseen_extractors(config, records, store, logger, device),
                                 config.impostor_ratio, config.seed, logger)
        _export_pairs(model, test, out, config)

    write_reports(reports, out / "report.json", {"checkpoint": str(checkpoint)})
    for report in reports:
        print(format_report(report))
    return reports


def _export_pairs(model, test: FaceDataset, out: Path, config: ExperimentConfig):
    """Save reconstructions and the protocol pair lists so other tools can score them."""
    images = reconstruct(model, test.templates)
    recon_paths = [
        save_image(FaceImage.from_chw(img), out / "reconstructions" / f"{image_id}.png").relative_to(out).as_posix()
        for image_id, img in zip(test.image_ids, images)
    ]
    original_paths = [str(r.image_path.resolve()) for r in test.records]
    for protocol in PROTOCOLS:
        genuine, impostor, _ = protocol_pairs(test.subject_ids, protocol, config.impostor_ratio, config.seed)
        pairs = [
            PairRecord(f"{test.image_ids[i]}~{test.image_ids[j]}", recon_paths[i], original_paths[j], label)
            for label, group in ((1, genuine), (0, impostor))
            for i, j in group
        ]
        write_pairs(pairs, out / f"pairs_{protocol}.jsonl")


def cmd_ablate(args: argparse.Namespace, config: ExperimentConfig, logger: RunLogger) -> List[dict]:
    """Train and evaluate the ablation rows, writing ablation.json."""
    run_dir = Path(config.output_dir)
    device = resolve_device(config.device)
    records = load_manifest(config.manifest_path)
    extractor = build_extractor(config.target_extractor, config, records, run_dir, logger, device)
    fnet, classifier = _plugins(config, device)
    detector = build_detector(config)
    train = FaceDataset(select_split(records, "train"), extractor, config.resolution, detector)
    test = FaceDataset(select_split(records, "test"), extractor, config.resolution, detector)

    rows = []
    for row in args.rows or sorted(ABLATION_ROWS):
        print(f"Ablation row {row}")
        rows.append(run_ablation(config, row, train, test, extractor, fnet, classifier, logger, run_dir, device))
    with open(run_dir / "ablation.json", "w", encoding="utf-8") as f:
        json.dump({"rows": rows}, f, indent=2)
    for metrics in rows:
        cells = "  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in metrics.items())
        print(cells)
    return rows


def cmd_report(args: argparse.Namespace) -> List[EvalReport]:
    reports = read_reports(args.report)
    for report in reports:
        print(format_report(report))
    return reports


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inverter", description="Layered facial template inversion laboratory")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Experiment YAML file")
    common.add_argument("--seed", type=int, help="Override the run seed")
    common.add_argument("--deterministic", action="store_true", help="Deterministic kernels, single-threaded loading")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--resolution", type=int, help="Override the image resolution")

    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="Generate the synthetic fixture dataset")
    synth.add_argument("--subjects", type=int, help="Number of identities")
    synth.add_argument("--images-per-subject", type=int, help="Jitter draws per identity")

    train = sub.add_parser("train", parents=[common], help="Train the layered inverter")
    train.add_argument("--manifest", help="Dataset manifest (overrides config)")
    train.add_argument("--resume", help="Checkpoint to resume from")
    train.add_argument("--stage", type=int, choices=(1, 2, 3), help="Stage to start at")

    invert = sub.add_parser("invert", parents=[common], help="Reconstruct faces from templates")
    invert.add_argument("--checkpoint", required=True)
    source = invert.add_mutually_exclusive_group(required=True)
    source.add_argument("--templates", help="Templates JSONL file")
    source.add_argument("--images", help="Manifest of original images")

    evaluate = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--manifest", help="Dataset manifest (overrides config)")
    evaluate.add_argument("--split", default="test", choices=("train", "test"))
    evaluate.add_argument("--extractor", action="append", help="Additional unseen extractor plug-in name")
    evaluate.add_argument("--pairs", help="Score an external pair list instead of the protocol pairs")

    ablate = sub.add_parser("ablate", parents=[common], help="Run the six ablation rows")
    ablate.add_argument("--manifest", help="Dataset manifest (overrides config)")
    ablate.add_argument("--rows", type=int, nargs="+", choices=sorted(ABLATION_ROWS))

    report = sub.add_parser("report", help="Pretty-print a report file")
    report.add_argument("report")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "synth":
        for flag in ("subjects", "images_per_subject"):
            value = getattr(args, flag)
            if value is not None and value < 1:
                parser.error(f"--{flag.replace('_', '-')} must be >= 1")

    if args.command == "report":
        try:
            cmd_report(args)
        except InverterError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_RUNTIME
        return EXIT_OK

    try:
        config = load_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE

    if args.command == "synth":
        logger = RunLogger(None)
    elif args.command in ("train", "ablate"):
        snapshot_config(args, config, Path(config.output_dir))
        logger = RunLogger(Path(config.output_dir) / "metrics.jsonl")
    else:
        logger = RunLogger(Path(args.out) / "events.jsonl" if args.out else None)

    try:
        logger.log_run_start(args.command, config.to_dict())
        if args.command == "synth":
            cmd_synth(args, config)
        else:
            commands = {"train": cmd_train, "invert": cmd_invert, "eval": cmd_eval, "ablate": cmd_ablate}
            commands[args.command](args, config, logger)
    except (ConfigError, AblationError) as e:
        logger.log_error(e, {"command": args.command})
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (InverterError, OSError) as e:
        logger.log_error(e, {"command": args.command})
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        logger.close()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

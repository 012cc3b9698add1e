"""
Shared tiny fixtures: 32x32 images, d=16 templates, width-reduced generators.
"""
from pathlib import Path

import pytest
import torch

from config.config import ExperimentConfig, ExtractorTrainingConfig, LossWeights, StageConfig, SynthConfig
from inverter.data import ManifestRecord, split_subjects, write_manifest
from inverter.extractor import ExtractorDescriptor, NetworkExtractor, ToyExtractorNet
from inverter.interchange import save_image, save_masks
from inverter.masks import save_landmarks
from inverter.synthetic import identity_seeds, iter_synthetic_dataset, subject_id_for, synthetic_face_landmarks

RESOLUTION = 32
TEMPLATE_DIM = 16


def tiny_stage(stage: int, epochs: int = 1) -> StageConfig:
    return StageConfig(stage=stage, epochs=epochs, learning_rate=1e-3, batch_size=4, loss_weights=LossWeights())


def make_tiny_config(tmp_path: Path, **overrides) -> ExperimentConfig:
    values = dict(
        manifest_path=str(tmp_path / "data" / "manifest.jsonl"),
        output_dir=str(tmp_path / "run"),
        resolution=RESOLUTION,
        template_dim=TEMPLATE_DIM,
        width_divisor=16,
        device="cpu",
        feature_network="random_taps",
        stage1=tiny_stage(1),
        stage2=tiny_stage(2),
        stage3=tiny_stage(3),
        impostor_ratio=2,
        far_levels=[0.1],
        synth=SynthConfig(n_subjects=4, images_per_subject=3, test_fraction=0.5),
        extractor_training=ExtractorTrainingConfig(epochs=1, batch_size=8, width=4),
    )
    values.update(overrides)
    return ExperimentConfig(**values)


def write_synthetic_dataset(out: Path, seed: int = 0, n_subjects: int = 4, per_subject: int = 3,
                            size: int = RESOLUTION) -> Path:
    """Write images, sidecars and a manifest the way `inverter synth` does."""
    seeds = identity_seeds(seed, n_subjects)
    _, test_subjects = split_subjects([subject_id_for(s) for s in seeds], 0.5, seed)
    records = []
    for spec, image, bundle, subject_id in iter_synthetic_dataset(seed, n_subjects, per_subject, size):
        image_id = f"{subject_id}_{spec.jitter_seed:02d}"
        image_path = save_image(image, out / "images" / f"{image_id}.png")
        save_landmarks(synthetic_face_landmarks(spec, size), out / "images" / f"{image_id}.landmarks.json")
        records.append(ManifestRecord(
            image_id=image_id,
            image_path=image_path,
            subject_id=subject_id,
            split="test" if subject_id in test_subjects else "train",
            masks_path=save_masks(bundle.masks, out / "masks" / f"{image_id}.npz"),
        ))
    return write_manifest(records, out / "manifest.jsonl")


def make_toy_extractor(seed: int = 0, differentiable: bool = True) -> NetworkExtractor:
    """Untrained toy network; deterministic for a seed."""
    torch.manual_seed(seed)
    net = ToyExtractorNet(template_dim=TEMPLATE_DIM, width=4)
    descriptor = ExtractorDescriptor(name=f"toy-seed{seed}", d=TEMPLATE_DIM, normalized=True,
                                     differentiable=differentiable)
    return NetworkExtractor(net, descriptor)


@pytest.fixture(scope="session")
def synthetic_manifest(tmp_path_factory):
    """Manifest of 4 subjects x 3 synthetic images at 32x32."""
    return write_synthetic_dataset(tmp_path_factory.mktemp("synthetic"))


@pytest.fixture
def toy_extractor():
    return make_toy_extractor()

"""
Dataset manifests and the in-memory face dataset used by training and evaluation.
Manifests are JSONL records with paths relative to the manifest file.
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch.utils.data import Dataset

from inverter.domain import COMPONENTS, Component, ComponentMask, FaceImage, SubjectRecord
from inverter.errors import DataError, DimensionError
from inverter.extractor import TemplateExtractor
from inverter.interchange import load_image, load_masks
from inverter.masks import LandmarkSet, make_layer_bundle, masks_from_landmarks

SPLITS = ("train", "test")

PathLike = Union[str, Path]


@dataclass
class ManifestRecord:
    """One image of the dataset."""
    image_id: str
    image_path: Path
    subject_id: str
    split: str
    masks_path: Optional[Path] = None

    def __post_init__(self):
        if not self.subject_id:
            raise DataError(f"image {self.image_id!r} has an empty subject_id")
        if self.split not in SPLITS:
            raise DataError(f"image {self.image_id!r} has split {self.split!r}, expected one of {SPLITS}")


def load_manifest(path: PathLike, check_paths: bool = True) -> List[ManifestRecord]:
    """
    Load a manifest, resolving relative paths against its directory.

    Args:
        path: JSONL manifest path
        check_paths: Require every referenced file to exist

    Returns:
        Records in file order
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                item = json.loads(line)
                image_path = root / item["image_path"]
                masks_path = root / item["masks_path"] if item.get("masks_path") else None
                record = ManifestRecord(
                    image_id=str(item.get("image_id", Path(item["image_path"]).stem)),
                    image_path=image_path,
                    subject_id=str(item["subject_id"]),
                    split=item.get("split", "train"),
                    masks_path=masks_path,
                )
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DataError(f"{path}:{line_number}: bad manifest record: {e}")
            if record.image_id in seen:
                raise DataError(f"{path}:{line_number}: duplicate image_id {record.image_id!r}")
            seen.add(record.image_id)
            if check_paths:
                for p in (record.image_path, record.masks_path):
                    if p is not None and not p.exists():
                        raise DataError(f"{path}:{line_number}: missing file {p}")
            records.append(record)
    return records


def write_manifest(records: Iterable[ManifestRecord], path: PathLike) -> Path:
    """Write records with paths relative to the manifest directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.parent.resolve()

    def relative(p: Path) -> str:
        p = Path(p).resolve()
        try:
            return p.relative_to(root).as_posix()
        except ValueError:
            return p.as_posix()

    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            item = {
                "image_id": record.image_id,
                "image_path": relative(record.image_path),
                "subject_id": record.subject_id,
                "split": record.split,
            }
            if record.masks_path is not None:
                item["masks_path"] = relative(record.masks_path)
            f.write(json.dumps(item, sort_keys=True) + "\n")
    return path


def subject_records(records: Sequence[ManifestRecord]) -> List[SubjectRecord]:
    """Group image ids by subject, subjects in first-seen order."""
    grouped: Dict[str, List[str]] = {}
    for record in records:
        grouped.setdefault(record.subject_id, []).append(record.image_id)
    return [SubjectRecord(subject, tuple(refs)) for subject, refs in grouped.items()]


def split_subjects(subject_ids: Sequence[str], test_fraction: float, seed: int) -> Tuple[set, set]:
    """
    Seeded subject-level split; no subject appears on both sides.

    Args:
        subject_ids: Subject ids (duplicates allowed)
        test_fraction: Fraction of subjects held out, in (0, 1)
        seed: Permutation seed

    Returns:
        (train subjects, test subjects)
    """
    if not 0 < test_fraction < 1:
        raise DataError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    unique = sorted(set(subject_ids))
    if len(unique) < 2:
        raise DataError("a subject split needs at least two subjects")
    order = np.random.default_rng(seed).permutation(len(unique))
    n_test = min(len(unique) - 1, max(1, int(round(test_fraction * len(unique)))))
    test = {unique[i] for i in order[:n_test]}
    return set(unique) - test, test


def load_face(record: ManifestRecord,
              detector: Optional[Callable[[Path], LandmarkSet]] = None) -> Tuple[FaceImage, Dict[Component, ComponentMask]]:
    """
    Load an image with its component masks.

    Masks come from the sidecar when the record has one, otherwise from the
    landmark detector.
    """
    image = load_image(record.image_path)
    if record.masks_path is not None:
        masks = load_masks(record.masks_path)
    elif detector is not None:
        masks = masks_from_landmarks(detector(record.image_path), image.height, image.width)
    else:
        raise DataError(f"image {record.image_id!r} has no mask sidecar and no landmark detector is configured")
    make_layer_bundle(image, masks)
    return image, masks


class FaceDataset(Dataset):
    """
    Images, masks and precomputed target templates held in memory.

    Items are dicts with "image" (3, R, R), "template" (d,), "layers"
    (5, 3, R, R), "masks" (5, R, R) and "subject" (int).
    """

    def __init__(self, records: Sequence[ManifestRecord], extractor: Optional[TemplateExtractor] = None,
                 resolution: Optional[int] = None, detector: Optional[Callable[[Path], LandmarkSet]] = None,
                 batch_size: int = 64):
        """
        Initialize dataset.

        Args:
            records: Manifest records to load
            extractor: Target extractor; None leaves templates empty (extractor training)
            resolution: Expected image resolution, checked when given
            detector: Landmark detector for records without a mask sidecar
            batch_size: Extraction batch size
        """
        if not records:
            raise DataError("empty dataset")
        images, masks = [], []
        for record in records:
            image, component_masks = load_face(record, detector)
            if resolution is not None and image.height != resolution:
                raise DimensionError(f"{record.image_path} is {image.height}px, config expects {resolution}px")
            images.append(image.to_chw())
            masks.append(torch.stack([component_masks[c].bits for c in COMPONENTS]))
        if len({tuple(img.shape) for img in images}) > 1:
            raise DimensionError("dataset images differ in size")

        self.records = list(records)
        self.image_ids = [r.image_id for r in self.records]
        self.subject_ids = [r.subject_id for r in self.records]
        subjects = {s: i for i, s in enumerate(sorted(set(self.subject_ids)))}
        self.subject_index = torch.tensor([subjects[s] for s in self.subject_ids], dtype=torch.long)
        self.images = torch.stack(images)
        self.masks = torch.stack(masks)
        self.templates = None
        if extractor is not None:
            self.templates = torch.cat([
                extractor.extract_batch(self.images[i:i + batch_size]).cpu()
                for i in range(0, len(self.images), batch_size)
            ])

    def __len__(self) -> int:
        return self.images.shape[0]

    def layers(self, index) -> torch.Tensor:
        """Masked layer targets with zeroed background."""
        image = self.images[index]
        masks = self.masks[index]
        return torch.where(masks.unsqueeze(-3), image.unsqueeze(-4), torch.zeros((), dtype=image.dtype))

    def foreground_union(self, index: int) -> torch.Tensor:
        return self.masks[index, :4].any(dim=0)

    def __getitem__(self, index: int) -> dict:
        if self.templates is None:
            raise DataError("dataset was built without an extractor, templates are unavailable")
        return {
            "image": self.images[index],
            "template": self.templates[index],
            "layers": self.layers(index),
            "masks": self.masks[index],
            "subject": self.subject_index[index],
        }


def select_split(records: Sequence[ManifestRecord], split: str) -> List[ManifestRecord]:
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}")
    return [r for r in records if r.split == split]

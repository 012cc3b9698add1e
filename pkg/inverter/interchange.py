"""
File formats shared by the commands: lossless PNG images, mask sidecars,
template records, pair lists, grid sheets and checkpoint archives.
"""
import base64
import json
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image

from inverter.domain import COMPONENTS, Component, ComponentMask, FaceImage, FacialTemplate, validate_face_image
from inverter.errors import DataError, DimensionError

PathLike = Union[str, Path]


def to_uint8(image: FaceImage) -> np.ndarray:
    """[-1, 1] floats -> (H, W, 3) uint8."""
    pixels = image.pixels.detach().cpu().numpy().astype(np.float64)
    return np.clip(np.round((pixels + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(rgb: np.ndarray) -> FaceImage:
    """(H, W, 3) uint8 -> validated FaceImage in [-1, 1]."""
    return validate_face_image(rgb.astype(np.float32) / 127.5 - 1.0)


def save_image(image: FaceImage, path: PathLike) -> Path:
    """Write a lossless PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")
    return path


def load_image(path: PathLike) -> FaceImage:
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"))
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}")
    return from_uint8(rgb)


def save_masks(masks: Mapping[Component, ComponentMask], path: PathLike) -> Path:
    """Write component masks and their failure tags to an .npz sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for component in COMPONENTS:
        mask = masks[component]
        arrays[component.value] = mask.bits.cpu().numpy().astype(np.uint8)
        arrays[f"{component.value}_failure"] = np.array(mask.detection_failure)
    with open(path, "wb") as f:
        np.savez_compressed(f, **arrays)
    return path


def load_masks(path: PathLike) -> Dict[Component, ComponentMask]:
    try:
        with np.load(path) as data:
            return {
                c: ComponentMask(
                    torch.from_numpy(data[c.value].astype(bool)),
                    c,
                    detection_failure=bool(data[f"{c.value}_failure"]),
                )
                for c in COMPONENTS
            }
    except (OSError, KeyError, ValueError) as e:
        raise DataError(f"cannot read mask sidecar {path}: {e}")


def encode_template(values: torch.Tensor) -> str:
    """Base64 of the little-endian float32 bytes."""
    return base64.b64encode(values.detach().cpu().numpy().astype("<f4").tobytes()).decode("ascii")


def decode_template(encoded: str) -> torch.Tensor:
    raw = base64.b64decode(encoded.encode("ascii"), validate=True)
    if len(raw) % 4:
        raise DataError("template payload is not a whole number of float32 values")
    return torch.from_numpy(np.frombuffer(raw, dtype="<f4").astype(np.float32))


def write_templates(records: Iterable[Tuple[str, FacialTemplate]], path: PathLike) -> Path:
    """
    Write one {"id", "d", "template"} JSON record per line.

    Args:
        records: (id, template) pairs
        path: Output JSONL path

    Returns:
        Path written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record_id, template in records:
            f.write(json.dumps({"id": record_id, "d": template.d, "template": encode_template(template.values)}) + "\n")
    return path


def read_templates(path: PathLike) -> List[Tuple[str, FacialTemplate]]:
    """Read records written by write_templates; every record must share one d."""
    records = []
    dims = set()
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    item = json.loads(line)
                    values = decode_template(item["template"])
                except (json.JSONDecodeError, KeyError, ValueError) as e:
                    raise DataError(f"{path}:{line_number}: bad template record: {e}")
                if int(item.get("d", values.numel())) != values.numel():
                    raise DimensionError(f"{path}:{line_number}: declared d={item['d']}, payload has {values.numel()}")
                dims.add(values.numel())
                records.append((str(item["id"]), FacialTemplate(values)))
    except OSError as e:
        raise DataError(f"cannot read templates {path}: {e}")
    if len(dims) > 1:
        raise DimensionError(f"{path} mixes template dimensions {sorted(dims)}")
    return records


@dataclass(frozen=True)
class PairRecord:
    """One verification pair between two image files; label 1 is genuine."""
    pair_id: str
    path_a: str
    path_b: str
    label: int


def write_pairs(pairs: Iterable[PairRecord], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for pair in pairs:
            f.write(json.dumps({
                "pair_id": pair.pair_id,
                "path_a": pair.path_a,
                "path_b": pair.path_b,
                "label": pair.label,
            }) + "\n")
    return path


def read_pairs(path: PathLike) -> List[PairRecord]:
    pairs = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    item = json.loads(line)
                    pair = PairRecord(str(item["pair_id"]), item["path_a"], item["path_b"], int(item["label"]))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                    raise DataError(f"{path}:{line_number}: bad pair record: {e}")
                if pair.label not in (0, 1):
                    raise DataError(f"{path}:{line_number}: label must be 0 or 1")
                pairs.append(pair)
    except OSError as e:
        raise DataError(f"cannot read pairs {path}: {e}")
    return pairs


def save_grid(rows: Sequence[Tuple[FaceImage, FaceImage]], path: PathLike, padding: int = 2) -> Path:
    """
    Write an (original, reconstruction) contact sheet, one pair per row.

    Args:
        rows: Image pairs of equal size
        path: Output PNG path
        padding: White gap in pixels

    Returns:
        Path written
    """
    if not rows:
        raise DataError("grid needs at least one row")
    size = rows[0][0].height
    sheet = Image.new("RGB", (2 * size + 3 * padding, len(rows) * (size + padding) + padding), "white")
    for r, (original, reconstruction) in enumerate(rows):
        y = padding + r * (size + padding)
        sheet.paste(Image.fromarray(to_uint8(original)), (padding, y))
        sheet.paste(Image.fromarray(to_uint8(reconstruction)), (2 * padding + size, y))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sheet.save(path, format="PNG")
    return path


ARCHIVE_PROTOCOL = 4


def _to_arrays(value):
    if isinstance(value, torch.Tensor):
        return np.ascontiguousarray(value.detach().cpu().numpy())
    if isinstance(value, dict):
        return {key: _to_arrays(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return type(value)(_to_arrays(item) for item in value)
    return value


def _to_tensors(value):
    if isinstance(value, np.ndarray):
        return torch.from_numpy(value.copy())
    if isinstance(value, dict):
        return {key: _to_tensors(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return type(value)(_to_tensors(item) for item in value)
    return value


def save_archive(payload: dict, path: PathLike) -> Path:
    """
    Write a checkpoint payload with every tensor stored as a CPU numpy array.

    Equal payloads give byte-identical files.

    Args:
        payload: Nested dicts/lists of tensors and plain values
        path: Destination file

    Returns:
        Path written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = pickle.dumps(_to_arrays(payload), protocol=ARCHIVE_PROTOCOL)
    with open(path, "wb") as f:
        f.write(data)
    return path


def load_archive(path: PathLike) -> dict:
    """Read a payload written by save_archive, arrays restored as tensors."""
    with open(path, "rb") as f:
        payload = pickle.load(f)
    if not isinstance(payload, dict):
        raise DataError(f"{path} does not hold a checkpoint payload")
    return _to_tensors(payload)

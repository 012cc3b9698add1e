"""
Verification protocol (threshold calibration, Type-I/Type-II TAR at fixed FAR)
and foreground perception metrics.
"""
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from inverter.domain import FOREGROUND, Component, ComponentMask, FaceImage, LayerBundle
from inverter.errors import DataError, DetectionFailure, DimensionError, RangeError
from inverter.extractor import TemplateExtractor, cosine_matrix
from inverter.interchange import PairRecord, load_image
from inverter.logger import RunLogger
from inverter.losses import FeatureNetwork, module_device, perceptual_loss

PROTOCOLS = ("type1", "type2")
THRESHOLD_EPSILON = 1e-6
ROC_FARS = (0.0001, 0.0003, 0.001, 0.003, 0.01, 0.03, 0.1, 0.3)
# Above this many cross-subject pairs, impostors are drawn by rejection instead of listed.
ENUMERATE_IMPOSTORS_UP_TO = 1 << 20

MaskInput = Union[LayerBundle, Mapping[Component, ComponentMask], torch.Tensor]


@dataclass
class VerificationScoreSet:
    """Genuine and impostor (score, pair_id) lists of one protocol."""
    genuine: List[Tuple[float, str]]
    impostor: List[Tuple[float, str]]
    protocol: str = "type1"
    n_skipped: int = 0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        for score, pair_id in self.genuine + self.impostor:
            if not -1.0 <= score <= 1.0:
                raise RangeError(f"pair {pair_id} has score {score} outside [-1, 1]")

    def genuine_scores(self) -> np.ndarray:
        return np.array([s for s, _ in self.genuine], dtype=np.float64)

    def impostor_scores(self) -> np.ndarray:
        return np.array([s for s, _ in self.impostor], dtype=np.float64)


def calibrate_threshold(impostor_scores: Sequence[float], far: float) -> Tuple[float, bool]:
    """
    Smallest observed threshold whose impostor accept rate stays within far.

    Accepting means score >= threshold. When even the largest impostor score
    admits too many impostors, the threshold moves just above it and the
    warning flag is set.

    Args:
        impostor_scores: Impostor similarity scores
        far: Target false accept rate in (0, 1)

    Returns:
        Tuple of (threshold, warned)
    """
    scores = np.sort(np.asarray(impostor_scores, dtype=np.float64))
    if scores.size == 0:
        raise DataError("threshold calibration needs impostor scores")
    if not 0 < far < 1:
        raise RangeError(f"far must lie in (0, 1), got {far}")
    max_accepted = math.floor(far * scores.size + 1e-9)
    candidates = np.unique(scores)
    accepted = scores.size - np.searchsorted(scores, candidates, side="left")
    admissible = candidates[accepted <= max_accepted]
    if admissible.size == 0:
        return float(scores[-1] + THRESHOLD_EPSILON), True
    return float(admissible[0]), False


def tar_at_far(scores: VerificationScoreSet, far: float) -> float:
    """Fraction of genuine pairs accepted at the threshold calibrated for far."""
    genuine = scores.genuine_scores()
    if genuine.size == 0:
        raise DataError(f"{scores.protocol} score set has no genuine pairs")
    threshold, _ = calibrate_threshold(scores.impostor_scores(), far)
    return float(np.mean(genuine >= threshold))


def roc_table(scores: VerificationScoreSet, fars: Sequence[float] = ROC_FARS) -> List[Tuple[float, float]]:
    """(far, tar) rows for a FAR grid."""
    return [(float(far), tar_at_far(scores, far)) for far in fars]


def protocol_pairs(subject_ids: Sequence[str], protocol: str, impostor_ratio: int = 10,
                   seed: int = 0) -> Tuple[List[Tuple[int, int]], List[Tuple[int, int]], int]:
    """
    Index pairs (reconstruction i, original j) of one protocol.

    Args:
        subject_ids: Subject of each image, index-aligned with reconstructions
        protocol: "type1" or "type2"
        impostor_ratio: Impostor pairs per genuine pair
        seed: Impostor sampling seed

    Returns:
        Tuple of (genuine pairs, impostor pairs, subjects skipped)
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    n = len(subject_ids)
    by_subject: Dict[str, List[int]] = {}
    for i, subject in enumerate(subject_ids):
        by_subject.setdefault(subject, []).append(i)

    skipped = 0
    if protocol == "type1":
        genuine = [(i, i) for i in range(n)]
    else:
        genuine = []
        for subject, members in by_subject.items():
            if len(members) < 2:
                skipped += 1
                continue
            genuine.extend((i, j) for i in members for j in members if j != i)
        genuine.sort()

    labels = np.asarray(_subject_codes(subject_ids), dtype=np.int64)
    impostor = _impostor_pairs(labels, impostor_ratio * len(genuine), np.random.default_rng(seed))
    return genuine, impostor, skipped


def _impostor_pairs(labels: np.ndarray, count: int, rng: np.random.Generator) -> List[Tuple[int, int]]:
    """Sorted uniform sample of `count` distinct cross-subject (i, j) pairs, capped at all of them."""
    n = len(labels)
    total = n * n - int((np.bincount(labels).astype(np.int64) ** 2).sum()) if n else 0
    count = min(count, total)
    if count == 0:
        return []
    if total <= ENUMERATE_IMPOSTORS_UP_TO or 2 * count > total:
        keys = _cross_subject_keys(labels)
        keys = keys[rng.choice(total, size=count, replace=False)]
    else:
        # rejection sampling; the first `count` distinct draws are a uniform subset
        keys = np.empty(0, dtype=np.int64)
        while len(keys) < count:
            size = 2 * (count - len(keys)) + 16
            i = rng.integers(0, n, size=size)
            j = rng.integers(0, n, size=size)
            keep = labels[i] != labels[j]
            merged = np.concatenate([keys, i[keep] * n + j[keep]])
            _, first = np.unique(merged, return_index=True)
            keys = merged[np.sort(first)][:count]
    keys = np.sort(keys)
    return [(int(k // n), int(k % n)) for k in keys]


def _cross_subject_keys(labels: np.ndarray) -> np.ndarray:
    n = len(labels)
    parts = []
    for code in np.unique(labels):
        rows = np.flatnonzero(labels == code)
        cols = np.flatnonzero(labels != code)
        parts.append((rows[:, None] * n + cols[None, :]).ravel())
    return np.sort(np.concatenate(parts))


def _subject_codes(subject_ids: Sequence[str]) -> List[int]:
    codes: Dict[str, int] = {}
    return [codes.setdefault(s, len(codes)) for s in subject_ids]


def build_protocol_pairs(reconstructed: torch.Tensor, originals: torch.Tensor, subject_ids: Sequence[str],
                         protocol: str, image_ids: Optional[Sequence[str]] = None, impostor_ratio: int = 10,
                         seed: int = 0) -> VerificationScoreSet:
    """
    Score the genuine and impostor pairs of one protocol.

    Args:
        reconstructed: (N, d) templates of the reconstructions
        originals: (N, d) templates of the original images, same order
        subject_ids: Subject of each original
        protocol: "type1" or "type2"
        image_ids: Names used in pair ids, defaults to indices
        impostor_ratio: Impostor pairs per genuine pair
        seed: Impostor sampling seed

    Returns:
        VerificationScoreSet
    """
    n = len(subject_ids)
    if reconstructed.shape[0] != n or originals.shape[0] != n:
        raise DimensionError("reconstructions, originals and subject ids must be index-aligned")
    names = list(image_ids) if image_ids is not None else [str(i) for i in range(n)]
    genuine, impostor, skipped = protocol_pairs(subject_ids, protocol, impostor_ratio, seed)
    sims = cosine_matrix(reconstructed, originals).cpu().numpy()

    def scored(pairs):
        return [(float(sims[i, j]), f"{names[i]}~{names[j]}") for i, j in pairs]

    return VerificationScoreSet(scored(genuine), scored(impostor), protocol, skipped)


def _foreground(masks: MaskInput) -> torch.Tensor:
    if isinstance(masks, torch.Tensor):
        return masks.to(torch.bool)
    if isinstance(masks, LayerBundle):
        return masks.foreground_union()
    union = None
    for component in FOREGROUND:
        if component not in masks:
            raise DataError(f"missing {component.value} mask")
        bits = masks[component].bits
        union = bits.clone() if union is None else union | bits
    return union


def _chw(image: Union[FaceImage, torch.Tensor]) -> torch.Tensor:
    return image.to_chw() if isinstance(image, FaceImage) else image


def fapd(x: Union[FaceImage, torch.Tensor], x_hat: Union[FaceImage, torch.Tensor], masks: MaskInput) -> float:
    """
    Mean squared pixel error inside the foreground (eyebrows, eyes, nose, mouth).

    Args:
        x: Original image, FaceImage or (3, H, W)
        x_hat: Reconstruction, same shape
        masks: Bundle, component masks or an (H, W) foreground union

    Returns:
        (1/n)·Σ(x_i − x̂_i)² over the n = |foreground|·3 entries
    """
    x, x_hat = _chw(x), _chw(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionError(f"image shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    union = _foreground(masks)
    count = int(union.sum()) * x.shape[0]
    if count == 0:
        raise DetectionFailure("foreground is empty")
    diff = (x.double() - x_hat.double()) ** 2
    return float(diff[:, union].sum() / count)


def fapc(x: Union[FaceImage, torch.Tensor], x_hat: Union[FaceImage, torch.Tensor], masks: MaskInput,
         fnet: FeatureNetwork) -> float:
    """Perceptual loss of both images after zeroing everything outside the foreground."""
    x, x_hat = _chw(x), _chw(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionError(f"image shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    union = _foreground(masks)
    if not bool(union.any()):
        raise DetectionFailure("foreground is empty")
    zero = torch.zeros((), dtype=x.dtype)
    device = module_device(fnet)
    with torch.no_grad():
        value = perceptual_loss(torch.where(union, x, zero).unsqueeze(0).to(device),
                                torch.where(union, x_hat, zero).unsqueeze(0).to(device), fnet)
    return float(value)


@dataclass
class EvalReport:
    """Metrics of one extractor; TAR keyed by protocol then FAR."""
    extractor: str
    role: str = "target"
    tar_at: Dict[str, Dict[str, float]] = field(default_factory=dict)
    fapd: Optional[float] = None
    fapc: Optional[float] = None
    n_pairs: int = 0
    n_failures: int = 0
    roc: Dict[str, List[Tuple[float, float]]] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)
    skipped: bool = False
    skip_reason: str = ""

    def __post_init__(self):
        for protocol, row in self.tar_at.items():
            for far, tar in row.items():
                if not 0.0 <= tar <= 1.0:
                    raise RangeError(f"TAR {tar} at {protocol}/{far} outside [0, 1]")

    def tar(self, protocol: str, far: float) -> float:
        return self.tar_at[protocol][far_key(far)]

    def to_dict(self) -> dict:
        data = asdict(self)
        data["roc"] = {p: [list(row) for row in rows] for p, rows in self.roc.items()}
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        data = dict(data)
        data["roc"] = {p: [tuple(row) for row in rows] for p, rows in data.get("roc", {}).items()}
        return cls(**data)


def far_key(far: float) -> str:
    return repr(float(far))


def write_reports(reports: Sequence[EvalReport], path: Union[str, Path], extra: Optional[dict] = None) -> Path:
    """Write reports as one JSON document."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {"reports": [r.to_dict() for r in reports]}
    if extra:
        document.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2)
    return path


def read_reports(path: Union[str, Path]) -> List[EvalReport]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
        return [EvalReport.from_dict(item) for item in document["reports"]]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataError(f"cannot read report {path}: {e}")


def _mean_or_none(values: List[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def perception_metrics(images: torch.Tensor, reconstructions: torch.Tensor, foreground: torch.Tensor,
                       fnet: FeatureNetwork) -> Tuple[Optional[float], Optional[float], int]:
    """
    Mean FAPD and FAPC over a batch, excluding images with an empty foreground.

    Returns:
        Tuple of (mean fapd, mean fapc, number of excluded images)
    """
    d_values, c_values, failures = [], [], 0
    for x, x_hat, union in zip(images, reconstructions, foreground):
        try:
            d_values.append(fapd(x, x_hat, union))
            c_values.append(fapc(x, x_hat, union, fnet))
        except DetectionFailure:
            failures += 1
    return _mean_or_none(d_values), _mean_or_none(c_values), failures


def verification_report(name: str, role: str, reconstructed: torch.Tensor, originals: torch.Tensor,
                        subject_ids: Sequence[str], image_ids: Sequence[str], far_levels: Sequence[float],
                        impostor_ratio: int = 10, seed: int = 0) -> EvalReport:
    """TAR at every FAR level for both protocols, plus the ROC tables."""
    report = EvalReport(extractor=name, role=role)
    for protocol in PROTOCOLS:
        scores = build_protocol_pairs(reconstructed, originals, subject_ids, protocol, image_ids,
                                      impostor_ratio, seed)
        report.n_pairs += len(scores.genuine) + len(scores.impostor)
        report.n_failures += scores.n_skipped
        if not scores.genuine or not scores.impostor:
            report.warnings.append(f"{protocol}: no genuine or impostor pairs")
            continue
        report.tar_at[protocol] = {}
        for far in far_levels:
            _, warned = calibrate_threshold(scores.impostor_scores(), far)
            if warned:
                report.warnings.append(
                    f"{protocol}: FAR {far} is below 1/{len(scores.impostor)} impostor pairs"
                )
            report.tar_at[protocol][far_key(far)] = tar_at_far(scores, far)
        report.roc[protocol] = roc_table(scores)
    return report


def reconstruct(model, templates: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    """Inference-mode reconstructions of a template batch, on the CPU."""
    return torch.cat([model.invert(templates[i:i + batch_size]).cpu()
                      for i in range(0, templates.shape[0], batch_size)])


def evaluate_model(model, dataset, target: TemplateExtractor, fnet: FeatureNetwork, far_levels: Sequence[float],
                   unseen: Sequence[Tuple[str, Optional[TemplateExtractor], str]] = (),
                   impostor_ratio: int = 10, seed: int = 0,
                   logger: Optional[RunLogger] = None) -> List[EvalReport]:
    """
    Evaluate an inverter on a test dataset.

    Reconstructions come from the target templates. Every extractor scores its
    own templates of reconstructions against originals; unseen extractors that
    could not be built appear as skipped rows.

    Args:
        model: LayeredInverter
        dataset: FaceDataset with target templates
        target: Target extractor
        fnet: Feature network for FAPC
        far_levels: FAR operating points
        unseen: (name, extractor or None, skip reason) per unseen extractor
        impostor_ratio: Impostor pairs per genuine pair
        seed: Impostor sampling seed
        logger: Optional run logger

    Returns:
        One EvalReport per extractor, target first
    """
    logger = logger or RunLogger(None)
    reconstructions = reconstruct(model, dataset.templates)
    foreground = dataset.masks[:, :len(FOREGROUND)].any(dim=1)
    fapd_mean, fapc_mean, failures = perception_metrics(dataset.images, reconstructions, foreground, fnet)

    extractors = [(target.descriptor.name, target, "")] + list(unseen)
    reports = []
    for index, (name, extractor, reason) in enumerate(extractors):
        role = "target" if index == 0 else "unseen"
        if extractor is None:
            report = EvalReport(extractor=name, role=role, skipped=True, skip_reason=reason)
        else:
            recon_templates = torch.cat([extractor.extract_batch(reconstructions[i:i + 64]).cpu()
                                         for i in range(0, len(reconstructions), 64)])
            if index == 0:
                originals = dataset.templates
            else:
                originals = torch.cat([extractor.extract_batch(dataset.images[i:i + 64]).cpu()
                                       for i in range(0, len(dataset.images), 64)])
            report = verification_report(name, role, recon_templates, originals, dataset.subject_ids,
                                         dataset.image_ids, far_levels, impostor_ratio, seed)
            report.fapd, report.fapc = fapd_mean, fapc_mean
            report.n_failures += failures
        logger.log_event("evaluation", report.to_dict())
        reports.append(report)
    return reports


def format_report(report: EvalReport) -> str:
    """Plain-text table of one report."""
    if report.skipped:
        return f"{report.extractor} [{report.role}]: skipped ({report.skip_reason})"
    lines = [f"{report.extractor} [{report.role}]  pairs={report.n_pairs}  failures={report.n_failures}"]
    for protocol, row in report.tar_at.items():
        cells = "  ".join(f"TAR@{float(far):.2%}FAR={tar:.4f}" for far, tar in row.items())
        lines.append(f"  {protocol}: {cells}")
    if report.fapd is not None:
        lines.append(f"  FAPD={report.fapd:.4f}  FAPC={report.fapc:.4f}")
    for warning in report.warnings:
        lines.append(f"  warning: {warning}")
    return "\n".join(lines)


def score_pair_records(pairs: Sequence[PairRecord], extractor: TemplateExtractor,
                       root: Optional[Path] = None, protocol: str = "type1") -> VerificationScoreSet:
    """
    Score an imported pair list, e.g. reconstructions produced by another tool.

    Args:
        pairs: Pair records; label 1 is genuine, 0 impostor
        extractor: Extractor scoring both sides
        root: Directory that relative paths are resolved against
        protocol: Protocol tag of the resulting score set

    Returns:
        VerificationScoreSet
    """
    templates: Dict[str, torch.Tensor] = {}

    def template(path: str) -> torch.Tensor:
        if path not in templates:
            resolved = Path(path) if root is None or Path(path).is_absolute() else Path(root) / path
            templates[path] = extractor.extract(load_image(resolved)).values
        return templates[path]

    genuine, impostor = [], []
    for pair in pairs:
        a, b = template(pair.path_a), template(pair.path_b)
        score = float(cosine_matrix(a.unsqueeze(0), b.unsqueeze(0))[0, 0])
        (genuine if pair.label == 1 else impostor).append((score, pair.pair_id))
    return VerificationScoreSet(genuine, impostor, protocol)

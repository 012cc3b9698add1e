"""
Template extractor abstraction E: X -> T.
Two capability tiers: query-only black boxes and differentiable networks.
Ships a small trainable toy extractor for desk-scale experiments.
"""
import pickle
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from config.config import ExtractorSpec, ExtractorTrainingConfig
from inverter.domain import FaceImage, FacialTemplate
from inverter.errors import (
    CapabilityError,
    CheckpointFormatError,
    DataError,
    DimensionError,
    ExtractorStateError,
    NumericError,
)
from inverter.interchange import load_archive, save_archive
from inverter.logger import RunLogger
from inverter.plugins import register_plugin

ImageInput = Union[FaceImage, torch.Tensor]

# Allowed deviation from unit norm for normalized extractors.
NORM_TOLERANCE = 1e-4


@dataclass(frozen=True)
class ExtractorDescriptor:
    """Static facts about an extractor."""
    name: str
    d: int
    normalized: bool
    differentiable: bool
    role: str = "target"

    def __post_init__(self):
        if self.d < 8:
            raise DimensionError(f"template dimension must be >= 8, got {self.d}")
        if self.role not in ("target", "unseen"):
            raise ValueError(f"unknown extractor role {self.role!r}")


def _as_batch(image: ImageInput) -> torch.Tensor:
    """Return an (N, 3, H, W) batch from a FaceImage or tensor."""
    if isinstance(image, FaceImage):
        return image.to_chw().unsqueeze(0)
    if image.dim() == 3:
        return image.unsqueeze(0)
    if image.dim() != 4 or image.shape[1] != 3:
        raise DimensionError(f"expected (N, 3, H, W) images, got {tuple(image.shape)}")
    return image


class TemplateExtractor(ABC):
    """Base class for all extractors; value path shared by every tier."""

    def __init__(self, descriptor: ExtractorDescriptor):
        self.descriptor = descriptor

    @abstractmethod
    def _embed(self, batch: torch.Tensor) -> torch.Tensor:
        """Map an (N, 3, H, W) batch to (N, d) templates without gradients."""

    def extract(self, image: FaceImage) -> FacialTemplate:
        """
        Extract the template of a single image.

        Args:
            image: Valid face image

        Returns:
            FacialTemplate of length d
        """
        values = self.extract_batch(_as_batch(image))[0]
        return FacialTemplate(values.cpu())

    def extract_batch(self, images: torch.Tensor) -> torch.Tensor:
        """Templates of an (N, 3, H, W) batch, no gradient path."""
        with torch.no_grad():
            templates = self._embed(_as_batch(images))
        if templates.shape[-1] != self.descriptor.d:
            raise DimensionError(
                f"{self.descriptor.name} produced d={templates.shape[-1]}, declared d={self.descriptor.d}"
            )
        if self.descriptor.normalized and templates.numel():
            drift = float((templates.double().norm(dim=-1) - 1.0).abs().max())
            if drift > NORM_TOLERANCE:
                raise NumericError(
                    f"{self.descriptor.name} is declared normalized but a template norm is off by {drift:.2e}"
                )
        return templates

    def extract_differentiable(self, images: ImageInput) -> torch.Tensor:
        raise CapabilityError(f"extractor {self.descriptor.name!r} is query-only")


class NetworkExtractor(TemplateExtractor):
    """Differentiable extractor backed by a frozen torch module."""

    def __init__(self, net: Optional[nn.Module], descriptor: ExtractorDescriptor, device: str = "cpu"):
        super().__init__(descriptor)
        self.device = torch.device(device)
        self.net = None
        if net is not None:
            self.load_network(net)

    def load_network(self, net: nn.Module):
        """Install and freeze the backing network."""
        net = net.to(self.device).eval()
        for param in net.parameters():
            param.requires_grad_(False)
        self.net = net

    @property
    def initialized(self) -> bool:
        return self.net is not None

    def _require_net(self) -> nn.Module:
        if self.net is None:
            raise ExtractorStateError(f"extractor {self.descriptor.name!r} is not initialized")
        return self.net

    def _embed(self, batch: torch.Tensor) -> torch.Tensor:
        net = self._require_net()
        return net(batch.to(self.device))

    def extract_differentiable(self, images: ImageInput) -> torch.Tensor:
        """
        Templates with a gradient path back to the input pixels.

        Args:
            images: FaceImage or (N, 3, H, W) tensor

        Returns:
            (N, d) tensor attached to the autograd graph
        """
        if not self.descriptor.differentiable:
            raise CapabilityError(f"extractor {self.descriptor.name!r} is query-only")
        net = self._require_net()
        batch = _as_batch(images)
        return net(batch.to(self.device))


class QueryOnlyExtractor(TemplateExtractor):
    """Black-box tier: values only, never gradients."""

    def __init__(self, query: Union[TemplateExtractor, Callable[[torch.Tensor], torch.Tensor]],
                 descriptor: Optional[ExtractorDescriptor] = None):
        if descriptor is None:
            if not isinstance(query, TemplateExtractor):
                raise ValueError("a descriptor is required when wrapping a plain callable")
            descriptor = ExtractorDescriptor(
                name=query.descriptor.name,
                d=query.descriptor.d,
                normalized=query.descriptor.normalized,
                differentiable=False,
                role=query.descriptor.role,
            )
        super().__init__(descriptor)
        self._query = query.extract_batch if isinstance(query, TemplateExtractor) else query

    def _embed(self, batch: torch.Tensor) -> torch.Tensor:
        return torch.as_tensor(self._query(batch))


class ToyExtractorNet(nn.Module):
    """Strided conv encoder -> global pool -> linear -> L2 normalize."""

    def __init__(self, template_dim: int = 512, width: int = 32):
        super().__init__()
        self.width = width
        channels = [3, width, width * 2, width * 4, width * 8]
        layers: List[nn.Module] = []
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            layers += [
                nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=True),
            ]
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.embed = nn.Linear(channels[-1], template_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.pool(self.features(x)).flatten(1)
        return F.normalize(self.embed(h), dim=1)


class MarginHead(nn.Module):
    """Additive cosine-margin classifier over identity prototypes."""

    def __init__(self, template_dim: int, n_classes: int, margin: float, scale: float):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_classes, template_dim) * 0.01)
        self.margin = margin
        self.scale = scale

    def forward(self, templates: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        cosine = templates @ F.normalize(self.weight, dim=1).t()
        onehot = F.one_hot(labels, cosine.shape[1]).to(cosine.dtype)
        return self.scale * (cosine - self.margin * onehot)


def similarity(a: Union[FacialTemplate, torch.Tensor], b: Union[FacialTemplate, torch.Tensor]) -> float:
    """
    Cosine similarity between two templates.

    Args:
        a: First template
        b: Second template

    Returns:
        Cosine in [-1, 1]
    """
    va = (a.values if isinstance(a, FacialTemplate) else a).reshape(-1).double()
    vb = (b.values if isinstance(b, FacialTemplate) else b).reshape(-1).double()
    if va.numel() != vb.numel():
        raise DimensionError(f"template dimensions differ: {va.numel()} vs {vb.numel()}")
    na, nb = va.norm(), vb.norm()
    if float(na) == 0.0 or float(nb) == 0.0:
        raise NumericError("cosine similarity is undefined for a zero-norm template")
    return float(torch.clamp(va.dot(vb) / (na * nb), -1.0, 1.0))


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarities of (N, d) and (M, d) templates."""
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"template dimensions differ: {a.shape[-1]} vs {b.shape[-1]}")
    return torch.clamp(F.normalize(a.double(), dim=1) @ F.normalize(b.double(), dim=1).t(), -1.0, 1.0)


def train_toy_extractor(
    images: torch.Tensor,
    subject_ids: Sequence[str],
    config: ExtractorTrainingConfig,
    template_dim: int = 512,
    seed: int = 0,
    device: str = "cpu",
    name: str = "toy",
    role: str = "target",
    logger: Optional[RunLogger] = None,
) -> NetworkExtractor:
    """
    Train the toy extractor with a margin-based identity objective.

    Args:
        images: (N, 3, H, W) training images in [-1, 1]
        subject_ids: Identity label per image
        config: Extractor training settings
        template_dim: Output dimension d
        seed: Seed for initialization and batch order
        device: Torch device string
        name: Descriptor name
        role: Descriptor role
        logger: Optional run logger

    Returns:
        Frozen NetworkExtractor
    """
    if len(subject_ids) != images.shape[0]:
        raise DataError("one subject id is required per image")
    counts = {}
    for subject in subject_ids:
        counts[subject] = counts.get(subject, 0) + 1
    eligible = [s for s, n in counts.items() if n >= 2]
    if len(eligible) < 2:
        raise DataError("toy extractor needs at least 2 identities with at least 2 images each")

    classes = {subject: i for i, subject in enumerate(sorted(counts))}
    labels = torch.tensor([classes[s] for s in subject_ids], dtype=torch.long)

    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    net = ToyExtractorNet(template_dim=template_dim, width=config.width).to(device)
    head = MarginHead(template_dim, len(classes), config.margin, config.scale).to(device)
    optimizer = torch.optim.Adam(list(net.parameters()) + list(head.parameters()), lr=config.learning_rate)

    n = images.shape[0]
    batch_size = max(2, min(config.batch_size, n))
    net.train()
    for epoch in tqdm(range(config.epochs), desc=f"extractor[{name}]", leave=False):
        order = torch.randperm(n, generator=generator)
        total, batches = 0.0, 0
        for start in range(0, n, batch_size):
            index = order[start:start + batch_size]
            if index.numel() < 2:
                continue
            x = images[index].to(device)
            y = labels[index].to(device)
            loss = F.cross_entropy(head(net(x), y), y)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += float(loss)
            batches += 1
        if logger is not None:
            logger.log_event("extractor_epoch", {"name": name, "epoch": epoch + 1, "loss": total / max(batches, 1)})

    descriptor = ExtractorDescriptor(name=name, d=template_dim, normalized=True, differentiable=True, role=role)
    extractor = NetworkExtractor(net.cpu(), descriptor, device=device)
    if logger is not None:
        logger.log_event("extractor_trained", {"name": name, "identities": len(classes), "images": n})
    return extractor


def save_extractor(extractor: NetworkExtractor, path: Union[str, Path]) -> Path:
    """Write a toy extractor checkpoint."""
    net = extractor._require_net()
    return save_archive({
        "descriptor": asdict(extractor.descriptor),
        "width": getattr(net, "width", 32),
        "state_dict": net.state_dict(),
    }, path)


def load_extractor(path: Union[str, Path], device: str = "cpu", role: Optional[str] = None) -> NetworkExtractor:
    """Load a toy extractor checkpoint written by save_extractor."""
    try:
        payload = load_archive(path)
        descriptor = ExtractorDescriptor(**payload["descriptor"])
        width = int(payload.get("width", 32))
        state = payload["state_dict"]
    except (OSError, RuntimeError, KeyError, TypeError, EOFError, DataError, pickle.UnpicklingError) as e:
        raise CheckpointFormatError(f"cannot read extractor checkpoint {path}: {e}", "extractor")
    if role is not None and role != descriptor.role:
        descriptor = ExtractorDescriptor(descriptor.name, descriptor.d, descriptor.normalized,
                                         descriptor.differentiable, role)
    net = ToyExtractorNet(template_dim=descriptor.d, width=width)
    try:
        net.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointFormatError(f"extractor weights do not match: {e}", "extractor")
    return NetworkExtractor(net, descriptor, device=device)


@register_plugin("extractor", "toy")
def toy_extractor_factory(spec: ExtractorSpec, device: str = "cpu") -> NetworkExtractor:
    """Differentiable toy extractor from its checkpoint."""
    if not spec.checkpoint or not Path(spec.checkpoint).exists():
        raise ExtractorStateError(f"toy extractor checkpoint not found: {spec.checkpoint}")
    return load_extractor(spec.checkpoint, device=device, role=spec.role)


@register_plugin("extractor", "toy_query")
def toy_query_extractor_factory(spec: ExtractorSpec, device: str = "cpu") -> QueryOnlyExtractor:
    """Toy extractor exposed through the black-box tier only."""
    return QueryOnlyExtractor(toy_extractor_factory(spec, device))

"""
Reconstruction losses and per-stage objectives.
Feature networks and attribute classifiers are pluggable read-only modules.
"""
from abc import abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from config.config import LossWeights
from inverter.domain import ATTRIBUTE_COUNT, AttributeVector, FaceImage, FacialTemplate
from inverter.errors import ArityError, CheckpointFormatError, ConfigError, DimensionError
from inverter.plugins import register_plugin

ROLES = ("layer", "panorama")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# ReLU1_2, ReLU2_2, ReLU3_3, ReLU4_3, ReLU5_3 inside torchvision's vgg16().features
VGG16_TAP_INDICES = (3, 8, 15, 22, 29)


def _values(x: Union[FacialTemplate, FaceImage, AttributeVector, torch.Tensor]) -> torch.Tensor:
    if isinstance(x, FacialTemplate):
        return x.values
    if isinstance(x, FaceImage):
        return x.to_chw().unsqueeze(0)
    if isinstance(x, AttributeVector):
        return x.probs
    return x


def _freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for param in module.parameters():
        param.requires_grad_(False)
    return module


def module_device(module: nn.Module) -> torch.device:
    """Device of the first parameter or buffer; CPU for stateless modules."""
    for tensor in module.parameters():
        return tensor.device
    for tensor in module.buffers():
        return tensor.device
    return torch.device("cpu")


def template_loss(t, t_hat) -> torch.Tensor:
    """
    Mean squared element-wise template difference, (1/d)·Σ(t_i − t̂_i)².

    Args:
        t: Reference template(s), (d,) or (N, d)
        t_hat: Template(s) of the reconstruction, same shape

    Returns:
        Scalar tensor (batch mean)
    """
    t, t_hat = _values(t), _values(t_hat)
    if t.shape != t_hat.shape:
        raise DimensionError(f"template shapes differ: {tuple(t.shape)} vs {tuple(t_hat.shape)}")
    return ((t - t_hat) ** 2).mean()


def pixel_loss(x, x_hat) -> torch.Tensor:
    """Mean squared error over every H·W·3 entry."""
    x, x_hat = _values(x), _values(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionError(f"image shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return ((x - x_hat) ** 2).mean()


def attribute_loss(ax, ax_hat) -> torch.Tensor:
    """Mean absolute difference of 40 attribute probabilities."""
    ax, ax_hat = _values(ax), _values(ax_hat)
    if ax.shape[-1] != ATTRIBUTE_COUNT or ax.shape != ax_hat.shape:
        raise DimensionError(
            f"attribute vectors must both have length {ATTRIBUTE_COUNT}: {tuple(ax.shape)} vs {tuple(ax_hat.shape)}"
        )
    return (ax - ax_hat).abs().mean()


class FeatureNetwork(nn.Module):
    """Frozen network exposing an ordered list of feature taps."""

    min_resolution = 1

    @abstractmethod
    def taps(self, x: torch.Tensor) -> List[torch.Tensor]:
        """(N, C_l, H_l, W_l) features for each tap, largest spatial size first."""

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        if x.shape[-1] < self.min_resolution or x.shape[-2] < self.min_resolution:
            raise DimensionError(
                f"{type(self).__name__} needs inputs of at least {self.min_resolution}px, got {tuple(x.shape[-2:])}"
            )
        return self.taps(x)


def perceptual_loss(x, x_hat, fnet: FeatureNetwork) -> torch.Tensor:
    """
    Per-tap normalized squared feature distance, summed over taps.

    Each tap contributes (1/(H_l·W_l·C_l))·‖φ_l(x) − φ_l(x̂)‖², averaged over the batch.

    Args:
        x: Target image(s)
        x_hat: Reconstructed image(s)
        fnet: Feature network

    Returns:
        Scalar tensor
    """
    x, x_hat = _values(x), _values(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionError(f"image shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    total = x_hat.new_zeros(())
    for phi, phi_hat in zip(fnet(x), fnet(x_hat)):
        total = total + ((phi - phi_hat) ** 2).mean()
    return total


class IdentityTaps(FeatureNetwork):
    """φ_l(x) = s_l·x; reduces the perceptual loss to scaled pixel losses."""

    def __init__(self, scales: Sequence[float] = (1.0,)):
        super().__init__()
        self.scales = tuple(scales)

    def taps(self, x: torch.Tensor) -> List[torch.Tensor]:
        return [s * x for s in self.scales]


class RandomTapNetwork(FeatureNetwork):
    """Fixed-seed random convolutional tap network with five taps."""

    min_resolution = 16

    def __init__(self, seed: int = 0, width: int = 8):
        super().__init__()
        channels = [3, width, 2 * width, 4 * width, 4 * width, 4 * width]
        self.stages = nn.ModuleList(
            nn.Conv2d(channels[i], channels[i + 1], kernel_size=3, padding=1) for i in range(5)
        )
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in self.stages:
                fan_in = conv.in_channels * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=generator) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
        _freeze(self)

    def taps(self, x: torch.Tensor) -> List[torch.Tensor]:
        features = []
        h = x
        for i, conv in enumerate(self.stages):
            if i > 0:
                h = F.avg_pool2d(h, 2, ceil_mode=True)
            h = F.relu(conv(h))
            features.append(h)
        return features


class VGG16Taps(FeatureNetwork):
    """Pre-trained VGG-16 tapped at ReLU1_2 through ReLU5_3, ImageNet-normalized inputs."""

    min_resolution = 32

    def __init__(self, pretrained: bool = True):
        super().__init__()
        from torchvision.models import VGG16_Weights, vgg16

        features = vgg16(weights=VGG16_Weights.IMAGENET1K_V1 if pretrained else None).features
        for module in features:
            if isinstance(module, nn.ReLU):
                module.inplace = False
        self.features = features[:VGG16_TAP_INDICES[-1] + 1]
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        _freeze(self)

    def taps(self, x: torch.Tensor) -> List[torch.Tensor]:
        h = ((x + 1.0) / 2.0 - self.mean) / self.std
        features = []
        for index, layer in enumerate(self.features):
            h = layer(h)
            if index in VGG16_TAP_INDICES:
                features.append(h)
        return features


class AttributeClassifier(nn.Module):
    """Frozen image -> 40 attribute probabilities."""

    @abstractmethod
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(N, 3, H, W) images in [-1, 1] -> (N, 40) probabilities."""

    def classify(self, image: FaceImage) -> AttributeVector:
        with torch.no_grad():
            probs = self(image.to_chw().unsqueeze(0))[0]
        return AttributeVector(probs.cpu())


class RandomAttributeClassifier(AttributeClassifier):
    """Fixed-seed random classifier; exercises the attribute path without downloads."""

    def __init__(self, seed: int = 0, width: int = 8):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv2d(3, width, kernel_size=3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(width, 2 * width, kernel_size=3, stride=2, padding=1)
        self.head = nn.Linear(2 * width, ATTRIBUTE_COUNT)
        with torch.no_grad():
            for param in self.parameters():
                param.copy_(torch.randn(param.shape, generator=generator) * 0.5)
        _freeze(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.conv2(F.relu(self.conv1(x))))
        return torch.sigmoid(self.head(h.mean(dim=(2, 3))))


class ResNet18Attributes(AttributeClassifier):
    """ResNet-18 with a 40-way sigmoid head, weights supplied by the user."""

    def __init__(self, weights_path: Union[str, Path]):
        super().__init__()
        from torchvision.models import resnet18

        self.net = resnet18(weights=None, num_classes=ATTRIBUTE_COUNT)
        try:
            state = torch.load(weights_path, map_location="cpu")
            self.net.load_state_dict(state.get("state_dict", state))
        except (OSError, RuntimeError, AttributeError, EOFError) as e:
            raise CheckpointFormatError(f"cannot load attribute weights {weights_path}: {e}", "attribute_classifier")
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        _freeze(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(((x + 1.0) / 2.0 - self.mean) / self.std))


@register_plugin("feature_network", "identity")
def identity_taps_factory(device: str = "cpu") -> FeatureNetwork:
    return IdentityTaps().to(device)


@register_plugin("feature_network", "random_taps")
def random_taps_factory(device: str = "cpu") -> FeatureNetwork:
    return RandomTapNetwork().to(device)


@register_plugin("feature_network", "vgg16")
def vgg16_factory(device: str = "cpu") -> FeatureNetwork:
    return VGG16Taps().to(device)


@register_plugin("attribute_classifier", "random_attributes")
def random_attributes_factory(weights: Optional[str] = None, device: str = "cpu") -> AttributeClassifier:
    return RandomAttributeClassifier().to(device)


@register_plugin("attribute_classifier", "resnet18")
def resnet18_factory(weights: Optional[str] = None, device: str = "cpu") -> AttributeClassifier:
    if not weights:
        raise ConfigError("resnet18 needs a weights file", "attribute_weights")
    return ResNet18Attributes(weights).to(device)


@dataclass
class LossParts:
    """Inputs of one objective evaluation; None marks a part that was not computed."""
    t: Optional[torch.Tensor] = None
    t_hat: Optional[torch.Tensor] = None
    x: Optional[torch.Tensor] = None
    x_hat: Optional[torch.Tensor] = None
    ax: Optional[torch.Tensor] = None
    ax_hat: Optional[torch.Tensor] = None


def objective_terms(stage: int, role: str) -> Tuple[str, ...]:
    """
    Loss terms of a generator's objective.

    Layer generators use template, pixel and perceptual terms in stages 1 and 3;
    the panorama generator adds the attribute term in stages 2 and 3.
    """
    if stage not in (1, 2, 3):
        raise ValueError(f"unknown stage {stage}")
    if role not in ROLES:
        raise ValueError(f"unknown generator role {role!r}")
    if stage == 1 and role != "layer":
        raise ValueError("stage 1 trains layer generators only")
    if stage == 2 and role != "panorama":
        raise ValueError("stage 2 trains the panorama generator only")
    if role == "layer":
        return ("template", "pixel", "perceptual")
    return ("template", "pixel", "perceptual", "attribute")


def _require(parts: LossParts, names: Sequence[str], term: str):
    missing = [n for n in names if getattr(parts, n) is None]
    if missing:
        raise ArityError(f"{term} term needs {', '.join(missing)}")


def stage_objective(stage: int, role: str, parts: LossParts, weights: LossWeights,
                    fnet: Optional[FeatureNetwork] = None) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """
    Weighted objective of one generator in one stage.

    Terms with zero weight are skipped, so their parts may be omitted.

    Args:
        stage: Stage tag 1, 2 or 3
        role: "layer" for foreground/midground generators, "panorama" otherwise
        parts: Loss inputs
        weights: Per-term weights
        fnet: Feature network, required when w_per > 0

    Returns:
        (total, term name -> unweighted term value)
    """
    terms: Dict[str, torch.Tensor] = {}
    total = None
    for name in objective_terms(stage, role):
        if name == "template" and weights.w_tmp > 0:
            _require(parts, ("t", "t_hat"), name)
            value, weight = template_loss(parts.t, parts.t_hat), weights.w_tmp
        elif name == "pixel" and weights.w_pix > 0:
            _require(parts, ("x", "x_hat"), name)
            value, weight = pixel_loss(parts.x, parts.x_hat), weights.w_pix
        elif name == "perceptual" and weights.w_per > 0:
            _require(parts, ("x", "x_hat"), name)
            if fnet is None:
                raise ArityError("perceptual term needs a feature network")
            value, weight = perceptual_loss(parts.x, parts.x_hat, fnet), weights.w_per
        elif name == "attribute" and weights.w_att > 0:
            _require(parts, ("ax", "ax_hat"), name)
            value, weight = attribute_loss(parts.ax, parts.ax_hat), weights.w_att
        else:
            continue
        terms[name] = value
        total = weight * value if total is None else total + weight * value
    if total is None:
        raise ArityError(f"stage {stage} {role} objective has no weighted terms")
    return total, terms

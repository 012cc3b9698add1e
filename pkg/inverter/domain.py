"""
Core data types for layered template inversion.
Types are constructed once, validated, and treated as immutable afterwards.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Tuple, Union

import numpy as np
import torch

from inverter.errors import ArityError, DataError, DimensionError, RangeError

ATTRIBUTE_COUNT = 40
MIN_RESOLUTION = 32

TensorLike = Union[torch.Tensor, np.ndarray]


class Component(str, Enum):
    """Facial components that receive their own supervision layer."""
    EYEBROWS = "eyebrows"
    EYES = "eyes"
    NOSE = "nose"
    MOUTH = "mouth"
    SKIN = "skin"


# Stacking order for layer tensors: four foreground components, then skin.
COMPONENTS: Tuple[Component, ...] = (
    Component.EYEBROWS,
    Component.EYES,
    Component.NOSE,
    Component.MOUTH,
    Component.SKIN,
)
FOREGROUND: Tuple[Component, ...] = COMPONENTS[:4]


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _as_float_tensor(values: TensorLike) -> torch.Tensor:
    if isinstance(values, np.ndarray):
        values = torch.from_numpy(np.ascontiguousarray(values))
    if not isinstance(values, torch.Tensor):
        values = torch.as_tensor(values)
    return values.detach().to(torch.float32)


@dataclass(frozen=True, eq=False)
class FaceImage:
    """H×W×3 image with intensities normalized to [-1, 1]."""
    pixels: torch.Tensor

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def to_chw(self) -> torch.Tensor:
        """Channel-first view (3, H, W) for network input."""
        return self.pixels.permute(2, 0, 1).contiguous()

    @classmethod
    def from_chw(cls, tensor: torch.Tensor) -> "FaceImage":
        """Build a validated image from a (3, H, W) tensor."""
        if tensor.dim() != 3 or tensor.shape[0] != 3:
            raise DimensionError(f"expected (3, H, W), got {tuple(tensor.shape)}")
        return validate_face_image(tensor.detach().permute(1, 2, 0))


@dataclass(frozen=True, eq=False)
class FacialTemplate:
    """d-dimensional identity embedding."""
    values: torch.Tensor

    def __post_init__(self):
        if self.values.dim() != 1 or self.values.numel() == 0:
            raise DimensionError(f"template must be a non-empty vector, got {tuple(self.values.shape)}")
        if not bool(torch.isfinite(self.values).all()):
            raise RangeError("template contains non-finite entries")

    @property
    def d(self) -> int:
        return int(self.values.numel())

    @classmethod
    def from_values(cls, values: TensorLike, unit_norm: bool = False) -> "FacialTemplate":
        """
        Build a template, optionally checking the unit-norm contract.

        Args:
            values: Vector of length d
            unit_norm: Require an L2 norm of 1 within 1e-5

        Returns:
            FacialTemplate
        """
        template = cls(_as_float_tensor(values).reshape(-1))
        if unit_norm:
            norm = float(template.values.double().norm())
            if abs(norm - 1.0) > 1e-5:
                raise RangeError(f"template norm {norm:.6f} violates unit-norm contract")
        return template


@dataclass(frozen=True, eq=False)
class ComponentMask:
    """Boolean H×W mask for one facial component."""
    bits: torch.Tensor
    component: Component
    detection_failure: bool = False

    def __post_init__(self):
        if self.bits.dim() != 2:
            raise DimensionError(f"mask must be (H, W), got {tuple(self.bits.shape)}")
        if self.bits.dtype != torch.bool:
            object.__setattr__(self, "bits", self.bits.to(torch.bool))
        if not self.detection_failure and not bool(self.bits.any()):
            raise DataError(f"{self.component.value} mask is empty but not tagged as a detection failure")

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.bits.shape[0]), int(self.bits.shape[1])

    @classmethod
    def empty(cls, component: Component, height: int, width: int) -> "ComponentMask":
        """All-false mask tagged as a detection failure."""
        return cls(torch.zeros(height, width, dtype=torch.bool), component, detection_failure=True)


@dataclass(frozen=True, eq=False)
class LayerBundle:
    """Masked layer targets, their masks, and the full panorama target for one face."""
    layers: Dict[Component, FaceImage]
    masks: Dict[Component, ComponentMask]
    panorama: FaceImage

    def __post_init__(self):
        expected = set(COMPONENTS)
        if set(self.layers) != expected or set(self.masks) != expected:
            raise ArityError("bundle must hold exactly eyebrows, eyes, nose, mouth and skin")
        for component in COMPONENTS:
            layer = self.layers[component].pixels
            outside = ~self.masks[component].bits
            if bool((layer[outside] != 0).any()):
                raise RangeError(f"{component.value} layer has nonzero pixels outside its mask")

    def stacked_layers(self) -> torch.Tensor:
        """(5, 3, H, W) layer targets in COMPONENTS order."""
        return torch.stack([self.layers[c].to_chw() for c in COMPONENTS])

    def stacked_masks(self) -> torch.Tensor:
        """(5, H, W) boolean masks in COMPONENTS order."""
        return torch.stack([self.masks[c].bits for c in COMPONENTS])

    def foreground_union(self) -> torch.Tensor:
        union = torch.zeros_like(self.masks[Component.SKIN].bits)
        for component in FOREGROUND:
            union |= self.masks[component].bits
        return union


@dataclass(frozen=True, eq=False)
class AttributeVector:
    """40 attribute probabilities."""
    probs: torch.Tensor

    def __post_init__(self):
        if self.probs.shape != (ATTRIBUTE_COUNT,):
            raise DimensionError(f"attribute vector must have length {ATTRIBUTE_COUNT}, got {tuple(self.probs.shape)}")
        if bool(((self.probs < 0) | (self.probs > 1) | torch.isnan(self.probs)).any()):
            raise RangeError("attribute probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class SubjectRecord:
    """One subject and the ordered identifiers of its images."""
    subject_id: str
    image_refs: Tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "image_refs", tuple(self.image_refs))
        if not self.image_refs:
            raise DataError(f"subject {self.subject_id!r} has no images")
        if len(set(self.image_refs)) != len(self.image_refs):
            raise DataError(f"subject {self.subject_id!r} lists duplicate image identifiers")


def apply_mask(image: FaceImage, mask: ComponentMask) -> FaceImage:
    """
    Keep pixels inside the mask and zero everything else.

    Args:
        image: Source image
        mask: Component mask with the same (H, W)

    Returns:
        Masked image with the same shape
    """
    if (image.height, image.width) != mask.shape:
        raise DimensionError(
            f"image is {image.height}x{image.width} but mask is {mask.shape[0]}x{mask.shape[1]}"
        )
    keep = mask.bits.unsqueeze(-1)
    return FaceImage(torch.where(keep, image.pixels, torch.zeros_like(image.pixels)))


def validate_face_image(pixels: TensorLike) -> FaceImage:
    """
    Validate an (H, H, 3) tensor and wrap it as a FaceImage.

    Args:
        pixels: Candidate pixel tensor in [-1, 1]

    Returns:
        FaceImage
    """
    tensor = _as_float_tensor(pixels)
    if tensor.dim() != 3 or tensor.shape[2] != 3:
        raise DimensionError(f"expected (H, W, 3), got {tuple(tensor.shape)}")
    height, width = int(tensor.shape[0]), int(tensor.shape[1])
    if height != width or not is_power_of_two(height) or height < MIN_RESOLUTION:
        raise DimensionError(f"resolution {height}x{width} must be square, a power of two and >= {MIN_RESOLUTION}")
    if bool(torch.isnan(tensor).any()) or bool(((tensor < -1) | (tensor > 1)).any()):
        raise RangeError("pixel values must lie in [-1, 1]")
    return FaceImage(tensor)

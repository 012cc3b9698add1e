"""
Layer-specific generators and the panorama generator.
Foreground/midground generators upsample a template into one masked layer;
the panorama generator fuses the five layers with the template into a face.
"""
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn

from config.config import AblationFlags
from inverter.domain import COMPONENTS, FOREGROUND, Component, FaceImage, FacialTemplate
from inverter.errors import ArityError, CheckpointFormatError, DimensionError
from inverter.interchange import load_archive, save_archive

CHECKPOINT_FORMAT = "layered-inverter/1"
MIN_CHANNELS = 4
LAYER_COUNT = len(COMPONENTS)


def upsampling_steps(resolution: int) -> int:
    """Number of 2x steps between the 4x4 seed map and the output resolution."""
    steps = int(math.log2(resolution)) - 2
    if 4 * 2 ** steps != resolution or steps < 3:
        raise DimensionError(f"resolution {resolution} must be a power of two >= 32")
    return steps


@dataclass
class ChannelSchedule:
    """Channel counts for every generator block."""
    fore: List[int] = field(default_factory=lambda: [256, 128, 64, 32, 16])
    encoder: List[int] = field(default_factory=lambda: [64, 128, 256, 512, 512])
    template_map: int = 64
    fusion: int = 512
    decoder: List[int] = field(default_factory=lambda: [256, 128, 64, 32, 16])

    @classmethod
    def for_resolution(cls, resolution: int, width_divisor: int = 1) -> "ChannelSchedule":
        """
        Standard halving/doubling pyramid, scaled down by width_divisor.

        Args:
            resolution: Output resolution (power of two >= 32)
            width_divisor: Divides every channel count

        Returns:
            ChannelSchedule with one entry per block
        """
        steps = upsampling_steps(resolution)

        def scale(c: int) -> int:
            return max(c // width_divisor, MIN_CHANNELS)

        fusion = scale(512)
        return cls(
            fore=[scale(256 >> k) for k in range(steps)],
            encoder=[scale(min(64 << k, 512)) for k in range(steps)],
            template_map=scale(64),
            fusion=fusion,
            decoder=[max(fusion >> (k + 1), MIN_CHANNELS) for k in range(steps)],
        )


class FreezableModule(nn.Module):
    """Module whose frozen state also pins batch-norm running statistics."""

    def __init__(self):
        super().__init__()
        self.trainable = True

    def train(self, mode: bool = True):
        return super().train(mode and self.trainable)


def set_trainable(gen: FreezableModule, flag: bool):
    """
    Freeze or unfreeze a generator.

    A frozen generator gets no gradients and stays in inference mode, so
    neither its parameters nor its running statistics can change.

    Args:
        gen: Generator to toggle
        flag: True to unfreeze, False to freeze
    """
    gen.trainable = flag
    for param in gen.parameters():
        param.requires_grad_(flag)
    if not flag:
        gen.eval()


class TemplateMapper(nn.Module):
    """Linear -> BatchNorm -> ReLU, reshaped to a (C, 4, 4) map."""

    def __init__(self, template_dim: int, channels: int):
        super().__init__()
        self.template_dim = template_dim
        self.channels = channels
        self.linear = nn.Linear(template_dim, channels * 16)
        self.norm = nn.BatchNorm1d(channels * 16)
        self.act = nn.ReLU(inplace=True)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        if t.dim() != 2 or t.shape[1] != self.template_dim:
            raise DimensionError(f"expected (N, {self.template_dim}) templates, got {tuple(t.shape)}")
        return self.act(self.norm(self.linear(t))).view(-1, self.channels, 4, 4)


class ForeBlock(nn.Module):
    """2x nearest upsample -> 3x3 conv -> BatchNorm -> ReLU."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        self.norm = nn.BatchNorm2d(out_channels)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(self.up(x))))


class ForeBlockOut(nn.Module):
    """2x nearest upsample -> 3x3 conv to RGB -> Tanh."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv = nn.Conv2d(in_channels, 3, kernel_size=3, padding=1)
        self.act = nn.Tanh()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.conv(self.up(x)))


# The midground generator shares the foreground block design.
MidBlock = ForeBlock
MidBlockOut = ForeBlockOut


class LayerGenerator(FreezableModule):
    """Template mapper, upsampling blocks and a Tanh output block."""

    def __init__(self, component: Component, template_dim: int, resolution: int, channels: Sequence[int]):
        super().__init__()
        steps = upsampling_steps(resolution)
        if len(channels) != steps:
            raise DimensionError(f"{component.value} generator needs {steps} channel entries, got {len(channels)}")
        self.component = component
        self.template_dim = template_dim
        self.resolution = resolution
        self.mapper = TemplateMapper(template_dim, channels[0])
        self.blocks = nn.ModuleList(
            ForeBlock(channels[k], channels[k + 1]) for k in range(steps - 1)
        )
        self.out_block = ForeBlockOut(channels[-1])

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        h = self.mapper(t)
        for block in self.blocks:
            h = block(h)
        return self.out_block(h)

    def trajectory(self, t: torch.Tensor) -> List[int]:
        """Spatial size after the mapper and after every block."""
        h = self.mapper(t)
        sizes = [h.shape[-1]]
        for block in list(self.blocks) + [self.out_block]:
            h = block(h)
            sizes.append(h.shape[-1])
        return sizes


class ForegroundGenerator(LayerGenerator):
    """Generator for one foreground component (eyebrows, eyes, nose or mouth)."""

    def __init__(self, component: Component, template_dim: int = 512, resolution: int = 128,
                 channels: Optional[Sequence[int]] = None):
        if component not in FOREGROUND:
            raise ValueError(f"{component.value} is not a foreground component")
        channels = channels or ChannelSchedule.for_resolution(resolution).fore
        super().__init__(component, template_dim, resolution, channels)


class MidgroundGenerator(LayerGenerator):
    """Generator for the skin layer."""

    def __init__(self, template_dim: int = 512, resolution: int = 128, channels: Optional[Sequence[int]] = None):
        channels = channels or ChannelSchedule.for_resolution(resolution).fore
        super().__init__(Component.SKIN, template_dim, resolution, channels)


class EncoderBlock(nn.Module):
    """Stride-2 3x3 conv -> BatchNorm -> ReLU."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=2, padding=1)
        self.norm = nn.BatchNorm2d(out_channels)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


class FusionBlock(nn.Module):
    """3x3 conv -> BatchNorm -> ReLU at 4x4."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        self.norm = nn.BatchNorm2d(out_channels)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


class ResidualPair(nn.Module):
    """Two pre-activation BatchNorm -> ReLU -> conv units."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm1 = nn.BatchNorm2d(channels)
        self.conv1 = nn.Conv2d(channels, channels, kernel_size=3, padding=1, bias=False)
        self.norm2 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, kernel_size=3, padding=1, bias=False)
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        return self.conv2(self.act(self.norm2(h)))


class PanoBlock(nn.Module):
    """
    Stride-2 deconvolution followed by two residual pairs.

    Each pair has an identity skip, and a block-level skip averages the
    deconvolution output into the block output. With every convolution
    weight zeroed the block reduces to the deconvolution alone.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(in_channels, out_channels, kernel_size=4, stride=2, padding=1)
        self.pair1 = ResidualPair(out_channels)
        self.pair2 = ResidualPair(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.deconv(x)
        a = h + self.pair1(h)
        b = a + self.pair2(a)
        return 0.5 * (b + h)


class PanoBlockOut(nn.Module):
    """Parallel 1x1, 3x3, 5x5 and 7x7 convolutions, summed, then Tanh."""

    KERNELS = (1, 3, 5, 7)

    def __init__(self, in_channels: int):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Conv2d(in_channels, 3, kernel_size=k, padding=k // 2) for k in self.KERNELS
        )
        self.act = nn.Tanh()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(sum(branch(x) for branch in self.branches))


class PanoramaGenerator(FreezableModule):
    """Encodes the five layers to 4x4, fuses the template map, decodes a full face."""

    def __init__(self, template_dim: int = 512, resolution: int = 128,
                 schedule: Optional[ChannelSchedule] = None, use_layers: bool = True):
        super().__init__()
        schedule = schedule or ChannelSchedule.for_resolution(resolution)
        steps = upsampling_steps(resolution)
        if len(schedule.encoder) != steps or len(schedule.decoder) != steps:
            raise DimensionError(f"panorama generator needs {steps} encoder and decoder entries")
        self.template_dim = template_dim
        self.resolution = resolution
        self.use_layers = use_layers
        self.template_channels = schedule.template_map
        self.mapper = TemplateMapper(template_dim, schedule.template_map)

        if use_layers:
            encoder_in = [3 * LAYER_COUNT] + schedule.encoder[:-1]
            self.encoder = nn.ModuleList(
                EncoderBlock(c_in, c_out) for c_in, c_out in zip(encoder_in, schedule.encoder)
            )
            fusion_in = schedule.encoder[-1] + schedule.template_map
        else:
            self.encoder = nn.ModuleList()
            fusion_in = schedule.template_map
        self.fusion = nn.ModuleList([
            FusionBlock(fusion_in, schedule.fusion),
            FusionBlock(schedule.fusion, schedule.fusion),
        ])

        decoder_in = [schedule.fusion] + schedule.decoder[:-1]
        self.decoder = nn.ModuleList(
            PanoBlock(c_in, c_out) for c_in, c_out in zip(decoder_in, schedule.decoder)
        )
        self.out_block = PanoBlockOut(schedule.decoder[-1])

    def encode(self, layers: torch.Tensor) -> torch.Tensor:
        """(N, 5, 3, H, W) or (N, 15, H, W) layers -> (N, C, 4, 4) facial map."""
        if layers.dim() == 5:
            if layers.shape[1] != LAYER_COUNT:
                raise ArityError(f"expected {LAYER_COUNT} layers, got {layers.shape[1]}")
            layers = layers.flatten(1, 2)
        if layers.dim() != 4 or layers.shape[1] != 3 * LAYER_COUNT:
            raise ArityError(f"expected {3 * LAYER_COUNT} input channels, got {tuple(layers.shape)}")
        h = layers
        for block in self.encoder:
            h = block(h)
        return h

    def forward(self, layers: Optional[torch.Tensor], t: torch.Tensor, inject_template: bool = True) -> torch.Tensor:
        if t.dim() != 2 or t.shape[1] != self.template_dim:
            raise DimensionError(f"expected (N, {self.template_dim}) templates, got {tuple(t.shape)}")
        if inject_template:
            template_map = self.mapper(t)
        else:
            template_map = t.new_zeros(t.shape[0], self.template_channels, 4, 4)

        if self.use_layers:
            if layers is None:
                raise ArityError("panorama generator built with EncoderBlocks needs layer input")
            h = torch.cat([self.encode(layers), template_map], dim=1)
        else:
            h = template_map

        h = self.fusion[1](self.fusion[0](h))
        for block in self.decoder:
            h = block(h)
        return self.out_block(h)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _template_batch(t: Union[FacialTemplate, torch.Tensor], template_dim: int) -> torch.Tensor:
    values = t.values if isinstance(t, FacialTemplate) else t
    if values.dim() == 1:
        values = values.unsqueeze(0)
    if values.shape[-1] != template_dim:
        raise DimensionError(f"template has d={values.shape[-1]}, generator expects d={template_dim}")
    return values


def _device_of(module: nn.Module) -> torch.device:
    return next(module.parameters()).device


def generate_layer(gen: LayerGenerator, t: Union[FacialTemplate, torch.Tensor]) -> FaceImage:
    """
    Generate one layer from a template in inference mode.

    Args:
        gen: Foreground or midground generator
        t: Template of dimension gen.template_dim

    Returns:
        FaceImage of shape (R, R, 3)
    """
    values = _template_batch(t, gen.template_dim).to(_device_of(gen))
    was_training = gen.training
    gen.eval()
    try:
        with torch.no_grad():
            out = gen(values)[0]
    finally:
        gen.train(was_training)
    return FaceImage.from_chw(out.cpu())


def generate_panorama(gen: PanoramaGenerator, layers: Sequence[FaceImage],
                      t: Union[FacialTemplate, torch.Tensor], inject_template: bool = True) -> FaceImage:
    """
    Fuse five layers and a template into a full face in inference mode.

    Args:
        gen: Panorama generator
        layers: Five layer images in COMPONENTS order
        t: Template of dimension gen.template_dim
        inject_template: False replaces the template map with zeros

    Returns:
        FaceImage of shape (R, R, 3)
    """
    if len(layers) != LAYER_COUNT:
        raise ArityError(f"expected {LAYER_COUNT} layers, got {len(layers)}")
    device = _device_of(gen)
    stacked = torch.stack([layer.to_chw() for layer in layers]).unsqueeze(0).to(device)
    values = _template_batch(t, gen.template_dim).to(device)
    was_training = gen.training
    gen.eval()
    try:
        with torch.no_grad():
            out = gen(stacked if gen.use_layers else None, values, inject_template=inject_template)[0]
    finally:
        gen.train(was_training)
    return FaceImage.from_chw(out.cpu())


class LayeredInverter(nn.Module):
    """Complete inverter G(t): layer generators plus the panorama generator."""

    def __init__(self, template_dim: int = 512, resolution: int = 128,
                 schedule: Optional[ChannelSchedule] = None, flags: Optional[AblationFlags] = None):
        super().__init__()
        self.template_dim = template_dim
        self.resolution = resolution
        self.schedule = schedule or ChannelSchedule.for_resolution(resolution)
        self.flags = flags or AblationFlags()

        self.layer_generators = nn.ModuleDict()
        if self.flags.f_s1:
            for component in FOREGROUND:
                self.layer_generators[component.value] = ForegroundGenerator(
                    component, template_dim, resolution, self.schedule.fore
                )
        if self.flags.m_s1:
            self.layer_generators[Component.SKIN.value] = MidgroundGenerator(
                template_dim, resolution, self.schedule.fore
            )

        self.panorama = None
        if self.flags.s2:
            self.panorama = PanoramaGenerator(
                template_dim, resolution, self.schedule, use_layers=len(self.layer_generators) > 0
            )

    def generators(self) -> Dict[str, FreezableModule]:
        """Name -> generator for every generator present."""
        gens: Dict[str, FreezableModule] = dict(self.layer_generators.items())
        if self.panorama is not None:
            gens["panorama"] = self.panorama
        return gens

    def generate_layers(self, t: torch.Tensor) -> torch.Tensor:
        """(N, 5, 3, R, R) layers; components without a generator are zeros."""
        layers = []
        for component in COMPONENTS:
            gen = self.layer_generators[component.value] if component.value in self.layer_generators else None
            if gen is None:
                layers.append(t.new_zeros(t.shape[0], 3, self.resolution, self.resolution))
            else:
                layers.append(gen(t))
        return torch.stack(layers, dim=1)

    def compose(self, layers: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Panorama from layers, or clipped layer superposition without a panorama generator."""
        if self.panorama is None:
            return torch.clamp(layers.sum(dim=1), -1.0, 1.0)
        return self.panorama(layers if self.panorama.use_layers else None, t, inject_template=self.flags.ft_s2)

    def forward(self, t: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if t.dim() != 2 or t.shape[1] != self.template_dim:
            raise DimensionError(f"expected (N, {self.template_dim}) templates, got {tuple(t.shape)}")
        layers = self.generate_layers(t)
        return layers, self.compose(layers, t)

    def invert(self, t: Union[FacialTemplate, torch.Tensor]) -> torch.Tensor:
        """Inference-mode reconstruction of a template batch -> (N, 3, R, R)."""
        values = _template_batch(t, self.template_dim).to(_device_of(self))
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                _, panorama = self(values)
        finally:
            self.train(was_training)
        return panorama


def save_checkpoint(model: LayeredInverter, path: Union[str, Path], stage: int, seed: int,
                    extra: Optional[dict] = None) -> Path:
    """
    Write all generators and a manifest to one archive.

    Args:
        model: Inverter to save
        path: Destination file
        stage: Stage tag (1, 2 or 3)
        seed: Run seed
        extra: Additional manifest entries

    Returns:
        Path written
    """
    if stage not in (1, 2, 3):
        raise ValueError(f"stage tag must be 1, 2 or 3, got {stage}")
    gens = model.generators()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "template_dim": model.template_dim,
        "resolution": model.resolution,
        "schedule": asdict(model.schedule),
        "flags": asdict(model.flags),
        "stage": stage,
        "seed": seed,
        "generators": list(gens),
    }
    if extra:
        manifest.update(extra)
    state = {name: gen.state_dict() for name, gen in gens.items()}
    return save_archive({"manifest": manifest, "state": state}, path)


def load_checkpoint(path: Union[str, Path], template_dim: Optional[int] = None,
                    device: str = "cpu") -> Tuple[LayeredInverter, dict]:
    """
    Rebuild an inverter from a checkpoint.

    Args:
        path: Checkpoint written by save_checkpoint
        template_dim: Expected template dimension, checked when given
        device: Torch device string

    Returns:
        Tuple of (model, manifest)
    """
    try:
        payload = load_archive(path)
        manifest = payload["manifest"]
        state = payload["state"]
    except Exception as e:  # unpickling garbage raises assorted error types
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {e}", "manifest")
    if not isinstance(manifest, dict) or manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointFormatError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint", "manifest")
    if template_dim is not None and manifest["template_dim"] != template_dim:
        raise DimensionError(
            f"checkpoint was trained for d={manifest['template_dim']}, templates have d={template_dim}"
        )

    model = LayeredInverter(
        template_dim=manifest["template_dim"],
        resolution=manifest["resolution"],
        schedule=ChannelSchedule(**manifest["schedule"]),
        flags=AblationFlags(**manifest["flags"]),
    )
    gens = model.generators()
    if set(gens) != set(state):
        missing = sorted(set(gens) ^ set(state))
        raise CheckpointFormatError("generator set does not match manifest", missing[0])
    for name, gen in gens.items():
        expected = gen.state_dict()
        stored = state[name]
        for key, value in expected.items():
            if key not in stored or tuple(stored[key].shape) != tuple(value.shape):
                raise CheckpointFormatError("parameter missing or misshapen", f"{name}.{key}")
        for key in stored:
            if key not in expected:
                raise CheckpointFormatError("unexpected parameter", f"{name}.{key}")
        gen.load_state_dict(stored)
    return model.to(device).eval(), manifest

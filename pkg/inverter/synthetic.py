"""
Seeded synthetic faces with exact ground-truth component masks.
Geometry is drawn per identity seed; each image adds a bounded jitter draw on top.
"""
from dataclasses import dataclass
from typing import Iterator, Tuple

import cv2
import numpy as np

from inverter.domain import MIN_RESOLUTION, Component, FaceImage, LayerBundle, is_power_of_two, validate_face_image
from inverter.errors import DimensionError
from inverter.masks import LANDMARK_COUNT, LandmarkSet, make_layer_bundle, masks_from_landmarks

SKIN_TONES = np.array([
    [241, 204, 178],
    [224, 172, 140],
    [198, 140, 105],
    [160, 110, 80],
    [110, 75, 55],
], dtype=np.float64)

NOISE_AMPLITUDE = 3.0


@dataclass(frozen=True)
class SyntheticFaceSpec:
    """One synthetic face: an identity plus a bounded jitter draw."""
    identity_seed: int
    jitter_seed: int = 0
    max_shift_px: float = 2.0
    max_color_jitter: float = 0.06


@dataclass(frozen=True)
class FaceGeometry:
    """Identity-level shape and colour parameters; lengths are fractions of the image side."""
    center: Tuple[float, float]
    face_axes: Tuple[float, float]
    eye_y: float
    eye_spacing: float
    eye_axes: Tuple[float, float]
    brow_lift: float
    brow_half_length: float
    brow_arch: float
    nose_bottom: float
    nose_half_width: float
    mouth_y: float
    mouth_half_width: float
    lip_heights: Tuple[float, float]
    skin: Tuple[float, float, float]
    hair: Tuple[float, float, float]
    brow: Tuple[float, float, float]
    iris: Tuple[float, float, float]
    lips: Tuple[float, float, float]
    background: Tuple[float, float, float]


def _colour(rng: np.random.Generator, low: int, high: int) -> Tuple[float, float, float]:
    return tuple(float(v) for v in rng.uniform(low, high, size=3))


def face_geometry(identity_seed: int) -> FaceGeometry:
    """Draw the identity-level parameters; a pure function of the seed."""
    rng = np.random.default_rng(identity_seed)
    cx = 0.5 + rng.uniform(-0.02, 0.02)
    cy = 0.53 + rng.uniform(-0.02, 0.02)
    fw = rng.uniform(0.27, 0.33)
    fh = rng.uniform(0.33, 0.39)
    ew = fw * rng.uniform(0.16, 0.21)
    eh = ew * rng.uniform(0.40, 0.60)
    tone = SKIN_TONES[rng.integers(0, len(SKIN_TONES))] + rng.uniform(-12, 12, size=3)
    return FaceGeometry(
        center=(cx, cy),
        face_axes=(fw, fh),
        eye_y=cy - fh * rng.uniform(0.18, 0.26),
        eye_spacing=fw * rng.uniform(0.40, 0.50),
        eye_axes=(ew, eh),
        brow_lift=eh + fh * rng.uniform(0.10, 0.16),
        brow_half_length=ew * rng.uniform(1.0, 1.3),
        brow_arch=fh * rng.uniform(0.02, 0.05),
        nose_bottom=cy + fh * rng.uniform(0.14, 0.22),
        nose_half_width=fw * rng.uniform(0.13, 0.20),
        mouth_y=cy + fh * rng.uniform(0.44, 0.54),
        mouth_half_width=fw * rng.uniform(0.30, 0.42),
        lip_heights=(fh * rng.uniform(0.05, 0.08), fh * rng.uniform(0.06, 0.10)),
        skin=tuple(float(v) for v in np.clip(tone, 0, 255)),
        hair=_colour(rng, 10, 120),
        brow=_colour(rng, 10, 80),
        iris=_colour(rng, 20, 160),
        lips=(float(rng.uniform(150, 210)), float(rng.uniform(50, 100)), float(rng.uniform(60, 110))),
        background=_colour(rng, 40, 230),
    )


def jitter_shift(spec: SyntheticFaceSpec, size: int) -> np.ndarray:
    """Pixel (dx, dy) of one jitter draw; the bound is stated at 128x128 and scales with size."""
    rng = np.random.default_rng([spec.identity_seed, spec.jitter_seed, 0])
    return rng.uniform(-spec.max_shift_px, spec.max_shift_px, size=2) * (size / 128.0)


def _ellipse_points(center: Tuple[float, float], axes: Tuple[float, float], angles: np.ndarray) -> np.ndarray:
    # image y grows downward, so positive angles go up
    return np.stack([center[0] + axes[0] * np.cos(angles), center[1] - axes[1] * np.sin(angles)], axis=1)


def synthetic_landmarks(geometry: FaceGeometry, spec: SyntheticFaceSpec, size: int) -> LandmarkSet:
    """
    Place 68 landmarks for one jitter draw.

    Args:
        geometry: Identity-level parameters
        spec: Jitter draw
        size: Image side in pixels

    Returns:
        LandmarkSet clipped to the image
    """
    g = geometry
    cx, cy = g.center
    fw, fh = g.face_axes
    points = np.zeros((LANDMARK_COUNT, 2), dtype=np.float64)

    # jaw: lower half of the face oval, image-left ear through the chin
    jaw = np.arange(17) * np.pi / 16
    points[0:17] = np.stack([cx - fw * np.cos(jaw), cy + fh * np.sin(jaw)], axis=1)

    s = np.linspace(0.0, 1.0, 5)
    brow_y = g.eye_y - g.brow_lift
    for start, ex in ((17, cx - g.eye_spacing), (22, cx + g.eye_spacing)):
        points[start:start + 5, 0] = ex - g.brow_half_length + 2 * g.brow_half_length * s
        points[start:start + 5, 1] = brow_y - g.brow_arch * np.sin(np.pi * s)

    bridge_top = g.eye_y
    bridge_bottom = g.nose_bottom - 0.25 * (g.nose_bottom - g.eye_y)
    points[27:31, 0] = cx
    points[27:31, 1] = np.linspace(bridge_top, bridge_bottom, 4)
    points[31:36, 0] = cx + g.nose_half_width * np.linspace(-1.0, 1.0, 5)
    points[31:36, 1] = g.nose_bottom + 0.02 * fh * np.array([0.0, 0.5, 1.0, 0.5, 0.0])

    eye_angles = np.array([np.pi, 2 * np.pi / 3, np.pi / 3, 0.0, -np.pi / 3, -2 * np.pi / 3])
    points[36:42] = _ellipse_points((cx - g.eye_spacing, g.eye_y), g.eye_axes, eye_angles)
    points[42:48] = _ellipse_points((cx + g.eye_spacing, g.eye_y), g.eye_axes, eye_angles)

    lip_angles = np.pi - np.arange(12) * np.pi / 6
    upper, lower = g.lip_heights
    heights = np.where(np.sin(lip_angles) >= 0, upper, lower)
    points[48:60, 0] = cx + g.mouth_half_width * np.cos(lip_angles)
    points[48:60, 1] = g.mouth_y - heights * np.sin(lip_angles)
    inner_angles = np.pi - np.arange(8) * np.pi / 4
    points[60:68] = _ellipse_points((cx, g.mouth_y), (0.7 * g.mouth_half_width, 0.3 * upper), inner_angles)

    pixels = np.clip(points * size + jitter_shift(spec, size), 0, size - 1)
    return LandmarkSet(pixels)


def _render(geometry: FaceGeometry, lm: LandmarkSet, masks: dict, spec: SyntheticFaceSpec, size: int) -> np.ndarray:
    g = geometry
    rng = np.random.default_rng([spec.identity_seed, spec.jitter_seed, 1])
    colour_gain = 1.0 + rng.uniform(-spec.max_color_jitter, spec.max_color_jitter, size=3)
    offset = jitter_shift(spec, size)

    canvas = np.empty((size, size, 3), dtype=np.float32)
    ramp = np.linspace(1.0, 0.8, size)[:, None, None]
    canvas[:] = np.array(g.background) * ramp

    def ellipse(center, axes, colour):
        c = (int(round(center[0] * size + offset[0])), int(round(center[1] * size + offset[1])))
        a = (max(1, int(round(axes[0] * size))), max(1, int(round(axes[1] * size))))
        cv2.ellipse(canvas, c, a, 0, 0, 360, colour, -1)

    cx, cy = g.center
    fw, fh = g.face_axes
    ellipse((cx, cy - 0.3 * fh), (1.12 * fw, 0.9 * fh), g.hair)
    ellipse((cx, cy), (fw, fh), g.skin)

    # vertical shading on the face oval
    ys = (np.arange(size) - (cy * size + offset[1])) / (fh * size)
    shade = (1.0 - 0.12 * np.clip(ys, -1, 1))[:, None, None]
    face = np.zeros((size, size), dtype=np.uint8)
    cv2.ellipse(face, (int(round(cx * size + offset[0])), int(round(cy * size + offset[1]))),
                (max(1, int(round(fw * size))), max(1, int(round(fh * size)))), 0, 0, 360, 1, -1)
    canvas = np.where(face[..., None] > 0, canvas * shade, canvas)

    paint = {
        Component.EYEBROWS: np.array(g.brow),
        Component.NOSE: np.array(g.skin) * 0.85,
        Component.MOUTH: np.array(g.lips),
    }
    for component, colour in paint.items():
        bits = masks[component].bits.numpy()
        canvas[bits] = colour

    eyes = masks[Component.EYES].bits.numpy()
    canvas[eyes] = (235.0, 235.0, 228.0)
    iris = np.zeros((size, size), dtype=np.uint8)
    iris_radius = max(1, int(round(0.8 * g.eye_axes[1] * size)))
    for start in (36, 42):
        centre = lm.points[start:start + 6].mean(axis=0)
        cv2.circle(iris, (int(round(centre[0])), int(round(centre[1]))), iris_radius, 1, -1)
    canvas[eyes & (iris > 0)] = g.iris

    canvas = canvas * colour_gain + rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=canvas.shape)
    return np.clip(np.round(canvas), 0, 255).astype(np.uint8)


def generate_synthetic_face(spec: SyntheticFaceSpec, size: int) -> Tuple[FaceImage, LayerBundle, str]:
    """
    Render one synthetic face.

    Args:
        spec: Identity and jitter draw
        size: Image side, a power of two >= 32

    Returns:
        (image, ground-truth layer bundle, subject id)
    """
    if not is_power_of_two(size) or size < MIN_RESOLUTION:
        raise DimensionError(f"resolution {size} must be a power of two >= {MIN_RESOLUTION}")
    geometry = face_geometry(spec.identity_seed)
    lm = synthetic_landmarks(geometry, spec, size)
    masks = masks_from_landmarks(lm, size, size)
    rgb = _render(geometry, lm, masks, spec, size)
    image = validate_face_image(rgb.astype(np.float32) / 127.5 - 1.0)
    return image, make_layer_bundle(image, masks), subject_id_for(spec.identity_seed)


def synthetic_face_landmarks(spec: SyntheticFaceSpec, size: int) -> LandmarkSet:
    """Landmarks of the face generate_synthetic_face renders for the same arguments."""
    return synthetic_landmarks(face_geometry(spec.identity_seed), spec, size)


def subject_id_for(identity_seed: int) -> str:
    return f"subject_{identity_seed:05d}"


def identity_seeds(seed: int, n_subjects: int) -> list:
    """Identity seeds of a dataset; disjoint across dataset seeds."""
    return [seed * 100_000 + i for i in range(n_subjects)]


def iter_synthetic_dataset(seed: int, n_subjects: int, images_per_subject: int, size: int,
                           max_shift_px: float = 2.0,
                           max_color_jitter: float = 0.06) -> Iterator[Tuple[SyntheticFaceSpec, FaceImage, LayerBundle, str]]:
    """Yield every (spec, image, bundle, subject id) of a seeded fixture dataset in order."""
    for identity_seed in identity_seeds(seed, n_subjects):
        for jitter_seed in range(images_per_subject):
            spec = SyntheticFaceSpec(identity_seed, jitter_seed, max_shift_px, max_color_jitter)
            image, bundle, subject_id = generate_synthetic_face(spec, size)
            yield spec, image, bundle, subject_id

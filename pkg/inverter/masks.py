"""
Landmark-driven component masks and supervision layer bundles.
Masks follow the standard 68-point annotation scheme.
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Mapping, Union

import cv2
import numpy as np
import torch

from inverter.domain import COMPONENTS, FOREGROUND, Component, ComponentMask, FaceImage, LayerBundle, apply_mask
from inverter.errors import ArityError, DataError, DetectionFailure, DimensionError, RangeError
from inverter.plugins import register_plugin

LANDMARK_COUNT = 68

RIGHT_BROW = slice(17, 22)
LEFT_BROW = slice(22, 27)
NOSE = slice(27, 36)
RIGHT_EYE = slice(36, 42)
LEFT_EYE = slice(42, 48)
OUTER_LIP = slice(48, 60)

# Brow dilation radius at 128x128, scaled with resolution.
BROW_RADIUS_AT_128 = 2

# Contested pixels go to the first component listed.
FOREGROUND_PRECEDENCE = (Component.EYES, Component.MOUTH, Component.NOSE, Component.EYEBROWS)


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """68 (x, y) pixel coordinates."""
    points: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.shape != (LANDMARK_COUNT, 2):
            raise ArityError(f"expected {LANDMARK_COUNT} (x, y) points, got shape {points.shape}")
        if not np.isfinite(points).all():
            raise RangeError("landmarks contain non-finite coordinates")
        object.__setattr__(self, "points", points)

    def check_bounds(self, height: int, width: int):
        x, y = self.points[:, 0], self.points[:, 1]
        if (x < 0).any() or (y < 0).any() or (x > width - 1).any() or (y > height - 1).any():
            raise RangeError(f"landmarks fall outside a {height}x{width} image")


def brow_radius(height: int) -> int:
    return max(1, int(round(BROW_RADIUS_AT_128 * height / 128)))


def _polygon_area(points: np.ndarray) -> float:
    return float(cv2.contourArea(points.astype(np.float32)))


def _fill_polygon(canvas: np.ndarray, points: np.ndarray):
    cv2.fillPoly(canvas, [points.reshape(-1, 1, 2)], 1)


def _to_mask(canvas: np.ndarray, component: Component, failed: bool) -> ComponentMask:
    bits = torch.from_numpy(canvas.astype(bool))
    if failed or not bool(bits.any()):
        return ComponentMask.empty(component, canvas.shape[0], canvas.shape[1])
    return ComponentMask(bits, component)


def masks_from_landmarks(lm: LandmarkSet, height: int, width: int) -> Dict[Component, ComponentMask]:
    """
    Build the five component masks from 68 landmarks.

    Eyebrows are dilated brow polylines, eyes/mouth are filled polygons, the
    nose is the filled hull of its nine points, and skin is the face hull
    minus every foreground mask. Foreground masks are pairwise disjoint: a
    pixel claimed by two components keeps the one earlier in
    FOREGROUND_PRECEDENCE, which is also the order the synthetic renderer
    paints last to first. Zero-area geometry yields an all-false mask
    tagged as a detection failure.

    Args:
        lm: Landmark set
        height: Image height in pixels
        width: Image width in pixels

    Returns:
        Component -> ComponentMask
    """
    lm.check_bounds(height, width)
    pts = np.round(lm.points).astype(np.int32)
    hull = cv2.convexHull(pts)
    if _polygon_area(hull.reshape(-1, 2)) == 0.0:
        return {c: ComponentMask.empty(c, height, width) for c in COMPONENTS}

    canvases = {c: np.zeros((height, width), dtype=np.uint8) for c in COMPONENTS}
    failed = {c: False for c in COMPONENTS}

    brows = [pts[RIGHT_BROW], pts[LEFT_BROW]]
    brow_length = sum(float(np.linalg.norm(np.diff(b, axis=0), axis=1).sum()) for b in brows)
    if brow_length == 0.0:
        failed[Component.EYEBROWS] = True
    else:
        cv2.polylines(canvases[Component.EYEBROWS], [b.reshape(-1, 1, 2) for b in brows], False, 1, thickness=1)
        r = brow_radius(height)
        kernel = cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (2 * r + 1, 2 * r + 1))
        canvases[Component.EYEBROWS] = cv2.dilate(canvases[Component.EYEBROWS], kernel)

    eyes = [eye for eye in (pts[RIGHT_EYE], pts[LEFT_EYE]) if _polygon_area(eye) > 0]
    if not eyes:
        failed[Component.EYES] = True
    for eye in eyes:
        _fill_polygon(canvases[Component.EYES], eye)

    nose_hull = cv2.convexHull(pts[NOSE]).reshape(-1, 2)
    if _polygon_area(nose_hull) == 0.0:
        failed[Component.NOSE] = True
    else:
        _fill_polygon(canvases[Component.NOSE], nose_hull)

    if _polygon_area(pts[OUTER_LIP]) == 0.0:
        failed[Component.MOUTH] = True
    else:
        _fill_polygon(canvases[Component.MOUTH], pts[OUTER_LIP])

    claimed = np.zeros((height, width), dtype=bool)
    for component in FOREGROUND_PRECEDENCE:
        canvases[component][claimed] = 0
        claimed |= canvases[component] > 0

    skin = np.zeros((height, width), dtype=np.uint8)
    cv2.fillConvexPoly(skin, hull, 1)
    for component in FOREGROUND:
        skin[canvases[component] > 0] = 0
    canvases[Component.SKIN] = skin

    return {c: _to_mask(canvases[c], c, failed[c]) for c in COMPONENTS}


def make_layer_bundle(image: FaceImage, masks: Mapping[Component, ComponentMask]) -> LayerBundle:
    """
    Split an image into masked layer targets.

    Args:
        image: Full face image (becomes the panorama target)
        masks: Component -> mask for all five components

    Returns:
        LayerBundle with zeroed-background layers
    """
    missing = [c.value for c in COMPONENTS if c not in masks]
    if missing:
        raise ArityError(f"missing masks for: {', '.join(missing)}")
    skin = masks[Component.SKIN].bits
    for component in FOREGROUND:
        if masks[component].shape != (image.height, image.width):
            raise DimensionError(f"{component.value} mask does not match the image size")
        if bool((skin & masks[component].bits).any()):
            raise DataError(f"skin mask overlaps the {component.value} mask")
    layers = {c: apply_mask(image, masks[c]) for c in COMPONENTS}
    return LayerBundle(layers=layers, masks={c: masks[c] for c in COMPONENTS}, panorama=image)


def load_landmarks(path: Union[str, Path]) -> LandmarkSet:
    """Read a 68-point JSON array [[x, y], ...] written by a detector."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            points = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DetectionFailure(f"cannot read landmarks {path}: {e}")
    return LandmarkSet(np.asarray(points, dtype=np.float64))


def save_landmarks(lm: LandmarkSet, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump([[float(x), float(y)] for x, y in lm.points], f)
    return path


LandmarkDetector = Callable[[Path], LandmarkSet]


@register_plugin("landmark_detector", "json_sidecar")
def json_sidecar_detector() -> LandmarkDetector:
    """Detector reading landmarks precomputed next to each image as <stem>.landmarks.json."""

    def detect(image_path: Path) -> LandmarkSet:
        image_path = Path(image_path)
        return load_landmarks(image_path.with_name(image_path.stem + ".landmarks.json"))

    return detect

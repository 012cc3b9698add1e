"""
Unit tests for landmark masks and layer bundles.
"""
import numpy as np
import pytest
import torch

from inverter.domain import COMPONENTS, FOREGROUND, Component, ComponentMask, validate_face_image
from inverter.errors import ArityError, DataError, DetectionFailure, RangeError
from inverter.masks import (
    FOREGROUND_PRECEDENCE,
    LandmarkSet,
    brow_radius,
    load_landmarks,
    make_layer_bundle,
    masks_from_landmarks,
    save_landmarks,
)
from inverter.plugins import resolve_plugin
from inverter.synthetic import SyntheticFaceSpec, synthetic_face_landmarks


@pytest.fixture
def landmarks():
    """Create landmarks of a 128x128 synthetic face."""
    return synthetic_face_landmarks(SyntheticFaceSpec(identity_seed=3), 128)


@pytest.fixture
def masks(landmarks):
    return masks_from_landmarks(landmarks, 128, 128)


@pytest.fixture
def image():
    torch.manual_seed(0)
    return validate_face_image(torch.rand(128, 128, 3) * 2 - 1)


def test_all_components_found(masks):
    """Test that a well-formed face yields five non-empty masks."""
    assert set(masks) == set(COMPONENTS)
    for component in COMPONENTS:
        assert not masks[component].detection_failure
        assert bool(masks[component].bits.any())


def test_skin_excludes_foreground(masks):
    """Test that skin never overlaps the foreground components."""
    skin = masks[Component.SKIN].bits
    for component in FOREGROUND:
        assert not bool((skin & masks[component].bits).any())


def test_masks_lie_inside_face_hull(masks, landmarks):
    """Test that eyes and mouth sit inside the landmark bounding box."""
    x_max, y_max = landmarks.points.max(axis=0)
    for component in (Component.EYES, Component.MOUTH):
        ys, xs = torch.nonzero(masks[component].bits, as_tuple=True)
        assert int(xs.max()) <= int(np.ceil(x_max)) and int(ys.max()) <= int(np.ceil(y_max))


def test_zero_area_geometry_is_a_detection_failure():
    """Test that collapsed landmarks tag every mask as a failure."""
    lm = LandmarkSet(np.full((68, 2), 40.0))
    result = masks_from_landmarks(lm, 128, 128)
    assert all(result[c].detection_failure for c in COMPONENTS)
    assert all(not bool(result[c].bits.any()) for c in COMPONENTS)


def test_landmark_validation():
    """Test count, finiteness and bounds checks."""
    with pytest.raises(ArityError):
        LandmarkSet(np.zeros((67, 2)))
    with pytest.raises(RangeError):
        LandmarkSet(np.full((68, 2), np.nan))
    with pytest.raises(RangeError):
        masks_from_landmarks(LandmarkSet(np.full((68, 2), 200.0)), 128, 128)


def test_contested_pixels_follow_precedence(landmarks, masks):
    """Test that a brow drawn across an eye leaves the eye mask whole and takes no eye pixels."""
    points = landmarks.points.copy()
    points[17:22] = points[36:41]
    moved = masks_from_landmarks(LandmarkSet(points), 128, 128)
    eyes = moved[Component.EYES].bits
    assert torch.equal(eyes, masks[Component.EYES].bits)
    assert not bool((moved[Component.EYEBROWS].bits & eyes).any())
    assert bool(moved[Component.EYEBROWS].bits.any())
    assert FOREGROUND_PRECEDENCE[0] is Component.EYES


def test_brow_radius_scales_with_resolution():
    """Test the brow dilation radius at several resolutions."""
    assert brow_radius(128) == 2
    assert brow_radius(256) == 4
    assert brow_radius(32) == 1


def test_make_layer_bundle(image, masks):
    """Test that bundle layers equal the image inside masks and zero outside."""
    bundle = make_layer_bundle(image, masks)
    for component in COMPONENTS:
        bits = masks[component].bits
        assert torch.equal(bundle.layers[component].pixels[bits], image.pixels[bits])
        assert torch.count_nonzero(bundle.layers[component].pixels[~bits]) == 0
    assert bundle.panorama is image
    assert bundle.stacked_layers().shape == (5, 3, 128, 128)


def test_make_layer_bundle_errors(image, masks):
    """Test missing components and skin overlap."""
    partial = {c: m for c, m in masks.items() if c != Component.NOSE}
    with pytest.raises(ArityError):
        make_layer_bundle(image, partial)

    overlapping = dict(masks)
    overlapping[Component.SKIN] = ComponentMask(torch.ones(128, 128, dtype=torch.bool), Component.SKIN)
    with pytest.raises(DataError):
        make_layer_bundle(image, overlapping)


def test_landmark_file_round_trip(tmp_path, landmarks):
    """Test that saved landmarks reload exactly."""
    path = save_landmarks(landmarks, tmp_path / "face.landmarks.json")
    assert np.array_equal(load_landmarks(path).points, landmarks.points)


def test_missing_landmark_file(tmp_path):
    """Test that an unreadable landmark file is a detection failure."""
    with pytest.raises(DetectionFailure):
        load_landmarks(tmp_path / "absent.landmarks.json")


def test_json_sidecar_detector(tmp_path, landmarks):
    """Test that the sidecar detector reads <stem>.landmarks.json."""
    save_landmarks(landmarks, tmp_path / "face_01.landmarks.json")
    detect = resolve_plugin("landmark_detector", "json_sidecar")()
    assert np.array_equal(detect(tmp_path / "face_01.png").points, landmarks.points)

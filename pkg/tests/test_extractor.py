"""
Unit tests for template extractors.
"""
import copy

import pytest
import torch

from config.config import ExtractorSpec, ExtractorTrainingConfig
from inverter.data import FaceDataset, load_manifest
from inverter.domain import FacialTemplate, validate_face_image
from inverter.errors import (
    CapabilityError,
    CheckpointFormatError,
    DataError,
    DimensionError,
    ExtractorStateError,
    NumericError,
)
from inverter.extractor import (
    ExtractorDescriptor,
    NetworkExtractor,
    QueryOnlyExtractor,
    cosine_matrix,
    load_extractor,
    save_extractor,
    similarity,
    train_toy_extractor,
)
from inverter.plugins import resolve_plugin
from tests.conftest import TEMPLATE_DIM, make_toy_extractor


@pytest.fixture
def images():
    """Create a batch of random 32x32 images."""
    torch.manual_seed(1)
    return torch.rand(6, 3, 32, 32) * 2 - 1


def test_similarity_values():
    """Test cosine similarity on known vectors."""
    a = FacialTemplate.from_values([1.0, 0.0])
    assert similarity(a, a) == pytest.approx(1.0)
    assert similarity(a, FacialTemplate.from_values([-1.0, 0.0])) == pytest.approx(-1.0)
    assert similarity(a, FacialTemplate.from_values([0.0, 3.0])) == pytest.approx(0.0)


def test_similarity_errors():
    """Test dimension mismatch and zero-norm templates."""
    with pytest.raises(DimensionError):
        similarity(torch.ones(3), torch.ones(4))
    with pytest.raises(NumericError):
        similarity(torch.zeros(3), torch.ones(3))


def test_cosine_matrix_matches_similarity():
    """Test that the pairwise matrix agrees with pairwise similarity."""
    torch.manual_seed(2)
    a, b = torch.randn(3, 8), torch.randn(4, 8)
    matrix = cosine_matrix(a, b)
    assert matrix.shape == (3, 4)
    assert float(matrix[1, 2]) == pytest.approx(similarity(a[1], b[2]), abs=1e-9)


def test_extract_is_normalized(toy_extractor, images):
    """Test that the toy extractor emits unit-norm d-dimensional templates."""
    templates = toy_extractor.extract_batch(images)
    assert templates.shape == (6, TEMPLATE_DIM)
    assert torch.allclose(templates.norm(dim=1), torch.ones(6), atol=1e-5)
    single = toy_extractor.extract(validate_face_image(images[0].permute(1, 2, 0)))
    assert torch.allclose(single.values, templates[0], atol=1e-6)


def test_differentiable_path_reaches_pixels(toy_extractor, images):
    """Test that gradients flow from templates back to the input image."""
    x = images.clone().requires_grad_(True)
    toy_extractor.extract_differentiable(x).sum().backward()
    assert x.grad is not None and float(x.grad.abs().sum()) > 0


def test_query_only_refuses_gradients(images):
    """Test that the black-box tier answers values but not gradients."""
    wrapped = QueryOnlyExtractor(make_toy_extractor())
    assert not wrapped.descriptor.differentiable
    assert wrapped.extract_batch(images).shape == (6, TEMPLATE_DIM)
    with pytest.raises(CapabilityError):
        wrapped.extract_differentiable(images)


def test_uninitialized_extractor(images):
    """Test that an extractor without a network raises on use."""
    descriptor = ExtractorDescriptor(name="empty", d=16, normalized=True, differentiable=True)
    with pytest.raises(ExtractorStateError):
        NetworkExtractor(None, descriptor).extract_batch(images)


def test_descriptor_rejects_small_d():
    """Test that template dimensions below 8 are rejected."""
    with pytest.raises(DimensionError):
        ExtractorDescriptor(name="tiny", d=4, normalized=True, differentiable=True)


def test_save_load_round_trip(tmp_path, toy_extractor, images):
    """Test that a saved extractor reproduces its templates."""
    path = tmp_path / "extractor.pt"
    save_extractor(toy_extractor, path)
    loaded = load_extractor(path, role="unseen")
    assert loaded.descriptor.role == "unseen"
    assert torch.allclose(loaded.extract_batch(images), toy_extractor.extract_batch(images), atol=1e-6)


def test_load_garbage_checkpoint(tmp_path):
    """Test that a corrupt checkpoint raises CheckpointFormatError."""
    path = tmp_path / "garbage.pt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointFormatError):
        load_extractor(path)


def test_toy_plugin_needs_checkpoint(tmp_path):
    """Test that the toy plug-in refuses a missing checkpoint."""
    factory = resolve_plugin("extractor", "toy")
    with pytest.raises(ExtractorStateError):
        factory(ExtractorSpec(name="toy", checkpoint=str(tmp_path / "missing.pt")))


def test_train_toy_extractor(images):
    """Test that toy training returns a frozen differentiable extractor."""
    subjects = ["a", "a", "b", "b", "c", "c"]
    config = ExtractorTrainingConfig(epochs=2, batch_size=4, width=4)
    extractor = train_toy_extractor(images, subjects, config, template_dim=TEMPLATE_DIM, seed=0)
    assert extractor.descriptor.differentiable
    assert all(not p.requires_grad for p in extractor.net.parameters())
    assert extractor.extract_batch(images).shape == (6, TEMPLATE_DIM)


def test_train_toy_extractor_needs_identities(images):
    """Test that training needs two identities with two images each."""
    config = ExtractorTrainingConfig(epochs=1, width=4)
    with pytest.raises(DataError):
        train_toy_extractor(images, ["a", "b", "c", "d", "e", "f"], config, template_dim=TEMPLATE_DIM)


def test_extract_is_stable_under_small_noise(toy_extractor, images):
    """Test that 1e-3 pixel noise barely moves the template."""
    torch.manual_seed(3)
    noisy = images + 1e-3 * torch.randn_like(images)
    a, b = toy_extractor.extract_batch(images), toy_extractor.extract_batch(noisy)
    for i in range(images.shape[0]):
        assert similarity(a[i], b[i]) > 0.99


def test_query_only_matches_wrapped_values(toy_extractor, images):
    """Test that the query-only tier returns exactly the wrapped templates."""
    wrapped = QueryOnlyExtractor(toy_extractor)
    assert torch.equal(wrapped.extract_batch(images), toy_extractor.extract_batch(images))
    assert torch.equal(wrapped.extract_batch(images), wrapped.extract_batch(images))


def test_differentiable_matches_value_path(toy_extractor, images):
    """Test that the gradient path computes the same templates."""
    with torch.no_grad():
        values = toy_extractor.extract_differentiable(images)
    assert torch.allclose(values, toy_extractor.extract_batch(images), atol=1e-6)


def test_differentiable_gradient_matches_finite_differences(toy_extractor):
    """Test the template-sum gradient on a black image against central differences."""
    extractor = NetworkExtractor(copy.deepcopy(toy_extractor.net).double(), toy_extractor.descriptor)
    black = torch.full((1, 3, 32, 32), -1.0, dtype=torch.float64, requires_grad=True)
    extractor.extract_differentiable(black).sum().backward()
    grad = black.grad
    assert torch.isfinite(grad).all() and float(grad.abs().sum()) > 0

    torch.manual_seed(4)
    step = 1e-3
    for _ in range(3):
        direction = torch.randn(1, 3, 32, 32, dtype=torch.float64)
        direction /= direction.norm()
        with torch.no_grad():
            plus = extractor.extract_batch(black + step * direction).sum()
            minus = extractor.extract_batch(black - step * direction).sum()
        numeric = float((plus - minus) / (2 * step))
        analytic = float((grad * direction).sum())
        assert numeric == pytest.approx(analytic, rel=1e-3, abs=1e-5)


def test_similarity_is_symmetric_and_scale_invariant():
    """Test similarity(a, b) == similarity(alpha a, beta b) == similarity(b, a)."""
    torch.manual_seed(5)
    for _ in range(20):
        a, b = torch.randn(16), torch.randn(16)
        base = similarity(a, b)
        assert similarity(b, a) == pytest.approx(base, abs=1e-12)
        assert similarity(3.5 * a, 0.01 * b) == pytest.approx(base, abs=1e-6)
    s = 2 ** -0.5
    assert similarity(torch.tensor([1.0, 0.0]), torch.tensor([s, s])) == pytest.approx(0.7071, abs=1e-4)


def test_normalized_descriptor_is_checked(images):
    """Test that a normalized extractor returning non-unit templates raises."""
    descriptor = ExtractorDescriptor(name="raw", d=TEMPLATE_DIM, normalized=True, differentiable=False)
    wrapped = QueryOnlyExtractor(lambda batch: 2.0 * torch.ones(batch.shape[0], TEMPLATE_DIM), descriptor)
    with pytest.raises(NumericError):
        wrapped.extract_batch(images)
    relaxed = QueryOnlyExtractor(lambda batch: 2.0 * torch.ones(batch.shape[0], TEMPLATE_DIM),
                                 ExtractorDescriptor(name="raw", d=TEMPLATE_DIM, normalized=False,
                                                     differentiable=False))
    assert relaxed.extract_batch(images).shape == (6, TEMPLATE_DIM)


def test_toy_extractor_separates_identities(synthetic_manifest):
    """Test that training puts same-subject templates closer than other-subject ones."""
    records = load_manifest(synthetic_manifest)
    faces = FaceDataset(records, resolution=32)
    config = ExtractorTrainingConfig(epochs=10, batch_size=4, width=4)
    extractor = train_toy_extractor(faces.images, faces.subject_ids, config, template_dim=TEMPLATE_DIM, seed=0)
    scores = cosine_matrix(extractor.extract_batch(faces.images), extractor.extract_batch(faces.images))
    labels = faces.subject_ids
    genuine = [float(scores[i, j]) for i in range(len(labels)) for j in range(len(labels))
               if i != j and labels[i] == labels[j]]
    impostor = [float(scores[i, j]) for i in range(len(labels)) for j in range(len(labels))
                if labels[i] != labels[j]]
    assert sum(genuine) / len(genuine) > sum(impostor) / len(impostor)


def test_same_seed_gives_byte_identical_checkpoints(tmp_path, images):
    """Test that equal seeds and equal saves write identical files."""
    subjects = ["a", "a", "b", "b", "c", "c"]
    config = ExtractorTrainingConfig(epochs=2, batch_size=4, width=4)
    paths = []
    for name in ("first", "second"):
        extractor = train_toy_extractor(images, subjects, config, template_dim=TEMPLATE_DIM, seed=3)
        paths.append(save_extractor(extractor, tmp_path / f"{name}.pt"))
    assert paths[0].read_bytes() == paths[1].read_bytes()

    again = save_extractor(load_extractor(paths[0]), tmp_path / "again.pt")
    assert again.read_bytes() == paths[0].read_bytes()

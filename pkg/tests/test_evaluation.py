"""
Unit tests for verification and perception metrics.
"""
from fractions import Fraction

import numpy as np
import pytest
import torch

from inverter.data import FaceDataset, load_manifest, select_split
from inverter.domain import FOREGROUND, Component, ComponentMask
from inverter.errors import DataError, DetectionFailure, RangeError
from inverter.evaluation import (
    THRESHOLD_EPSILON,
    EvalReport,
    VerificationScoreSet,
    build_protocol_pairs,
    calibrate_threshold,
    evaluate_model,
    fapc,
    fapd,
    format_report,
    protocol_pairs,
    read_reports,
    roc_table,
    score_pair_records,
    tar_at_far,
    write_reports,
)
from inverter.generators import ChannelSchedule, LayeredInverter
from inverter.interchange import PairRecord, save_image
from inverter.losses import IdentityTaps, RandomTapNetwork, pixel_loss
from inverter.synthetic import SyntheticFaceSpec, generate_synthetic_face
from tests.conftest import TEMPLATE_DIM, make_toy_extractor


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def box():
    """Create a 16x16 foreground mask with a 6x5 box."""
    bits = torch.zeros(16, 16, dtype=torch.bool)
    bits[4:10, 3:8] = True
    return bits


def brute_force_threshold(scores, far):
    """Smallest observed score whose accept count stays within far·n, or None."""
    n = len(scores)
    allowed = Fraction(str(far)) * n
    for candidate in sorted(set(scores)):
        if sum(1 for s in scores if s >= candidate) <= allowed:
            return candidate
    return None


def score_set(genuine, impostor):
    return VerificationScoreSet(
        genuine=[(float(s), f"g{i}") for i, s in enumerate(genuine)],
        impostor=[(float(s), f"i{i}") for i, s in enumerate(impostor)],
    )


def test_calibrate_threshold_examples():
    """Test thresholds on ten evenly spaced impostor scores."""
    scores = [round(0.1 * k, 1) for k in range(1, 11)]
    assert calibrate_threshold(scores, 0.1) == (pytest.approx(1.0), False)
    assert calibrate_threshold(scores, 0.5) == (pytest.approx(0.6), False)


def test_calibrate_threshold_floor_warning():
    """Test that too small a FAR moves the threshold above every impostor."""
    tau, warned = calibrate_threshold([0.2, 0.4, 0.9], 0.01)
    assert warned
    assert tau == pytest.approx(0.9 + THRESHOLD_EPSILON)


def test_calibrate_threshold_errors():
    """Test empty score lists and FAR outside (0, 1)."""
    with pytest.raises(DataError):
        calibrate_threshold([], 0.1)
    with pytest.raises(RangeError):
        calibrate_threshold([0.1], 1.0)


def test_calibrate_threshold_matches_brute_force(rng):
    """Test calibration against exhaustive search on random score sets with ties."""
    for _ in range(50):
        n = int(rng.integers(20, 400))
        scores = list(np.round(rng.uniform(-1, 1, size=n), 2))
        for far in (0.01, 0.05, 0.1, 0.3):
            tau, warned = calibrate_threshold(scores, far)
            expected = brute_force_threshold(scores, far)
            if expected is None:
                assert warned and tau == pytest.approx(max(scores) + THRESHOLD_EPSILON)
            else:
                assert not warned and tau == expected
            assert sum(1 for s in scores if s >= tau) <= far * n + 1e-9


def test_tar_monotone_in_far(rng):
    """Test that TAR never decreases as FAR grows."""
    for _ in range(20):
        scores = score_set(np.clip(rng.normal(0.5, 0.3, 200), -1, 1), np.clip(rng.normal(0.0, 0.3, 500), -1, 1))
        tars = [tar for _, tar in roc_table(scores)]
        assert all(a <= b for a, b in zip(tars, tars[1:]))


def test_tar_at_far_examples(rng):
    """Test perfect separation, total overlap and no separation."""
    assert tar_at_far(score_set([1.0] * 5, [-1.0] * 100), 0.01) == 1.0
    assert tar_at_far(score_set([-0.9] * 5, np.linspace(-0.5, 0.5, 100)), 0.01) == 0.0
    same = rng.uniform(-1, 1, 20000)
    assert tar_at_far(score_set(same[:10000], same[10000:]), 0.1) == pytest.approx(0.1, abs=0.05)


def test_score_set_range():
    """Test that scores outside [-1, 1] are rejected."""
    with pytest.raises(RangeError):
        score_set([1.5], [0.0])


def test_protocol_pair_counts():
    """Test genuine and impostor counts of both protocols."""
    subjects = ["a", "a", "b", "b"]
    genuine, impostor, skipped = protocol_pairs(subjects, "type1", impostor_ratio=1)
    assert genuine == [(0, 0), (1, 1), (2, 2), (3, 3)]
    assert len(impostor) == 4 and skipped == 0

    genuine, impostor, _ = protocol_pairs(subjects, "type2", impostor_ratio=10)
    assert genuine == [(0, 1), (1, 0), (2, 3), (3, 2)]
    assert len(impostor) == 8
    assert all(subjects[i] != subjects[j] for i, j in impostor)


def test_protocol_pairs_skip_singletons_and_repeat():
    """Test type-2 skipping and seeded impostor sampling."""
    subjects = ["a", "a", "b", "c", "c", "c"]
    _, _, skipped = protocol_pairs(subjects, "type2")
    assert skipped == 1
    first = protocol_pairs(subjects, "type1", impostor_ratio=2, seed=5)
    assert protocol_pairs(subjects, "type1", impostor_ratio=2, seed=5) == first


def test_protocol_pairs_scale_to_large_galleries():
    """Test impostor sampling for 3000 images without enumerating every pair."""
    subjects = [f"s{i // 3}" for i in range(3000)]
    _, impostor, _ = protocol_pairs(subjects, "type1", impostor_ratio=10, seed=1)
    assert len(impostor) == 30000
    assert len(set(impostor)) == len(impostor)
    assert impostor == sorted(impostor)
    assert all(i // 3 != j // 3 for i, j in impostor)
    assert protocol_pairs(subjects, "type1", impostor_ratio=10, seed=1)[1] == impostor
    assert protocol_pairs(subjects, "type1", impostor_ratio=10, seed=2)[1] != impostor


def test_build_protocol_pairs_scores():
    """Test that identical templates score 1.0 on type-1 genuine pairs."""
    torch.manual_seed(0)
    templates = torch.randn(4, 8)
    scores = build_protocol_pairs(templates, templates, ["a", "a", "b", "b"], "type1", ["w", "x", "y", "z"])
    assert [s for s, _ in scores.genuine] == pytest.approx([1.0] * 4)
    assert scores.genuine[0][1] == "w~w"


def test_fapd_examples(box):
    """Test identity, region restriction and emptiness."""
    x = torch.zeros(3, 16, 16, dtype=torch.float64)
    assert fapd(x, x, box) == 0.0
    x_hat = torch.where(box, x + 0.5, x + 1.0)
    assert fapd(x, x_hat, box) == pytest.approx(0.25)
    with pytest.raises(DetectionFailure):
        fapd(x, x_hat, torch.zeros(16, 16, dtype=torch.bool))


def test_fapd_matches_loop_oracle(rng, box):
    """Test FAPD against an explicit loop over mask bits."""
    for _ in range(20):
        x = torch.from_numpy(rng.uniform(-1, 1, (3, 16, 16)))
        x_hat = torch.from_numpy(rng.uniform(-1, 1, (3, 16, 16)))
        total, n = 0.0, 0
        for i in range(16):
            for j in range(16):
                if box[i, j]:
                    for c in range(3):
                        total += (float(x[c, i, j]) - float(x_hat[c, i, j])) ** 2
                        n += 1
        assert fapd(x, x_hat, box) == pytest.approx(total / n, rel=1e-12)
        assert fapd(x, x_hat, box) == pytest.approx(fapd(x_hat, x, box), rel=1e-12)
        assert fapd(x, x_hat, box) <= 4.0


def test_fapd_full_mask_equals_pixel_loss(rng):
    """Test that a full-image mask turns FAPD into the pixel loss."""
    x = torch.from_numpy(rng.uniform(-1, 1, (3, 16, 16)))
    x_hat = torch.from_numpy(rng.uniform(-1, 1, (3, 16, 16)))
    full = torch.ones(16, 16, dtype=torch.bool)
    assert fapd(x, x_hat, full) == pytest.approx(float(pixel_loss(x, x_hat)), rel=1e-12)


def test_fapd_uses_foreground_components_only(box):
    """Test that the skin mask is ignored when masks are given per component."""
    masks = {c: ComponentMask(box, c) for c in FOREGROUND}
    masks[Component.SKIN] = ComponentMask(~box, Component.SKIN)
    x = torch.zeros(3, 16, 16)
    x_hat = torch.where(box, x + 0.5, x - 1.0)
    assert fapd(x, x_hat, masks) == pytest.approx(0.25)


def test_fapc(rng, box):
    """Test FAPC identities with an identity-tap network."""
    fnet = IdentityTaps()
    x = torch.from_numpy(rng.uniform(-1, 1, (3, 16, 16)))
    assert fapc(x, x, box, fnet) == 0.0
    outside_only = torch.where(box, x, -x)
    assert fapc(x, outside_only, box, fnet) == 0.0

    x_hat = torch.from_numpy(rng.uniform(-1, 1, (3, 16, 16)))
    zero = torch.zeros((), dtype=x.dtype)
    masked = float(pixel_loss(torch.where(box, x, zero), torch.where(box, x_hat, zero)))
    assert fapc(x, x_hat, box, fnet) == pytest.approx(masked, rel=1e-12)


def test_report_round_trip(tmp_path):
    """Test writing and reading reports."""
    report = EvalReport(extractor="toy", tar_at={"type1": {"0.01": 0.9}}, fapd=0.1, fapc=0.2,
                        roc={"type1": [(0.01, 0.9)]}, warnings=["w"])
    skipped = EvalReport(extractor="ghost", role="unseen", skipped=True, skip_reason="no checkpoint")
    path = write_reports([report, skipped], tmp_path / "report.json", {"checkpoint": "x.pt"})
    loaded = read_reports(path)
    assert loaded[0] == report and loaded[1] == skipped
    assert loaded[0].tar("type1", 0.01) == 0.9
    assert "skipped" in format_report(skipped)
    assert "TAR@1.00%FAR=0.9000" in format_report(report)
    with pytest.raises(RangeError):
        EvalReport(extractor="bad", tar_at={"type1": {"0.01": 1.5}})


def test_evaluate_model(synthetic_manifest):
    """Test reports for the target, an unseen extractor and a skipped extractor."""
    target = make_toy_extractor(seed=0)
    unseen = make_toy_extractor(seed=1)
    test = FaceDataset(select_split(load_manifest(synthetic_manifest), "test"), target, resolution=32)
    torch.manual_seed(0)
    model = LayeredInverter(TEMPLATE_DIM, 32, ChannelSchedule.for_resolution(32, 16))
    reports = evaluate_model(model, test, target, RandomTapNetwork(), [0.1],
                             unseen=[("toy-seed1", unseen, ""), ("ghost", None, "not installed")],
                             impostor_ratio=2)
    assert [r.role for r in reports] == ["target", "unseen", "unseen"]
    for report in reports[:2]:
        assert set(report.tar_at) == {"type1", "type2"}
        assert report.fapd is not None and report.fapd >= 0.0
        assert report.n_pairs > 0
    assert reports[2].skipped and reports[2].skip_reason == "not installed"


class RecordingTaps(RandomTapNetwork):
    """Random taps that remember every device move."""

    def __init__(self):
        super().__init__(seed=0)
        self.moves = []

    def cpu(self):
        self.moves.append("cpu")
        return super().cpu()

    def to(self, *args, **kwargs):
        self.moves.append("to")
        return super().to(*args, **kwargs)


def test_evaluate_model_leaves_feature_network_in_place(synthetic_manifest):
    """Test that evaluation never relocates the caller's feature network."""
    target = make_toy_extractor(seed=0)
    test = FaceDataset(select_split(load_manifest(synthetic_manifest), "test"), target, resolution=32)
    torch.manual_seed(0)
    model = LayeredInverter(TEMPLATE_DIM, 32, ChannelSchedule.for_resolution(32, 16))
    fnet = RecordingTaps()
    params = list(fnet.parameters())
    reports = evaluate_model(model, test, target, fnet, [0.1], impostor_ratio=2)
    assert reports[0].fapc is not None
    assert fnet.moves == []
    assert all(a is b for a, b in zip(params, fnet.parameters()))
    assert {p.device.type for p in fnet.parameters()} == {"cpu"}


def test_score_pair_records(tmp_path):
    """Test scoring an imported pair list."""
    a, _, _ = generate_synthetic_face(SyntheticFaceSpec(1), 32)
    b, _, _ = generate_synthetic_face(SyntheticFaceSpec(2), 32)
    save_image(a, tmp_path / "a.png")
    save_image(b, tmp_path / "b.png")
    pairs = [PairRecord("a~a", "a.png", "a.png", 1), PairRecord("a~b", "a.png", "b.png", 0)]
    scores = score_pair_records(pairs, make_toy_extractor(), tmp_path)
    assert scores.genuine[0][0] == pytest.approx(1.0, abs=1e-6)
    assert len(scores.impostor) == 1

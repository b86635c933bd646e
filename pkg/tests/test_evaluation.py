from fractions import Fraction

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from pvnas import datapipe as dp
from pvnas import distill as kd
from pvnas import evaluation as ev
from pvnas import searchspace as ss
from pvnas.netbuilder import NetworkSpec, build_discrete, count_flops, count_params

SMALL = NetworkSpec(init_channels=8, input_size=16)


class Constant(nn.Module):
    def __init__(self, cls):
        super().__init__()
        self.cls = cls

    def forward(self, x):
        out = torch.zeros(len(x), 2)
        out[:, self.cls] = 1.0
        return out


class Oracle(nn.Module):
    """Reads the label back out of the first pixel."""

    def forward(self, x):
        return torch.stack([-x[:, 0, 0, 0], x[:, 0, 0, 0]], 1)


def stub_set(strata):
    out = []
    for (label, ctype), n in strata.items():
        img = np.full((2, 2), 255 * label, np.uint8)
        out += [dp.Sample(img, float(label), ctype, f"{label}{ctype}{i}") for i in range(n)]
    return dp.SampleDataset(out, mean=[0, 0, 0], std=[1, 1, 1])


REFERENCE_TEST_SPLIT = {(1, "mono"): 92, (0, "mono"): 176, (1, "poly"): 112, (0, "poly"): 274}


# ------------------------------------------------------------------ metrics

def metric_oracle(tp, fn, fp, tn):
    """Exact rational arithmetic, independent of the float implementation."""
    rec, spec_ = Fraction(tp, tp + fn), Fraction(tn, tn + fp)
    prec = Fraction(tp, tp + fp)
    return {"accuracy": Fraction(tp + tn, tp + fn + fp + tn), "recall": rec, "precision": prec,
            "acc_functional": spec_, "balanced_accuracy": (rec + spec_) / 2, "f1": 2 * prec * rec / (prec + rec)}


@settings(max_examples=200)
@given(st.integers(1, 500), st.integers(0, 500), st.integers(0, 500), st.integers(1, 500))
def test_metrics_match_rational_oracle(tp, fn, fp, tn):
    r = ev.compute_metrics(ev.ConfusionMatrix(tp, fn, fp, tn))
    for k, v in metric_oracle(tp, fn, fp, tn).items():
        assert getattr(r, k) == pytest.approx(float(100 * v), rel=1e-12), k
    assert r.acc_defective == r.recall
    assert r.balanced_accuracy == pytest.approx((r.acc_defective + r.acc_functional) / 2)
    assert r.flags == []


def test_reference_confusion_matrix_rounding():
    r = ev.compute_metrics(ev.ConfusionMatrix(176, 28, 26, 424))
    assert r.confusion.total == 654
    assert (round(r.accuracy, 2), round(r.balanced_accuracy, 2), round(r.precision, 2), round(r.f1, 2)) == \
        (91.74, 90.25, 87.13, 86.70)
    # 176/204 = 86.2745...; the rational oracle fixes the exact value
    assert r.recall == pytest.approx(float(100 * Fraction(176, 204)), rel=1e-15)


def test_all_correct_is_100():
    r = ev.compute_metrics(ev.ConfusionMatrix(4, 0, 0, 6))
    assert all(getattr(r, k) == 100.0 for k in r.METRICS)


def test_degenerate_division_flags():
    r = ev.compute_metrics(ev.ConfusionMatrix(0, 5, 0, 5))
    assert r.precision == 0 and r.recall == 0 and r.f1 == 0
    assert any(f.startswith("precision") for f in r.flags) and any(f.startswith("f1") for f in r.flags)
    with pytest.raises(ValueError):
        ev.ConfusionMatrix(-1, 0, 0, 0)


def test_confusion_from_predictions():
    cm = ev.ConfusionMatrix.from_predictions([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
    assert cm == ev.ConfusionMatrix(2, 1, 1, 1)
    assert cm + cm == ev.ConfusionMatrix(4, 2, 2, 2)


# ------------------------------------------------------------------ evaluate

def test_constant_functional_on_reference_split():
    r = ev.evaluate(Constant(0), stub_set(REFERENCE_TEST_SPLIT))
    assert r.confusion == ev.ConfusionMatrix(0, 204, 0, 450)
    assert round(r.accuracy, 2) == 68.81 and r.recall == 0
    mono, poly = r.by_cell_type["mono"], r.by_cell_type["poly"]
    assert (mono.confusion.total, poly.confusion.total) == (268, 386)
    assert mono.confusion + poly.confusion == r.confusion


def test_perfect_classifier_and_purity():
    data = stub_set(REFERENCE_TEST_SPLIT)
    r = ev.evaluate(Oracle(), data)
    assert all(getattr(r, k) == 100.0 for k in r.METRICS)
    assert ev.evaluate(Oracle(), data).to_dict() == r.to_dict()


def test_evaluate_network_deterministic():
    torch.manual_seed(0)
    net = build_discrete(SMALL, ss.EXAMPLE_GENOTYPE)
    data = dp.SampleDataset(dp.synthetic_samples(12, 0, dp.SyntheticSpec(size=16)))
    assert ev.evaluate(net, data).to_dict() == ev.evaluate(net, data).to_dict()


def test_empty_set_rejected():
    with pytest.raises(ValueError):
        ev.evaluate(Constant(0), dp.SampleDataset([], mean=[0, 0, 0], std=[1, 1, 1]))


def test_report_table_lists_groups():
    text = ev.evaluate(Constant(0), stub_set(REFERENCE_TEST_SPLIT)).table()
    assert "mono" in text and "poly" in text and "68.81" in text


# ------------------------------------------------------------------ profile

def test_profile_single_repetition():
    net = build_discrete(SMALL, ss.EXAMPLE_GENOTYPE)
    p = ev.profile(net, (3, 16, 16), repetitions=1, warmup=1)
    assert len(p.latency_samples_ms) == 1 and p.low_confidence
    assert p.params == count_params(net)
    assert p.flops == count_flops(net, (3, 16, 16)) and p.macs == p.flops // 2
    assert {"machine", "threads", "torch"} <= set(p.hardware)
    assert any("different hardware" in n for n in p.notes)
    assert "low confidence" in p.table()
    with pytest.raises(ValueError):
        ev.profile(net, (3, 16, 16), repetitions=0)


def test_profile_restores_threads():
    before = torch.get_num_threads()
    p = ev.profile(build_discrete(SMALL, ss.EXAMPLE_GENOTYPE), (3, 16, 16), repetitions=5, warmup=0)
    assert not p.low_confidence and p.hardware["threads"] == 1
    assert torch.get_num_threads() == before


# ------------------------------------------------------------------ Grad-CAM

@pytest.fixture(scope="module")
def small_net():
    torch.manual_seed(0)
    return build_discrete(SMALL, ss.EXAMPLE_GENOTYPE)


@settings(max_examples=20)
@given(st.integers(0, 2**31 - 1), st.sampled_from([None, 0, 1]))
def test_cam_in_unit_range(small_net, seed, cls):
    x = torch.randn(3, 16, 16, generator=torch.Generator().manual_seed(seed))
    cam = ev.grad_cam(small_net, x, cls)
    assert cam.shape == (16, 16)
    assert np.isfinite(cam).all() and cam.min() >= 0 and cam.max() <= 1


def test_cam_uniform_gray_is_finite(small_net):
    cam = ev.grad_cam(small_net, torch.full((3, 16, 16), 0.5))
    assert np.isfinite(cam).all() and cam.shape == (16, 16)


def test_cam_leaves_model_mode(small_net):
    small_net.train()
    ev.grad_cam(small_net, torch.randn(3, 16, 16))
    assert small_net.training


def test_cam_on_frozen_model():
    torch.manual_seed(0)
    net = build_discrete(SMALL, ss.EXAMPLE_GENOTYPE).requires_grad_(False)
    cam = ev.grad_cam(net, torch.randn(3, 16, 16), 1)
    assert np.isfinite(cam).all() and cam.max() <= 1


def test_cam_requires_layer_for_plain_modules():
    with pytest.raises(ValueError):
        ev.grad_cam(nn.Sequential(nn.Flatten(), nn.Linear(12, 2)), torch.zeros(3, 2, 2))


def test_save_cam(tmp_path):
    img = np.random.default_rng(0).integers(0, 255, (20, 20), dtype=np.uint8)
    path = ev.save_cam(tmp_path / "sub" / "cam.png", img, np.linspace(0, 1, 100).reshape(10, 10))
    with Image.open(path) as im:
        assert im.size == (20, 20) and im.mode == "RGB"


def test_box_iou():
    m = np.zeros((10, 10), bool)
    m[0:4, 0:4] = True
    assert ev.box_iou(m, (0, 0, 4, 4)) == 1.0
    assert ev.box_iou(m, (0, 2, 4, 4)) == pytest.approx(8 / 24)


@pytest.mark.slow
def test_cam_localizes_synthetic_defect():
    """A 150 px toy classifier's defective-class map should sit on the dark patch."""
    spec = dp.SyntheticSpec(size=150)
    train = dp.synthetic_samples(200, 0, spec)
    test, boxes = dp.synthetic_samples(40, 1, spec, return_boxes=True)
    mean, std = dp.channel_stats(train)
    torch.manual_seed(0)
    net = build_discrete(NetworkSpec(init_channels=8, input_size=150), ss.EXAMPLE_GENOTYPE)
    kd.train_scratch(net, dp.SampleDataset(train, mean, std), kd.TrainSchedule(epochs=5, batch_size=16, lr=0.025))
    test_set = dp.SampleDataset(test, mean, std)
    assert ev.evaluate(net, test_set, False).accuracy >= 95
    ious = [ev.box_iou(ev.grad_cam(net, test_set[i][0], 1) >= 0.5, b) for i, b in enumerate(boxes) if b]
    assert np.mean(ious) >= 0.3, np.mean(ious)

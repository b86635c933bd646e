"""Metrics, efficiency profiling and Grad-CAM heatmaps."""

from __future__ import annotations

import gc
import os
import platform
import resource
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from torch.utils.data import DataLoader

from .netbuilder import Network, count_flops, count_params

REFERENCE_LATENCY_MS = 33.0


@dataclass(frozen=True)
class ConfusionMatrix:
    """Defective is the positive class."""
    tp: int
    fn: int
    fp: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fn, self.fp, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "ConfusionMatrix":
        t = np.asarray(y_true).astype(int)
        p = np.asarray(y_pred).astype(int)
        return cls(int(((t == 1) & (p == 1)).sum()), int(((t == 1) & (p == 0)).sum()),
                   int(((t == 0) & (p == 1)).sum()), int(((t == 0) & (p == 0)).sum()))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fn + other.fn, self.fp + other.fp, self.tn + other.tn)


@dataclass
class EvalReport:
    accuracy: float
    balanced_accuracy: float
    precision: float
    recall: float
    f1: float
    acc_defective: float
    acc_functional: float
    confusion: ConfusionMatrix
    flags: list[str] = field(default_factory=list)
    by_cell_type: dict[str, "EvalReport"] = field(default_factory=dict)
    params: int | None = None
    flops: int | None = None
    latency_ms: float | None = None
    memory_mb: float | None = None

    METRICS = ("accuracy", "balanced_accuracy", "precision", "recall", "f1", "acc_defective", "acc_functional")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.METRICS}
        d["confusion"] = asdict(self.confusion)
        d["flags"] = list(self.flags)
        d["by_cell_type"] = {k: v.to_dict() for k, v in self.by_cell_type.items()}
        for k in ("params", "flops", "latency_ms", "memory_mb"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        return d

    def table(self) -> str:
        head = ["group", "Acc", "B_Acc", "Prec", "Rec", "F1", "Acc_def", "Acc_func", "n"]
        rows = [("all", self)] + sorted(self.by_cell_type.items())
        lines = ["  ".join(f"{h:>8}" for h in head)]
        for name, r in rows:
            vals = [f"{getattr(r, k):8.2f}" for k in self.METRICS]
            lines.append("  ".join([f"{name:>8}", *vals, f"{r.confusion.total:8d}"]))
        return "\n".join(lines)


def _pct(num: int, den: int, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(f"{name}: zero denominator, reported as 0")
        return 0.0
    return 100.0 * num / den


def compute_metrics(cm: ConfusionMatrix) -> EvalReport:
    """Percentages; balanced accuracy is the mean of the two class recalls."""
    flags: list[str] = []
    acc = _pct(cm.tp + cm.tn, cm.total, "accuracy", flags)
    rec = _pct(cm.tp, cm.tp + cm.fn, "recall", flags)
    prec = _pct(cm.tp, cm.tp + cm.fp, "precision", flags)
    spec = _pct(cm.tn, cm.tn + cm.fp, "acc_functional", flags)
    if prec + rec == 0:
        flags.append("f1: precision and recall both 0, reported as 0")
        f1 = 0.0
    else:
        f1 = 2 * prec * rec / (prec + rec)
    return EvalReport(acc, (rec + spec) / 2, prec, rec, f1, rec, spec, cm, flags)


def predict(model: nn.Module, dataset, batch_size: int = 64) -> np.ndarray:
    model.eval()
    preds = []
    with torch.no_grad():
        for x, _ in DataLoader(dataset, batch_size, shuffle=False):
            preds.append(model(x).argmax(1).numpy())
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def evaluate(model: nn.Module, dataset, group_by_cell_type: bool = True, batch_size: int = 64) -> EvalReport:
    """Report over ``dataset`` (a SampleDataset), optionally split by mono/poly."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty set")
    y = np.asarray(dataset.labels)
    p = predict(model, dataset, batch_size)
    report = compute_metrics(ConfusionMatrix.from_predictions(y, p))
    if group_by_cell_type:
        types = np.asarray(dataset.cell_types)
        for t in sorted(set(types.tolist())):
            m = types == t
            report.by_cell_type[t] = compute_metrics(ConfusionMatrix.from_predictions(y[m], p[m]))
    return report


# ---------------------------------------------------------------- profiling

@dataclass
class ProfileReport:
    params: int
    flops: int
    latency_ms: float
    latency_samples_ms: list[float]
    low_confidence: bool
    memory_mb: float
    hardware: dict
    notes: list[str] = field(default_factory=list)

    @property
    def macs(self) -> int:
        return self.flops // 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["macs"] = self.macs
        return d

    def table(self) -> str:
        rows = [
            ("Parameters", f"{self.params / 1e6:.3f}M ({self.params})"),
            ("FLOPs (2xMAC)", f"{self.flops / 1e9:.3f}G"),
            ("MACs", f"{self.macs / 1e9:.3f}G"),
            ("Latency (median)", f"{self.latency_ms:.2f} ms over {len(self.latency_samples_ms)} runs"
                                 + (" [low confidence]" if self.low_confidence else "")),
            ("Memory (peak RSS delta)", f"{self.memory_mb:.1f} MB"),
            ("Hardware", f"{self.hardware.get('processor') or self.hardware.get('machine')}, "
                         f"{self.hardware.get('threads')} thread(s)"),
        ]
        return "\n".join(f"{k:<24} {v}" for k, v in rows) + "".join(f"\nnote: {n}" for n in self.notes)


def _peak_rss_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def hardware_descriptor() -> dict:
    return {"machine": platform.machine(), "processor": platform.processor(), "system": platform.system(),
            "cpu_count": os.cpu_count(), "threads": torch.get_num_threads(), "torch": torch.__version__}


def profile(model: nn.Module, input_shape=(3, 150, 150), repetitions: int = 30, warmup: int = 5) -> ProfileReport:
    """Single-threaded batch-1 latency (median) plus parameter/FLOP counts.

    Memory is the growth of peak resident-set size across the timed runs, so
    it is only meaningful in a fresh process.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        params = count_params(model)
        flops = count_flops(model, input_shape)
        model.eval()
        x = torch.randn(1, *input_shape)
        gc.collect()
        rss0 = _peak_rss_mb()
        samples = []
        with torch.no_grad():
            for _ in range(warmup):
                model(x)
            for _ in range(repetitions):
                t0 = time.perf_counter()
                model(x)
                samples.append((time.perf_counter() - t0) * 1e3)
        mem = max(0.0, _peak_rss_mb() - rss0)
        hw = hardware_descriptor()
    finally:
        torch.set_num_threads(threads)
    notes = [f"reference latency {REFERENCE_LATENCY_MS:.0f} ms was measured on different hardware; not comparable",
             "memory is peak resident-set growth during inference"]
    return ProfileReport(params, flops, statistics.median(samples), samples, repetitions < 5, mem, hw, notes)


# ---------------------------------------------------------------- Grad-CAM

def default_cam_layer(model: nn.Module) -> nn.Module:
    if isinstance(model, Network):
        return model.cells[model.normal_cell_indices[-1]]
    raise ValueError("pass target_layer explicitly for non-cell networks")


def grad_cam(model: nn.Module, image: torch.Tensor, target_class: int | None = None,
             target_layer: nn.Module | None = None) -> np.ndarray:
    """Class-gradient-weighted activation map, upsampled to the input size, in [0, 1].

    ``image`` is one normalized CxHxW tensor.
    """
    layer = target_layer or default_cam_layer(model)
    store = {}

    def hook(module, inp, out):
        store["act"] = out
        out.register_hook(lambda g: store.__setitem__("grad", g))

    handle = layer.register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        # input grad keeps the graph alive for frozen models (e.g. a loaded teacher)
        x = image.unsqueeze(0).detach().requires_grad_(True)
        with torch.enable_grad():
            logits = model(x)
            cls = int(logits.argmax(1)) if target_class is None else int(target_class)
            model.zero_grad(set_to_none=True)
            logits[0, cls].backward()
    finally:
        handle.remove()
        model.train(was_training)
    act, grad = store["act"].detach(), store["grad"].detach()
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act).sum(1, keepdim=True))
    cam = F.interpolate(cam, size=image.shape[-2:], mode="bilinear", align_corners=False)[0, 0]
    cam = torch.nan_to_num(cam, nan=0.0, posinf=0.0, neginf=0.0)
    lo, hi = cam.min(), cam.max()
    if hi - lo <= 1e-12:
        return torch.zeros_like(cam).numpy()
    return ((cam - lo) / (hi - lo)).clamp(0, 1).numpy()


def _jet(v: np.ndarray) -> np.ndarray:
    r = np.clip(1.5 - np.abs(4 * v - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * v - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * v - 1), 0, 1)
    return np.stack([r, g, b], axis=-1)


def overlay(image: np.ndarray, heatmap: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    """Blend a [0, 1] heatmap (jet colours) over a uint8 grayscale/RGB image."""
    base = image.astype(np.float32) / 255.0
    if base.ndim == 2:
        base = np.repeat(base[..., None], 3, axis=-1)
    if heatmap.shape != base.shape[:2]:
        heatmap = np.asarray(Image.fromarray((heatmap * 255).astype(np.uint8)).resize(
            base.shape[1::-1], Image.BILINEAR), dtype=np.float32) / 255.0
    out = (1 - alpha) * base + alpha * _jet(heatmap)
    return (np.clip(out, 0, 1) * 255).astype(np.uint8)


def save_cam(path, image: np.ndarray, heatmap: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay(image, heatmap)).save(path)
    return path


def box_iou(mask: np.ndarray, box: Sequence[int]) -> float:
    top, left, h, w = box
    ref = np.zeros_like(mask, dtype=bool)
    ref[top:top + h, left:left + w] = True
    inter = (mask & ref).sum()
    union = (mask | ref).sum()
    return float(inter / union) if union else 0.0

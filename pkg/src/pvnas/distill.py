"""Teacher-student knowledge transfer: attention, feature, logit and task losses."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader

from .evaluation import evaluate
from .netbuilder import ConfigError, Network, init_weights
from .ops import SepConv

log = logging.getLogger(__name__)

NUM_BRANCHES = 4
LOSS_TERMS = ("attention", "feature", "logit", "task")


class DistillDivergence(RuntimeError):
    pass


# ---------------------------------------------------------------- losses

def attention_map(x: torch.Tensor, p: float = 2.0) -> torch.Tensor:
    """(B, K, H, W) -> (B, 1, H, W): channel mean of |x|^p."""
    return x.abs().pow(p).mean(dim=1, keepdim=True)


def _check_pairs(pairs):
    for t, s in pairs:
        if t.shape != s.shape:
            raise ValueError(f"paired shapes differ: teacher {tuple(t.shape)} vs student {tuple(s.shape)}")


def _flat_attention(x, p, normalize):
    a = attention_map(x, p).flatten(1)
    return F.normalize(a, dim=1) if normalize else a


def attention_loss(pairs: Sequence[tuple[torch.Tensor, torch.Tensor]], p: float = 2.0,
                   normalize: bool = False) -> torch.Tensor:
    """Per-sample MSE of attention maps, summed over branches, averaged over samples.

    ``normalize`` L2-normalizes each flattened map first.
    """
    _check_pairs(pairs)
    per_sample = sum(((_flat_attention(t, p, normalize) - _flat_attention(s, p, normalize)) ** 2).mean(1)
                     for t, s in pairs)
    return per_sample.mean()


def feature_loss(pairs: Sequence[tuple[torch.Tensor, torch.Tensor]], norm: str = "mean_squared") -> torch.Tensor:
    """Squared L2 distance per element (``mean_squared``) or plain L2 norm (``norm``) per sample."""
    _check_pairs(pairs)
    if norm == "mean_squared":
        per_sample = sum(((t - s) ** 2).flatten(1).mean(1) for t, s in pairs)
    elif norm == "norm":
        per_sample = sum((t - s).flatten(1).norm(dim=1) for t, s in pairs)
    else:
        raise ValueError(f"unknown feature norm {norm!r}")
    return per_sample.mean()


def task_loss(logits: Sequence[torch.Tensor], labels: torch.Tensor) -> torch.Tensor:
    if labels.numel() and (labels.min() < 0 or labels.max() > 1):
        raise ValueError("labels must be 0 (functional) or 1 (defective)")
    return sum(F.cross_entropy(z, labels) for z in logits)


def logit_loss(student: Sequence[torch.Tensor], teacher: Sequence[torch.Tensor],
               temperature: float = 1.0) -> torch.Tensor:
    """KL(teacher || student) per branch, summed; scaled by T^2 when T != 1."""
    total = 0.0
    for s, t in zip(student, teacher, strict=True):
        log_s = F.log_softmax(s / temperature, dim=1)
        log_t = F.log_softmax(t / temperature, dim=1)
        total = total + F.kl_div(log_s, log_t, reduction="batchmean", log_target=True)
    return total * temperature ** 2


@dataclass
class DistillPlan:
    attention_weight: float = 1000.0
    feature_weight: float = 0.05
    logit_weight: float = 1.0
    p: float = 2.0
    temperature: float = 1.0
    feature_norm: str = "mean_squared"
    # compare L2-normalized flattened maps; the 1000 weight is calibrated for this scale
    normalize_attention: bool = True
    use_attention: bool = True
    use_feature: bool = True
    use_logit: bool = True
    use_task: bool = True
    dropped_branches: tuple[int, ...] = ()
    include_main_head: bool = True
    # (number of stride-2 SepConvs, trailing pooling) per branch, shallowest first
    student_transforms: tuple = ((3, False), (2, False), (1, False), (0, True))
    teacher_transforms: tuple = ((3, False), (2, False), (1, False), (0, False))

    def __post_init__(self):
        self.dropped_branches = tuple(sorted(set(int(b) for b in self.dropped_branches)))
        self.student_transforms = tuple(tuple(t) for t in self.student_transforms)
        self.teacher_transforms = tuple(tuple(t) for t in self.teacher_transforms)
        if min(self.attention_weight, self.feature_weight, self.logit_weight) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.p < 1:
            raise ConfigError("attention exponent p must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not any(self.active_terms.values()):
            raise ConfigError("all loss terms are disabled")
        bad = [b for b in self.dropped_branches if not 1 <= b <= NUM_BRANCHES]
        if bad:
            raise ConfigError(f"branch indices must be in 1..{NUM_BRANCHES}: {bad}")
        if len(self.student_transforms) != NUM_BRANCHES or len(self.teacher_transforms) != NUM_BRANCHES:
            raise ConfigError(f"one transform stack per branch ({NUM_BRANCHES}) is required")

    @property
    def active_terms(self) -> dict[str, bool]:
        return {"attention": self.use_attention, "feature": self.use_feature,
                "logit": self.use_logit, "task": self.use_task}

    @property
    def active_branches(self) -> list[int]:
        return [b for b in range(1, NUM_BRANCHES + 1) if b not in self.dropped_branches]

    def weights(self) -> dict[str, float]:
        return {"attention": self.attention_weight * self.use_attention,
                "feature": self.feature_weight * self.use_feature,
                "logit": self.logit_weight * self.use_logit,
                "task": 1.0 * self.use_task}

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("dropped_branches", "student_transforms", "teacher_transforms"):
            d[k] = [list(x) if isinstance(x, tuple) else x for x in d[k]]
        return d


def total_loss(parts: dict[str, torch.Tensor | float], weights: dict[str, float] | DistillPlan) -> torch.Tensor:
    """attention_weight * L_att + feature_weight * L_feat + logit_weight * L_logit + L_task."""
    if isinstance(weights, DistillPlan):
        weights = weights.weights()
    total = 0.0
    for k in LOSS_TERMS:
        w = weights.get(k, 1.0 if k == "task" else 0.0)
        if w and parts.get(k) is not None:
            total = total + w * parts[k]
    return total if isinstance(total, torch.Tensor) else torch.tensor(float(total))


# ---------------------------------------------------------------- branches

class BranchHead(nn.Module):
    """Transformation stack plus auxiliary classifier (pooling + fully connected)."""

    def __init__(self, c_in: int, c_target: int, n_sepconv: int, pool: bool, num_classes: int = 2):
        super().__init__()
        layers, c = [], c_in
        for i in range(n_sepconv):
            c_next = c_target if i == n_sepconv - 1 else min(2 * c, c_target)
            layers.append(SepConv(c, c_next, 3, 2, 1))
            c = c_next
        if pool:
            layers.append(nn.AvgPool2d(3, stride=2, padding=1, count_include_pad=False))
        if c != c_target:
            raise ConfigError(f"branch transform ends with {c} channels, expected {c_target}")
        self.transform = nn.Sequential(*layers)
        self.classifier = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(c_target, num_classes))

    def forward(self, f):
        t = self.transform(f)
        return t, self.classifier(t)


class BranchSet(nn.Module):

    def __init__(self, tap_channels: Sequence[int], transforms, c_target: int, num_classes: int = 2):
        super().__init__()
        if len(tap_channels) != len(transforms):
            raise ConfigError(f"{len(tap_channels)} tapped stages but {len(transforms)} transform stacks")
        self.heads = nn.ModuleList(BranchHead(c, c_target, n, pool, num_classes)
                                   for c, (n, pool) in zip(tap_channels, transforms))

    def forward(self, taps):
        outs = [h(f) for h, f in zip(self.heads, taps)]
        return [o[0] for o in outs], [o[1] for o in outs]


class TappedStudent(nn.Module):
    """Student network with passive taps; ``network`` alone is the inference model."""

    def __init__(self, network: Network, plan: DistillPlan):
        super().__init__()
        self.network = network
        layout = network.spec.layout
        # normal cells feeding a reduction: the transfer points before each channel change
        self.tap_cells = [i for i in range(len(layout) - 1) if layout[i] == "N" and layout[i + 1] == "R"]
        if len(self.tap_cells) != NUM_BRANCHES:
            raise ConfigError(f"layout {layout!r} yields {len(self.tap_cells)} taps, need {NUM_BRANCHES}")
        chans = [network.spec.channels[i] for i in self.tap_cells]
        self.branches = BranchSet(chans, plan.student_transforms, chans[-1], network.spec.num_classes)
        init_weights(self.branches)

    def tap_shapes(self, input_size: int) -> list[tuple[int, int, int]]:
        h, out = input_size, []
        for i, kind in enumerate(self.network.spec.layout):
            if kind == "R":
                h = math.ceil(h / 2)
            if i in self.tap_cells:
                out.append((self.network.spec.channels[i], h, h))
        return out

    def forward(self, x):
        logits, feats = self.network.forward_features(x)
        transformed, aux = self.branches([feats[i] for i in self.tap_cells])
        return logits, transformed, aux


def attach_branches(network: Network, plan: DistillPlan, teacher: "Teacher | None" = None) -> TappedStudent:
    student = TappedStudent(network, plan)
    if teacher is not None:
        s_c = network.spec.channels[student.tap_cells[-1]]
        if teacher.c_target != s_c:
            raise ConfigError(f"teacher deepest branch has {teacher.c_target} channels, student {s_c}; "
                              f"use a teacher width of {s_c / 512:g}")
    return student


# ---------------------------------------------------------------- teacher

VGG16_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")


class VGG16(nn.Module):
    """VGG16 with batch norm; ``features`` indexes like torchvision's ``vgg16_bn``.

    The head is global average pooling + one linear layer; ``width`` scales
    every stage.
    """

    def __init__(self, num_classes: int = 2, width: float = 1.0, in_channels: int = 3):
        super().__init__()
        layers, c = [], in_channels
        self.stage_ends = []
        self.stage_channels = []
        for v in VGG16_CFG:
            if v == "M":
                self.stage_ends.append(len(layers) - 1)
                self.stage_channels.append(c)
                layers.append(nn.MaxPool2d(2, 2))
            else:
                v = max(1, int(round(v * width)))
                layers += [nn.Conv2d(c, v, 3, padding=1), nn.BatchNorm2d(v), nn.ReLU(inplace=True)]
                c = v
        self.features = nn.Sequential(*layers)
        self.avgpool = nn.AdaptiveAvgPool2d(1)
        self.classifier = nn.Linear(c, num_classes)
        init_weights(self)

    def forward_features(self, x):
        stages = []
        ends = set(self.stage_ends)
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in ends:
                stages.append(x)
        return self.classifier(self.avgpool(x).flatten(1)), stages

    def forward(self, x):
        return self.forward_features(x)[0]


class Teacher(nn.Module):

    def __init__(self, backbone: VGG16, plan: DistillPlan, num_classes: int = 2):
        super().__init__()
        self.backbone = backbone
        chans = backbone.stage_channels[:NUM_BRANCHES]
        self.c_target = chans[-1]
        self.branches = BranchSet(chans, plan.teacher_transforms, self.c_target, num_classes)
        init_weights(self.branches)
        self.frozen = False

    def forward(self, x):
        logits, stages = self.backbone.forward_features(x)
        transformed, aux = self.branches(stages[:NUM_BRANCHES])
        return logits, transformed, aux


def build_teacher(plan: DistillPlan | None = None, width: float = 1.0, num_classes: int = 2) -> Teacher:
    return Teacher(VGG16(num_classes, width), plan or DistillPlan(), num_classes)


TEACHER_VERSION = 1


def save_teacher(path, teacher: Teacher, plan: DistillPlan, width: float, metadata: dict | None = None) -> None:
    torch.save({"format_version": TEACHER_VERSION, "kind": "teacher", "width": width,
                "num_classes": teacher.backbone.classifier.out_features, "plan": plan.to_dict(),
                "state_dict": teacher.state_dict(), "metadata": metadata or {}}, Path(path))


def load_teacher(path) -> tuple[Teacher, dict]:
    """Rebuild and freeze a teacher saved with :func:`save_teacher`."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("kind") != "teacher" or blob.get("format_version") != TEACHER_VERSION:
        raise ConfigError(f"{path}: not a teacher checkpoint (version {TEACHER_VERSION})")
    teacher = build_teacher(DistillPlan(**blob["plan"]), blob["width"], blob["num_classes"])
    teacher.load_state_dict(blob["state_dict"])
    return freeze(teacher), blob


def freeze(model: nn.Module) -> nn.Module:
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    model.frozen = True
    return model


def _unify(t: torch.Tensor, s: torch.Tensor):
    if t.shape[1] != s.shape[1]:
        raise ConfigError(f"branch channel mismatch: teacher {t.shape[1]} vs student {s.shape[1]}")
    h, w = min(t.shape[2], s.shape[2]), min(t.shape[3], s.shape[3])
    if t.shape[2:] != (h, w):
        t = F.adaptive_avg_pool2d(t, (h, w))
    if s.shape[2:] != (h, w):
        s = F.adaptive_avg_pool2d(s, (h, w))
    return t, s


@dataclass
class BranchFeatures:
    feature_pairs: list[tuple[torch.Tensor, torch.Tensor]]    # (teacher, student), same shape
    student_logits: list[torch.Tensor]
    teacher_logits: list[torch.Tensor]


def branch_features(student_out, teacher_out, plan: DistillPlan) -> BranchFeatures:
    s_main, s_feats, s_aux = student_out
    t_main, t_feats, t_aux = teacher_out
    idx = [b - 1 for b in plan.active_branches]
    pairs = [_unify(t_feats[i], s_feats[i]) for i in idx]
    s_logits = [s_aux[i] for i in idx]
    t_logits = [t_aux[i] for i in idx]
    if plan.include_main_head:
        s_logits.append(s_main)
        t_logits.append(t_main)
    return BranchFeatures(pairs, s_logits, t_logits)


def distill_losses(student_out, teacher_out, labels, plan: DistillPlan) -> dict[str, torch.Tensor | None]:
    bf = branch_features(student_out, teacher_out, plan)
    return {
        "attention": attention_loss(bf.feature_pairs, plan.p, plan.normalize_attention) if plan.use_attention and bf.feature_pairs else None,
        "feature": feature_loss(bf.feature_pairs, plan.feature_norm) if plan.use_feature and bf.feature_pairs else None,
        "logit": logit_loss(bf.student_logits, bf.teacher_logits, plan.temperature) if plan.use_logit else None,
        "task": task_loss(bf.student_logits, labels) if plan.use_task else None,
    }


# ---------------------------------------------------------------- training

@dataclass
class TrainSchedule:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 0.0025
    momentum: float = 0.9
    weight_decay: float = 7e-3
    grad_clip: float = 0.0      # global-norm clip; 0 disables
    cosine: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("invalid training schedule")


def _fit(model: nn.Module, loss_fn, train_set, schedule: TrainSchedule, eval_model: nn.Module,
         val_set=None, log_path=None, tag="train", extra: dict | None = None) -> list[dict]:
    torch.manual_seed(schedule.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, schedule.lr, momentum=schedule.momentum, weight_decay=schedule.weight_decay)
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, schedule.epochs))
             if schedule.cosine else None)
    loader = DataLoader(train_set, schedule.batch_size, shuffle=True,
                        generator=torch.Generator().manual_seed(schedule.seed))
    history = []
    log_file = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, schedule.epochs + 1):
            if hasattr(train_set, "set_epoch"):
                train_set.set_epoch(epoch)
            model.train()
            sums: dict[str, float] = {}
            n = 0
            for x, y in loader:
                parts = loss_fn(x, y)
                total = parts.pop("total")
                if not torch.isfinite(total):
                    detail = {k: (None if v is None else float(v.detach() if isinstance(v, torch.Tensor) else v))
                              for k, v in parts.items()}
                    raise DistillDivergence(f"{tag} epoch {epoch}: non-finite total loss; components {detail}")
                opt.zero_grad()
                total.backward()
                if schedule.grad_clip > 0:
                    nn.utils.clip_grad_norm_(params, schedule.grad_clip)
                opt.step()
                b = len(y)
                n += b
                for k, v in [*parts.items(), ("total", total)]:
                    if v is not None:
                        sums[k] = sums.get(k, 0.0) + float(v.detach() if isinstance(v, torch.Tensor) else v) * b
            if sched is not None:
                sched.step()
            rec = {"epoch": epoch, **{k: v / n for k, v in sums.items()}, **(extra or {})}
            if val_set is not None and len(val_set):
                rec["val"] = {k: v for k, v in evaluate(eval_model, val_set, group_by_cell_type=False)
                              .to_dict().items() if k not in ("confusion", "by_cell_type", "flags")}
            history.append(rec)
            log.info("%s epoch %d: %s", tag, epoch, {k: v for k, v in rec.items() if k != "val"})
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()
    model.eval()
    return history


def train_teacher(teacher: Teacher, train_set, schedule: TrainSchedule, val_set=None, log_path=None):
    """Backbone and auxiliary heads trained jointly on the summed task loss, then frozen."""

    def loss_fn(x, y):
        logits, _, aux = teacher(x)
        task = task_loss([*aux, logits], y)
        return {"task": task, "total": task}

    history = _fit(teacher, loss_fn, train_set, schedule, teacher.backbone, val_set, log_path, "teacher")
    freeze(teacher)
    return teacher, history


def train_scratch(network: Network, train_set, schedule: TrainSchedule, val_set=None, log_path=None):
    """Plain supervised training of the discrete student (main head only)."""

    def loss_fn(x, y):
        task = F.cross_entropy(network(x), y)
        return {"task": task, "total": task}

    return network, _fit(network, loss_fn, train_set, schedule, network, val_set, log_path, "scratch")


def distill_train(student: TappedStudent, teacher: Teacher, train_set, plan: DistillPlan,
                  schedule: TrainSchedule, val_set=None, log_path=None):
    """Minimize the weighted four-term loss; the teacher stays frozen throughout."""
    if not getattr(teacher, "frozen", False):
        raise ConfigError("teacher must be frozen before distillation")
    weights = plan.weights()

    def loss_fn(x, y):
        with torch.no_grad():
            t_out = teacher(x)
        parts = distill_losses(student(x), t_out, y, plan)
        parts["total"] = total_loss(parts, weights)
        return parts

    history = _fit(student, loss_fn, train_set, schedule, student.network, val_set, log_path, "distill",
                   {"branches": plan.active_branches, "main_head": plan.include_main_head})
    return student, history


def snapshot(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


__all__ = [
    "attention_map", "attention_loss", "feature_loss", "task_loss", "logit_loss", "total_loss", "DistillPlan",
    "BranchHead", "BranchSet", "TappedStudent", "attach_branches", "VGG16", "Teacher", "build_teacher", "freeze",
    "BranchFeatures", "branch_features", "distill_losses", "TrainSchedule", "train_teacher", "train_scratch",
    "distill_train", "snapshot", "DistillDivergence", "save_teacher", "load_teacher",
]

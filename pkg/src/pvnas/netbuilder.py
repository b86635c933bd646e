"""Supernet and discrete network construction, cost accounting and checkpoints."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import searchspace as ss
from .ops import MixedOp, ReLUConvBN, make_op

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class NetworkSpec:
    """Macro-architecture: stem, N/R cell sequence, channel schedule and head.

    ``init_channels`` is the stem width; a cell's node width is its output
    width divided by ``num_nodes``.
    """
    init_channels: int = 64
    num_classes: int = 2
    in_channels: int = 3
    input_size: int = 150
    layout: str = "NRNRNRNRN"
    num_nodes: int = ss.NUM_NODES
    literal_table2: bool = False
    # reduction cells after this many expand channels no further
    expanding_reductions: int = 3

    def __post_init__(self):
        if self.layout[0] != "N" or self.layout[-1] != "N" or set(self.layout) - {"N", "R"}:
            raise ConfigError(f"bad cell layout {self.layout!r}")
        if any(a == b for a, b in zip(self.layout, self.layout[1:])):
            raise ConfigError("normal and reduction cells must alternate")
        for c in self.channels:
            if c % self.num_nodes:
                raise ConfigError(f"cell width {c} not divisible by {self.num_nodes} nodes")

    @property
    def channels(self) -> list[int]:
        out, c, r = [], self.init_channels, 0
        for kind in self.layout:
            if kind == "R":
                r += 1
                if r <= self.expanding_reductions:
                    c *= 2
            out.append(c)
        return out

    def shape_plan(self) -> list[tuple[str, tuple[int, int, int]]]:
        """Expected (layer, output shape) rows from input to logits."""
        h = self.input_size
        rows = [("Input", (self.in_channels, h, h)), ("Stem", (self.init_channels, h, h))]
        for kind, c in zip(self.layout, self.channels):
            if kind == "R":
                h = math.ceil(h / 2)
            rows.append(("Normal Cell" if kind == "N" else "Reduction Cell", (c, h, h)))
        rows.append(("GAP", (self.channels[-1], 1, 1)))
        rows.append(("FC", (self.num_classes,)))
        return rows

    def to_dict(self) -> dict:
        return asdict(self)


class Cell(nn.Module):
    """One DAG cell. ``genotype`` None builds the searchable (all-ops) version."""

    def __init__(self, spec: NetworkSpec, c_pp, c_p, c_out, reduction, reduction_prev,
                 genotype: ss.CellGenotype | None = None, affine=True):
        super().__init__()
        self.reduction = reduction
        self.num_nodes = spec.num_nodes
        c = c_out // spec.num_nodes
        self.preprocess0 = ReLUConvBN(c_pp, c, 1, stride=2 if reduction_prev else 1, affine=affine)
        self.preprocess1 = ReLUConvBN(c_p, c, 1, affine=affine)
        self.searchable = genotype is None
        if self.searchable:
            self.edges = nn.ModuleList(
                MixedOp(c, ss.op_stride(reduction, e.source), affine, spec.literal_table2)
                for e in ss.enumerate_edges(spec.num_nodes))
        else:
            self.selections = list(genotype.selections)
            self.edges = nn.ModuleList(
                make_op(sel.op, c, ss.op_stride(reduction, sel.source), affine, spec.literal_table2)
                for sel in self.selections)
        self.project = ReLUConvBN(c * spec.num_nodes, c_out, 1, affine=affine)

    def forward(self, s0, s1, weights=None):
        states = [self.preprocess0(s0), self.preprocess1(s1)]
        if self.searchable:
            i = 0
            for j in range(self.num_nodes):
                n = j + ss.NUM_CELL_INPUTS
                states.append(sum(self.edges[i + k](states[k], weights[i + k]) for k in range(n)))
                i += n
        else:
            for j in range(self.num_nodes):
                states.append(sum(op(states[sel.source])
                                  for sel, op in zip(self.selections, self.edges) if sel.node == j))
        return self.project(torch.cat(states[ss.NUM_CELL_INPUTS:], dim=1))


class Network(nn.Module):

    def __init__(self, spec: NetworkSpec, genotype: ss.NetworkGenotype | None = None, affine=True):
        super().__init__()
        self.spec = spec
        self.genotype = genotype
        c0 = spec.init_channels
        self.stem = nn.Sequential(
            nn.Conv2d(spec.in_channels, c0, 3, padding=1, bias=False),
            nn.BatchNorm2d(c0, affine=affine, track_running_stats=affine),
        )
        self.cells = nn.ModuleList()
        c_pp, c_p, reduction_prev = c0, c0, False
        for kind, c in zip(spec.layout, spec.channels):
            reduction = kind == "R"
            cell_geno = None if genotype is None else (genotype.reduction if reduction else genotype.normal)
            self.cells.append(Cell(spec, c_pp, c_p, c, reduction, reduction_prev, cell_geno, affine))
            c_pp, c_p, reduction_prev = c_p, c, reduction
        self.global_pooling = nn.AdaptiveAvgPool2d(1)
        self.classifier = nn.Linear(c_p, spec.num_classes)
        init_weights(self)

    @property
    def normal_cell_indices(self) -> list[int]:
        return [i for i, k in enumerate(self.spec.layout) if k == "N"]

    def _cell_weights(self, cell):
        return None

    def forward_features(self, x):
        """Logits plus the output of every cell in order."""
        if x.dim() != 4 or x.shape[1] != self.spec.in_channels:
            raise ConfigError(f"expected input (B, {self.spec.in_channels}, H, W), got {tuple(x.shape)}")
        s0 = s1 = self.stem(x)
        feats = []
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1, self._cell_weights(cell))
            feats.append(s1)
        out = self.global_pooling(s1).flatten(1)
        return self.classifier(out), feats

    def forward(self, x):
        return self.forward_features(x)[0]


class SearchNetwork(Network):
    """Continuous relaxation: every edge mixes all ops under softmax(alpha)."""

    def __init__(self, spec: NetworkSpec, arch: ss.ArchParams | None = None):
        super().__init__(spec, None, affine=False)
        arch = arch or ss.ArchParams.zeros(spec.num_nodes)
        if arch.num_nodes != spec.num_nodes:
            raise ConfigError("architecture parameters do not match node count")
        # kept outside parameters() so the weight optimizer never sees them
        self.alphas_normal = torch.tensor(arch.normal, dtype=torch.float32, requires_grad=True)
        self.alphas_reduction = torch.tensor(arch.reduction, dtype=torch.float32, requires_grad=True)

    def arch_parameters(self) -> list[torch.Tensor]:
        return [self.alphas_normal, self.alphas_reduction]

    def weights(self):
        return self.parameters()

    def _apply(self, fn, *args, **kwargs):
        super()._apply(fn, *args, **kwargs)
        with torch.no_grad():
            for name in ("alphas_normal", "alphas_reduction"):
                a = getattr(self, name, None)
                if a is not None:
                    setattr(self, name, fn(a.detach()).requires_grad_(True))
        return self

    def _cell_weights(self, cell):
        a = self.alphas_reduction if cell.reduction else self.alphas_normal
        return F.softmax(a, dim=-1)

    def arch(self) -> ss.ArchParams:
        return ss.ArchParams(self.alphas_normal.detach().double().numpy(),
                             self.alphas_reduction.detach().double().numpy())

    def set_arch(self, arch: ss.ArchParams) -> None:
        with torch.no_grad():
            self.alphas_normal.copy_(torch.as_tensor(arch.normal))
            self.alphas_reduction.copy_(torch.as_tensor(arch.reduction))

    def derive_genotype(self, max_skip=ss.DEFAULT_MAX_SKIP) -> ss.NetworkGenotype:
        return ss.derive_genotype(self.arch(), max_skip)


def init_weights(model: nn.Module) -> None:
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d) and m.affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5))
            nn.init.zeros_(m.bias)


def build_supernet(spec: NetworkSpec, arch: ss.ArchParams | None = None) -> SearchNetwork:
    return SearchNetwork(spec, arch)


def build_discrete(spec: NetworkSpec, genotype: ss.NetworkGenotype, max_skip: int | None = None) -> Network:
    report = ss.validate_genotype(genotype, max_skip, spec.num_nodes)
    if report:
        raise ss.GenotypeError(report)
    return Network(spec, genotype)


def count_params(model: nn.Module) -> int:
    """Learnable scalars only; BN running statistics are excluded."""
    n = sum(p.numel() for p in model.parameters() if p.requires_grad)
    if isinstance(model, SearchNetwork):
        n += sum(a.numel() for a in model.arch_parameters())
    return n


def count_flops(model: nn.Module, input_shape=(3, 150, 150)) -> int:
    """2 x multiply-accumulates over Conv2d and Linear layers for one sample."""
    total = 0

    def conv_hook(m, inp, out):
        nonlocal total
        kh, kw = m.kernel_size
        total += 2 * (m.in_channels // m.groups) * kh * kw * out.shape[1] * out.shape[2] * out.shape[3]

    def linear_hook(m, inp, out):
        nonlocal total
        total += 2 * m.in_features * m.out_features

    hooks = []
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            hooks.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            hooks.append(m.register_forward_hook(linear_hook))
    was_training = model.training
    model.eval()
    try:
        p = next(model.parameters(), None)
        with torch.no_grad():
            model(torch.zeros((1, *input_shape), dtype=p.dtype if p is not None else torch.float32))
    finally:
        for h in hooks:
            h.remove()
        model.train(was_training)
    return total


def shape_trace(model: Network, input_size: int | None = None) -> list[tuple[str, tuple]]:
    """Actual (layer, per-sample shape) rows, comparable with NetworkSpec.shape_plan."""
    spec = model.spec
    h = input_size or spec.input_size
    x = torch.zeros(1, spec.in_channels, h, h)
    rows = [("Input", tuple(x.shape[1:]))]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        s0 = s1 = model.stem(x)
        rows.append(("Stem", tuple(s1.shape[1:])))
        for kind, cell in zip(spec.layout, model.cells):
            s0, s1 = s1, cell(s0, s1, model._cell_weights(cell))
            rows.append(("Normal Cell" if kind == "N" else "Reduction Cell", tuple(s1.shape[1:])))
        g = model.global_pooling(s1)
        rows.append(("GAP", tuple(g.shape[1:])))
        rows.append(("FC", tuple(model.classifier(g.flatten(1)).shape[1:])))
    model.train(was_training)
    return rows


def save_checkpoint(path, model: Network, metadata: dict | None = None) -> None:
    if model.genotype is None:
        raise ConfigError("only discrete networks are checkpointed")
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "genotype": model.genotype.to_dict(),
        "state_dict": model.state_dict(),
        "metadata": metadata or {},
    }, Path(path))


def load_checkpoint(path) -> tuple[Network, dict]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {blob.get('format_version')!r}")
    spec = NetworkSpec(**blob["spec"])
    genotype = ss.NetworkGenotype.from_dict(blob["genotype"])
    model = build_discrete(spec, genotype)
    try:
        model.load_state_dict(blob["state_dict"])
    except RuntimeError as e:
        raise ConfigError(f"checkpoint parameters inconsistent with spec/genotype: {e}") from e
    return model, blob["metadata"]


def representative_genotypes() -> list[ss.NetworkGenotype]:
    """A few fixed genotypes for cost checks: the example plus three seeded derivations."""
    out = [ss.EXAMPLE_GENOTYPE]
    for seed in (0, 1, 2):
        out.append(ss.derive_genotype(ss.ArchParams.random(np.random.default_rng(seed)), 2))
    return out


__all__ = [
    "ConfigError", "NetworkSpec", "Cell", "Network", "SearchNetwork", "build_supernet", "build_discrete",
    "count_params", "count_flops", "shape_trace", "save_checkpoint", "load_checkpoint", "init_weights",
    "representative_genotypes",
]

"""Candidate operations, cell topology, continuous relaxation and genotype derivation."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

GENOTYPE_VERSION = 1
NUM_NODES = 4
NUM_CELL_INPUTS = 2
DEFAULT_MAX_SKIP = 2


class OpKind(enum.Enum):
    SepConv3 = 0
    SepConv5 = 1
    DilConv3 = 2
    DilConv5 = 3
    MaxPool3 = 4
    AvgPool3 = 5
    SkipConnect = 6

    @property
    def is_conv(self) -> bool:
        return self in (OpKind.SepConv3, OpKind.SepConv5, OpKind.DilConv3, OpKind.DilConv5)


OPS: tuple[OpKind, ...] = tuple(OpKind)
NUM_OPS = len(OPS)


class OpGeometry(NamedTuple):
    kernel: int
    padding: int
    dilation: int


def op_geometry(op: OpKind, literal_table2: bool = False) -> OpGeometry:
    """Kernel/padding/dilation of an operation.

    With ``literal_table2`` the second dilated conv repeats the kernel-3 row
    verbatim instead of the kernel-5 variant.
    """
    if op is OpKind.SepConv3:
        return OpGeometry(3, 1, 1)
    if op is OpKind.SepConv5:
        return OpGeometry(5, 2, 1)
    if op is OpKind.DilConv3:
        return OpGeometry(3, 2, 2)
    if op is OpKind.DilConv5:
        return OpGeometry(3, 2, 2) if literal_table2 else OpGeometry(5, 4, 2)
    if op in (OpKind.MaxPool3, OpKind.AvgPool3):
        return OpGeometry(3, 1, 1)
    return OpGeometry(1, 0, 1)


def op_stride(reduction: bool, source: int) -> int:
    # only edges leaving the cell inputs downsample
    return 2 if reduction and source < NUM_CELL_INPUTS else 1


class EdgeId(NamedTuple):
    target: int
    source: int


def enumerate_edges(num_nodes: int = NUM_NODES) -> list[EdgeId]:
    """Edges in row order of the alpha matrices: by target node, then source.

    Source 0 and 1 are the two cell inputs, source ``k + 2`` is node ``k``.
    """
    return [EdgeId(j, s) for j in range(num_nodes) for s in range(j + NUM_CELL_INPUTS)]


def num_edges(num_nodes: int = NUM_NODES) -> int:
    return sum(j + NUM_CELL_INPUTS for j in range(num_nodes))


def edge_index(target: int, source: int) -> int:
    return sum(j + NUM_CELL_INPUTS for j in range(target)) + source


@dataclass
class ArchParams:
    normal: np.ndarray
    reduction: np.ndarray

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        self.reduction = np.asarray(self.reduction, dtype=np.float64)
        for name, a in (("normal", self.normal), ("reduction", self.reduction)):
            if a.ndim != 2 or a.shape[1] != NUM_OPS:
                raise ValueError(f"alpha_{name} must have shape (edges, {NUM_OPS}), got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"alpha_{name} contains non-finite values")
        if self.normal.shape != self.reduction.shape:
            raise ValueError("alpha_normal and alpha_reduction shapes differ")

    @property
    def num_nodes(self) -> int:
        e, n = self.normal.shape[0], 0
        while num_edges(n) < e:
            n += 1
        if num_edges(n) != e:
            raise ValueError(f"{e} edges do not form a complete cell")
        return n

    @classmethod
    def zeros(cls, num_nodes: int = NUM_NODES) -> "ArchParams":
        e = num_edges(num_nodes)
        return cls(np.zeros((e, NUM_OPS)), np.zeros((e, NUM_OPS)))

    @classmethod
    def random(cls, rng: np.random.Generator, num_nodes: int = NUM_NODES, scale: float = 1.0) -> "ArchParams":
        e = num_edges(num_nodes)
        return cls(rng.normal(0, scale, (e, NUM_OPS)), rng.normal(0, scale, (e, NUM_OPS)))


def mixed_op_weights(alpha_row) -> np.ndarray:
    """Softmax over candidate-op logits (max-shifted)."""
    a = np.asarray(alpha_row, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("op logits must be finite")
    z = np.exp(a - a.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


class Selection(NamedTuple):
    node: int
    source: int
    op: OpKind


@dataclass
class CellGenotype:
    kind: str
    selections: list[Selection] = field(default_factory=list)

    def __post_init__(self):
        self.selections = [Selection(int(n), int(s), OpKind[o] if isinstance(o, str) else OpKind(o))
                           for n, s, o in self.selections]

    def skip_count(self) -> int:
        return sum(sel.op is OpKind.SkipConnect for sel in self.selections)

    def to_list(self) -> list[list]:
        return [[s.node, s.source, s.op.name] for s in self.selections]


@dataclass
class NetworkGenotype:
    normal: CellGenotype
    reduction: CellGenotype

    def to_dict(self) -> dict:
        return {"version": GENOTYPE_VERSION, "normal": self.normal.to_list(), "reduction": self.reduction.to_list()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkGenotype":
        if d.get("version") != GENOTYPE_VERSION:
            raise ValueError(f"unsupported genotype version {d.get('version')!r}")
        cells = {}
        for kind in ("normal", "reduction"):
            sels = []
            for entry in d[kind]:
                node, source, name = entry
                if name not in OpKind.__members__:
                    raise ValueError(f"unknown operation name {name!r}")
                sels.append(Selection(int(node), int(source), OpKind[name]))
            cells[kind] = CellGenotype(kind, sels)
        return cls(cells["normal"], cells["reduction"])

    def dumps(self) -> str:
        d = self.to_dict()
        lines = ['{', f'  "version": {d["version"]},']
        for i, kind in enumerate(("normal", "reduction")):
            rows = ",\n".join("    " + json.dumps(r) for r in d[kind])
            tail = "," if i == 0 else ""
            lines.append(f'  "{kind}": [\n{rows}\n  ]{tail}')
        lines.append('}')
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "NetworkGenotype":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> Path:
        Path(path).write_text(self.dumps())
        return Path(path)

    @classmethod
    def load(cls, path) -> "NetworkGenotype":
        return cls.loads(Path(path).read_text())


def _derive_cell(alpha: np.ndarray, kind: str, max_skip: int | None, num_nodes: int) -> CellGenotype:
    w = mixed_op_weights(alpha)
    skip = OpKind.SkipConnect.value
    chosen: list[list] = []  # [node, source, op_index, score]
    for j in range(num_nodes):
        cands = []
        for s in range(j + NUM_CELL_INPUTS):
            row = w[edge_index(j, s)]
            k = int(np.argmax(row))  # first max = lowest op index
            cands.append((-row[k], s, k))
        cands.sort()  # best score first, then lowest source
        for _, s, k in cands[:2]:
            chosen.append([j, s, k])
    if max_skip is not None:
        skips = [c for c in chosen if c[2] == skip]
        skips.sort(key=lambda c: (w[edge_index(c[0], c[1]), skip], c[0], c[1]))
        for c in skips[:max(0, len(skips) - max_skip)]:
            row = w[edge_index(c[0], c[1])].copy()
            row[skip] = -np.inf
            c[2] = int(np.argmax(row))
    return CellGenotype(kind, [Selection(j, s, OPS[k]) for j, s, k in chosen])


def derive_genotype(arch: ArchParams, max_skip: int | None = DEFAULT_MAX_SKIP) -> NetworkGenotype:
    """Discretize architecture weights.

    Per node the two incoming edges with the largest best-op weight are kept,
    each with its argmax op. Excess skip-connects (lowest skip weight first)
    fall back to their best non-skip op. ``max_skip=None`` disables the limit.
    """
    if max_skip is not None and max_skip < 0:
        raise ValueError("max_skip must be >= 0")
    n = arch.num_nodes
    return NetworkGenotype(_derive_cell(arch.normal, "normal", max_skip, n),
                           _derive_cell(arch.reduction, "reduction", max_skip, n))


def validate_cell(cell: CellGenotype, max_skip: int | None = DEFAULT_MAX_SKIP,
                  num_nodes: int = NUM_NODES) -> list[str]:
    errs = []
    per_node: dict[int, list[int]] = {j: [] for j in range(num_nodes)}
    for sel in cell.selections:
        if not 0 <= sel.node < num_nodes:
            errs.append(f"{cell.kind}: node {sel.node} out of range 0..{num_nodes - 1}")
            continue
        if not 0 <= sel.source < sel.node + NUM_CELL_INPUTS:
            errs.append(f"{cell.kind}: node {sel.node} cites source {sel.source}; source precedes target violated")
        per_node[sel.node].append(sel.source)
    for j, sources in per_node.items():
        if len(sources) != 2:
            errs.append(f"{cell.kind}: node {j} has {len(sources)} incoming edges, expected 2")
        elif sources[0] == sources[1]:
            errs.append(f"{cell.kind}: node {j} selects source {sources[0]} twice")
    if max_skip is not None and cell.skip_count() > max_skip:
        errs.append(f"{cell.kind}: {cell.skip_count()} skip-connects exceed limit {max_skip}")
    return errs


def validate_genotype(g: NetworkGenotype, max_skip: int | None = DEFAULT_MAX_SKIP,
                      num_nodes: int = NUM_NODES) -> list[str]:
    """Every violated cell invariant; an empty list means valid."""
    errs = []
    for name in ("normal", "reduction"):
        cell = getattr(g, name)
        if cell.kind != name:
            errs.append(f"cell stored as {name} has kind {cell.kind!r}")
        errs.extend(validate_cell(cell, max_skip, num_nodes))
    return errs


class GenotypeError(ValueError):
    def __init__(self, report: Iterable[str]):
        self.report = list(report)
        super().__init__("invalid genotype:\n  " + "\n  ".join(self.report))


# Illustrative only: hand-written, not a searched result.
EXAMPLE_GENOTYPE = NetworkGenotype(
    CellGenotype("normal", [
        (0, 0, "SepConv3"), (0, 1, "DilConv3"),
        (1, 1, "SepConv5"), (1, 2, "SkipConnect"),
        (2, 0, "DilConv5"), (2, 3, "SepConv3"),
        (3, 2, "AvgPool3"), (3, 4, "SepConv3"),
    ]),
    CellGenotype("reduction", [
        (0, 0, "MaxPool3"), (0, 1, "SepConv5"),
        (1, 1, "DilConv5"), (1, 2, "SepConv3"),
        (2, 0, "SepConv3"), (2, 3, "SkipConnect"),
        (3, 1, "DilConv3"), (3, 4, "MaxPool3"),
    ]),
)

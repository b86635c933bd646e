"""Candidate operation modules. Every conv block is ReLU -> Conv -> BN."""

from __future__ import annotations

import torch.nn as nn

from .searchspace import OpKind, op_geometry


class ReLUConvBN(nn.Module):

    def __init__(self, c_in, c_out, kernel_size=1, stride=1, padding=0, affine=True):
        super().__init__()
        self.op = nn.Sequential(
            nn.ReLU(inplace=False),
            nn.Conv2d(c_in, c_out, kernel_size, stride=stride, padding=padding, bias=False),
            nn.BatchNorm2d(c_out, affine=affine, track_running_stats=affine),
        )

    def forward(self, x):
        return self.op(x)


class DilConv(nn.Module):
    """ReLU, depthwise (possibly dilated) conv, pointwise conv, BN."""

    def __init__(self, c_in, c_out, kernel_size, stride, padding, dilation, affine=True):
        super().__init__()
        self.op = nn.Sequential(
            nn.ReLU(inplace=False),
            nn.Conv2d(c_in, c_in, kernel_size, stride=stride, padding=padding, dilation=dilation,
                      groups=c_in, bias=False),
            nn.Conv2d(c_in, c_out, 1, bias=False),
            nn.BatchNorm2d(c_out, affine=affine, track_running_stats=affine),
        )

    def forward(self, x):
        return self.op(x)


class SepConv(nn.Module):
    """Depthwise-separable block applied twice; only the first half strides."""

    def __init__(self, c_in, c_out, kernel_size=3, stride=1, padding=1, affine=True):
        super().__init__()
        self.op = nn.Sequential(
            DilConv(c_in, c_in, kernel_size, stride, padding, 1, affine),
            DilConv(c_in, c_out, kernel_size, 1, padding, 1, affine),
        )

    def forward(self, x):
        return self.op(x)


class StridedProjection(ReLUConvBN):
    """Skip-connect inside a reduction cell: strided 1x1 conv, ceil-halves H/W."""

    def __init__(self, c_in, c_out, affine=True):
        super().__init__(c_in, c_out, 1, stride=2, padding=0, affine=affine)


def make_op(kind: OpKind, c: int, stride: int, affine: bool = True, literal_table2: bool = False) -> nn.Module:
    k, pad, dil = op_geometry(kind, literal_table2)
    if kind in (OpKind.SepConv3, OpKind.SepConv5):
        return SepConv(c, c, k, stride, pad, affine)
    if kind in (OpKind.DilConv3, OpKind.DilConv5):
        return DilConv(c, c, k, stride, pad, dil, affine)
    if kind is OpKind.MaxPool3:
        return nn.MaxPool2d(3, stride=stride, padding=1)
    if kind is OpKind.AvgPool3:
        return nn.AvgPool2d(3, stride=stride, padding=1, count_include_pad=False)
    if stride == 1:
        return nn.Identity()
    return StridedProjection(c, c, affine)


class MixedOp(nn.Module):
    """Softmax-weighted sum of every candidate operation on one edge."""

    def __init__(self, c, stride, affine=False, literal_table2=False):
        super().__init__()
        self.ops = nn.ModuleList(make_op(kind, c, stride, affine, literal_table2) for kind in OpKind)

    def forward(self, x, weights):
        return sum(w * op(x) for w, op in zip(weights, self.ops))


def conv_blocks(module: nn.Module) -> list[nn.Sequential]:
    """All ReLU-Conv-BN sequences in ``module`` (used for ordering assertions)."""
    out = []
    for m in module.modules():
        if isinstance(m, nn.Sequential) and any(isinstance(c, nn.Conv2d) for c in m.children()):
            out.append(m)
    return out


def has_relu_conv_bn_order(seq: nn.Sequential) -> bool:
    kinds = [type(c) for c in seq.children()]
    return (len(kinds) >= 3 and kinds[0] is nn.ReLU and kinds[-1] is nn.BatchNorm2d
            and all(k is nn.Conv2d for k in kinds[1:-1]))


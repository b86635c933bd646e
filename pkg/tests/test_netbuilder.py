import numpy as np
import pytest
import torch
import torch.nn as nn

from pvnas import searchspace as ss
from pvnas.netbuilder import (ConfigError, Network, NetworkSpec, build_discrete, build_supernet, count_flops,
                              count_params, load_checkpoint, representative_genotypes, save_checkpoint,
                              shape_trace)
from pvnas.ops import MixedOp, conv_blocks, has_relu_conv_bn_order, make_op

# Macro layout at C0 = 64 on a 3x150x150 input
MACRO_SHAPES = [
    ("Input", (3, 150, 150)), ("Stem", (64, 150, 150)),
    ("Normal Cell", (64, 150, 150)), ("Reduction Cell", (128, 75, 75)),
    ("Normal Cell", (128, 75, 75)), ("Reduction Cell", (256, 38, 38)),
    ("Normal Cell", (256, 38, 38)), ("Reduction Cell", (512, 19, 19)),
    ("Normal Cell", (512, 19, 19)), ("Reduction Cell", (512, 10, 10)),
    ("Normal Cell", (512, 10, 10)), ("GAP", (512, 1, 1)), ("FC", (2,)),
]

SMALL = NetworkSpec(init_channels=8, input_size=16)


def enumerate_params(model: nn.Module) -> int:
    """Independent count from layer hyperparameters, not from tensor sizes."""
    n = 0
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            kh, kw = m.kernel_size
            n += m.out_channels * (m.in_channels // m.groups) * kh * kw + (m.out_channels if m.bias is not None else 0)
        elif isinstance(m, nn.BatchNorm2d) and m.affine:
            n += 2 * m.num_features
        elif isinstance(m, nn.Linear):
            n += m.in_features * m.out_features + m.out_features
    return n


def test_spec_schedule():
    spec = NetworkSpec()
    assert spec.channels == [64, 128, 128, 256, 256, 512, 512, 512, 512]
    assert spec.layout.count("N") == 5 and spec.layout.count("R") == 4
    assert spec.shape_plan() == MACRO_SHAPES


@pytest.mark.parametrize("layout", ["RNRN", "NNRN", "NRXN"])
def test_spec_rejects_bad_layout(layout):
    with pytest.raises(ConfigError):
        NetworkSpec(layout=layout)


def test_discrete_shape_trace_macro_shapes():
    net = build_discrete(NetworkSpec(), ss.EXAMPLE_GENOTYPE)
    assert shape_trace(net) == MACRO_SHAPES


def test_supernet_shape_trace_macro_shapes():
    net = build_supernet(NetworkSpec())
    assert shape_trace(net) == MACRO_SHAPES


def test_all_skip_genotype_shape_valid():
    sels = [(j, s, "SkipConnect") for j in range(4) for s in (0, 1)]
    g = ss.NetworkGenotype(ss.CellGenotype("normal", sels), ss.CellGenotype("reduction", sels))
    with pytest.raises(ss.GenotypeError):
        build_discrete(SMALL, g, max_skip=2)
    net = build_discrete(NetworkSpec(), g, max_skip=None)
    assert shape_trace(net) == MACRO_SHAPES


def test_forward_rejects_bad_input():
    net = build_discrete(SMALL, ss.EXAMPLE_GENOTYPE)
    with pytest.raises(ConfigError):
        net(torch.zeros(1, 1, 16, 16))


def test_relu_conv_bn_order():
    for model in (build_discrete(SMALL, ss.EXAMPLE_GENOTYPE), build_supernet(SMALL)):
        blocks = [b for c in model.cells for b in conv_blocks(c)]
        assert blocks and all(has_relu_conv_bn_order(b) for b in blocks)


def test_uniform_alpha_is_average_of_ops():
    torch.manual_seed(0)
    edge = MixedOp(4, 1).eval()
    x = torch.randn(2, 4, 8, 8)
    w = torch.softmax(torch.zeros(7), 0)
    expected = sum(op(x) for op in edge.ops) / 7
    torch.testing.assert_close(edge(x, w), expected, rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("stride", [1, 2])
def test_one_hot_edge_equals_discrete_op(stride):
    torch.manual_seed(0)
    edge = MixedOp(4, stride, affine=True).eval()
    x = torch.randn(2, 4, 9, 9)
    for k, kind in enumerate(ss.OPS):
        single = make_op(kind, 4, stride, affine=True)
        single.load_state_dict(edge.ops[k].state_dict())
        single.eval()
        torch.testing.assert_close(edge(x, torch.eye(7)[k]), single(x), rtol=1e-5, atol=1e-5)


def test_reduction_ops_halve_with_ceil():
    x = torch.randn(1, 4, 19, 19)
    for kind in ss.OPS:
        assert make_op(kind, 4, 2).eval()(x).shape == (1, 4, 10, 10), kind
        assert make_op(kind, 4, 1).eval()(x).shape == (1, 4, 19, 19), kind


def test_alpha_gradient_matches_finite_differences():
    torch.manual_seed(0)
    edge = MixedOp(4, 1).double()
    x = torch.randn(4, 4, 8, 8, dtype=torch.float64)
    target = torch.randn(4, 4, 8, 8, dtype=torch.float64)
    alpha = torch.randn(7, dtype=torch.float64, requires_grad=True)

    def loss(a):
        return ((edge(x, torch.softmax(a, 0)) - target) ** 2).mean()

    loss(alpha).backward()
    eps = 1e-6
    for k in range(7):
        e = torch.zeros(7, dtype=torch.float64)
        e[k] = eps
        with torch.no_grad():
            fd = (loss(alpha + e) - loss(alpha - e)) / (2 * eps)
        assert abs(alpha.grad[k] - fd) <= 1e-3 * max(abs(fd), 1e-8)


def test_supernet_alphas_outside_parameters():
    net = build_supernet(SMALL)
    ids = {id(p) for p in net.parameters()}
    assert all(id(a) not in ids for a in net.arch_parameters())
    assert net.derive_genotype() == ss.derive_genotype(ss.ArchParams.zeros())


# ------------------------------------------------------------------ counting

def test_stem_param_formula():
    net = build_discrete(NetworkSpec(), ss.EXAMPLE_GENOTYPE)
    assert count_params(net.stem) == 3 * 3 * 3 * 64 + 2 * 64


def test_head_params():
    assert count_params(nn.Linear(512, 2)) == 1026


@pytest.mark.parametrize("genotype", representative_genotypes(), ids=["example", "seed0", "seed1", "seed2"])
def test_count_params_equals_enumeration(genotype):
    net = build_discrete(NetworkSpec(), genotype)
    assert count_params(net) == enumerate_params(net)
    assert 1_000_000 <= count_params(net) <= 3_000_000


def test_supernet_count_includes_alphas():
    net = build_supernet(SMALL)
    assert count_params(net) == enumerate_params(net) + 2 * 14 * 7


def test_flops_single_conv():
    conv = nn.Conv2d(3, 64, 3, padding=1, bias=False)
    assert count_flops(conv, (3, 150, 150)) == 2 * (3 * 3 * 3 * 64 * 150 * 150)


@pytest.mark.parametrize("kind", [ss.OpKind.MaxPool3, ss.OpKind.AvgPool3, ss.OpKind.SkipConnect])
def test_pool_and_skip_are_free(kind):
    assert count_flops(make_op(kind, 8, 1), (8, 16, 16)) == 0


def test_count_flops_deterministic():
    net = build_discrete(SMALL, ss.EXAMPLE_GENOTYPE)
    assert count_flops(net, (3, 16, 16)) == count_flops(net, (3, 16, 16))


@pytest.mark.parametrize("genotype", representative_genotypes()[:2], ids=["example", "seed0"])
def test_full_model_flops_band(genotype):
    """Reference figure is about 1.1G; the accepted desk band is 0.5G-2G (2 x MAC)."""
    flops = count_flops(build_discrete(NetworkSpec(), genotype))
    assert 0.5e9 <= flops <= 2e9, f"{flops / 1e9:.2f}G FLOPs ({flops / 2e9:.2f}G MACs)"


# ------------------------------------------------------------------ training / io

def test_overfit_twenty_images():
    from pvnas.datapipe import SyntheticSpec, synthetic_samples, to_chw
    torch.manual_seed(0)
    samples = synthetic_samples(20, 3, SyntheticSpec(size=16))
    x = torch.tensor(np.stack([to_chw(s.image) for s in samples]))
    x = (x - x.mean()) / x.std()
    y = torch.tensor([s.label for s in samples])
    net = build_discrete(SMALL, ss.EXAMPLE_GENOTYPE)
    opt = torch.optim.SGD(net.parameters(), 0.05, momentum=0.9)
    for _ in range(200):
        opt.zero_grad()
        nn.functional.cross_entropy(net(x), y).backward()
        opt.step()
    net.eval()
    with torch.no_grad():
        assert (net(x).argmax(1) == y).all()


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(0)
    net = build_discrete(SMALL, ss.EXAMPLE_GENOTYPE).eval()
    save_checkpoint(tmp_path / "m.pt", net, {"note": "x"})
    net2, meta = load_checkpoint(tmp_path / "m.pt")
    net2.eval()
    x = torch.randn(2, 3, 16, 16)
    assert meta == {"note": "x"}
    assert torch.equal(net(x), net2(x))


def test_checkpoint_rejects_inconsistent_genotype(tmp_path):
    net = build_discrete(SMALL, ss.EXAMPLE_GENOTYPE)
    save_checkpoint(tmp_path / "m.pt", net)
    blob = torch.load(tmp_path / "m.pt", weights_only=False)
    blob["genotype"] = representative_genotypes()[1].to_dict()
    torch.save(blob, tmp_path / "bad.pt")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "bad.pt")


def test_supernet_not_checkpointed(tmp_path):
    with pytest.raises(ConfigError):
        save_checkpoint(tmp_path / "s.pt", build_supernet(SMALL))

import json

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch.func import functional_call
from torch.utils.data import TensorDataset

from pvnas import searchengine as se
from pvnas import searchspace as ss
from pvnas.datapipe import SampleDataset, SyntheticSpec, synthetic_samples
from pvnas.netbuilder import ConfigError, NetworkSpec, build_supernet

TINY = NetworkSpec(init_channels=8, input_size=8)


def batch(n=8, seed=0, size=8):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, 3, size, size, generator=g), torch.randint(0, 2, (n,), generator=g)


def toy_sets(n=32, size=8):
    samples = synthetic_samples(2 * n, 11, SyntheticSpec(size=size))
    return SampleDataset(samples[:n]), SampleDataset(samples[n:])


def flat(ts):
    return torch.cat([t.detach().flatten() for t in ts])


def test_config_defaults():
    cfg = se.SearchConfig()
    assert (cfg.a_lr, cfg.a_betas, cfg.a_weight_decay) == (3e-4, (0.5, 0.999), 1e-3)
    assert (cfg.w_lr, cfg.w_lr_min, cfg.w_momentum, cfg.w_weight_decay, cfg.grad_clip) == (0.025, 0.001, 0.9, 3e-4, 5)
    assert cfg.max_skip == 2 and cfg.early_stop_patience == 2
    for bad in (dict(order="third"), dict(max_epochs=-1), dict(a_lr=-1), dict(max_skip=-1)):
        with pytest.raises(ConfigError):
            se.SearchConfig(**bad)


@pytest.mark.parametrize("order", ["first", "second"])
def test_alpha_step_descends(order):
    """Adam's first step moves every alpha against its gradient."""
    cfg = se.SearchConfig(a_weight_decay=0, order=order)
    state = se.init_state(TINY, cfg)
    tb, vb = batch(seed=1), batch(seed=2)
    if order == "first":
        grads, _ = se._arch_grads_first(state, *vb)
    else:
        grads, _ = se._arch_grads_second(state, *tb, *vb, cfg)
    before = flat(state.model.arch_parameters())
    se.search_step(state, tb, vb, cfg)
    delta = flat(state.model.arch_parameters()) - before
    g = flat(grads)
    mask = g.abs() > 1e-7
    assert mask.sum() > 20
    assert torch.equal(torch.sign(delta[mask]), -torch.sign(g[mask]))


def test_zero_learning_rates_change_nothing():
    cfg = se.SearchConfig(w_lr=0, w_lr_min=0, a_lr=0)
    state = se.init_state(TINY, cfg)
    a0, w0 = flat(state.model.arch_parameters()), flat(state.model.weights())
    se.search_step(state, batch(seed=1), batch(seed=2), cfg)
    assert torch.equal(a0, flat(state.model.arch_parameters()))
    assert torch.equal(w0, flat(state.model.weights()))


@pytest.mark.parametrize("order", ["first", "second"])
def test_two_steps_bitwise_deterministic(order):
    cfg = se.SearchConfig(order=order, seed=3)
    runs = []
    for _ in range(2):
        state = se.init_state(TINY, cfg)
        for s in range(2):
            se.search_step(state, batch(seed=s), batch(seed=10 + s), cfg)
        runs.append((flat(state.model.arch_parameters()), flat(state.model.weights())))
    assert torch.equal(runs[0][0], runs[1][0]) and torch.equal(runs[0][1], runs[1][1])


def test_alpha_isolated_from_weight_step():
    """A zero validation loss leaves alpha untouched even though weights move."""
    cfg = se.SearchConfig(a_weight_decay=0)
    state = se.init_state(TINY, cfg)
    state.val_criterion = lambda out, y: 0.0 * F.cross_entropy(out, y)
    a0, w0 = flat(state.model.arch_parameters()), flat(state.model.weights())
    se.search_step(state, batch(seed=1), batch(seed=2), cfg)
    assert torch.equal(a0, flat(state.model.arch_parameters()))
    assert not torch.equal(w0, flat(state.model.weights()))


def test_weight_step_ignores_validation_batch():
    """Weights only see training data: swapping the validation batch changes alpha, not the weight update."""
    cfg = se.SearchConfig(a_lr=0)
    outs = []
    for v in (2, 3):
        state = se.init_state(TINY, cfg)
        se.search_step(state, batch(seed=1), batch(seed=v), cfg)
        outs.append(flat(state.model.weights()))
    assert torch.equal(*outs)


def test_second_order_gradient_finite_differences():
    torch.manual_seed(0)
    cfg = se.SearchConfig(order="second")
    rng = np.random.default_rng(0)
    model = build_supernet(NetworkSpec(init_channels=4, input_size=16), ss.ArchParams.random(rng)).double()
    w_opt = torch.optim.SGD(model.weights(), cfg.w_lr)
    state = se.SearchState(model, w_opt, torch.optim.Adam(model.arch_parameters()))
    (xt, yt), (xv, yv) = batch(8, 1, 16), batch(8, 2, 16)
    xt, xv = xt.double(), xv.double()
    grads, _ = se._arch_grads_second(state, xt, yt, xv, yv, cfg)

    names, params = zip(*model.named_parameters())

    def unrolled_val():
        loss_t = F.cross_entropy(model(xt), yt)
        gs = torch.autograd.grad(loss_t, params)
        w = {n: p.detach() - cfg.w_lr * (g + cfg.w_weight_decay * p.detach()) for n, p, g in zip(names, params, gs)}
        return F.cross_entropy(functional_call(model, w, (xv,)), yv).item()

    eps = 1e-7   # larger steps cross max-pool / ReLU kinks
    a = model.alphas_normal
    for idx in [(0, 0), (3, 6), (13, 2)]:
        with torch.no_grad():
            orig = a[idx].item()
            a[idx] = orig + eps
        up = unrolled_val()
        with torch.no_grad():
            a[idx] = orig - eps
        down = unrolled_val()
        with torch.no_grad():
            a[idx] = orig
        fd = (up - down) / (2 * eps)
        assert abs(grads[0][idx].item() - fd) <= 1e-3 * max(abs(fd), 1e-6), (idx, grads[0][idx].item(), fd)


def test_zero_epochs_returns_initial_genotype():
    rng = np.random.default_rng(5)
    arch = ss.ArchParams.random(rng, scale=3)
    arch.normal[:, 6] = -10
    train, val = toy_sets(8)
    geno, state = se.run_search(train, val, se.SearchConfig(max_epochs=0), TINY, arch)
    assert geno == ss.derive_genotype(arch)
    assert state.history == []


def test_validation_loss_decreases_over_three_epochs(tmp_path):
    train, val = toy_sets(64)
    cfg = se.SearchConfig(max_epochs=3, batch_size=16, init_channels=8)
    _, state = se.run_search(train, val, cfg, TINY, log_path=tmp_path / "h.jsonl")
    losses = [r["val_loss"] for r in state.history]
    assert len(losses) == 3
    assert losses[0] > losses[1] > losses[2], losses


def test_forced_skip_stops_after_first_epoch(tmp_path):
    arch = ss.ArchParams.zeros()
    arch.normal[:, 6] = 5.0
    train, val = toy_sets(16)
    geno, state = se.run_search(train, val, se.SearchConfig(max_epochs=10, batch_size=8), TINY, arch,
                                log_path=tmp_path / "h.jsonl", snapshot_dir=tmp_path / "snaps")
    assert len(state.history) == 1 and state.history[0]["early_stop"]
    assert state.history[0]["skip_normal"] == 8
    assert geno.normal.skip_count() == 2
    assert ss.validate_genotype(geno) == []


def test_history_log_and_snapshots(tmp_path):
    train, val = toy_sets(16)
    _, state = se.run_search(train, val, se.SearchConfig(max_epochs=2, batch_size=8), TINY,
                             log_path=tmp_path / "h.jsonl", snapshot_dir=tmp_path / "snaps")
    lines = [json.loads(s) for s in (tmp_path / "h.jsonl").read_text().splitlines()]
    assert lines == state.history
    assert [r["epoch"] for r in lines] == [1, 2]
    assert {"train_loss", "val_loss", "val_acc", "skip_normal", "skip_reduction", "genotype"} <= set(lines[0])
    for r in lines:
        assert ss.validate_genotype(ss.NetworkGenotype.load(r["genotype"])) == []


def test_cosine_schedule_reaches_floor():
    train, val = toy_sets(8)
    _, state = se.run_search(train, val, se.SearchConfig(max_epochs=2, batch_size=8), TINY)
    assert state.w_optimizer.param_groups[0]["lr"] == pytest.approx(0.001)


def test_empty_split_rejected():
    empty = TensorDataset(torch.zeros(0, 3, 8, 8), torch.zeros(0, dtype=torch.long))
    train, _ = toy_sets(8)
    with pytest.raises(ConfigError):
        se.run_search(empty, train, se.SearchConfig(max_epochs=1), TINY)
    with pytest.raises(ConfigError):
        se.run_search(train, empty, se.SearchConfig(max_epochs=1), TINY)


def test_divergence_detected():
    cfg = se.SearchConfig()
    state = se.init_state(TINY, cfg)
    x, y = batch()
    with pytest.raises(se.SearchDivergence):
        se.search_step(state, (x * float("nan"), y), (x, y), cfg)

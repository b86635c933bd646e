"""Bilevel architecture search: alpha on validation loss, weights on training loss."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call
from torch.utils.data import DataLoader, Dataset

from . import searchspace as ss
from .netbuilder import ConfigError, NetworkSpec, SearchNetwork, build_supernet

log = logging.getLogger(__name__)


class SearchDivergence(RuntimeError):
    pass


@dataclass
class SearchConfig:
    max_epochs: int = 50
    batch_size: int = 32
    init_channels: int = 16
    w_lr: float = 0.025
    w_lr_min: float = 0.001
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    grad_clip: float = 5.0
    a_lr: float = 3e-4
    a_betas: tuple[float, float] = (0.5, 0.999)
    a_weight_decay: float = 1e-3
    max_skip: int = ss.DEFAULT_MAX_SKIP
    order: str = "first"
    early_stop_patience: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 0 or self.batch_size < 1:
            raise ConfigError("max_epochs must be >= 0 and batch_size >= 1")
        if min(self.w_lr, self.a_lr, self.w_weight_decay, self.a_weight_decay) < 0:
            raise ConfigError("learning rates and weight decays must be non-negative")
        if self.order not in ("first", "second"):
            raise ConfigError(f"order must be 'first' or 'second', not {self.order!r}")
        if self.max_skip < 0:
            raise ConfigError("max_skip must be >= 0")
        self.a_betas = tuple(self.a_betas)


@dataclass
class SearchState:
    model: SearchNetwork
    w_optimizer: torch.optim.Optimizer
    a_optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LRScheduler | None = None
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    train_criterion: Callable = F.cross_entropy
    val_criterion: Callable = F.cross_entropy
    last_losses: tuple[float, float] = (float("nan"), float("nan"))

    @property
    def arch(self) -> ss.ArchParams:
        return self.model.arch()


def init_state(spec: NetworkSpec, cfg: SearchConfig, arch: ss.ArchParams | None = None) -> SearchState:
    torch.manual_seed(cfg.seed)
    model = build_supernet(spec, arch)
    w_opt = torch.optim.SGD(model.weights(), cfg.w_lr, momentum=cfg.w_momentum, weight_decay=cfg.w_weight_decay)
    a_opt = torch.optim.Adam(model.arch_parameters(), lr=cfg.a_lr, betas=cfg.a_betas,
                             weight_decay=cfg.a_weight_decay)
    sched = None
    if cfg.max_epochs > 0:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(w_opt, cfg.max_epochs, eta_min=cfg.w_lr_min)
    return SearchState(model, w_opt, a_opt, sched)


def _check(loss: torch.Tensor, what: str) -> None:
    if not torch.isfinite(loss):
        raise SearchDivergence(f"{what} loss is {loss.item()}; learning rate too high or bad input data")


def _arch_grads_first(state: SearchState, xv, yv) -> tuple[list[torch.Tensor], torch.Tensor]:
    loss = state.val_criterion(state.model(xv), yv)
    _check(loss, "validation")
    return list(torch.autograd.grad(loss, state.model.arch_parameters())), loss


def _arch_grads_second(state: SearchState, xt, yt, xv, yv, cfg: SearchConfig):
    """Gradient of L_val(w - lr * grad L_train(w, a), a) w.r.t. a, exact through the unroll."""
    model = state.model
    names, params = zip(*model.named_parameters())
    lr = state.w_optimizer.param_groups[0]["lr"]
    loss_t = state.train_criterion(model(xt), yt)
    _check(loss_t, "training")
    grads = torch.autograd.grad(loss_t, params, create_graph=True)
    unrolled = {n: p - lr * (g + cfg.w_weight_decay * p) for n, p, g in zip(names, params, grads)}
    loss_v = state.val_criterion(functional_call(model, unrolled, (xv,)), yv)
    _check(loss_v, "validation")
    return list(torch.autograd.grad(loss_v, model.arch_parameters())), loss_v


def search_step(state: SearchState, train_batch, val_batch, cfg: SearchConfig) -> SearchState:
    """One alpha update on the validation batch, then one weight update on the training batch."""
    model = state.model
    model.train()
    xt, yt = train_batch
    xv, yv = val_batch

    state.a_optimizer.zero_grad(set_to_none=False)
    if cfg.order == "second":
        a_grads, val_loss = _arch_grads_second(state, xt, yt, xv, yv, cfg)
    else:
        a_grads, val_loss = _arch_grads_first(state, xv, yv)
    for a, g in zip(model.arch_parameters(), a_grads):
        a.grad = g.detach()
    state.a_optimizer.step()

    weights = list(model.weights())
    state.w_optimizer.zero_grad(set_to_none=False)
    loss = state.train_criterion(model(xt), yt)
    _check(loss, "training")
    for p, g in zip(weights, torch.autograd.grad(loss, weights)):
        p.grad = g
    if cfg.grad_clip > 0:
        nn.utils.clip_grad_norm_(weights, cfg.grad_clip)
    state.w_optimizer.step()
    state.last_losses = (loss.item(), val_loss.item())
    return state


def evaluate_loss(model: nn.Module, loader: DataLoader) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over a loader."""
    model.eval()
    total, correct, n = 0.0, 0, 0
    with torch.no_grad():
        for x, y in loader:
            out = model(x)
            total += F.cross_entropy(out, y, reduction="sum").item()
            correct += (out.argmax(1) == y).sum().item()
            n += len(y)
    return total / n, correct / n


def _skip_counts(arch: ss.ArchParams) -> tuple[int, int]:
    g = ss.derive_genotype(arch, None)
    return g.normal.skip_count(), g.reduction.skip_count()


def run_search(train_set: Dataset, val_set: Dataset, cfg: SearchConfig, spec: NetworkSpec | None = None,
               arch: ss.ArchParams | None = None, log_path=None, snapshot_dir=None):
    """Alternate alpha/weight steps for up to ``cfg.max_epochs`` epochs.

    Stops early once the unconstrained normal cell holds more than
    ``cfg.max_skip`` skip-connects for ``cfg.early_stop_patience``
    consecutive checks (the initial alphas count as the first check).
    Returns the constrained genotype and the final state.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("search-train and search-val splits must be non-empty")
    spec = spec or NetworkSpec(init_channels=cfg.init_channels)
    state = init_state(spec, cfg, arch)
    g = torch.Generator().manual_seed(cfg.seed)
    train_loader = DataLoader(train_set, cfg.batch_size, shuffle=True, generator=g, drop_last=False)
    val_loader = DataLoader(val_set, cfg.batch_size, shuffle=True, generator=g, drop_last=False)
    val_eval = DataLoader(val_set, cfg.batch_size, shuffle=False)
    log_file = open(log_path, "w") if log_path else None
    if snapshot_dir:
        Path(snapshot_dir).mkdir(parents=True, exist_ok=True)

    over = int(_skip_counts(state.arch)[0] > cfg.max_skip)
    try:
        while state.epoch < cfg.max_epochs and over < cfg.early_stop_patience:
            for ds in (train_set, val_set):
                if hasattr(ds, "set_epoch"):
                    ds.set_epoch(state.epoch)
            losses = []
            for train_batch, val_batch in zip(train_loader, _cycle(val_loader)):
                search_step(state, train_batch, val_batch, cfg)
                losses.append(state.last_losses[0])
            if state.scheduler is not None:
                state.scheduler.step()
            state.epoch += 1
            val_loss, val_acc = evaluate_loss(state.model, val_eval)
            skip_n, skip_r = _skip_counts(state.arch)
            over = over + 1 if skip_n > cfg.max_skip else 0
            geno = ss.derive_genotype(state.arch, cfg.max_skip)
            snap = None
            if snapshot_dir:
                snap = str(Path(snapshot_dir) / f"genotype_epoch{state.epoch:03d}.json")
                geno.save(snap)
            rec = {"epoch": state.epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss,
                   "val_acc": val_acc, "skip_normal": skip_n, "skip_reduction": skip_r,
                   "genotype": snap, "early_stop": over >= cfg.early_stop_patience}
            state.history.append(rec)
            log.info("search epoch %d: train %.4f val %.4f skips %d/%d", state.epoch, rec["train_loss"],
                     val_loss, skip_n, skip_r)
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()
    return ss.derive_genotype(state.arch, cfg.max_skip), state


def _cycle(loader):
    while True:
        yield from loader


def config_dict(cfg: SearchConfig) -> dict:
    d = asdict(cfg)
    d["a_betas"] = list(d["a_betas"])
    return d


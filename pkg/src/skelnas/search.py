"""Alternating optimization of architecture logits and network weights.

Each step first moves the architecture logits along the hypergradient of
the validation loss through a one-step virtual weight update, then takes
one committed momentum step on the weights.  The second-order term uses a
symmetric finite difference of the training gradient in the direction of
the validation gradient at the virtual weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import supernet as sn
from . import tensor as tc
from .errors import ConfigurationError, NumericFault

METRICS_COLUMNS = (
    "epoch",
    "step",
    "train_loss",
    "val_loss",
    "val_top1",
    "mean_edge_entropy_normal",
    "mean_edge_entropy_reduce",
    "lr_omega",
    "lr_alpha",
)


@dataclass
class SearchConfig:
    epochs: int = 20
    batch_size: int = 8
    lr_omega: float = 0.025
    lr_min: float = 1e-4
    lr_alpha: float = 3e-4
    momentum: float = 0.9
    order: str = "second"  # "second" or "first"
    fd_radius: float = 0.01
    alpha_weight_decay: float = 0.0
    decay: str = "cosine"  # "cosine" or "step"
    lr_granularity: str = "epoch"  # "epoch" or "step"
    seed: int = 0


def lr_at(cfg, fraction):
    """Weight learning rate at a schedule fraction in [0, 1]."""
    fraction = min(max(fraction, 0.0), 1.0)
    if cfg.decay == "cosine":
        return cfg.lr_min + (cfg.lr_omega - cfg.lr_min) * 0.5 * (
            1.0 + math.cos(math.pi * fraction)
        )
    if cfg.decay == "step":
        if fraction < 0.5:
            factor = 1.0
        elif fraction < 0.75:
            factor = 0.1
        else:
            factor = 0.01
        return max(cfg.lr_min, cfg.lr_omega * factor)
    raise ConfigurationError(f"unknown decay law {cfg.decay!r}")


def _loss_value(loss):
    v = loss.item()
    if not math.isfinite(v):
        raise NumericFault(f"non-finite loss {v}")
    return v


def _collect_grads(tensors):
    return [
        np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors
    ]


def virtual_step(params, train_loss_fn, epsilon):
    """One detached gradient step on the weights, without momentum.

    Returns the stepped copies; the live parameters are left untouched
    and all gradients are cleared.
    """
    if epsilon == 0.0:
        return [p.data.copy() for p in params]
    loss = train_loss_fn()
    _loss_value(loss)
    loss.backward()
    stepped = []
    for p in params:
        g = p.tensor.grad
        if g is not None and not np.isfinite(g).all():
            raise NumericFault(f"non-finite gradient for {p.name}")
        stepped.append(p.data.copy() if g is None else p.data - epsilon * g)
    tc.zero_grads(params)
    return stepped


def _set_params(params, values):
    for p, v in zip(params, values):
        p.tensor.data[...] = v


def alpha_hypergradient(
    params, alpha_tensors, train_loss_fn, val_loss_fn, epsilon, fd_radius=0.01
):
    """Gradient of the validation loss w.r.t. the architecture logits.

    With ``epsilon`` zero this is exactly the plain validation gradient at
    the current weights.  Otherwise the direct term is evaluated at the
    virtual weights and the weight-coupling term is approximated by
    differencing the training gradient at weights perturbed along the
    validation gradient: grad - epsilon * (g+ - g-) / (2h), h = r/||v||.
    """
    for t in alpha_tensors:
        t.zero_grad()
    tc.zero_grads(params)

    if epsilon == 0.0:
        loss = val_loss_fn()
        _loss_value(loss)
        loss.backward()
        result = _collect_grads(alpha_tensors)
        for t in alpha_tensors:
            t.zero_grad()
        tc.zero_grads(params)
        return result

    saved = [p.data.copy() for p in params]
    w_prime = virtual_step(params, train_loss_fn, epsilon)
    # the virtual step's backward also touched the architecture logits
    for t in alpha_tensors:
        t.zero_grad()

    _set_params(params, w_prime)
    loss = val_loss_fn()
    _loss_value(loss)
    loss.backward()
    dalpha = _collect_grads(alpha_tensors)
    v = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for t in alpha_tensors:
        t.zero_grad()
    tc.zero_grads(params)

    vnorm = math.sqrt(sum(float(np.vdot(vi, vi)) for vi in v))
    if vnorm == 0.0:
        _set_params(params, saved)
        return dalpha

    h = fd_radius / vnorm

    # the two probe passes only need logit gradients; freezing the weight
    # leaves prunes their gradient work from the graph
    for p in params:
        p.tensor.requires_grad = False
    try:
        _set_params(params, [w + h * vi for w, vi in zip(saved, v)])
        loss = train_loss_fn()
        _loss_value(loss)
        loss.backward()
        dalpha_plus = _collect_grads(alpha_tensors)
        for t in alpha_tensors:
            t.zero_grad()

        _set_params(params, [w - h * vi for w, vi in zip(saved, v)])
        loss = train_loss_fn()
        _loss_value(loss)
        loss.backward()
        dalpha_minus = _collect_grads(alpha_tensors)
        for t in alpha_tensors:
            t.zero_grad()
    finally:
        for p in params:
            p.tensor.requires_grad = True

    _set_params(params, saved)
    scale = epsilon / (2.0 * h)
    return [
        dv - scale * (dp - dm)
        for dv, dp, dm in zip(dalpha, dalpha_plus, dalpha_minus)
    ]


class SearchState:
    """Everything one search loop mutates: weights, logits, counters."""

    def __init__(self, net, alphas, cfg):
        self.net = net
        self.alphas = alphas
        self.cfg = cfg
        self.epoch = 0
        self.global_step = 0
        self.lr_omega = cfg.lr_omega
        self.epsilon = cfg.lr_omega if cfg.order == "second" else 0.0

    def params(self):
        return self.net.params()


def search_step(state, train_batch, val_batch):
    """One alternation: logits move on the hypergradient, then one weight step."""
    Xt, yt = train_batch
    Xv, yv = val_batch
    net, alphas, cfg = state.net, state.alphas, state.cfg

    def train_loss_fn():
        return net.loss(Xt, yt, alphas, train=True)

    def val_loss_fn():
        return net.loss(Xv, yv, alphas, train=True)

    params = state.params()
    grads = alpha_hypergradient(
        params,
        alphas.tensors(),
        train_loss_fn,
        val_loss_fn,
        state.epsilon,
        cfg.fd_radius,
    )
    if cfg.lr_alpha != 0.0:
        for t, g in zip(alphas.tensors(), grads):
            if cfg.alpha_weight_decay:
                g = g + cfg.alpha_weight_decay * t.data
            t.data -= cfg.lr_alpha * g

    loss = train_loss_fn()
    value = _loss_value(loss)
    loss.backward()
    tc.sgd_momentum_step(params, state.lr_omega, cfg.momentum)
    for t in alphas.tensors():
        t.zero_grad()
    state.global_step += 1
    return value


class _BatchStream:
    """Endless shuffled batches over one split, reshuffled when exhausted."""

    def __init__(self, X, y, batch_size, rng):
        self.X = X
        self.y = y
        self.batch_size = batch_size
        self.rng = rng
        self._order = rng.permutation(len(y))
        self._pos = 0

    def next(self):
        if self._pos >= len(self.y):
            self._order = self.rng.permutation(len(self.y))
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.X[idx], self.y[idx]


def evaluate_supernet(net, alphas, X, y, batch_size):
    """Eval-mode loss and top-1 over one split."""
    total_loss = 0.0
    hits = 0
    n = len(y)
    for start in range(0, n, batch_size):
        xb = X[start : start + batch_size]
        yb = y[start : start + batch_size]
        logits = net.forward(xb, alphas, train=False)
        loss, probs = tc.softmax_cross_entropy(logits, yb)
        total_loss += loss.item() * len(yb)
        hits += int((probs.argmax(axis=1) == yb).sum())
    return total_loss / n, hits / n


def run_search(net, alphas, cfg, train_data, val_data, csv_path=None):
    """Full search loop; returns (alpha history, best alpha snapshot).

    History holds one snapshot per epoch starting with the initial state;
    best is the snapshot with the highest validation top-1 (later epochs
    win ties).  Per-epoch metrics go to ``csv_path`` when given.
    """
    Xt, yt = train_data
    Xv, yv = val_data
    if len(yt) == 0 or len(yv) == 0:
        raise ConfigurationError("search needs non-empty train and val splits")

    state = SearchState(net, alphas, cfg)
    train_stream = _BatchStream(Xt, yt, cfg.batch_size, np.random.default_rng([cfg.seed, 101]))
    val_stream = _BatchStream(Xv, yv, cfg.batch_size, np.random.default_rng([cfg.seed, 211]))
    steps_per_epoch = max(1, math.ceil(len(yt) / cfg.batch_size))
    total_steps = steps_per_epoch * max(1, cfg.epochs)

    history = [alphas.snapshot()]
    best = alphas.snapshot()
    best_top1 = -1.0

    csv_file = open(csv_path, "w") if csv_path else None
    if csv_file:
        csv_file.write(",".join(METRICS_COLUMNS) + "\n")

    try:
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            if cfg.lr_granularity == "epoch":
                state.lr_omega = lr_at(cfg, epoch / max(1, cfg.epochs))
            losses = []
            for _ in range(steps_per_epoch):
                if cfg.lr_granularity == "step":
                    state.lr_omega = lr_at(cfg, state.global_step / total_steps)
                state.epsilon = state.lr_omega if cfg.order == "second" else 0.0
                try:
                    losses.append(
                        search_step(state, train_stream.next(), val_stream.next())
                    )
                except NumericFault as fault:
                    raise NumericFault(
                        f"epoch {epoch} step {state.global_step}: {fault}"
                    ) from fault
            val_loss, val_top1 = evaluate_supernet(net, alphas, Xv, yv, cfg.batch_size)
            history.append(alphas.snapshot())
            if val_top1 >= best_top1:
                best_top1 = val_top1
                best = alphas.snapshot()
            if csv_file:
                row = (
                    epoch,
                    state.global_step,
                    sum(losses) / len(losses),
                    val_loss,
                    val_top1,
                    sn.mean_edge_entropy(alphas.normal),
                    sn.mean_edge_entropy(alphas.reduce),
                    state.lr_omega,
                    cfg.lr_alpha,
                )
                csv_file.write(",".join(repr(v) for v in row) + "\n")
    finally:
        if csv_file:
            csv_file.close()
    return history, best

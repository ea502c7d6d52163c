"""Training and evaluation loops for derived (discrete) networks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import tensor as tc
from .errors import ConfigurationError, NumericFault
from .search import lr_at

TRAIN_COLUMNS = (
    "epoch",
    "step",
    "lr",
    "train_loss",
    "train_top1",
    "val_loss",
    "val_top1",
)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 0.01
    lr_min: float = 1e-4
    momentum: float = 0.9
    decay: str = "cosine"
    seed: int = 0


def topk_hits(logits, labels, k):
    """Label-in-top-k counts; ties rank the lower class index first."""
    k = min(k, logits.shape[1])
    # stable ascending sort of -logits keeps lower class indices first on ties
    order = np.argsort(-logits, axis=1, kind="stable")
    topk = order[:, :k]
    return int((topk == labels[:, None]).any(axis=1).sum())


def evaluate_network(net, X, y, batch_size):
    """Deterministic eval-mode pass: mean loss, top-1 and top-5 rates."""
    total_loss = 0.0
    top1 = 0
    top5 = 0
    n = len(y)
    for start in range(0, n, batch_size):
        xb = X[start : start + batch_size]
        yb = y[start : start + batch_size]
        logits = net.forward(xb, train=False)
        loss, probs = tc.softmax_cross_entropy(logits, yb)
        total_loss += loss.item() * len(yb)
        top1 += int((probs.argmax(axis=1) == yb).sum())
        top5 += topk_hits(logits.data, yb, 5)
    return {"loss": total_loss / n, "top1": top1 / n, "top5": top5 / n}


def train_network(net, train_data, val_data, cfg, csv_path=None, ckpt_path=None):
    """Momentum-SGD training with a decaying learning rate.

    Saves the checkpoint with the best validation top-1 (best train top-1
    when there is no validation split).  Returns a summary dict.
    """
    Xt, yt = train_data
    if len(yt) == 0:
        raise ConfigurationError("training split is empty")
    has_val = val_data is not None and len(val_data[1]) > 0

    params = net.params()
    rng = np.random.default_rng([cfg.seed, 301])
    steps_per_epoch = max(1, math.ceil(len(yt) / cfg.batch_size))

    csv_file = open(csv_path, "w") if csv_path else None
    if csv_file:
        csv_file.write(",".join(TRAIN_COLUMNS) + "\n")

    best_metric = -1.0
    best_epoch = -1
    first_loss = None
    last_loss = None
    global_step = 0
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at_train(cfg, epoch)
            order = rng.permutation(len(yt))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                loss = net.loss(Xt[idx], yt[idx], train=True)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericFault(
                        f"non-finite train loss at epoch {epoch} step {global_step}"
                    )
                loss.backward()
                tc.sgd_momentum_step(params, lr, cfg.momentum)
                losses.append(value)
                global_step += 1
            train_metrics = evaluate_network(net, Xt, yt, cfg.batch_size)
            epoch_loss = sum(losses) / len(losses)
            if first_loss is None:
                first_loss = epoch_loss
            last_loss = epoch_loss
            val_metrics = (
                evaluate_network(net, val_data[0], val_data[1], cfg.batch_size)
                if has_val
                else None
            )
            selector = (val_metrics or train_metrics)["top1"]
            if selector >= best_metric:
                best_metric = selector
                best_epoch = epoch
                if ckpt_path:
                    ckpt.save_params(ckpt_path, params)
            if csv_file:
                row = [
                    repr(epoch),
                    repr(global_step),
                    repr(lr),
                    repr(epoch_loss),
                    repr(train_metrics["top1"]),
                    repr(val_metrics["loss"]) if val_metrics else "",
                    repr(val_metrics["top1"]) if val_metrics else "",
                ]
                csv_file.write(",".join(row) + "\n")
    finally:
        if csv_file:
            csv_file.close()

    final_train = evaluate_network(net, Xt, yt, cfg.batch_size)
    summary = {
        "epochs": cfg.epochs,
        "train_top1": final_train["top1"],
        "best_metric": best_metric,
        "best_epoch": best_epoch,
        "loss_decreased": (
            first_loss is not None and last_loss is not None and last_loss < first_loss
        ),
        "param_count": net.param_count(),
    }
    if has_val:
        summary["val"] = evaluate_network(net, val_data[0], val_data[1], cfg.batch_size)
    return summary


def lr_at_train(cfg, epoch):
    from .search import SearchConfig

    proxy = SearchConfig(
        lr_omega=cfg.lr, lr_min=cfg.lr_min, decay=cfg.decay, epochs=cfg.epochs
    )
    return lr_at(proxy, epoch / max(1, cfg.epochs))

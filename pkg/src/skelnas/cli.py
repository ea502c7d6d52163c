"""Command-line front end: synth, search, train, eval, export-dot, gradcheck.

Configuration is a flat key=value set with defaults for every key.
Resolution order: defaults, then --config file entries, then positional
KEY=VALUE overrides (later wins), then the SARNAS_SEED environment
variable for the seed.  Every command validates the full configuration
before touching the output directory and echoes the resolved values
there first.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as skdata
from . import genotype as geno
from . import gradcheck
from . import supernet as sn
from .errors import ConfigurationError, NumericFault, SkelNasError
from .search import SearchConfig, run_search
from .supernet import SuperNet, init_alpha, relaxed_cell_dot
from .train import TrainConfig, evaluate_network, train_network

DEFAULTS = {
    "data_dir": "data",
    "out_dir": "out",
    "layout": "custom",
    "joints_per_person": 6,
    "frames": 16,
    "classes": 3,
    "per_class": 200,
    "noise_amp": 0.05,
    "center_clips": 0,
    "cells": 4,
    "c_init": 8,
    "epochs": 20,
    "lr_omega": 0.025,
    "lr_alpha": 0.05,
    "lr_min": 1e-4,
    "momentum": 0.9,
    "order": "second",
    "fd_radius": 0.01,
    "alpha_weight_decay": 0.0,
    "batch_size": 8,
    "seed": 0,
    "noise_scale": 1e-3,
    "eval_fraction": 0.2,
    "decay": "cosine",
    "lr_granularity": "epoch",
    "genotype": "",
    "checkpoint": "",
    "input": "",
}

SEED_ENV = "SARNAS_SEED"


def _coerce(key, raw):
    default = DEFAULTS[key]
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except ValueError:
        raise ConfigurationError(f"cannot parse {key}={raw!r}") from None


def resolve_config(config_path=None, overrides=()):
    cfg = dict(DEFAULTS)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigurationError(f"config file {config_path} does not exist")
        for lineno, ln in enumerate(path.read_text().splitlines(), start=1):
            stripped = ln.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigurationError(
                    f"{config_path}:{lineno}: expected key=value, got {ln!r}"
                )
            key, _, value = stripped.partition("=")
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigurationError(f"{config_path}:{lineno}: unknown key {key!r}")
            cfg[key] = _coerce(key, value.strip())
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not KEY=VALUE")
        key, _, value = item.partition("=")
        if key not in DEFAULTS:
            raise ConfigurationError(f"unknown key {key!r}")
        cfg[key] = _coerce(key, value)
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        cfg["seed"] = _coerce("seed", env_seed)
    _validate(cfg)
    return cfg


def _validate(cfg):
    if cfg["layout"] not in ("custom", "ntu", "kinetics"):
        raise ConfigurationError(f"layout must be custom/ntu/kinetics, got {cfg['layout']!r}")
    if cfg["order"] not in ("second", "first"):
        raise ConfigurationError(f"order must be second/first, got {cfg['order']!r}")
    if cfg["decay"] not in ("cosine", "step"):
        raise ConfigurationError(f"decay must be cosine/step, got {cfg['decay']!r}")
    if cfg["lr_granularity"] not in ("epoch", "step"):
        raise ConfigurationError(
            f"lr_granularity must be epoch/step, got {cfg['lr_granularity']!r}"
        )
    for key in ("frames", "cells", "c_init", "batch_size", "per_class"):
        if cfg[key] < 1:
            raise ConfigurationError(f"{key} must be >= 1, got {cfg[key]}")
    if cfg["epochs"] < 0:
        raise ConfigurationError(f"epochs must be >= 0, got {cfg['epochs']}")
    if not 0.0 <= cfg["eval_fraction"] < 1.0:
        raise ConfigurationError(
            f"eval_fraction must lie in [0, 1), got {cfg['eval_fraction']}"
        )


def _echo_config(cfg, out_dir):
    lines = [f"{key}={cfg[key]!r}" if isinstance(cfg[key], float) else f"{key}={cfg[key]}"
             for key in sorted(cfg)]
    (out_dir / "config.resolved.txt").write_text("\n".join(lines) + "\n")


def _prepare_out_dir(cfg):
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir)
    return out_dir


def _layout(cfg):
    return skdata.make_layout(cfg["layout"], cfg["joints_per_person"])


def _load_arrays(cfg):
    clips = skdata.load_dataset(Path(cfg["data_dir"]))
    layout = _layout(cfg)
    X, y = skdata.encode_dataset(
        clips, layout, cfg["frames"], center=bool(cfg["center_clips"])
    )
    if y.max(initial=0) >= cfg["classes"]:
        raise ConfigurationError(
            f"dataset label {int(y.max())} exceeds classes={cfg['classes']}"
        )
    return X, y


# ---------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------


def cmd_synth(cfg):
    layout = _layout(cfg)
    clips = skdata.synth_generate(
        cfg["classes"], cfg["per_class"], cfg["frames"], layout,
        cfg["seed"], cfg["noise_amp"],
    )
    out_dir = _prepare_out_dir(cfg)
    clip_dir = out_dir / "clips"
    clip_dir.mkdir(exist_ok=True)
    entries = []
    for i, clip in enumerate(clips):
        rel = f"clips/clip_{i:05d}.skl"
        skdata.save_clip(clip, out_dir / rel)
        entries.append((rel, clip.label))
    skdata.write_manifest(out_dir, entries)
    print(
        f"wrote {len(clips)} clips ({cfg['classes']} classes x "
        f"{cfg['per_class']} each) to {out_dir}"
    )
    return 0


def cmd_search(cfg):
    X, y = _load_arrays(cfg)
    if len(np.unique(y)) < 2:
        raise ConfigurationError("search needs a dataset with at least 2 classes")
    rng = np.random.default_rng([cfg["seed"], 55])
    perm = rng.permutation(len(y))
    half = len(y) // 2
    if half == 0 or half == len(y):
        raise ConfigurationError("dataset too small to split in half")
    tr, va = perm[:half], perm[half:]

    out_dir = _prepare_out_dir(cfg)
    net = SuperNet(cfg["cells"], cfg["c_init"], cfg["classes"], seed=cfg["seed"])
    alphas = init_alpha(cfg["seed"], cfg["noise_scale"])
    scfg = SearchConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        lr_omega=cfg["lr_omega"],
        lr_min=cfg["lr_min"],
        lr_alpha=cfg["lr_alpha"],
        momentum=cfg["momentum"],
        order=cfg["order"],
        fd_radius=cfg["fd_radius"],
        alpha_weight_decay=cfg["alpha_weight_decay"],
        decay=cfg["decay"],
        lr_granularity=cfg["lr_granularity"],
        seed=cfg["seed"],
    )
    started = time.time()
    run_search(
        net, alphas, scfg, (X[tr], y[tr]), (X[va], y[va]),
        csv_path=out_dir / "metrics.csv",
    )
    ckpt.save_checkpoint(
        out_dir / "alpha.ckpt",
        [("alpha_normal", alphas.normal.data), ("alpha_reduce", alphas.reduce.data)],
    )
    genotype = geno.derive_genotype(alphas)
    (out_dir / "genotype.txt").write_text(geno.serialize_genotype(genotype))
    print(
        f"search finished in {time.time() - started:.1f}s; "
        f"entropy normal={sn.mean_edge_entropy(alphas.normal):.4f} "
        f"reduce={sn.mean_edge_entropy(alphas.reduce):.4f}"
    )
    print(f"genotype written to {out_dir / 'genotype.txt'}")
    return 0


def _split_train_eval(cfg, n):
    rng = np.random.default_rng([cfg["seed"], 77])
    perm = rng.permutation(n)
    n_val = int(round(n * cfg["eval_fraction"]))
    return perm[n_val:], perm[:n_val]


def cmd_train(cfg):
    if not cfg["genotype"]:
        raise ConfigurationError("train needs genotype=<path>")
    genotype = geno.parse_genotype(Path(cfg["genotype"]).read_text())
    X, y = _load_arrays(cfg)
    tr, va = _split_train_eval(cfg, len(y))
    net = geno.build_discrete_network(
        genotype, cfg["cells"], cfg["c_init"], cfg["classes"], seed=cfg["seed"]
    )
    print(f"discrete network parameters: {net.param_count()}")
    out_dir = _prepare_out_dir(cfg)
    tcfg = TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr_omega"],
        lr_min=cfg["lr_min"],
        momentum=cfg["momentum"],
        decay=cfg["decay"],
        seed=cfg["seed"],
    )
    started = time.time()
    summary = train_network(
        net,
        (X[tr], y[tr]),
        (X[va], y[va]) if len(va) else None,
        tcfg,
        csv_path=out_dir / "metrics.csv",
        ckpt_path=out_dir / "best.ckpt",
    )
    print(
        f"training finished in {time.time() - started:.1f}s; "
        f"train top1={summary['train_top1']:.4f} best={summary['best_metric']:.4f}"
    )
    if "val" in summary:
        print(f"held-out top1={summary['val']['top1']:.4f}")
    if not summary["loss_decreased"]:
        print("warning: train loss did not decrease over the run")
    return 0


def cmd_eval(cfg):
    if not cfg["genotype"]:
        raise ConfigurationError("eval needs genotype=<path>")
    if not cfg["checkpoint"]:
        raise ConfigurationError("eval needs checkpoint=<path>")
    genotype = geno.parse_genotype(Path(cfg["genotype"]).read_text())
    net = geno.build_discrete_network(
        genotype, cfg["cells"], cfg["c_init"], cfg["classes"], seed=cfg["seed"]
    )
    ckpt.load_into_params(cfg["checkpoint"], net.params())
    X, y = _load_arrays(cfg)
    out_dir = _prepare_out_dir(cfg)
    metrics = evaluate_network(net, X, y, cfg["batch_size"])
    (out_dir / "eval.csv").write_text(
        "top1,top5\n" + f"{metrics['top1']!r},{metrics['top5']!r}\n"
    )
    print(f"top1={metrics['top1']:.4f} top5={metrics['top5']:.4f} over {len(y)} samples")
    return 0


def cmd_export_dot(cfg):
    if not cfg["input"]:
        raise ConfigurationError("export-dot needs input=<alpha checkpoint or genotype>")
    path = Path(cfg["input"])
    if not path.exists():
        raise ConfigurationError(f"input {path} does not exist")
    head = path.open("rb").read(16)
    out_dir = _prepare_out_dir(cfg)
    if head.startswith(b"SARNAS-CKPT"):
        entries = ckpt.load_checkpoint(path)
        for side in ("normal", "reduce"):
            key = f"alpha_{side}"
            if key not in entries:
                raise ConfigurationError(f"checkpoint has no {key} entry")
        from . import tensor as tc

        for side in ("normal", "reduce"):
            dot = relaxed_cell_dot(tc.Tensor(entries[f"alpha_{side}"]), side)
            (out_dir / f"{side}.dot").write_text(dot)
    else:
        genotype = geno.parse_genotype(path.read_text())
        for side in ("normal", "reduce"):
            (out_dir / f"{side}.dot").write_text(geno.genotype_dot(genotype, side))
    print(f"wrote {out_dir / 'normal.dot'} and {out_dir / 'reduce.dot'}")
    return 0


def cmd_gradcheck(cfg):
    failures = 0

    def report(name, err, tol, ok):
        nonlocal failures
        status = "PASS" if ok else "FAIL"
        print(f"{status} {name}: max_rel_err={err:.3e} tol={tol:.0e}")
        if not ok:
            failures += 1

    gradcheck.run_suite(seed=cfg["seed"] or 20240, on_result=report)
    print(f"gradcheck: {failures} failure(s)")
    return 1 if failures else 0


COMMANDS = {
    "synth": cmd_synth,
    "search": cmd_search,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-dot": cmd_export_dot,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="skelnas",
        description="Differentiable architecture search for skeleton action classifiers",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument(
            "overrides", nargs="*", metavar="KEY=VALUE", help="config overrides"
        )
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg)
    except NumericFault as fault:
        print(f"numeric fault: {fault}", file=sys.stderr)
        return 3
    except SkelNasError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

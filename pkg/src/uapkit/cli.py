"""Command-line experiment runner.

Subcommands: train, attack, eval, retrain. Each takes a JSON config file
plus a handful of overrides, writes its outputs into --out, and embeds the
fully resolved configuration (all defaults materialized) and the seed in
every report, so a run can be reproduced bit-identically. On failure all
files written by the failed run are removed and the exit status is nonzero.
"""

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import data_io, defense, evaluation, serialize
from .attacks import AttackBudget, AttackParams, generate_uap, random_uap
from .datasets import concat
from .network import (LayerSpec, Network, inverse_frequency_weights)
from .seeding import STREAMS

STREAM_DOCS = {
    "weight-init": "network weight initialization",
    "train-shuffle": "minibatch shuffle order per epoch",
    "uap-order": "image visit order per perturbation pass",
    "random-uap": "random perturbation draws",
    "retrain-mix": "clean/perturbed split during retraining",
}

DEFAULT_ARCHITECTURE = [
    {"kind": "conv2d", "filters": 8, "kernel_size": 3, "stride": 1},
    {"kind": "maxpool2d", "pool_size": 2},
    {"kind": "flatten"},
    {"kind": "dense", "units": 3},
    {"kind": "softmax"},
]


class _Outputs:
    """Collects files written by one command so failures can clean up."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.paths = []

    def path(self, name):
        p = self.dir / name
        self.paths.append(p)
        return p

    def discard(self):
        for p in self.paths:
            Path(p).unlink(missing_ok=True)


def _load_config(args):
    cfg = {}
    if args.config:
        with open(args.config) as fh:
            cfg = json.load(fh)
    for key in ("seed", "zeta", "eps", "mode", "target"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if getattr(args, "norm", None) is not None:
        cfg["norm"] = args.norm
    if getattr(args, "imax", None) is not None:
        cfg["i_max"] = args.imax
    if getattr(args, "random_control", False):
        cfg["random_control"] = True
    return cfg


def _parse_norm(value):
    text = str(value).lower()
    if text in ("inf", "infinity", "linf"):
        return math.inf
    if text in ("1", "1.0", "l1"):
        return 1.0
    if text in ("2", "2.0", "l2"):
        return 2.0
    raise ValueError(f"norm must be 1, 2 or inf, got {value!r}")


def _dataset(path, base=Path(".")):
    manifest = data_io.load_manifest(Path(base) / path)
    return data_io.load_dataset(manifest)


def _layer_specs(arch):
    specs = []
    for entry in arch:
        kind = entry["kind"]
        if kind == "dense":
            specs.append(LayerSpec("dense", units=entry["units"]))
        elif kind == "conv2d":
            specs.append(LayerSpec("conv2d", filters=entry["filters"],
                                   kernel_size=entry["kernel_size"],
                                   stride=entry.get("stride", 1)))
        elif kind == "maxpool2d":
            pool = entry.get("pool_size", entry.get("kernel_size"))
            specs.append(LayerSpec("maxpool2d", kernel_size=pool,
                                   stride=entry.get("stride", pool)))
        else:
            specs.append(LayerSpec(kind))
    return specs


def _resolve_class_weights(setting, data):
    if setting in (None, "ones"):
        return np.ones(data.num_classes), "ones"
    if setting == "inverse_frequency":
        return inverse_frequency_weights(data.labels, data.num_classes), setting
    weights = np.asarray(setting, dtype=float)
    return weights, [float(w) for w in weights]


def _check_domains(net, *datasets):
    for data in datasets:
        if tuple(data.pixel_domain) != tuple(net.pixel_domain):
            raise ValueError(f"dataset pixel domain {data.pixel_domain} does "
                             f"not match model domain {net.pixel_domain}")


def _target_index(name, data):
    if name is None:
        return None
    if name in data.class_names:
        return data.class_names.index(name)
    raise ValueError(f"unknown target class {name!r}; "
                     f"choose from {data.class_names}")


def _resolve_attack(cfg, net, train_data, test_data):
    """Common attack setup: budget (zeta or xi), params, target index."""
    p = _parse_norm(cfg.get("norm", "inf"))
    zeta_split = cfg.get("zeta_split", "all")
    if cfg.get("zeta") is not None:
        if zeta_split == "train":
            pool = train_data
        else:
            pool = concat(train_data, test_data) if test_data is not None \
                else train_data
        budget = evaluation.resolve_budget(float(cfg["zeta"]), pool, p)
    elif cfg.get("xi") is not None:
        budget = AttackBudget(p, float(cfg["xi"]))
    else:
        raise ValueError("config needs either zeta or xi")
    mode = cfg.get("mode", "nontargeted")
    target = _target_index(cfg.get("target"), train_data)
    if mode == "targeted" and target is None:
        raise ValueError("targeted mode requires --target <class_name>")
    params = AttackParams(eps=float(cfg.get("eps", 0.001)),
                          i_max=int(cfg.get("i_max", 15)),
                          mode=mode, target=target,
                          seed=int(cfg.get("seed", 0)))
    resolved = {
        "norm": "inf" if p == math.inf else int(p),
        "zeta": cfg.get("zeta"),
        "zeta_split": zeta_split,
        "xi": budget.xi,
        "eps": params.eps,
        "i_max": params.i_max,
        "mode": mode,
        "target": cfg.get("target"),
        "seed": params.seed,
    }
    return budget, params, resolved


def cmd_train(args):
    cfg = _load_config(args)
    out = _Outputs(args.out)
    try:
        train_data = _dataset(cfg["train_dataset"])
        test_data = _dataset(cfg["test_dataset"]) if cfg.get("test_dataset") else None
        arch = cfg.get("architecture", DEFAULT_ARCHITECTURE)
        weights, weights_echo = _resolve_class_weights(cfg.get("class_weights"),
                                                       train_data)
        seed = int(cfg.get("seed", 0))
        epochs = int(cfg.get("epochs", 10))
        lr = float(cfg.get("lr", 0.05))
        batch_size = int(cfg.get("batch_size", 32))
        domain = tuple(cfg.get("pixel_domain", train_data.pixel_domain))

        net = Network(_layer_specs(arch), train_data.images.shape[1:],
                      pixel_domain=domain, class_weights=weights, seed=seed)
        _check_domains(net, train_data)
        net.train(train_data, epochs, lr, batch_size, seed=seed)

        model_path = out.path("model.dnet")
        serialize.save_model(net, model_path)
        report = {
            "command": "train",
            "config": {
                "train_dataset": cfg["train_dataset"],
                "test_dataset": cfg.get("test_dataset"),
                "architecture": arch,
                "pixel_domain": list(domain),
                "class_weights": weights_echo,
                "resolved_class_weights": [float(w) for w in weights],
                "epochs": epochs, "lr": lr, "batch_size": batch_size,
                "seed": seed,
            },
            "seed_streams": STREAM_DOCS,
            "train_accuracy": evaluation.accuracy(net, train_data),
            "test_accuracy": (evaluation.accuracy(net, test_data)
                              if test_data is not None else None),
            "class_counts": {name: int(c) for name, c in
                             zip(train_data.class_names,
                                 train_data.class_counts())},
        }
        evaluation.write_report_json(out.path("train_report.json"), report)
    except Exception:
        out.discard()
        raise
    return out


def cmd_attack(args):
    cfg = _load_config(args)
    out = _Outputs(args.out)
    try:
        net = serialize.load_model(cfg["model"])
        train_data = _dataset(cfg["train_dataset"])
        test_data = _dataset(cfg["test_dataset"])
        _check_domains(net, train_data, test_data)
        budget, params, resolved = _resolve_attack(cfg, net, train_data, test_data)
        resolved["model"] = cfg["model"]
        resolved["train_dataset"] = cfg["train_dataset"]
        resolved["test_dataset"] = cfg["test_dataset"]
        resolved["random_control"] = bool(cfg.get("random_control", False))

        uap = generate_uap(net, train_data, budget, params)
        splits = {"train": train_data, "test": test_data}
        results = {name: evaluation.evaluate(net, data, uap, params.target).to_dict()
                   for name, data in splits.items()}
        report = {
            "command": "attack",
            "config": resolved,
            "seed_streams": STREAM_DOCS,
            "budget": {"p": resolved["norm"], "xi": budget.xi,
                       "zeta": budget.zeta},
            "perturbation_norm": uap.norm(),
            "provenance": uap.provenance,
            "results": results,
        }
        if resolved["random_control"]:
            control = random_uap(net.input_shape, budget.p, budget.xi,
                                 seed=params.seed)
            report["random_control"] = {
                name: evaluation.evaluate(net, data, control,
                                          params.target).to_dict()
                for name, data in splits.items()}

        serialize.save_perturbation(uap, out.path("uap.uapf"))
        data_io.export_perturbation_image(uap, out.path("uap.png"))
        for name, data in splits.items():
            evaluation.write_confusion_csv(
                out.path(f"confusion_{name}.csv"),
                np.asarray(results[name]["confusion"]), data.class_names)
        evaluation.write_report_json(out.path("attack_report.json"), report)
    except Exception:
        out.discard()
        raise
    return out


def cmd_eval(args):
    cfg = _load_config(args)
    out = _Outputs(args.out)
    try:
        net = serialize.load_model(cfg["model"])
        data = _dataset(cfg["dataset"])
        _check_domains(net, data)
        pert = None
        if cfg.get("perturbation"):
            pert = serialize.load_perturbation(cfg["perturbation"])
        target = _target_index(cfg.get("target"), data)
        report = evaluation.evaluate(net, data, pert, target, metadata={
            "model": cfg["model"], "dataset": cfg["dataset"],
            "perturbation": cfg.get("perturbation"),
            "provenance": pert.provenance if pert else None,
            "target": cfg.get("target"),
        })
        payload = {"command": "eval", "config": report.metadata,
                   "seed_streams": STREAM_DOCS, "results": report.to_dict()}
        evaluation.write_report_json(out.path("eval_report.json"), payload)
        evaluation.write_confusion_csv(out.path("confusion.csv"),
                                       report.confusion, data.class_names)
    except Exception:
        out.discard()
        raise
    return out


def cmd_retrain(args):
    cfg = _load_config(args)
    out = _Outputs(args.out)
    try:
        net = serialize.load_model(cfg["model"])
        train_data = _dataset(cfg["train_dataset"])
        test_data = _dataset(cfg["test_dataset"])
        _check_domains(net, train_data, test_data)
        budget, params, resolved = _resolve_attack(cfg, net, train_data, test_data)
        rcfg = defense.RetrainConfig(
            budget=budget, params=params,
            n_uaps=int(cfg.get("n_uaps", 10)),
            extra_epochs=int(cfg.get("extra_epochs", 5)),
            iterations=int(cfg.get("iterations", 5)),
            mix_fraction=float(cfg.get("mix_fraction", 0.5)),
            lr=float(cfg.get("lr", 0.05)),
            batch_size=int(cfg.get("batch_size", 32)),
            seed=int(cfg.get("seed", 0)))
        resolved.update({
            "model": cfg["model"], "train_dataset": cfg["train_dataset"],
            "test_dataset": cfg["test_dataset"], "n_uaps": rcfg.n_uaps,
            "extra_epochs": rcfg.extra_epochs, "iterations": rcfg.iterations,
            "mix_fraction": rcfg.mix_fraction, "lr": rcfg.lr,
            "batch_size": rcfg.batch_size,
        })
        initial_accuracy = evaluation.accuracy(net, test_data)
        net, history = defense.adversarial_retrain(net, train_data, test_data,
                                                   rcfg)
        serialize.save_model(net, out.path("hardened.dnet"))
        payload = {"command": "retrain", "config": resolved,
                   "seed_streams": STREAM_DOCS,
                   "initial_test_accuracy": initial_accuracy,
                   "history": defense.history_to_dicts(history)}
        evaluation.write_report_json(out.path("retrain_history.json"), payload)
        defense.write_history_csv(out.path("retrain_history.csv"), history)
    except Exception:
        out.discard()
        raise
    return out


def build_parser():
    parser = argparse.ArgumentParser(
        prog="uapkit",
        description="Universal adversarial perturbation experiments on a "
                    "small differentiable classifier.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", default="out", help="output directory")

    def attack_opts(p):
        p.add_argument("--zeta", type=float,
                       help="budget as a fraction of the mean image norm")
        p.add_argument("--norm", choices=["1", "2", "inf"],
                       help="Lp norm selector")
        p.add_argument("--eps", type=float,
                       help="step size as a fraction of the pixel-domain width")
        p.add_argument("--imax", type=int, help="passes over the image set")
        p.add_argument("--mode", choices=["nontargeted", "targeted"])
        p.add_argument("--target", help="target class name (targeted mode)")

    p_train = sub.add_parser("train", help="train a classifier")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_attack = sub.add_parser("attack", help="generate and evaluate a UAP")
    common(p_attack)
    attack_opts(p_attack)
    p_attack.add_argument("--random-control", action="store_true",
                          help="also evaluate a norm-matched random "
                               "perturbation")
    p_attack.set_defaults(func=cmd_attack)

    p_eval = sub.add_parser("eval", help="evaluate a model, optionally "
                                         "under a stored perturbation")
    common(p_eval)
    p_eval.add_argument("--target", help="report targeted success toward "
                                         "this class")
    p_eval.set_defaults(func=cmd_eval)

    p_retrain = sub.add_parser("retrain", help="adversarial retraining loop")
    common(p_retrain)
    attack_opts(p_retrain)
    p_retrain.set_defaults(func=cmd_retrain)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:
        print(f"uapkit {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

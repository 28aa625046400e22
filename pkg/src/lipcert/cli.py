"""Command-line harness: train, bounds, certify, evaluate, attack.

Option precedence: command-line flags over config-file entries over
defaults.  The config file is line-oriented ``key = value`` with ``#``
comments; keys match the long flag names with underscores.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import bounds as bounds_mod
from . import certify as certify_mod
from . import evaluate as evaluate_mod
from . import training as training_mod
from .data import load_idx
from .graph import GraphError, aggregate_lipschitz
from .model_io import init_params, load_weights, parse_model, save_weights, serialize_model

WK_SMALL_MODEL = """\
input 1x28x28
conv out=16 k=4x4 pad=1 stride=2
relu
conv out=32 k=4x4 pad=1 stride=2
relu
fc out=100
relu
fc out=10
"""

# two small convolutions feeding two dense layers; trained with the defaults
# below (adam, 20 epochs, batch 50, c=1 with a 5-epoch warm-up)
PRESETS = {"wk-small": WK_SMALL_MODEL}


@dataclass
class RunConfig:
    command: str = ""
    model: str = ""
    preset: str = ""
    weights: str = ""
    data_images: str = ""
    data_labels: str = ""
    out: str = "out"
    seed: int = 0
    c: float = 1.0
    epochs: int = 20
    batch: int = 50
    lr: float = 0.001
    warmup: int = 5
    optimizer: str = "adam"
    method: str = "prop2"  # prop1 | prop2
    norm_method: str = "power"  # power | svd
    iters: int = 1000
    chains: int = 128
    limit: int = 0  # 0 = use every sample
    trials: int = 100
    attack_iters: int = 50
    overshoot: float = 0.02
    prop2_variant: bool = False


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value: str):
    ftype = _FIELD_TYPES[key]
    if ftype == "int":
        return int(value)
    if ftype == "float":
        return float(value)
    if ftype == "bool":
        return value.strip().lower() in ("1", "true", "yes", "on")
    return value


def parse_config_file(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ValueError(f"{path}:{lineno}: unknown option '{key}'")
        values[key] = _coerce(key, value)
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lipcert",
        description="certified l2 robustness radii and margin training",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "bounds", "certify", "evaluate", "attack"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key = value options file")
        p.add_argument("--model", default=None, help="model text file")
        p.add_argument("--preset", default=None, choices=sorted(PRESETS))
        p.add_argument("--weights", default=None, help="weight sidecar (.lmtw)")
        p.add_argument("--data-images", dest="data_images", default=None)
        p.add_argument("--data-labels", dest="data_labels", default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--limit", type=int, default=None, help="use first N samples")
        if name == "train":
            p.add_argument("--c", type=float, default=None)
            p.add_argument("--epochs", type=int, default=None)
            p.add_argument("--batch", type=int, default=None)
            p.add_argument("--lr", type=float, default=None)
            p.add_argument("--warmup", type=int, default=None)
            p.add_argument("--optimizer", choices=("adam", "momentum"), default=None)
            p.add_argument("--prop2-variant", dest="prop2_variant",
                           action="store_true", default=None)
        if name in ("bounds", "certify", "evaluate"):
            p.add_argument("--norm-method", dest="norm_method",
                           choices=("power", "svd"), default=None)
            p.add_argument("--iters", type=int, default=None)
            p.add_argument("--chains", type=int, default=None)
        if name == "certify":
            p.add_argument("--method", choices=("prop1", "prop2"), default=None)
        if name == "evaluate":
            p.add_argument("--trials", type=int, default=None)
        if name in ("evaluate", "attack"):
            p.add_argument("--attack-iters", dest="attack_iters", type=int,
                           default=None)
            p.add_argument("--overshoot", type=float, default=None)
    return parser


def resolve_config(argv) -> RunConfig:
    args = vars(build_parser().parse_args(argv))
    config = RunConfig()
    file_path = args.pop("config", None)
    if file_path:
        for key, value in parse_config_file(file_path).items():
            setattr(config, key, value)
    for key, value in args.items():
        if value is not None:
            setattr(config, key, value)
    return config


def _echo_config(config: RunConfig) -> None:
    for f in fields(RunConfig):
        print(f"{f.name} = {getattr(config, f.name)}")


def _load_graph(config: RunConfig, need_weights: bool):
    if config.preset:
        text = PRESETS[config.preset]
    elif config.model:
        path = Path(config.model)
        if not path.exists():
            raise FileNotFoundError(f"model file not found: {path}")
        text = path.read_text()
    else:
        raise ValueError("either --model or --preset is required")
    graph = parse_model(text)
    if config.weights:
        path = Path(config.weights)
        if not path.exists():
            raise FileNotFoundError(f"weights file not found: {path}")
        graph = load_weights(graph, path)
    elif need_weights:
        raise ValueError("--weights is required for this command")
    return graph


def _load_dataset(config: RunConfig):
    if not config.data_images or not config.data_labels:
        raise ValueError("--data-images and --data-labels are required")
    for p in (config.data_images, config.data_labels):
        if not Path(p).exists():
            raise FileNotFoundError(f"dataset file not found: {p}")
    handle = load_idx(config.data_images, config.data_labels)
    if config.limit:
        handle = handle.subset(config.limit)
    return handle


def _network_bounds(graph, config: RunConfig):
    per_layer, certs = bounds_mod.network_layer_bounds(
        graph,
        method=config.norm_method,
        k_iters=config.iters,
        batch_m=config.chains,
        seed=config.seed,
    )
    return per_layer, certs


def run(config: RunConfig) -> int:
    """Execute one command; artifacts land in the output directory."""
    _echo_config(config)
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if config.command == "train":
        graph = _load_graph(config, need_weights=False)
        if not config.weights:
            graph = init_params(graph, config.seed)
        data = _load_dataset(config)
        tc = training_mod.TrainConfig(
            c_target=config.c,
            warmup_epochs=config.warmup,
            epochs=config.epochs,
            batch_size=config.batch,
            optimizer=config.optimizer,
            learning_rate=config.lr,
            seed=config.seed,
            use_prop2_variant=config.prop2_variant,
        )
        trained, log_rows = training_mod.train(
            graph,
            data.images,
            data.labels,
            tc,
            dump_path=out_dir / "crash_state.lmtw",
        )
        save_weights(trained, out_dir / "checkpoint.lmtw")
        (out_dir / "model.txt").write_text(serialize_model(trained))
        (out_dir / "training_log.csv").write_text(
            training_mod.training_log_csv(log_rows)
        )
        last = log_rows[-1]
        print(
            f"trained {config.epochs} epochs: loss {last['loss']:.6g}, "
            f"train_acc {last['train_acc']:.4f}"
        )
        print(f"checkpoint: {out_dir / 'checkpoint.lmtw'}")
        return 0

    if config.command == "bounds":
        graph = _load_graph(config, need_weights=True)
        per_layer, certs = _network_bounds(graph, config)
        csv_text = bounds_mod.layer_bounds_csv(
            graph, per_layer, certs, config.norm_method
        )
        (out_dir / "layer_bounds.csv").write_text(csv_text)
        l_full = aggregate_lipschitz(graph, per_layer, mode="full")
        print(f"L_full = {l_full.value:.12g} (grade {l_full.grade}, "
              f"failure_probability {l_full.failure_probability:.3g})")
        try:
            l_sub = aggregate_lipschitz(graph, per_layer, mode="sub_network")
            print(f"L_sub = {l_sub.value:.12g}")
        except GraphError:
            pass
        print(f"report: {out_dir / 'layer_bounds.csv'}")
        return 0

    if config.command == "certify":
        graph = _load_graph(config, need_weights=True)
        data = _load_dataset(config)
        per_layer, _ = _network_bounds(graph, config)
        results = certify_mod.certify_batch(
            graph,
            data.images,
            data.labels,
            method=config.method,
            per_layer=per_layer,
        )
        d = int(np.prod(graph.input_shape))
        (out_dir / "certification.csv").write_text(
            certify_mod.certification_csv(results, d)
        )
        print(f"median_radius = {certify_mod.median_radius(results):.12g}")
        print(f"report: {out_dir / 'certification.csv'}")
        return 0

    if config.command == "evaluate":
        graph = _load_graph(config, need_weights=True)
        data = _load_dataset(config)
        per_layer, _ = _network_bounds(graph, config)
        l_full = aggregate_lipschitz(graph, per_layer, mode="full")
        records, summary = evaluate_mod.tightness_report(
            graph,
            data.images,
            data.labels,
            l_full,
            trials=config.trials,
            seed=config.seed,
            attack_iters=config.attack_iters,
            overshoot=config.overshoot,
        )
        (out_dir / "tightness.csv").write_text(evaluate_mod.tightness_csv(records))
        block = evaluate_mod.summary_block(summary)
        (out_dir / "tightness_summary.txt").write_text(block)
        print(block, end="")
        print(f"report: {out_dir / 'tightness.csv'}")
        return 0

    if config.command == "attack":
        graph = _load_graph(config, need_weights=True)
        data = _load_dataset(config)
        lines = ["sample_id,label,found,norm,iterations"]
        norms = []
        for i in range(len(data)):
            res = evaluate_mod.min_l2_attack(
                graph,
                data.images[i],
                int(data.labels[i]),
                max_iters=config.attack_iters,
                overshoot=config.overshoot,
            )
            if res.found:
                norms.append(res.norm)
            lines.append(
                f"{i},{int(data.labels[i])},{int(res.found)},{res.norm:.12g},"
                f"{res.iterations}"
            )
        (out_dir / "attack.csv").write_text("\n".join(lines) + "\n")
        if norms:
            print(f"median_attack_norm = {float(np.median(norms)):.12g}")
        print(f"report: {out_dir / 'attack.csv'}")
        return 0

    raise ValueError(f"unknown command '{config.command}'")


def main(argv=None) -> int:
    config = resolve_config(argv if argv is not None else sys.argv[1:])
    try:
        return run(config)
    except (ValueError, FileNotFoundError, GraphError, ArithmeticError,
            training_mod.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

    sperceptron train --trainer gd --subset 5000 --epochs 10 --seed 1
    sperceptron eval --model model.spct
    sperceptron gradcheck --n 8 --seed 0
    sperceptron inspect --model model.spct
    sperceptron init --n 784 --model fresh.spct

Exit codes: 0 ok, 1 gradient check failed, 2 bad configuration, 3 data
problem, 4 training diverged, 5 model file or shape problem.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import DataError, DivergenceDetected, ModelError, NonFiniteGradientError
from .grad import GradConfig, evaluate, finite_difference_check, random_instance, train
from .metrics import write_metrics_csv
from .mnist_io import LabeledDataset, find_mnist_files, load_dataset
from .model import (
    ModelConfig,
    atomic_write_bytes,
    init_params,
    load_model,
    parameter_count,
    save_model,
    symmetrize,
)
from .search import (
    OppositionConfig,
    PerturbationConfig,
    SubgraphSchedule,
    train_opposition,
    train_subgraph_search,
)

log = logging.getLogger("sperceptron")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_MODEL = 5

DATA_DIR_ENV = "SPERCEPTRON_DATA_DIR"
TRAINERS = ("gd", "subgraph", "opposition")


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    trainer: str = "gd"
    seed: int = 0
    data_dir: Optional[str] = None
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    no_test: bool = False
    subset: Optional[int] = None
    model_in: Optional[str] = None
    model: str = "model.spct"
    metrics: str = "metrics.csv"
    manifest: Optional[str] = None
    class_count: int = 10
    bias: bool = False
    eval_every: Optional[int] = None
    # gd
    learning_rate: float = GradConfig.learning_rate
    batch_size: int = GradConfig.batch_size
    epochs: int = GradConfig.epochs
    # subgraph search
    initial_fraction: float = SubgraphSchedule.initial_fraction
    decay: float = SubgraphSchedule.decay
    min_nodes: int = SubgraphSchedule.min_nodes
    iterations_per_phase: int = SubgraphSchedule.iterations_per_phase
    max_iterations: Optional[int] = None
    sigma: float = PerturbationConfig.sigma
    sigma_decay: float = PerturbationConfig.sigma_decay
    eval_batch: int = PerturbationConfig.eval_batch
    # opposition search
    lo: Optional[float] = None
    hi: Optional[float] = None
    shrink: float = OppositionConfig.shrink
    coordinate_fraction: float = OppositionConfig.coordinate_fraction

    def validate(self):
        if self.trainer not in TRAINERS:
            raise ConfigError(f"trainer must be one of {', '.join(TRAINERS)}, got {self.trainer!r}")
        if self.subset is not None and self.subset < 1:
            raise ConfigError("subset must be >= 1")

    def grad_config(self) -> GradConfig:
        return GradConfig(self.learning_rate, self.batch_size, self.epochs, self.seed,
                          self.eval_every or 0)

    def schedule(self) -> SubgraphSchedule:
        return SubgraphSchedule(self.initial_fraction, self.decay, self.min_nodes,
                                self.iterations_per_phase,
                                self.max_iterations if self.max_iterations is not None
                                else SubgraphSchedule.max_iterations)

    def perturbation(self) -> PerturbationConfig:
        return PerturbationConfig(self.sigma, self.sigma_decay, self.eval_batch)

    def opposition(self) -> OppositionConfig:
        return OppositionConfig(self.lo, self.hi, self.shrink,
                                self.max_iterations if self.max_iterations is not None
                                else OppositionConfig.max_iterations,
                                self.eval_batch, self.coordinate_fraction)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if raw == "" and kind.startswith("Optional"):
        return None
    if "bool" in kind:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; dashes in keys are allowed."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then config file values, then explicitly given flags."""
    merged = {}
    if getattr(args, "config", None):
        merged.update(read_config_file(args.config))
    for key in _FIELD_TYPES:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    cfg = RunConfig(**merged)
    cfg.validate()
    return cfg


def _data_dir(explicit: Optional[str]) -> Optional[str]:
    return explicit or os.environ.get(DATA_DIR_ENV)


def _resolve_pair(images, labels, data_dir, split, required=True):
    if images and labels:
        paths = (Path(images), Path(labels))
    elif images or labels:
        raise ConfigError(f"give both {split} images and labels, or neither")
    elif data_dir:
        try:
            paths = find_mnist_files(data_dir, split)
        except FileNotFoundError as exc:
            if not required:
                return None
            raise DataError(str(exc)) from None
    elif required:
        raise ConfigError(
            f"no {split} data: pass --{split}-images/--{split}-labels, --data-dir or set {DATA_DIR_ENV}"
        )
    else:
        return None
    for p in paths:
        if not p.exists():
            raise DataError(f"missing data file: {p}")
    return paths


def _load(paths) -> LabeledDataset:
    try:
        return load_dataset(*paths)
    except OSError as exc:
        raise DataError(f"cannot read {exc.filename}: {exc.strerror}") from None
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(str(exc)) from None


def _write_json(path, payload: dict):
    atomic_write_bytes(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())


# -- subcommands ----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = build_run_config(args)
    data_dir = _data_dir(cfg.data_dir)
    train_paths = _resolve_pair(cfg.train_images, cfg.train_labels, data_dir, "train")
    test_paths = None
    if not cfg.no_test:
        test_paths = _resolve_pair(cfg.test_images, cfg.test_labels, data_dir, "test",
                                   required=bool(cfg.test_images or cfg.test_labels))
    dataset = _load(train_paths)
    if cfg.subset is not None:
        dataset = dataset.subset(cfg.subset, cfg.seed)
    test = _load(test_paths) if test_paths else None

    try:
        if cfg.model_in:
            params, model_config = load_model(cfg.model_in)
            model_config = dataclasses.replace(model_config, seed=cfg.seed)
        else:
            model_config = ModelConfig(n=dataset.n, class_count=cfg.class_count,
                                       bias_enabled=cfg.bias, seed=cfg.seed)
            params = init_params(model_config)
    except ValueError as exc:
        if isinstance(exc, ModelError):
            raise
        raise ConfigError(str(exc)) from None
    if model_config.n != dataset.n:
        raise ModelError(f"model has n={model_config.n} but images have {dataset.n} pixels")

    started = time.time()
    try:
        if cfg.trainer == "gd":
            params, records = train(dataset, test, cfg.grad_config(), model_config, params)
        elif cfg.trainer == "subgraph":
            params, records = train_subgraph_search(
                dataset, cfg.schedule(), cfg.perturbation(), model_config, cfg.seed,
                params, eval_every=cfg.eval_every or 100, dataset_test=test)
        else:
            params, records = train_opposition(
                dataset, cfg.opposition(), model_config, cfg.seed, params,
                eval_every=cfg.eval_every or 50, dataset_test=test)
    except ValueError as exc:
        if isinstance(exc, (DataError, ModelError)):
            raise
        raise ConfigError(str(exc)) from None
    wall = time.time() - started

    save_model(params, model_config, cfg.model)
    write_metrics_csv(records, cfg.metrics)
    final = dataclasses.asdict(records[-1]) if records else {}
    manifest = {
        "version": __version__,
        "config": dataclasses.asdict(cfg),
        "seed": cfg.seed,
        "items": len(dataset),
        "wall_time_seconds": round(wall, 3),
        "final_metrics": final,
        "max_train_accuracy": max((r.train_accuracy for r in records), default=None),
        "outputs": {"model": cfg.model, "metrics": cfg.metrics},
    }
    if cfg.trainer == "opposition":
        manifest["expectation"] = "opposition search is not expected to exceed 0.5 accuracy on MNIST"
    _write_json(cfg.manifest or f"{cfg.model}.manifest.json", manifest)
    print(f"train_accuracy={final.get('train_accuracy', float('nan')):.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, model_config = load_model(args.model)
    data_dir = _data_dir(args.data_dir)
    paths = _resolve_pair(args.images, args.labels, data_dir, args.split)
    dataset = _load(paths)
    if dataset.n != model_config.n:
        raise ModelError(f"model has n={model_config.n} but images have {dataset.n} pixels")
    if len(dataset) and dataset.labels.max() >= model_config.class_count:
        raise ModelError(f"labels exceed the model's {model_config.class_count} classes")
    print(f"accuracy={evaluate(params, dataset, model_config):.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.n < 2 or args.step <= 0:
        raise ConfigError("need n >= 2 and a positive step")
    try:
        x, label, params, config = random_instance(args.n, args.seed, args.class_count, args.bias)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    err = finite_difference_check(x, label, params, config, args.step, seed=args.seed)
    print(f"max_relative_error={err:.3e}")
    return EXIT_OK if err < args.tolerance else EXIT_CHECK_FAILED


def _stats(prefix: str, arr: np.ndarray) -> list[str]:
    return [
        f"{prefix}_min={arr.min():.6g}",
        f"{prefix}_max={arr.max():.6g}",
        f"{prefix}_mean={arr.mean():.6g}",
        f"{prefix}_fro={np.linalg.norm(arr):.6g}",
    ]


def cmd_inspect(args) -> int:
    if args.model:
        params, config = load_model(args.model)
    else:
        try:
            config = ModelConfig(args.n, args.class_count, args.bias, args.seed or 0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        params = init_params(config)
    V = symmetrize(params.V_raw)
    lines = [
        f"n={config.n}",
        f"class_count={config.class_count}",
        f"bias={int(config.bias_enabled)}",
        f"group_size={config.group_size}",
        f"params_paper={parameter_count(config, 'paper')}",
        f"params_free={parameter_count(config, 'free')}",
        *_stats("W", params.W),
        *_stats("V", V),
        f"V_asymmetry_max={np.abs(V - V.T).max():.6g}",
    ]
    if params.bias is not None:
        lines += _stats("bias", params.bias)
    print("\n".join(lines))
    return EXIT_OK


def cmd_init(args) -> int:
    try:
        config = ModelConfig(args.n, args.class_count, args.bias, args.seed or 0)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    save_model(init_params(config), config, args.model)
    print(f"wrote {args.model}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sperceptron", description="s-Perceptron tools")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    # train flags default to None so that unset flags do not override the config file
    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--trainer", choices=TRAINERS)
    t.add_argument("--seed", type=int)
    t.add_argument("--data-dir")
    t.add_argument("--train-images")
    t.add_argument("--train-labels")
    t.add_argument("--test-images")
    t.add_argument("--test-labels")
    t.add_argument("--no-test", action="store_const", const=True, default=None)
    t.add_argument("--subset", type=int, help="first K training items after a seeded shuffle")
    t.add_argument("--model-in", help="start from this model instead of a fresh init")
    t.add_argument("--model", help="output model path")
    t.add_argument("--metrics", help="output metrics CSV path")
    t.add_argument("--manifest", help="output run manifest (default: <model>.manifest.json)")
    t.add_argument("--class-count", type=int)
    t.add_argument("--bias", action=argparse.BooleanOptionalAction, default=None)
    t.add_argument("--eval-every", type=int)
    g = t.add_argument_group("gradient descent")
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--epochs", type=int)
    s = t.add_argument_group("subgraph search")
    s.add_argument("--initial-fraction", type=float)
    s.add_argument("--decay", type=float)
    s.add_argument("--min-nodes", type=int)
    s.add_argument("--iterations-per-phase", type=int)
    s.add_argument("--max-iterations", type=int)
    s.add_argument("--sigma", type=float)
    s.add_argument("--sigma-decay", type=float)
    s.add_argument("--eval-batch", type=int)
    o = t.add_argument_group("opposition search")
    o.add_argument("--lo", type=float)
    o.add_argument("--hi", type=float)
    o.add_argument("--shrink", type=float)
    o.add_argument("--coordinate-fraction", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="report accuracy of a saved model")
    e.add_argument("--config", help="accepted for symmetry with train; unused")
    e.add_argument("--seed", type=int)
    e.add_argument("--metrics", help="unused")
    e.add_argument("--model", required=True)
    e.add_argument("--data-dir")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--images")
    e.add_argument("--labels")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    c.add_argument("--n", type=int, default=8)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--class-count", type=int)
    c.add_argument("--bias", action=argparse.BooleanOptionalAction, default=True)
    c.set_defaults(func=cmd_gradcheck)

    for name, func, helptext in (("inspect", cmd_inspect, "print model structure and statistics"),
                                 ("init", cmd_init, "write a freshly initialized model")):
        i = sub.add_parser(name, help=helptext)
        i.add_argument("--model", required=name == "init")
        i.add_argument("--n", type=int, default=784)
        i.add_argument("--class-count", type=int, default=10)
        i.add_argument("--bias", action=argparse.BooleanOptionalAction, default=False)
        i.add_argument("--seed", type=int)
        i.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        # only model files reach here; data paths are checked up front
        print(f"model error: cannot open {exc.filename}", file=sys.stderr)
        return EXIT_MODEL
    except (DivergenceDetected, NonFiniteGradientError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

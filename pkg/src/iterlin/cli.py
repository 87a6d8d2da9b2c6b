"""Experiment runner: single runs, grid sweeps over K / eta / seed, and CSV curves.

    iterlin run --config mnist.yaml --k 100 --lr 5e-5 --out runs/k100
    iterlin sweep --config mnist.yaml --axis K --values 1,10,100,inf --out runs/sweep
    iterlin curves runs/sweep/K=* --merged runs/sweep/curves_long.csv

Config files are YAML (JSON is accepted as a subset).  Flags override file
keys.  Exit codes: 0 completed, 2 diverged, 3 configuration error, 4 data error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import re
import sys
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import data as data_mod
from .curves import emit_curves
from .data import DataError, Dataset
from .model import INIT_SCHEMES, ModelConfig, build_lenet_variant, build_linear, build_mlp, init_params
from .tensor import ACTIVATIONS, Graph
from .train import INF, TrainConfig, parse_period, train, write_checkpoint

log = logging.getLogger(__name__)

EXIT_OK, EXIT_DIVERGED, EXIT_CONFIG, EXIT_DATA = 0, 2, 3, 4
DATASETS = ("mnist", "cifar10", "synthetic")
ARCHS = ("lenet", "mlp", "linear")
SWEEP_AXES = ("K", "eta", "seed")
SUMMARY_COLUMNS = (
    "run", "K", "eta", "seed", "steps", "status", "refresh_count",
    "final_train_loss", "final_train_acc", "final_test_loss", "final_test_acc",
)  # fmt: skip


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_NUM = (int, float)


@dataclass(frozen=True)
class DataSpec:
    name: str = "mnist"
    root: str | None = None
    train_size: int | None = None
    test_size: int | None = None
    subset_seed: int = 0
    normalise: bool = True
    # synthetic only
    kind: str = "two-gaussians"
    n: int = 256
    n_test: int = 0
    dim: int = 2
    seed: int = 0
    options: dict = field(default_factory=dict)

    def directory(self) -> Path:
        """Explicit ``root`` wins, then $ITERLIN_DATA_ROOT/<name>, then ./data/<name>."""
        return Path(self.root) if self.root else data_mod.data_root() / self.name


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "lenet"
    activation: str | None = None  # relu for lenet, tanh otherwise
    init: str = "fan_in_normal"
    seed: int = 0
    # lenet
    channels: int = 50
    kernel_size: int = 5
    pooling: str = "max"
    dense_widths: tuple = (500,)
    # mlp
    hidden: tuple = (16, 16)

    def resolved_activation(self) -> str:
        return self.activation or ("relu" if self.arch == "lenet" else "tanh")


@dataclass(frozen=True)
class RunConfig:
    data: DataSpec = DataSpec()
    model: ModelSpec = ModelSpec()
    train: TrainConfig = TrainConfig(eta=1e-4)
    epochs: float | None = None
    kernel_dump: bool = False
    out: str = "runs/run"
    deterministic: bool = False

    def to_dict(self) -> dict:
        d = {
            "data": dataclasses.asdict(self.data),
            "model": dataclasses.asdict(self.model),
            "train": self.train.to_dict(),
            "epochs": self.epochs,
            "kernel_dump": self.kernel_dump,
            "out": self.out,
            "deterministic": self.deterministic,
        }
        d["model"]["dense_widths"] = list(self.model.dense_widths)
        d["model"]["hidden"] = list(self.model.hidden)
        return d

    def replace(self, **sections) -> "RunConfig":
        """Copy with nested overrides, e.g. ``replace(train={"K": 10})``."""
        d = self.to_dict()
        for key, value in sections.items():
            if isinstance(value, dict):
                d[key] = {**d[key], **value}
            else:
                d[key] = value
        return config_from_dict(d)


# expected types per key; bool is excluded from numbers explicitly below
_SCHEMA = {
    "data": {
        "name": str, "root": (str, type(None)), "train_size": (int, type(None)), "test_size": (int, type(None)),
        "subset_seed": int, "normalise": bool, "kind": str, "n": int, "n_test": int, "dim": int, "seed": int,
        "options": dict,
    },
    "model": {
        "arch": str, "activation": (str, type(None)), "init": str, "seed": int, "channels": int,
        "kernel_size": int, "pooling": str, "dense_widths": list, "hidden": list,
    },
    "train": {
        "eta": _NUM, "K": (int, float, str), "loss": str, "steps": int, "batch_size": (int, type(None)),
        "shuffle": bool, "seed": int, "loss_factor": _NUM, "norm_factor": _NUM,
        "target_loss": (int, float, type(None)), "probe_size": int, "probe_mode": str, "eval_every": int,
        "log_every": (int, type(None)), "dtype": str, "reduction": str,
    },
    "top": {"epochs": (int, float, type(None)), "kernel_dump": bool, "out": str, "deterministic": bool},
}  # fmt: skip


def _type_name(types) -> str:
    types = types if isinstance(types, tuple) else (types,)
    return " or ".join("null" if t is type(None) else t.__name__ for t in types)


def _check_section(name: str, values, schema: dict, errors: list) -> dict:
    if values is None:
        return {}
    if not isinstance(values, dict):
        errors.append(f"{name}: expected a mapping, got {type(values).__name__}")
        return {}
    clean = {}
    for key, value in values.items():
        path = key if name == "top" else f"{name}.{key}"
        if key not in schema:
            errors.append(f"{path}: unknown key (allowed: {', '.join(sorted(schema))})")
            continue
        types = schema[key]
        types_t = types if isinstance(types, tuple) else (types,)
        is_bool = isinstance(value, bool)
        if (is_bool and bool not in types_t) or not isinstance(value, types_t):
            errors.append(f"{path}: expected {_type_name(types)}, got {value!r}")
            continue
        clean[key] = value
    return clean


def config_from_dict(raw) -> RunConfig:
    """Build a RunConfig from parsed file contents, reporting every problem at once."""
    errors: list[str] = []
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError([f"config root must be a mapping, got {type(raw).__name__}"])
    sections = {"data", "model", "train"}
    top = _check_section("top", {k: v for k, v in raw.items() if k not in sections}, _SCHEMA["top"], errors)
    d = _check_section("data", raw.get("data"), _SCHEMA["data"], errors)
    m = _check_section("model", raw.get("model"), _SCHEMA["model"], errors)
    t = _check_section("train", raw.get("train"), _SCHEMA["train"], errors)
    for key in ("dense_widths", "hidden"):
        if key in m:
            if all(isinstance(w, int) and not isinstance(w, bool) for w in m[key]):
                m[key] = tuple(m[key])
            else:
                errors.append(f"model.{key}: expected a list of integers, got {m[key]!r}")
                del m[key]
    if "eta" not in t and "eta" not in (raw.get("train") or {}):
        errors.append("train.eta: required")
    if errors:
        raise ConfigError(errors)
    cfg = RunConfig(DataSpec(**d), ModelSpec(**m), TrainConfig(**t), **top)
    errors = validate_config(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def validate_config(cfg: RunConfig) -> list[str]:
    """Every semantic problem with ``cfg``; empty when the run can start."""
    errors = list(cfg.train.validate())
    ds, ms = cfg.data, cfg.model
    if ds.name not in DATASETS:
        errors.append(f"data.name must be one of {list(DATASETS)}, got {ds.name!r}")
    for key in ("train_size", "test_size"):
        value = getattr(ds, key)
        if value is not None and value < 1:
            errors.append(f"data.{key} must be >= 1")
    if ds.name == "synthetic":
        if ds.kind not in data_mod.SYNTHETIC_KINDS:
            errors.append(f"data.kind must be one of {list(data_mod.SYNTHETIC_KINDS)}, got {ds.kind!r}")
        if ds.n < 1 or ds.dim < 1:
            errors.append("data.n and data.dim must be >= 1")
        if ds.n_test < 0:
            errors.append("data.n_test must be >= 0")
    if ms.arch not in ARCHS:
        errors.append(f"model.arch must be one of {list(ARCHS)}, got {ms.arch!r}")
    if ms.activation is not None and ms.activation not in ACTIVATIONS:
        errors.append(f"model.activation must be one of {sorted(ACTIVATIONS)}")
    if ms.init not in INIT_SCHEMES:
        errors.append(f"model.init must be one of {list(INIT_SCHEMES)}")
    if ms.arch == "lenet":
        if ds.name == "synthetic":
            errors.append("model.arch 'lenet' needs an image dataset (mnist or cifar10)")
        errors.extend(_lenet_config(cfg).validate())
    if ms.arch == "mlp" and any(h < 1 for h in ms.hidden):
        errors.append("model.hidden entries must be >= 1")
    if cfg.epochs is not None and not (math.isfinite(cfg.epochs) and cfg.epochs > 0):
        errors.append("epochs must be a positive number")
    if not cfg.out:
        errors.append("out must be a non-empty path")
    return errors


def _lenet_config(cfg: RunConfig) -> ModelConfig:
    shape = (3, 32, 32) if cfg.data.name == "cifar10" else (1, 28, 28)
    ms = cfg.model
    return ModelConfig(
        channels=ms.channels, kernel_size=ms.kernel_size, pooling=ms.pooling, dense_widths=ms.dense_widths,
        activation=ms.resolved_activation(), input_shape=shape, num_classes=10, init=ms.init, seed=ms.seed,
    )  # fmt: skip


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads exponent floats without a dot (``1e-4``) as numbers."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)


def load_config(path: str | Path) -> dict:
    """Parse a JSON or YAML config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc.strerror}"]) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    try:
        return yaml.load(text, Loader=_Loader) or {}
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML/JSON: {exc}"]) from None


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


def load_data(spec: DataSpec) -> tuple[Dataset, Dataset | None]:
    if spec.name == "synthetic":
        full = data_mod.synthetic(spec.kind, spec.n + spec.n_test, spec.dim, seed=spec.seed, **spec.options)
        train_ds = full.take(np.arange(spec.n))
        test_ds = full.take(np.arange(spec.n, spec.n + spec.n_test)) if spec.n_test else None
        return train_ds, test_ds
    directory = spec.directory()
    if not directory.is_dir():
        raise DataError(f"dataset directory {directory} does not exist")
    loader = data_mod.load_mnist if spec.name == "mnist" else data_mod.load_cifar10
    train_ds, test_ds = loader(directory, normalise=spec.normalise)
    try:
        if spec.train_size is not None:
            train_ds = data_mod.stratified_subset(train_ds, spec.train_size, spec.subset_seed)
        if spec.test_size is not None:
            test_ds = data_mod.stratified_subset(test_ds, spec.test_size, spec.subset_seed)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    return train_ds, test_ds


def build_model(cfg: RunConfig, train_ds: Dataset) -> Graph:
    ms = cfg.model
    if ms.arch == "lenet":
        return build_lenet_variant(_lenet_config(cfg))
    in_dim = int(np.prod(train_ds.inputs.shape[1:]))
    if train_ds.targets is not None and cfg.train.loss == "mse":
        out_dim = train_ds.targets.shape[1]
    else:
        out_dim = train_ds.num_classes
    if ms.arch == "linear":
        return build_linear(in_dim, out_dim)
    return build_mlp(in_dim, ms.hidden, out_dim, ms.resolved_activation())


def resolve_steps(cfg: RunConfig, n_train: int) -> TrainConfig:
    """The step budget, with ``epochs`` (if set) converted at the configured batch size."""
    if cfg.epochs is None:
        return cfg.train
    bs = n_train if cfg.train.batch_size is None else min(cfg.train.batch_size, n_train)
    per_epoch = -(-n_train // bs)
    return dataclasses.replace(cfg.train, steps=int(math.ceil(cfg.epochs * per_epoch)))


def _json_safe(value):
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


def metric_line(record: dict) -> str:
    """One self-contained JSON record; non-finite numbers become null and are named in ``nonfinite``."""
    flagged = [k for k, v in record.items() if isinstance(v, (float, np.floating)) and not math.isfinite(v)]
    clean = _json_safe(record)
    if flagged:
        clean["nonfinite"] = sorted(set(clean.get("nonfinite", [])) | set(flagged))
    return json.dumps(clean, allow_nan=False, separators=(",", ":"))


@dataclass
class RunOutcome:
    directory: Path
    status: str
    exit_code: int
    summary: dict


def _thread_limit(deterministic: bool):
    if not deterministic:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def _prepare_output(out: Path) -> None:
    if out.exists() and any(out.iterdir()):
        raise ConfigError([f"output directory {out} is not empty"])


def summary_row(name: str, cfg: TrainConfig, final: dict) -> dict:
    return {
        "run": name,
        "K": "inf" if cfg.K == INF else cfg.K,
        "eta": cfg.eta,
        "seed": cfg.seed,
        "steps": final.get("steps"),
        "status": final.get("status"),
        "refresh_count": final.get("refresh_count"),
        "final_train_loss": final.get("train_loss"),
        "final_train_acc": final.get("train_acc"),
        "final_test_loss": final.get("test_loss"),
        "final_test_acc": final.get("test_acc"),
    }


def write_summary(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if row.get(k) is None else row[k] for k in SUMMARY_COLUMNS})


def run_experiment(cfg: RunConfig) -> RunOutcome:
    """Validate, load data, then train into ``cfg.out``.

    Layout of the run directory::

        config.snapshot   resolved config as JSON; feeding it back re-runs the experiment
        metrics.jsonl     one record per logged step
        checkpoint.bin    final parameters, final anchor and step count
        kernel/drift.jsonl  per-refresh kernel drift (plus kernel_<step>.txt with kernel_dump)
        summary.csv       header plus one summary row

    Config and data problems raise ConfigError / DataError before anything is written.
    """
    errors = validate_config(cfg)
    if errors:
        raise ConfigError(errors)
    out = Path(cfg.out)
    _prepare_output(out)
    train_ds, test_ds = load_data(cfg.data)
    if cfg.train.loss == "cross_entropy" and train_ds.labels is None:
        raise ConfigError(["train.loss 'cross_entropy' needs a labelled dataset"])
    if cfg.train.probe_size > len(train_ds):
        raise ConfigError([f"train.probe_size {cfg.train.probe_size} exceeds the {len(train_ds)} training examples"])
    train_cfg = resolve_steps(cfg, len(train_ds))
    graph = build_model(cfg, train_ds)
    params0 = init_params(graph, cfg.model.seed, cfg.model.init, dtype=np.dtype(train_cfg.dtype))

    resolved = dataclasses.replace(cfg, train=train_cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "kernel").mkdir(exist_ok=True)
    (out / "config.snapshot").write_text(json.dumps(resolved.to_dict(), indent=2, sort_keys=True) + "\n")

    with (
        (out / "metrics.jsonl").open("w") as metrics,
        (out / "kernel" / "drift.jsonl").open("w") as drift_log,
        _thread_limit(cfg.deterministic),
    ):

        def sink(record: dict) -> None:
            metrics.write(metric_line(record) + "\n")
            if record.get("refresh") and train_cfg.probe_size:
                entry = {"step": record["step"], "anchor": record["phase_index"], "kernel_drift": record.get("kernel_drift")}
                drift_log.write(metric_line(entry) + "\n")

        def kernel_sink(kernel) -> None:
            if cfg.kernel_dump:
                kernel.save_txt(out / "kernel" / f"kernel_{kernel.step:08d}.txt")

        result = train(graph, params0, train_ds, train_cfg, test=test_ds, sink=sink, kernel_sink=kernel_sink)

    anchor = result.anchor_params if result.anchor_params is not None else result.params
    write_checkpoint(out / "checkpoint.bin", result.params, anchor, result.steps_run)
    row = summary_row(out.name, train_cfg, result.final)
    write_summary(out / "summary.csv", [row])
    code = EXIT_DIVERGED if result.status == "diverged" else EXIT_OK
    log.info("%s: %s after %d steps", out, result.status, result.steps_run)
    return RunOutcome(out, result.status, code, row)


def _axis_value(axis: str, value):
    if axis == "K":
        return parse_period(value)
    if axis == "eta":
        return float(value)
    return int(value)


def sweep(base: RunConfig, axis: str, values, out: str | Path | None = None) -> list[RunOutcome]:
    """One run per value of ``axis`` under ``out`` (default ``base.out``), plus ``summary.csv``.

    Every config is validated before the first run starts.  A diverged run is
    recorded in the table and the sweep carries on.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError([f"sweep axis must be one of {list(SWEEP_AXES)}, got {axis!r}"])
    values = list(values)
    if not values:
        raise ConfigError(["sweep needs at least one value"])
    root = Path(out if out is not None else base.out)
    configs = []
    errors = []
    for raw in values:
        try:
            value = _axis_value(axis, raw)
        except (TypeError, ValueError) as exc:
            errors.append(f"sweep value {raw!r} for {axis}: {exc}")
            continue
        label = "inf" if value == INF else value
        name = f"{axis}={label}"
        if axis == "seed":
            override = {"train": {"seed": value}, "model": {"seed": value}}
        else:
            override = {"train": {axis: label}}
        try:
            configs.append(base.replace(out=str(root / name), **override))
        except ConfigError as exc:
            errors.extend(f"{name}: {e}" for e in exc.errors)
    if errors:
        raise ConfigError(errors)
    _prepare_output(root)
    outcomes = [run_experiment(c) for c in configs]
    write_summary(root / "summary.csv", [o.summary for o in outcomes])
    return outcomes


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def _parse_subset(text: str) -> tuple[int, int | None]:
    parts = [p for p in text.replace(":", ",").split(",") if p]
    if not 1 <= len(parts) <= 2:
        raise argparse.ArgumentTypeError("expected TRAIN or TRAIN,TEST")
    try:
        sizes = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer subset size: {text!r}") from None
    return sizes[0], sizes[1] if len(sizes) == 2 else None


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML or JSON run config")
    p.add_argument("--dataset", choices=DATASETS)
    p.add_argument("--k", help="refresh period: positive integer or 'inf'")
    p.add_argument("--lr", type=float, help="learning rate eta")
    p.add_argument("--loss", help="mse or cross_entropy")
    p.add_argument("--epochs", type=float, help="budget in passes over the training set (overrides train.steps)")
    p.add_argument("--steps", type=int, help="budget in optimisation steps")
    p.add_argument("--batch-size", type=int, help="mini-batch size; 0 means full batch")
    p.add_argument("--seed", type=int, help="seed for initialisation and batch order")
    p.add_argument("--subset", type=_parse_subset, help="stratified subset sizes TRAIN[,TEST]")
    p.add_argument("--probe", type=int, help="kernel probe size (0 disables kernel logging)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--deterministic", action="store_true", default=None, help="single-threaded BLAS")


def config_from_args(args: argparse.Namespace) -> RunConfig:
    raw = load_config(args.config) if args.config else {}
    if not isinstance(raw, dict):
        raise ConfigError([f"config root must be a mapping, got {type(raw).__name__}"])
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    for section in ("data", "model", "train"):
        raw.setdefault(section, {})
        if raw[section] is None:
            raw[section] = {}
    tr, ds = raw["train"], raw["data"]
    if not isinstance(tr, dict) or not isinstance(ds, dict):
        return config_from_dict(raw)
    if args.dataset is not None:
        ds["name"] = args.dataset
    if args.k is not None:
        tr["K"] = args.k
    if args.lr is not None:
        tr["eta"] = args.lr
    if args.loss is not None:
        tr["loss"] = args.loss
    if args.steps is not None:
        tr["steps"] = args.steps
    if args.epochs is not None:
        raw["epochs"] = args.epochs
    if args.batch_size is not None:
        tr["batch_size"] = args.batch_size or None
    if args.seed is not None:
        tr["seed"] = args.seed
        if isinstance(raw["model"], dict):
            raw["model"]["seed"] = args.seed
    if args.subset is not None:
        ds["train_size"], ds["test_size"] = args.subset
    if args.probe is not None:
        tr["probe_size"] = args.probe
    if args.out is not None:
        raw["out"] = args.out
    if args.deterministic:
        raw["deterministic"] = True
    return config_from_dict(raw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iterlin", description="Fixed-period iterative linearisation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="train one configuration")
    _common_flags(run_p)
    sweep_p = sub.add_parser("sweep", help="one run per value of K, eta or seed")
    _common_flags(sweep_p)
    sweep_p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sweep_p.add_argument("--values", required=True, help="comma-separated values, e.g. 1,10,100,inf")
    curves_p = sub.add_parser("curves", help="write curves.csv for finished runs")
    curves_p.add_argument("runs", nargs="+", type=Path)
    curves_p.add_argument("--merged", type=Path, help="also write a long-format CSV with a run column")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "curves":
            for path in emit_curves(args.runs, args.merged):
                print(path)
            return EXIT_OK
        cfg = config_from_args(args)
        if args.command == "run":
            outcome = run_experiment(cfg)
            print(json.dumps(_json_safe(outcome.summary)))
            return outcome.exit_code
        values = [v.strip() for v in args.values.split(",") if v.strip()]
        outcomes = sweep(cfg, args.axis, values)
        for o in outcomes:
            print(json.dumps(_json_safe(o.summary)))
        return EXIT_OK
    except ConfigError as exc:
        for line in exc.errors:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

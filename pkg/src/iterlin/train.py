"""Fixed-period iterative linearisation.

Every step takes a gradient step on the model linearised at the current
anchor ``theta_s``; the anchor (and with it the frozen Jacobian features) is
replaced by the live parameters whenever ``t % K == 0``, before that step runs.
``K = 1`` is plain gradient descent, ``K = inf`` trains the linearisation at
initialisation throughout.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .kernel import KernelMatrix, empirical_ntk, kernel_drift
from .linearise import Anchor, make_anchor
from .tensor import Graph

log = logging.getLogger(__name__)

INF = math.inf
STATUSES = ("running", "converged", "diverged", "budget-exhausted")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


class Loss:
    name = "loss"

    def value(self, pred: np.ndarray, target: np.ndarray) -> float:
        raise NotImplementedError

    def derivative(self, pred: np.ndarray, target: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class MSE(Loss):
    """0.5 * ||pred - target||^2 summed over the batch; the derivative is the residual."""

    name = "mse"

    def value(self, pred, target):
        r = pred - target
        return 0.5 * float(np.vdot(r, r))

    def derivative(self, pred, target):
        return pred - target


class SoftmaxCrossEntropy(Loss):
    """Cross-entropy of softmax(logits) against integer labels, summed over the batch.

    The softmax lives here, outside the graph, so linearisation never touches it.
    """

    name = "cross_entropy"

    @staticmethod
    def _log_softmax(logits):
        z = logits - logits.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def value(self, pred, target):
        logp = self._log_softmax(pred)
        return -float(logp[np.arange(len(target)), target].sum())

    def derivative(self, pred, target):
        grad = np.exp(self._log_softmax(pred))
        grad[np.arange(len(target)), target] -= 1
        return grad


LOSSES: dict[str, Loss] = {"mse": MSE(), "cross_entropy": SoftmaxCrossEntropy()}


def get_loss(name: str) -> Loss:
    try:
        return LOSSES[name]
    except KeyError:
        raise ValueError(f"unknown loss {name!r}; expected one of {sorted(LOSSES)}") from None


# ---------------------------------------------------------------------------
# refresh schedule
# ---------------------------------------------------------------------------


class FixedPeriod:
    """Refresh at t = 0, K, 2K, ...; ``K = inf`` refreshes only at t = 0."""

    def __init__(self, period: int | float):
        self.period = parse_period(period)

    def due(self, t: int) -> bool:
        return t == 0 if self.period == INF else t % self.period == 0

    def anchor_step(self, t: int) -> int:
        return 0 if self.period == INF else self.period * (t // self.period)

    def __repr__(self) -> str:
        return f"FixedPeriod({'inf' if self.period == INF else self.period})"


def parse_period(value) -> int | float:
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "infinity"):
            return INF
        value = int(value)
    if isinstance(value, float):
        if value == INF:
            return INF
        if not value.is_integer():
            raise ValueError(f"K must be a positive integer or 'inf', got {value}")
        value = int(value)
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise ValueError(f"K must be a positive integer or 'inf', got {value!r}")
    return int(value)


# ---------------------------------------------------------------------------
# config / state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    eta: float
    K: int | float = 1
    loss: str = "mse"
    steps: int = 100
    batch_size: int | None = None
    shuffle: bool = False
    seed: int = 0
    loss_factor: float = 1e4
    norm_factor: float = 1e6
    target_loss: float | None = None
    probe_size: int = 0
    probe_mode: str = "scalar"
    eval_every: int = 1
    log_every: int | None = None
    dtype: str = "float64"
    reduction: str = "sum"

    def __post_init__(self):
        try:
            object.__setattr__(self, "K", parse_period(self.K))
        except (TypeError, ValueError):
            pass  # reported by validate()

    def validate(self) -> list[str]:
        errors = []
        try:
            parse_period(self.K)
        except (TypeError, ValueError) as exc:
            errors.append(f"train.K: {exc}")
        if not (isinstance(self.eta, (int, float)) and math.isfinite(self.eta) and self.eta >= 0):
            errors.append("train.eta must be a finite number >= 0")
        if self.loss not in LOSSES:
            errors.append(f"train.loss must be one of {sorted(LOSSES)}")
        if not isinstance(self.steps, int) or self.steps < 0:
            errors.append("train.steps must be an integer >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            errors.append("train.batch_size must be >= 1 (or null for full batch)")
        if self.probe_size < 0:
            errors.append("train.probe_size must be >= 0")
        if self.probe_mode not in ("scalar", "block"):
            errors.append("train.probe_mode must be 'scalar' or 'block'")
        if self.eval_every < 1:
            errors.append("train.eval_every must be >= 1")
        if self.log_every is not None and self.log_every < 1:
            errors.append("train.log_every must be >= 1")
        if self.dtype not in ("float32", "float64"):
            errors.append("train.dtype must be 'float32' or 'float64'")
        if self.reduction not in ("sum", "mean"):
            errors.append("train.reduction must be 'sum' or 'mean'")
        if self.loss_factor <= 1 or self.norm_factor <= 1:
            errors.append("divergence factors must exceed 1")
        return errors

    def to_dict(self) -> dict:
        d = asdict(self)
        d["K"] = "inf" if self.K == INF else self.K
        return d

    @property
    def schedule(self) -> FixedPeriod:
        return FixedPeriod(self.K)


@dataclass
class TrainState:
    t: int
    params: np.ndarray
    anchor: Anchor | None = None
    refreshes: int = 0
    status: str = "running"
    history: list[dict] = field(default_factory=list)
    anchor_steps: list[int] = field(default_factory=list)
    kernel: KernelMatrix | None = None
    initial_loss: float | None = None
    initial_norm: float | None = None
    pending: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Batch:
    x: np.ndarray
    target: np.ndarray
    labels: np.ndarray | None = None
    key: object = None
    epoch: int = 0


@dataclass
class TrainResult:
    params: np.ndarray
    status: str
    history: list[dict]
    anchor_steps: list[int]
    anchor_params: np.ndarray | None
    steps_run: int
    final: dict = field(default_factory=dict)

    @property
    def refresh_count(self) -> int:
        return len(self.anchor_steps)


# ---------------------------------------------------------------------------
# pieces of the loop
# ---------------------------------------------------------------------------


def _finite_or_none(value):
    return value if value is None or math.isfinite(value) else None


def detect_divergence(window: Sequence[dict], loss_factor: float = 1e4, norm_factor: float = 1e6) -> bool:
    """True iff the latest loss is non-finite or exceeds ``loss_factor`` x the first,
    or the latest parameter norm exceeds ``norm_factor`` x the first."""
    if not window:
        raise ValueError("divergence window is empty")
    first, last = window[0], window[-1]
    loss = last.get("train_loss")
    if loss is None or not math.isfinite(loss):
        return True
    if loss > loss_factor * first["train_loss"]:
        return True
    norm, norm0 = last.get("param_norm"), first.get("param_norm")
    if norm is not None:
        if not math.isfinite(norm):
            return True
        if norm0 is not None and norm0 > 0 and norm > norm_factor * norm0:
            return True
    return False


def maybe_refresh(
    state: TrainState,
    cfg: TrainConfig,
    graph: Graph,
    probe: np.ndarray | None = None,
    schedule: FixedPeriod | None = None,
) -> TrainState:
    """Replace the anchor with the live parameters when the schedule says so."""
    schedule = schedule or cfg.schedule
    if state.anchor is not None and not schedule.due(state.t):
        return state
    if state.anchor is not None:
        state.anchor.release()
    state.anchor = make_anchor(graph, state.params, step=state.t, index=state.refreshes)
    state.refreshes += 1
    state.anchor_steps.append(state.t)
    state.pending = {"refresh": True}
    if probe is not None and len(probe):
        kernel = empirical_ntk(graph, state.anchor.params, probe, mode=cfg.probe_mode, step=state.t, anchor=state.anchor.index)
        if state.kernel is not None:
            state.pending["kernel_drift"] = kernel_drift(state.kernel, kernel).to_dict()
        state.pending["kernel"] = kernel
        state.kernel = kernel
    return state


def step(state: TrainState, batch: Batch, cfg: TrainConfig, loss: Loss | None = None) -> TrainState:
    """theta <- theta - eta * J_s^T L'(f_lin(theta)) on one batch; records metrics in ``state.pending``.

    With ``reduction="mean"`` the batch loss is divided by the batch size before differentiating.
    """
    if state.status != "running":
        raise RuntimeError(f"cannot step a run with status {state.status!r}")
    loss = loss or get_loss(cfg.loss)
    anchor = state.anchor
    lin = anchor.linearize(batch.x, key=batch.key)
    with np.errstate(over="ignore", invalid="ignore"):
        out = lin.forward(state.params)
        value = loss.value(out, batch.target)
    n = len(batch.x)
    record = {
        "step": state.t,
        "epoch": batch.epoch,
        "phase_index": anchor.index,
        "train_loss": value / n,
        "train_acc": None if batch.labels is None else float((out.argmax(axis=1) == batch.labels).mean()),
        "test_acc": None,
        "grad_norm": None,
        "dist_from_anchor": float(np.linalg.norm(state.params - anchor.params)),
        "param_norm": float(np.linalg.norm(state.params)),
        "status": "running",
    }
    record.update((k, v) for k, v in state.pending.items() if k != "kernel")
    state.pending = {}
    if state.initial_loss is None:
        state.initial_loss, state.initial_norm = record["train_loss"], record["param_norm"]
    window = [{"train_loss": state.initial_loss, "param_norm": state.initial_norm}, record]
    if detect_divergence(window, cfg.loss_factor, cfg.norm_factor):
        record["status"] = state.status = "diverged"
        state.history.append(record)
        return state
    derivative = loss.derivative(out, batch.target)
    if cfg.reduction == "mean":
        derivative = derivative / n
    grad = lin.grad(derivative)
    with np.errstate(over="ignore", invalid="ignore"):
        new = state.params - cfg.eta * grad
    record["grad_norm"] = float(np.linalg.norm(grad))
    if not (np.all(np.isfinite(new)) and math.isfinite(record["grad_norm"])):
        record["status"] = state.status = "diverged"
        state.history.append(record)
        return state
    state.params = new
    state.history.append(record)
    state.t += 1
    if cfg.target_loss is not None and record["train_loss"] <= cfg.target_loss:
        state.status = "converged"
    return state


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


def _targets(ds: Dataset, loss: Loss, dtype) -> np.ndarray:
    if isinstance(loss, SoftmaxCrossEntropy):
        if ds.labels is None:
            raise ValueError("cross-entropy needs integer class labels")
        return ds.labels
    if ds.targets is not None:
        return ds.targets.astype(dtype)
    return ds.one_hot(dtype)


def _batches(ds: Dataset, x: np.ndarray, target: np.ndarray, cfg: TrainConfig):
    n = len(x)
    bs = n if cfg.batch_size is None else min(cfg.batch_size, n)
    per_epoch = -(-n // bs)
    rng = np.random.default_rng(cfg.seed)
    epoch = 0
    while True:
        if bs == n and not cfg.shuffle:
            yield Batch(x, target, ds.labels, key="full", epoch=epoch)
        else:
            order = rng.permutation(n) if cfg.shuffle else None
            for b in range(per_epoch):
                if order is None:
                    sl = slice(b * bs, (b + 1) * bs)
                    yield Batch(x[sl], target[sl], None if ds.labels is None else ds.labels[sl], key=b, epoch=epoch)
                else:
                    idx = order[b * bs : (b + 1) * bs]
                    yield Batch(x[idx], target[idx], None if ds.labels is None else ds.labels[idx], epoch=epoch)
        epoch += 1


def _logged(t: int, cfg: TrainConfig, refresh: bool) -> bool:
    every = cfg.log_every
    if every is None:
        every = 1 if cfg.steps <= 10_000 else 10
    return refresh or t % every == 0


def evaluate(anchor: Anchor, params: np.ndarray, ds: Dataset, loss: Loss, dtype, key=None) -> dict:
    """Loss and accuracy of the linearised model at ``params`` on a whole dataset."""
    out = anchor.linearize(ds.inputs.astype(dtype, copy=False), key=key).forward(params)
    with np.errstate(over="ignore", invalid="ignore"):
        value = loss.value(out, _targets(ds, loss, dtype)) / len(ds)
    acc = None if ds.labels is None else float((out.argmax(axis=1) == ds.labels).mean())
    return {"loss": _finite_or_none(value), "acc": acc}


def train(
    graph: Graph,
    params0: np.ndarray,
    data: Dataset,
    cfg: TrainConfig,
    test: Dataset | None = None,
    sink: Callable[[dict], None] | None = None,
    kernel_sink: Callable[[KernelMatrix], None] | None = None,
) -> TrainResult:
    """Run iterative linearisation until the step budget, convergence, or divergence."""
    errors = cfg.validate()
    if len(data) == 0:
        errors.append("training data is empty")
    if errors:
        raise ValueError("invalid training configuration: " + "; ".join(errors))
    dtype = np.dtype(cfg.dtype)
    loss = get_loss(cfg.loss)
    schedule = cfg.schedule
    x = data.inputs.astype(dtype, copy=False)
    target = _targets(data, loss, dtype)
    test_ds = None if test is None else test.astype(dtype)
    probe = x[: cfg.probe_size] if cfg.probe_size else None

    state = TrainState(t=0, params=np.array(params0, dtype=dtype, copy=True))
    if cfg.steps == 0:
        state.status = "budget-exhausted"
        return TrainResult(state.params, state.status, [], [], None, 0)

    batches = _batches(data, x, target, cfg)
    while state.status == "running" and state.t < cfg.steps:
        maybe_refresh(state, cfg, graph, probe, schedule)
        kernel = state.pending.get("kernel")
        if kernel is not None and kernel_sink is not None:
            kernel_sink(kernel)
        refresh = bool(state.pending.get("refresh"))
        t = state.t
        step(state, next(batches), cfg, loss)
        record = state.history[-1]
        if test_ds is not None and state.status != "diverged" and (t % cfg.eval_every == 0 or state.status != "running"):
            record["test_acc"] = evaluate(state.anchor, state.params, test_ds, loss, dtype, key="test")["acc"]
        if not _logged(t, cfg, refresh) and state.status == "running":
            state.history.pop()
            continue
        record["train_loss"] = _finite_or_none(record["train_loss"])
        if record["train_loss"] is None:
            record["nonfinite"] = ["train_loss"]
        if sink is not None:
            sink(record)

    if state.status == "running":
        state.status = "budget-exhausted"
    final = {"steps": state.t, "status": state.status, "refresh_count": state.refreshes}
    if state.status != "diverged":
        train_eval = evaluate(state.anchor, state.params, data.astype(dtype), loss, dtype)
        final.update(train_loss=train_eval["loss"], train_acc=train_eval["acc"])
        if test_ds is not None:
            test_eval = evaluate(state.anchor, state.params, test_ds, loss, dtype, key="test")
            final.update(test_loss=test_eval["loss"], test_acc=test_eval["acc"])
    anchor_params = None if state.anchor is None else np.array(state.anchor.params)
    if state.anchor is not None:
        state.anchor.release()
    log.info("finished after %d steps: %s", state.t, state.status)
    return TrainResult(state.params, state.status, state.history, state.anchor_steps, anchor_params, state.t, final)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"ILCK"
CHECKPOINT_VERSION = 1


def write_checkpoint(path: str | Path, params: np.ndarray, anchor_params: np.ndarray, step: int) -> None:
    """``ILCK`` | u32 version | u64 p | p x f64 params | p x f64 anchor | u64 step, little-endian."""
    params = np.asarray(params, dtype="<f8").ravel()
    anchor_params = np.asarray(anchor_params, dtype="<f8").ravel()
    if params.shape != anchor_params.shape:
        raise ValueError("params and anchor must have the same length")
    blob = (
        CHECKPOINT_MAGIC
        + struct.pack("<IQ", CHECKPOINT_VERSION, params.size)
        + params.tobytes()
        + anchor_params.tobytes()
        + struct.pack("<Q", step)
    )
    Path(path).write_bytes(blob)


def read_checkpoint(path: str | Path) -> tuple[np.ndarray, np.ndarray, int]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    version, p = struct.unpack_from("<IQ", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    expected = 16 + 16 * p + 8
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for p={p}, found {len(raw)}")
    params = np.frombuffer(raw, dtype="<f8", count=p, offset=16).copy()
    anchor = np.frombuffer(raw, dtype="<f8", count=p, offset=16 + 8 * p).copy()
    (step_,) = struct.unpack_from("<Q", raw, 16 + 16 * p)
    return params, anchor, step_

"""Sequential layer graphs with exact forward-mode and reverse-mode derivatives.

Tensors are plain numpy arrays (batch axis first).  Parameters live in one flat
vector whose layout is owned by the :class:`Graph`; per-layer views are cut
from it with :meth:`Graph.unflatten`.

Every layer implements three rules:

``forward(p, x) -> (y, cache)``
    primal evaluation; ``cache`` keeps exactly what the derivative rules need.
``tangent(p, dp, dx, cache) -> dy``
    Jacobian-vector product at the cached point (``dp``/``dx`` may be ``None``
    meaning zero).
``backward(p, dy, cache, need_dx) -> (grads, dx)``
    vector-Jacobian product.

Because ``tangent`` and ``backward`` only read the cache, a :class:`Trace`
taken at one parameter vector can be reused for many JVP/VJP evaluations;
this is what makes frozen-feature (linearised) training cheap.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_CHUNK = 1000


class ShapeError(ValueError):
    pass


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Layer:
    kind = "layer"

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def param_shapes(self, in_shape: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
        return {}

    def fan_in(self, in_shape: tuple[int, ...]) -> int:
        return 0

    def forward(self, p, x):
        raise NotImplementedError

    def tangent(self, p, dp, dx, cache):
        raise NotImplementedError

    def backward(self, p, dy, cache, need_dx):
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind}


class Dense(Layer):
    kind = "dense"

    def __init__(self, width: int):
        if width < 1:
            raise ValueError("dense width must be >= 1")
        self.width = int(width)

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"dense expects a flat input, got {in_shape}")
        return (self.width,)

    def param_shapes(self, in_shape):
        return {"weight": (self.width, in_shape[0]), "bias": (self.width,)}

    def fan_in(self, in_shape):
        return in_shape[0]

    def forward(self, p, x):
        return x @ p["weight"].T + p["bias"], x

    def tangent(self, p, dp, dx, cache):
        dy = None
        if dp is not None:
            dy = cache @ dp["weight"].T + dp["bias"]
        if dx is not None:
            t = dx @ p["weight"].T
            dy = t if dy is None else dy + t
        return dy

    def backward(self, p, dy, cache, need_dx):
        grads = {"weight": dy.T @ cache, "bias": dy.sum(axis=0)}
        return grads, (dy @ p["weight"] if need_dx else None)

    def describe(self):
        return {"kind": self.kind, "width": self.width}


class Conv2d(Layer):
    """Stride-1 convolution, ``padding`` is ``"valid"`` or ``"same"`` (odd kernels)."""

    kind = "conv2d"

    def __init__(self, channels: int, kernel_size: int = 5, padding: str = "valid"):
        if channels < 1 or kernel_size < 1:
            raise ValueError("conv2d needs channels >= 1 and kernel_size >= 1")
        if padding not in ("valid", "same"):
            raise ValueError(f"unknown padding {padding!r}")
        if padding == "same" and kernel_size % 2 == 0:
            raise ValueError("'same' padding needs an odd kernel size")
        self.channels = int(channels)
        self.kernel_size = int(kernel_size)
        self.padding = padding

    @property
    def _pad(self) -> int:
        return (self.kernel_size - 1) // 2 if self.padding == "same" else 0

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"conv2d expects (C, H, W), got {in_shape}")
        _, h, w = in_shape
        k, pad = self.kernel_size, self._pad
        ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d kernel {k} does not fit input {in_shape}")
        return (self.channels, ho, wo)

    def param_shapes(self, in_shape):
        k = self.kernel_size
        return {"weight": (self.channels, in_shape[0], k, k), "bias": (self.channels,)}

    def fan_in(self, in_shape):
        return in_shape[0] * self.kernel_size**2

    def _patches(self, xp):
        # (N, C, Hp, Wp) -> (N*Ho*Wo, C*k*k)
        k = self.kernel_size
        win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, C, Ho, Wo, k, k
        n, c, ho, wo = win.shape[:4]
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k), (n, ho, wo)

    def _conv(self, xp, weight, patches=None):
        cols, (n, ho, wo) = patches or self._patches(xp)
        out = cols @ weight.reshape(weight.shape[0], -1).T
        return out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)

    def _padded(self, x):
        pad = self._pad
        if pad == 0:
            return x
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))

    def forward(self, p, x):
        xp = self._padded(x)
        # the im2col matrix is kept so a linearisation reuses it on every step
        patches = self._patches(xp)
        y = self._conv(xp, p["weight"], patches) + p["bias"][None, :, None, None]
        return y, (xp.shape, patches)

    def tangent(self, p, dp, dx, cache):
        dy = None
        if dp is not None:
            dy = self._conv(None, dp["weight"], cache[1]) + dp["bias"][None, :, None, None]
        if dx is not None:
            t = self._conv(self._padded(dx), p["weight"])
            dy = t if dy is None else dy + t
        return dy

    def backward(self, p, dy, cache, need_dx):
        weight = p["weight"]
        o, c, k, _ = weight.shape
        n, _, ho, wo = dy.shape
        dy_mat = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        in_shape, (cols, _) = cache
        grads = {
            "weight": (dy_mat.T @ cols).reshape(weight.shape),
            "bias": dy.sum(axis=(0, 2, 3)),
        }
        if not need_dx:
            return grads, None
        dcols = (dy_mat @ weight.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros(in_shape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + ho, j : j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        pad = self._pad
        if pad:
            dxp = dxp[:, :, pad:-pad, pad:-pad]
        return grads, dxp

    def describe(self):
        return {
            "kind": self.kind,
            "channels": self.channels,
            "kernel_size": self.kernel_size,
            "padding": self.padding,
        }


class _Pool2d(Layer):
    def __init__(self, size: int = 2):
        if size < 1:
            raise ValueError("pool size must be >= 1")
        self.size = int(size)

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"{self.kind} expects (C, H, W), got {in_shape}")
        c, h, w = in_shape
        if h < self.size or w < self.size:
            raise ShapeError(f"{self.kind} window {self.size} does not fit input {in_shape}")
        return (c, h // self.size, w // self.size)

    def _windows(self, x):
        # (N, C, H, W) -> (N, C, Ho, Wo, s*s); trailing rows/cols beyond a full window are dropped
        s = self.size
        n, c, h, w = x.shape
        ho, wo = h // s, w // s
        x = x[:, :, : ho * s, : wo * s]
        return x.reshape(n, c, ho, s, wo, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, s * s)

    def _unwindow(self, win, in_shape):
        s = self.size
        n, c, ho, wo, _ = win.shape
        full = win.reshape(n, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * s, wo * s)
        if full.shape[2:] == tuple(in_shape[2:]):
            return full
        out = np.zeros(in_shape, dtype=win.dtype)
        out[:, :, : ho * s, : wo * s] = full
        return out

    def describe(self):
        return {"kind": self.kind, "size": self.size}


class MaxPool2d(_Pool2d):
    """Non-overlapping max pooling; ties go to the lowest flat index in the window."""

    kind = "maxpool"

    def forward(self, p, x):
        win = self._windows(x)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return y, (idx.astype(np.uint8 if self.size**2 <= 256 else np.int64), x.shape)

    def tangent(self, p, dp, dx, cache):
        if dx is None:
            return None
        idx, _ = cache
        return np.take_along_axis(self._windows(dx), idx[..., None].astype(np.intp), axis=-1)[..., 0]

    def backward(self, p, dy, cache, need_dx):
        if not need_dx:
            return {}, None
        idx, in_shape = cache
        n, c, ho, wo = dy.shape
        win = np.zeros((n, c, ho, wo, self.size**2), dtype=dy.dtype)
        np.put_along_axis(win, idx[..., None].astype(np.intp), dy[..., None], axis=-1)
        return {}, self._unwindow(win, in_shape)


class AvgPool2d(_Pool2d):
    kind = "avgpool"

    def forward(self, p, x):
        return self._windows(x).mean(axis=-1), x.shape

    def tangent(self, p, dp, dx, cache):
        return None if dx is None else self._windows(dx).mean(axis=-1)

    def backward(self, p, dy, cache, need_dx):
        if not need_dx:
            return {}, None
        win = np.repeat(dy[..., None] / self.size**2, self.size**2, axis=-1)
        return {}, self._unwindow(win, cache)


class ReLU(Layer):
    """ReLU with derivative 0 at 0."""

    kind = "relu"

    def forward(self, p, x):
        mask = x > 0
        return np.maximum(x, 0), mask

    def tangent(self, p, dp, dx, cache):
        return None if dx is None else dx * cache

    def backward(self, p, dy, cache, need_dx):
        return {}, (dy * cache if need_dx else None)


class Tanh(Layer):
    kind = "tanh"

    def forward(self, p, x):
        y = np.tanh(x)
        return y, y

    def tangent(self, p, dp, dx, cache):
        return None if dx is None else dx * (1 - cache * cache)

    def backward(self, p, dy, cache, need_dx):
        return {}, (dy * (1 - cache * cache) if need_dx else None)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, p, x):
        return x.reshape(x.shape[0], -1), x.shape

    def tangent(self, p, dp, dx, cache):
        return None if dx is None else dx.reshape(dx.shape[0], -1)

    def backward(self, p, dy, cache, need_dx):
        return {}, (dy.reshape(cache) if need_dx else None)


ACTIVATIONS = {"relu": ReLU, "tanh": Tanh}
POOLS = {"max": MaxPool2d, "avg": AvgPool2d}


# ---------------------------------------------------------------------------
# graph and parameter layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Slot:
    layer: int
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class Graph:
    """An ordered stack of layers with shape inference and a flat parameter layout."""

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int]):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        if not self.layers:
            raise ValueError("graph needs at least one layer")
        shapes = [self.input_shape]
        slots: list[Slot] = []
        offset = 0
        for i, layer in enumerate(self.layers):
            try:
                out = layer.output_shape(shapes[-1])
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            for name, shape in layer.param_shapes(shapes[-1]).items():
                slots.append(Slot(i, name, tuple(shape), offset))
                offset += int(np.prod(shape))
            shapes.append(out)
        if len(shapes[-1]) != 1:
            raise ShapeError(f"graph output must be flat, got {shapes[-1]}")
        self.shapes = shapes
        self.layout = tuple(slots)
        self.num_params = offset
        self.output_dim = shapes[-1][0]
        self._first_param_layer = min((s.layer for s in slots), default=len(self.layers))

    def __repr__(self) -> str:
        kinds = "-".join(layer.kind for layer in self.layers)
        return f"Graph({kinds}, input={self.input_shape}, p={self.num_params})"

    def describe(self) -> list[dict]:
        return [layer.describe() for layer in self.layers]

    def fan_in(self, slot: Slot) -> int:
        return self.layers[slot.layer].fan_in(self.shapes[slot.layer])

    # -- layout -------------------------------------------------------------

    def unflatten(self, theta: np.ndarray) -> list[dict[str, np.ndarray] | None]:
        """Per-layer dicts of views into ``theta`` (``None`` for parameter-free layers)."""
        if theta.ndim != 1 or theta.shape[0] != self.num_params:
            raise ShapeError(f"expected a flat parameter vector of length {self.num_params}, got shape {theta.shape}")
        out: list[dict[str, np.ndarray] | None] = [None] * len(self.layers)
        for s in self.layout:
            if out[s.layer] is None:
                out[s.layer] = {}
            out[s.layer][s.name] = theta[s.offset : s.offset + s.size].reshape(s.shape)
        return out

    def flatten(self, per_layer: Sequence[dict[str, np.ndarray] | None], dtype=None) -> np.ndarray:
        if dtype is None:
            dtype = next(iter(d for d in per_layer if d)).get("weight").dtype
        theta = np.empty(self.num_params, dtype=dtype)
        for s in self.layout:
            block = per_layer[s.layer][s.name]
            if block.shape != s.shape:
                raise ShapeError(f"layer {s.layer} {s.name}: expected {s.shape}, got {block.shape}")
            theta[s.offset : s.offset + s.size] = block.ravel()
        return theta

    # -- evaluation ---------------------------------------------------------

    def _prepare_input(self, x: np.ndarray, dtype) -> np.ndarray:
        x = np.asarray(x)
        if x.shape == self.input_shape:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"input shape {x.shape} does not match graph input {self.input_shape} (with a leading batch axis)"
            )
        return x.astype(dtype, copy=False)

    def trace(self, theta: np.ndarray, x: np.ndarray, chunk: int = DEFAULT_CHUNK) -> "Trace":
        """Evaluate at ``theta`` and keep every layer cache for later JVP/VJP calls."""
        theta = np.asarray(theta)
        params = self.unflatten(theta)
        _check_finite("parameters", theta)
        x = self._prepare_input(x, theta.dtype)
        chunks = []
        for start in range(0, x.shape[0], chunk):
            h = x[start : start + chunk]
            caches = []
            for layer, p in zip(self.layers, params):
                h, cache = layer.forward(p, h)
                caches.append(cache)
            chunks.append((start, h, caches))
        return Trace(self, theta, params, chunks, x.shape[0])


class Trace:
    """Forward evaluation at fixed parameters, reusable for any number of JVPs/VJPs."""

    def __init__(self, graph: Graph, theta, params, chunks, batch: int):
        self.graph = graph
        self.theta = theta
        self.params = params
        self.chunks = chunks
        self.batch = batch
        self.output = np.concatenate([c[1] for c in chunks]) if chunks else np.zeros((0, graph.output_dim), theta.dtype)

    def jvp(self, tangent: np.ndarray) -> np.ndarray:
        graph = self.graph
        tangent = np.asarray(tangent)
        if tangent.shape != (graph.num_params,):
            raise ShapeError(f"tangent length {tangent.shape} does not match p={graph.num_params}")
        _check_finite("tangent", tangent)
        dparams = graph.unflatten(tangent.astype(self.theta.dtype, copy=False))
        outs = []
        for _, y, caches in self.chunks:
            dh = None
            for layer, p, dp, cache in zip(graph.layers, self.params, dparams, caches):
                dh = layer.tangent(p, dp, dh, cache)
            outs.append(np.zeros_like(y) if dh is None else dh)
        return np.concatenate(outs) if outs else np.zeros_like(self.output)

    def vjp(self, cotangent: np.ndarray) -> np.ndarray:
        graph = self.graph
        cotangent = np.asarray(cotangent)
        if cotangent.shape != self.output.shape:
            raise ShapeError(f"cotangent shape {cotangent.shape} does not match output shape {self.output.shape}")
        _check_finite("cotangent", cotangent)
        cotangent = cotangent.astype(self.theta.dtype, copy=False)
        grad = np.zeros(graph.num_params, dtype=self.theta.dtype)
        views = graph.unflatten(grad)
        first = graph._first_param_layer
        for start, y, caches in self.chunks:
            dh = cotangent[start : start + y.shape[0]]
            for i in range(len(graph.layers) - 1, first - 1, -1):
                layer = graph.layers[i]
                grads, dh = layer.backward(self.params[i], dh, caches[i], need_dx=i > first)
                for name, g in grads.items():
                    views[i][name] += g
        return grad


# ---------------------------------------------------------------------------
# functional surface
# ---------------------------------------------------------------------------


def forward(graph: Graph, params: np.ndarray, x: np.ndarray, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """Logits of shape ``(batch, c)``."""
    return graph.trace(params, x, chunk).output


def jvp(graph: Graph, params: np.ndarray, x: np.ndarray, tangent: np.ndarray) -> np.ndarray:
    """Directional derivative of the outputs along ``tangent`` in parameter space."""
    return graph.trace(params, x).jvp(tangent)


def vjp(graph: Graph, params: np.ndarray, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """Parameter gradient of ``<cotangent, f(params, x)>``."""
    return graph.trace(params, x).vjp(cotangent)


def jacobian(graph: Graph, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Dense Jacobian of shape ``(batch, c, p)`` built from one-hot VJPs; small models only."""
    x = graph._prepare_input(x, params.dtype)
    c = graph.output_dim
    jac = np.empty((x.shape[0], c, graph.num_params), dtype=params.dtype)
    eye = np.eye(c, dtype=params.dtype)
    for i in range(x.shape[0]):
        single = graph.trace(params, x[i : i + 1])
        for k in range(c):
            jac[i, k] = single.vjp(eye[k : k + 1])
    return jac


@dataclass
class GradCheckReport:
    jvp_error: float
    vjp_error: float
    duality_error: float
    trials: int
    epsilon: float

    def ok(self, fd_tol: float = 1e-6, duality_tol: float = 1e-10) -> bool:
        return self.jvp_error <= fd_tol and self.vjp_error <= fd_tol and self.duality_error <= duality_tol


def _rel(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def grad_check(
    graph: Graph,
    params: np.ndarray,
    x: np.ndarray,
    trials: int = 10,
    epsilon: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    """Worst-case relative errors of jvp/vjp against central differences over random unit directions.

    The vjp check contracts with a random output cotangent ``u``:
    ``<vjp(u), v>`` against ``<u, (f(θ+εv) - f(θ-εv)) / 2ε>``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    rng = np.random.default_rng(seed)
    tr = graph.trace(params, x)
    worst_jvp = worst_vjp = worst_dual = 0.0
    for _ in range(trials):
        v = rng.standard_normal(graph.num_params)
        v /= np.linalg.norm(v)
        v = v.astype(params.dtype)
        u = rng.standard_normal(tr.output.shape).astype(params.dtype)
        fd = (forward(graph, params + epsilon * v, x) - forward(graph, params - epsilon * v, x)) / (2 * epsilon)
        jv = tr.jvp(v)
        g = tr.vjp(u)
        lhs, rhs = float(np.vdot(u, jv)), float(np.vdot(g, v))
        worst_jvp = max(worst_jvp, _rel(jv, fd))
        worst_vjp = max(worst_vjp, _rel(rhs, float(np.vdot(u, fd))))
        worst_dual = max(worst_dual, _rel(lhs, rhs))
    return GradCheckReport(worst_jvp, worst_vjp, worst_dual, trials, epsilon)

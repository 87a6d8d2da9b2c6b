"""Weight-space linearisation of a graph around an anchor point.

The linearised model at anchor ``theta_s`` is

    f_lin(theta, x) = f(theta_s, x) + J(theta_s, x) (theta - theta_s)

and its parameter gradient contracts a loss derivative with the same frozen
Jacobian.  Neither is ever formed as a matrix: one cached forward trace at the
anchor serves every JVP (for ``f_lin``) and VJP (for the gradient).  ReLU gates
and max-pool winners therefore come from the anchor evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DEFAULT_CHUNK, Graph, ShapeError, Trace


@dataclass(frozen=True, eq=False)
class Anchor:
    graph: Graph
    params: np.ndarray
    step: int = 0
    index: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def linearize(self, x: np.ndarray, key=None, chunk: int = DEFAULT_CHUNK) -> "Linearization":
        """Linearised model restricted to inputs ``x``.

        With a ``key`` the anchor keeps the trace and returns it for later calls
        with the same key; this is how a phase reuses one forward pass per batch.
        The caller guarantees that a key always names the same inputs.
        """
        if key is not None and key in self._cache:
            return self._cache[key]
        lin = Linearization(self, self.graph.trace(self.params, x, chunk))
        if key is not None:
            self._cache[key] = lin
        return lin

    def release(self) -> None:
        self._cache.clear()


class Linearization:
    def __init__(self, anchor: Anchor, trace: Trace):
        self.anchor = anchor
        self.trace = trace

    @property
    def output(self) -> np.ndarray:
        """f(theta_s, x)."""
        return self.trace.output

    def forward(self, current: np.ndarray) -> np.ndarray:
        anchor = self.anchor
        if current.shape != anchor.params.shape:
            raise ShapeError(f"parameter vector of length {current.shape} does not match p={anchor.params.shape}")
        if np.array_equal(current, anchor.params):
            return self.trace.output.copy()
        return self.trace.output + self.trace.jvp(current - anchor.params)

    def grad(self, loss_derivative: np.ndarray) -> np.ndarray:
        return self.trace.vjp(loss_derivative)


def make_anchor(graph: Graph, params: np.ndarray, step: int = 0, index: int = 0) -> Anchor:
    """Snapshot ``params`` as a linearisation point; later edits to ``params`` do not leak in."""
    params = np.array(params, copy=True)
    if params.shape != (graph.num_params,):
        raise ShapeError(f"expected {graph.num_params} parameters, got shape {params.shape}")
    if not np.all(np.isfinite(params)):
        raise ValueError("anchor parameters contain non-finite values")
    params.setflags(write=False)
    return Anchor(graph, params, int(step), int(index))


def lin_forward(anchor: Anchor, current: np.ndarray, x: np.ndarray) -> np.ndarray:
    """f(theta_s, x) + J(theta_s, x) (current - theta_s)."""
    return anchor.linearize(x).forward(np.asarray(current))


def lin_grad(anchor: Anchor, x: np.ndarray, loss_derivative: np.ndarray) -> np.ndarray:
    """J(theta_s, x)^T loss_derivative: the gradient of L(f_lin) when the derivative is taken at f_lin."""
    return anchor.linearize(x).grad(loss_derivative)

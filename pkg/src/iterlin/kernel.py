"""Empirical NTK on probe sets, kernel drift, and gradient-flow dynamics oracles."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Graph, forward, jacobian, vjp

PROBE_CAP = {"scalar": 512, "block": 64}
JACOBIAN_PATH_MAX_PARAMS = 100_000


def probe_id(probe: np.ndarray) -> str:
    arr = np.ascontiguousarray(probe)
    return hashlib.sha1(str(arr.shape).encode() + arr.tobytes()).hexdigest()[:12]


@dataclass(frozen=True)
class KernelMatrix:
    """``scalar`` mode: m x m, summed over outputs.  ``block`` mode: (m*c) x (m*c), row index i*c + k."""

    mode: str
    matrix: np.ndarray
    num_outputs: int
    probe: str = ""
    step: int | None = None
    anchor: int | None = None

    @property
    def size(self) -> int:
        return self.matrix.shape[0] if self.mode == "scalar" else self.matrix.shape[0] // self.num_outputs

    def asymmetry(self) -> float:
        scale = np.abs(self.matrix).max()
        return 0.0 if scale == 0 else float(np.abs(self.matrix - self.matrix.T).max() / scale)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh((self.matrix + self.matrix.T) / 2)[0])

    def check(self, sym_tol: float = 1e-10, psd_tol: float = 1e-8) -> dict:
        trace = float(np.trace(self.matrix))
        lam = self.min_eigenvalue()
        asym = self.asymmetry()
        return {
            "asymmetry": asym,
            "min_eigenvalue": lam,
            "trace": trace,
            "symmetric": asym <= sym_tol,
            "psd": lam >= -psd_tol * trace,
        }

    def scalar(self) -> "KernelMatrix":
        """Sum of the diagonal output blocks of a block kernel."""
        if self.mode == "scalar":
            return self
        m, c = self.size, self.num_outputs
        blocks = self.matrix.reshape(m, c, m, c)
        mat = np.einsum("ikjk->ij", blocks)
        return KernelMatrix("scalar", mat, c, self.probe, self.step, self.anchor)

    def save_txt(self, path: str | Path) -> None:
        np.savetxt(path, self.matrix, fmt="%.17g", delimiter=" ")


def empirical_ntk(
    graph: Graph,
    params: np.ndarray,
    probe: np.ndarray,
    mode: str = "scalar",
    method: str = "auto",
    cap: int | None = None,
    step: int | None = None,
    anchor: int | None = None,
) -> KernelMatrix:
    """Gram matrix of per-example parameter Jacobians on ``probe``.

    ``method="jacobian"`` materialises per-example gradients (one VJP per
    example and output); ``method="jvp"`` builds each block column as
    ``J (J^T e)`` and never holds the Jacobian.  ``auto`` picks the former for
    graphs with at most 1e5 parameters.
    """
    if mode not in PROBE_CAP:
        raise ValueError(f"unknown kernel mode {mode!r}")
    if not np.all(np.isfinite(params)):
        raise ValueError("parameters contain non-finite values")
    probe = graph._prepare_input(probe, params.dtype)
    m, c = probe.shape[0], graph.output_dim
    limit = PROBE_CAP[mode] if cap is None else cap
    if m > limit:
        raise ValueError(f"probe of {m} examples exceeds the {mode}-mode cap of {limit}")
    if method == "auto":
        method = "jacobian" if graph.num_params <= JACOBIAN_PATH_MAX_PARAMS else "jvp"
    if method == "jacobian":
        jac = jacobian(graph, params, probe).reshape(m * c, -1)
        block = jac @ jac.T
    elif method == "jvp":
        tr = graph.trace(params, probe)
        block = np.empty((m * c, m * c), dtype=params.dtype)
        e = np.zeros((m, c), dtype=params.dtype)
        for col in range(m * c):
            e.flat[col] = 1.0
            block[:, col] = tr.jvp(tr.vjp(e)).ravel()
            e.flat[col] = 0.0
    else:
        raise ValueError(f"unknown kernel method {method!r}")
    km = KernelMatrix("block", block, c, probe_id(probe), step, anchor)
    return km if mode == "block" else km.scalar()


@dataclass(frozen=True)
class Drift:
    distance: float
    alignment: float

    def to_dict(self) -> dict:
        return {"distance": self.distance, "alignment": self.alignment}


def kernel_drift(a: KernelMatrix, b: KernelMatrix) -> Drift:
    """Relative Frobenius distance ||a-b||/||a|| and Frobenius alignment of two kernels on one probe set."""
    if a.mode != b.mode or a.matrix.shape != b.matrix.shape or a.probe != b.probe:
        raise ValueError("kernels were computed on different probe sets or modes")
    na, nb = np.linalg.norm(a.matrix), np.linalg.norm(b.matrix)
    distance = float(np.linalg.norm(a.matrix - b.matrix) / na) if na > 0 else 0.0
    alignment = float(np.vdot(a.matrix, b.matrix) / (na * nb)) if na > 0 and nb > 0 else 1.0
    return Drift(distance, min(1.0, max(-1.0, alignment)))


def residual_dynamics_oracle(kernel: KernelMatrix | np.ndarray, r0: np.ndarray, eta: float, steps: int) -> np.ndarray:
    """r_t = (I - eta K)^t r0 for t = 0..steps by repeated dense multiplication; returns (steps+1, len(r0))."""
    if isinstance(kernel, KernelMatrix):
        if kernel.mode == "scalar" and kernel.num_outputs != 1:
            raise ValueError("scalar-mode kernel governs residual dynamics only for single-output models")
        kernel = kernel.matrix
    r = np.asarray(r0, dtype=np.float64).ravel()
    if kernel.shape != (r.size, r.size):
        raise ValueError(f"kernel of shape {kernel.shape} does not match residual of length {r.size}")
    step_matrix = np.eye(r.size) - eta * kernel
    out = np.empty((steps + 1, r.size))
    out[0] = r
    for t in range(steps):
        r = step_matrix @ r
        out[t + 1] = r
    return out


@dataclass(frozen=True)
class FirstOrderCheck:
    discrepancy: float
    discrepancy_half: float
    ratio: float
    kernel: KernelMatrix


def first_order_check(graph: Graph, params: np.ndarray, x: np.ndarray, y: np.ndarray, eta: float) -> FirstOrderCheck:
    """Compare one GD step on 0.5||f - y||^2 with the kernel prediction df = -eta K (f - y).

    The discrepancy ||df + eta K r|| is second order in the step, so halving
    the step should divide it by about four.
    """
    f0 = forward(graph, params, x)
    if len(f0) > 16:
        raise ValueError("first_order_check is meant for probes of at most 16 examples")
    r = f0 - np.reshape(y, f0.shape)
    kernel = empirical_ntk(graph, params, x, mode="block")
    block = kernel.matrix

    def discrepancy(step_size: float) -> float:
        moved = params - step_size * vjp(graph, params, x, r)
        df = forward(graph, moved, x) - f0
        return float(np.linalg.norm(df.ravel() + step_size * block @ r.ravel()))

    d1, d2 = discrepancy(eta), discrepancy(eta / 2)
    ratio = d1 / d2 if d2 > 0 else float("nan")
    return FirstOrderCheck(d1, d2, ratio, kernel)

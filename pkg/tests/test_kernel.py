import numpy as np
import pytest

from iterlin.kernel import (
    KernelMatrix,
    empirical_ntk,
    first_order_check,
    kernel_drift,
    probe_id,
    residual_dynamics_oracle,
)
from iterlin.model import ModelConfig, build_lenet_variant, build_mlp, init_params
from iterlin.tensor import jacobian


@pytest.fixture
def net():
    g = build_mlp(3, (10,), 2, activation="tanh")
    x = np.random.default_rng(0).standard_normal((5, 3))
    return g, init_params(g, seed=0), x


def test_block_kernel_is_jacobian_gram(net):
    g, theta, x = net
    jac = jacobian(g, theta, x).reshape(10, -1)
    k = empirical_ntk(g, theta, x, mode="block")
    np.testing.assert_allclose(k.matrix, jac @ jac.T, rtol=1e-13)
    # row index i*c + k: entry (example 1, output 1) x (example 3, output 0)
    per_example = jacobian(g, theta, x)
    np.testing.assert_allclose(k.matrix[3, 6], per_example[1, 1] @ per_example[3, 0], rtol=1e-13)


def test_methods_agree(net):
    g, theta, x = net
    a = empirical_ntk(g, theta, x, mode="block", method="jacobian")
    b = empirical_ntk(g, theta, x, mode="block", method="jvp")
    np.testing.assert_allclose(a.matrix, b.matrix, rtol=1e-11, atol=1e-13)


def test_scalar_kernel_is_trace_over_outputs(net):
    g, theta, x = net
    block = empirical_ntk(g, theta, x, mode="block")
    scalar = empirical_ntk(g, theta, x, mode="scalar")
    b = block.matrix.reshape(5, 2, 5, 2)
    np.testing.assert_allclose(scalar.matrix, b[:, 0, :, 0] + b[:, 1, :, 1], rtol=1e-13)
    assert scalar.size == block.size == 5


def test_validity_on_relu_lenet():
    g = build_lenet_variant(ModelConfig(channels=2, dense_widths=(16,)))
    theta = init_params(g, seed=0)
    x = np.random.default_rng(1).standard_normal((4, 1, 28, 28))
    report = empirical_ntk(g, theta, x, mode="block").check()
    assert report["symmetric"] and report["psd"]


def test_probe_caps(net):
    g, theta, _ = net
    big = np.zeros((65, 3))
    with pytest.raises(ValueError, match="cap"):
        empirical_ntk(g, theta, big, mode="block")
    with pytest.raises(ValueError):
        empirical_ntk(g, theta, big, mode="nope")
    with pytest.raises(ValueError):
        empirical_ntk(g, theta, big[:2], method="magic")


def test_kernel_drift(net):
    g, theta, x = net
    a = empirical_ntk(g, theta, x)
    d = kernel_drift(a, a)
    assert d.distance == 0.0 and d.alignment == pytest.approx(1.0)
    b = empirical_ntk(g, theta * 1.5, x)
    moved = kernel_drift(a, b)
    assert moved.distance > 0 and moved.alignment < 1.0
    other = empirical_ntk(g, theta, x[:4])
    with pytest.raises(ValueError):
        kernel_drift(a, other)
    assert a.probe == probe_id(x) != other.probe


def test_residual_oracle_matches_eigendecomposition():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((6, 6))
    k = a @ a.T
    r0 = rng.standard_normal(6)
    eta = 1.0 / np.linalg.eigvalsh(k)[-1]
    traj = residual_dynamics_oracle(k, r0, eta, 20)
    lam, v = np.linalg.eigh(k)
    closed = v @ ((1 - eta * lam) ** 20 * (v.T @ r0))
    np.testing.assert_allclose(traj[20], closed, rtol=1e-10, atol=1e-12)
    assert traj.shape == (21, 6)
    with pytest.raises(ValueError):
        residual_dynamics_oracle(k, r0[:5], eta, 3)
    with pytest.raises(ValueError):
        residual_dynamics_oracle(KernelMatrix("scalar", k, num_outputs=2), r0, eta, 3)


def test_first_order_check_is_second_order():
    g = build_mlp(2, (12,), 1, activation="tanh")
    theta = init_params(g, seed=2)
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((6, 2)), rng.standard_normal((6, 1))
    res = first_order_check(g, theta, x, y, eta=1e-3)
    assert 3.5 <= res.ratio <= 4.5
    with pytest.raises(ValueError):
        first_order_check(g, theta, rng.standard_normal((17, 2)), rng.standard_normal((17, 1)), eta=1e-3)

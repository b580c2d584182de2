import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from keyflow.core import PointCloud
from keyflow.flow import FlowError, flow, integrate, integrate_grad, roundtrip_error, step_count

from conftest import constant_net, linear_net, rotation_net, tiny_net


def test_constant_field_exact():
    v = np.array([0.25, -0.5])
    cloud = PointCloud.uniform(np.random.default_rng(0).uniform(-1, 1, (20, 2)))
    res = integrate(constant_net(v), cloud, 0.0, 1.0, 8)
    assert np.allclose(res.final_points.points, cloud.points + v, atol=1e-15)
    assert np.array_equal(res.final_points.weights, cloud.weights)
    assert res.checkpoints.shape[0] == 9
    assert roundtrip_error(constant_net(v), cloud, 0.0, 1.0, 8) <= 1e-15


def test_quarter_turn():
    cloud = PointCloud([[1.0, 0.0]], [1.0])
    res = integrate(rotation_net(), cloud, 0.0, math.pi / 2, 100)
    assert np.linalg.norm(res.final_points.points[0] - [0.0, 1.0]) < 1e-7


def test_zero_length_is_identity():
    cloud = PointCloud.uniform([[0.1, 0.2], [0.3, 0.4]])
    res = integrate(tiny_net(), cloud, 0.5, 0.5, 10)
    assert res.checkpoints.shape[0] == 1
    assert np.array_equal(res.final_points.points, cloud.points)


def test_step_count():
    assert step_count(0, 1, 40) == 40
    assert step_count(1, 0, 40) == 40
    assert step_count(0, 0.01, 40) == 1
    assert step_count(0, 0.3, 10) == 3
    with pytest.raises(ValueError):
        step_count(0, 1, 0)


def test_backward_direction_step_sign():
    res = integrate(constant_net([1.0, 0.0]), PointCloud([[0.0, 0.0]], [1.0]), 1.0, 0.0, 4)
    assert res.direction == -1 and res.h == -0.25
    assert np.allclose(res.final_points.points, [[-1.0, 0.0]])


def _rotation_error(steps):
    cloud = PointCloud([[1.0, 0.0]], [1.0])
    out = integrate(rotation_net(), cloud, 0.0, 1.0, steps).final_points.points[0]
    return np.linalg.norm(out - [math.cos(1.0), math.sin(1.0)])


def test_order_four_convergence():
    for n in (5, 10, 20):
        factor = _rotation_error(n) / _rotation_error(2 * n)
        assert 8 <= factor <= 32


def test_roundtrip_rotation():
    cloud = PointCloud.uniform(np.random.default_rng(2).uniform(-1, 1, (30, 2)))
    assert roundtrip_error(rotation_net(), cloud, 0.0, 1.0, 100) < 1e-6


def test_roundtrip_random_net():
    cloud = PointCloud.uniform(np.random.default_rng(3).uniform(-1, 1, (50, 2)))
    net = tiny_net(seed=11)
    assert roundtrip_error(net, cloud, 0.0, 1.0, 50) < 1e-3


def test_composition_on_aligned_grid():
    net = tiny_net(seed=12)
    cloud = PointCloud.uniform(np.random.default_rng(4).uniform(-1, 1, (15, 2)))
    whole = integrate(net, cloud, 0.0, 1.0, 10).final_points
    mid = integrate(net, cloud, 0.0, 0.5, 10).final_points
    rest = integrate(net, mid, 0.5, 1.0, 10).final_points
    assert np.allclose(whole.points, rest.points, rtol=0, atol=1e-15)


def test_multi_time_flow_hits_each_time():
    net = tiny_net(seed=13)
    z = torch.rand(5, 2, dtype=torch.float64)
    out = flow(net, z, [0.0, 0.3, 0.7, 1.0], 10)
    step = flow(net, z, [0.0, 0.3], 10)[0]
    step = flow(net, step, [0.3, 0.7], 10)[0]
    assert out.shape == (3, 5, 2)
    assert torch.allclose(out[1], step, atol=1e-15)


def test_non_finite_state_reported():
    net = linear_net([[200.0, 0.0], [0.0, 200.0]])
    with pytest.raises(FlowError) as err:
        integrate(net, PointCloud([[1.0, 1.0]], [1.0]), 0.0, 200.0, 1)
    assert err.value.point == 0 and err.value.step >= 1


def _fd_params(net, loss, h=1e-6):
    out = []
    for p in net.param_list():
        flat = p.data.view(-1)
        fd = torch.zeros_like(flat)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            lp = loss()
            flat[i] = old - h
            lm = loss()
            flat[i] = old
            fd[i] = (lp - lm) / (2 * h)
        out.append(fd.view_as(p))
    return out


def test_integrate_grad_one_step_fd():
    net = tiny_net(m=2, hidden=(5,), seed=14)
    cloud = PointCloud.uniform(np.random.default_rng(5).uniform(-1, 1, (6, 2)))
    target = np.random.default_rng(6).uniform(-1, 1, (6, 2))

    def loss():
        x = integrate(net, cloud, 0.0, 0.1, 10).final_points.points
        return 0.5 * float(((x - target) ** 2).sum())

    res = integrate(net, cloud, 0.0, 0.1, 10)
    assert res.checkpoints.shape[0] == 2
    grads, _ = integrate_grad(net, res, res.final_points.points - target, 10)
    for g, fd in zip(grads, _fd_params(net, loss)):
        scale = max(fd.abs().max().item(), 1e-10)
        assert (g - fd).abs().max().item() <= 1e-4 * scale


def test_integrate_grad_zero_upstream():
    net = tiny_net()
    cloud = PointCloud.uniform([[0.1, 0.2], [0.4, -0.3]])
    res = integrate(net, cloud, 0.0, 1.0, 5)
    grads, gz = integrate_grad(net, res, np.zeros((2, 2)), 5)
    assert all(torch.all(g == 0) for g in grads) and np.all(gz == 0)


def test_integrate_grad_linear_transition():
    W = np.array([[0.2, -0.7], [0.5, 0.1]])
    net = linear_net(W)
    cloud = PointCloud.uniform([[0.3, 0.1], [-0.2, 0.6]])
    n_steps, T = 7, 1.0
    h = T / n_steps
    hW = h * W
    M = np.eye(2) + hW + hW @ hW / 2 + hW @ hW @ hW / 6 + hW @ hW @ hW @ hW / 24
    Mn = np.linalg.matrix_power(M, n_steps)
    res = integrate(net, cloud, 0.0, T, n_steps)
    assert np.allclose(res.final_points.points, cloud.points @ Mn.T, atol=1e-14)
    up = np.array([[1.0, -2.0], [0.5, 0.25]])
    _, gz = integrate_grad(net, res, up, n_steps)
    assert np.allclose(gz, up @ Mn, atol=1e-14)


def test_checkpointed_flow_gradient_matches():
    net = tiny_net(seed=15)
    z = torch.rand(4, 2, dtype=torch.float64, requires_grad=True)
    a = flow(net, z, [0.0, 0.5, 1.0], 6)
    ga = torch.autograd.grad((a ** 2).sum(), [z] + net.param_list())
    b = flow(net, z, [0.0, 0.5, 1.0], 6, checkpoint=True)
    gb = torch.autograd.grad((b ** 2).sum(), [z] + net.param_list())
    assert torch.allclose(a, b, atol=0)
    for x, y in zip(ga, gb):
        assert torch.allclose(x, y, atol=1e-13)


def test_missing_checkpoints():
    net = tiny_net()
    res = integrate(net, PointCloud([[0.0, 0.0]], [1.0]), 0.0, 1.0, 4)
    res.checkpoints = None
    with pytest.raises(ValueError):
        integrate_grad(net, res, np.zeros((1, 2)), 4)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 1000))
def test_advection_preserves_weights_and_count(n, t0, t1, seed):
    rng = np.random.default_rng(seed)
    w = rng.random(n) + 0.01
    cloud = PointCloud(rng.uniform(-1, 1, (n, 2)), w / w.sum())
    res = integrate(tiny_net(seed=seed % 5), cloud, t0, t1, 4)
    assert res.final_points.n == n
    assert np.array_equal(res.final_points.weights, cloud.weights)
    assert res.checkpoints.shape[0] == step_count(t0, t1, 4) + 1

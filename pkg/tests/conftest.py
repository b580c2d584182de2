import numpy as np
import pytest
import torch

from keyflow.core import KeyframeSequence, PointCloud
from keyflow.net import VelocityNet, build_net

torch.set_num_threads(1)


def linear_net(W, b=None, time_column=None) -> VelocityNet:
    """f(z, t) = W z + w_t t + b, built from an identity-activation layer."""
    W = np.asarray(W, dtype=np.float64)
    d = W.shape[0]
    net = VelocityNet(d, None, [d], ["identity"], dtype=torch.float64)
    full = np.zeros((d, d + 1))
    full[:, :d] = W
    if time_column is not None:
        full[:, d] = time_column
    with torch.no_grad():
        net.weights[0].copy_(torch.tensor(full))
        net.biases[0].copy_(torch.tensor(np.zeros(d) if b is None else np.asarray(b, dtype=np.float64)))
    return net


def constant_net(v) -> VelocityNet:
    v = np.asarray(v, dtype=np.float64)
    return linear_net(np.zeros((v.size, v.size)), v)


def rotation_net() -> VelocityNet:
    """f(x, y) = (-y, x)."""
    return linear_net([[0.0, -1.0], [1.0, 0.0]])


def tiny_net(d=2, seed=0, m=3, hidden=(6, 6)) -> VelocityNet:
    """Full architecture at toy size (under 200 parameters in 2D), float64."""
    net = build_net(d, m=m, hidden=hidden, seed=seed, dtype=torch.float64)
    net.set_active(m)
    return net


def square_keyframes(n=300, shift=(0.5, 0.0), seed=0) -> KeyframeSequence:
    rng = np.random.default_rng(seed)
    sq = rng.uniform(0, 1, (n, 2))
    return KeyframeSequence.from_raw([PointCloud.uniform(sq), PointCloud.uniform(sq + np.asarray(shift))],
                                     [0.0, 1.0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

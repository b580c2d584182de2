"""Fixed-step RK4 advection through a velocity net, with exact discrete gradients.

Gradients are those of the computed RK4 map (discretize-then-optimize).
The checkpointed path keeps only step-boundary states and replays one step
at a time under autograd during the backward sweep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .core import PointCloud
from .net import VelocityNet

DEFAULT_STEPS_PER_UNIT_TIME = 10


class FlowError(RuntimeError):
    """Non-finite state during integration (the field has blown up)."""

    def __init__(self, step: int, point: int, value):
        super().__init__(f"non-finite state at step {step}, point {point}: {value}")
        self.step = step
        self.point = point


def step_count(t_start: float, t_end: float, steps_per_unit_time: int) -> int:
    if steps_per_unit_time < 1:
        raise ValueError("steps_per_unit_time must be >= 1")
    # shave float fuzz so that e.g. 1.0 * 40 does not become 41 steps
    return int(math.ceil(round(abs(t_end - t_start) * steps_per_unit_time, 9)))


def _schedule(times: Sequence[float], spu: int):
    """RK4 steps (t_k, h_k) through consecutive segments and the output step indices."""
    steps = []
    outputs = []
    for a, b in zip(times[:-1], times[1:]):
        n = step_count(a, b, spu)
        if n:
            h = (b - a) / n
            steps.extend((a + k * h, h) for k in range(n))
        outputs.append(len(steps))
    return steps, outputs


def rk4_step(net, z: torch.Tensor, t: float, h: float) -> torch.Tensor:
    k1 = net(z, t)
    k2 = net(z + (0.5 * h) * k1, t + 0.5 * h)
    k3 = net(z + (0.5 * h) * k2, t + 0.5 * h)
    k4 = net(z + h * k3, t + h)
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_finite(z: torch.Tensor, step: int) -> None:
    if not torch.isfinite(z).all():
        bad = int((~torch.isfinite(z)).any(dim=1).nonzero()[0, 0])
        raise FlowError(step, bad, z[bad].tolist())


def _advance(net, z0: torch.Tensor, steps) -> list[torch.Tensor]:
    states = [z0]
    z = z0
    with torch.no_grad():
        for k, (t, h) in enumerate(steps):
            z = rk4_step(net, z, t, h)
            _check_finite(z, k + 1)
            states.append(z)
    return states


def _replay(net, states, steps, outputs, out_grads, params):
    """Reverse sweep over the RK4 steps; returns (dL/dz0, [dL/dparam])."""
    adj = torch.zeros_like(states[0])
    pgrads = [torch.zeros_like(p) for p in params]
    hits: dict[int, list[int]] = {}
    for j, s in enumerate(outputs):
        hits.setdefault(s, []).append(j)
    for k in range(len(steps), -1, -1):
        for j in hits.get(k, ()):
            if out_grads[j] is not None:
                adj = adj + out_grads[j]
        if k == 0:
            break
        t, h = steps[k - 1]
        with torch.enable_grad():
            z = states[k - 1].detach().requires_grad_(True)
            zn = rk4_step(net, z, t, h)
            gs = torch.autograd.grad(zn, [z] + params, grad_outputs=adj, allow_unused=True)
        adj = gs[0]
        for i, g in enumerate(gs[1:]):
            if g is not None:
                pgrads[i] += g
    return adj, pgrads


class _RK4Flow(torch.autograd.Function):
    @staticmethod
    def forward(ctx, net, z0, steps, outputs, *params):
        states = _advance(net, z0.detach(), steps)
        ctx.net = net
        ctx.steps = steps
        ctx.outputs = outputs
        ctx.states = states
        return torch.stack([states[s] for s in outputs])

    @staticmethod
    def backward(ctx, grad_out):
        params = list(ctx.net.param_list())
        adj, pgrads = _replay(ctx.net, ctx.states, ctx.steps, ctx.outputs,
                              list(grad_out), params)
        return (None, adj, None, None, *pgrads)


def flow(net: VelocityNet, z0: torch.Tensor, times: Sequence[float], steps_per_unit_time: int,
         checkpoint: bool = False) -> torch.Tensor:
    """Differentiable advection of z0 from times[0] through times[1:].

    Consecutive segments are integrated with their own step grid
    (ceil(|dt| * steps_per_unit_time) steps each), so every requested time
    is hit exactly.  Returns the states at times[1:] as (K, n, d).

    With ``checkpoint=True`` only step-boundary states are stored and each
    step is recomputed during the backward pass; otherwise autograd keeps
    the whole graph, which is faster but needs memory per stage evaluation.
    """
    times = [float(t) for t in times]
    steps, outputs = _schedule(times, steps_per_unit_time)
    if checkpoint:
        return _RK4Flow.apply(net, z0, steps, outputs, *net.param_list())
    states = [z0]
    z = z0
    for k, (t, h) in enumerate(steps):
        z = rk4_step(net, z, t, h)
        _check_finite(z.detach(), k + 1)
        states.append(z)
    return torch.stack([states[s] for s in outputs])


@dataclass
class FlowResult:
    final_points: PointCloud
    checkpoints: np.ndarray | None   # (steps + 1, n, d)
    h: float
    direction: int
    t_start: float
    t_end: float


def integrate(net: VelocityNet, cloud: PointCloud, t_start: float, t_end: float,
              steps_per_unit_time: int = DEFAULT_STEPS_PER_UNIT_TIME) -> FlowResult:
    """Advect a point cloud; weights pass through untouched."""
    steps, _ = _schedule([t_start, t_end], steps_per_unit_time)
    z0 = torch.tensor(cloud.points, dtype=net.dtype)
    states = _advance(net, z0, steps)
    ckpt = torch.stack(states).to(torch.float64).numpy()
    h = steps[0][1] if steps else 0.0
    direction = int(np.sign(t_end - t_start))
    return FlowResult(PointCloud(ckpt[-1], cloud.weights), ckpt, h, direction,
                      float(t_start), float(t_end))


def roundtrip_error(net: VelocityNet, cloud: PointCloud, t0: float, t1: float,
                    steps_per_unit_time: int = DEFAULT_STEPS_PER_UNIT_TIME) -> float:
    fwd = integrate(net, cloud, t0, t1, steps_per_unit_time).final_points
    back = integrate(net, fwd, t1, t0, steps_per_unit_time).final_points
    return float(np.max(np.linalg.norm(back.points - cloud.points, axis=1)))


def integrate_grad(net: VelocityNet, result: FlowResult, upstream, steps_per_unit_time: int = DEFAULT_STEPS_PER_UNIT_TIME):
    """Gradient of <upstream, final_points> w.r.t. parameters and start points.

    Replays the checkpoints stored in ``result``; returns
    (list of parameter gradients, (n, d) array of input-point gradients).
    """
    if result.checkpoints is None:
        raise ValueError("flow result carries no checkpoints to replay")
    steps, outputs = _schedule([result.t_start, result.t_end], steps_per_unit_time)
    if len(steps) + 1 != result.checkpoints.shape[0]:
        raise ValueError("checkpoint count does not match the step grid")
    states = [torch.tensor(s, dtype=net.dtype) for s in result.checkpoints]
    up = torch.as_tensor(np.asarray(upstream), dtype=net.dtype)
    params = net.param_list()
    adj, pgrads = _replay(net, states, steps, outputs, [up], params)
    return pgrads, adj.to(torch.float64).numpy()

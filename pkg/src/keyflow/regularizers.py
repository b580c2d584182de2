"""Pointwise PDE quantities on the velocity field and their trajectory integrals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import torch

from .core import KeyframeSequence, subsample
from .flow import DEFAULT_STEPS_PER_UNIT_TIME, flow
from .net import Derivatives, VelocityNet

SCALAR_KINDS = ("rig", "div", "A", "curl", "grad", "vel", "acc", "jerk")
ALL_KINDS = SCALAR_KINDS + ("cross",)
_SPATIAL = {"rig", "div", "curl", "grad", "cross"}
_TEMPORAL = {"acc", "jerk"}
RADIAL_TOL = 1e-8


def needs(kinds: Iterable[str]) -> tuple[bool, bool]:
    """(needs spatial Jacobian, needs time derivatives) for a set of kinds."""
    kinds = set(kinds)
    unknown = kinds - set(ALL_KINDS)
    if unknown:
        raise ValueError(f"unknown regularizer kinds: {sorted(unknown)}")
    return bool(kinds & _SPATIAL), bool(kinds & _TEMPORAL)


def curl_vector(jac: torch.Tensor) -> torch.Tensor:
    """(n, 3) curl from (n, d, d) Jacobians; 2D fields live in the xy-plane."""
    J = jac
    if J.shape[-1] == 2:
        zero = torch.zeros_like(J[:, 0, 0])
        return torch.stack([zero, zero, J[:, 1, 0] - J[:, 0, 1]], dim=1)
    return torch.stack([J[:, 2, 1] - J[:, 1, 2], J[:, 0, 2] - J[:, 2, 0], J[:, 1, 0] - J[:, 0, 1]], dim=1)


def alignment_metric(metric, z, t=None):
    """Metric A(z, t) as a d x d matrix (or a (n, d, d) stack for a batch of z).

    ``metric`` is a constant symmetric PSD matrix or one of the radial
    builtins, where v = z / |z|: "radial-penalize" gives v v^T and
    "radial-align" gives I - v v^T.  Near the origin v is taken as 0.
    """
    as_torch = isinstance(z, torch.Tensor)
    Z = z if as_torch else torch.as_tensor(np.asarray(z, dtype=np.float64))
    single = Z.dim() == 1
    if single:
        Z = Z[None]
    n, d = Z.shape
    if not isinstance(metric, str):
        A = torch.as_tensor(np.asarray(metric, dtype=np.float64), dtype=Z.dtype)
        if A.shape != (d, d):
            raise ValueError(f"metric must be {d}x{d}")
        out = A.expand(n, d, d)
    else:
        norm = Z.norm(dim=1, keepdim=True)
        safe = torch.where(norm < RADIAL_TOL, torch.ones_like(norm), norm)
        v = torch.where(norm < RADIAL_TOL, torch.zeros_like(Z), Z / safe)
        vv = v[:, :, None] * v[:, None, :]
        if metric == "radial-penalize":
            out = vv
        elif metric == "radial-align":
            out = torch.eye(d, dtype=Z.dtype) - vv
        else:
            raise ValueError(f"unknown alignment metric {metric!r}")
    if single:
        out = out[0]
    return out if as_torch else out.numpy().copy()


def pointwise_from(kind: str, der: Derivatives, z: torch.Tensor, t, metric="radial-penalize",
                   curl_target=(0.0, 0.0, 0.0)) -> torch.Tensor:
    """l_kind per point from precomputed derivatives: (n,) or (n, 3) for cross."""
    f, J = der.f, der.jac
    if kind == "vel":
        return (f * f).sum(1)
    if kind == "acc":
        return (der.f_t * der.f_t).sum(1)
    if kind == "jerk":
        return (der.f_tt * der.f_tt).sum(1)
    if kind == "A":
        A = alignment_metric(metric, z, t).to(f.dtype)
        return torch.einsum("ni,nij,nj->n", f, A, f)
    if kind == "grad":
        return (J * J).sum((1, 2))
    if kind == "rig":
        S = J + J.transpose(1, 2)
        return (S * S).sum((1, 2))
    if kind == "div":
        tr = torch.diagonal(J, dim1=1, dim2=2).sum(1)
        return tr * tr
    if kind == "curl":
        c = curl_vector(J) - torch.as_tensor(curl_target, dtype=f.dtype)
        return (c * c).sum(1)
    if kind == "cross":
        return curl_vector(J)
    raise ValueError(f"unknown regularizer kind {kind!r}")


def pointwise(kind: str, net: VelocityNet, z, t, params=None):
    """l_kind at a batch (n, d) or a single point (d,).

    ``params`` is the alignment metric for kind "A" and the target curl for
    kind "curl"; it is ignored otherwise.
    """
    jac, time = needs([kind])
    Z = torch.as_tensor(z, dtype=net.dtype)
    single = Z.dim() == 1
    if single:
        Z = Z[None]
    der = net.derivatives(Z, t, jac=jac, time=time)
    kw = {}
    if kind == "A":
        kw["metric"] = "radial-penalize" if params is None else params
    if kind == "curl" and params is not None:
        kw["curl_target"] = params
    out = pointwise_from(kind, der, Z, t, **kw)
    return out[0] if single else out


@dataclass
class RegularizerSample:
    """Monte Carlo accumulators for one keyframe interval.

    ``sums`` hold sum of l over all (point, time) samples; ``mean`` divides
    by ``count``.  ``duration`` is t_{i+1} - t_i, so ``value`` is the
    interval's contribution to L_kind (the 1/2 of the two pushforwards
    cancels against the doubled sample set).
    """

    sums: dict = field(default_factory=dict)
    curl_sum: torch.Tensor | None = None
    count: int = 0
    duration: float = 1.0

    def mean(self, kind: str) -> torch.Tensor:
        if self.count < 1:
            raise ValueError("empty regularizer sample")
        if kind == "cross":
            return self.curl_sum / self.count
        return self.sums[kind] / self.count

    def value(self, kind: str) -> torch.Tensor:
        return self.duration * self.mean(kind)


def stratified_times(t0: float, t1: float, k: int, rng: np.random.Generator) -> list[float]:
    """One uniform time per equal sub-interval of [t0, t1], ascending."""
    u = rng.random(k)
    h = (t1 - t0) / k
    return [t0 + (j + float(u[j])) * h for j in range(k)]


def trajectory_integral(net: VelocityNet, keyframes: KeyframeSequence, interval: int, mc_points: int,
                        mc_times: int, kinds: Iterable[str], rng: np.random.Generator,
                        steps_per_unit_time: int = DEFAULT_STEPS_PER_UNIT_TIME, metric="radial-penalize",
                        curl_target=(0.0, 0.0, 0.0)) -> RegularizerSample:
    """Differentiable Monte Carlo estimate of the regularizers on one interval.

    ``mc_points`` samples of keyframe i are flowed forward and as many of
    keyframe i+1 backward; both sets are read out at ``mc_times``
    stratified times (one flow per set, several read-outs).
    """
    kinds = tuple(kinds)
    if not 0 <= interval < keyframes.T - 1:
        raise ValueError("interval out of range")
    jac, time = needs(kinds)
    t0, t1 = keyframes.times[interval], keyframes.times[interval + 1]
    times = stratified_times(t0, t1, mc_times, rng)
    A = subsample(keyframes.keyframes[interval].pool, mc_points, rng)
    B = subsample(keyframes.keyframes[interval + 1].pool, mc_points, rng)
    za = torch.tensor(A.points, dtype=net.dtype)
    zb = torch.tensor(B.points, dtype=net.dtype)
    fwd = flow(net, za, [t0] + times, steps_per_unit_time)
    bwd = flow(net, zb, [t1] + times[::-1], steps_per_unit_time)
    sample = RegularizerSample(sums={}, duration=float(t1 - t0))
    for j, t in enumerate(times):
        z = torch.cat([fwd[j], bwd[mc_times - 1 - j]])
        der = net.derivatives(z, t, jac=jac, time=time)
        for kind in kinds:
            val = pointwise_from(kind, der, z, t, metric, curl_target)
            if kind == "cross":
                s = val.sum(0)
                sample.curl_sum = s if sample.curl_sum is None else sample.curl_sum + s
            else:
                s = val.sum()
                sample.sums[kind] = s if kind not in sample.sums else sample.sums[kind] + s
        sample.count += z.shape[0]
    return sample


def combine(samples: list[RegularizerSample], kind: str) -> torch.Tensor:
    """L_kind over all intervals; for "cross" the duration-weighted average curl."""
    if kind == "cross":
        total = sum(s.duration for s in samples)
        return sum(s.duration * s.mean("cross") for s in samples) / total
    return sum(s.value(kind) for s in samples)


def cross_loss(sample, c) -> torch.Tensor | float:
    """|L_x - c|^2 for a RegularizerSample or an explicit curl vector."""
    v = sample.mean("cross") if isinstance(sample, RegularizerSample) else sample
    if isinstance(v, torch.Tensor):
        diff = v - torch.as_tensor(c, dtype=v.dtype)
        return (diff * diff).sum()
    diff = np.asarray(v, dtype=np.float64) - np.asarray(c, dtype=np.float64)
    return float(diff @ diff)

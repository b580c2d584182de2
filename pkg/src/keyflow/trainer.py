"""Loss assembly and the training loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import regularizers as reg
from .core import KeyframeSequence, TrainConfig, sample_count_schedule, subsample
from .flow import flow
from .net import VelocityNet, build_net, unmask_count
from .ot import SinkhornOptions, sinkhorn_divergence_torch

SQRT2 = math.sqrt(2.0)
FIT_FLOOR = 1e-30   # keeps sqrt differentiable when the inner sum hits 0


class TrainingAborted(RuntimeError):
    pass


def sinkhorn_options(config: TrainConfig) -> SinkhornOptions:
    return SinkhornOptions(scaling=config.sinkhorn_scaling, stage_iters=config.sinkhorn_stage_iters,
                           max_iter=config.sinkhorn_max_iter, newton=config.sinkhorn_newton)


def torch_dtype(config: TrainConfig):
    return torch.float64 if config.dtype == "float64" else torch.float32


@dataclass
class FitResult:
    value: torch.Tensor       # sqrt of the summed divergences (float64, differentiable)
    pairs: list               # [(S forward, S backward)] per interval, floats
    converged: bool
    evaluations: int


def fitting_loss(net: VelocityNet, keyframes: KeyframeSequence, N: int, epsilon: float,
                 rng: np.random.Generator, tau: float = math.inf,
                 steps_per_unit_time: int = 10, opts: SinkhornOptions | None = None) -> FitResult:
    """Teacher-forced fit: every keyframe flowed to each neighbour vs a fresh sample there.

    Draw order per interval is fixed (forward source, forward target,
    backward source, backward target) so results depend only on ``rng``.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    opts = opts or SinkhornOptions()
    total = torch.zeros((), dtype=torch.float64)
    pairs = []
    converged = True
    evals = 0
    kfs = keyframes.keyframes
    for i in range(keyframes.T - 1):
        t0, t1 = kfs[i].timestamp, kfs[i + 1].timestamp
        vals = []
        for src, dst, ta, tb in ((kfs[i], kfs[i + 1], t0, t1), (kfs[i + 1], kfs[i], t1, t0)):
            a = subsample(src.pool, N, rng)
            b = subsample(dst.pool, N, rng)
            z = torch.tensor(a.points, dtype=net.dtype)
            moved = flow(net, z, [ta, tb], steps_per_unit_time)[0]
            info: list = []
            s = sinkhorn_divergence_torch(moved, torch.tensor(b.points, dtype=net.dtype), epsilon, tau,
                                          opts, info=info)
            converged &= info[0].converged
            evals += 1
            total = total + s
            vals.append(float(s.detach()))
        pairs.append(tuple(vals))
    value = torch.sqrt(torch.clamp(total, min=FIT_FLOOR))
    return FitResult(value, pairs, converged, evals)


def normalize_fit(raw_fit_at_iter0: float) -> float:
    """kappa with kappa * raw = sqrt(2) at iteration 0 (1 when already fit)."""
    raw = float(raw_fit_at_iter0)
    if not raw > 0 or not math.isfinite(raw):
        return 1.0
    return SQRT2 / raw


@dataclass
class LossBreakdown:
    total: torch.Tensor
    fit: float                # normalized
    fit_raw: float
    pairs: list
    terms: dict               # kind -> L value (cross: |L_x - c|^2)
    converged: bool


def regularizer_terms(net, keyframes, config: TrainConfig, rng: np.random.Generator) -> dict:
    """Differentiable L_kind for every kind with a nonzero weight."""
    kinds = [k for k in reg.ALL_KINDS if config.lambdas[k] > 0]
    if not kinds:
        return {}
    samples = [
        reg.trajectory_integral(net, keyframes, i, config.mc_points, config.mc_times, kinds, rng,
                                config.ode_steps_per_unit_time, config.alignment_metric,
                                config.curl_target)
        for i in range(keyframes.T - 1)
    ]
    out = {}
    for k in kinds:
        v = reg.combine(samples, k)
        if k == "cross":
            v = reg.cross_loss(v, config.curl_target)
        out[k] = v.to(torch.float64)
    return out


def total_loss(net, keyframes, config: TrainConfig, N: int, kappa: float | None,
               rng_sample: np.random.Generator, rng_mc: np.random.Generator) -> tuple[LossBreakdown, float]:
    """L_tot = kappa * L_fit + sum lambda_k L_k (+ lambda_x |L_x - c|^2).

    With ``kappa=None`` the normalization is derived from this evaluation
    (iteration 0).  Returns the breakdown and the kappa used.
    """
    fit = fitting_loss(net, keyframes, N, config.epsilon, rng_sample, config.tau,
                       config.ode_steps_per_unit_time, sinkhorn_options(config))
    if kappa is None:
        kappa = normalize_fit(float(fit.value.detach()))
    terms = regularizer_terms(net, keyframes, config, rng_mc)
    total = kappa * fit.value
    for k in reg.ALL_KINDS:
        if k in terms:
            total = total + config.lambdas[k] * terms[k]
    out = LossBreakdown(total, kappa * float(fit.value.detach()), float(fit.value.detach()), fit.pairs,
                        {k: float(v.detach()) for k, v in terms.items()}, fit.converged)
    return out, kappa


def make_optimizer(params, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def adam_step(state, grads, lr: float) -> bool:
    """One Adam update of ``state.params``; skipped (False) on a non-finite gradient."""
    grads = list(grads)
    if len(grads) != len(state.params):
        raise ValueError("gradient count does not match parameters")
    for p, g in zip(state.params, grads):
        if g is not None and g.shape != p.shape:
            raise ValueError("gradient shape mismatch")
    if any(g is not None and not torch.isfinite(g).all() for g in grads):
        return False
    for p, g in zip(state.params, grads):
        p.grad = None if g is None else g.detach().clone()
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    return True


@dataclass
class TrainState:
    net: VelocityNet
    optimizer: torch.optim.Adam
    lr: float
    lr_min: float = 1e-7
    patience: int = 10
    threshold: float = 1e-4
    plateau_counter: int = 0
    best: float = math.inf
    iteration: int = 0
    kappa: float | None = None
    history: list = field(default_factory=list)
    rng_sample: np.random.Generator | None = None
    rng_mc: np.random.Generator | None = None

    @property
    def params(self) -> list:
        return self.net.param_list()


def plateau_schedule(state, loss_history) -> float:
    """Halve lr when the best loss has not improved (relatively) for ``patience`` steps."""
    if not loss_history:
        raise ValueError("empty loss history")
    loss = float(loss_history[-1])
    if loss < state.best * (1.0 - state.threshold) or state.best == math.inf:
        state.best = loss
        state.plateau_counter = 0
    else:
        state.plateau_counter += 1
        if state.plateau_counter > state.patience:
            state.lr = max(state.lr * 0.5, state.lr_min)
            state.plateau_counter = 0
    return state.lr


def init_state(keyframes: KeyframeSequence, config: TrainConfig, net: VelocityNet | None = None) -> TrainState:
    if net is None:
        net = build_net(keyframes.dim, config.rff_count, config.sigma_for(keyframes.dim), config.hidden,
                        seed=config.seed, cyclic_period=config.cyclic_period, dtype=torch_dtype(config))
    opt = make_optimizer(net.param_list(), config.lr)
    return TrainState(net, opt, config.lr, config.lr_min, config.plateau_patience, config.plateau_threshold,
                      rng_sample=np.random.default_rng([config.seed, 1]),
                      rng_mc=np.random.default_rng([config.seed, 2]))


def train_step(state: TrainState, keyframes: KeyframeSequence, config: TrainConfig) -> dict:
    it = state.iteration
    N = sample_count_schedule(it, config)
    active = unmask_count(it, config.iterations, state.net.encoder.m) if state.net.encoder else 0
    state.net.set_active(active)
    lr = state.lr
    loss, state.kappa = total_loss(state.net, keyframes, config, N, state.kappa, state.rng_sample, state.rng_mc)
    params = state.params
    grads = torch.autograd.grad(loss.total, params, allow_unused=True)
    stepped = adam_step(state, grads, lr)
    for p in params:
        if not torch.isfinite(p).all():
            raise TrainingAborted(f"non-finite parameters after iteration {it}")
    total = float(loss.total.detach())
    record = {
        "iter": it,
        "N": N,
        "active_features": active,
        "lr": lr,
        "fit": loss.fit,
        "fit_raw": loss.fit_raw,
        "pairs": [list(p) for p in loss.pairs],
        "terms": loss.terms,
        "total": total,
        "kappa": state.kappa,
        "sinkhorn_converged": loss.converged,
        "step_skipped": not stepped,
    }
    state.history.append(record)
    plateau_schedule(state, [r["total"] for r in state.history])
    state.iteration += 1
    return record


def train(keyframes: KeyframeSequence, config: TrainConfig, telemetry_path=None, timing_path=None,
          progress=None, net: VelocityNet | None = None) -> tuple[VelocityNet, list]:
    """Run ``config.iterations`` steps; returns the net and the per-iteration records.

    Telemetry lines hold only deterministic quantities; wall-clock time per
    iteration goes to ``timing_path`` when given.
    """
    state = init_state(keyframes, config, net)
    tel = open(telemetry_path, "w") if telemetry_path else None
    tim = open(timing_path, "w") if timing_path else None
    try:
        for _ in range(config.iterations):
            t0 = time.perf_counter()
            rec = train_step(state, keyframes, config)
            wall = (time.perf_counter() - t0) * 1000.0
            if tel:
                tel.write(json.dumps(rec, sort_keys=True) + "\n")
                tel.flush()
            if tim:
                tim.write(json.dumps({"iter": rec["iter"], "wall_ms": round(wall, 3)}) + "\n")
            if progress:
                progress(rec, wall)
    finally:
        if tel:
            tel.close()
        if tim:
            tim.close()
    return state.net, state.history


def read_telemetry(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]

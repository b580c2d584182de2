"""Entropic optimal transport with squared Euclidean cost.

Balanced and unbalanced (KL-relaxed marginals, reach tau) problems are
solved in the log domain with epsilon-annealing.  At small epsilon plain
Sinkhorn contracts very slowly, so the final stage can be finished with a
Levenberg-Marquardt damped Newton ascent on the dual.

Costs are reported through the dual objective evaluated at the final
potentials; position gradients hold the potentials fixed (envelope theorem).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .core import PointCloud

DT = torch.float64


@dataclass(frozen=True)
class SinkhornOptions:
    scaling: float = 0.5        # epsilon multiplier between annealing stages
    stage_iters: int = 5        # Sinkhorn sweeps per intermediate stage (cap)
    stage_tol: float = 1e-2     # early exit of a stage, relative to that stage's epsilon
    tol: float = 1e-9           # converged when the Sinkhorn update is below tol * epsilon
    max_iter: int = 5000        # total sweeps + Newton steps
    newton: bool = True         # finish the last stage with damped Newton


# GeomLoss-like budget: one sweep per stage and a few at the target epsilon.
FAST = SinkhornOptions(stage_iters=1, max_iter=24, newton=False)


@dataclass
class DualPotentials:
    f: np.ndarray
    g: np.ndarray
    p_xx: np.ndarray
    p_yy: np.ndarray
    epsilon: float
    tau: float
    converged: bool
    iterations: int


def sqdist(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    # coordinate loop: bitwise symmetric when x is y, no (n, m, d) temporary
    C = torch.zeros(x.shape[0], y.shape[0], dtype=x.dtype)
    for k in range(x.shape[1]):
        diff = x[:, k, None] - y[None, :, k]
        C += diff * diff
    return C


def _rho(tau: float) -> float:
    return math.inf if math.isinf(tau) else tau * tau


def _damp(eps: float, rho: float) -> float:
    return 1.0 if math.isinf(rho) else 1.0 / (1.0 + eps / rho)


# exp() takes a slow path far below its range; terms under e^-700 cannot
# change a float64 sum that contains the row maximum e^0, so clip them
_EXP_FLOOR = -700.0


def _lse_rows(X: torch.Tensor) -> torch.Tensor:
    """Row-wise log-sum-exp; overwrites X."""
    m = X.amax(1, keepdim=True)
    X -= m
    X.clamp_(min=_EXP_FLOOR)
    X.exp_()
    return X.sum(1).log() + m[:, 0]


def _softmin(eps: float, C: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """-eps * log sum_j exp(h_j - C_ij / eps)."""
    X = C / (-eps)
    X += h[None, :]
    return -eps * _lse_rows(X)


def _marginal_term(w: torch.Tensor, f: torch.Tensor, rho: float) -> torch.Tensor:
    if math.isinf(rho):
        return (w * f).sum()
    return -rho * (w * torch.expm1(-f / rho)).sum()


def _dual(f, g, C, la, lb, eps, rho) -> torch.Tensor:
    """Dual objective; equals the primal cost at the optimum."""
    a, b = la.exp(), lb.exp()
    logmass = _lse_rows(_exponent(f, g, C, la, lb, eps).reshape(1, -1))[0]
    return (_marginal_term(a, f, rho) + _marginal_term(b, g, rho)
            - eps * (torch.exp(logmass) - a.sum() * b.sum()))


def _exponent(f, g, C, la, lb, eps) -> torch.Tensor:
    Z = C / (-eps)
    Z += (f / eps + la)[:, None]
    Z += (g / eps + lb)[None, :]
    return Z


def _plan(f, g, C, la, lb, eps) -> torch.Tensor:
    return _exponent(f, g, C, la, lb, eps).clamp_(min=_EXP_FLOOR).exp_()


def _schedule(diam2: float, eps: float, scaling: float) -> list[float]:
    out = []
    e = max(diam2, eps)
    while e > eps:
        out.append(e)
        e *= scaling
    out.append(eps)
    return out


def _diameter2(*clouds: torch.Tensor) -> float:
    allp = torch.cat(clouds)
    span = allp.max(0).values - allp.min(0).values
    return float((span * span).sum())


def _residual_cross(f, g, C, la, lb, eps, damp) -> float:
    ft = damp * _softmin(eps, C, lb + g / eps)
    gt = damp * _softmin(eps, C.T, la + f / eps)
    return float(torch.maximum((ft - f).abs().max(), (gt - g).abs().max()))


def _spd_solve(S, r):
    L, info = torch.linalg.cholesky_ex(S)
    if int(info) == 0:
        return torch.cholesky_solve(r[:, None], L)[:, 0]
    return torch.linalg.solve(S, r)


def _marg_grad(h, w, m, rho):
    k = w if math.isinf(rho) else w * torch.exp(-h / rho)
    return (k - m).abs().max()


def _grad_norm_cross(f, g, C, la, lb, eps, rho) -> float:
    P = _plan(f, g, C, la, lb, eps)
    return eps * float(torch.maximum(_marg_grad(f, la.exp(), P.sum(1), rho),
                                     _marg_grad(g, lb.exp(), P.sum(0), rho)))


def _grad_norm_self(p, C, la, eps, rho) -> float:
    P = _plan(p, p, C, la, la, eps)
    return eps * float(_marg_grad(p, la.exp(), P.sum(1), rho))


def _accept(Dn, D, res_new: float, res_old: float) -> bool:
    # near the optimum the dual gain drops below float resolution; then fall
    # back on the marginal residual
    if not torch.isfinite(Dn):
        return False
    if Dn > D:
        return True
    slack = 64 * torch.finfo(DT).eps * max(abs(float(D)), 1e-300)
    return float(Dn) >= float(D) - slack and res_new < res_old


def _semi_dual(g, C, la, lb, eps, rho, damp):
    """(f, dual value, row marginal) with f the exact damped response to g."""
    ft = _softmin(eps, C, lb + g / eps)
    f = damp * ft
    a, b = la.exp(), lb.exp()
    # rows of the plan sum to a * exp((f - ft) / eps)
    r = a * torch.exp((f - ft) / eps)
    D = _marginal_term(a, f, rho) + _marginal_term(b, g, rho) - eps * (r.sum() - a.sum() * b.sum())
    return f, D, r


def _newton_cross(f, g, C, la, lb, eps, rho, tol, budget):
    """Levenberg-Marquardt ascent on the semi-dual in g; returns (f, g, steps used).

    f is eliminated by its exact (damped) softmin response to g, so each step
    only solves the Schur complement system on the g block.
    """
    a, b = la.exp(), lb.exp()
    damp = _damp(eps, rho)
    f, D, r = _semi_dual(g, C, la, lb, eps, rho, damp)
    P = _plan(f, g, C, la, lb, eps)
    mu = 1e-3 * float(b.mean())
    mu_floor = 1e-12 * float(b.mean())
    used = 0
    while used < budget:
        c = P.sum(0)
        kb = b if math.isinf(rho) else b * torch.exp(-g / rho)
        gg = eps * (kb - c)
        # f is exact, so the g-side Sinkhorn update is the whole residual
        gt = damp * _softmin(eps, C.T, la + f / eps)
        if float((gt - g).abs().max()) < tol * eps:
            break
        if math.isinf(rho):
            ha = hb = torch.zeros(())
        else:
            ha, hb = eps * a * torch.exp(-f / rho) / rho, eps * kb / rho
        res = float(gg.abs().max())
        S0 = torch.diag(c + hb) - (P.T / (r + ha)[None, :]) @ P
        used += 1
        accepted = False
        while mu < 1e8:
            gn = g + _spd_solve(S0 + mu * torch.eye(len(g), dtype=DT), gg)
            fn, Dn, rn = _semi_dual(gn, C, la, lb, eps, rho, damp)
            if not torch.isfinite(Dn):
                mu *= 4.0
                continue
            Pn = None
            if Dn > D:
                ok = True
            else:
                Pn = _plan(fn, gn, C, la, lb, eps)
                kbn = b if math.isinf(rho) else b * torch.exp(-gn / rho)
                ok = _accept(Dn, D, eps * float((kbn - Pn.sum(0)).abs().max()), res)
            if ok:
                f, g, D, r = fn, gn, Dn, rn
                P = Pn if Pn is not None else _plan(f, g, C, la, lb, eps)
                mu = max(mu / 4.0, mu_floor)
                accepted = True
                break
            mu *= 4.0
        if not accepted:
            break
    return f, g, used


def _newton_self(p, C, la, eps, rho, tol, budget):
    a = la.exp()
    damp = _damp(eps, rho)
    D = _dual(p, p, C, la, la, eps, rho)
    mu = 1e-3 * float(a.mean())
    used = 0
    while used < budget:
        pt = damp * _softmin(eps, C, la + p / eps)
        if float((pt - p).abs().max()) < tol * eps:
            break
        P = _plan(p, p, C, la, la, eps)
        r = P.sum(1)
        if math.isinf(rho):
            ka = a
            ha = torch.zeros(())
        else:
            ka = a * torch.exp(-p / rho)
            ha = eps * ka / rho
        rhs = eps * (ka - r)
        res = float(rhs.abs().max())
        used += 1
        accepted = False
        while mu < 1e8:
            M = P + torch.diag(r + ha + mu)
            dp = _spd_solve(M, rhs)
            Dn = _dual(p + dp, p + dp, C, la, la, eps, rho)
            if _accept(Dn, D, _grad_norm_self(p + dp, C, la, eps, rho), res):
                p, D = p + dp, Dn
                mu = max(mu / 4.0, 1e-16)
                accepted = True
                break
            mu *= 4.0
        if not accepted:
            break
    return p, used


def solve_cross(x, y, la, lb, eps, tau, opts: SinkhornOptions):
    """Potentials (f on x, g on y) for OT_eps,tau; returns (f, g, C, converged, iterations)."""
    rho = _rho(tau)
    C = sqdist(x, y)
    f = torch.zeros(x.shape[0], dtype=DT)
    g = torch.zeros(y.shape[0], dtype=DT)
    iters = 0
    stages = _schedule(_diameter2(x, y), eps, opts.scaling)
    for e in stages:
        damp = _damp(e, rho)
        final = e == stages[-1]
        cap = opts.stage_iters if (not final or opts.newton) else opts.max_iter - iters
        rel = opts.tol if final else opts.stage_tol
        res = math.inf
        for _ in range(max(cap, 0)):
            if iters >= opts.max_iter:
                break
            ft = damp * _softmin(e, C, lb + g / e)
            gt = damp * _softmin(e, C.T, la + f / e)
            res = float(torch.maximum((ft - f).abs().max(), (gt - g).abs().max()))
            # averaged (Jacobi) update keeps the x <-> y roles symmetric
            f, g = 0.5 * (f + ft), 0.5 * (g + gt)
            iters += 1
            if res < rel * e:
                break
        # sweeps stall at small epsilon: follow the path with Newton instead
        if opts.newton and res >= rel * e and iters < opts.max_iter:
            f, g, used = _newton_cross(f, g, C, la, lb, e, rho, rel, opts.max_iter - iters)
            iters += used
    converged = _residual_cross(f, g, C, la, lb, eps, _damp(eps, rho)) < opts.tol * eps
    return f, g, C, converged, iters


def solve_self(x, la, eps, tau, opts: SinkhornOptions):
    """Symmetric potential p for OT_eps,tau(x, x)."""
    rho = _rho(tau)
    C = sqdist(x, x)
    p = torch.zeros(x.shape[0], dtype=DT)
    iters = 0
    stages = _schedule(_diameter2(x), eps, opts.scaling)
    for e in stages:
        damp = _damp(e, rho)
        final = e == stages[-1]
        cap = opts.stage_iters if (not final or opts.newton) else opts.max_iter - iters
        rel = opts.tol if final else opts.stage_tol
        res = math.inf
        for _ in range(max(cap, 0)):
            if iters >= opts.max_iter:
                break
            pt = damp * _softmin(e, C, la + p / e)
            res = float((pt - p).abs().max())
            p = 0.5 * (p + pt)
            iters += 1
            if res < rel * e:
                break
        if opts.newton and res >= rel * e and iters < opts.max_iter:
            p, used = _newton_self(p, C, la, e, rho, rel, opts.max_iter - iters)
            iters += used
    pt = _damp(eps, rho) * _softmin(eps, C, la + p / eps)
    converged = float((pt - p).abs().max()) < opts.tol * eps
    return p, C, converged, iters


def _value_and_grads(f, g, C, x, y, la, lb, eps, rho, same: bool):
    """Dual value at the extrapolated potentials plus envelope gradients.

    The x-side potential is refreshed by one exact (damped) softmin so the
    plan's row marginals are consistent with g; with ``same`` the problem is
    the self-transport of x and both gradient contributions land on x.
    """
    fe = _damp(eps, rho) * _softmin(eps, C, lb + g / eps)
    val = _dual(fe, g, C, la, lb, eps, rho)
    P = _plan(fe, g, C, la, lb, eps)
    r, c = P.sum(1), P.sum(0)
    gx = 2.0 * (x * r[:, None] - P @ y)
    gy = 2.0 * (y * c[:, None] - P.T @ x)
    if same:
        return val, gx + gy, None
    return val, gx, gy


@dataclass
class DivergenceResult:
    value: float
    grad_x: np.ndarray
    grad_y: np.ndarray
    converged: bool
    iterations: int
    ot_xy: float
    ot_xx: float
    ot_yy: float


def _t(v) -> torch.Tensor:
    if isinstance(v, torch.Tensor):
        return v.to(DT)
    return torch.tensor(np.asarray(v), dtype=DT)


def _as_tensors(cloud):
    if isinstance(cloud, PointCloud):
        return torch.tensor(cloud.points, dtype=DT), torch.tensor(cloud.weights, dtype=DT)
    pts = torch.as_tensor(cloud, dtype=DT)
    n = pts.shape[0]
    return pts, torch.full((n,), 1.0 / n, dtype=DT)


def divergence_terms(x, a, y, b, eps: float, tau: float = math.inf,
                     opts: SinkhornOptions = SinkhornOptions(), self_x=None, self_y=None) -> DivergenceResult:
    """Debiased divergence S(x, y) with gradients for both point sets.

    ``self_x`` / ``self_y`` may carry a precomputed (value, grad, converged,
    iterations) tuple for a fixed side, which skips that self-transport.
    """
    x, y, a, b = (_t(v) for v in (x, y, a, b))
    keep_a, keep_b = a > 0, b > 0
    xs, ys = x[keep_a], y[keep_b]
    la, lb = torch.log(a[keep_a]), torch.log(b[keep_b])
    rho = _rho(tau)
    f, g, C, conv, iters = solve_cross(xs, ys, la, lb, eps, tau, opts)
    v_xy, gx, gy = _value_and_grads(f, g, C, xs, ys, la, lb, eps, rho, same=False)
    if self_x is None:
        self_x = self_term(xs, la, eps, tau, opts)
    if self_y is None:
        self_y = self_term(ys, lb, eps, tau, opts)
    v_xx, gxx, cx, ix = self_x
    v_yy, gyy, cy, iy = self_y
    value = float(v_xy - 0.5 * v_xx - 0.5 * v_yy)
    # unbalanced debiasing adds eps/2 (m_a - m_b)^2, zero for probability measures
    if not math.isinf(rho):
        value += 0.5 * eps * float(a.sum() - b.sum()) ** 2
    grad_x = torch.zeros_like(x)
    grad_y = torch.zeros_like(y)
    grad_x[keep_a] = gx - 0.5 * gxx
    grad_y[keep_b] = gy - 0.5 * gyy
    return DivergenceResult(value, grad_x.numpy(), grad_y.numpy(), bool(conv and cx and cy),
                            iters + ix + iy, float(v_xy), float(v_xx), float(v_yy))


def self_term(x, la, eps, tau, opts):
    """(OT(x, x), its gradient w.r.t. x, converged, iterations)."""
    p, C, conv, iters = solve_self(x, la, eps, tau, opts)
    v, gxx, _ = _value_and_grads(p, p, C, x, x, la, la, eps, _rho(tau), same=True)
    return v, gxx, conv, iters


class _SinkhornDivergence(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, y, a, b, eps, tau, opts, info):
        res = divergence_terms(x.detach(), a.detach(), y.detach(), b.detach(), eps, tau, opts)
        ctx.save_for_backward(torch.as_tensor(res.grad_x, dtype=x.dtype),
                              torch.as_tensor(res.grad_y, dtype=y.dtype))
        if info is not None:
            info.append(res)
        return torch.tensor(res.value, dtype=DT)

    @staticmethod
    def backward(ctx, gout):
        gx, gy = ctx.saved_tensors
        return gout.to(gx.dtype) * gx, gout.to(gy.dtype) * gy, None, None, None, None, None, None


def sinkhorn_divergence_torch(x: torch.Tensor, y: torch.Tensor, eps: float, tau: float = math.inf,
                              opts: SinkhornOptions = SinkhornOptions(), a=None, b=None,
                              info: list | None = None) -> torch.Tensor:
    """Differentiable S_eps,tau between uniform (or given-weight) point sets.

    Returns a float64 scalar; gradients flow to ``x`` and ``y``.  If ``info``
    is a list, the full DivergenceResult is appended to it.
    """
    if a is None:
        a = torch.full((x.shape[0],), 1.0 / x.shape[0], dtype=DT)
    if b is None:
        b = torch.full((y.shape[0],), 1.0 / y.shape[0], dtype=DT)
    return _SinkhornDivergence.apply(x, y, torch.as_tensor(a, dtype=DT), torch.as_tensor(b, dtype=DT),
                                     float(eps), float(tau), opts, info)


# ---------------------------------------------------------------- public API on PointClouds

def sinkhorn_potentials(X: PointCloud, Y: PointCloud, epsilon: float, tau: float = math.inf,
                        opts: SinkhornOptions = SinkhornOptions()) -> DualPotentials:
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    if not tau > 0:
        raise ValueError("tau must be > 0 or inf")
    x, a = _as_tensors(X)
    y, b = _as_tensors(Y)
    f, g, _, conv, iters = solve_cross(x, y, a.log(), b.log(), epsilon, tau, opts)
    pxx, _, cx, ix = solve_self(x, a.log(), epsilon, tau, opts)
    pyy, _, cy, iy = solve_self(y, b.log(), epsilon, tau, opts)
    return DualPotentials(f.numpy(), g.numpy(), pxx.numpy(), pyy.numpy(), float(epsilon), float(tau),
                          bool(conv and cx and cy), iters + ix + iy)


def ot_cost(potentials: DualPotentials, X: PointCloud, Y: PointCloud) -> float:
    """OT_eps,tau(X, Y) read off the dual objective at the given potentials."""
    if not potentials.converged:
        warnings.warn("Sinkhorn potentials did not converge; cost is approximate", RuntimeWarning)
    x, a = _as_tensors(X)
    y, b = _as_tensors(Y)
    eps, rho = potentials.epsilon, _rho(potentials.tau)
    C = sqdist(x, y)
    g = torch.as_tensor(potentials.g, dtype=DT)
    fe = _damp(eps, rho) * _softmin(eps, C, b.log() + g / eps)
    return float(_dual(fe, g, C, a.log(), b.log(), eps, rho))


def sinkhorn_divergence(X: PointCloud, Y: PointCloud, epsilon: float, tau: float = math.inf,
                        opts: SinkhornOptions = SinkhornOptions()) -> float:
    x, a = _as_tensors(X)
    y, b = _as_tensors(Y)
    return divergence_terms(x, a, y, b, epsilon, tau, opts).value


def divergence_grad_positions(X: PointCloud, Y: PointCloud, epsilon: float, tau: float = math.inf,
                              opts: SinkhornOptions = SinkhornOptions()) -> np.ndarray:
    """dS/dx_k for every point of X (potentials held at their optimum)."""
    x, a = _as_tensors(X)
    y, b = _as_tensors(Y)
    return divergence_terms(x, a, y, b, epsilon, tau, opts).grad_x


@dataclass
class BarycenterResult:
    cloud: PointCloud
    objective_history: list
    steps_taken: int


def barycenter_objective(Xa: PointCloud, Xb: PointCloud, w_a: float, w_b: float, alpha: PointCloud,
                         epsilon: float, tau: float = math.inf, opts: SinkhornOptions = FAST) -> float:
    return _BarycenterProblem(Xa, Xb, w_a, w_b, epsilon, tau, opts).evaluate(
        torch.tensor(alpha.points, dtype=DT), torch.tensor(alpha.weights, dtype=DT))[0]


class _BarycenterProblem:
    def __init__(self, Xa, Xb, w_a, w_b, eps, tau, opts):
        if w_a < 0 or w_b < 0 or (w_a == 0 and w_b == 0):
            raise ValueError("barycenter weights must be nonnegative and not both zero")
        s = w_a + w_b
        self.wa, self.wb = w_a / s, w_b / s
        self.eps, self.tau, self.opts = eps, tau, opts
        self.xa, self.a = _as_tensors(Xa)
        self.xb, self.b = _as_tensors(Xb)
        self.self_a = self_term(self.xa, self.a.log(), eps, tau, opts) if self.wa > 0 else None
        self.self_b = self_term(self.xb, self.b.log(), eps, tau, opts) if self.wb > 0 else None

    def evaluate(self, alpha, w):
        val = 0.0
        grad = torch.zeros_like(alpha)
        self_alpha = self_term(alpha, w.log(), self.eps, self.tau, self.opts)
        if self.wa > 0:
            r = divergence_terms(self.xa, self.a, alpha, w, self.eps, self.tau, self.opts,
                                 self_x=self.self_a, self_y=self_alpha)
            val += self.wa * r.value
            grad += self.wa * torch.as_tensor(r.grad_y)
        if self.wb > 0:
            r = divergence_terms(alpha, w, self.xb, self.b, self.eps, self.tau, self.opts,
                                 self_x=self_alpha, self_y=self.self_b)
            val += self.wb * r.value
            grad += self.wb * torch.as_tensor(r.grad_x)
        return val, grad


def barycenter(Xa: PointCloud, Xb: PointCloud, w_a: float, w_b: float, epsilon: float,
               tau: float = math.inf, init: PointCloud | None = None, descent_steps: int = 200,
               descent_lr: float = 0.05, opts: SinkhornOptions = FAST, grad_tol: float = 1e-9,
               return_result: bool = False):
    """Free-support minimizer of w_a S(Xa, alpha) + w_b S(alpha, Xb).

    Weights are normalized to sum to one and alpha keeps the weights of
    ``init``.  Each step moves alpha along the gradient divided by the point
    weights (so lr = 0.5 would jump to the barycentric target of an exact
    W2 objective); a step that raises the objective is rejected and the
    learning rate halved.
    """
    if init is None:
        init = Xa
    prob = _BarycenterProblem(Xa, Xb, w_a, w_b, epsilon, tau, opts)
    alpha = torch.tensor(init.points, dtype=DT)
    w = torch.tensor(init.weights, dtype=DT)
    obj, grad = prob.evaluate(alpha, w)
    history = [obj]
    lr = descent_lr
    taken = 0
    for _ in range(descent_steps):
        step = grad / w[:, None]
        if float(step.abs().max()) <= grad_tol:
            break
        cand = alpha - lr * step
        obj_c, grad_c = prob.evaluate(cand, w)
        if obj_c <= obj:
            alpha, obj, grad = cand, obj_c, grad_c
            history.append(obj)
            taken += 1
        else:
            lr *= 0.5
            if lr < 1e-10:
                break
    out = init if taken == 0 else PointCloud(alpha.numpy(), init.weights)
    if return_result:
        return BarycenterResult(out, history, taken)
    return out

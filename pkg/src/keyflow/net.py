"""Space-time velocity field: random Fourier features feeding a smooth MLP.

Spatial Jacobians and the first two time derivatives are computed by
pushing tangent channels through the network alongside the primal values
(forward mode).  Parameter gradients of anything built from those outputs
come from torch's reverse mode, so second-order terms in the parameters
(e.g. the gradient of a Jacobian penalty) are exact.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

ACTIVATIONS = ("identity", "tanh", "softplus")
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}

MAGIC = b"KFVN"
FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class RffEncoder:
    """Frequency matrix B (m x (d+1)); columns are (z_1..z_d, t)."""

    frequencies: np.ndarray
    row_order: np.ndarray
    sigma: float

    @property
    def m(self) -> int:
        return self.frequencies.shape[0]

    @property
    def d(self) -> int:
        return self.frequencies.shape[1] - 1


def _norm_order(B: np.ndarray) -> np.ndarray:
    return np.argsort(np.linalg.norm(B, axis=1), kind="stable")


def rff_init(d: int, m: int, sigma: float, seed: int = 0) -> RffEncoder:
    if m < 1:
        raise ValueError("need at least one Fourier feature")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    B = np.random.default_rng(seed).normal(0.0, sigma, size=(m, d + 1))
    return RffEncoder(B, _norm_order(B), float(sigma))


def quantize_temporal_frequencies(enc: RffEncoder, period: float) -> RffEncoder:
    """Snap every temporal frequency to the nearest multiple of 2*pi/period."""
    if not period > 0:
        raise ValueError("period must be positive")
    base = 2.0 * math.pi / period
    B = enc.frequencies.copy()
    B[:, -1] = np.round(B[:, -1] / base) * base
    return RffEncoder(B, _norm_order(B), enc.sigma)


def unmask_count(iteration: int, total_iterations: int, m: int) -> int:
    """Features released linearly so that all m are active at 80% of training."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if total_iterations <= 0:
        return m
    # ceil(m * it / (0.8 * total)) in exact integer arithmetic
    return min(m, -(-(5 * m * iteration) // (4 * total_iterations)))


def _mask(enc: RffEncoder, active: int) -> np.ndarray:
    if not 0 <= active <= enc.m:
        raise ValueError(f"active feature count {active} outside [0, {enc.m}]")
    mask = np.zeros(enc.m)
    mask[enc.row_order[:active]] = 1.0
    return mask


def encode(enc: RffEncoder, z, t, active: int) -> np.ndarray:
    """[cos(B.(z,t)), sin(B.(z,t))] with rows beyond the first ``active`` zeroed."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (z.shape[0],))
    u = z @ enc.frequencies[:, :-1].T + t[:, None] * enc.frequencies[:, -1]
    mask = _mask(enc, active)
    return np.concatenate([np.cos(u) * mask, np.sin(u) * mask], axis=1)


class Derivatives(NamedTuple):
    f: torch.Tensor                 # (n, d)
    jac: torch.Tensor | None        # (n, d, d), jac[n, i, k] = d f_i / d z_k
    f_t: torch.Tensor | None        # (n, d)
    f_tt: torch.Tensor | None       # (n, d)


def _act(name: str, a: torch.Tensor):
    """Activation value with its first and second derivatives."""
    if name == "tanh":
        h = torch.tanh(a)
        d1 = 1.0 - h * h
        return h, d1, -2.0 * h * d1
    if name == "softplus":
        h = torch.nn.functional.softplus(a)
        s = torch.sigmoid(a)
        return h, s, s * (1.0 - s)
    if name == "identity":
        return a, torch.ones_like(a), torch.zeros_like(a)
    raise ValueError(f"unknown activation {name!r}")


class VelocityNet(nn.Module):
    """f_theta(z, t): R^d x R -> R^d.

    ``widths`` are the output sizes of every dense layer; the last one must
    equal d.  With ``encoder=None`` the raw (z, t) vector is the input,
    which is only useful for building analytic test fields.
    """

    def __init__(self, d: int, encoder: RffEncoder | None, widths: Sequence[int],
                 activations: Sequence[str], seed: int = 0, dtype=torch.float64):
        super().__init__()
        widths = [int(w) for w in widths]
        activations = tuple(activations)
        if widths[-1] != d:
            raise ValueError("last layer must output d values")
        if len(activations) != len(widths):
            raise ValueError("need one activation tag per layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if encoder is not None and encoder.d != d:
            raise ValueError("encoder dimension mismatch")
        self.d = d
        self.encoder = encoder
        self.activations = activations
        self.active_feature_count = encoder.m if encoder is not None else 0
        fan_in = 2 * encoder.m if encoder is not None else d + 1
        rng = np.random.default_rng(seed)
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for w in widths:
            bound = 1.0 / math.sqrt(fan_in)
            W = rng.uniform(-bound, bound, size=(w, fan_in))
            b = rng.uniform(-bound, bound, size=(w,))
            self.weights.append(nn.Parameter(torch.tensor(W, dtype=dtype)))
            self.biases.append(nn.Parameter(torch.tensor(b, dtype=dtype)))
            fan_in = w
        if encoder is not None:
            self.register_buffer("B", torch.tensor(encoder.frequencies, dtype=dtype))
        else:
            self.B = None

    @property
    def widths(self) -> list[int]:
        return [w.shape[0] for w in self.weights]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def set_active(self, count: int) -> None:
        if self.encoder is None:
            return
        _mask(self.encoder, count)
        self.active_feature_count = int(count)

    def _feature_mask(self) -> torch.Tensor:
        m = _mask(self.encoder, self.active_feature_count)
        return torch.tensor(m, dtype=self.dtype)

    def _inputs(self, z: torch.Tensor, t, jac: bool, time: bool) -> torch.Tensor:
        """Stacked (channels, n, features): primal, d spatial tangents, dt, dtt."""
        n = z.shape[0]
        t = torch.as_tensor(t, dtype=z.dtype)
        t = t.expand(n) if t.dim() == 0 else t.reshape(n)
        if self.B is None:
            x = torch.cat([z, t[:, None]], dim=1)
            chans = [x]
            eye = torch.eye(self.d + 1, dtype=z.dtype)
            if jac:
                chans += [eye[k].expand(n, -1) for k in range(self.d)]
            if time:
                chans += [eye[self.d].expand(n, -1), torch.zeros_like(x)]
            return torch.stack(chans)
        Bz, Bt = self.B[:, :-1], self.B[:, -1]
        mask = self._feature_mask()
        u = z @ Bz.T + t[:, None] * Bt
        c, s = torch.cos(u) * mask, torch.sin(u) * mask
        chans = [torch.cat([c, s], dim=1)]
        if jac:
            for k in range(self.d):
                w = Bz[:, k]
                chans.append(torch.cat([-s * w, c * w], dim=1))
        if time:
            chans.append(torch.cat([-s * Bt, c * Bt], dim=1))
            bt2 = Bt * Bt
            chans.append(torch.cat([-c * bt2, -s * bt2], dim=1))
        return torch.stack(chans)

    def derivatives(self, z: torch.Tensor, t, jac: bool = False, time: bool = False,
                    tape: "GradientTape | None" = None) -> Derivatives:
        H = self._inputs(z, t, jac, time)
        nj = self.d if jac else 0
        for W, b, act in zip(self.weights, self.biases, self.activations):
            A = H @ W.T
            a0 = A[0] + b
            h, d1, d2 = _act(act, a0)
            if act == "identity":
                H = torch.cat([a0[None], A[1:]]) if A.shape[0] > 1 else a0[None]
                continue
            chans = [h]
            if A.shape[0] > 1:
                chans.append(d1 * A[1:1 + nj + (1 if time else 0)])
            if time:
                at = A[1 + nj]
                chans.append((d2 * at * at + d1 * A[2 + nj])[None])
            H = torch.cat([chans[0][None]] + chans[1:]) if len(chans) > 1 else h[None]
        f = H[0]
        J = H[1:1 + nj].permute(1, 2, 0) if jac else None
        f_t = H[1 + nj] if time else None
        f_tt = H[2 + nj] if time else None
        out = Derivatives(f, J, f_t, f_tt)
        if tape is not None:
            tape.record(*(x for x in out if x is not None))
        return out

    def forward(self, z: torch.Tensor, t) -> torch.Tensor:
        n = z.shape[0]
        t = torch.as_tensor(t, dtype=z.dtype)
        t = t.expand(n) if t.dim() == 0 else t.reshape(n)
        if self.B is None:
            h = torch.cat([z, t[:, None]], dim=1)
        else:
            u = z @ self.B[:, :-1].T + t[:, None] * self.B[:, -1]
            mask = self._feature_mask()
            h = torch.cat([torch.cos(u) * mask, torch.sin(u) * mask], dim=1)
        for W, b, act in zip(self.weights, self.biases, self.activations):
            a = torch.addmm(b, h, W.T)
            if act == "tanh":
                h = torch.tanh(a)
            elif act == "softplus":
                h = torch.nn.functional.softplus(a)
            else:
                h = a
        return h

    def jacobian_z(self, z, t) -> torch.Tensor:
        return self.derivatives(z, t, jac=True).jac

    def time_derivatives(self, z, t) -> tuple[torch.Tensor, torch.Tensor]:
        d = self.derivatives(z, t, time=True)
        return d.f_t, d.f_tt

    def param_list(self) -> list[torch.Tensor]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def num_params(self) -> int:
        return sum(p.numel() for p in self.param_list())


def build_net(d: int, m: int = 100, sigma: float | None = None, hidden: Sequence[int] = (512, 512, 512),
              seed: int = 0, cyclic_period: float | None = None, dtype=torch.float64) -> VelocityNet:
    """Default architecture: RFF -> Tanh -> Tanh -> Softplus -> linear."""
    if sigma is None:
        sigma = 3.0 * math.pi / math.sqrt(d)
    enc = rff_init(d, m, sigma, seed)
    if cyclic_period is not None:
        enc = quantize_temporal_frequencies(enc, cyclic_period)
    hidden = list(hidden)
    acts = ["tanh"] * len(hidden)
    if hidden:
        acts[-1] = "softplus"
    return VelocityNet(d, enc, hidden + [d], acts + ["identity"], seed=seed + 1, dtype=dtype)


class GradientTape:
    """Collects net outputs from one batch evaluation for a single reverse pass."""

    def __init__(self, net: VelocityNet):
        self.net = net
        self.outputs: list[torch.Tensor] = []

    def record(self, *tensors: torch.Tensor) -> None:
        self.outputs.extend(tensors)


class TapeError(ValueError):
    pass


def backward(net: VelocityNet, tape: GradientTape, upstream: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Parameter gradient of sum_k <upstream_k, output_k> over the tape's outputs."""
    if tape.net is not net:
        raise TapeError("tape was recorded on a different network")
    if len(upstream) != len(tape.outputs):
        raise TapeError(f"{len(upstream)} cotangents for {len(tape.outputs)} recorded outputs")
    for u, o in zip(upstream, tape.outputs):
        if tuple(u.shape) != tuple(o.shape):
            raise TapeError(f"cotangent shape {tuple(u.shape)} != output shape {tuple(o.shape)}")
    params = net.param_list()
    grads = torch.autograd.grad(tape.outputs, params, grad_outputs=list(upstream),
                                allow_unused=True, retain_graph=True)
    out = [torch.zeros_like(p) if g is None else g for g, p in zip(grads, params)]
    for g, p in zip(out, params):
        if g.shape != p.shape:
            raise TapeError("gradient buffer does not match parameter shape")
    return out


# ---------------------------------------------------------------- serialization
#
# Little-endian layout:
#   4s   magic "KFVN"
#   u32  version
#   u32  d, u32 m (0 without encoder), u32 n_layers
#   u32  width[n_layers]
#   u8   activation code[n_layers]   (0 identity, 1 tanh, 2 softplus)
#   u32  active_feature_count
#   f64  sigma
#   f64  B[m][d+1]                    (row-major)
#   u32  row_order[m]
#   per layer: f64 W[out][in] row-major, then f64 b[out]

def save_net(net: VelocityNet, path) -> None:
    enc = net.encoder
    m = enc.m if enc is not None else 0
    widths = net.widths
    parts = [MAGIC, struct.pack("<IIII", FORMAT_VERSION, net.d, m, len(widths))]
    parts.append(struct.pack(f"<{len(widths)}I", *widths))
    parts.append(struct.pack(f"<{len(widths)}B", *[_ACT_CODE[a] for a in net.activations]))
    parts.append(struct.pack("<I", net.active_feature_count))
    parts.append(struct.pack("<d", enc.sigma if enc is not None else 0.0))
    if enc is not None:
        parts.append(np.ascontiguousarray(enc.frequencies, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(enc.row_order, dtype="<u4").tobytes())
    for W, b in zip(net.weights, net.biases):
        parts.append(W.detach().to(torch.float64).numpy().astype("<f8").tobytes())
        parts.append(b.detach().to(torch.float64).numpy().astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_net(path, dtype=torch.float64) -> VelocityNet:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a velocity-net file")
    off = 4
    version, d, m, L = struct.unpack_from("<IIII", buf, off)
    off += 16
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    widths = list(struct.unpack_from(f"<{L}I", buf, off))
    off += 4 * L
    acts = [ACTIVATIONS[c] for c in struct.unpack_from(f"<{L}B", buf, off)]
    off += L
    (active,) = struct.unpack_from("<I", buf, off)
    off += 4
    (sigma,) = struct.unpack_from("<d", buf, off)
    off += 8
    enc = None
    if m > 0:
        B = np.frombuffer(buf, dtype="<f8", count=m * (d + 1), offset=off).reshape(m, d + 1).astype(np.float64)
        off += 8 * m * (d + 1)
        order = np.frombuffer(buf, dtype="<u4", count=m, offset=off).astype(np.int64)
        off += 4 * m
        enc = RffEncoder(B, order, sigma)
    net = VelocityNet(d, enc, widths, acts, dtype=dtype)
    fan_in = 2 * m if m > 0 else d + 1
    with torch.no_grad():
        for W, b, w in zip(net.weights, net.biases, widths):
            Wv = np.frombuffer(buf, dtype="<f8", count=w * fan_in, offset=off).reshape(w, fan_in)
            off += 8 * w * fan_in
            bv = np.frombuffer(buf, dtype="<f8", count=w, offset=off)
            off += 8 * w
            W.copy_(torch.tensor(Wv, dtype=dtype))
            b.copy_(torch.tensor(bv, dtype=dtype))
            fan_in = w
    if off != len(buf):
        raise ValueError(f"{path}: trailing bytes in model file")
    net.set_active(active)
    return net

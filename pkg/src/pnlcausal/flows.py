"""One-dimensional normalising flow: a linear rational spline over a
zero-mean Gaussian base.

Each of the K bins on [-B, B] is split at an interior point into two
linear-rational pieces ``(a*u + b) / (c*u + d)`` that agree in value and
slope at the split and match the prescribed knot derivatives.  Outside the
box the transform is the identity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .optim import DTYPE, FitConfig, ParamPacker, make_value_and_grad, minimise

MIN_BIN_FRACTION = 1e-3
MIN_DERIVATIVE = 1e-3
# lambda = LAMBDA_MARGIN + (1 - 2 * LAMBDA_MARGIN) * sigmoid(raw)
LAMBDA_MARGIN = 0.025
INIT_NOISE = 0.01

FIELDS = ("raw_widths", "raw_heights", "raw_derivs", "raw_lambdas", "base_log_var")

# softplus(IDENTITY_RAW_DERIV) + MIN_DERIVATIVE == 1
IDENTITY_RAW_DERIV = math.log(math.expm1(1.0 - MIN_DERIVATIVE))


@dataclass(frozen=True, eq=False)
class SplineFlow:
    """Unconstrained parameters of one spline flow."""

    num_bins: int
    bound: float
    raw_widths: np.ndarray
    raw_heights: np.ndarray
    raw_derivs: np.ndarray
    raw_lambdas: np.ndarray
    base_log_var: float = 0.0

    def __post_init__(self):
        k = int(self.num_bins)
        if k < 1:
            raise ValueError("num_bins must be a positive integer")
        if not self.bound > 0:
            raise ValueError("bound must be positive")
        for name, size in (("raw_widths", k), ("raw_heights", k),
                           ("raw_derivs", k + 1), ("raw_lambdas", k)):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            if arr.size != size:
                raise ValueError(f"{name} must have {size} entries, got {arr.size}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "num_bins", k)
        object.__setattr__(self, "bound", float(self.bound))
        object.__setattr__(self, "base_log_var", float(self.base_log_var))
        if not math.isfinite(self.base_log_var):
            raise ValueError("base_log_var must be finite")

    @classmethod
    def identity(cls, num_bins: int = 21, bound: float = 10.0, base_var: float = 1.0) -> "SplineFlow":
        """Uniform bins, unit derivatives, lambda = 1/2: T is the identity."""
        return cls(num_bins, bound, np.zeros(num_bins), np.zeros(num_bins),
                   np.full(num_bins + 1, IDENTITY_RAW_DERIV), np.zeros(num_bins),
                   math.log(base_var))

    @classmethod
    def from_knots(cls, widths, heights, derivs, lambdas=None, bound: float = 10.0,
                   base_var: float = 1.0) -> "SplineFlow":
        """Build a flow from constrained bin widths/heights, knot derivatives and lambdas.

        Widths and heights are rescaled to sum to ``2 * bound``; each must
        exceed the minimum bin size after rescaling.
        """
        widths = np.asarray(widths, dtype=float)
        heights = np.asarray(heights, dtype=float)
        derivs = np.asarray(derivs, dtype=float)
        k = widths.size
        lambdas = np.full(k, 0.5) if lambdas is None else np.asarray(lambdas, dtype=float)
        return cls(k, bound, _raw_from_sizes(widths, bound), _raw_from_sizes(heights, bound),
                   _raw_from_derivs(derivs), _raw_from_lambdas(lambdas), math.log(base_var))

    @property
    def base_var(self) -> float:
        return math.exp(self.base_log_var)

    def blocks(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {prefix + name: np.atleast_1d(np.asarray(getattr(self, name), dtype=float)).copy()
                for name in FIELDS}

    @classmethod
    def from_blocks(cls, blocks: Dict[str, np.ndarray], num_bins: int, bound: float,
                    prefix: str = "") -> "SplineFlow":
        return cls(num_bins, bound,
                   *(np.asarray(blocks[prefix + n], dtype=float) for n in FIELDS[:4]),
                   float(np.asarray(blocks[prefix + "base_log_var"]).reshape(-1)[0]))

    def tensors(self) -> Dict[str, torch.Tensor]:
        return {name: torch.tensor(np.atleast_1d(getattr(self, name)), dtype=DTYPE)
                for name in FIELDS}

    def knots(self) -> Dict[str, np.ndarray]:
        """Constrained knot positions, derivatives and lambdas as numpy arrays."""
        kn = spline_knots(self.tensors(), self.bound)
        return {"x": kn.xk.numpy(), "y": kn.yk.numpy(), "derivs": kn.dk.numpy(),
                "lambdas": kn.lam.numpy()}

    def to_dict(self) -> dict:
        return {
            "num_bins": self.num_bins,
            "bound": self.bound,
            "raw_widths": self.raw_widths.tolist(),
            "raw_heights": self.raw_heights.tolist(),
            "raw_derivs": self.raw_derivs.tolist(),
            "raw_lambdas": self.raw_lambdas.tolist(),
            "base_log_var": self.base_log_var,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SplineFlow":
        return cls(int(data["num_bins"]), float(data["bound"]),
                   np.asarray(data["raw_widths"], dtype=float),
                   np.asarray(data["raw_heights"], dtype=float),
                   np.asarray(data["raw_derivs"], dtype=float),
                   np.asarray(data["raw_lambdas"], dtype=float),
                   float(data["base_log_var"]))


def _raw_from_sizes(sizes: np.ndarray, bound: float) -> np.ndarray:
    k = sizes.size
    sizes = 2 * bound * sizes / sizes.sum()
    min_size = MIN_BIN_FRACTION * 2 * bound / k
    frac = (sizes - min_size) / (2 * bound - k * min_size)
    if np.any(frac <= 0):
        raise ValueError("bin sizes below the minimum bin size")
    raw = np.log(frac)
    return raw - raw.mean()


def _raw_from_derivs(derivs: np.ndarray) -> np.ndarray:
    excess = derivs - MIN_DERIVATIVE
    if np.any(excess <= 0):
        raise ValueError(f"derivatives must exceed {MIN_DERIVATIVE}")
    # inverse softplus, stable for large arguments
    return excess + np.log(-np.expm1(-excess))


def _raw_from_lambdas(lambdas: np.ndarray) -> np.ndarray:
    p = (lambdas - LAMBDA_MARGIN) / (1 - 2 * LAMBDA_MARGIN)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError(f"lambdas must lie in ({LAMBDA_MARGIN}, {1 - LAMBDA_MARGIN})")
    return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------------------
# torch kernels
# ---------------------------------------------------------------------------

class Knots(NamedTuple):
    xk: torch.Tensor   # (K+1,) knot inputs, xk[0] = -B, xk[K] = B
    yk: torch.Tensor   # (K+1,) knot outputs
    dk: torch.Tensor   # (K+1,) knot derivatives
    lam: torch.Tensor  # (K,) split position within each bin
    w1: torch.Tensor   # (K,) weight at the right knot (left weight is 1)
    wm: torch.Tensor   # (K,) weight at the split point
    ym: torch.Tensor   # (K,) output at the split point


def _bin_sizes(raw: torch.Tensor, bound: float) -> torch.Tensor:
    k = raw.shape[-1]
    min_size = MIN_BIN_FRACTION * 2 * bound / k
    return min_size + (2 * bound - k * min_size) * torch.softmax(raw, dim=-1)


def _cumulative(sizes: torch.Tensor, bound: float) -> torch.Tensor:
    inner = -bound + torch.cumsum(sizes, dim=-1)[:-1]
    ends = torch.tensor([bound], dtype=sizes.dtype)
    return torch.cat([-ends, inner, ends])


def spline_knots(p: Dict[str, torch.Tensor], bound: float) -> Knots:
    xk = _cumulative(_bin_sizes(p["raw_widths"], bound), bound)
    yk = _cumulative(_bin_sizes(p["raw_heights"], bound), bound)
    dk = MIN_DERIVATIVE + F.softplus(p["raw_derivs"])
    lam = LAMBDA_MARGIN + (1 - 2 * LAMBDA_MARGIN) * torch.sigmoid(p["raw_lambdas"])

    d0, d1 = dk[:-1], dk[1:]
    slope = (yk[1:] - yk[:-1]) / (xk[1:] - xk[:-1])
    w1 = torch.sqrt(d0 / d1)
    wm = (lam * d0 + (1 - lam) * w1 * d1) / slope
    ym = ((1 - lam) * yk[:-1] + lam * w1 * yk[1:]) / ((1 - lam) + lam * w1)
    return Knots(xk, yk, dk, lam, w1, wm, ym)


def _select(knots: Knots, idx: torch.Tensor):
    y0 = knots.yk[idx]
    y1 = knots.yk[idx + 1]
    x0 = knots.xk[idx]
    dx = knots.xk[idx + 1] - x0
    return x0, dx, y0, y1, knots.lam[idx], knots.w1[idx], knots.wm[idx], knots.ym[idx]


def spline_forward(u: torch.Tensor, knots: Knots, bound: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """T(u) and log dT/du; identity outside [-bound, bound]."""
    inside = (u >= -bound) & (u <= bound)
    uc = torch.clamp(u, -bound, bound)
    idx = torch.searchsorted(knots.xk[1:-1].contiguous(), uc.detach().contiguous(), right=True)
    x0, dx, y0, y1, lam, w1, wm, ym = _select(knots, idx)
    phi = torch.clamp((uc - x0) / dx, 0.0, 1.0)

    # left piece on [0, lam], right piece on [lam, 1]
    pa = torch.minimum(phi, lam)
    den_a = (lam - pa) + wm * pa
    out_a = (y0 * (lam - pa) + wm * ym * pa) / den_a
    grad_a = wm * lam * (ym - y0) / den_a ** 2

    pb = torch.maximum(phi, lam)
    den_b = wm * (1 - pb) + w1 * (pb - lam)
    out_b = (wm * ym * (1 - pb) + w1 * y1 * (pb - lam)) / den_b
    grad_b = wm * w1 * (1 - lam) * (y1 - ym) / den_b ** 2

    left = phi <= lam
    out = torch.where(left, out_a, out_b)
    logdet = torch.log(torch.where(left, grad_a, grad_b)) - torch.log(dx)
    return torch.where(inside, out, u), torch.where(inside, logdet, torch.zeros_like(u))


def spline_inverse(x: torch.Tensor, knots: Knots, bound: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """T^{-1}(x) and log dT^{-1}/dx; identity outside [-bound, bound]."""
    inside = (x >= -bound) & (x <= bound)
    xc = torch.clamp(x, -bound, bound)
    idx = torch.searchsorted(knots.yk[1:-1].contiguous(), xc.detach().contiguous(), right=True)
    x0, dx, y0, y1, lam, w1, wm, ym = _select(knots, idx)

    ya = torch.minimum(torch.maximum(xc, y0), ym)
    phi_a = lam * (ya - y0) / ((ya - y0) + wm * (ym - ya))
    yb = torch.maximum(torch.minimum(xc, y1), ym)
    phi_b = (wm * (yb - ym) + w1 * lam * (y1 - yb)) / (wm * (yb - ym) + w1 * (y1 - yb))

    left = xc <= ym
    phi = torch.where(left, phi_a, phi_b)
    # forward slope at the recovered point
    pa = torch.minimum(phi, lam)
    grad_a = wm * lam * (ym - y0) / ((lam - pa) + wm * pa) ** 2
    pb = torch.maximum(phi, lam)
    grad_b = wm * w1 * (1 - lam) * (y1 - ym) / (wm * (1 - pb) + w1 * (pb - lam)) ** 2
    logdet = torch.log(dx) - torch.log(torch.where(left, grad_a, grad_b))

    u = x0 + phi * dx
    return torch.where(inside, u, x), torch.where(inside, logdet, torch.zeros_like(x))


def flow_log_density(x: torch.Tensor, p: Dict[str, torch.Tensor], bound: float,
                     knots: Optional[Knots] = None) -> torch.Tensor:
    """log q(x) = log N(T^{-1}(x); 0, sigma^2) + log |dT^{-1}/dx|."""
    if knots is None:
        knots = spline_knots(p, bound)
    u, logdet = spline_inverse(x, knots, bound)
    log_var = p["base_log_var"].reshape(())
    base = -0.5 * (math.log(2 * math.pi) + log_var + u * u * torch.exp(-log_var))
    return base + logdet


# ---------------------------------------------------------------------------
# public numpy API
# ---------------------------------------------------------------------------

def _as_checked(values, name: str) -> Tuple[torch.Tensor, bool]:
    arr = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite {name}")
    return torch.as_tensor(np.atleast_1d(arr).copy(), dtype=DTYPE), arr.ndim == 0


def _out(t: torch.Tensor, scalar: bool):
    arr = t.detach().numpy().copy()
    return float(arr[0]) if scalar else arr


def forward(flow: SplineFlow, u):
    """Apply T; returns ``(x, log|dT/du|)`` with the shape of ``u``."""
    t, scalar = _as_checked(u, "input")
    with torch.no_grad():
        x, ld = spline_forward(t, spline_knots(flow.tensors(), flow.bound), flow.bound)
    return _out(x, scalar), _out(ld, scalar)


def inverse(flow: SplineFlow, x):
    """Apply T^{-1}; returns ``(u, log|dT^{-1}/dx|)``."""
    t, scalar = _as_checked(x, "input")
    with torch.no_grad():
        u, ld = spline_inverse(t, spline_knots(flow.tensors(), flow.bound), flow.bound)
    return _out(u, scalar), _out(ld, scalar)


def log_density(flow: SplineFlow, x):
    t, scalar = _as_checked(x, "input")
    with torch.no_grad():
        lp = flow_log_density(t, flow.tensors(), flow.bound)
    return _out(lp, scalar)


def sample(flow: SplineFlow, n: int, rng_seed: int = 0) -> np.ndarray:
    """n draws of T(u), u ~ N(0, sigma^2)."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return np.empty(0)
    rng = np.random.default_rng(rng_seed)
    u = rng.normal(0.0, math.sqrt(flow.base_var), size=n)
    return forward(flow, u)[0]


def perturbed_identity(num_bins: int, bound: float, rng: np.random.Generator,
                       scale: float = INIT_NOISE) -> SplineFlow:
    ident = SplineFlow.identity(num_bins, bound)
    if scale == 0:
        return ident
    return SplineFlow(num_bins, bound,
                      ident.raw_widths + scale * rng.standard_normal(num_bins),
                      ident.raw_heights + scale * rng.standard_normal(num_bins),
                      ident.raw_derivs + scale * rng.standard_normal(num_bins + 1),
                      ident.raw_lambdas + scale * rng.standard_normal(num_bins),
                      0.0)


def mle_loss(samples: np.ndarray, num_bins: int, bound: float):
    """Mean negative log-likelihood over named flow blocks (torch)."""
    data = torch.as_tensor(np.asarray(samples, dtype=float), dtype=DTYPE)

    def loss(blocks: Dict[str, torch.Tensor]) -> torch.Tensor:
        return -flow_log_density(data, blocks, bound).mean()

    return loss


def fit_mle(samples, config: Optional[FitConfig] = None, rng_seed: int = 0,
            init: Optional[SplineFlow] = None):
    """Maximum-likelihood spline flow for 1-D samples.

    Returns ``(flow, loss_trace)`` where the trace holds the mean negative
    log-likelihood before every Adam step.
    """
    config = config or FitConfig()
    samples = np.asarray(samples, dtype=float).reshape(-1)
    if samples.size < 2:
        raise ValueError("fit_mle needs at least 2 samples")
    if not np.all(np.isfinite(samples)):
        raise ValueError("non-finite samples")
    if np.ptp(samples) == 0:
        raise ValueError("degenerate sample: all values identical")

    if init is None:
        init = perturbed_identity(config.flow_bins, config.flow_bound,
                                  np.random.default_rng(rng_seed))
    packer = ParamPacker(init.blocks())
    vg = make_value_and_grad(mle_loss(samples, init.num_bins, init.bound), packer)
    traj = minimise(vg, packer.flat_init(), config)
    flow = SplineFlow.from_blocks(packer.unpack(traj.params), init.num_bins, init.bound)
    return flow, traj.losses

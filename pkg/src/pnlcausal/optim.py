"""Adam over flat parameter vectors, the shared fitting loop and a
finite-difference gradient oracle.

Gradients of every model loss are produced by torch autograd in float64;
the optimiser itself works on plain numpy vectors so that trajectories are
easy to inspect and reproduce.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

logger = logging.getLogger(__name__)

DTYPE = torch.float64


class FitDiverged(RuntimeError):
    """Raised when the loss becomes non-finite during fitting."""

    def __init__(self, step: int, message: str = "diverged"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class FitConfig:
    steps: int = 1000
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    quad_nodes: int = 20
    num_inducing: int = 20
    flow_bins: int = 21
    flow_bound: float = 10.0
    seed: int = 0
    # pairs larger than this are subsampled before fitting (0 = never)
    max_samples: int = 1000

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.quad_nodes < 2:
            raise ValueError("quad_nodes must be >= 2")
        if self.num_inducing < 1:
            raise ValueError("num_inducing must be >= 1")
        if self.flow_bins < 1:
            raise ValueError("flow_bins must be >= 1")
        if not self.flow_bound > 0:
            raise ValueError("flow_bound must be > 0")
        if self.max_samples < 0:
            raise ValueError("max_samples must be >= 0")

    def replace(self, **changes) -> "FitConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FitConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown FitConfig fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path, overrides: Optional[dict] = None) -> "FitConfig":
        """Load a JSON config file; non-None ``overrides`` win over file values."""
        with open(path) as fh:
            data = json.load(fh)
        if overrides:
            data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              config: FitConfig) -> Tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update (descent on the loss whose gradient is ``grads``)."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape:
        raise ValueError(f"params {params.shape} and grads {grads.shape} differ in shape")
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise FloatingPointError(f"non-finite gradient at parameter index {int(bad[0])}")

    b1, b2 = config.adam_beta1, config.adam_beta2
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads * grads
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    new = params - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return new, AdamState(m, v, t)


def sgd_step(params: np.ndarray, grads: np.ndarray, config: FitConfig) -> np.ndarray:
    """Plain gradient-descent update."""
    grads = np.asarray(grads, dtype=float)
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise FloatingPointError(f"non-finite gradient at parameter index {int(bad[0])}")
    return np.asarray(params, dtype=float) - config.learning_rate * grads


def finite_diff_grad(loss: Callable[[np.ndarray], float], params: np.ndarray,
                     step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss`` at ``params``."""
    params = np.array(params, dtype=float)
    grad = np.empty_like(params)
    for i in range(params.size):
        hi = params.copy()
        lo = params.copy()
        hi[i] += step
        lo[i] -= step
        grad[i] = (loss(hi) - loss(lo)) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


class ParamPacker:
    """Maps named parameter blocks to one flat vector and back.

    Blocks listed in ``frozen`` keep their initial values and are excluded
    from the flat vector.
    """

    def __init__(self, init: Dict[str, np.ndarray], frozen: Iterable[str] = ()):
        self.init = {k: np.asarray(v, dtype=float) for k, v in init.items()}
        frozen = set(frozen)
        unknown = frozen - set(self.init)
        if unknown:
            raise KeyError(f"cannot freeze unknown blocks {sorted(unknown)}")
        self.trainable: List[str] = [k for k in self.init if k not in frozen]
        self.frozen: List[str] = [k for k in self.init if k in frozen]
        self._slices = {}
        offset = 0
        for name in self.trainable:
            size = self.init[name].size
            self._slices[name] = slice(offset, offset + size)
            offset += size
        self.size = offset

    def flat_init(self) -> np.ndarray:
        if not self.trainable:
            return np.zeros(0)
        return np.concatenate([self.init[k].ravel() for k in self.trainable])

    def unpack_torch(self, theta: torch.Tensor) -> Dict[str, torch.Tensor]:
        out = {}
        for name, value in self.init.items():
            if name in self._slices:
                out[name] = theta[self._slices[name]].reshape(value.shape)
            else:
                out[name] = torch.as_tensor(value, dtype=DTYPE)
        return out

    def unpack(self, theta: np.ndarray) -> Dict[str, np.ndarray]:
        out = {}
        for name, value in self.init.items():
            if name in self._slices:
                out[name] = np.array(theta[self._slices[name]]).reshape(value.shape)
            else:
                out[name] = value.copy()
        return out


def make_value_and_grad(loss: Callable[[Dict[str, torch.Tensor]], torch.Tensor],
                        packer: ParamPacker) -> Callable[[np.ndarray], Tuple[float, np.ndarray]]:
    """Wrap a torch loss over named blocks into ``theta -> (value, gradient)``."""

    def value_and_grad(theta: np.ndarray) -> Tuple[float, np.ndarray]:
        t = torch.tensor(theta, dtype=DTYPE, requires_grad=True)
        value = loss(packer.unpack_torch(t))
        if not torch.isfinite(value):
            return float("nan"), np.full(theta.shape, np.nan)
        (grad,) = torch.autograd.grad(value, t, allow_unused=True)
        if grad is None:
            grad = torch.zeros_like(t)
        return float(value.detach()), grad.detach().numpy().copy()

    return value_and_grad


def make_value(loss: Callable[[Dict[str, torch.Tensor]], torch.Tensor],
               packer: ParamPacker) -> Callable[[np.ndarray], float]:
    def value(theta: np.ndarray) -> float:
        with torch.no_grad():
            return float(loss(packer.unpack_torch(torch.tensor(theta, dtype=DTYPE))))

    return value


@dataclass
class Trajectory:
    params: np.ndarray
    losses: List[float] = field(default_factory=list)


def minimise(value_and_grad: Callable[[np.ndarray], Tuple[float, np.ndarray]],
             theta0: np.ndarray, config: FitConfig,
             callback: Optional[Callable[[int, float], None]] = None) -> Trajectory:
    """Run ``config.steps`` Adam steps on ``value_and_grad``.

    Returns the parameters after the final update and the per-step loss
    trace. A non-finite loss or gradient raises :class:`FitDiverged`.
    """
    theta = np.array(theta0, dtype=float)
    traj = Trajectory(theta)
    if theta.size == 0:
        value, _ = value_and_grad(theta)
        traj.losses.append(value)
        return traj
    state = AdamState.zeros(theta.size)
    for step in range(config.steps):
        value, grad = value_and_grad(theta)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise FitDiverged(step)
        traj.losses.append(value)
        if callback is not None:
            callback(step, value)
        theta, state = adam_step(theta, grad, state, config)
    traj.params = theta
    return traj


def smoothed(trace: Sequence[float], window: int = 50) -> np.ndarray:
    """Non-overlapping window means of a loss trace."""
    trace = np.asarray(trace, dtype=float)
    n = len(trace) // window
    if n == 0:
        return trace.copy()
    return trace[: n * window].reshape(n, window).mean(axis=1)

"""Squared-exponential kernel, jittered Cholesky and exact GP regression
with Gaussian noise (the additive-noise baseline)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .optim import DTYPE, FitConfig, ParamPacker, make_value_and_grad, minimise

JITTER_LADDER = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


class IllConditionedKernel(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class SeKernel:
    log_lengthscale: float = 0.0

    @property
    def lengthscale(self) -> float:
        return math.exp(self.log_lengthscale)


def gram_t(xs: torch.Tensor, ys: torch.Tensor, log_lengthscale: torch.Tensor) -> torch.Tensor:
    diff = xs[:, None] - ys[None, :]
    return torch.exp(-0.5 * diff * diff * torch.exp(-2 * log_lengthscale))


def gram(kernel: SeKernel, xs, ys) -> np.ndarray:
    """K[i, j] = exp(-(xs[i] - ys[j])^2 / (2 l^2))."""
    xs = np.asarray(xs, dtype=float).reshape(-1)
    ys = np.asarray(ys, dtype=float).reshape(-1)
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise ValueError("non-finite kernel input")
    d = xs[:, None] - ys[None, :]
    return np.exp(-0.5 * d * d / kernel.lengthscale ** 2)


def jittered_cholesky(a: torch.Tensor, ladder: Sequence[float] = JITTER_LADDER) -> torch.Tensor:
    """Lower Cholesky factor of ``a``, adding the smallest working diagonal jitter."""
    eye = torch.eye(a.shape[-1], dtype=a.dtype)
    for jitter in ladder:
        chol, info = torch.linalg.cholesky_ex(a + jitter * eye if jitter else a)
        if int(info) == 0 and bool(torch.isfinite(chol).all()):
            return chol
    raise IllConditionedKernel("ill-conditioned kernel: Cholesky failed at maximum jitter")


@dataclass
class ExactGpModel:
    kernel: SeKernel
    noise_log_var: float
    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=float).reshape(-1)
        self.ys = np.asarray(self.ys, dtype=float).reshape(-1)
        if self.xs.size != self.ys.size or self.xs.size < 1:
            raise ValueError("training inputs and targets must have equal length >= 1")

    @property
    def noise_var(self) -> float:
        return math.exp(self.noise_log_var)

    def to_dict(self) -> dict:
        return {"log_lengthscale": self.kernel.log_lengthscale,
                "noise_log_var": self.noise_log_var}


def exact_log_marginal_t(xs: torch.Tensor, ys: torch.Tensor, log_lengthscale: torch.Tensor,
                         noise_log_var: torch.Tensor) -> torch.Tensor:
    n = xs.shape[0]
    k = gram_t(xs, xs, log_lengthscale) + torch.exp(noise_log_var) * torch.eye(n, dtype=DTYPE)
    chol = jittered_cholesky(k)
    alpha = torch.linalg.solve_triangular(chol, ys[:, None], upper=False)
    return (-0.5 * n * math.log(2 * math.pi)
            - torch.log(torch.diagonal(chol)).sum()
            - 0.5 * (alpha * alpha).sum())


def exact_log_marginal(model: ExactGpModel) -> float:
    """log N(y; 0, K + sigma^2 I) via Cholesky."""
    with torch.no_grad():
        return float(exact_log_marginal_t(
            torch.as_tensor(model.xs, dtype=DTYPE), torch.as_tensor(model.ys, dtype=DTYPE),
            torch.tensor(model.kernel.log_lengthscale, dtype=DTYPE),
            torch.tensor(model.noise_log_var, dtype=DTYPE)))


def posterior_mean(model: ExactGpModel, x_star) -> np.ndarray:
    """K_{*,x} (K + sigma^2 I)^{-1} y."""
    x_star = np.asarray(x_star, dtype=float).reshape(-1)
    n = model.xs.size
    k = gram(model.kernel, model.xs, model.xs) + model.noise_var * np.eye(n)
    chol = jittered_cholesky(torch.as_tensor(k, dtype=DTYPE)).numpy()
    alpha = _chol_solve(chol, model.ys)
    return gram(model.kernel, x_star, model.xs) @ alpha


def posterior_var(model: ExactGpModel, x_star) -> np.ndarray:
    """Latent-function posterior variance at ``x_star``."""
    x_star = np.asarray(x_star, dtype=float).reshape(-1)
    n = model.xs.size
    k = gram(model.kernel, model.xs, model.xs) + model.noise_var * np.eye(n)
    chol = jittered_cholesky(torch.as_tensor(k, dtype=DTYPE)).numpy()
    v = np.linalg.solve(chol, gram(model.kernel, model.xs, x_star))
    return np.maximum(1.0 - np.sum(v * v, axis=0), 0.0)


def _chol_solve(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    from scipy.linalg import cho_solve
    return cho_solve((chol, True), b)


@dataclass
class FitResult:
    """Outcome of one regression fit.

    ``objective`` is the total log marginal likelihood (exact GP) or its
    variational lower bound; ``per_sample`` divides it by N.
    """
    objective: float
    per_sample: float
    residuals: np.ndarray
    loss_trace: List[float] = field(default_factory=list)
    params: Dict[str, object] = field(default_factory=dict)
    mean_fn: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)
    model: object = field(default=None, repr=False)

    def predict_mean(self, x) -> np.ndarray:
        if self.mean_fn is None:
            raise RuntimeError("fit result carries no predictive mean")
        return self.mean_fn(np.asarray(x, dtype=float))

    def summary(self) -> dict:
        return {"objective": self.objective, "per_sample": self.per_sample,
                "final_loss": self.loss_trace[-1] if self.loss_trace else None,
                "steps": len(self.loss_trace), "params": self.params}


def anm_loss(xs: np.ndarray, ys: np.ndarray):
    """Negative per-sample exact log marginal likelihood over named blocks."""
    tx = torch.as_tensor(xs, dtype=DTYPE)
    ty = torch.as_tensor(ys, dtype=DTYPE)
    n = xs.size

    def loss(p: Dict[str, torch.Tensor]) -> torch.Tensor:
        return -exact_log_marginal_t(tx, ty, p["log_lengthscale"].reshape(()),
                                     p["noise_log_var"].reshape(())) / n

    return loss


def fit_anm(xs, ys, config: Optional[FitConfig] = None, rng_seed: int = 0):
    """Exact GP regression of ``ys`` on ``xs``.

    The returned FitResult holds the fitted :class:`ExactGpModel` in ``model``.
    """
    config = config or FitConfig()
    xs = np.asarray(xs, dtype=float).reshape(-1)
    ys = np.asarray(ys, dtype=float).reshape(-1)
    if xs.size != ys.size:
        raise ValueError("xs and ys differ in length")
    if xs.size < 5:
        raise ValueError("fit_anm needs at least 5 points")
    rng = np.random.default_rng(rng_seed)
    init = {"log_lengthscale": np.array([0.1 * rng.standard_normal()]),
            "noise_log_var": np.array([math.log(0.5) + 0.1 * rng.standard_normal()])}
    packer = ParamPacker(init)
    traj = minimise(make_value_and_grad(anm_loss(xs, ys), packer), packer.flat_init(), config)
    p = packer.unpack(traj.params)
    model = ExactGpModel(SeKernel(float(p["log_lengthscale"][0])), float(p["noise_log_var"][0]), xs, ys)
    lml = exact_log_marginal(model)
    fitted = posterior_mean(model, xs)
    result = FitResult(lml, lml / xs.size, ys - fitted, traj.losses,
                       {"lengthscale": model.kernel.lengthscale, "noise_var": model.noise_var},
                       lambda x: posterior_mean(model, x), model)
    return result

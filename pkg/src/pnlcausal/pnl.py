"""Post-nonlinear likelihood on top of the variational GP.

The stored spline is g^{-1}, so

    log p(y | f) = log p_eps(g^{-1}(y) - f) + log |d g^{-1} / dy|.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np
import torch

from . import flows, svgp
from .flows import SplineFlow
from .gp_core import FitResult
from .optim import DTYPE, FitConfig
from .svgp import SvgpState


@dataclass(frozen=True, eq=False)
class PnlModel:
    svgp_state: SvgpState

    def __post_init__(self):
        if self.svgp_state.post_flow is None:
            raise ValueError("PnlModel requires a post_flow (g^-1)")

    @property
    def post_flow(self) -> SplineFlow:
        return self.svgp_state.post_flow

    @property
    def noise_flow(self) -> SplineFlow:
        return self.svgp_state.noise_flow

    def g_inverse(self, y) -> np.ndarray:
        return flows.forward(self.post_flow, y)[0]

    def g(self, s) -> np.ndarray:
        return flows.inverse(self.post_flow, s)[0]

    def to_dict(self) -> dict:
        return {"model": "pnl", "state": self.svgp_state.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "PnlModel":
        return cls(SvgpState.from_dict(data["state"]))


def pnl_log_lik(model, y, f):
    """log p(y | f) under the post-nonlinear model.

    Accepts a :class:`PnlModel` or a bare :class:`SvgpState`; broadcasts
    over ``y`` and ``f``.
    """
    state = model.svgp_state if isinstance(model, PnlModel) else model
    y, f = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(f, dtype=float))
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(f))):
        raise ValueError("non-finite input")
    if state.post_flow is None:
        s, log_jac = y, 0.0
    else:
        s, log_jac = flows.forward(state.post_flow, y)
    out = flows.log_density(state.noise_flow, s - f) + log_jac
    return float(out) if np.ndim(out) == 0 else out


def fit_pnl(xs, ys, config: Optional[FitConfig] = None, rng_seed: int = 0,
            frozen: Iterable[str] = ()) -> Tuple[PnlModel, FitResult]:
    """Jointly fit f, the noise flow and g^{-1} (initialised to the identity)."""
    state, result = svgp.fit_variational(xs, ys, config or FitConfig(), rng_seed,
                                         with_post=True, frozen=frozen)
    model = PnlModel(state)
    result.model = model
    return model, result


def residuals(model, xs, ys) -> np.ndarray:
    """g^{-1}(y_i) - E[f(x_i)]; identity g^{-1} for additive-noise fits.

    ``model`` may be a PnlModel, an SvgpState or an exact-GP FitResult.
    """
    ys = np.asarray(ys, dtype=float).reshape(-1)
    if isinstance(model, PnlModel):
        return svgp.residuals_of(model.svgp_state, xs, ys)
    if isinstance(model, SvgpState):
        return svgp.residuals_of(model, xs, ys)
    if isinstance(model, FitResult):
        return ys - model.predict_mean(xs)
    raise TypeError(f"cannot compute residuals for {type(model).__name__}")

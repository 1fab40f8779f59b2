"""Sparse variational GP regression under a spline-flow noise likelihood.

q(u) = N(m, S) over M inducing values at inputs z, S = L L^T.  The bound is

    sum_i E_{q(f_i)}[log p(y_i | f_i)] - KL(q(u) || p(u))

with the expectations done by Gauss-Hermite quadrature.  An optional
second flow (``post_flow``) stores g^{-1} for the post-nonlinear model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
import torch

from scipy.linalg import solve_triangular

from . import flows
from .flows import SplineFlow, flow_log_density, spline_forward, spline_knots
from .gp_core import JITTER_LADDER, FitResult, SeKernel, gram_t, jittered_cholesky
from .optim import DTYPE, FitConfig, ParamPacker, make_value_and_grad, minimise

MIN_VARIANCE = 1e-12
DEFAULT_JITTER = 1e-6
MIN_INDUCING_GAP = 1e-6
INIT_CHOL_SCALE = 0.1


@dataclass(frozen=True, eq=False)
class SvgpState:
    """Variational state. ``jitter`` is added to the diagonal of K_zz."""

    z: np.ndarray
    m: np.ndarray
    chol_S: np.ndarray
    kernel: SeKernel
    noise_flow: SplineFlow
    post_flow: Optional[SplineFlow] = None
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        z = np.array(self.z, dtype=float).reshape(-1)
        m = np.array(self.m, dtype=float).reshape(-1)
        chol = np.array(self.chol_S, dtype=float)
        if z.size < 1:
            raise ValueError("need at least one inducing point")
        if m.size != z.size or chol.shape != (z.size, z.size):
            raise ValueError("inconsistent variational parameter shapes")
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(m)) and np.all(np.isfinite(chol))):
            raise ValueError("non-finite variational parameters")
        chol = np.tril(chol)
        if np.any(np.diag(chol) <= 0):
            raise ValueError("chol_S must have a positive diagonal")
        for name, arr in (("z", z), ("m", m), ("chol_S", chol)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "jitter", float(self.jitter))

    @property
    def num_inducing(self) -> int:
        return self.z.size

    @property
    def S(self) -> np.ndarray:
        return self.chol_S @ self.chol_S.T

    def prior_cov(self) -> np.ndarray:
        """K_zz as used by the bound (jitter included)."""
        with torch.no_grad():
            chol = kzz_cholesky(torch.tensor(self.z, dtype=DTYPE),
                                torch.tensor(self.kernel.log_lengthscale, dtype=DTYPE), self.jitter)
        chol = chol.numpy()
        return chol @ chol.T

    def replace(self, **changes) -> "SvgpState":
        data = dict(z=self.z, m=self.m, chol_S=self.chol_S, kernel=self.kernel,
                    noise_flow=self.noise_flow, post_flow=self.post_flow, jitter=self.jitter)
        data.update(changes)
        return SvgpState(**data)

    def blocks(self) -> Dict[str, np.ndarray]:
        """Unconstrained optimisation blocks.

        The variational distribution is expressed in whitened coordinates
        v = L_z^{-1} u, where K_zz = L_z L_z^T: mean L_z^{-1} m and Cholesky
        factor L_z^{-1} chol_S (log-parametrised diagonal).
        """
        with torch.no_grad():
            kchol = kzz_cholesky(torch.tensor(self.z, dtype=DTYPE),
                                 torch.tensor(self.kernel.log_lengthscale, dtype=DTYPE), self.jitter)
        kchol = kchol.numpy()
        v = solve_triangular(kchol, self.m, lower=True)
        lv = np.tril(solve_triangular(kchol, self.chol_S, lower=True))
        rows, cols = np.tril_indices(self.num_inducing, -1)
        out = {
            "z": self.z.copy(),
            "v_mean": v,
            "v_chol_log_diag": np.log(np.diag(lv)),
            "v_chol_offdiag": lv[rows, cols].copy(),
            "log_lengthscale": np.array([self.kernel.log_lengthscale]),
        }
        out.update(self.noise_flow.blocks("noise."))
        if self.post_flow is not None:
            out.update(self.post_flow.blocks("post."))
        return out

    def with_blocks(self, blocks: Dict[str, np.ndarray]) -> "SvgpState":
        tb = {k: torch.as_tensor(v, dtype=DTYPE) for k, v in blocks.items()}
        with torch.no_grad():
            kchol = kzz_cholesky(tb["z"], tb["log_lengthscale"].reshape(()), self.jitter)
            m = (kchol @ tb["v_mean"]).numpy()
            chol_s = (kchol @ _whitened_chol(tb)).numpy()
        nf = self.noise_flow
        post = None
        if self.post_flow is not None:
            post = SplineFlow.from_blocks(blocks, self.post_flow.num_bins, self.post_flow.bound, "post.")
        return SvgpState(blocks["z"], m, chol_s, SeKernel(float(blocks["log_lengthscale"][0])),
                         SplineFlow.from_blocks(blocks, nf.num_bins, nf.bound, "noise."), post,
                         self.jitter)

    def to_dict(self) -> dict:
        return {
            "num_inducing": self.num_inducing,
            "z": self.z.tolist(),
            "m": self.m.tolist(),
            "chol_S": self.chol_S.reshape(-1).tolist(),
            "jitter": self.jitter,
            "kernel": {"log_lengthscale": self.kernel.log_lengthscale},
            "noise_flow": self.noise_flow.to_dict(),
            "post_flow": None if self.post_flow is None else self.post_flow.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SvgpState":
        m_ = int(data["num_inducing"])
        post = data.get("post_flow")
        return cls(np.asarray(data["z"], dtype=float), np.asarray(data["m"], dtype=float),
                   np.asarray(data["chol_S"], dtype=float).reshape(m_, m_),
                   SeKernel(float(data["kernel"]["log_lengthscale"])),
                   SplineFlow.from_dict(data["noise_flow"]),
                   None if post is None else SplineFlow.from_dict(post),
                   float(data.get("jitter", DEFAULT_JITTER)))


# ---------------------------------------------------------------------------
# torch kernels over named (whitened) blocks
# ---------------------------------------------------------------------------

def kzz_cholesky(z: torch.Tensor, log_l: torch.Tensor, jitter: float) -> torch.Tensor:
    ladder = (jitter,) + tuple(j for j in JITTER_LADDER if j > jitter)
    return jittered_cholesky(gram_t(z, z, log_l), ladder)


def _whitened_chol(p: Dict[str, torch.Tensor]) -> torch.Tensor:
    m_ = p["v_mean"].shape[0]
    rows, cols = np.tril_indices(m_, -1)
    chol = torch.diag(torch.exp(p["v_chol_log_diag"]))
    if rows.size:
        chol = chol.index_put((torch.as_tensor(rows), torch.as_tensor(cols)), p["v_chol_offdiag"])
    return chol


def _flow_params(p: Dict[str, torch.Tensor], prefix: str) -> Dict[str, torch.Tensor]:
    return {name: p[prefix + name] for name in flows.FIELDS}


def q_f_marginals_t(xs: torch.Tensor, p: Dict[str, torch.Tensor], kzz_chol: torch.Tensor
                    ) -> Tuple[torch.Tensor, torch.Tensor]:
    """mean_i = k_iz K_zz^{-1} m, var_i = k_ii - k_iz K_zz^{-1} k_zi + k_iz K_zz^{-1} S K_zz^{-1} k_zi."""
    kzx = gram_t(p["z"], xs, p["log_lengthscale"].reshape(()))
    a = torch.linalg.solve_triangular(kzz_chol, kzx, upper=False)   # L_z^{-1} K_zx
    mean = a.T @ p["v_mean"]
    la = _whitened_chol(p).T @ a
    var = 1.0 - (a * a).sum(0) + (la * la).sum(0)
    return mean, torch.clamp(var, min=MIN_VARIANCE)


def kl_t(p: Dict[str, torch.Tensor]) -> torch.Tensor:
    """KL(N(m, S) || N(0, K_zz)) in whitened form.

    With m = L_z v and S = L_z L_v L_v^T L_z^T the terms Tr(K_zz^{-1} S),
    m^T K_zz^{-1} m and log|K_zz| - log|S| become |L_v|_F^2, |v|^2 and
    -2 sum log diag(L_v).
    """
    m_ = p["v_mean"].shape[0]
    lv = _whitened_chol(p)
    v = p["v_mean"]
    return 0.5 * ((lv * lv).sum() - m_ - 2 * p["v_chol_log_diag"].sum() + (v * v).sum())


def hermite_rule(n: int) -> Tuple[np.ndarray, np.ndarray]:
    if n < 2:
        raise ValueError("quad_nodes must be >= 2")
    return np.polynomial.hermite.hermgauss(n)


def expected_log_lik_t(ys: torch.Tensor, mean: torch.Tensor, var: torch.Tensor,
                       p: Dict[str, torch.Tensor], noise_bound: float, quad_nodes: int,
                       post_bound: Optional[float] = None) -> torch.Tensor:
    nodes, weights = hermite_rule(quad_nodes)
    t = torch.as_tensor(nodes, dtype=DTYPE)
    w = torch.as_tensor(weights / math.sqrt(math.pi), dtype=DTYPE)
    if post_bound is not None:
        post = _flow_params(p, "post.")
        s, log_jac = spline_forward(ys, spline_knots(post, post_bound), post_bound)
    else:
        s, log_jac = ys, None
    f = mean[:, None] + torch.sqrt(2 * var)[:, None] * t[None, :]
    lp = flow_log_density((s[:, None] - f).reshape(-1), _flow_params(p, "noise."), noise_bound)
    total = (lp.reshape(f.shape) * w[None, :]).sum()
    if log_jac is not None:
        total = total + log_jac.sum()
    return total


def elbo_t(xs: torch.Tensor, ys: torch.Tensor, p: Dict[str, torch.Tensor], noise_bound: float,
           quad_nodes: int, post_bound: Optional[float] = None,
           jitter: float = DEFAULT_JITTER) -> torch.Tensor:
    kzz_chol = kzz_cholesky(p["z"], p["log_lengthscale"].reshape(()), jitter)
    mean, var = q_f_marginals_t(xs, p, kzz_chol)
    ell = expected_log_lik_t(ys, mean, var, p, noise_bound, quad_nodes, post_bound)
    return ell - kl_t(p)


def _tensors(state: SvgpState) -> Dict[str, torch.Tensor]:
    return {k: torch.as_tensor(v, dtype=DTYPE) for k, v in state.blocks().items()}


def _kchol(state: SvgpState, p: Dict[str, torch.Tensor]) -> torch.Tensor:
    return kzz_cholesky(p["z"], p["log_lengthscale"].reshape(()), state.jitter)


def _vec(values) -> torch.Tensor:
    arr = np.asarray(values, dtype=float).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite input")
    return torch.as_tensor(arr.copy(), dtype=DTYPE)


def _post_bound(state: SvgpState) -> Optional[float]:
    return None if state.post_flow is None else state.post_flow.bound


# ---------------------------------------------------------------------------
# public numpy API
# ---------------------------------------------------------------------------

def q_f_marginals(state: SvgpState, xs) -> Tuple[np.ndarray, np.ndarray]:
    """Means and variances of q(f_i) = int p(f_i | u) q(u) du."""
    with torch.no_grad():
        p = _tensors(state)
        mean, var = q_f_marginals_t(_vec(xs), p, _kchol(state, p))
    return mean.numpy().copy(), var.numpy().copy()


def kl_term(state: SvgpState) -> float:
    """KL(N(m, S) || N(0, K_zz))."""
    with torch.no_grad():
        return float(kl_t(_tensors(state)))


def expected_log_lik(state: SvgpState, xs, ys, quad_nodes: int = 20) -> float:
    """sum_i E_{q(f_i)} log p(y_i | f_i) by Gauss-Hermite quadrature."""
    with torch.no_grad():
        p = _tensors(state)
        mean, var = q_f_marginals_t(_vec(xs), p, _kchol(state, p))
        return float(expected_log_lik_t(_vec(ys), mean, var, p, state.noise_flow.bound,
                                        quad_nodes, _post_bound(state)))


def elbo(state: SvgpState, xs, ys, quad_nodes: int = 20) -> float:
    with torch.no_grad():
        return float(elbo_t(_vec(xs), _vec(ys), _tensors(state), state.noise_flow.bound,
                            quad_nodes, _post_bound(state), state.jitter))


def initial_inducing(xs: np.ndarray, num_inducing: int) -> np.ndarray:
    """Equally spaced quantiles of ``xs``, forced apart by at least MIN_INDUCING_GAP."""
    levels = (np.arange(num_inducing) + 0.5) / num_inducing
    z = np.quantile(np.asarray(xs, dtype=float), levels)
    for i in range(1, z.size):
        if z[i] < z[i - 1] + MIN_INDUCING_GAP:
            z[i] = z[i - 1] + MIN_INDUCING_GAP
    return z


def initial_state(xs: np.ndarray, config: FitConfig, rng: np.random.Generator,
                  with_post: bool = False) -> SvgpState:
    """m = 0 and whitened Cholesky factor INIT_CHOL_SCALE * I (S = 0.01 K_zz)."""
    m_ = config.num_inducing
    # draw order is fixed so that ANM and PNL fits share their initial values
    log_l = 0.1 * rng.standard_normal()
    noise = flows.perturbed_identity(config.flow_bins, config.flow_bound, rng)
    post = SplineFlow.identity(config.flow_bins, config.flow_bound) if with_post else None
    z = initial_inducing(xs, m_)
    with torch.no_grad():
        kchol = kzz_cholesky(torch.as_tensor(z, dtype=DTYPE), torch.tensor(log_l, dtype=DTYPE),
                             DEFAULT_JITTER).numpy()
    return SvgpState(z, np.zeros(m_), INIT_CHOL_SCALE * kchol, SeKernel(log_l), noise, post)


def variational_loss(xs: np.ndarray, ys: np.ndarray, state: SvgpState, quad_nodes: int):
    """Negative per-sample bound as a function of named blocks."""
    tx, ty = _vec(xs), _vec(ys)
    n = tx.shape[0]
    noise_bound, post_bound = state.noise_flow.bound, _post_bound(state)

    def loss(p: Dict[str, torch.Tensor]) -> torch.Tensor:
        return -elbo_t(tx, ty, p, noise_bound, quad_nodes, post_bound, state.jitter) / n

    return loss


def fit_variational(xs, ys, config: FitConfig, rng_seed: int, with_post: bool = False,
                    frozen: Iterable[str] = (), init: Optional[SvgpState] = None
                    ) -> Tuple[SvgpState, FitResult]:
    xs = np.asarray(xs, dtype=float).reshape(-1)
    ys = np.asarray(ys, dtype=float).reshape(-1)
    if xs.size != ys.size:
        raise ValueError("xs and ys differ in length")
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise ValueError("non-finite data")
    if init is None:
        if xs.size < config.num_inducing:
            raise ValueError(f"need N >= M, got N={xs.size}, M={config.num_inducing}")
        init = initial_state(xs, config, np.random.default_rng(rng_seed), with_post)

    frozen = _expand_frozen(init, frozen)
    if init.post_flow is not None:
        # g^{-1} is used only as a transform; its base variance never enters the bound
        frozen.add("post.base_log_var")
    packer = ParamPacker(init.blocks(), frozen=frozen)
    loss = variational_loss(xs, ys, init, config.quad_nodes)
    traj = minimise(make_value_and_grad(loss, packer), packer.flat_init(), config)
    state = init.with_blocks(packer.unpack(traj.params))

    bound = elbo(state, xs, ys, config.quad_nodes)
    if not math.isfinite(bound):
        from .optim import FitDiverged
        raise FitDiverged(config.steps)
    resid = residuals_of(state, xs, ys)
    params = {"lengthscale": state.kernel.lengthscale, "noise_base_var": state.noise_flow.base_var,
              "kl": kl_term(state)}
    result = FitResult(bound, bound / xs.size, resid, traj.losses, params,
                       lambda x: q_f_marginals(state, x)[0], state)
    return state, result


def _expand_frozen(state: SvgpState, frozen: Iterable[str]) -> set:
    """Accept group names ('noise', 'post', 'noise.transform', 'variational', 'z', ...)."""
    names = set(state.blocks())
    out = set()
    for item in frozen:
        if item in names:
            out.add(item)
        elif item in ("noise", "post"):
            out |= {n for n in names if n.startswith(item + ".")}
        elif item in ("noise.transform", "post.transform"):
            pre = item.split(".")[0] + "."
            out |= {pre + n for n in flows.FIELDS[:4]}
        elif item == "variational":
            out |= {"v_mean", "v_chol_log_diag", "v_chol_offdiag"}
        else:
            raise KeyError(f"unknown parameter group {item!r}")
    return out


def residuals_of(state: SvgpState, xs, ys) -> np.ndarray:
    """g^{-1}(y_i) - E[f(x_i)] (g^{-1} = identity without a post flow)."""
    mean, _ = q_f_marginals(state, xs)
    ys = np.asarray(ys, dtype=float).reshape(-1)
    if state.post_flow is not None:
        ys = flows.forward(state.post_flow, ys)[0]
    return ys - mean


def fit_svgp(xs, ys, config: Optional[FitConfig] = None, rng_seed: int = 0,
             frozen: Iterable[str] = ()) -> Tuple[SvgpState, FitResult]:
    """Fit the additive-noise model with a flow noise density by Adam on -ELBO/N.

    ``frozen`` names parameter groups held at their initial values, e.g.
    ``("noise.transform",)`` restricts the noise to a Gaussian.
    """
    return fit_variational(xs, ys, config or FitConfig(), rng_seed, False, frozen)


def predict(state: SvgpState, x_star, n_samples: int = 1, rng_seed: int = 0):
    """Predictive mean/variance of f at ``x_star`` and samples of y.

    ``samples`` has shape (n_samples, len(x_star)): f ~ q(f*), then
    y = g(f + eps) with eps from the noise flow.
    """
    x_star = np.asarray(x_star, dtype=float).reshape(-1)
    mean, var = q_f_marginals(state, x_star)
    rng = np.random.default_rng(rng_seed)
    shape = (n_samples, x_star.size)
    f = mean + np.sqrt(var) * rng.standard_normal(shape)
    u = rng.normal(0.0, math.sqrt(state.noise_flow.base_var), size=shape)
    s = f + flows.forward(state.noise_flow, u.reshape(-1))[0].reshape(shape)
    if state.post_flow is not None:
        s = flows.inverse(state.post_flow, s.reshape(-1))[0].reshape(shape)
    return mean, var, s

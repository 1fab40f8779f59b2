"""Bivariate causal discovery with post-nonlinear models fitted by sparse
variational GP regression under spline-flow noise and output transforms."""
from .dataio import DataPair, generate_synthetic, load_pair, normalise
from .discovery import (Verdict, BenchmarkReport, benchmark, discover, discover_combined,
                        discover_median)
from .flows import SplineFlow, fit_mle
from .gp_core import fit_anm
from .hsic import hsic_test
from .optim import FitConfig
from .pnl import PnlModel, fit_pnl
from .svgp import SvgpState, fit_svgp

__all__ = [
    "BenchmarkReport", "DataPair", "FitConfig", "PnlModel", "SplineFlow", "SvgpState", "Verdict",
    "benchmark", "discover", "discover_combined", "discover_median", "fit_anm", "fit_mle",
    "fit_pnl", "fit_svgp", "generate_synthetic", "hsic_test", "load_pair", "normalise",
]
__version__ = "0.1.0"

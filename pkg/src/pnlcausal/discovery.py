"""Direction decisions: fit both directions, score residual independence and
likelihood, aggregate over seeded runs and run the benchmark protocol."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import dataio, flows
from .dataio import X_TO_Y, Y_TO_X, DataPair, normalise
from .gp_core import IllConditionedKernel, fit_anm
from .hsic import hsic_test
from .optim import FitConfig, FitDiverged
from .pnl import fit_pnl

logger = logging.getLogger(__name__)

UNDECIDED = "undecided"
MODEL_CLASSES = ("anm", "pnl")
CRITERIA = ("hsic_stat", "hsic_p", "likelihood")
DEFAULT_THRESHOLDS = tuple([0.0] + [10.0 ** e for e in range(-10, 0)]
                           + [0.02, 0.03, 0.05, 0.2, 0.5, 1.0])


class DiscoveryError(RuntimeError):
    pass


@dataclass(frozen=True)
class DirectionScores:
    """Criterion values for one regression direction (likelihoods per sample)."""
    hsic_stat: float
    hsic_p: float
    conditional_ll: float
    marginal_ll: float
    total_ll: float


@dataclass(frozen=True)
class Verdict:
    direction: str
    criterion: str
    model_class: str
    x_to_y: DirectionScores
    y_to_x: DirectionScores
    runs_used: int
    routed_to: Optional[str] = None
    anm_max_p: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Verdict":
        data = dict(data)
        data["x_to_y"] = DirectionScores(**data["x_to_y"])
        data["y_to_x"] = DirectionScores(**data["y_to_x"])
        return cls(**data)


def run_seed(base_seed: int, pair_id: Optional[int], run_index: int) -> int:
    """Seed of one run; both directions of a run share it."""
    ss = np.random.SeedSequence([int(base_seed), int(pair_id or 0), int(run_index)])
    return int(ss.generate_state(1)[0])


def decide(xy: DirectionScores, yx: DirectionScores, criterion: str) -> str:
    if criterion == "hsic_stat":
        a, b = -xy.hsic_stat, -yx.hsic_stat
    elif criterion == "hsic_p":
        a, b = xy.hsic_p, yx.hsic_p
    elif criterion == "likelihood":
        a, b = xy.total_ll, yx.total_ll
    else:
        raise ValueError(f"unknown criterion {criterion!r}")
    if a > b:
        return X_TO_Y
    if b > a:
        return Y_TO_X
    return UNDECIDED


def _check_args(model_class: str, criterion: str):
    if model_class not in MODEL_CLASSES:
        raise ValueError(f"model_class must be one of {MODEL_CLASSES}")
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}")


def _prepared(pair: DataPair) -> DataPair:
    return pair if pair.is_normalised else normalise(pair)


def score_direction(cause: np.ndarray, effect: np.ndarray, model_class: str,
                    config: FitConfig, seed: int) -> DirectionScores:
    """Regress ``effect`` on ``cause`` and score the fit."""
    if model_class == "anm":
        result = fit_anm(cause, effect, config, seed)
    else:
        _, result = fit_pnl(cause, effect, config, seed)
    test = hsic_test(cause, result.residuals)
    marginal, _ = flows.fit_mle(cause, config, seed)
    marginal_ll = float(np.mean(flows.log_density(marginal, cause)))
    return DirectionScores(test.statistic, test.p_value, result.per_sample, marginal_ll,
                           result.per_sample + marginal_ll)


def _one_run(pair: DataPair, model_class: str, config: FitConfig,
             run_index: int) -> Tuple[DirectionScores, DirectionScores]:
    seed = run_seed(config.seed, pair.pair_id, run_index)
    xy = score_direction(pair.x, pair.y, model_class, config, seed)
    yx = score_direction(pair.y, pair.x, model_class, config, seed)
    return xy, yx


def discover(pair: DataPair, model_class: str = "pnl", criterion: str = "hsic_stat",
             config: Optional[FitConfig] = None, run_index: int = 0) -> Verdict:
    """Fit both directions once and decide by ``criterion``."""
    _check_args(model_class, criterion)
    config = config or FitConfig()
    pair = _prepared(pair)
    try:
        xy, yx = _one_run(pair, model_class, config, run_index)
    except (FitDiverged, IllConditionedKernel) as exc:
        raise DiscoveryError(f"fit failed: {exc}") from exc
    return Verdict(decide(xy, yx, criterion), criterion, model_class, xy, yx, 1)


def _median_scores(scores: Sequence[DirectionScores]) -> DirectionScores:
    cond = float(np.median([s.conditional_ll for s in scores]))
    marg = float(np.median([s.marginal_ll for s in scores]))
    return DirectionScores(float(np.median([s.hsic_stat for s in scores])),
                           float(np.median([s.hsic_p for s in scores])),
                           cond, marg, cond + marg)


def discover_median(pair: DataPair, model_class: str = "pnl", criterion: str = "hsic_stat",
                    runs: int = 25, config: Optional[FitConfig] = None) -> Verdict:
    """Median of every criterion value over ``runs`` seeded fits; diverged runs are dropped."""
    _check_args(model_class, criterion)
    if runs < 1:
        raise ValueError("runs must be >= 1")
    config = config or FitConfig()
    pair = _prepared(pair)
    xys, yxs = [], []
    for r in range(runs):
        try:
            xy, yx = _one_run(pair, model_class, config, r)
        except (FitDiverged, IllConditionedKernel) as exc:
            logger.warning("pair %s run %d discarded: %s", pair.pair_id, r, exc)
            continue
        xys.append(xy)
        yxs.append(yx)
    if not xys:
        raise DiscoveryError(f"all {runs} runs diverged")
    xy, yx = _median_scores(xys), _median_scores(yxs)
    return Verdict(decide(xy, yx, criterion), criterion, model_class, xy, yx, len(xys))


def combine(anm: Verdict, pnl: Optional[Verdict], threshold_t: float) -> Verdict:
    """Use the ANM decision when either ANM p-value exceeds ``threshold_t``
    (always at t = 0), otherwise the PNL decision."""
    max_p = max(anm.x_to_y.hsic_p, anm.y_to_x.hsic_p)
    if threshold_t <= 0 or max_p > threshold_t:
        chosen, route = anm, "anm"
    else:
        if pnl is None:
            raise ValueError("PNL verdict required for this threshold")
        chosen, route = pnl, "pnl"
    return Verdict(chosen.direction, chosen.criterion, "combined", chosen.x_to_y, chosen.y_to_x,
                   chosen.runs_used, route, max_p)


def uses_anm(anm: Verdict, threshold_t: float) -> bool:
    return threshold_t <= 0 or max(anm.x_to_y.hsic_p, anm.y_to_x.hsic_p) > threshold_t


def discover_combined(pair: DataPair, threshold_t: float, runs: int = 25,
                      config: Optional[FitConfig] = None, criterion: str = "hsic_stat") -> Verdict:
    if not 0 <= threshold_t <= 1:
        raise ValueError("threshold must lie in [0, 1]")
    anm = discover_median(pair, "anm", criterion, runs, config)
    pnl = None
    if not uses_anm(anm, threshold_t):
        pnl = discover_median(pair, "pnl", criterion, runs, config)
    return combine(anm, pnl, threshold_t)


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

@dataclass
class PairEntry:
    pair_id: int
    weight: float
    true_direction: str
    n_samples: int
    verdicts: Dict[str, Verdict] = field(default_factory=dict)

    def correct(self, model_class: str) -> bool:
        return self.verdicts[model_class].direction == self.true_direction


@dataclass
class BenchmarkReport:
    model_class: str
    criterion: str
    runs: int
    entries: List[PairEntry]
    skipped: List[Tuple[int, str]] = field(default_factory=list)

    def _scored(self, model_class: Optional[str] = None):
        mc = model_class or self.model_class
        return [(e.weight, e.correct(mc)) for e in self.entries if mc in e.verdicts]

    @property
    def accuracy(self) -> float:
        return accuracy(self._scored())

    @property
    def weighted_accuracy(self) -> float:
        return weighted_accuracy(self._scored())

    def sweep(self, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> List[Tuple[float, float, float]]:
        """(t, accuracy, weighted accuracy) of the combined rule per threshold."""
        rows = []
        for t in thresholds:
            scored = []
            for e in self.entries:
                v = combine(e.verdicts["anm"], e.verdicts.get("pnl"), t)
                scored.append((e.weight, v.direction == e.true_direction))
            rows.append((float(t), accuracy(scored), weighted_accuracy(scored)))
        return rows

    def to_dict(self) -> dict:
        return {
            "model_class": self.model_class,
            "criterion": self.criterion,
            "runs": self.runs,
            "accuracy": self.accuracy,
            "weighted_accuracy": self.weighted_accuracy,
            "num_pairs": len(self.entries),
            "pairs": [{"pair_id": e.pair_id, "weight": e.weight, "true_direction": e.true_direction,
                       "n_samples": e.n_samples,
                       "verdicts": {k: v.to_dict() for k, v in sorted(e.verdicts.items())}}
                      for e in self.entries],
            "skipped": [{"pair_id": pid, "reason": reason} for pid, reason in self.skipped],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_tsv(self) -> str:
        """Median HSIC statistics per pair, laid out like the published results table."""
        lines = ["pair\tpnl_x_to_y\tpnl_y_to_x\tanm_x_to_y\tanm_y_to_x\tpnl_verdict\tanm_verdict"]
        for e in self.entries:
            cells = [str(e.pair_id)]
            for mc in ("pnl", "anm"):
                v = e.verdicts.get(mc)
                cells += ([f"{v.x_to_y.hsic_stat:.3f}", f"{v.y_to_x.hsic_stat:.3f}"]
                          if v else ["nan", "nan"])
            for mc in ("pnl", "anm"):
                v = e.verdicts.get(mc)
                cells.append(v.direction if v else "")
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"


def accuracy(scored: Sequence[Tuple[float, bool]]) -> float:
    if not scored:
        return float("nan")
    return float(np.mean([ok for _, ok in scored]))


def weighted_accuracy(scored: Sequence[Tuple[float, bool]]) -> float:
    total = sum(w for w, _ in scored)
    if total <= 0:
        return float("nan")
    return float(sum(w for w, ok in scored if ok) / total)


def _pair_job(args) -> Tuple[int, Dict[str, dict], Optional[str]]:
    pair, model_classes, criterion, runs, config = args
    out = {}
    for mc in model_classes:
        try:
            out[mc] = discover_median(pair, mc, criterion, runs, config).to_dict()
        except DiscoveryError as exc:
            return pair.pair_id, out, str(exc)
    return pair.pair_id, out, None


def benchmark(pairs_dir, model_class: str = "pnl", criterion: str = "hsic_stat", runs: int = 25,
              config: Optional[FitConfig] = None, workers: int = 1,
              with_sweep: bool = False) -> BenchmarkReport:
    """Run the discovery protocol on every scalar pair of a benchmark directory.

    ``model_class`` may be "anm", "pnl" or "combined"; the combined class and
    ``with_sweep`` fit both models per pair.
    """
    config = config or FitConfig()
    if model_class not in MODEL_CLASSES + ("combined",):
        raise ValueError(f"unknown model class {model_class!r}")
    classes = ("anm", "pnl") if (model_class == "combined" or with_sweep) else (model_class,)

    jobs, meta, skipped = [], {}, []
    for pid, item in dataio.iter_pairs(pairs_dir):
        if isinstance(item, Exception):
            skipped.append((pid, str(item)))
            continue
        try:
            pair = normalise(item).subsample(config.max_samples, config.seed)
        except ValueError as exc:
            skipped.append((pid, str(exc)))
            continue
        meta[pid] = (item.weight if item.weight is not None else 1.0, item.true_direction, len(pair))
        jobs.append((pair, classes, criterion, runs, config))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_pair_job, jobs))
    else:
        results = [_pair_job(j) for j in jobs]

    entries = []
    for pid, verdicts, error in sorted(results, key=lambda r: r[0]):
        if error is not None:
            skipped.append((pid, error))
            continue
        weight, truth, n = meta[pid]
        entries.append(PairEntry(pid, weight, truth, n,
                                 {k: Verdict.from_dict(v) for k, v in verdicts.items()}))
    skipped.sort()
    report_class = "pnl" if model_class == "combined" else model_class
    return BenchmarkReport(report_class, criterion, runs, entries, skipped)

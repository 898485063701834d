"""Length versus accuracy analysis

Fits a three-parameter logistic to accuracy as a function of reasoning
length, recommends token budgets from the fit, and checks that chains
get shorter as alpha grows.
"""
from __future__ import annotations
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from scipy.optimize import least_squares
from scipy.special import expit
from scipy.stats import spearmanr

from .const import GenerationRecord, SpectrumRun, Segment, FlatCurveError, format_alpha
from .curator import verdict_for
from .metrics import avg_tokens, pass_at_1, usable_records
from .records import write_json, write_text_atomic

import logging
log = logging.getLogger('dartpipe')

DEFAULT_BINS = 10
DEFAULT_EPSILON = 0.02
MIN_FIT_POINTS = 4

# Coarse grid for the multi-start, relative to the observed token span
K_GRID_POINTS = 15
K_GRID_RANGE = (0.5, 50.0)
T0_GRID_POINTS = 21

FIT_FILE = 'fit.json'
CURVE_TEXT_FILE = 'curve.txt'
CURVE_SVG_FILE = 'curve.svg'
SPECTRUM_FILE = 'spectrum.json'

@dataclass(frozen=True)
class CurvePoint:
    mean_tokens: float
    accuracy: float
    n: int

@dataclass(frozen=True)
class SigmoidFit:
    """ acc(t) = L / (1 + exp(-k (t - t0)))
    """
    L: float
    k: float
    t0: float
    rss: float
    converged: bool

    def model(self, t):
        return logistic(t, self.L, self.k, self.t0)

    def _asdict(self) -> dict:
        return asdict(self)

class Violation(NamedTuple):
    """Adjacent alphas where the mean chain got longer"""
    alpha_from: float
    alpha_to: float
    act_from: float
    act_to: float

def bin_points(records: list[GenerationRecord], verdicts: dict[str, bool],
    num_bins: int=DEFAULT_BINS) -> list[CurvePoint]:
    """Pool records into equal-population bins of reasoning length

    Bins whose mean lengths coincide are merged, so the points come back
    distinct and sorted by mean length. ERROR records are left out.
    """
    if num_bins < 1:
        raise ValueError(f"num_bins must be positive, got {num_bins}")
    usable = usable_records(records)
    tokens = np.array([r.reasoning_tokens for r in usable], dtype=np.float64)
    correct = np.array([verdict_for(r, verdicts) for r in usable], dtype=np.float64)
    if np.unique(tokens).size < 2:
        raise ValueError("Records need at least 2 distinct reasoning lengths to form a curve")

    order = np.argsort(tokens, kind='stable')
    points: list[CurvePoint] = []
    for chunk in np.array_split(order, min(num_bins, order.size)):
        point = CurvePoint(float(tokens[chunk].mean()), float(correct[chunk].mean()), int(chunk.size))
        if points and points[-1].mean_tokens == point.mean_tokens:
            prev = points.pop()
            n = prev.n + point.n
            point = CurvePoint(point.mean_tokens,
                (prev.accuracy * prev.n + point.accuracy * point.n) / n, n)
        points.append(point)
    return points

def logistic(t, L: float, k: float, t0: float):
    return L * expit(k * (np.asarray(t, dtype=np.float64) - t0))

def fit_residuals(params, t, acc, weights):
    L, k, t0 = params
    return np.sqrt(weights) * (logistic(t, L, k, t0) - acc)

def fit_jacobian(params, t, acc, weights):
    """Analytic Jacobian of fit_residuals with respect to (L, k, t0)"""
    L, k, t0 = params
    s = expit(k * (t - t0))
    ds = s * (1.0 - s)
    root_w = np.sqrt(weights)
    return np.column_stack([
        root_w * s,
        root_w * L * ds * (t - t0),
        -root_w * L * ds * k,
    ])

def _fit_arrays(points: list[CurvePoint]):
    t = np.array([p.mean_tokens for p in points], dtype=np.float64)
    acc = np.array([p.accuracy for p in points], dtype=np.float64)
    weights = np.array([p.n for p in points], dtype=np.float64)
    return t, acc, weights

def fit_sigmoid(points: list[CurvePoint]) -> SigmoidFit:
    """Weighted least-squares logistic fit

    A coarse grid over (k, t0) with L at the best observed accuracy picks
    the start, then Levenberg-Marquardt refines all three parameters. If
    refinement fails or ends worse than the start, the grid candidate is
    returned with converged=False.
    """
    if len(points) < MIN_FIT_POINTS:
        raise ValueError(f"Need at least {MIN_FIT_POINTS} points to fit a sigmoid, got {len(points)}")
    t, acc, weights = _fit_arrays(points)
    if np.ptp(acc) == 0:
        raise FlatCurveError(f"Every point has accuracy {acc[0]}, the curve's slope can't be identified")

    L0 = float(acc.max())
    span = float(t.max() - t.min())
    k_grid = np.geomspace(K_GRID_RANGE[0] / span, K_GRID_RANGE[1] / span, K_GRID_POINTS)
    t0_grid = np.linspace(t.min(), t.max(), T0_GRID_POINTS)
    t0_grid = t0_grid[t0_grid > 0]

    best = None
    best_rss = math.inf
    for k in k_grid:
        for t0 in t0_grid:
            rss = float(np.sum(fit_residuals((L0, k, t0), t, acc, weights) ** 2))
            # strict comparison: the lowest-index start wins ties
            if rss < best_rss:
                best, best_rss = (L0, float(k), float(t0)), rss
    grid_fit = SigmoidFit(*best, rss=best_rss, converged=False)
    log.debug(f"Best grid start L={best[0]:.4g} k={best[1]:.4g} t0={best[2]:.4g} rss={best_rss:.4g}")

    try:
        result = least_squares(fit_residuals, np.array(best), jac=fit_jacobian, method='lm',
            xtol=1e-12, ftol=1e-12, gtol=1e-12, args=(t, acc, weights))
    except (ValueError, np.linalg.LinAlgError) as e:
        log.warning(f"Sigmoid refinement failed, keeping the grid start: {e}")
        return grid_fit

    L, k, t0 = (float(x) for x in result.x)
    rss = float(np.sum(result.fun ** 2))
    if not (result.success and 0 < L <= 1 and k > 0 and t0 > 0 and rss <= best_rss):
        log.warning(f"Sigmoid refinement did not converge ({result.message}), keeping the grid start")
        return grid_fit
    return SigmoidFit(L, k, t0, rss, True)

def token_budget(fit: SigmoidFit, epsilon: float=DEFAULT_EPSILON) -> float:
    """Smallest length at which the fit reaches (1 - epsilon) of its plateau"""
    if not fit.converged:
        raise ValueError("Token budgets need a converged fit")
    if not 0 < epsilon < 1:
        raise ValueError(f"epsilon must be in (0, 1), got {epsilon}")
    return fit.t0 + math.log((1 - epsilon) / epsilon) / fit.k

def alpha_monotonicity(series: list[tuple[float, float]]) -> tuple[float, list[Violation]]:
    """Spearman correlation of alpha and ACT, plus every adjacent increase

    @param series: (alpha, act) pairs in any order
    """
    if len(series) < 3:
        raise ValueError(f"Need at least 3 (alpha, act) points, got {len(series)}")
    alphas = [a for a, _ in series]
    if len(set(alphas)) != len(alphas):
        raise ValueError("Duplicate alpha values in the series")
    ordered = sorted(series)
    acts = np.array([act for _, act in ordered], dtype=np.float64)
    if np.ptp(acts) == 0:
        raise ValueError("ACT is constant across alpha, rank correlation is undefined")

    rho = float(spearmanr([a for a, _ in ordered], acts)[0])
    violations = [Violation(a1, a2, c1, c2)
        for (a1, c1), (a2, c2) in zip(ordered, ordered[1:]) if c2 > c1]
    return rho, violations

def spectrum_profile(run: SpectrumRun, verdicts: dict[str, bool]) -> list[dict]:
    """Accuracy, ACT, AAT and relative length per alpha of a run"""
    profile = []
    reference_act = None
    for alpha in run.alpha_grid:
        records = [r for r in run.records if format_alpha(r.alpha) == format_alpha(alpha)]
        if not records:
            continue
        usable = usable_records(records)
        act = avg_tokens(records, Segment.REASONING) if usable else None
        aat = avg_tokens(records, Segment.TOTAL) if usable else None
        if reference_act is None and act:
            reference_act = act
        profile.append({
            'alpha': alpha,
            'n': len(records),
            'accuracy': pass_at_1([verdict_for(r, verdicts) for r in records]),
            'act': act,
            'aat': aat,
            'length_ratio_pct': act / reference_act * 100 if act is not None and reference_act else None,
        })
    return profile


def render_curve_text(points: list[CurvePoint], fit: Optional[SigmoidFit], budget: Optional[float]) -> str:
    lines = [f"{'tokens':>12}  {'accuracy':>8}  {'fitted':>8}  {'n':>6}"]
    for p in points:
        fitted = f"{float(fit.model(p.mean_tokens)):8.4f}" if fit else f"{'-':>8}"
        lines.append(f"{p.mean_tokens:12.2f}  {p.accuracy:8.4f}  {fitted}  {p.n:6d}")
    if fit:
        lines.append('')
        lines.append(f"L={fit.L:.6g} k={fit.k:.6g} t0={fit.t0:.6g} rss={fit.rss:.6g} converged={fit.converged}")
    if budget is not None:
        lines.append(f"recommended token budget: {budget:.1f}")
    return '\n'.join(lines) + '\n'

def render_curve_svg(points: list[CurvePoint], fit: Optional[SigmoidFit], path: Path,
    budget: float=None) -> Path:
    """Plot the binned points and the fitted curve to an SVG file"""
    import matplotlib
    matplotlib.use('Agg')
    # fixed ids and no timestamp, so reruns give identical files
    matplotlib.rcParams.update({
        'svg.hashsalt': 'dartpipe',
        'axes.unicode_minus': False,
    })
    import matplotlib.pyplot as plt

    t, acc, _ = _fit_arrays(points)
    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    ax.scatter(t, acc, label='binned records')
    if fit is not None:
        grid = np.linspace(0, t.max() * 1.1, 200)
        ax.plot(grid, fit.model(grid), label='logistic fit')
    if budget is not None:
        ax.axvline(budget, linestyle='--', color='grey', label='token budget')
    ax.set_xlabel('Reasoning tokens')
    ax.set_ylabel('Accuracy')
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    ax.legend(loc='lower right')
    fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)
    return path

def analyze_run(run: SpectrumRun, verdicts: dict[str, bool], out_dir,
    num_bins: int=DEFAULT_BINS, epsilon: float=DEFAULT_EPSILON) -> dict:
    """Fit the length/accuracy curve and profile the spectrum of a run

    Writes fit.json, curve.txt, curve.svg and spectrum.json into out_dir.
    A curve that can't be fitted is reported, not raised.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    points = []
    fit = None
    budget = None
    fit_error = None
    try:
        points = bin_points(run.records, verdicts, num_bins)
        fit = fit_sigmoid(points)
        if fit.converged:
            budget = token_budget(fit, epsilon)
    except ValueError as e:
        log.warning(f"No sigmoid fit: {e}")
        fit_error = str(e)

    profile = spectrum_profile(run, verdicts)
    series = [(row['alpha'], row['act']) for row in profile if row['act'] is not None]
    monotonicity = None
    try:
        rho, violations = alpha_monotonicity(series)
        monotonicity = {'spearman_rho': rho, 'violations': [v._asdict() for v in violations]}
        if violations:
            log.info(f"ACT rises between {len(violations)} adjacent alpha pairs")
    except ValueError as e:
        log.warning(f"No monotonicity check: {e}")

    result = {
        'points': [asdict(p) for p in points],
        'fit': fit._asdict() if fit else None,
        'fit_error': fit_error,
        'epsilon': epsilon,
        'token_budget': budget,
    }
    write_json(out_dir / FIT_FILE, result)
    write_text_atomic(out_dir / CURVE_TEXT_FILE, render_curve_text(points, fit, budget))
    render_curve_svg(points, fit, out_dir / CURVE_SVG_FILE, budget)
    write_json(out_dir / SPECTRUM_FILE, {'profile': profile, 'monotonicity': monotonicity})
    return result

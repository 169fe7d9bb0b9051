"""Model-subset selection over the kernelized embedding space.

The coverage objective J(S) sums, over every model in the pool, its
best similarity to the selected subset. Count-constrained selection is
greedy farthest-first in similarity space (seeded at the global kernel
medoid, then repeatedly adding the least-covered model), optionally
refined by PAM swaps. Budget-constrained selection greedily adds the
feasible model with the largest coverage gain per parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ValidationError
from .geometry import KernelMatrix
from .predictor import PredictionMatrix, correctness_metrics


@dataclass
class Portfolio:
    model_ids: list[str]        # in selection order
    objective: float
    constraint: dict
    trajectory: list = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.model_ids)) != len(self.model_ids):
            raise ValidationError("portfolio contains duplicate models")
        if "k" in self.constraint and len(self.model_ids) > self.constraint["k"]:
            raise ValidationError("portfolio violates its count constraint")
        if "budget" in self.constraint:
            if self.constraint["consumed"] > self.constraint["budget"] + 1e-9:
                raise ValidationError("portfolio violates its parameter budget")


@dataclass
class CoverageState:
    """b_i = best similarity of model i to the current selection."""

    best: np.ndarray
    selected: list[str] = field(default_factory=list)

    def __post_init__(self):
        if np.any(self.best < 0) or np.any(self.best > 1):
            raise ValidationError("coverage values must lie in [0,1]")


def coverage_objective(kernel: KernelMatrix, subset):
    """J = sum_i max_{s in subset} K_is; empty subset covers nothing."""
    if not subset:
        return 0.0
    idx = [kernel.model_ids.index(m) for m in subset]
    return float(kernel.values[:, idx].max(axis=1).sum())


def coverage_state(kernel: KernelMatrix, subset) -> CoverageState:
    n = len(kernel.model_ids)
    if not subset:
        return CoverageState(best=np.zeros(n), selected=[])
    idx = [kernel.model_ids.index(m) for m in subset]
    return CoverageState(best=kernel.values[:, idx].max(axis=1),
                         selected=list(subset))


def marginal_gain(kernel: KernelMatrix, state: CoverageState, model_id):
    """Delta = sum_i max(0, K_im - b_i), the coverage gained by adding m."""
    if model_id in state.selected:
        raise ValidationError(f"model {model_id!r} already selected")
    j = kernel.model_ids.index(model_id)
    gains = kernel.values[:, j] - state.best
    return float(np.clip(gains, 0.0, None).sum())


def kcenter_select(kernel: KernelMatrix, k) -> Portfolio:
    """Greedy farthest-first in similarity space.

    Start at the global kernel medoid (highest mean similarity), then
    repeatedly add the least-covered model; ties go to the smallest id.
    """
    ids = kernel.model_ids
    n = len(ids)
    if not 1 <= k <= n:
        raise ValidationError(f"k={k} outside [1, {n}]")
    K = kernel.values
    mean_sim = K.mean(axis=0)
    start = min(range(n), key=lambda i: (-mean_sim[i], ids[i]))
    selected = [start]
    best = K[:, start].copy()
    trajectory = [float(best.sum())]
    while len(selected) < k:
        candidates = [i for i in range(n) if i not in selected]
        nxt = min(candidates, key=lambda i: (best[i], ids[i]))
        selected.append(nxt)
        best = np.maximum(best, K[:, nxt])
        trajectory.append(float(best.sum()))
    return Portfolio(
        model_ids=[ids[i] for i in selected],
        objective=float(best.sum()),
        constraint={"k": k},
        trajectory=trajectory,
    )


def pam_refine(kernel: KernelMatrix, initial: Portfolio, max_iters=100) -> Portfolio:
    """First-improvement PAM swaps on the sum-coverage objective.

    Scans (selected ascending, candidates ascending by id), applies the
    first swap with J(S') > J(S), and stops at a fixed point or after
    max_iters scans. J never decreases.
    """
    ids = kernel.model_ids
    selected = set(initial.model_ids)
    current = coverage_objective(kernel, sorted(selected))
    trajectory = [current]
    for _ in range(max_iters):
        improved = False
        for s in sorted(selected):
            for h in sorted(set(ids) - selected):
                trial = (selected - {s}) | {h}
                j_trial = coverage_objective(kernel, sorted(trial))
                if j_trial > current:
                    assert j_trial > current  # accepted swaps strictly improve
                    selected = trial
                    current = j_trial
                    trajectory.append(current)
                    improved = True
                    break
            if improved:
                break
        if not improved:
            break
    constraint = dict(initial.constraint)
    return Portfolio(
        model_ids=sorted(selected),
        objective=current,
        constraint=constraint,
        trajectory=trajectory,
    )


def budget_greedy(kernel: KernelMatrix, costs, budget) -> Portfolio:
    """Add the feasible model with the largest gain per parameter.

    Ties break on smaller cost, then smaller id. Zero-gain models stay
    selectable while they fit; selection stops only when nothing fits.
    """
    ids = kernel.model_ids
    for m in ids:
        if m not in costs:
            raise ValidationError(f"missing cost for model {m!r}")
        if costs[m] <= 0:
            raise ValidationError(f"cost for {m!r} must be > 0")
    K = kernel.values
    selected = []
    best = np.zeros(len(ids))
    remaining = float(budget)
    trajectory = []
    while True:
        feasible = [
            (i, m) for i, m in enumerate(ids)
            if m not in selected and costs[m] <= remaining
        ]
        if not feasible:
            break
        scored = []
        for i, m in feasible:
            gain = float(np.clip(K[:, i] - best, 0.0, None).sum())
            scored.append((-(gain / costs[m]), costs[m], m, i, gain))
        scored.sort()
        _, cost, m, i, gain = scored[0]
        selected.append(m)
        best = np.maximum(best, K[:, i])
        remaining -= cost
        trajectory.append(float(best.sum()))
    consumed = float(sum(costs[m] for m in selected))
    objective = float(best.sum()) if selected else 0.0
    return Portfolio(
        model_ids=selected,
        objective=objective,
        constraint={"budget": float(budget), "consumed": consumed},
        trajectory=trajectory,
    )


def random_feasible_subsets(ids, costs, budget, size, n_samples, rng):
    """Rejection-sample random subsets; count-constrained when size is
    given, budget-constrained otherwise."""
    out = []
    attempts = 0
    while len(out) < n_samples and attempts < 1000 * n_samples:
        attempts += 1
        if size is not None:
            subset = sorted(rng.choice(ids, size=size, replace=False))
            out.append(list(subset))
        else:
            perm = list(rng.permutation(ids))
            subset, total = [], 0.0
            for m in perm:
                if total + costs[m] <= budget:
                    subset.append(m)
                    total += costs[m]
            if subset:
                out.append(sorted(subset))
    return out


def portfolio_routing_accuracy(portfolio: Portfolio, pm: PredictionMatrix,
                               test_corpus):
    """Routing accuracy with the argmax restricted to portfolio members."""
    if not portfolio.model_ids:
        raise ValidationError("empty portfolio")
    missing = [m for m in portfolio.model_ids if m not in pm.row_index]
    if missing:
        raise ValidationError(f"predictions missing for portfolio models {missing}")
    metrics = correctness_metrics(pm, test_corpus, restrict_to=portfolio.model_ids)
    return metrics.routing_accuracy

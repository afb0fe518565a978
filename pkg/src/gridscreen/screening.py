"""N-1 line outage screening, ranking, and oracle comparison.

Screening evaluates the first-order impact of every single closed-branch
outage from one factorized operating-point model, ranks the outages by a
scalar severity metric, and (optionally) re-solves the full nonlinear power
flow per outage to measure how faithful the ranking is.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .case_io import GridCase
from .errors import IslandingError, PowerFlowError
from .powerflow import (
    LinearizedSystem,
    PowerFlowOptions,
    PowerFlowSolution,
    branch_power_flows,
    linearize_at_solution,
    solve_ac_powerflow,
)
from .sensitivity import (
    SEVERITY_METRICS,
    _build_baseline,
    evaluate_outage,
    severity_from_deltas,
)

logger = logging.getLogger(__name__)

__all__ = [
    "OracleOutcome",
    "ScreenEntry",
    "ComparisonSummary",
    "ScreeningReport",
    "find_bridges",
    "is_connected",
    "oracle_outage",
    "screen",
    "compare_severities",
]

_TOP_OVERLAP_SIZES = (3, 5, 10)


# -- graph topology ---------------------------------------------------------------


def _adjacency(case: GridCase, skip_branch: int | None = None) -> list[list[tuple[int, int]]]:
    """Closed-branch adjacency as ``bus -> [(neighbor, branch_idx), ...]``."""
    adj: list[list[tuple[int, int]]] = [[] for _ in range(case.n)]
    for idx, br in enumerate(case.branches):
        if not br.closed or idx == skip_branch:
            continue
        f = case.bus_index(br.from_bus)
        t = case.bus_index(br.to_bus)
        adj[f].append((t, idx))
        adj[t].append((f, idx))
    return adj


def is_connected(case: GridCase, skip_branch: int | None = None) -> bool:
    """Whether all buses are reachable over closed branches (optionally skipping one)."""
    adj = _adjacency(case, skip_branch)
    seen = [False] * case.n
    stack = [0]
    seen[0] = True
    count = 1
    while stack:
        k = stack.pop()
        for nb, _ in adj[k]:
            if not seen[nb]:
                seen[nb] = True
                count += 1
                stack.append(nb)
    return count == case.n


def find_bridges(case: GridCase) -> set[int]:
    """Indices of closed branches whose removal disconnects the network.

    Iterative depth-first lowpoint search.  Parallel branches are tracked by
    branch index, so one circuit of a double circuit is never a bridge.
    """
    adj = _adjacency(case)
    n = case.n
    disc = [-1] * n
    low = [0] * n
    bridges: set[int] = set()
    counter = 0
    for root in range(n):
        if disc[root] != -1:
            continue
        # each frame: (bus, branch used to enter, iterator position)
        stack: list[tuple[int, int, int]] = [(root, -1, 0)]
        disc[root] = low[root] = counter
        counter += 1
        while stack:
            k, in_branch, pos = stack.pop()
            if pos < len(adj[k]):
                stack.append((k, in_branch, pos + 1))
                nb, br = adj[k][pos]
                if br == in_branch:
                    continue
                if disc[nb] == -1:
                    disc[nb] = low[nb] = counter
                    counter += 1
                    stack.append((nb, br, 0))
                else:
                    low[k] = min(low[k], disc[nb])
            else:
                if in_branch != -1:
                    # k is fully explored; fold its lowpoint into its parent
                    parent = stack[-1][0]
                    low[parent] = min(low[parent], low[k])
                    if low[k] > disc[parent]:
                        bridges.add(in_branch)
    return bridges


# -- nonlinear oracle --------------------------------------------------------------


@dataclass
class OracleOutcome:
    """Result of re-solving the nonlinear power flow with one branch removed."""

    branch: int
    islanded: bool
    converged: bool
    delta_vmag: np.ndarray | None = None
    delta_imag: np.ndarray | None = None
    delta_p: np.ndarray | None = None
    detail: str = ""


def oracle_outage(
    case: GridCase,
    branch_idx: int,
    base: PowerFlowSolution,
    options: PowerFlowOptions | None = None,
) -> OracleOutcome:
    """Ground-truth outage impact by a warm-started nonlinear re-solve.

    Non-convergence is reported as an outcome, not raised: a contingency
    whose post-outage power flow fails to solve is itself a finding.
    """
    if not case.branches[branch_idx].closed:
        raise ValueError(f"branch {branch_idx} is open")
    if not is_connected(case, skip_branch=branch_idx):
        return OracleOutcome(branch=branch_idx, islanded=True, converged=False, detail="islands the network")

    if options is None:
        options = PowerFlowOptions(
            tol=base.options.tol,
            max_iter=2 * base.options.max_iter,
            enforce_q_limits=base.options.enforce_q_limits,
            q_limit_rounds=base.options.q_limit_rounds,
        )
    post_case = case.with_branch_open(branch_idx)
    try:
        post = solve_ac_powerflow(
            post_case,
            PowerFlowOptions(
                tol=options.tol,
                max_iter=options.max_iter,
                start="state",
                initial_state=base.state,
                enforce_q_limits=options.enforce_q_limits,
                q_limit_rounds=options.q_limit_rounds,
            ),
        )
    except PowerFlowError as exc:
        return OracleOutcome(branch=branch_idx, islanded=False, converged=False, detail=str(exc))

    base_flows = branch_power_flows(base)
    post_flows = branch_power_flows(post)
    base_imag = _from_side_current_magnitudes(base)
    post_imag = _from_side_current_magnitudes(post)
    return OracleOutcome(
        branch=branch_idx,
        islanded=False,
        converged=True,
        delta_vmag=post.v_mag - base.v_mag,
        delta_imag=post_imag - base_imag,
        delta_p=post_flows.p_from - base_flows.p_from,
    )


def _from_side_current_magnitudes(sol: PowerFlowSolution) -> np.ndarray:
    yb = sol.ybus
    v = sol.v_complex
    return np.abs(yb.yff * v[yb.from_idx] + yb.yft * v[yb.to_idx])


# -- screening ---------------------------------------------------------------------


@dataclass
class ScreenEntry:
    """One ranked outage."""

    branch: int
    from_bus: int
    to_bus: int
    severity: float  # +inf for islanding outages
    islanding: bool
    rank: int = 0
    note: str = ""
    oracle_severity: float | None = None
    oracle_islanded: bool | None = None
    oracle_converged: bool | None = None


@dataclass
class ComparisonSummary:
    """Agreement between predicted and oracle severities."""

    n_compared: int
    spearman: float | None
    top_overlap: dict[int, int]
    max_abs_error: float | None
    mean_abs_error: float | None
    insufficient: bool


@dataclass
class ScreeningReport:
    case_name: str
    metric: str
    mode: str
    top_k: int
    entries: list[ScreenEntry]
    comparison: ComparisonSummary | None = None

    def top(self) -> list[ScreenEntry]:
        return self.entries[: self.top_k]


def _rank_key(entry: ScreenEntry) -> tuple[float, int]:
    return (-entry.severity, entry.branch)


def compare_severities(
    predicted: dict[int, float],
    reference: dict[int, float],
    overlap_sizes: tuple[int, ...] = _TOP_OVERLAP_SIZES,
) -> ComparisonSummary:
    """Rank agreement between two finite severity maps over common branches."""
    common = sorted(
        b
        for b in predicted.keys() & reference.keys()
        if np.isfinite(predicted[b]) and np.isfinite(reference[b])
    )
    if len(common) < 3:
        return ComparisonSummary(
            n_compared=len(common),
            spearman=None,
            top_overlap={k: 0 for k in overlap_sizes},
            max_abs_error=None,
            mean_abs_error=None,
            insufficient=True,
        )
    pred = np.array([predicted[b] for b in common])
    ref = np.array([reference[b] for b in common])
    rho = spearmanr(pred, ref).correlation
    spearman = None if not np.isfinite(rho) else float(rho)

    def top_set(values: dict[int, float], k: int) -> set[int]:
        order = sorted(common, key=lambda b: (-values[b], b))
        return set(order[:k])

    top_overlap = {
        k: len(top_set(predicted, k) & top_set(reference, k)) for k in overlap_sizes
    }
    err = np.abs(pred - ref)
    return ComparisonSummary(
        n_compared=len(common),
        spearman=spearman,
        top_overlap=top_overlap,
        max_abs_error=float(err.max()),
        mean_abs_error=float(err.mean()),
        insufficient=False,
    )


def screen(
    case: GridCase,
    sol: PowerFlowSolution | None = None,
    lin: LinearizedSystem | None = None,
    *,
    metric: str = "vmag_inf",
    mode: str = "full",
    top_k: int = 5,
    with_oracle: bool = False,
    oracle_options: PowerFlowOptions | None = None,
    jobs: int = 1,
) -> ScreeningReport:
    """Rank all single closed-branch outages of ``case`` by predicted severity.

    Islanding outages (graph bridges) are flagged rather than evaluated and
    sort above every finite severity.  With ``with_oracle`` every outage is
    additionally re-solved nonlinearly and the report carries per-entry
    oracle severities plus a rank-agreement summary.
    """
    if metric not in SEVERITY_METRICS:
        raise ValueError(f"unknown severity metric {metric!r}; choose from {SEVERITY_METRICS}")
    if sol is None:
        sol = solve_ac_powerflow(case)
    if lin is None:
        lin = linearize_at_solution(sol, mode)
    baseline = _build_baseline(sol)
    closed = baseline.closed
    bridges = find_bridges(case)

    entries: list[ScreenEntry] = []
    for idx, br in enumerate(case.branches):
        if not br.closed:
            continue
        entry = ScreenEntry(
            branch=idx,
            from_bus=br.from_bus,
            to_bus=br.to_bus,
            severity=float("inf"),
            islanding=True,
        )
        if idx in bridges:
            entry.note = "islands the network"
        else:
            try:
                impact = evaluate_outage(sol, lin, idx, baseline)
                entry.severity = severity_from_deltas(
                    metric, impact.delta_vmag, impact.delta_imag, impact.delta_p, idx, closed
                )
                entry.islanding = False
            except IslandingError:
                entry.note = "singular transfer matrix"
        entries.append(entry)

    if with_oracle:
        work = [e.branch for e in entries]

        def run(idx: int) -> OracleOutcome:
            return oracle_outage(case, idx, sol, oracle_options)

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                outcomes = list(pool.map(run, work))
        else:
            outcomes = [run(idx) for idx in work]
        by_branch = {o.branch: o for o in outcomes}
        for entry in entries:
            o = by_branch[entry.branch]
            entry.oracle_islanded = o.islanded
            entry.oracle_converged = o.converged
            if o.islanded:
                entry.oracle_severity = float("inf")
            elif o.converged:
                entry.oracle_severity = severity_from_deltas(
                    metric, o.delta_vmag, o.delta_imag, o.delta_p, entry.branch, closed
                )

    entries.sort(key=_rank_key)
    for rank, entry in enumerate(entries, start=1):
        entry.rank = rank

    comparison = None
    if with_oracle:
        predicted = {
            e.branch: e.severity
            for e in entries
            if not e.islanding and e.oracle_converged and not e.oracle_islanded
        }
        reference = {
            e.branch: e.oracle_severity
            for e in entries
            if e.oracle_severity is not None and not e.islanding and e.oracle_converged
        }
        comparison = compare_severities(predicted, reference)

    return ScreeningReport(
        case_name=case.name,
        metric=metric,
        mode=lin.mode,
        top_k=top_k,
        entries=entries,
        comparison=comparison,
    )

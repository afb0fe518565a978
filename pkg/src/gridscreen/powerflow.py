"""Newton power flow in rectangular voltage coordinates.

The residual is the nodal current mismatch ``Y V - I_dev(V)``, written as
interleaved real/imaginary rows.  The slack bus contributes two rows pinning
its rectangular voltage, and every PV bus contributes one magnitude row
``Vr^2 + Vi^2 - v_set^2`` together with one reactive-injection variable, so
the system stays square.

Because the residual is linear in the network and only the device currents
depend on the state, the converged Jacobian *is* the operating-point network
model used by the outage sensitivity machinery; :func:`linearize_at_solution`
packages it behind a reusable LU factorization.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .case_io import AdmittanceMatrix, BusKind, GridCase, build_ybus
from .errors import DivergenceError, PowerFlowError, SingularSystemError

logger = logging.getLogger(__name__)

__all__ = [
    "PowerFlowOptions",
    "PowerFlowSolution",
    "LinearizedSystem",
    "BranchTerminalCurrents",
    "BranchFlows",
    "PowerBalance",
    "solve_ac_powerflow",
    "linearize_at_solution",
    "branch_terminal_currents",
    "branch_power_flows",
    "power_balance",
    "expand_complex_matrix",
    "state_to_complex",
    "complex_to_state",
]

# mismatch must grow this many consecutive steps before the iteration is
# declared divergent
_GROWTH_LIMIT = 3
_Q_LIMIT_MARGIN = 1e-9
_VOLTAGE_COLLAPSE = 1e-12


def state_to_complex(state: np.ndarray, n: int | None = None) -> np.ndarray:
    """Interleaved ``[V1r, V1i, V2r, ...]`` vector to complex bus voltages."""
    if n is None:
        n = len(state) // 2
    return state[0 : 2 * n : 2] + 1j * state[1 : 2 * n : 2]


def complex_to_state(v: np.ndarray) -> np.ndarray:
    state = np.empty(2 * len(v))
    state[0::2] = v.real
    state[1::2] = v.imag
    return state


def expand_complex_matrix(matrix: sp.spmatrix) -> sp.coo_matrix:
    """Real block expansion of a complex matrix under interleaved ordering.

    Each entry ``y`` becomes the 2x2 block ``[[Re y, -Im y], [Im y, Re y]]``,
    so that complex products map to products of the expanded system.
    """
    coo = matrix.tocoo()
    nnz = coo.nnz
    rows = np.repeat(2 * coo.row, 4) + np.tile([0, 0, 1, 1], nnz)
    cols = np.repeat(2 * coo.col, 4) + np.tile([0, 1, 0, 1], nnz)
    vals = np.empty(4 * nnz)
    vals[0::4] = coo.data.real
    vals[1::4] = -coo.data.imag
    vals[2::4] = coo.data.imag
    vals[3::4] = coo.data.real
    return sp.coo_matrix((vals, (rows, cols)), shape=(2 * coo.shape[0], 2 * coo.shape[1]))


@dataclass
class PowerFlowOptions:
    """Newton solver settings.

    Reactive limit enforcement is off by default: converting PV buses to PQ
    at a binding limit is a discrete regime change that the operating-point
    linear model cannot represent, so outage screening and its nonlinear
    oracle are run with the PV setpoints held.  Enable it for standalone
    operating-point studies.
    """

    tol: float = 1e-8
    max_iter: int = 25
    start: str = "flat"  # "flat" | "file" | "state"
    initial_state: np.ndarray | None = None
    enforce_q_limits: bool = False
    q_limit_rounds: int = 5


class _NewtonProblem:
    """One Newton system: a case with a fixed PV/PQ role assignment.

    ``q_pinned`` maps bus indices whose generators were moved to a reactive
    limit; those buses are treated as PQ with the pinned injection folded
    into the constant term.
    """

    def __init__(self, case: GridCase, ybus: AdmittanceMatrix, q_pinned: dict[int, float] | None = None):
        self.case = case
        self.ybus = ybus
        self.n = case.n
        self.q_pinned = dict(q_pinned or {})

        n = self.n
        self.slack = case.slack_index()
        slack_bus = case.buses[self.slack]

        p_fix = np.array([-b.p_load for b in case.buses])
        q_fix = np.array([-b.q_load for b in case.buses])
        i_fix = np.array([-complex(b.i_load_r, b.i_load_i) for b in case.buses])

        gens_at: dict[int, list] = {}
        for g in case.generators:
            gens_at.setdefault(case.bus_index(g.bus), []).append(g)

        pv: list[int] = []
        vset: list[float] = []
        qmin: list[float] = []
        qmax: list[float] = []
        for k, bus in enumerate(case.buses):
            gens = gens_at.get(k, [])
            for g in gens:
                p_fix[k] += g.p_set
            if k == self.slack:
                continue
            if bus.kind == BusKind.PV and gens and k not in self.q_pinned:
                pv.append(k)
                vset.append(gens[0].v_set)
                qmin.append(sum(g.q_min for g in gens))
                qmax.append(sum(g.q_max for g in gens))
        for k, q in self.q_pinned.items():
            q_fix[k] += q

        self.pv = np.array(pv, dtype=np.int64)
        self.pv_vset = np.array(vset)
        self.pv_qmin = np.array(qmin)
        self.pv_qmax = np.array(qmax)
        self.p_fix = p_fix
        self.q_fix = q_fix
        self.i_fix = i_fix

        v_slack = gens_at[self.slack][0].v_set if gens_at.get(self.slack) else slack_bus.v_init
        self.slack_v = v_slack * complex(math.cos(slack_bus.theta_init), math.sin(slack_bus.theta_init))

        self.size = 2 * n + len(self.pv)
        self._device_idx = np.array([k for k in range(n) if k != self.slack], dtype=np.int64)
        self._static_triplets = self._build_static_triplets()

    def _build_static_triplets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Expanded network entries for non-slack rows, plus the slack pins."""
        coo = self.ybus.matrix.tocoo()
        keep = coo.row != self.slack
        sub = sp.coo_matrix(
            (coo.data[keep], (coo.row[keep], coo.col[keep])), shape=coo.shape
        )
        net = expand_complex_matrix(sub)
        s = self.slack
        rows = np.concatenate([net.row, [2 * s, 2 * s + 1]])
        cols = np.concatenate([net.col, [2 * s, 2 * s + 1]])
        vals = np.concatenate([net.data, [1.0, 1.0]])
        return rows, cols, vals

    # -- state handling -------------------------------------------------------

    def initial_state(self, options: PowerFlowOptions) -> np.ndarray:
        n = self.n
        x = np.zeros(self.size)
        if options.start == "flat":
            v = np.ones(self.n, dtype=complex)
            v[self.pv] = self.pv_vset
            v[self.slack] = self.slack_v
            x[: 2 * n] = complex_to_state(v)
            return x
        if options.start == "file":
            v = np.array(
                [b.v_init * complex(math.cos(b.theta_init), math.sin(b.theta_init)) for b in self.case.buses]
            )
            mag = np.abs(v[self.pv])
            v[self.pv] = v[self.pv] / mag * self.pv_vset
            v[self.slack] = self.slack_v
            x[: 2 * n] = complex_to_state(v)
            x[2 * n :] = self._estimate_reactive(v)
            return x
        if options.start == "state":
            if options.initial_state is None or len(options.initial_state) < 2 * n:
                raise PowerFlowError("start='state' requires an initial_state of length >= 2n")
            x[: 2 * n] = options.initial_state[: 2 * n]
            v = state_to_complex(x, n)
            x[2 * n :] = self._estimate_reactive(v)
            return x
        raise PowerFlowError(f"unknown start mode {options.start!r}")

    def _estimate_reactive(self, v: np.ndarray) -> np.ndarray:
        if len(self.pv) == 0:
            return np.zeros(0)
        s_net = v * np.conj(self.ybus.matrix @ v)
        q_dev = s_net.imag - (v * np.conj(self.i_fix)).imag
        return q_dev[self.pv] - self.q_fix[self.pv]

    # -- residual and Jacobian -------------------------------------------------

    def _injections(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Complex voltages and total device injection currents at state ``x``."""
        n = self.n
        v = state_to_complex(x, n)
        q_bus = self.q_fix.copy()
        q_bus[self.pv] += x[2 * n :]
        s = self.p_fix + 1j * q_bus
        d = v.real * v.real + v.imag * v.imag
        if np.any(d < _VOLTAGE_COLLAPSE):
            raise DivergenceError("voltage magnitude collapsed toward zero")
        i_dev = np.conj(s / v) + self.i_fix
        return v, i_dev

    def residual(self, x: np.ndarray) -> np.ndarray:
        n = self.n
        v, i_dev = self._injections(x)
        mis = self.ybus.matrix @ v - i_dev
        f = np.empty(self.size)
        f[0 : 2 * n : 2] = mis.real
        f[1 : 2 * n : 2] = mis.imag
        s = self.slack
        f[2 * s] = v[s].real - self.slack_v.real
        f[2 * s + 1] = v[s].imag - self.slack_v.imag
        if len(self.pv):
            vp = v[self.pv]
            f[2 * n :] = vp.real**2 + vp.imag**2 - self.pv_vset**2
        return f

    def jacobian(self, x: np.ndarray) -> sp.csc_matrix:
        n = self.n
        v = state_to_complex(x, n)
        q_bus = self.q_fix.copy()
        q_bus[self.pv] += x[2 * n :]

        k = self._device_idx
        vr, vi = v.real[k], v.imag[k]
        d = vr * vr + vi * vi
        p, q = self.p_fix[k], q_bus[k]
        ir = (p * vr + q * vi) / d
        ii = (p * vi - q * vr) / d
        # partial derivatives of the injected device current wrt Vr, Vi
        di = np.empty(4 * len(k))
        di[0::4] = (p - 2 * vr * ir) / d
        di[1::4] = (q - 2 * vi * ir) / d
        di[2::4] = (-q - 2 * vr * ii) / d
        di[3::4] = (p - 2 * vi * ii) / d
        dev_rows = np.repeat(2 * k, 4) + np.tile([0, 0, 1, 1], len(k))
        dev_cols = np.repeat(2 * k, 4) + np.tile([0, 1, 0, 1], len(k))

        rows = [self._static_triplets[0], dev_rows]
        cols = [self._static_triplets[1], dev_cols]
        vals = [self._static_triplets[2], -di]

        if len(self.pv):
            kp = self.pv
            vpr, vpi = v.real[kp], v.imag[kp]
            dp = vpr * vpr + vpi * vpi
            aug = 2 * n + np.arange(len(kp))
            # reactive-injection columns
            rows.append(np.concatenate([2 * kp, 2 * kp + 1]))
            cols.append(np.concatenate([aug, aug]))
            vals.append(np.concatenate([-vpi / dp, vpr / dp]))
            # magnitude rows
            rows.append(np.concatenate([aug, aug]))
            cols.append(np.concatenate([2 * kp, 2 * kp + 1]))
            vals.append(np.concatenate([2 * vpr, 2 * vpi]))

        j = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.size, self.size),
        )
        return j.tocsc()

    def factorize(self, x: np.ndarray):
        try:
            return splu(self.jacobian(x))
        except RuntimeError as exc:
            raise SingularSystemError(f"singular power flow Jacobian: {exc}") from exc


@dataclass
class PowerFlowSolution:
    """Converged operating point of a case."""

    case: GridCase
    options: PowerFlowOptions
    state: np.ndarray  # interleaved rectangular voltages, length 2n
    q_gen: np.ndarray  # per-bus generator reactive injection
    iterations: int
    max_mismatch: float
    kinds_effective: np.ndarray  # per-bus BusKind after any Q-limit conversion
    q_limited: dict[int, float]
    ybus: AdmittanceMatrix
    _problem: _NewtonProblem = field(repr=False)

    @property
    def n(self) -> int:
        return self.case.n

    @property
    def v_complex(self) -> np.ndarray:
        return state_to_complex(self.state, self.n)

    @property
    def v_mag(self) -> np.ndarray:
        return np.abs(self.v_complex)

    @property
    def v_angle(self) -> np.ndarray:
        return np.angle(self.v_complex)

    @property
    def full_state(self) -> np.ndarray:
        """State vector including the reactive variables of the final system."""
        x = np.empty(self._problem.size)
        x[: 2 * self.n] = self.state
        x[2 * self.n :] = self.q_gen[self._problem.pv]
        return x

    @property
    def p_inj(self) -> np.ndarray:
        """Net active injection per bus (generation minus load)."""
        v = self.v_complex
        return (v * np.conj(self.ybus.matrix @ v)).real

    @property
    def q_inj(self) -> np.ndarray:
        v = self.v_complex
        return (v * np.conj(self.ybus.matrix @ v)).imag


def _solve_round(problem: _NewtonProblem, x: np.ndarray, options: PowerFlowOptions) -> tuple[np.ndarray, int, float]:
    mismatch_prev: float | None = None
    growth = 0
    for iteration in range(1, options.max_iter + 1):
        f = problem.residual(x)
        lu = problem.factorize(x)
        x = x + lu.solve(-f)
        mismatch = float(np.max(np.abs(problem.residual(x))))
        if not math.isfinite(mismatch):
            raise DivergenceError("power flow mismatch is not finite")
        if mismatch <= options.tol:
            return x, iteration, mismatch
        if mismatch_prev is not None and mismatch > mismatch_prev:
            growth += 1
            if growth >= _GROWTH_LIMIT:
                raise DivergenceError(
                    f"mismatch grew for {growth} consecutive iterations (now {mismatch:.3e})"
                )
        else:
            growth = 0
        mismatch_prev = mismatch
    raise PowerFlowError(
        f"power flow did not converge within {options.max_iter} iterations "
        f"(final mismatch {mismatch:.3e})"
    )


def solve_ac_powerflow(case: GridCase, options: PowerFlowOptions | None = None) -> PowerFlowSolution:
    """Solve the AC power flow of ``case`` by Newton iteration.

    Reactive generator limits are checked after convergence; violating PV
    buses are converted to PQ at the binding limit and the problem re-solved,
    for at most ``q_limit_rounds`` passes.  Raises a
    :class:`~gridscreen.errors.PowerFlowError` subclass on numerical failure.
    """
    options = options or PowerFlowOptions()
    case.validate()
    ybus = build_ybus(case)

    q_pinned: dict[int, float] = {}
    total_iterations = 0
    problem = _NewtonProblem(case, ybus, q_pinned)
    x = problem.initial_state(options)

    rounds_allowed = options.q_limit_rounds if options.enforce_q_limits else 0
    round_no = 0
    while True:
        x, iterations, _ = _solve_round(problem, x, options)
        total_iterations += iterations
        if len(problem.pv) == 0:
            break
        q = x[2 * problem.n :]
        low = q < problem.pv_qmin - _Q_LIMIT_MARGIN
        high = q > problem.pv_qmax + _Q_LIMIT_MARGIN
        if not (low.any() or high.any()):
            break
        if round_no >= rounds_allowed:
            if options.enforce_q_limits:
                logger.warning("reactive limits still violated after %d rounds", rounds_allowed)
            break
        round_no += 1
        for j in np.flatnonzero(low | high):
            k = int(problem.pv[j])
            pinned = float(problem.pv_qmin[j] if low[j] else problem.pv_qmax[j])
            q_pinned[k] = pinned
            logger.info("bus %s hit a reactive limit, pinned at %.6g", case.buses[k].id, pinned)
        state = x[: 2 * problem.n]
        problem = _NewtonProblem(case, ybus, q_pinned)
        x = problem.initial_state(PowerFlowOptions(start="state", initial_state=state))

    n = case.n
    v = state_to_complex(x, n)
    q_gen = np.zeros(n)
    s_net = v * np.conj(ybus.matrix @ v)
    for k, bus in enumerate(case.buses):
        if k == problem.slack or case.buses[k].kind != BusKind.PQ or k in q_pinned:
            q_gen[k] = s_net.imag[k] + bus.q_load + (v[k] * np.conj(-problem.i_fix[k])).imag
    kinds = np.array([int(b.kind) for b in case.buses])
    for k in q_pinned:
        kinds[k] = int(BusKind.PQ)

    return PowerFlowSolution(
        case=case,
        options=options,
        state=x[: 2 * n].copy(),
        q_gen=q_gen,
        iterations=total_iterations,
        max_mismatch=float(np.max(np.abs(problem.residual(x)))),
        kinds_effective=kinds,
        q_limited=dict(q_pinned),
        ybus=ybus,
        _problem=problem,
    )


# -- the converged-iteration linear model -------------------------------------


@dataclass
class LinearizedSystem:
    """LU-factorized linear network model taken at a converged solution.

    ``mode="full"`` keeps the complete Newton matrix, so constant-power and
    PV devices respond to perturbations through their linearized stamps.
    ``mode="network"`` keeps only the expanded admittance matrix with the
    devices frozen as constant current sources.  Both share the row layout:
    rows ``2k``/``2k+1`` are the current balance of bus ``k`` (replaced by
    voltage pins at the slack), and in full mode one magnitude row per PV
    bus follows.
    """

    mode: str
    case: GridCase
    n: int
    size: int
    matrix: sp.csc_matrix
    rhs: np.ndarray
    x_op: np.ndarray
    slack: int
    pv: np.ndarray
    _lu: object = field(repr=False)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self._lu.solve(rhs)

    def is_slack(self, bus: int) -> bool:
        return bus == self.slack

    def kcl_rows(self, bus: int) -> tuple[int, int] | None:
        """Row pair carrying the current balance of ``bus`` (None at the slack)."""
        if bus == self.slack:
            return None
        return 2 * bus, 2 * bus + 1

    @property
    def v_op(self) -> np.ndarray:
        return state_to_complex(self.x_op, self.n)


def linearize_at_solution(sol: PowerFlowSolution, mode: str = "full") -> LinearizedSystem:
    """Extract the linear model of the final Newton iteration.

    The right-hand side is defined as ``matrix @ x_op`` so the operating
    point solves the linear system exactly, independent of the residual
    tolerance that stopped the iteration.
    """
    problem = sol._problem
    n = sol.n
    if mode == "full":
        x_op = sol.full_state
        matrix = problem.jacobian(x_op)
        pv = problem.pv.copy()
    elif mode == "network":
        x_op = sol.state.copy()
        coo = problem.ybus.matrix.tocoo()
        keep = coo.row != problem.slack
        sub = sp.coo_matrix((coo.data[keep], (coo.row[keep], coo.col[keep])), shape=coo.shape)
        net = expand_complex_matrix(sub)
        s = problem.slack
        rows = np.concatenate([net.row, [2 * s, 2 * s + 1]])
        cols = np.concatenate([net.col, [2 * s, 2 * s + 1]])
        vals = np.concatenate([net.data, [1.0, 1.0]])
        matrix = sp.coo_matrix((vals, (rows, cols)), shape=(2 * n, 2 * n)).tocsc()
        pv = np.zeros(0, dtype=np.int64)
    else:
        raise ValueError(f"unknown linearization mode {mode!r}")

    rhs = matrix @ x_op
    try:
        lu = splu(matrix)
    except RuntimeError as exc:
        raise SingularSystemError(f"singular operating-point model: {exc}") from exc
    return LinearizedSystem(
        mode=mode,
        case=sol.case,
        n=n,
        size=matrix.shape[0],
        matrix=matrix,
        rhs=rhs,
        x_op=x_op,
        slack=problem.slack,
        pv=pv,
        _lu=lu,
    )


# -- branch quantities ---------------------------------------------------------


@dataclass
class BranchTerminalCurrents:
    """Complex currents entering one branch at its two terminals."""

    branch: int
    i_from: complex
    i_to: complex

    @property
    def vector(self) -> np.ndarray:
        """Interleaved real form ``[Ifr, Ifi, Itr, Iti]``."""
        return np.array([self.i_from.real, self.i_from.imag, self.i_to.real, self.i_to.imag])


def branch_terminal_currents(sol: PowerFlowSolution, branch_idx: int) -> BranchTerminalCurrents:
    """Currents flowing into branch ``branch_idx`` from each terminal bus."""
    case = sol.case
    if not 0 <= branch_idx < case.n_branch:
        raise ValueError(f"branch index {branch_idx} out of range")
    if not case.branches[branch_idx].closed:
        raise ValueError(f"branch {branch_idx} is open")
    yb = sol.ybus
    v = sol.v_complex
    vf = v[yb.from_idx[branch_idx]]
    vt = v[yb.to_idx[branch_idx]]
    i_from = yb.yff[branch_idx] * vf + yb.yft[branch_idx] * vt
    i_to = yb.ytf[branch_idx] * vf + yb.ytt[branch_idx] * vt
    return BranchTerminalCurrents(branch_idx, complex(i_from), complex(i_to))


@dataclass
class BranchFlows:
    """Per-branch complex power entering each terminal (zeros for open branches)."""

    p_from: np.ndarray
    q_from: np.ndarray
    p_to: np.ndarray
    q_to: np.ndarray


def branch_power_flows(sol: PowerFlowSolution) -> BranchFlows:
    yb = sol.ybus
    v = sol.v_complex
    vf = v[yb.from_idx]
    vt = v[yb.to_idx]
    s_from = vf * np.conj(yb.yff * vf + yb.yft * vt)
    s_to = vt * np.conj(yb.ytf * vf + yb.ytt * vt)
    return BranchFlows(s_from.real, s_from.imag, s_to.real, s_to.imag)


@dataclass
class PowerBalance:
    p_generation: float
    p_load: float
    p_series_loss: float
    p_shunt_loss: float

    @property
    def residual(self) -> float:
        return self.p_generation - self.p_load - self.p_series_loss - self.p_shunt_loss


def power_balance(sol: PowerFlowSolution) -> PowerBalance:
    """Active power accounting at the solution; ``residual`` should be ~0."""
    case = sol.case
    v = sol.v_complex
    i_load = np.array([complex(b.i_load_r, b.i_load_i) for b in case.buses])
    p_load = sum(b.p_load for b in case.buses) + float((v * np.conj(i_load)).real.sum())
    p_gen = float(sol.p_inj.sum()) + p_load
    flows = branch_power_flows(sol)
    p_series = float((flows.p_from + flows.p_to).sum())
    vmag2 = np.abs(v) ** 2
    p_shunt = float(sum(b.g_shunt * vmag2[k] for k, b in enumerate(case.buses)))
    return PowerBalance(p_gen, p_load, p_series, p_shunt)

"""Case model, MATPOWER-format parsing, and admittance matrix assembly.

All quantities are stored in per-unit on the system MVA base.  Branch
orientation follows the case file: the "from" side carries the off-nominal
tap of a transformer, and the phase shift is applied from "from" to "to".
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import CaseError

__all__ = [
    "BusKind",
    "Bus",
    "Branch",
    "Generator",
    "GridCase",
    "AdmittanceMatrix",
    "parse_case",
    "load_case",
    "bundled_case",
    "bundled_case_path",
    "case_to_dict",
    "case_from_dict",
    "case_to_json",
    "case_from_json",
    "build_ybus",
    "branch_admittances",
    "scale_loading",
]


class BusKind(IntEnum):
    """Bus role in the power flow problem (values match the MATPOWER type codes)."""

    PQ = 1
    PV = 2
    SLACK = 3


@dataclass
class Bus:
    """One network node.

    Loads are positive when they consume power.  ``i_load_r``/``i_load_i``
    describe an optional constant-current load component (rectangular
    coordinates, per-unit); networks whose devices are all of this kind are
    exactly linear in the rectangular voltage state.
    """

    id: int
    kind: BusKind
    p_load: float = 0.0
    q_load: float = 0.0
    g_shunt: float = 0.0
    b_shunt: float = 0.0
    v_init: float = 1.0
    theta_init: float = 0.0
    i_load_r: float = 0.0
    i_load_i: float = 0.0


@dataclass
class Branch:
    """A transmission line or transformer between two buses.

    ``tap`` is the off-nominal turns ratio on the from side (1.0 for lines)
    and ``shift`` the phase shift in radians.  ``b_charging`` is the total
    line charging susceptance, split equally between the terminals.
    """

    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    closed: bool = True


@dataclass
class Generator:
    """A machine holding `v_set` at its bus within reactive limits."""

    bus: int
    p_set: float = 0.0
    v_set: float = 1.0
    q_min: float = -math.inf
    q_max: float = math.inf


@dataclass
class GridCase:
    """An immutable-by-convention network snapshot.

    Buses keep their external ids; everything else references buses by id.
    Positional indices (used by matrices and result vectors) follow the
    order of ``buses``.
    """

    name: str
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    _index: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._index = {bus.id: i for i, bus in enumerate(self.buses)}

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    def bus_index(self, bus_id: int) -> int:
        """Positional index of the bus with external id ``bus_id``."""
        try:
            return self._index[bus_id]
        except KeyError:
            raise CaseError(f"unknown bus id {bus_id}") from None

    def slack_index(self) -> int:
        for i, bus in enumerate(self.buses):
            if bus.kind == BusKind.SLACK:
                return i
        raise CaseError("case has no slack bus")

    def generators_at(self, bus_id: int) -> list[Generator]:
        return [g for g in self.generators if g.bus == bus_id]

    def with_branch_open(self, branch_idx: int) -> "GridCase":
        """Copy of the case with one branch switched out (indices preserved)."""
        if not 0 <= branch_idx < len(self.branches):
            raise CaseError(f"branch index {branch_idx} out of range")
        branches = list(self.branches)
        branches[branch_idx] = replace(branches[branch_idx], closed=False)
        return GridCase(self.name, self.base_mva, self.buses, tuple(branches), self.generators)

    def validate(self) -> None:
        """Raise :class:`CaseError` on any structural inconsistency."""
        if self.base_mva <= 0:
            raise CaseError(f"base MVA must be positive, got {self.base_mva}")
        if not self.buses:
            raise CaseError("case has no buses")
        seen: set[int] = set()
        for bus in self.buses:
            if bus.id in seen:
                raise CaseError(f"duplicate bus id {bus.id}")
            seen.add(bus.id)
            if bus.v_init <= 0:
                raise CaseError(f"bus {bus.id}: initial voltage magnitude must be positive")
        n_slack = sum(1 for b in self.buses if b.kind == BusKind.SLACK)
        if n_slack != 1:
            raise CaseError(f"case must have exactly one slack bus, found {n_slack}")
        for i, br in enumerate(self.branches):
            for end in (br.from_bus, br.to_bus):
                if end not in seen:
                    raise CaseError(f"branch {i} references unknown bus {end}")
            if br.from_bus == br.to_bus:
                raise CaseError(f"branch {i} connects bus {br.from_bus} to itself")
            if br.closed and br.r == 0 and br.x == 0:
                raise CaseError(f"branch {i} is closed with zero impedance")
            if not br.tap > 0:
                raise CaseError(f"branch {i} has non-positive tap ratio {br.tap}")
        for g in self.generators:
            if g.bus not in seen:
                raise CaseError(f"generator references unknown bus {g.bus}")
            if g.q_min > g.q_max:
                raise CaseError(f"generator at bus {g.bus} has q_min > q_max")
            if g.v_set <= 0:
                raise CaseError(f"generator at bus {g.bus} has non-positive voltage setpoint")


# -- MATPOWER-format parsing -------------------------------------------------

# column counts for the table rows we understand
_MIN_COLS = {"bus": 13, "gen": 10, "branch": 11}

_TABLE_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[")
_BASE_RE = re.compile(r"mpc\.baseMVA\s*=\s*([0-9eE+.\-]+)\s*;")
_NAME_RE = re.compile(r"function\s+mpc\s*=\s*(\w+)")


def _strip_comment(line: str) -> str:
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def parse_case(text: str, name: str = "case") -> GridCase:
    """Parse MATPOWER-format case text into a :class:`GridCase`.

    Only the ``baseMVA``, ``bus``, ``gen`` and ``branch`` tables are read;
    other assignments are ignored.  Raises :class:`CaseError` with a line
    number on malformed input.
    """
    base_mva: float | None = None
    tables: dict[str, list[tuple[int, list[float]]]] = {"bus": [], "gen": [], "branch": []}
    current: str | None = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if current is None:
            m = _NAME_RE.search(line)
            if m and name == "case":
                name = m.group(1)
            m = _BASE_RE.search(line)
            if m:
                base_mva = float(m.group(1))
                continue
            m = _TABLE_RE.search(line)
            if m:
                table = m.group(1)
                if table in tables:
                    current = table
                continue
        else:
            if line.startswith("]"):
                current = None
                continue
            row_text = line.rstrip(";").strip()
            if not row_text:
                continue
            try:
                row = [float(tok) for tok in row_text.split()]
            except ValueError:
                raise CaseError(f"malformed numeric row in mpc.{current}", line=lineno) from None
            if len(row) < _MIN_COLS[current]:
                raise CaseError(
                    f"mpc.{current} row has {len(row)} columns, expected at least {_MIN_COLS[current]}",
                    line=lineno,
                )
            tables[current].append((lineno, row))

    if current is not None:
        raise CaseError(f"unterminated mpc.{current} table")
    if base_mva is None:
        raise CaseError("missing mpc.baseMVA")
    if not tables["bus"]:
        raise CaseError("missing or empty mpc.bus table")

    base = base_mva
    buses = []
    for lineno, row in tables["bus"]:
        code = int(row[1])
        try:
            kind = BusKind(code)
        except ValueError:
            raise CaseError(f"bus {int(row[0])} has unknown type code {code}", line=lineno) from None
        if row[7] <= 0:
            raise CaseError(f"bus {int(row[0])} has non-positive voltage magnitude", line=lineno)
        buses.append(
            Bus(
                id=int(row[0]),
                kind=kind,
                p_load=row[2] / base,
                q_load=row[3] / base,
                g_shunt=row[4] / base,
                b_shunt=row[5] / base,
                v_init=row[7],
                theta_init=math.radians(row[8]),
            )
        )

    # out-of-service units are dropped here so downstream code never sees them
    generators = []
    for lineno, row in tables["gen"]:
        if row[7] <= 0:
            continue
        generators.append(
            Generator(
                bus=int(row[0]),
                p_set=row[1] / base,
                v_set=row[5],
                q_min=row[4] / base,
                q_max=row[3] / base,
            )
        )

    branches = []
    for lineno, row in tables["branch"]:
        ratio = row[8]
        branches.append(
            Branch(
                from_bus=int(row[0]),
                to_bus=int(row[1]),
                r=row[2],
                x=row[3],
                b_charging=row[4],
                tap=1.0 if ratio == 0 else ratio,
                shift=math.radians(row[9]),
                closed=row[10] > 0,
            )
        )

    case = GridCase(name, base, tuple(buses), tuple(branches), tuple(generators))
    case.validate()
    return case


def load_case(path: str | Path) -> GridCase:
    """Read a case from a ``.m`` (MATPOWER format) or ``.json`` file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CaseError(f"cannot read case file {path}: {exc}") from exc
    if path.suffix.lower() == ".json":
        return case_from_json(text)
    return parse_case(text, name=path.stem)


def bundled_case_path(name: str) -> Path:
    """Path of a case file shipped with the package (e.g. ``"case14"``)."""
    from importlib.resources import files

    resource = files("gridscreen.data").joinpath(f"{name}.m")
    path = Path(str(resource))
    if not path.exists():
        raise CaseError(f"no bundled case named {name!r}")
    return path


def bundled_case(name: str) -> GridCase:
    return load_case(bundled_case_path(name))


# -- JSON round trip ----------------------------------------------------------

_SCHEMA_VERSION = 1


def case_to_dict(case: GridCase) -> dict:
    return {
        "schema_version": _SCHEMA_VERSION,
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": [
            {
                "id": b.id,
                "kind": int(b.kind),
                "p_load": b.p_load,
                "q_load": b.q_load,
                "g_shunt": b.g_shunt,
                "b_shunt": b.b_shunt,
                "v_init": b.v_init,
                "theta_init": b.theta_init,
                "i_load_r": b.i_load_r,
                "i_load_i": b.i_load_i,
            }
            for b in case.buses
        ],
        "branches": [
            {
                "from_bus": br.from_bus,
                "to_bus": br.to_bus,
                "r": br.r,
                "x": br.x,
                "b_charging": br.b_charging,
                "tap": br.tap,
                "shift": br.shift,
                "closed": br.closed,
            }
            for br in case.branches
        ],
        "generators": [
            {
                "bus": g.bus,
                "p_set": g.p_set,
                "v_set": g.v_set,
                "q_min": None if g.q_min == -math.inf else g.q_min,
                "q_max": None if g.q_max == math.inf else g.q_max,
            }
            for g in case.generators
        ],
    }


def case_from_dict(data: dict) -> GridCase:
    try:
        buses = tuple(
            Bus(
                id=int(b["id"]),
                kind=BusKind(int(b["kind"])),
                p_load=float(b.get("p_load", 0.0)),
                q_load=float(b.get("q_load", 0.0)),
                g_shunt=float(b.get("g_shunt", 0.0)),
                b_shunt=float(b.get("b_shunt", 0.0)),
                v_init=float(b.get("v_init", 1.0)),
                theta_init=float(b.get("theta_init", 0.0)),
                i_load_r=float(b.get("i_load_r", 0.0)),
                i_load_i=float(b.get("i_load_i", 0.0)),
            )
            for b in data["buses"]
        )
        branches = tuple(
            Branch(
                from_bus=int(br["from_bus"]),
                to_bus=int(br["to_bus"]),
                r=float(br["r"]),
                x=float(br["x"]),
                b_charging=float(br.get("b_charging", 0.0)),
                tap=float(br.get("tap", 1.0)),
                shift=float(br.get("shift", 0.0)),
                closed=bool(br.get("closed", True)),
            )
            for br in data["branches"]
        )
        generators = tuple(
            Generator(
                bus=int(g["bus"]),
                p_set=float(g.get("p_set", 0.0)),
                v_set=float(g.get("v_set", 1.0)),
                q_min=-math.inf if g.get("q_min") is None else float(g["q_min"]),
                q_max=math.inf if g.get("q_max") is None else float(g["q_max"]),
            )
            for g in data["generators"]
        )
        case = GridCase(
            name=str(data.get("name", "case")),
            base_mva=float(data["base_mva"]),
            buses=buses,
            branches=branches,
            generators=generators,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseError(f"malformed case dictionary: {exc}") from exc
    case.validate()
    return case


def case_to_json(case: GridCase) -> str:
    """Canonical JSON form: stable key order, one byte stream per case."""
    return json.dumps(case_to_dict(case), sort_keys=True, separators=(",", ":"))


def case_from_json(text: str) -> GridCase:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"invalid case JSON: {exc}") from exc
    return case_from_dict(data)


# -- admittance assembly ------------------------------------------------------

def branch_admittances(
    branch: Branch, include_charging: bool = True
) -> tuple[complex, complex, complex, complex]:
    """Two-port admittance parameters ``(yff, yft, ytf, ytt)`` of one branch.

    Terminal currents follow from the terminal voltages as
    ``I_f = yff*V_f + yft*V_t`` and ``I_t = ytf*V_f + ytt*V_t``, with both
    currents oriented into the branch.  Open branches return four zeros.
    """
    if not branch.closed:
        return 0j, 0j, 0j, 0j
    ys = 1.0 / complex(branch.r, branch.x)
    bc = 1j * branch.b_charging / 2.0 if include_charging else 0j
    tap = branch.tap * complex(math.cos(branch.shift), math.sin(branch.shift))
    yff = (ys + bc) / (branch.tap * branch.tap)
    yft = -ys / tap.conjugate()
    ytf = -ys / tap
    ytt = ys + bc
    return yff, yft, ytf, ytt


@dataclass
class AdmittanceMatrix:
    """Sparse bus admittance matrix with its per-branch stamps.

    The stamp arrays are aligned with ``case.branches`` (zeros for open
    branches) so that any branch quantity can be recovered without
    re-reading the case.
    """

    n: int
    matrix: sp.csr_matrix
    from_idx: np.ndarray
    to_idx: np.ndarray
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray
    y_shunt: np.ndarray


def build_ybus(
    case: GridCase,
    include_charging: bool = True,
    include_shunts: bool = True,
) -> AdmittanceMatrix:
    """Assemble the complex bus admittance matrix of all closed branches.

    The optional flags drop line charging and bus shunts, which yields the
    pure series connection network (every row then sums to zero when all
    taps are 1).
    """
    n = case.n
    m = len(case.branches)
    from_idx = np.fromiter((case.bus_index(br.from_bus) for br in case.branches), dtype=np.int64, count=m)
    to_idx = np.fromiter((case.bus_index(br.to_bus) for br in case.branches), dtype=np.int64, count=m)
    yff = np.zeros(m, dtype=complex)
    yft = np.zeros(m, dtype=complex)
    ytf = np.zeros(m, dtype=complex)
    ytt = np.zeros(m, dtype=complex)
    for i, br in enumerate(case.branches):
        yff[i], yft[i], ytf[i], ytt[i] = branch_admittances(br, include_charging)

    y_shunt = np.array(
        [complex(b.g_shunt, b.b_shunt) if include_shunts else 0j for b in case.buses]
    )

    rows = np.concatenate([from_idx, from_idx, to_idx, to_idx, np.arange(n)])
    cols = np.concatenate([from_idx, to_idx, from_idx, to_idx, np.arange(n)])
    vals = np.concatenate([yff, yft, ytf, ytt, y_shunt])
    matrix = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    matrix.sum_duplicates()
    return AdmittanceMatrix(
        n=n,
        matrix=matrix,
        from_idx=from_idx,
        to_idx=to_idx,
        yff=yff,
        yft=yft,
        ytf=ytf,
        ytt=ytt,
        y_shunt=y_shunt,
    )


def scale_loading(case: GridCase, factor: float) -> GridCase:
    """Uniformly scale every load and generator setpoint by ``factor``."""
    buses = tuple(
        replace(
            b,
            p_load=factor * b.p_load,
            q_load=factor * b.q_load,
            i_load_r=factor * b.i_load_r,
            i_load_i=factor * b.i_load_i,
        )
        for b in case.buses
    )
    gens = tuple(replace(g, p_set=factor * g.p_set) for g in case.generators)
    return GridCase(case.name, case.base_mva, buses, case.branches, gens)

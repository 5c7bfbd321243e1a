"""Power-grid case description, parsing and network matrices.

Case files follow the MATPOWER ``mpc`` table layout (``bus``, ``gen``,
``branch``, ``gencost``, ``baseMVA``).  Two spellings of the same tables are
accepted: a plain whitespace table format and a JSON mirror (see README).
"""
from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np


class CaseError(ValueError):
    """Raised for malformed or inconsistent case data."""


class BusKind(enum.IntEnum):
    PQ = 1
    PV = 2
    SLACK = 3


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    Pd: float
    Qd: float
    Gs: float = 0.0
    Bs: float = 0.0
    Vmin: float = 0.94
    Vmax: float = 1.06
    base_kV: float = 0.0
    area: int = 1
    Vm: float = 1.0
    Va: float = 0.0
    zone: int = 1


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    S_max: float = 0.0  # MVA, 0 means unlimited
    tap: float = 1.0
    shift: float = 0.0  # degrees
    status: bool = True
    rate_b: float = 0.0
    rate_c: float = 0.0
    angmin: float = -360.0
    angmax: float = 360.0

    @property
    def limited(self) -> bool:
        return self.status and self.S_max > 0


@dataclass(frozen=True)
class Generator:
    bus: int
    Pg: float
    Vg: float
    Pmin: float
    Pmax: float
    Qmin: float
    Qmax: float
    cost: tuple[float, float, float] = (0.0, 0.0, 0.0)  # (c2, c1, c0)
    Qg: float = 0.0
    mbase: float = 100.0
    status: int = 1


@dataclass(frozen=True)
class Case:
    baseMVA: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    name: str = field(default="case", compare=False)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def slack_index(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind == BusKind.SLACK)

    @cached_property
    def gen_bus_index(self) -> np.ndarray:
        return np.array([self.bus_index[g.bus] for g in self.generators], dtype=int)

    # array views used by the numerical modules
    @cached_property
    def Pd(self) -> np.ndarray:
        return np.array([b.Pd for b in self.buses])

    @cached_property
    def Qd(self) -> np.ndarray:
        return np.array([b.Qd for b in self.buses])

    @cached_property
    def Vmin(self) -> np.ndarray:
        return np.array([b.Vmin for b in self.buses])

    @cached_property
    def Vmax(self) -> np.ndarray:
        return np.array([b.Vmax for b in self.buses])

    @cached_property
    def Pg(self) -> np.ndarray:
        return np.array([g.Pg for g in self.generators])

    @cached_property
    def Vg(self) -> np.ndarray:
        return np.array([g.Vg for g in self.generators])

    @cached_property
    def Pmin(self) -> np.ndarray:
        return np.array([g.Pmin for g in self.generators])

    @cached_property
    def Pmax(self) -> np.ndarray:
        return np.array([g.Pmax for g in self.generators])

    @cached_property
    def Qmin(self) -> np.ndarray:
        return np.array([g.Qmin for g in self.generators])

    @cached_property
    def Qmax(self) -> np.ndarray:
        return np.array([g.Qmax for g in self.generators])

    @cached_property
    def Vgmin(self) -> np.ndarray:
        """Voltage-setpoint box of each generator, taken from its bus limits."""
        return self.Vmin[self.gen_bus_index]

    @cached_property
    def Vgmax(self) -> np.ndarray:
        return self.Vmax[self.gen_bus_index]

    @cached_property
    def cost_coeffs(self) -> np.ndarray:
        """(s, 3) array of (c2, c1, c0) per generator."""
        return np.array([g.cost for g in self.generators], dtype=float).reshape(-1, 3)

    @cached_property
    def smax(self) -> np.ndarray:
        """Branch limits in MVA, ``inf`` where no limit is enforced."""
        return np.array([br.S_max if br.limited else np.inf for br in self.branches])

    @cached_property
    def network(self) -> "Network":
        return Network.from_case(self)

    def with_operating_point(self, Pd=None, Qd=None, Pg=None, Vg=None) -> "Case":
        """Copy of the case with loads and/or generator setpoints replaced."""
        buses = self.buses
        if Pd is not None or Qd is not None:
            Pd = self.Pd if Pd is None else Pd
            Qd = self.Qd if Qd is None else Qd
            buses = tuple(replace(b, Pd=float(p), Qd=float(q)) for b, p, q in zip(self.buses, Pd, Qd))
        gens = self.generators
        if Pg is not None or Vg is not None:
            Pg = self.Pg if Pg is None else Pg
            Vg = self.Vg if Vg is None else Vg
            gens = tuple(replace(g, Pg=float(p), Vg=float(v)) for g, p, v in zip(self.generators, Pg, Vg))
        new = replace(self, buses=buses, generators=gens)
        if "network" in self.__dict__:
            # loads and setpoints do not enter the admittance matrices
            new.__dict__["network"] = self.__dict__["network"]
        return new

    def fingerprint(self) -> str:
        """sha256 over the serialized numeric content."""
        return hashlib.sha256(serialize_case(self).encode()).hexdigest()


# --------------------------------------------------------------------------
# network matrices

@dataclass(frozen=True, eq=False)
class Network:
    """Admittance matrices and incidence data for the in-service network.

    ``Yf``/``Yt`` map bus voltages to branch terminal currents for *all*
    branches (rows of out-of-service branches are zero).
    """

    ybus: np.ndarray
    yf: np.ndarray
    yt: np.ndarray
    f: np.ndarray
    t: np.ndarray
    cg: np.ndarray  # bus x gen incidence
    baseMVA: float
    slack: int
    gen_bus: np.ndarray

    @classmethod
    def from_case(cls, case: Case) -> "Network":
        n = case.n_bus
        idx = case.bus_index
        nl = len(case.branches)
        f = np.array([idx[br.from_bus] for br in case.branches], dtype=int)
        t = np.array([idx[br.to_bus] for br in case.branches], dtype=int)
        yff, yft, ytf, ytt = _branch_admittances(case.branches)
        yf = np.zeros((nl, n), dtype=complex)
        yt = np.zeros((nl, n), dtype=complex)
        rows = np.arange(nl)
        yf[rows, f] += yff
        yf[rows, t] += yft
        yt[rows, f] += ytf
        yt[rows, t] += ytt
        ybus = _assemble_ybus(case, f, t, yff, yft, ytf, ytt)
        cg = np.zeros((n, case.n_gen))
        cg[case.gen_bus_index, np.arange(case.n_gen)] = 1.0
        for a in (ybus, yf, yt, cg):
            a.setflags(write=False)
        return cls(ybus, yf, yt, f, t, cg, case.baseMVA, case.slack_index, case.gen_bus_index)


def _branch_admittances(branches):
    nl = len(branches)
    yff = np.zeros(nl, dtype=complex)
    yft = np.zeros(nl, dtype=complex)
    ytf = np.zeros(nl, dtype=complex)
    ytt = np.zeros(nl, dtype=complex)
    for k, br in enumerate(branches):
        if not br.status:
            continue
        if br.r == 0 and br.x == 0:
            raise CaseError(f"branch {br.from_bus}-{br.to_bus} has zero impedance")
        ys = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b_charging
        tap = (br.tap or 1.0) * np.exp(1j * np.deg2rad(br.shift))
        ytt[k] = ys + ysh
        yff[k] = ytt[k] / (tap * np.conj(tap))
        yft[k] = -ys / np.conj(tap)
        ytf[k] = -ys / tap
    return yff, yft, ytf, ytt


def _assemble_ybus(case, f, t, yff, yft, ytf, ytt):
    n = case.n_bus
    ybus = np.zeros((n, n), dtype=complex)
    np.add.at(ybus, (f, f), yff)
    np.add.at(ybus, (f, t), yft)
    np.add.at(ybus, (t, f), ytf)
    np.add.at(ybus, (t, t), ytt)
    ysh = np.array([complex(b.Gs, b.Bs) for b in case.buses]) / case.baseMVA
    ybus[np.diag_indices(n)] += ysh
    return ybus


def build_ybus(case: Case) -> np.ndarray:
    """Complex bus admittance matrix (p.u.), out-of-service branches excluded."""
    return np.array(case.network.ybus)


# --------------------------------------------------------------------------
# validation

def validate_case(case: Case) -> list[str]:
    """Return every invariant breach found; an empty list means the case is valid."""
    problems = []
    ids = [b.id for b in case.buses]
    known = set(ids)
    if len(known) != len(ids):
        problems.append("duplicate bus ids")
    if len(case.buses) < 2:
        problems.append("case needs at least 2 buses")
    if not case.generators:
        problems.append("case needs at least 1 generator")
    if case.baseMVA <= 0:
        problems.append("baseMVA must be positive")
    n_slack = sum(b.kind == BusKind.SLACK for b in case.buses)
    if n_slack == 0:
        problems.append("no slack bus")
    elif n_slack > 1:
        problems.append("multiple slack buses")
    for b in case.buses:
        if not b.Vmin < b.Vmax:
            problems.append(f"bus {b.id}: Vmin >= Vmax")
        if not (np.isfinite(b.Pd) and np.isfinite(b.Qd)):
            problems.append(f"bus {b.id}: non-finite load")
    kinds = {b.id: b.kind for b in case.buses}
    for k, br in enumerate(case.branches):
        tag = f"branch {k} ({br.from_bus}-{br.to_bus})"
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                problems.append(f"{tag}: references undefined bus {end}")
        if br.from_bus == br.to_bus:
            problems.append(f"{tag}: from bus equals to bus")
        if br.r == 0 and br.x == 0:
            problems.append(f"{tag}: zero impedance")
        if br.S_max < 0:
            problems.append(f"{tag}: negative flow limit")
    for k, g in enumerate(case.generators):
        tag = f"generator {k} (bus {g.bus})"
        if g.bus not in known:
            problems.append(f"{tag}: references undefined bus {g.bus}")
        elif kinds[g.bus] == BusKind.PQ:
            problems.append(f"{tag}: sits on a PQ bus")
        if g.Pmin > g.Pmax:
            problems.append(f"{tag}: Pmin > Pmax")
        if g.Qmin > g.Qmax:
            problems.append(f"{tag}: Qmin > Qmax")
        if not all(np.isfinite(g.cost)):
            problems.append(f"{tag}: non-finite cost coefficients")
        elif g.cost[0] < 0:
            problems.append(f"{tag}: negative quadratic cost coefficient")
        if g.status != 1:
            problems.append(f"{tag}: out-of-service generators are not supported")
    return problems


def check_case(case: Case) -> Case:
    problems = validate_case(case)
    if problems:
        raise CaseError("invalid case: " + "; ".join(problems))
    return case


def override_branch_limit(case: Case, from_bus: int, to_bus: int, s_max: float) -> Case:
    """Return a copy of ``case`` with the flow limit of branch ``from_bus``-``to_bus`` set to ``s_max`` MVA.

    The branch is matched in either orientation; parallel circuits all get the new limit.
    """
    hits = [
        k for k, br in enumerate(case.branches)
        if {br.from_bus, br.to_bus} == {from_bus, to_bus}
    ]
    if not hits:
        raise CaseError(f"no branch between buses {from_bus} and {to_bus}")
    branches = list(case.branches)
    for k in hits:
        branches[k] = replace(branches[k], S_max=float(s_max))
    return replace(case, branches=tuple(branches))


# --------------------------------------------------------------------------
# parsing / serialization

_SECTIONS = ("baseMVA", "bus", "gen", "branch", "gencost")
_MIN_COLS = {"bus": 13, "gen": 10, "branch": 11, "gencost": 4}
_NUM = re.compile(r"^[-+0-9.eEinfINFnaN]+$")


def _tables_from_text(text: str) -> dict[str, list[list[float]]]:
    tables: dict[str, list[list[float]]] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("%", 1)[0].split("#", 1)[0].strip()
        if not line:
            continue
        # MATPOWER .m spelling: "mpc.bus = [" ... "];"
        m = re.match(r"^(?:mpc\.)?(\w+)\s*(?:=\s*\[?)?\s*(.*)$", line)
        head = m.group(1) if m else None
        if head in _SECTIONS and not _NUM.match(head):
            section = head
            tables.setdefault(section, [])
            line = m.group(2)
        elif line.startswith("function") or line.startswith("mpc.version") or head == "version":
            section = None
            continue
        line = line.replace("[", " ").replace("]", " ").replace(";", " ").replace(",", " ").strip()
        if not line:
            continue
        if section is None:
            raise CaseError(f"line {lineno}: data outside of any section: {raw.strip()!r}")
        try:
            row = [float(tok) for tok in line.split()]
        except ValueError:
            raise CaseError(f"line {lineno}: syntax error: {raw.strip()!r}") from None
        tables[section].append(row)
    return tables


def _case_from_tables(tables: dict, name: str = "case") -> Case:
    for sec in _SECTIONS:
        if sec not in tables or not tables[sec]:
            raise CaseError(f"missing required section {sec!r}")
    base = float(np.ravel(tables["baseMVA"])[0])
    tables = {sec: [[float(v) for v in row] for row in tables[sec]] for sec in _MIN_COLS}
    for sec, ncol in _MIN_COLS.items():
        for k, row in enumerate(tables[sec]):
            if len(row) < ncol:
                raise CaseError(f"{sec} row {k}: expected at least {ncol} columns, got {len(row)}")
    buses = tuple(
        Bus(id=int(r[0]), kind=_bus_kind(r[1], int(r[0])), Pd=r[2], Qd=r[3], Gs=r[4], Bs=r[5],
            area=int(r[6]), Vm=r[7], Va=r[8], base_kV=r[9], zone=int(r[10]), Vmax=r[11], Vmin=r[12])
        for r in tables["bus"]
    )
    costs = [_poly_cost(r, k) for k, r in enumerate(tables["gencost"])]
    if len(costs) < len(tables["gen"]):
        raise CaseError("gencost must have one row per generator")
    gens = tuple(
        Generator(bus=int(r[0]), Pg=r[1], Qg=r[2], Qmax=r[3], Qmin=r[4], Vg=r[5], mbase=r[6],
                  status=int(r[7]), Pmax=r[8], Pmin=r[9], cost=costs[k])
        for k, r in enumerate(tables["gen"])
    )
    branches = tuple(
        Branch(from_bus=int(r[0]), to_bus=int(r[1]), r=r[2], x=r[3], b_charging=r[4], S_max=r[5],
               rate_b=r[6], rate_c=r[7], tap=r[8] if r[8] != 0 else 1.0, shift=r[9],
               status=bool(r[10]), angmin=r[11] if len(r) > 11 else -360.0,
               angmax=r[12] if len(r) > 12 else 360.0)
        for r in tables["branch"]
    )
    case = Case(baseMVA=base, buses=buses, branches=branches, generators=gens, name=name)
    return check_case(case)


def _bus_kind(code: float, bus_id: int) -> BusKind:
    try:
        return BusKind(int(code))
    except ValueError:
        raise CaseError(f"bus {bus_id}: unsupported bus type {code}") from None


def _poly_cost(row, k) -> tuple[float, float, float]:
    model, ncost = int(row[0]), int(row[3])
    if model != 2:
        raise CaseError(f"gencost row {k}: only polynomial costs (model 2) are supported")
    if ncost > 3:
        raise CaseError(f"gencost row {k}: polynomial degree above 2 is not supported")
    coeffs = list(row[4:4 + ncost])
    if len(coeffs) != ncost:
        raise CaseError(f"gencost row {k}: expected {ncost} coefficients")
    coeffs = [0.0] * (3 - ncost) + coeffs
    return (float(coeffs[0]), float(coeffs[1]), float(coeffs[2]))


def parse_case(text: str, name: str = "case") -> Case:
    """Parse case text (table format, MATPOWER .m syntax or JSON) into a validated Case."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            tables = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CaseError(f"line {exc.lineno}: syntax error: {exc.msg}") from None
        tables = {k: v for k, v in tables.items() if k in _SECTIONS}
        if "baseMVA" in tables:
            tables["baseMVA"] = [[tables["baseMVA"]]]
        return _case_from_tables(tables, name)
    return _case_from_tables(_tables_from_text(text), name)


def load_case(path) -> Case:
    path = Path(path)
    return parse_case(path.read_text(), name=path.stem)


def case14() -> Case:
    """The standard IEEE 14-bus system shipped with the package."""
    text = resources.files("gridppo.data").joinpath("case14.txt").read_text()
    return parse_case(text, name="case14")


def modified_case14(s_max_45: float = 32.0) -> Case:
    """IEEE 14-bus with the line 4-5 flow limit tightened to ``s_max_45`` MVA."""
    return replace(override_branch_limit(case14(), 4, 5, s_max_45), name="case14_mod")


def case_tables(case: Case) -> dict:
    bus = [[b.id, int(b.kind), b.Pd, b.Qd, b.Gs, b.Bs, b.area, b.Vm, b.Va, b.base_kV, b.zone,
            b.Vmax, b.Vmin] for b in case.buses]
    gen = [[g.bus, g.Pg, g.Qg, g.Qmax, g.Qmin, g.Vg, g.mbase, g.status, g.Pmax, g.Pmin]
           for g in case.generators]
    branch = [[br.from_bus, br.to_bus, br.r, br.x, br.b_charging, br.S_max, br.rate_b, br.rate_c,
               br.tap, br.shift, int(br.status), br.angmin, br.angmax] for br in case.branches]
    gencost = [[2, 0, 0, 3, *g.cost] for g in case.generators]
    return {"baseMVA": case.baseMVA, "bus": bus, "gen": gen, "branch": branch, "gencost": gencost}


def serialize_case(case: Case, fmt: str = "table") -> str:
    """Inverse of :func:`parse_case` (``fmt`` is ``"table"`` or ``"json"``)."""
    tables = case_tables(case)
    if fmt == "json":
        return json.dumps(tables, indent=1)
    out = ["baseMVA", repr(float(case.baseMVA))]
    for sec in ("bus", "gen", "branch", "gencost"):
        out.append(sec)
        out.extend(" ".join(repr(float(v)) if isinstance(v, float) else str(v) for v in row)
                   for row in tables[sec])
    return "\n".join(out) + "\n"

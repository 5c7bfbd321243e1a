"""Newton-Raphson AC power flow with generator reactive-limit enforcement."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._derivatives import branch_power, dsbus_dv, power_injection
from .grid_model import BusKind, Case, check_case

PF_TOL = 1e-10
MAX_NR_ITER = 20
MAX_SWITCH_PASSES = 6
VIOLATION_TOL = 1e-4


@dataclass
class PfSolution:
    """Result of :func:`solve_pf`.

    ``converged`` False is the *Diverged* outcome; ``message`` says why.
    Flows are apparent-power magnitudes in MVA, injections in MW / MVAr.
    """

    V: np.ndarray
    Pg_out: np.ndarray
    Qg_out: np.ndarray
    Sf: np.ndarray
    St: np.ndarray
    iterations: int
    converged: bool
    message: str = ""
    switched: list[int] = field(default_factory=list)  # bus indices moved PV -> PQ

    @property
    def Vm(self) -> np.ndarray:
        return np.abs(self.V)

    @property
    def Va(self) -> np.ndarray:
        return np.angle(self.V)


@dataclass
class ViolationReport:
    """Limit excesses of a converged power-flow solution (all entries >= 0).

    ``branch`` has one row per branch and columns (from end, to end).
    """

    pgen: np.ndarray
    vbus: np.ndarray
    branch: np.ndarray

    @property
    def empty(self) -> bool:
        return not (self.pgen.any() or self.vbus.any() or self.branch.any())

    def totals(self) -> tuple[float, float, float]:
        return float(self.pgen.sum()), float(self.vbus.sum()), float(self.branch.sum())

    def categories(self) -> list[str]:
        names = []
        if self.pgen.any():
            names.append("pgen")
        if self.vbus.any():
            names.append("vbus")
        if self.branch.any():
            names.append("branch")
        return names


def bus_types(case: Case):
    """Indices of (slack, pv, pq) buses. PV buses without a generator are treated as PQ."""
    has_gen = np.zeros(case.n_bus, dtype=bool)
    has_gen[case.gen_bus_index] = True
    kinds = np.array([b.kind for b in case.buses])
    ref = np.flatnonzero(kinds == BusKind.SLACK)
    pv = np.flatnonzero((kinds == BusKind.PV) & has_gen)
    pq = np.setdiff1d(np.arange(case.n_bus), np.concatenate([ref, pv]))
    return ref, pv, pq


def scheduled_injection(case: Case, Pg=None, Qg=None) -> np.ndarray:
    """Net complex injection per bus in p.u. (generation minus load)."""
    Pg = case.Pg if Pg is None else Pg
    Qg = np.array([g.Qg for g in case.generators]) if Qg is None else Qg
    net = case.network
    return (net.cg @ (Pg + 1j * Qg) - (case.Pd + 1j * case.Qd)) / case.baseMVA


def _mismatch(ybus, V, sbus, pvpq, pq):
    mis = power_injection(ybus, V) - sbus
    return np.concatenate([mis[pvpq].real, mis[pq].imag])


def _jacobian(ybus, V, pvpq, pq):
    dva, dvm = dsbus_dv(ybus, V)
    n = len(V)
    full = np.empty((2 * n, 2 * n))
    full[:n, :n] = dva.real
    full[:n, n:] = dvm.real
    full[n:, :n] = dva.imag
    full[n:, n:] = dvm.imag
    sel = np.concatenate([pvpq, n + pq])
    return full[np.ix_(sel, sel)]


def compute_mismatch(case: Case, V) -> np.ndarray:
    """Power mismatch ``[P_inj - P_sch (pv+pq), Q_inj - Q_sch (pq)]`` in p.u."""
    ref, pv, pq = bus_types(case)
    pvpq = np.concatenate([pv, pq])
    return _mismatch(case.network.ybus, np.asarray(V, dtype=complex), scheduled_injection(case), pvpq, pq)


def compute_jacobian(case: Case, V) -> np.ndarray:
    """Polar NR Jacobian of :func:`compute_mismatch` w.r.t. (Va[pv+pq], Vm[pq])."""
    ref, pv, pq = bus_types(case)
    pvpq = np.concatenate([pv, pq])
    return _jacobian(case.network.ybus, np.asarray(V, dtype=complex), pvpq, pq)


def branch_flows(case: Case, V) -> tuple[np.ndarray, np.ndarray]:
    """Apparent power (MVA) at the from and to end of every branch."""
    net = case.network
    V = np.asarray(V, dtype=complex)
    sf = branch_power(net.yf, net.f, V) * case.baseMVA
    st = branch_power(net.yt, net.t, V) * case.baseMVA
    return np.abs(sf), np.abs(st)


def newton(ybus, V0, sbus, pv, pq, tol=PF_TOL, max_iter=MAX_NR_ITER):
    """Plain NR iteration. Returns (V, converged, iterations, message)."""
    V = V0.copy()
    Va = np.angle(V)
    Vm = np.abs(V)
    pvpq = np.concatenate([pv, pq])
    npvpq = len(pvpq)
    F = _mismatch(ybus, V, sbus, pvpq, pq)
    it = 0
    while True:
        if not np.all(np.isfinite(F)):
            return V, False, it, "non-finite mismatch"
        if F.size == 0 or np.max(np.abs(F)) <= tol:
            return V, True, it, ""
        if it >= max_iter:
            return V, False, it, f"no convergence in {max_iter} iterations"
        J = _jacobian(ybus, V, pvpq, pq)
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            return V, False, it, "singular Jacobian"
        it += 1
        Va[pvpq] += dx[:npvpq]
        Vm[pq] += dx[npvpq:]
        V = Vm * np.exp(1j * Va)
        F = _mismatch(ybus, V, sbus, pvpq, pq)


def solve_pf(case: Case, V0=None, *, enforce_q_lims: bool = True, tol: float = PF_TOL,
             max_iter: int = MAX_NR_ITER, max_passes: int = MAX_SWITCH_PASSES,
             validate: bool = True) -> PfSolution:
    """Solve the AC power flow of ``case``.

    Generator ``Vg`` fixes PV and slack magnitudes (slack angle 0) and
    non-slack ``Pg`` is taken as scheduled.  With ``enforce_q_lims``, PV buses
    whose reactive requirement leaves the aggregate [Qmin, Qmax] of their
    generators are clamped to the limit and re-solved as PQ buses; switching
    is one-way.  Slack generators are exempt from reactive limits.

    Divergence (iteration budget, singular Jacobian, exhausted switching
    passes) is returned as a solution with ``converged=False``.
    """
    if validate:
        check_case(case)
    net = case.network
    ybus = net.ybus
    base = case.baseMVA
    ref, pv, pq = bus_types(case)
    gbus = case.gen_bus_index
    n, ng = case.n_bus, case.n_gen

    V = np.ones(n, dtype=complex) if V0 is None else np.asarray(V0, dtype=complex).copy()
    Vm = np.abs(V)
    controlled = np.concatenate([ref, pv])
    # the first generator on a bus sets its magnitude
    for k in range(ng - 1, -1, -1):
        if gbus[k] in controlled:
            Vm[gbus[k]] = case.Vg[k]
    V = Vm * np.exp(1j * np.angle(V))

    Qd = case.Qd.copy()
    fixed_q = np.full(ng, np.nan)  # MVAr of generators clamped at a limit
    switched: list[int] = []
    total_it = 0
    passes = 0
    while True:
        qfix = np.where(np.isnan(fixed_q), 0.0, fixed_q)
        sbus = (net.cg @ (case.Pg + 1j * qfix) - (case.Pd + 1j * Qd)) / base
        V, ok, it, msg = newton(ybus, V, sbus, pv, pq, tol, max_iter)
        total_it += it
        if not ok:
            return _diverged(case, V, total_it, msg, switched)
        Pg, Qg = _gen_outputs(case, V, ref, fixed_q)
        if not enforce_q_lims or len(pv) == 0:
            break
        over, under = _q_violations(case, Qg, pv)
        if not over and not under:
            break
        if passes >= max_passes:
            return _diverged(case, V, total_it, "reactive-limit switching budget exhausted", switched)
        passes += 1
        for b, lim in [(b, "max") for b in over] + [(b, "min") for b in under]:
            on_bus = np.flatnonzero(gbus == b)
            fixed_q[on_bus] = case.Qmax[on_bus] if lim == "max" else case.Qmin[on_bus]
            switched.append(int(b))
        pv = np.setdiff1d(pv, over + under)
        pq = np.sort(np.concatenate([pq, np.array(over + under, dtype=int)]))

    sf, st = branch_flows(case, V)
    return PfSolution(V=V, Pg_out=Pg, Qg_out=Qg, Sf=sf, St=st, iterations=total_it,
                      converged=True, switched=switched)


def _gen_outputs(case: Case, V, ref, fixed_q):
    base = case.baseMVA
    gbus = case.gen_bus_index
    s = power_injection(case.network.ybus, V) * base + (case.Pd + 1j * case.Qd)
    Pg = case.Pg.copy()
    Qg = np.zeros(case.n_gen)
    for b in np.unique(gbus):
        on_bus = np.flatnonzero(gbus == b)
        if b in ref:
            # slack: the first generator on the bus absorbs the balance
            Pg[on_bus[0]] = s[b].real - Pg[on_bus[1:]].sum()
        if not np.isnan(fixed_q[on_bus]).any():
            Qg[on_bus] = fixed_q[on_bus]
            continue
        qmin, qmax = case.Qmin[on_bus], case.Qmax[on_bus]
        rng = qmax - qmin
        if len(on_bus) == 1:
            Qg[on_bus] = s[b].imag
        elif rng.sum() > 0:
            Qg[on_bus] = qmin + (s[b].imag - qmin.sum()) * rng / rng.sum()
        else:
            Qg[on_bus] = s[b].imag / len(on_bus)
    return Pg, Qg


def _q_violations(case: Case, Qg, pv, tol=1e-6):
    gbus = case.gen_bus_index
    over, under = [], []
    for b in pv:
        on_bus = gbus == b
        q = Qg[on_bus].sum()
        if q > case.Qmax[on_bus].sum() + tol:
            over.append(int(b))
        elif q < case.Qmin[on_bus].sum() - tol:
            under.append(int(b))
    return over, under


def _diverged(case, V, iterations, message, switched):
    nan_g = np.full(case.n_gen, np.nan)
    nan_l = np.full(len(case.branches), np.nan)
    return PfSolution(V=V, Pg_out=nan_g, Qg_out=nan_g.copy(), Sf=nan_l, St=nan_l.copy(),
                      iterations=iterations, converged=False, message=message, switched=switched)


def check_violations(case: Case, sol: PfSolution, tol: float = VIOLATION_TOL) -> ViolationReport:
    """Limit excesses of a converged solution; excesses at or below ``tol`` are dropped.

    Units: MW for generator active power, p.u. for bus voltage magnitude,
    MVA for branch flows.  Unlimited and out-of-service branches are skipped.
    """
    if not sol.converged:
        raise ValueError("check_violations needs a converged power-flow solution")
    pg = sol.Pg_out
    pgen = np.maximum(0.0, np.maximum(pg - case.Pmax, case.Pmin - pg))
    vm = np.abs(sol.V)
    vbus = np.maximum(0.0, np.maximum(vm - case.Vmax, case.Vmin - vm))
    smax = case.smax
    limited = np.isfinite(smax)
    branch = np.zeros((len(case.branches), 2))
    branch[limited, 0] = np.maximum(0.0, sol.Sf[limited] - smax[limited])
    branch[limited, 1] = np.maximum(0.0, sol.St[limited] - smax[limited])
    for a in (pgen, vbus, branch):
        a[a <= tol] = 0.0
    return ViolationReport(pgen=pgen, vbus=vbus, branch=branch)

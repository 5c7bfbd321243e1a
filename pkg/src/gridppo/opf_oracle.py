"""Full AC optimal power flow solved with the primal-dual interior-point method.

Decision vector (p.u.): ``x = [Va (n), Vm (n), Pg (s), Qg (s)]``.  The slack
angle is pinned by an equality row.  Constraints: complex power balance at
every bus, squared apparent-power limits on both ends of limited branches,
and box limits on Vm, Pg and Qg.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ._derivatives import bilinear_hessian, dsbr_dv, dsbus_dv, power_injection
from .grid_model import Case, check_case
from .pdipm import PdipmOptions, PdipmResult, pdipm

COST_SCALE = 1e-4  # keeps the objective O(1) for the barrier iteration


class OpfStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    ITER_LIMIT = "IterLimit"


@dataclass
class OpfSolution:
    Pg_opt: np.ndarray  # MW
    Qg_opt: np.ndarray  # MVAr
    Vg_opt: np.ndarray  # p.u., magnitude at each generator bus
    V_opt: np.ndarray  # complex bus voltages
    objective: float  # $/h
    status: OpfStatus
    iterations: int
    kkt_residual: float  # scaled stationarity residual at exit
    feas_residual: float
    lam: np.ndarray | None = None
    mu: np.ndarray | None = None

    @property
    def optimal(self) -> bool:
        return self.status is OpfStatus.OPTIMAL


def gen_cost(case: Case, Pg) -> float:
    """Total polynomial generation cost ($/h) at active outputs ``Pg`` (MW)."""
    Pg = np.asarray(Pg, dtype=float)
    if Pg.shape != (case.n_gen,):
        raise ValueError(f"expected {case.n_gen} generator outputs, got shape {Pg.shape}")
    c = case.cost_coeffs
    return float(np.sum((c[:, 0] * Pg + c[:, 1]) * Pg + c[:, 2]))


class OpfProblem:
    """Callbacks describing the AC OPF of one case for :func:`pdipm`."""

    def __init__(self, case: Case):
        self.case = case
        net = case.network
        self.net = net
        self.n = n = case.n_bus
        self.ng = ng = case.n_gen
        self.nx = 2 * n + 2 * ng
        self.base = base = case.baseMVA
        self.iva = np.arange(n)
        self.ivm = n + np.arange(n)
        self.ipg = 2 * n + np.arange(ng)
        self.iqg = 2 * n + ng + np.arange(ng)
        self.sd = (case.Pd + 1j * case.Qd) / base

        lim = np.flatnonzero(np.isfinite(case.smax))
        self.lim = lim
        self.yf = net.yf[lim]
        self.yt = net.yt[lim]
        self.f = net.f[lim]
        self.t = net.t[lim]
        self.flow_max2 = (case.smax[lim] / base) ** 2

        # box limits on (Vm, Pg, Qg) as rows of h
        box_idx = np.concatenate([self.ivm, self.ipg, self.iqg])
        lo = np.concatenate([case.Vmin, case.Pmin / base, case.Qmin / base])
        hi = np.concatenate([case.Vmax, case.Pmax / base, case.Qmax / base])
        self.box_idx, self.box_lo, self.box_hi = box_idx, lo, hi
        nb = len(box_idx)
        self.dh_box = np.zeros((2 * nb, self.nx))
        self.dh_box[np.arange(nb), box_idx] = -1.0
        self.dh_box[nb + np.arange(nb), box_idx] = 1.0

        c = case.cost_coeffs
        self.c2 = c[:, 0] * base**2 * COST_SCALE
        self.c1 = c[:, 1] * base * COST_SCALE
        self.c0 = c[:, 2] * COST_SCALE

        self.dg_lin = np.zeros((2 * n + 1, self.nx))
        self.dg_lin[:n, self.ipg] = -net.cg
        self.dg_lin[n:2 * n, self.iqg] = -net.cg
        self.dg_lin[2 * n, net.slack] = 1.0

    def voltage(self, x):
        return x[self.ivm] * np.exp(1j * x[self.iva])

    def x0(self):
        """Flat start at the midpoint of every box, angles zero."""
        x = np.zeros(self.nx)
        x[self.box_idx] = 0.5 * (self.box_lo + self.box_hi)
        return x

    def objective(self, x):
        pg = x[self.ipg]
        f = np.sum((self.c2 * pg + self.c1) * pg + self.c0)
        df = np.zeros(self.nx)
        df[self.ipg] = 2 * self.c2 * pg + self.c1
        return f, df

    def constraints(self, x):
        n = self.n
        V = self.voltage(x)
        sg = self.net.cg @ (x[self.ipg] + 1j * x[self.iqg])
        mis = power_injection(self.net.ybus, V) - sg + self.sd
        g = np.concatenate([mis.real, mis.imag, [x[self.net.slack]]])
        dva, dvm = dsbus_dv(self.net.ybus, V)
        dg = self.dg_lin.copy()
        dg[:n, :n] = dva.real
        dg[:n, n:2 * n] = dvm.real
        dg[n:2 * n, :n] = dva.imag
        dg[n:2 * n, n:2 * n] = dvm.imag

        hs, dhs = [], []
        for yb, ends in ((self.yf, self.f), (self.yt, self.t)):
            s, sva, svm = dsbr_dv(yb, ends, V)
            hs.append(np.abs(s) ** 2 - self.flow_max2)
            d = np.zeros((len(s), self.nx))
            d[:, :n] = 2 * (s.real[:, None] * sva.real + s.imag[:, None] * sva.imag)
            d[:, n:2 * n] = 2 * (s.real[:, None] * svm.real + s.imag[:, None] * svm.imag)
            dhs.append(d)
        xb = x[self.box_idx]
        h = np.concatenate(hs + [self.box_lo - xb, xb - self.box_hi])
        dh = np.vstack(dhs + [self.dh_box])
        return h, g, dh, dg

    def hessian(self, x, lam, mu):
        n = self.n
        V = self.voltage(x)
        H = np.zeros((self.nx, self.nx))
        H[self.ipg, self.ipg] = 2 * self.c2
        # power balance: lamP.Re(S) + lamQ.Im(S) = Re(sum (lamP - j lamQ) S)
        weights = lam[:n] - 1j * lam[n:2 * n]
        hv = bilinear_hessian(weights[:, None] * np.conj(self.net.ybus), V).real
        nl = len(self.lim)
        for k, (yb, ends) in enumerate(((self.yf, self.f), (self.yt, self.t))):
            m = mu[k * nl:(k + 1) * nl]
            if not m.any():
                continue
            s, sva, svm = dsbr_dv(yb, ends, V)
            jr = np.hstack([sva.real, svm.real])
            ji = np.hstack([sva.imag, svm.imag])
            hv += 2 * (jr.T @ (m[:, None] * jr) + ji.T @ (m[:, None] * ji))
            W = np.zeros((n, n), dtype=complex)
            np.add.at(W, ends, (m * np.conj(s))[:, None] * np.conj(yb))
            hv += 2 * bilinear_hessian(W, V).real
        H[:2 * n, :2 * n] += hv
        return H


def solve_opf(case: Case, opts: PdipmOptions | None = None, x0=None) -> OpfSolution:
    """Minimize total generation cost of ``case`` subject to the full AC constraints."""
    check_case(case)
    prob = OpfProblem(case)
    res = pdipm(prob.objective, prob.constraints, prob.hessian,
                prob.x0() if x0 is None else x0, opts)
    return _solution(prob, res)


def _solution(prob: OpfProblem, res: PdipmResult) -> OpfSolution:
    case = prob.case
    x = res.x
    V = prob.voltage(x)
    pg = x[prob.ipg] * prob.base
    qg = x[prob.iqg] * prob.base
    if res.converged:
        status = OpfStatus.OPTIMAL
    elif res.message == "iteration limit" and res.feascond < 1e-3:
        status = OpfStatus.ITER_LIMIT
    else:
        status = OpfStatus.INFEASIBLE
    obj = gen_cost(case, pg) if np.all(np.isfinite(pg)) else float("nan")
    return OpfSolution(Pg_opt=pg, Qg_opt=qg, Vg_opt=np.abs(V[case.gen_bus_index]), V_opt=V,
                       objective=obj, status=status, iterations=res.iterations,
                       kkt_residual=res.gradcond, feas_residual=res.feascond,
                       lam=res.lam, mu=res.mu)

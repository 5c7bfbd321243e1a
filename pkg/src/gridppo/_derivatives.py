"""Polar-coordinate derivatives of bus injections and branch flows.

All matrices are dense; the intended networks are small (tens of buses).
Column order of every Jacobian is (angles, magnitudes), each of length n.
"""
import numpy as np


def power_injection(ybus, V):
    return V * np.conj(ybus @ V)


def dsbus_dv(ybus, V):
    """Return (dS/dVa, dS/dVm) of the complex bus injections."""
    ibus = ybus @ V
    vnorm = V / np.abs(V)
    dva = 1j * V[:, None] * np.conj(np.diag(ibus) - ybus * V[None, :])
    dvm = V[:, None] * np.conj(ybus * vnorm[None, :]) + np.diag(np.conj(ibus) * vnorm)
    return dva, dvm


def branch_power(yf, f, V):
    """Complex power entering each branch at the buses indexed by ``f`` (p.u.)."""
    return V[f] * np.conj(yf @ V)


def dsbr_dv(yf, f, V):
    """Return (S, dS/dVa, dS/dVm) for branch-end flows with terminal buses ``f``."""
    nl, n = yf.shape
    rows = np.arange(nl)
    i_br = yf @ V
    vf = V[f]
    vnorm = V / np.abs(V)
    cf_v = np.zeros((nl, n), dtype=complex)
    cf_v[rows, f] = V[f]
    cf_vn = np.zeros((nl, n), dtype=complex)
    cf_vn[rows, f] = vnorm[f]
    s = vf * np.conj(i_br)
    dva = 1j * (np.conj(i_br)[:, None] * cf_v - vf[:, None] * np.conj(yf * V[None, :]))
    dvm = vf[:, None] * np.conj(yf * vnorm[None, :]) + np.conj(i_br)[:, None] * cf_vn
    return s, dva, dvm


def bilinear_hessian(W, V):
    """Hessian of ``sum_ik W[i,k] V_i conj(V_k)`` w.r.t. (Va, Vm).

    Returns the complex 2n x 2n matrix; for a real objective ``Re(...)`` take
    the real part.
    """
    vm = np.abs(V)
    T = V[:, None] * W * np.conj(V)[None, :]
    r = T.sum(axis=1)
    c = T.sum(axis=0)
    haa = T + T.T - np.diag(r + c)
    hav = 1j * (np.diag(r - c) + T - T.T) / vm[None, :]
    hvv = (T + T.T) / np.outer(vm, vm)
    return np.block([[haa, hav], [hav.T, hvv]])

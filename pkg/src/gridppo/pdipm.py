"""Primal-dual interior-point method for smooth nonlinear programs.

Solves::

    min f(x)  s.t.  g(x) = 0,  h(x) <= 0

with slacks ``z > 0`` (``h + z = 0``), a log barrier whose weight is driven
by a centering parameter, and separate primal / dual step lengths limited by
a fraction-to-boundary rule.  The reduced Newton system is solved densely.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class PdipmOptions:
    feastol: float = 1e-10
    gradtol: float = 1e-10
    comptol: float = 1e-10
    max_it: int = 150
    sigma: float = 0.1  # centering parameter
    xi: float = 0.9995  # fraction to boundary
    z0: float = 1.0
    divergence: float = 1e10  # dual norm treated as evidence of infeasibility


@dataclass
class PdipmResult:
    x: np.ndarray
    f: float
    lam: np.ndarray
    mu: np.ndarray
    z: np.ndarray
    converged: bool
    iterations: int
    feascond: float
    gradcond: float
    compcond: float
    message: str = ""
    history: list = field(default_factory=list)


def pdipm(
    f_fn: Callable,
    gh_fn: Callable,
    hess_fn: Callable,
    x0,
    opts: PdipmOptions | None = None,
) -> PdipmResult:
    """Run the interior-point iteration.

    ``f_fn(x) -> (f, df)``, ``gh_fn(x) -> (h, g, dh, dg)`` with constraint
    Jacobians as (rows = constraints) arrays, and
    ``hess_fn(x, lam, mu) -> d2L`` the Hessian of
    ``f + lam.g + mu.h``.
    """
    o = opts or PdipmOptions()
    x = np.array(x0, dtype=float)
    nx = len(x)
    f, df = f_fn(x)
    h, g, dh, dg = gh_fn(x)
    neq, niq = len(g), len(h)

    z = np.full(niq, o.z0)
    deep = h < -o.z0
    z[deep] = -h[deep]
    gamma = 1.0
    mu = gamma / z
    lam = np.zeros(neq)
    history = []

    def conditions():
        lx = df + dg.T @ lam + dh.T @ mu
        maxh = h.max() if niq else 0.0
        ginf = np.abs(g).max() if neq else 0.0
        xinf = np.abs(x).max()
        zinf = np.abs(z).max() if niq else 0.0
        feas = max(ginf, maxh, 0.0) / (1 + max(xinf, zinf))
        lminf = max(np.abs(lam).max() if neq else 0.0, np.abs(mu).max() if niq else 0.0)
        grad = np.abs(lx).max() / (1 + lminf)
        comp = (z @ mu) / (1 + xinf) if niq else 0.0
        return lx, feas, grad, comp

    lx, feas, grad, comp = conditions()
    it = 0
    message = ""
    converged = False
    while True:
        history.append((it, f, feas, grad, comp, gamma))
        if feas < o.feastol and grad < o.gradtol and comp < o.comptol:
            converged = True
            message = "converged"
            break
        if it >= o.max_it:
            message = "iteration limit"
            break
        if not (np.all(np.isfinite(x)) and np.isfinite(f)):
            message = "numerical failure"
            break
        if max(np.abs(lam).max(initial=0), np.abs(mu).max(initial=0)) > o.divergence:
            message = "dual divergence"
            break
        it += 1

        lxx = hess_fn(x, lam, mu)
        zinv = 1.0 / z
        w = mu * zinv
        M = lxx + dh.T @ (dh * w[:, None])
        N = lx + dh.T @ (zinv * (mu * h + gamma))
        kkt = np.zeros((nx + neq, nx + neq))
        kkt[:nx, :nx] = M
        kkt[:nx, nx:] = dg.T
        kkt[nx:, :nx] = dg
        rhs = -np.concatenate([N, g])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            message = "singular Newton system"
            break
        if not np.all(np.isfinite(sol)):
            message = "numerical failure"
            break
        dx, dlam = sol[:nx], sol[nx:]
        dz = -h - z - dh @ dx
        dmu = -mu + zinv * (gamma - mu * dz)

        alpha_p = _step_length(z, dz, o.xi)
        alpha_d = _step_length(mu, dmu, o.xi)
        x = x + alpha_p * dx
        z = z + alpha_p * dz
        lam = lam + alpha_d * dlam
        mu = mu + alpha_d * dmu
        if niq:
            gamma = o.sigma * (z @ mu) / niq

        f, df = f_fn(x)
        h, g, dh, dg = gh_fn(x)
        lx, feas, grad, comp = conditions()

    return PdipmResult(x=x, f=float(f), lam=lam, mu=mu, z=z, converged=converged,
                       iterations=it, feascond=float(feas), gradcond=float(grad),
                       compcond=float(comp), message=message, history=history)


def _step_length(v, dv, xi):
    neg = dv < 0
    if not neg.any():
        return 1.0
    return float(min(1.0, xi * np.min(-v[neg] / dv[neg])))

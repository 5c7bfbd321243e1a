"""Episodic grid environment with a gym-like ``reset`` / ``step`` protocol.

State: ``[Pd/base, Qd/base, Pg (0..1), Vg (0..1)]``, setpoints min-max scaled
by their generator boxes.  Actions are setpoint increments in the same
scaled units; the actor itself emits absolute scaled targets which
:func:`decode_action` turns into increments.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .ac_pf import PfSolution, ViolationReport, check_violations, solve_pf, VIOLATION_TOL
from .dataset import Calibration, Scenario
from .grid_model import Case
from .opf_oracle import gen_cost

DIVERGENCE_PENALTY = -5000.0
HORIZON = 5


@dataclass(frozen=True)
class RewardParams:
    k: float = -0.1
    b: float = 0.0
    z: float = 0.0
    w_p: float = 10.0  # points per MW
    w_v: float = 1000.0  # points per p.u.
    w_l: float = 10.0  # points per MVA
    divergence_penalty: float = DIVERGENCE_PENALTY
    violation_floor: float = -4000.0

    def __post_init__(self):
        if not self.k < 0:
            raise ValueError("k must be negative so that cheaper dispatch earns more reward")
        if min(self.w_p, self.w_v, self.w_l) <= 0:
            raise ValueError("penalty weights must be positive")

    @classmethod
    def from_calibration(cls, cal: Calibration, **kw) -> "RewardParams":
        return cls(k=cal.k, b=cal.b, **kw)


def compute_reward(pf: PfSolution, report: ViolationReport | None, cost: float,
                   params: RewardParams) -> float:
    """Three-way reward: divergence penalty, violation penalty, or affine cost reward."""
    if not pf.converged:
        return params.divergence_penalty
    if report is not None and not report.empty:
        p, v, l = report.totals()
        penalty = params.w_p * p + params.w_v * v + params.w_l * l
        return max(params.violation_floor, -penalty)
    return params.k * cost + params.b + params.z


def reward_branch(pf: PfSolution, report: ViolationReport | None) -> str:
    if not pf.converged:
        return "diverged"
    if report is not None and not report.empty:
        return "violation"
    return "feasible"


def normalize_setpoints(case: Case, Pg, Vg) -> np.ndarray:
    return np.concatenate([_unit(Pg, case.Pmin, case.Pmax), _unit(Vg, case.Vgmin, case.Vgmax)])


def denormalize_setpoints(case: Case, u) -> tuple[np.ndarray, np.ndarray]:
    s = case.n_gen
    u = np.asarray(u, dtype=float)
    return (case.Pmin + u[:s] * (case.Pmax - case.Pmin),
            case.Vgmin + u[s:] * (case.Vgmax - case.Vgmin))


def _unit(x, lo, hi):
    span = np.where(hi > lo, hi - lo, 1.0)
    return (np.asarray(x, dtype=float) - lo) / span


def encode_state(case: Case, Pd, Qd, Pg, Vg) -> np.ndarray:
    """Concatenate loads (per unit on the system base) and scaled generator setpoints."""
    Pd, Qd, Pg, Vg = (np.asarray(a, dtype=float) for a in (Pd, Qd, Pg, Vg))
    if Pd.shape != (case.n_bus,) or Qd.shape != (case.n_bus,):
        raise ValueError(f"expected {case.n_bus} bus loads")
    if Pg.shape != (case.n_gen,) or Vg.shape != (case.n_gen,):
        raise ValueError(f"expected {case.n_gen} generator setpoints")
    return np.concatenate([Pd / case.baseMVA, Qd / case.baseMVA, normalize_setpoints(case, Pg, Vg)])


def decode_action(target, current) -> np.ndarray:
    """Increment taking the ``current`` scaled setpoints to the actor's ``target``."""
    target = np.asarray(target, dtype=float)
    current = np.asarray(current, dtype=float)
    if target.shape != current.shape:
        raise ValueError(f"target shape {target.shape} != current setpoint shape {current.shape}")
    return target - current


@dataclass
class StepResult:
    next_state: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


class EpisodeDone(RuntimeError):
    pass


class GridEnv:
    """Gym-style environment over one static case.

    Each episode installs a :class:`Scenario` (loads + initial setpoints).
    ``step`` applies a scaled setpoint increment, runs the power flow and
    scores it; the episode ends when the power flow diverges or after
    ``horizon`` steps.
    """

    def __init__(self, case: Case, reward: RewardParams | None = None,
                 calibration: Calibration | None = None, horizon: int = HORIZON,
                 step_scale: float = 1.0, violation_tol: float = VIOLATION_TOL):
        self.case = case
        if reward is None:
            reward = RewardParams.from_calibration(calibration) if calibration else RewardParams()
        self.reward_params = reward
        self.calibration = calibration
        self.horizon = horizon
        self.step_scale = step_scale
        self.violation_tol = violation_tol
        self.state_dim = 2 * (case.n_bus + case.n_gen)
        self.action_dim = 2 * case.n_gen
        self.obs_dim = 2 * case.n_bus
        self._episode = None

    # -- helpers
    def _params_for(self, sc: Scenario) -> RewardParams:
        if self.calibration is not None and sc.cost_opt is not None:
            return replace(self.reward_params, z=self.calibration.z(sc.cost_opt))
        return self.reward_params

    def _evaluate(self, sub: Case, setpoints):
        Pg, Vg = denormalize_setpoints(self.case, setpoints)
        pf = solve_pf(sub.with_operating_point(Pg=Pg, Vg=Vg), validate=False)
        if not pf.converged:
            return pf, None, float("nan")
        report = check_violations(sub, pf, self.violation_tol)
        return pf, report, gen_cost(sub, pf.Pg_out)

    # -- protocol
    def reset(self, scenario: Scenario) -> np.ndarray:
        case = self.case
        state = encode_state(case, scenario.Pd, scenario.Qd, scenario.Pg0, scenario.Vg0)
        if not np.all(np.isfinite(state)):
            raise ValueError("scenario contains non-finite values")
        sub = case.with_operating_point(Pd=scenario.Pd, Qd=scenario.Qd)
        setpoints = np.clip(state[self.obs_dim:], 0.0, 1.0)
        pf, _, _ = self._evaluate(sub, setpoints)
        self._episode = {
            "scenario": scenario, "case": sub, "setpoints": setpoints, "t": 0,
            "done": False, "dead_on_arrival": not pf.converged,
            "params": self._params_for(scenario), "loads": state[:self.obs_dim],
        }
        return state

    @property
    def dead_on_arrival(self) -> bool:
        return bool(self._episode and self._episode["dead_on_arrival"])

    @property
    def setpoints(self) -> np.ndarray:
        return self._episode["setpoints"].copy()

    def state(self) -> np.ndarray:
        ep = self._episode
        return np.concatenate([ep["loads"], ep["setpoints"]])

    def step(self, action) -> StepResult:
        ep = self._episode
        if ep is None:
            raise EpisodeDone("call reset() before step()")
        if ep["done"]:
            raise EpisodeDone("episode is over; call reset()")
        action = np.asarray(action, dtype=float)
        if action.shape != (self.action_dim,):
            raise ValueError(f"expected action of length {self.action_dim}, got {action.shape}")
        ep["t"] += 1
        if ep["dead_on_arrival"]:
            ep["done"] = True
            pf = PfSolution(V=np.full(self.case.n_bus, np.nan, dtype=complex), Pg_out=None,
                            Qg_out=None, Sf=None, St=None, iterations=0, converged=False,
                            message="initial power flow diverged")
            return StepResult(self.state(), ep["params"].divergence_penalty, True,
                              {"pf": pf, "report": None, "cost": float("nan"),
                               "outcome": "diverged"})
        ep["setpoints"] = np.clip(ep["setpoints"] + action * self.step_scale, 0.0, 1.0)
        pf, report, cost = self._evaluate(ep["case"], ep["setpoints"])
        reward = compute_reward(pf, report, cost, ep["params"])
        done = (not pf.converged) or ep["t"] >= self.horizon
        ep["done"] = done
        info = {"pf": pf, "report": report, "cost": cost, "outcome": reward_branch(pf, report)}
        return StepResult(self.state(), float(reward), done, info)

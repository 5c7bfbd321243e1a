"""Deterministic evaluation of an actor on labeled test scenarios, and report emission."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .nn import PolicyParams
from .rl_env import HORIZON, GridEnv, RewardParams, decode_action

VIOLATION_SENTINEL = 20000.0  # $/h shown for scenarios ending with a limit violation
DIVERGENCE_SENTINEL = 30000.0  # $/h shown for scenarios ending with a diverged power flow
CATEGORIES = ("pgen", "vbus", "branch", "diverged")


@dataclass
class ScenarioResult:
    scenario_id: int
    status: str  # success | violation | diverged
    agent_cost: float  # nan when diverged
    oracle_cost: float
    categories: list[str]
    primary_category: str  # "" on success
    steps_used: int

    @property
    def deviation(self) -> float:
        return (self.agent_cost - self.oracle_cost) / self.oracle_cost

    @property
    def sentinel_cost(self) -> float:
        if self.status == "diverged":
            return DIVERGENCE_SENTINEL
        if self.status == "violation":
            return VIOLATION_SENTINEL
        return self.agent_cost


@dataclass
class EvalMetrics:
    success_rate: float
    mean_cost_deviation: float  # fraction, over successes; nan if none
    max_cost_deviation: float
    breakdown: dict  # failures counted once under their dominant category
    records: list[ScenarioResult] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.records)

    def summary(self) -> dict:
        return {
            "n_scenarios": self.n,
            "success_rate": self.success_rate,
            "n_success": sum(r.status == "success" for r in self.records),
            "mean_cost_deviation_pct": 100 * self.mean_cost_deviation,
            "max_cost_deviation_pct": 100 * self.max_cost_deviation,
            "failure_breakdown": dict(self.breakdown),
        }


def _json_safe(x):
    return None if isinstance(x, float) and not np.isfinite(x) else x


def metrics_to_dict(metrics: EvalMetrics) -> dict:
    """Summary plus per-scenario records; NaN becomes null so the output is strict JSON."""
    d = {k: _json_safe(v) for k, v in metrics.summary().items()}
    d["records"] = [{k: _json_safe(v) for k, v in asdict(r).items()} for r in metrics.records]
    return d


def metrics_from_dict(d: dict) -> EvalMetrics:
    recs = []
    for r in d["records"]:
        r = dict(r)
        for k in ("agent_cost", "oracle_cost"):
            r[k] = float("nan") if r[k] is None else float(r[k])
        recs.append(ScenarioResult(**r))
    return aggregate(recs)


def _dominant(report, params: RewardParams) -> str:
    p, v, l = report.totals()
    weighted = {"pgen": params.w_p * p, "vbus": params.w_v * v, "branch": params.w_l * l}
    return max(weighted, key=weighted.get)


def evaluate_agent(case, policy: PolicyParams, dataset: Dataset, horizon: int = HORIZON,
                   actor=None) -> EvalMetrics:
    """Apply the actor mean for ``horizon`` steps on every scenario; score only the final state.

    ``actor(scenario, state) -> scaled target`` may replace the policy, e.g.
    to replay oracle labels.
    """
    env = GridEnv(case, calibration=dataset.calibration, horizon=horizon)
    records = []
    for i, sc in enumerate(dataset.scenarios):
        state = env.reset(sc)
        info, steps = {}, 0
        for _ in range(horizon):
            target = actor(sc, state) if actor is not None else policy.mean(state)[0]
            res = env.step(decode_action(target, env.setpoints))
            state, info = res.next_state, res.info
            steps += 1
            if res.done:
                break
        outcome = info["outcome"]
        oracle = sc.cost_opt if sc.cost_opt is not None else float("nan")
        if outcome == "diverged":
            rec = ScenarioResult(i, "diverged", float("nan"), oracle, ["diverged"], "diverged", steps)
        elif outcome == "violation":
            rep = info["report"]
            rec = ScenarioResult(i, "violation", info["cost"], oracle, rep.categories(),
                                 _dominant(rep, env.reward_params), steps)
        else:
            rec = ScenarioResult(i, "success", info["cost"], oracle, [], "", steps)
        records.append(rec)
    return aggregate(records)


def aggregate(records: list[ScenarioResult]) -> EvalMetrics:
    n = len(records)
    ok = [r for r in records if r.status == "success"]
    devs = np.array([r.deviation for r in ok if np.isfinite(r.oracle_cost)])
    breakdown = {c: sum(r.primary_category == c for r in records) for c in CATEGORIES}
    return EvalMetrics(
        success_rate=len(ok) / n if n else float("nan"),
        mean_cost_deviation=float(devs.mean()) if devs.size else float("nan"),
        max_cost_deviation=float(devs.max()) if devs.size else float("nan"),
        breakdown=breakdown,
        records=records,
    )


REPORT_COLUMNS = ["scenario_id", "status", "agent_cost_raw", "agent_cost_sentinel", "oracle_cost",
                  "deviation_pct", "violation_category", "steps_used"]


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and not np.isfinite(x)) else repr(float(x))


def emit_report(metrics: EvalMetrics, path) -> dict:
    """Write ``<path>.csv`` (per scenario), ``<path>.json`` (summary) and ``<path>_series.csv``.

    ``path`` is a stem; an existing suffix is replaced.  Returns the written paths.
    """
    stem = Path(path)
    stem = stem.with_suffix("") if stem.suffix else stem
    out = {"csv": stem.with_suffix(".csv"), "json": stem.with_suffix(".json"),
           "series": stem.with_name(stem.name + "_series.csv")}
    try:
        with open(out["csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in metrics.records:
                dev = 100 * r.deviation if r.status == "success" else None
                w.writerow([r.scenario_id, r.status, _fmt(r.agent_cost), _fmt(r.sentinel_cost),
                            _fmt(r.oracle_cost), _fmt(dev), "+".join(r.categories), r.steps_used])
        with open(out["series"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario_id", "agent_cost", "oracle_cost"])
            for r in metrics.records:
                w.writerow([r.scenario_id, _fmt(r.sentinel_cost), _fmt(r.oracle_cost)])
        summary = {k: _json_safe(v) for k, v in metrics.summary().items()}
        out["json"].write_text(json.dumps(summary, indent=2) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write report at {stem}: {exc}") from exc
    return out

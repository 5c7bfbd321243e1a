"""Command-line entry point: ``gridppo <subcommand> ...``.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds_mod
from .ac_pf import check_violations, solve_pf
from .dataset import DatasetError, LabelingAborted
from .evaluate import emit_report, evaluate_agent, metrics_from_dict, metrics_to_dict
from .grid_model import CaseError, case14, load_case, modified_case14, override_branch_limit
from .imitation import eval_mse, pretrain_actor
from .nn import Checkpoint, load_checkpoint, save_checkpoint
from .opf_oracle import solve_opf
from .ppo_trainer import TrainConfig, TrainingAborted, train_on_case

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
BUILTIN_CASES = {"case14": case14, "case14-mod": modified_case14}


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _case(spec: str, override: list[str] | None = None):
    """Built-in case name or path; ``override`` items are FROM:TO:MVA branch limits."""
    case = BUILTIN_CASES[spec]() if spec in BUILTIN_CASES else load_case(spec)
    for item in override or []:
        try:
            f, t, s = item.split(":")
            case = override_branch_limit(case, int(f), int(t), float(s))
        except ValueError as exc:
            raise UsageError(f"bad --override {item!r}: {exc}") from None
    return case


def _range(text: str):
    try:
        lo, hi = (float(x) for x in text.split(":"))
    except ValueError:
        raise UsageError(f"--range must look like LO:HI, got {text!r}") from None
    if not 0 < lo <= hi:
        raise UsageError("--range needs 0 < LO <= HI")
    return lo, hi


def _print_json(obj):
    print(json.dumps(obj, indent=2))


def _check_fingerprint(ckpt: Checkpoint, case, what: str):
    fp = ckpt.meta.get("case_fingerprint")
    if fp is not None and fp != case.fingerprint():
        raise UsageError(f"{what} was produced for a different case (fingerprint mismatch)")


# --------------------------------------------------------------------------
# subcommands

def cmd_solve_pf(a):
    case = _case(a.case, a.override)
    sol = solve_pf(case, enforce_q_lims=not a.no_qlim)
    if not sol.converged:
        raise NumericalFailure(f"power flow diverged: {sol.message}")
    report = check_violations(case, sol)
    _print_json({
        "converged": True, "iterations": sol.iterations, "switched_to_pq": list(map(int, sol.switched)),
        "Vm": sol.Vm.tolist(), "Va_deg": np.degrees(sol.Va).tolist(),
        "Pg": sol.Pg_out.tolist(), "Qg": sol.Qg_out.tolist(),
        "violations": report.categories(),
    })


def cmd_solve_opf(a):
    case = _case(a.case, a.override)
    sol = solve_opf(case)
    out = {"status": sol.status.value, "objective": sol.objective, "iterations": sol.iterations,
           "Pg": sol.Pg_opt.tolist(), "Vg": sol.Vg_opt.tolist(), "Qg": sol.Qg_opt.tolist()}
    _print_json(out)
    if not sol.optimal:
        raise NumericalFailure(f"OPF ended with status {sol.status.value}")


def cmd_gen_data(a):
    case = _case(a.case, a.override)
    n, lo_hi = a.n, _range(a.range)
    if a.preset:
        preset = ds_mod.PRESETS[a.preset]
        n = n or preset.n_total
    if not n or n < 0:
        raise UsageError("--n is required (or use --preset)")
    scs = ds_mod.generate_scenarios(case, n, lo_hi, seed=a.seed, per_bus=not a.system_wide)
    params = {"load_range": list(lo_hi), "per_bus": not a.system_wide, "preset": a.preset}
    try:
        data = ds_mod.label_scenarios(case, scs, labels=a.labels, workers=a.workers, seed=a.seed,
                                      max_failure_rate=a.max_failure_rate, params=params)
    except LabelingAborted as exc:
        ds_mod.save(exc.partial, a.out + ".partial" + Path(a.out).suffix)
        raise NumericalFailure(str(exc)) from None
    if a.test_out:
        frac = a.test_fraction
        if frac is None:
            frac = ds_mod.PRESETS[a.preset].fractions[1] if a.preset else 0.2
        train, test = ds_mod.split(data, (1 - frac, frac), seed=a.seed)
        ds_mod.save(train, a.out)
        ds_mod.save(test, a.test_out)
        print(f"wrote {len(train)} training scenarios to {a.out} and {len(test)} test scenarios "
              f"to {a.test_out} ({data.params['n_dropped']} dropped)")
    else:
        ds_mod.save(data, a.out)
        print(f"wrote {len(data)} scenarios to {a.out} ({data.params['n_dropped']} dropped)")


def cmd_pretrain(a):
    case = _case(a.case, a.override)
    data = ds_mod.load(a.data, case)
    if a.fraction < 1.0:
        keep = np.random.default_rng(a.seed).permutation(len(data))[:max(1, int(a.fraction * len(data)))]
        data = data.subset(np.sort(keep))
    res = pretrain_actor(case, data, holdout=a.holdout, epochs=a.epochs, lr=a.lr,
                         batch_size=a.batch_size, seed=a.seed, optimizer=a.optimizer,
                         curve_path=a.curve)
    err = eval_mse(case, res.policy, data.subset(res.heldout_idx))
    meta = {"case_fingerprint": case.fingerprint(), "kind": "imitation", "fraction": a.fraction,
            "heldout_mse_p": err.mse_p, "heldout_mse_v": err.mse_v}
    save_checkpoint(a.out, Checkpoint(res.policy, meta=meta))
    _print_json({"heldout_rmse_p_mw": err.rmse_p, "heldout_rmse_v_pu": err.rmse_v,
                 "heldout_mse_p": err.mse_p, "heldout_mse_v": err.mse_v, "n_examples": len(data)})


def cmd_train(a):
    case = _case(a.case, a.override)
    cfg = TrainConfig.load(a.config) if a.config else TrainConfig()
    if a.seed is not None:
        cfg.seed = a.seed
    if a.updates is not None:
        cfg.ppo.updates = a.updates
    train = ds_mod.load(a.data, case)
    eval_set = ds_mod.load(a.eval_data, case) if a.eval_data else None
    policy = None
    if a.init:
        ckpt = load_checkpoint(a.init)
        _check_fingerprint(ckpt, case, a.init)
        policy = ckpt.policy
    try:
        res = train_on_case(case, train, cfg, policy, eval_set, log_path=a.log, checkpoint_path=a.out)
    except TrainingAborted as exc:
        raise NumericalFailure(f"{exc}; last good checkpoint kept at {a.out}") from None
    last = res.log[-1] if res.log else {}
    _print_json({"updates": len(res.log), "checkpoint": a.out,
                 "final_eval_success_rate": last.get("eval_success_rate")})


def cmd_eval(a):
    case = _case(a.case, a.override)
    ckpt = load_checkpoint(a.checkpoint)
    _check_fingerprint(ckpt, case, a.checkpoint)
    test = ds_mod.load(a.data, case)
    metrics = evaluate_agent(case, ckpt.policy, test, a.horizon)
    if a.out:
        Path(a.out).write_text(json.dumps(metrics_to_dict(metrics)) + "\n")
    _print_json({k: v for k, v in metrics_to_dict(metrics).items() if k != "records"})


def cmd_report(a):
    try:
        metrics = metrics_from_dict(json.loads(Path(a.metrics).read_text()))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"{a.metrics} is not an evaluation result: {exc}") from None
    paths = emit_report(metrics, a.out)
    print("\n".join(str(p) for p in paths.values()))


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gridppo", description="AC optimal power flow with PPO: data, training, evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, fn, help_, case_default="case14-mod"):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--case", default=case_default,
                        help=f"case file or built-in name ({', '.join(BUILTIN_CASES)}); default {case_default}")
        sp.add_argument("--override", action="append", metavar="FROM:TO:MVA",
                        help="replace one branch flow limit (repeatable)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("solve-pf", cmd_solve_pf, "Newton-Raphson power flow at the case's stored setpoints", "case14")
    sp.add_argument("--no-qlim", action="store_true", help="do not enforce generator reactive limits")

    add("solve-opf", cmd_solve_opf, "AC optimal power flow by primal-dual interior point", "case14")

    sp = add("gen-data", cmd_gen_data, "generate, label and save scenarios")
    sp.add_argument("--n", type=int, help="number of scenarios to draw")
    sp.add_argument("--preset", choices=sorted(ds_mod.PRESETS), help="named size preset (desk, full)")
    sp.add_argument("--range", default="0.6:1.4", help="load multiplier range LO:HI")
    sp.add_argument("--system-wide", action="store_true", help="one load multiplier per scenario")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--labels", help="JSON-lines label file to use instead of the oracle")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--max-failure-rate", type=float, default=0.05)
    sp.add_argument("--out", required=True, help="output dataset (.jsonl or .npz)")
    sp.add_argument("--test-out", help="also split off a test set and write it here")
    sp.add_argument("--test-fraction", type=float, help="test share when splitting")

    sp = add("pretrain", cmd_pretrain, "supervised actor initialization on oracle labels")
    sp.add_argument("--data", required=True)
    sp.add_argument("--epochs", type=int, default=50)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    sp.add_argument("--holdout", type=float, default=0.01)
    sp.add_argument("--fraction", type=float, default=1.0, help="share of the data to use (0.18 for the reduced preset)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--curve", help="write the per-epoch loss curve CSV here")
    sp.add_argument("--out", required=True, help="checkpoint path (.npz)")

    sp = add("train", cmd_train, "PPO training")
    sp.add_argument("--data", required=True, help="labeled training dataset")
    sp.add_argument("--eval-data", help="held-out dataset for periodic success rate")
    sp.add_argument("--config", help="JSON training config")
    sp.add_argument("--init", help="checkpoint to start from (e.g. from pretrain)")
    sp.add_argument("--updates", type=int, help="override the number of updates")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--log", help="training log CSV")
    sp.add_argument("--out", required=True, help="checkpoint path (.npz)")

    sp = add("eval", cmd_eval, "deterministic evaluation of an actor on a test set")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--horizon", type=int, default=5)
    sp.add_argument("--out", help="write full metrics (with per-scenario records) as JSON")

    sp = sub.add_parser("report", help="write report CSV, JSON summary and plot series from eval output",
                        description="write report CSV, JSON summary and plot series from eval output")
    sp.add_argument("--metrics", required=True, help="JSON written by 'eval --out'")
    sp.add_argument("--out", required=True, help="output path stem")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if a.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        a.func(a)
    except NumericalFailure as exc:
        print(f"gridppo {a.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, CaseError, DatasetError, OSError, ValueError, KeyError) as exc:
        print(f"gridppo {a.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Supervised warm start: regress the actor mean onto oracle-optimal setpoints."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .grid_model import Case
from .nn import Adam, PolicyParams, sgd_step
from .rl_env import denormalize_setpoints, normalize_setpoints


@dataclass
class ImitationError:
    mse_p: float  # MW^2
    mse_v: float  # p.u.^2

    @property
    def rmse_p(self) -> float:
        return float(np.sqrt(self.mse_p))

    @property
    def rmse_v(self) -> float:
        return float(np.sqrt(self.mse_v))


@dataclass
class PretrainResult:
    policy: PolicyParams
    curve: list[dict] = field(default_factory=list)
    train_idx: np.ndarray | None = None
    heldout_idx: np.ndarray | None = None


def supervised_arrays(case: Case, dataset: Dataset):
    """Load features (per unit) and scaled optimal setpoints for every labeled scenario."""
    scs = dataset.scenarios
    if not scs:
        raise ValueError("dataset is empty")
    if not all(sc.labeled for sc in scs):
        raise ValueError("dataset contains unlabeled scenarios")
    X = np.array([np.concatenate([sc.Pd, sc.Qd]) for sc in scs]) / case.baseMVA
    Y = np.array([normalize_setpoints(case, sc.Pg_opt, sc.Vg_opt) for sc in scs])
    return X, Y


def _physical_mse(case: Case, pred, target):
    s = case.n_gen
    span = np.concatenate([case.Pmax - case.Pmin, case.Vgmax - case.Vgmin])
    err2 = ((pred - target) * span) ** 2
    return ImitationError(float(err2[:, :s].mean()), float(err2[:, s:].mean()))


def eval_mse(case: Case, policy: PolicyParams, dataset: Dataset) -> ImitationError:
    """Mean squared error of the actor mean against labels, Pg in MW^2 and Vg in p.u.^2."""
    X, Y = supervised_arrays(case, dataset)
    return _physical_mse(case, policy.mean(X), Y)


def pretrain_actor(case: Case, dataset: Dataset, *, holdout: float = 0.01, epochs: int = 50,
                   lr: float = 1e-3, batch_size: int = 32, seed: int = 0, optimizer: str = "adam",
                   policy: PolicyParams | None = None, hidden=(64, 64), log_std: float = -1.0,
                   curve_path=None) -> PretrainResult:
    """Minibatch MSE regression of the actor onto scaled oracle setpoints.

    ``holdout`` of the scenarios (at least one when the dataset has two or
    more) is kept aside; with a single scenario it is both train and held-out.
    The curve records per-epoch MSE in scaled units and in physical units.
    """
    if optimizer not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    X, Y = supervised_arrays(case, dataset)
    rng = np.random.default_rng(seed)
    n = len(X)
    order = rng.permutation(n)
    n_hold = min(max(int(round(holdout * n)), 1 if holdout > 0 else 0), n - 1) if n > 1 else 0
    hold_idx, train_idx = np.sort(order[:n_hold]), np.sort(order[n_hold:])
    if n_hold == 0:
        hold_idx = train_idx
    if policy is None:
        policy = PolicyParams.init(X.shape[1], Y.shape[1], hidden=hidden, log_std=log_std, rng=rng)
    elif policy.obs_dim != X.shape[1] or policy.actor.sizes[-1] != Y.shape[1]:
        raise ValueError("policy dimensions do not match the case")
    net = policy.actor
    opt = Adam()
    Xt, Yt = X[train_idx], Y[train_idx]
    Xh, Yh = X[hold_idx], Y[hold_idx]
    curve = []
    for ep in range(1, epochs + 1):
        perm = rng.permutation(len(Xt))
        for start in range(0, len(Xt), batch_size):
            idx = perm[start:start + batch_size]
            out, cache = net.forward(Xt[idx], keep=True)
            diff = out - Yt[idx]
            loss = np.mean(diff**2)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite imitation loss at epoch {ep}")
            grads = net.backward(cache, 2.0 * diff / diff.size)
            if optimizer == "adam":
                opt.step(net.params(), grads, lr)
            else:
                sgd_step(net.params(), grads, lr)
        pt, ph = net.forward(Xt), net.forward(Xh)
        tr, ho = _physical_mse(case, pt, Yt), _physical_mse(case, ph, Yh)
        curve.append({"epoch": ep, "train_mse": float(np.mean((pt - Yt) ** 2)),
                      "heldout_mse": float(np.mean((ph - Yh) ** 2)),
                      "train_mse_p": tr.mse_p, "train_mse_v": tr.mse_v,
                      "heldout_mse_p": ho.mse_p, "heldout_mse_v": ho.mse_v})
    if curve_path is not None:
        write_curve(curve_path, curve)
    return PretrainResult(policy, curve, train_idx, hold_idx)


def write_curve(path, curve: list[dict]) -> None:
    if not curve:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(curve[0]))
        w.writeheader()
        w.writerows(curve)


def predicted_setpoints(case: Case, policy: PolicyParams, Pd, Qd):
    """Actor mean for one load vector, in MW and p.u."""
    x = np.concatenate([Pd, Qd])[None, :] / case.baseMVA
    return denormalize_setpoints(case, policy.mean(x)[0])

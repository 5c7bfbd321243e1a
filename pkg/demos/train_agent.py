"""Imitation warm start followed by PPO on the tightened 14-bus network.

A small run for illustration: a few hundred scenarios and a handful of
updates.  ``python demos/train_agent.py``; expect a couple of minutes.
"""
import numpy as np

from gridppo.dataset import generate_scenarios, label_scenarios, split
from gridppo.evaluate import evaluate_agent
from gridppo.grid_model import modified_case14
from gridppo.imitation import eval_mse, pretrain_actor
from gridppo.ppo_trainer import PpoConfig, TrainConfig, train_on_case

case = modified_case14()
data = label_scenarios(case, generate_scenarios(case, 600, seed=1), seed=1)
train, test = split(data, (0.8, 0.2), seed=1)
print(f"{len(train)} training and {len(test)} test scenarios")

# supervised warm start on a fifth of the training data
keep = np.random.default_rng(0).permutation(len(train))[: len(train) // 5]
warm = pretrain_actor(case, train.subset(keep), epochs=100, seed=0)
err = eval_mse(case, warm.policy, train.subset(keep[warm.heldout_idx]))
print(f"warm start held-out RMSE: {err.rmse_p:.2f} MW, {err.rmse_v:.4f} p.u.")
before = evaluate_agent(case, warm.policy, test)
print("imitation only:", before.summary())

cfg = TrainConfig(seed=0, ppo=PpoConfig(updates=10), eval_every=5, eval_scenarios=50)
res = train_on_case(case, train, cfg, warm.policy, eval_set=test)
for row in res.log:
    print(f"update {row['update']:3d}  mean return {row['mean_return']:8.1f}  "
          f"feasible {row['feasible_frac']:.2f}")
after = evaluate_agent(case, res.policy, test)
print("after PPO:", after.summary())

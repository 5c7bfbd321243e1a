"""The control environment: states, actions and the reward law.

Run with ``python demos/environment_and_rewards.py``.
"""
import numpy as np

from gridppo.dataset import generate_scenarios, label_scenarios
from gridppo.grid_model import modified_case14
from gridppo.rl_env import GridEnv, RewardParams, decode_action, normalize_setpoints

case = modified_case14()
scenarios = generate_scenarios(case, 20, seed=0)
data = label_scenarios(case, scenarios, seed=0)
print(f"labeled {len(data)} scenarios, calibration {data.calibration}")

reward = RewardParams.from_calibration(data.calibration)
env = GridEnv(case, reward=reward, calibration=data.calibration)
print("state length", env.state_dim, "action length", env.action_dim)

sc = data.scenarios[0]
state = env.reset(sc)
print("loads in the state (p.u.):", np.round(state[:14], 3))

# acting with the initial settings usually violates something
res = env.step(np.zeros(env.action_dim))
print("keep initial settings ->", res.info["outcome"], round(res.reward, 2))

# jumping to the oracle optimum earns the maximum reward of 500
target = normalize_setpoints(case, sc.Pg_opt, sc.Vg_opt)
res = env.step(decode_action(target, env.setpoints))
print("move to oracle optimum ->", res.info["outcome"], round(res.reward, 6))

# overload the network until power flow fails
env.reset(type(sc)(sc.Pd * 8, sc.Qd * 8, sc.Pg0, sc.Vg0))
res = env.step(np.zeros(env.action_dim))
print("eight times the load ->", res.info["outcome"], res.reward)

"""Intervening on obstacle placement and measuring what it costs the source policy.

A tabular policy is solved on one layout, then replayed on layouts whose
obstacles were resampled. The average treatment effect is the change in mean
episode return.
"""
import numpy as np

from cfdt.data import estimate_ate, rollout
from cfdt.gridworld import RewardSpec, generate_layout, intervene, render
from cfdt.policy import FailSafeConfig, solve_policy

rs = RewardSpec(horizon=100)
source = generate_layout(seed=0)
policy = solve_policy(source, rs)

print("source layout", source.layout_id)
print(render(source))
traj = rollout(source, policy, rs)
print(f"source policy reaches the goal in {traj.episode_length} steps, return {traj.total_return:.3f}\n")

# %% counterfactual layouts: same start and goal, obstacles redrawn
for cf_seed in range(1, 5):
    cf = intervene(source, cf_seed, n_obstacles=6)
    est = estimate_ate(cf, source, policy, rs, m=20, failsafe=FailSafeConfig(), seed=cf_seed)
    print(render(cf))
    print(f"ATE {est.ate:+.3f} +/- {est.std_error:.3f}  "
          f"(cf mean {est.cf_mean_return:+.3f}, source mean {est.source_mean_return:+.3f})\n")

# %% how often does the source policy survive an intervention?
ates = np.array([estimate_ate(intervene(source, s, 6), source, policy, rs, m=5, seed=s).ate
                 for s in range(100, 200)])
print(f"100 interventions: {np.mean(ates > -0.05):.0%} barely matter, "
      f"{np.mean(ates < -1.0):.0%} mostly end in failure")

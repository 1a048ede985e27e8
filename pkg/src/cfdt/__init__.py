"""Counterfactual data augmentation for return-conditioned sequence models on a gridworld."""
from .gridworld import (Action, EnvState, GridLayout, RewardSpec, generate_layout, intervene,
                        observe, reset, step)
from .policy import FailSafeConfig, act, solve_policy
from .data import (Trajectory, WeightedDataset, build_weights, collect_counterfactual,
                   collect_factual, estimate_ate, returns_to_go, sample_batch)
from .dt import DTConfig, DTModel, act_dt, evaluate, train

__version__ = "0.1.0"

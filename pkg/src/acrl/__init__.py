"""State-augmented constrained reinforcement learning under the average-reward criterion."""

__version__ = "0.1.0"

from .dual import dual_update, lagrangian_reward
from .envs import ContinuousMonitoringEnv, TabularCmdp, monitoring_mdp3
from .executor import ExecConfig, execute_acrl
from .oracle import solve_cmdp_lp
from .policy import ExactMaximizerPolicy, RbfPolicy
from .trainer import TrainConfig, train_acrl

__all__ = [
    "__version__",
    "ContinuousMonitoringEnv",
    "ExactMaximizerPolicy",
    "ExecConfig",
    "RbfPolicy",
    "TabularCmdp",
    "TrainConfig",
    "dual_update",
    "execute_acrl",
    "lagrangian_reward",
    "monitoring_mdp3",
    "solve_cmdp_lp",
    "train_acrl",
]

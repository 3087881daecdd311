"""KL-regularised policy optimisation (APA, AWR, PPO) on exactly solvable token MDPs."""
from .estimation import AdvantageEstimate, ValueFunction, fit_value, gae, value_loss
from .exceptions import (
    AdvalignError,
    ConfigError,
    DivergedValueFit,
    NonFiniteParameters,
    StateSpaceTooLarge,
    WeightOverflow,
)
from .losses import AdaptiveKlController, LossSpec, apa_loss, awr_loss, kl_controller_update, penalized_reward, ppo_loss
from .mdp import ExactEvaluation, TokenMdp, evaluate_exact, kl_divergence, random_policy, random_token_mdp
from .oracle import (
    apa_f_divergence,
    awr_fixed_point,
    exact_regularized_iteration,
    objective_F,
    target_policy,
    z_diagnostic,
)
from .optim import AdamState, optimize_step
from .policy import SoftmaxPolicy
from .rollouts import RolloutBatch, sample_rollouts
from .trainer import TrainConfig, TrainMetrics, train, train_offline

__version__ = "0.1.0"

__all__ = [
    "AdamState", "AdaptiveKlController", "AdvalignError", "AdvantageEstimate", "ConfigError",
    "DivergedValueFit", "ExactEvaluation", "LossSpec", "NonFiniteParameters", "RolloutBatch",
    "SoftmaxPolicy", "StateSpaceTooLarge", "TokenMdp", "TrainConfig", "TrainMetrics", "ValueFunction",
    "WeightOverflow", "apa_f_divergence", "apa_loss", "awr_fixed_point", "awr_loss", "evaluate_exact",
    "exact_regularized_iteration", "fit_value", "gae", "kl_controller_update", "kl_divergence",
    "objective_F", "optimize_step", "penalized_reward", "ppo_loss", "random_policy", "random_token_mdp",
    "sample_rollouts", "target_policy", "train", "train_offline", "value_loss", "z_diagnostic",
]

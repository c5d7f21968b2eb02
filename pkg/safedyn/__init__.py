from .config import TrainConfig, load_config
from .diffcore import Tape, backward, forward, grad_check
from .envs import CMDPSpec, PointHazardEnv, analytic_problem, default_layout
from .ensemble import EnsembleModel, ReplayBuffer, fit
from .pessimism import ImaginedBatch, barrier_terms, pessimistic_eval
from .lbsgd import BarrierOptState, LagrangianOptState, lagrangian_step, lbsgd_step
from .agent import Policy, evaluate, train

__version__ = "0.1.0"

__all__ = ["TrainConfig", "load_config", "Tape", "forward", "backward", "grad_check", "CMDPSpec",
           "PointHazardEnv", "analytic_problem", "default_layout", "EnsembleModel", "ReplayBuffer", "fit",
           "ImaginedBatch", "pessimistic_eval", "barrier_terms", "BarrierOptState", "LagrangianOptState",
           "lbsgd_step", "lagrangian_step", "Policy", "train", "evaluate"]

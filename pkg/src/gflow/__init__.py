"""Samplers over DAG state spaces, trained by balance losses or policy
gradients, with exact dynamic-programming evaluation at small scale.

The public surface re-exports the pieces most scripts need; the modules
group as:

- autodiff: tape-based reverse-mode gradients, MLP and table models, Adam
- envs: hyper-grid, fixed-length sequences, explicit DAGs, enumeration
- policy: masked slot policies, value estimators, checkpoints
- sampling: forward/backward rollouts, exploration mixtures, replay
- objectives: balance losses, policy-dependent step rewards, advantages
- guides: backward kernels that condition training on good endpoints
- training: per-strategy update steps and exact bound checks
- exact: dynamic-programming distributions, values, metrics, oracles
- runner / cli: config-driven experiments with CSV metrics
"""

from .envs import (EMPTY, SINK, DagEnv, Enumeration, ExplicitDag, HyperGrid,
                   SequenceEnv, random_dag, random_graded_dag)
from .errors import (ConfigError, ContractError, EnumerationLimit, GflowError,
                     MaskError, NumericFault, ShapeError)
from .policy import (BackwardPolicy, ForwardPolicy, LogZ, PolicySuite,
                     ScalarEstimator, UniformBackward, load_checkpoint,
                     make_suite, save_checkpoint)
from .sampling import MixtureSchedule, ReplayBuffer, Trajectory, sample_backward, sample_forward
from .guides import HyperGridGuide, SequenceGuide, TableGuide
from .training import (STRATEGIES, Trainer, TrainerConfig, TrustRegionConfig,
                       actor_critic_step, check_theorem_bounds,
                       guided_coupled_step, trpo_step)
from .runner import RunConfig, parse_config, run, summarize

__version__ = "0.1.0"

__all__ = [
    "EMPTY", "SINK", "DagEnv", "Enumeration", "ExplicitDag", "HyperGrid",
    "SequenceEnv", "random_dag", "random_graded_dag",
    "ConfigError", "ContractError", "EnumerationLimit", "GflowError",
    "MaskError", "NumericFault", "ShapeError",
    "BackwardPolicy", "ForwardPolicy", "LogZ", "PolicySuite",
    "ScalarEstimator", "UniformBackward", "load_checkpoint", "make_suite",
    "save_checkpoint",
    "MixtureSchedule", "ReplayBuffer", "Trajectory", "sample_backward",
    "sample_forward",
    "HyperGridGuide", "SequenceGuide", "TableGuide",
    "STRATEGIES", "Trainer", "TrainerConfig", "TrustRegionConfig",
    "actor_critic_step", "check_theorem_bounds", "guided_coupled_step",
    "trpo_step",
    "RunConfig", "parse_config", "run", "summarize",
    "__version__",
]

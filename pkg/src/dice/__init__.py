"""Multi-agent policy training with shared rollouts and diversity-regularized gradient fusion."""
from .envs import GridMaze, LineReturn, PointGoal2D, make_env
from .fusion import fuse
from .numerics import ConfigurationError, NonFiniteError
from .offpolicy import OffPolicyConfig, OffPolicyTeam
from .onpolicy import OnPolicyConfig, Team, train_iteration

__version__ = "0.1.0"

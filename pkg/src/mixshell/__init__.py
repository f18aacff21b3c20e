"""Mixed shell and dyadic tree cascade models with Gaussian invariance tooling."""

from .errors import DimensionError, IntegrationError, ParameterError
from .integrate import IntegratorConfig, Trajectory, energy_drift, integrate, integrate_ensemble
from .measures import GaussianSpec, invariance_test, sample_ensemble
from .shell_model import ShellParams, eval_rhs, make_standard_params
from .tree_model import TreeParams, TreeTopology, make_regular_tree, make_tree_params, tree_eval_rhs

__version__ = "0.1.0"

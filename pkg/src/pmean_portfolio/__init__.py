"""Policy portfolios that stay near-optimal for every generalized p-mean welfare function."""

from .mdp import FiniteMDP, ser_value, esr_value_exact, esr_value_mc, expected_return_vector
from .oracle import ESR, SER, Oracle
from .policy import Policy, PolicySet, load_policy_set, save_policy_set
from .portfolio import (
    Portfolio,
    alpha_sweep,
    approximation_factor,
    budget_constrained_portfolio,
    line_search,
    p_mean_portfolio,
    random_p_baseline,
    random_policy_baseline,
)
from .welfare import NEG_INF, PValue, log_p_mean, p_floor, p_mean, slope_bound

__version__ = "0.1.0"

"""Debiased estimation and bootstrap inference for linear programs with noisy constraints."""
from .debias import (DebiasedEstimate, ExpansionOracle, build_oracle, debiased_estimate,
                     expansion_residual, oracle_d_star, oracle_M_star, oracle_sigma)
from .errors import *  # noqa: F401,F403
from .inference import (SamplingModel, bootstrap_ensemble, ci_entrywise, coverage_experiment,
                        ks_normal, sample_empirical, uniform_band)
from .lp import (StandardFormLP, check_assumptions, null_space_basis, plug_in_2x2, solve_lp,
                 zero_set)
from .penalized import (SolverOptions, dual_feasible_start, duality_gap, solve_path,
                        solve_penalized)
from .penalty import conjugate_prime, make_penalty, verify_conjugacy
from .transport import (OtProblem, colocalization, entropic_bias_profile, grid_cost, ot_to_lp,
                        rebalance_to_lp, sinkhorn)

__version__ = "0.1.0"

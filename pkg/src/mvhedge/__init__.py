"""Mean-variance hedging under restricted information.

Computes L2-optimal hedging strategies when only part of the market noise is
observable, via three mutually certifying routes: a martingale operator
equation on a binary observation tree, a backward system for the value
processes, and a nonlinear parabolic PDE for the diffusion model, all checked
against closed forms and an exact small-tree least-squares oracle.
"""

from .bsde import (BsdeSolution, fb_strategy, reconstruct_operator_solution,
                   solve_fbsde, solve_V, solve_VH, value_process)
from .errors import (CapabilityError, ConditionError, ConfigError,
                     ExtrapolationError, InvariantViolation, LatticeSizeError,
                     MvhError, NewtonError, ResourceError, ShapeError,
                     SolverError)
from .lattice import (AdaptedField, GkwParts, ObservationLattice, TimeGrid,
                      build_lattice, conditional_expectation, discrete_gkw,
                      induced_martingale, martingale_defect,
                      stochastic_integral)
from .model import DiffusionSpec, PayoffSpec, make_payoff
from .montecarlo import (ConstantRule, CurveRule, FullInfoTree, HedgeReport,
                         LatticeRule, MarkovPdeRule, PathBatch, ShiftedRule,
                         SignalRule, StrategyRule, hedging_error, lsq_oracle,
                         markov_tree_strategy, perturbation_test,
                         simulate_paths, terminal_wealth)
from .operator import (OperatorSolution, TildeInputs, apply_operator_A,
                       compute_tilde_inputs, energy_identity_gap,
                       hedged_wealth, optimal_strategy,
                       solve_martingale_equation)
from .pde import (PdeGrid, closed_form_rho0, feynman_kac_check,
                  markov_representation, nu_root, ode_u, solve_value_pde)
from .runconfig import RunConfig, load_config, parse_expression

__version__ = "0.1.0"

"""Risk-averse PDE-constrained optimization with reduced-basis neural
surrogates: semilinear elliptic forward model, Matern random fields,
derivative-informed surrogate training, and smoothed-CVaR SAA solvers."""

from .config import ExperimentConfig, desk_config, load_config, paper_config
from .fem import (StructuredMesh, TriangularFactors, apply_dirichlet,
                  assemble_mass, assemble_stiffness, build_mesh, factorize,
                  weighted_inner, weighted_norm)
from .forward import (NonConvergenceError, SemilinearProblem, SourceBasis,
                      StateSolution, build_source_basis, performance_gradient,
                      reduced_control_jacobian, solve_state)
from .pod import PODBasis, ReducedTrackingForm, build_tracking_form, compute_pod
from .randfield import (FieldSample, KLEBasis, MaternSpec, build_kle,
                        sample_field)
from .riskopt import (OptResult, PDEEvaluator, RiskSpec, SAAProblem,
                      SurrogateEvaluator, TrackingTarget, mc_cvar, mc_var,
                      minimize, q_tracking, saa_objective, splus, splus_d1)
from .surrogate import (NetworkSpec, SurrogateModel, TrainConfig,
                        TrainingDataset, evaluate_errors, init_model,
                        loss_and_grad, train)

__version__ = "0.1.0"

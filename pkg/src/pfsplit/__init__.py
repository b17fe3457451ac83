"""Operator-splitting samplers for diffusion probability-flow ODEs.

The backward ODE is split into an exact linear flow and a score-driven
flow advanced by explicit Runge-Kutta stages; compositions of the two give
first-, second-, and fourth-order samplers. The package also provides
analytic Gaussian score oracles, a small trainable noise-prediction MLP,
and a KDE + Monte-Carlo total-variation harness for convergence studies.
"""

__version__ = "0.1.0"

from .errors import ConfigError, NumericError, PfsplitError
from .schedules import (LinearBetaSchedule, NoiseSchedule, ScheduleEval,
                        eval_schedule, integrating_factor)
from .score_fields import (CallableScoreField, ExactGaussianScore, GaussianData,
                           MarginalLaw, ScoreField, exact_score, marginal_law,
                           score_jacobian)
from .mlp_score import (LossReport, MLPParams, MLPScoreField, TrainConfig,
                        load_checkpoint, mlp_forward, optimal_loss_oracle,
                        save_checkpoint, train_noise_predictor)
from .samplers import (EULER, LIE, MIDPOINT, RK4, STRANG, YOSHIDA4, RKTableau,
                       SamplerRun, SplittingScheme, composition_step, drift_b,
                       generate_samples, get_scheme, get_tableau, lie_step,
                       rk_advance, strang_step, strang_step_closed_form)
from .metrics import (ConvergenceReport, KDEModel, ScoreErrorReport, SlopeFit,
                      TVEstimate, epsilon_jacobian_estimate,
                      epsilon_score_estimate, fit_loglog_slope, kde_fit,
                      trajectory_global_error, tv_monte_carlo)
from .harness import (ExperimentConfig, RunManifest, derive_seed, emit_report,
                      load_config, run_convergence_experiment, run_order_study,
                      run_training_sweep)

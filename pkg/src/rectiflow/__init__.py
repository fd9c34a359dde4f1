"""Diffusion vs. rectified-flow generative models: training, sampling, trajectory geometry, benchmarks."""
from .backbone import BackboneConfig, Checkpoint, build, load, load_model, param_count, preset_config, save
from .benchmark import (BenchReport, FrechetFeatureSpace, energy_proxy, frechet_distance, latency_report,
                        measure_latency, solver_sensitivity, step_ablation)
from .data import ImageDataset, ToyDataset, batch_iter, load_mnist_idx, make_toy
from .errors import (AnalysisError, ComparisonInvalidError, ConfigError, DegeneratePlaneError,
                     DegenerateTrajectoryError, DomainError, FormatError, IntegrationFault, IntegrityError,
                     LengthMismatchError, RectiflowError, ShapeError, TrainingFault)
from .geometry import (CurvatureStats, curvature_stats, kinetic_energy, latent_interpolation, project_field,
                       straightness_ratio, straightness_second_derivative)
from .samplers import Trajectory, generate, integrate_euler, integrate_rk4, sample_ancestral, sample_ddim
from .schedules import (NoiseSchedule, diffusion_forward, fm_interpolate, fm_target_velocity,
                        linear_beta_schedule)
from .training import TrainConfig, diffusion_loss, fm_loss, grad_check, train

__version__ = "0.1.0"

from .denoiser import EPSILON, VECTOR_FIELD, CheckpointError, DenoiserModel, FeatureMap, time_embedding
from .elbo import gaussian_elbo_terms
from .objectives import (ChunkSample, cfm_build, cfm_loss_grad, diffusion_loss_grad, pi0_loss_grad,
                         pi0_tau_sample, regression_loss_grad)
from .sampling import DEFAULT_FLOW_STEPS, ddpm_sample, ddpm_step, euler_integrate
from .schedule import BadRange, NoiseSchedule, StepOutOfRange, make_schedule, noise_sample, schedule_from_betas
from .train import Diverged, FitResult, fit_denoiser

__all__ = [
    "EPSILON", "VECTOR_FIELD", "CheckpointError", "DenoiserModel", "FeatureMap", "time_embedding",
    "gaussian_elbo_terms", "ChunkSample", "cfm_build", "cfm_loss_grad", "diffusion_loss_grad",
    "pi0_loss_grad", "pi0_tau_sample", "regression_loss_grad", "DEFAULT_FLOW_STEPS", "ddpm_sample",
    "ddpm_step", "euler_integrate", "BadRange", "NoiseSchedule", "StepOutOfRange", "make_schedule",
    "noise_sample", "schedule_from_betas", "Diverged", "FitResult", "fit_denoiser",
]

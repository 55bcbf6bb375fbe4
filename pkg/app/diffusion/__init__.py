from app.diffusion.rng import Rng
from app.diffusion.schedule import NoiseSchedule, coefficient_sum_gap, make_schedule, schedule_from_config
from app.diffusion.process import (
    DiffusionSample,
    PosteriorParams,
    p_sample_step,
    posterior_params,
    predict_y0,
    q_sample,
    q_step,
    sample,
    training_loss,
)

__all__ = [
    "Rng",
    "NoiseSchedule",
    "coefficient_sum_gap",
    "make_schedule",
    "schedule_from_config",
    "DiffusionSample",
    "PosteriorParams",
    "p_sample_step",
    "posterior_params",
    "predict_y0",
    "q_sample",
    "q_step",
    "sample",
    "training_loss",
]

"""Learned predictors and their training and sampling code."""

from .diffusion import ddpm_sample, gaussian_eps, sample_f_e, sample_f_e_batch
from .predictors import LearnedPredictor, OraclePredictor, PredictionError, Predictor
from .schedule import DiffusionConfig, noise_schedule, q_sample
from .training import (F_E_TRAIN_PAPER, F_R_TRAIN_PAPER, TrainConfig, TrainingError, TrainResult,
                       TripletDataset, train_f_e, train_f_r)
from .unet import F_E_PAPER, F_R_PAPER, UNet, UNetConfig

__all__ = [
    "DiffusionConfig", "F_E_PAPER", "F_E_TRAIN_PAPER", "F_R_PAPER", "F_R_TRAIN_PAPER", "LearnedPredictor",
    "OraclePredictor", "PredictionError", "Predictor", "TrainConfig", "TrainResult", "TrainingError",
    "TripletDataset", "UNet", "UNetConfig", "ddpm_sample", "gaussian_eps", "noise_schedule", "q_sample",
    "sample_f_e", "sample_f_e_batch", "train_f_e", "train_f_r",
]

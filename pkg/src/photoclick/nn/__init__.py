"""Small numpy networks for parameter inference from click records."""
from .layers import MGU, Dense, LeakyReLU
from .losses import kl_divergence, loss_ce, loss_mse, loss_mse_lambda, loss_nll
from .model import NeuralModel, predict_gaussian, predict_point, predict_posterior
from .train import Adam, TrainConfig, build_and_train, train

__all__ = [
    "Adam", "Dense", "LeakyReLU", "MGU", "NeuralModel", "TrainConfig", "build_and_train",
    "kl_divergence", "loss_ce", "loss_mse", "loss_mse_lambda", "loss_nll",
    "predict_gaussian", "predict_point", "predict_posterior", "train",
]

"""Desk-scale federated language-model pre-training: autodiff, tiny transformer,
client/aggregator simulation, analytic wall-time model and experiment harness."""

from fedlm.errors import FedLMError
from fedlm.model import ModelConfig, init_model, loss_and_grad
from fedlm.tensor import ParamVector, Tensor

__version__ = "0.1.0"

__all__ = [
    "FedLMError",
    "ModelConfig",
    "ParamVector",
    "Tensor",
    "init_model",
    "loss_and_grad",
    "__version__",
]
